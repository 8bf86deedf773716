"""
Bringing your own keypoints
===========================

A learned detector plugs in through JSON keypoint files, one per frame,
named after the frame.  Here the built-in detector writes the files, and
a file-backed source reads them back.  Descriptors of any length work as
long as each one has unit norm.
"""
import tempfile
from pathlib import Path

from fetomosaic import make_sequence, register_sequence, save_keypoints
from fetomosaic.registration import CornerDetector, KeypointFileSource

seq = make_sequence(n_frames=5, seed=3)
ids = [f"{k:06d}" for k in range(len(seq))]
det = CornerDetector(fov=seq.fov_mask)

with tempfile.TemporaryDirectory() as tmp:
    for frame, fid in zip(seq.frames, ids):
        save_keypoints(Path(tmp) / f"{fid}.json", det(frame, fid))
    print(Path(tmp, ids[0] + ".json").read_text()[:160], "...")
    trace = register_sequence(seq.frames, None, KeypointFileSource(tmp), frame_ids=ids)

for e in trace.entries:
    print(e.source, "->", e.target, e.result.status, e.result.inlier_count, "inliers")
