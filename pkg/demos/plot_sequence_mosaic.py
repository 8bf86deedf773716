"""
From a sequence to a mosaic
===========================

Registers a synthetic sequence, chains the pairwise transforms into the
first frame's coordinates, blends with exposure fusion, and scores the
registration with SSIM between frames ``n`` apart.

Run with an output directory argument to keep the PNGs (default
``demo_out``).
"""
import sys
from pathlib import Path

import numpy as np

from fetomosaic import chain, compute_canvas, eval_s, gt_corner_error, make_sequence, register_sequence, render_mosaic
from fetomosaic.registration import CornerDetector
from fetomosaic.mosaic import save_mosaic

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out") / "mosaic"

##############################################################################
# 60 frames keep the demo under a minute.

seq = make_sequence(n_frames=60, seed=1)
trace = register_sequence(seq.frames, None, CornerDetector(fov=seq.fov_mask))
print(f"accepted {len(trace.accepted())} of {len(trace.entries)} pairs")

##############################################################################
# ``chain`` returns, for every frame, the map into anchor coordinates.
# The canvas is the bounding box of all warped corners.

absolute = chain(trace, anchor=0)
layout = compute_canvas(absolute, (448, 448))
fused = render_mosaic(seq.frames, layout, seq.fov_mask)
print("canvas", layout.canvas_width, "x", layout.canvas_height, "files:", save_mosaic(out, fused, layout))

##############################################################################
# Weighting never leaves a gap: normalised weights sum to one on coverage.

print("weight sum range on coverage:", fused.weight_sum[fused.coverage].min(), fused.weight_sum[fused.coverage].max())

##############################################################################
# s over n frames.  Larger n compounds more steps, which exposes drift.

for n in (1, 3, 5):
    print(f"s(n={n}) = {eval_s(seq.frames, trace, n, fov=seq.fov_mask).mean(n):.4f}")

err = gt_corner_error(trace, seq.gt_pairwise, (448, 448))
print(f"drift after {len(err) - 1} steps: {err[-1]:.3f} px (max {np.nanmax(err):.3f})")
