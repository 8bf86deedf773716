"""
Skipping bad frames
===================

One blacked-out frame: the pair into it fails, and the driver tries the
next frame instead.  Five in a row: no candidate works and registration
stops at the last clean frame.
"""
from fetomosaic import corrupt_frames, eval_s, make_sequence, register_sequence
from fetomosaic.registration import CornerDetector

seq = make_sequence(n_frames=24, seed=2)
det = CornerDetector(fov=seq.fov_mask)


def show(trace, around):
    for e in trace.entries:
        if e.source in around:
            print(f"  {e.source:3d} -> {e.target:3d}  {e.result.status}")
    print("  terminated_at:", trace.terminated_at)


##############################################################################
# A single corruption at frame 10.

one = corrupt_frames(seq, [10], mode="blackout")
t1 = register_sequence(one.frames, None, det)
show(t1, range(8, 12))

##############################################################################
# Scoring with identity substitution for missing steps keeps every frame
# in the evaluation.

print("s(n=5) corrupted run:", round(eval_s(one.frames, t1, 5, fov=seq.fov_mask).mean(5), 4))

##############################################################################
# Five consecutive corruptions, frames 10 to 14.

five = corrupt_frames(seq, range(10, 15))
show(register_sequence(five.frames, None, det), range(9, 10))
