"""
Registering two frames
======================

Two neighbouring frames of a synthetic sequence are registered step by
step: corner detection, descriptor matching, robust affine fitting and
the plausibility check.  The estimate is compared with the generator's
ground truth.
"""
import math

import numpy as np

from fetomosaic import CornerDetector, decompose, filter_homography, match_descriptors, make_sequence
from fetomosaic.registration import estimate_affine_ransac

##############################################################################
# A short clean sequence.  ``fov_mask`` is the circular field of view; the
# detector ignores a thin rim inside it.

seq = make_sequence(n_frames=2, seed=0)
det = CornerDetector(fov=seq.fov_mask)
a, b = det(seq.frames[0]), det(seq.frames[1])
print(f"keypoints: {len(a)} and {len(b)}")

##############################################################################
# Mutual nearest neighbours that also pass a ratio test.

matches = match_descriptors(a, b)
print(f"matches: {len(matches)}")

##############################################################################
# RANSAC over 3-point samples, then Levenberg-Marquardt on the inliers.

est = estimate_affine_ransac(matches, a, b)
print(f"inliers: {len(est.inliers)}  residual rms: {est.residual_rms:.3f} px")

##############################################################################
# Decompose into rotation, scale and translation and run the filter.

p = decompose(est.transform)
print(f"theta {math.degrees(p.theta):+.3f} deg  scales {p.sx:.4f}/{p.sy:.4f}  t ({p.tx:+.2f}, {p.ty:+.2f})")
decision = filter_homography(est.transform, frame_diag=math.hypot(448, 448))
print("filter:", "accepted" if decision else f"rejected ({decision.reason})")

##############################################################################
# Mean corner displacement against the true step.

corners = np.array([[0, 0], [447, 0], [0, 447], [447, 447.0]])
err = np.linalg.norm(est.transform.apply(corners) - seq.gt_pairwise[0].apply(corners), axis=1).mean()
print(f"corner error vs ground truth: {err:.3f} px")
