"""Sequential keypoint-based video mosaicking.

Consecutive frames are registered with keypoint matching and a robust affine
fit, implausible transforms are filtered out, the registered frames are
blended with exposure fusion, and registration quality is scored with SSIM
between frames ``n`` steps apart.
"""
from .geometry import (IDENTITY, Affine2D, AffineParams, FilterThresholds, compose, decompose,
                       filter_homography, invert, recompose)
from .features import (DetectorConfig, KeypointSet, MatcherConfig, detect_keypoints, load_keypoints,
                       match_descriptors, reject_irrelevant, save_keypoints)
from .registration import (CornerDetector, KeypointFileSource, LMConfig, RansacConfig, RegistrationConfig,
                           RegistrationTrace, estimate_affine_ransac, lm_refine, register_pair,
                           register_sequence, solve_affine_exact)
from .mosaic import FusionConfig, blend_exposure_fusion, chain, compute_canvas, render_mosaic, warp
from .metrics import EvalConfig, SsimConfig, eval_s, gaussian_smooth, gt_corner_error, ssim
from .synth import corrupt_frames, generate_sequence, generate_texture, make_sequence

__version__ = "0.1.0"
