"""Chaining pairwise transforms, canvas layout, warping and exposure fusion."""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional, Sequence

import cv2
import numpy as np
from scipy import ndimage

from .errors import CanvasMismatch, EmptyInput, EmptyLayout
from .geometry import IDENTITY, Affine2D, compose, invert
from .imaging import bilinear_sample, luminance, save_mask, save_png
from .registration import RegistrationTrace

# ---------------------------------------------------------------------------
# chaining
# ---------------------------------------------------------------------------


def chain_forward(trace: RegistrationTrace, identity_substitution: bool = False) -> List[Optional[Affine2D]]:
    """``out[j]`` maps frame 0 points onto frame ``j`` (``H_{0->j}``).

    Only accepted entries are followed.  With ``identity_substitution`` every
    frame without an accepted incoming step inherits the transform of the
    previous frame, i.e. the missing step is taken to be the identity.
    """
    n = trace.frame_count
    fwd: List[Optional[Affine2D]] = [None] * n
    if n == 0:
        return fwd
    fwd[0] = IDENTITY
    incoming = {}
    for e in trace.entries:
        if e.result.accepted:
            incoming[e.target] = e
    for j in range(1, n):
        e = incoming.get(j)
        if e is not None and fwd[e.source] is not None:
            fwd[j] = compose(e.result.transform, fwd[e.source])
        elif identity_substitution:
            fwd[j] = fwd[j - 1]
    return fwd


def chain(trace: RegistrationTrace, anchor: int = 0, identity_substitution: bool = False) -> List[Optional[Affine2D]]:
    """Absolute transforms mapping each frame into ``anchor`` coordinates.

    Frames the trace never reached are ``None`` unless identity substitution
    is requested.
    """
    if not 0 <= anchor < trace.frame_count:
        raise IndexError(f"anchor {anchor} outside [0, {trace.frame_count})")
    fwd = chain_forward(trace, identity_substitution)
    if fwd[anchor] is None:
        raise ValueError(f"anchor frame {anchor} is not registered")
    to_anchor = fwd[anchor]
    return [None if f is None else compose(to_anchor, invert(f)) for f in fwd]


# ---------------------------------------------------------------------------
# layout and warping
# ---------------------------------------------------------------------------


def frame_corners(width: int, height: int) -> np.ndarray:
    return np.array([[0.0, 0.0], [width - 1.0, 0.0], [0.0, height - 1.0], [width - 1.0, height - 1.0]])


@dataclass
class MosaicLayout:
    anchor_index: int
    absolute: List[Optional[Affine2D]]
    canvas_offset: tuple
    canvas_width: int
    canvas_height: int

    @property
    def shape(self) -> tuple:
        return (self.canvas_height, self.canvas_width)

    def to_canvas(self, k: int) -> Affine2D:
        return compose(Affine2D.translation(*self.canvas_offset), self.absolute[k])

    def to_dict(self) -> dict:
        return {
            "anchor_index": self.anchor_index,
            "canvas_width": self.canvas_width,
            "canvas_height": self.canvas_height,
            "canvas_offset": list(self.canvas_offset),
            "transforms": [None if a is None else a.to_list() for a in self.absolute],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "MosaicLayout":
        return cls(int(doc["anchor_index"]),
                   [None if t is None else Affine2D.from_list(t) for t in doc["transforms"]],
                   tuple(float(v) for v in doc["canvas_offset"]),
                   int(doc["canvas_width"]), int(doc["canvas_height"]))


def compute_canvas(absolute: Sequence[Optional[Affine2D]], frame_sizes, anchor_index: int = 0) -> MosaicLayout:
    """Integer bounding box of every present frame's warped corners.

    ``frame_sizes`` is one ``(width, height)`` pair or one per frame.
    """
    absolute = list(absolute)
    if not any(a is not None for a in absolute):
        raise EmptyLayout("no frame has a transform")
    if len(frame_sizes) == 2 and np.isscalar(frame_sizes[0]):
        frame_sizes = [tuple(frame_sizes)] * len(absolute)
    pts = np.concatenate([a.apply(frame_corners(*size)) for a, size in zip(absolute, frame_sizes) if a is not None])
    lo = np.floor(pts.min(axis=0) + 1e-9)
    hi = np.ceil(pts.max(axis=0) - 1e-9)
    width, height = (hi - lo).astype(int) + 1
    return MosaicLayout(anchor_index, absolute, (float(-lo[0]), float(-lo[1])), int(width), int(height))


def warp_image(img: np.ndarray, transform: Affine2D, out_shape, src_mask: Optional[np.ndarray] = None,
               bbox: bool = True):
    """Inverse-map ``img`` through ``transform`` (source -> output coordinates).

    Returns ``(image, validity)``.  A pixel is valid when all contributing
    bilinear taps fall inside the source and, if given, inside ``src_mask``.
    """
    h_out, w_out = out_shape[:2]
    inv = invert(transform)
    out = np.zeros((h_out, w_out) + img.shape[2:])
    valid = np.zeros((h_out, w_out), dtype=bool)
    if bbox:
        h, w = img.shape[:2]
        pts = transform.apply(frame_corners(w, h))
        x0 = max(int(math.floor(pts[:, 0].min())), 0)
        y0 = max(int(math.floor(pts[:, 1].min())), 0)
        x1 = min(int(math.ceil(pts[:, 0].max())) + 1, w_out)
        y1 = min(int(math.ceil(pts[:, 1].max())) + 1, h_out)
        if x0 >= x1 or y0 >= y1:
            return out, valid
    else:
        x0, y0, x1, y1 = 0, 0, w_out, h_out
    yy, xx = np.mgrid[y0:y1, x0:x1].astype(float)
    sx = inv.a11 * xx + inv.a12 * yy + inv.tx
    sy = inv.a21 * xx + inv.a22 * yy + inv.ty
    vals, ok = bilinear_sample(img, sx, sy)
    if src_mask is not None:
        mvals, _ = bilinear_sample(np.asarray(src_mask, dtype=float), sx, sy)
        ok &= mvals >= 1.0 - 1e-9
    vmask = ok[..., None] if img.ndim == 3 else ok
    out[y0:y1, x0:x1] = np.where(vmask, vals, 0.0)
    valid[y0:y1, x0:x1] = ok
    return out, valid


@dataclass
class WarpedFrame:
    image: np.ndarray
    validity: np.ndarray
    source_index: int


def warp(img: np.ndarray, transform: Affine2D, layout: MosaicLayout, fov: Optional[np.ndarray] = None,
         source_index: int = -1) -> WarpedFrame:
    """Warp a frame given its frame->anchor transform onto the layout canvas."""
    canvas_t = compose(Affine2D.translation(*layout.canvas_offset), transform)
    image, validity = warp_image(img, canvas_t, layout.shape, fov)
    return WarpedFrame(image, validity, source_index)


# ---------------------------------------------------------------------------
# exposure fusion
# ---------------------------------------------------------------------------

WEIGHT_FLOOR = 1e-12


@dataclass(frozen=True)
class FusionConfig:
    w_contrast: float = 1.0
    w_saturation: float = 1.0
    w_exposedness: float = 1.0
    sigma_exposedness: float = 0.2
    # None = floor(log2(min canvas side)) - 2
    pyramid_levels: Optional[int] = None
    # "fusion" or "feather" (distance-weighted average, for debugging)
    mode: str = "fusion"

    def __post_init__(self):
        exps = (self.w_contrast, self.w_saturation, self.w_exposedness)
        if min(exps) < 0 or max(exps) <= 0:
            raise ValueError("exponents must be >= 0 with at least one > 0")
        if self.mode not in ("fusion", "feather"):
            raise ValueError(f"unknown fusion mode {self.mode!r}")


def auto_levels(shape) -> int:
    return max(1, int(math.floor(math.log2(min(shape[:2])))) - 2)


def _gaussian_pyramid(img: np.ndarray, levels: int) -> List[np.ndarray]:
    pyr = [img]
    for _ in range(levels - 1):
        pyr.append(cv2.pyrDown(pyr[-1], borderType=cv2.BORDER_REFLECT101))
    return pyr


def _up(img: np.ndarray, like: np.ndarray) -> np.ndarray:
    return cv2.pyrUp(img, dstsize=(like.shape[1], like.shape[0]), borderType=cv2.BORDER_REFLECT101)


def _laplacian_pyramid(img: np.ndarray, levels: int) -> List[np.ndarray]:
    g = _gaussian_pyramid(img, levels)
    return [g[l] - _up(g[l + 1], g[l]) for l in range(levels - 1)] + [g[-1]]


def _collapse(pyr: List[np.ndarray]) -> np.ndarray:
    out = pyr[-1]
    for lev in reversed(pyr[:-1]):
        out = _up(out, lev) + lev
    return out


def fill_invalid(img: np.ndarray, valid: np.ndarray, levels: int) -> np.ndarray:
    """Extend valid content smoothly into invalid pixels (push-pull).

    Valid pixels are returned unchanged; the fill only exists so that
    Laplacian bands do not ring at the coverage boundary.
    """
    v = valid.astype(float)
    if img.ndim == 3:
        v = v[..., None]
    if v.min() > 0:
        return img
    num = [img * v]
    den = [np.broadcast_to(v, img.shape).copy() if img.ndim == 3 else v]
    for _ in range(levels):
        if min(num[-1].shape[:2]) < 2:
            break
        num.append(cv2.pyrDown(num[-1], borderType=cv2.BORDER_REFLECT101))
        den.append(cv2.pyrDown(den[-1], borderType=cv2.BORDER_REFLECT101))
    total = den[-1].sum()
    mean = num[-1].sum() / total if total > 0 else 0.0
    est = np.where(den[-1] > 1e-12, num[-1] / np.maximum(den[-1], 1e-12), mean)
    for lvl in range(len(num) - 2, -1, -1):
        up = _up(est, num[lvl])
        d = np.clip(den[lvl], 0.0, 1.0)
        est = num[lvl] + (1.0 - d) * up
    out = np.where(np.broadcast_to(v, img.shape) > 0, img, est)
    return out


def quality_weights(img: np.ndarray, valid: np.ndarray, cfg: FusionConfig = FusionConfig(),
                    filled: Optional[np.ndarray] = None) -> np.ndarray:
    """Contrast * saturation * well-exposedness (each raised to its exponent).

    Saturation is only defined for colour input; grayscale frames use 1.
    Weights are floored at a tiny positive value inside ``valid`` and are
    0 outside.
    """
    src = img if filled is None else filled
    lum = luminance(src)
    w = np.ones(valid.shape)
    if cfg.w_contrast > 0:
        contrast = np.abs(ndimage.laplace(lum, mode="mirror"))
        w = w * contrast ** cfg.w_contrast
    if cfg.w_saturation > 0 and src.ndim == 3:
        w = w * np.std(src, axis=2) ** cfg.w_saturation
    if cfg.w_exposedness > 0:
        e = np.exp(-((src - 0.5) ** 2) / (2.0 * cfg.sigma_exposedness ** 2))
        if e.ndim == 3:
            e = np.prod(e, axis=2)
        w = w * e ** cfg.w_exposedness
    return np.where(valid, w + WEIGHT_FLOOR, 0.0)


def normalize_weights(weights: Sequence[np.ndarray]) -> List[np.ndarray]:
    total = np.sum(weights, axis=0)
    return [np.divide(w, total, out=np.zeros_like(w), where=total > 0) for w in weights]


@dataclass
class FusedMosaic:
    image: np.ndarray
    coverage: np.ndarray
    # per-pixel sum of the normalised full-resolution weights (1 on coverage)
    weight_sum: np.ndarray


def _check_canvas(warped: Sequence[WarpedFrame]):
    if len(warped) == 0:
        raise EmptyInput("no frames to blend")
    shape = warped[0].image.shape
    for wf in warped:
        if wf.image.shape != shape or wf.validity.shape != shape[:2]:
            raise CanvasMismatch("warped frames do not share a canvas")
    return shape


def blend_exposure_fusion(warped: Sequence[WarpedFrame], cfg: FusionConfig = FusionConfig()) -> FusedMosaic:
    """Multiresolution exposure fusion of frames already on a shared canvas."""
    warped = list(warped)
    shape = _check_canvas(warped)
    return _fuse(lambda: iter(warped), shape, cfg)


def _fuse(frames_factory, shape, cfg: FusionConfig) -> FusedMosaic:
    """Two passes over ``frames_factory()``: weight totals, then pyramids.

    Only per-level accumulators of canvas size are kept, so memory does not
    grow with the number of frames.
    """
    levels = cfg.pyramid_levels or auto_levels(shape)
    hw = shape[:2]
    color = len(shape) == 3

    def weights_of(wf: WarpedFrame, filled: np.ndarray) -> np.ndarray:
        if cfg.mode == "feather":
            return np.where(wf.validity, ndimage.distance_transform_edt(wf.validity) + WEIGHT_FLOOR, 0.0)
        return quality_weights(wf.image, wf.validity, cfg, filled)

    total = np.zeros(hw)
    coverage = np.zeros(hw, dtype=bool)
    for wf in frames_factory():
        filled = fill_invalid(wf.image, wf.validity, levels)
        total += weights_of(wf, filled)
        coverage |= wf.validity

    def norm(w: np.ndarray) -> np.ndarray:
        return np.divide(w, total, out=np.zeros_like(w), where=total > 0)

    weight_sum = np.zeros(hw)
    if cfg.mode == "feather":
        acc = np.zeros(shape)
        for wf in frames_factory():
            wn = norm(weights_of(wf, wf.image))
            weight_sum += wn
            acc += (wn[..., None] if color else wn) * wf.image
        image = np.where(coverage[..., None] if color else coverage, np.clip(acc, 0.0, 1.0), 0.0)
        return FusedMosaic(image, coverage, weight_sum)

    num = None
    den = None
    for wf in frames_factory():
        filled = fill_invalid(wf.image, wf.validity, levels)
        wn = norm(weights_of(wf, filled))
        weight_sum += wn
        gw = _gaussian_pyramid(wn, levels)
        lp = _laplacian_pyramid(filled, levels)
        if num is None:
            num = [np.zeros_like(b) for b in lp]
            den = [np.zeros_like(g) for g in gw]
        for lvl in range(levels):
            g = gw[lvl][..., None] if color else gw[lvl]
            num[lvl] += g * lp[lvl]
            den[lvl] += gw[lvl]
    # Inside full coverage den == 1 and this is plain fusion; the division
    # only corrects the partial-coverage rim of ragged mosaics.
    bands = []
    for lvl in range(levels):
        d = den[lvl][..., None] if color else den[lvl]
        bands.append(np.divide(num[lvl], d, out=np.zeros_like(num[lvl]), where=d > 1e-12))
    fused = _collapse(bands)
    cov = coverage[..., None] if color else coverage
    image = np.where(cov, np.clip(fused, 0.0, 1.0), 0.0)
    return FusedMosaic(image, coverage, weight_sum)


def render_mosaic(frames: Sequence[np.ndarray], layout: MosaicLayout, fov: Optional[np.ndarray] = None,
                  cfg: FusionConfig = FusionConfig(), stride: int = 1, workers: int = 1) -> FusedMosaic:
    """Warp every ``stride``-th registered frame and fuse them on the layout canvas."""
    idx = [k for k in range(0, len(frames), max(1, stride)) if layout.absolute[k] is not None]
    if not idx:
        raise EmptyInput("no registered frames to render")
    shape = layout.shape + frames[idx[0]].shape[2:]

    def one(k: int) -> WarpedFrame:
        return warp(frames[k], layout.absolute[k], layout, fov, k)

    def factory() -> Iterable[WarpedFrame]:
        if workers <= 1:
            return (one(k) for k in idx)
        pool = ThreadPoolExecutor(max_workers=workers)

        def gen():
            try:
                # bounded look-ahead keeps memory flat; map preserves order
                for start in range(0, len(idx), workers):
                    yield from pool.map(one, idx[start:start + workers])
            finally:
                pool.shutdown()
        return gen()

    return _fuse(factory, shape, cfg)


def save_mosaic(out_dir, fused: FusedMosaic, layout: MosaicLayout) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_png(out / "mosaic.png", fused.image)
    save_mask(out / "coverage.png", fused.coverage)
    (out / "layout.json").write_text(json.dumps(layout.to_dict(), indent=1) + "\n")
    return {"mosaic": str(out / "mosaic.png"), "coverage": str(out / "coverage.png"),
            "layout": str(out / "layout.json")}
