"""Keypoint detection, keypoint files, descriptor matching and mask rejection."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, NamedTuple, Optional

import numpy as np
from scipy import ndimage

from .errors import DimensionMismatch, EmptyImage, FormatError, NormalizationError
from .imaging import as_image, luminance

DESCRIPTOR_GRID = 8
NORM_TOL = 1e-3


class Keypoint(NamedTuple):
    x: float
    y: float
    score: float
    descriptor: np.ndarray


class Match(NamedTuple):
    index_a: int
    index_b: int
    distance: float


@dataclass
class KeypointSet:
    """Keypoints stored column-wise: ``xy`` is ``(N, 2)``, ``descriptors`` ``(N, D)``."""

    xy: np.ndarray
    scores: np.ndarray
    descriptors: np.ndarray
    frame_id: str = ""

    def __post_init__(self):
        self.xy = np.asarray(self.xy, dtype=float).reshape(-1, 2)
        self.scores = np.asarray(self.scores, dtype=float).reshape(-1)
        self.descriptors = np.asarray(self.descriptors, dtype=float)
        if self.descriptors.ndim != 2:
            self.descriptors = self.descriptors.reshape(len(self.xy), -1)
        if not (len(self.xy) == len(self.scores) == len(self.descriptors)):
            raise DimensionMismatch("keypoint arrays have inconsistent lengths")

    @classmethod
    def empty(cls, descriptor_dim: int = DESCRIPTOR_GRID ** 2, frame_id: str = "") -> "KeypointSet":
        return cls(np.zeros((0, 2)), np.zeros(0), np.zeros((0, descriptor_dim)), frame_id)

    @property
    def descriptor_dim(self) -> int:
        return self.descriptors.shape[1]

    def __len__(self) -> int:
        return len(self.xy)

    def __getitem__(self, i: int) -> Keypoint:
        return Keypoint(float(self.xy[i, 0]), float(self.xy[i, 1]),
                        float(self.scores[i]), self.descriptors[i])

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def subset(self, keep) -> "KeypointSet":
        keep = np.asarray(keep)
        return KeypointSet(self.xy[keep], self.scores[keep], self.descriptors[keep], self.frame_id)


@dataclass(frozen=True)
class DetectorConfig:
    score_threshold: float = 0.015
    nms_radius: float = 8.0
    max_keypoints: int = 1000
    patch_size: int = 16
    # Gaussian integration scale of the structure tensor
    tensor_sigma: float = 1.5

    def __post_init__(self):
        if self.patch_size % DESCRIPTOR_GRID or self.patch_size <= 0:
            raise ValueError("patch_size must be a positive multiple of 8")
        if self.nms_radius <= 0 or self.max_keypoints < 0:
            raise ValueError("nms_radius must be positive and max_keypoints non-negative")


def corner_response(img: np.ndarray, tensor_sigma: float = 1.5) -> np.ndarray:
    """Minimum eigenvalue of the structure tensor, scaled to [0, 1].

    Sobel gradients divided by 8 are bounded by 0.5 per axis on [0, 1]
    images, so the smaller eigenvalue never exceeds 0.25.
    """
    lum = luminance(img)
    ix = ndimage.sobel(lum, axis=1, mode="reflect") / 8.0
    iy = ndimage.sobel(lum, axis=0, mode="reflect") / 8.0
    sxx = ndimage.gaussian_filter(ix * ix, tensor_sigma, mode="reflect")
    syy = ndimage.gaussian_filter(iy * iy, tensor_sigma, mode="reflect")
    sxy = ndimage.gaussian_filter(ix * iy, tensor_sigma, mode="reflect")
    half_tr = 0.5 * (sxx + syy)
    disc = np.sqrt(0.25 * (sxx - syy) ** 2 + sxy ** 2)
    return np.clip(4.0 * (half_tr - disc), 0.0, 1.0)


def _disk(radius: float) -> np.ndarray:
    r = int(math.ceil(radius))
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    return xx * xx + yy * yy <= radius * radius


def _subpixel_offsets(score: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Per-axis vertex of a 1-D parabola through the 3-sample neighbourhood."""
    h, w = score.shape
    out = np.zeros((len(rows), 2))
    for axis, (lo, hi) in enumerate(((0, w), (0, h))):
        if axis == 0:
            inner = (cols > lo) & (cols < hi - 1)
            c = score[rows, cols]
            m = score[rows, np.clip(cols - 1, 0, w - 1)]
            p = score[rows, np.clip(cols + 1, 0, w - 1)]
        else:
            inner = (rows > lo) & (rows < hi - 1)
            c = score[rows, cols]
            m = score[np.clip(rows - 1, 0, h - 1), cols]
            p = score[np.clip(rows + 1, 0, h - 1), cols]
        denom = m - 2.0 * c + p
        with np.errstate(divide="ignore", invalid="ignore"):
            off = np.where(denom < 0, 0.5 * (m - p) / denom, 0.0)
        out[:, axis] = np.where(inner, np.clip(off, -0.5, 0.5), 0.0)
    return out


def _greedy_nms(xy: np.ndarray, order: np.ndarray, radius: float, limit: int) -> List[int]:
    """Keep points in ``order`` whose distance to every kept point is >= radius."""
    kept: List[int] = []
    buckets: dict = {}
    r2 = radius * radius
    for idx in order:
        if len(kept) >= limit:
            break
        x, y = xy[idx]
        cx, cy = int(x // radius), int(y // radius)
        clash = False
        for bx in (cx - 1, cx, cx + 1):
            for by in (cy - 1, cy, cy + 1):
                for j in buckets.get((bx, by), ()):
                    dx, dy = xy[j, 0] - x, xy[j, 1] - y
                    if dx * dx + dy * dy < r2:
                        clash = True
                        break
                if clash:
                    break
            if clash:
                break
        if not clash:
            kept.append(int(idx))
            buckets.setdefault((cx, cy), []).append(int(idx))
    return kept


def patch_descriptors(lum: np.ndarray, xy: np.ndarray, patch_size: int):
    """Zero-mean, unit-norm 8x8 block averages of the patch around each point.

    Returns ``(descriptors, ok)`` where ``ok`` flags points whose patch fits
    inside the image and is not flat.
    """
    h, w = lum.shape
    half = patch_size // 2
    cx = np.round(xy[:, 0]).astype(int)
    cy = np.round(xy[:, 1]).astype(int)
    ok = (cx - half >= 0) & (cx + half <= w) & (cy - half >= 0) & (cy + half <= h)
    dim = DESCRIPTOR_GRID ** 2
    desc = np.zeros((len(xy), dim))
    block = patch_size // DESCRIPTOR_GRID
    for k in np.flatnonzero(ok):
        patch = lum[cy[k] - half:cy[k] + half, cx[k] - half:cx[k] + half]
        small = patch.reshape(DESCRIPTOR_GRID, block, DESCRIPTOR_GRID, block).mean(axis=(1, 3))
        v = small.ravel() - small.mean()
        n = np.linalg.norm(v)
        if n < 1e-10:
            ok[k] = False
            continue
        desc[k] = v / n
    return desc, ok


def detect_keypoints(img, cfg: DetectorConfig = DetectorConfig(),
                     exclude: Optional[np.ndarray] = None, frame_id: str = "") -> KeypointSet:
    """Corner keypoints with patch descriptors.

    ``exclude`` is an optional boolean mask of pixels where no keypoint may
    be proposed (e.g. outside the circular field of view); the score map is
    zeroed there before non-maximum suppression.
    """
    img = np.asarray(img, dtype=float)
    if img.size == 0:
        raise EmptyImage("cannot detect keypoints on an empty image")
    img = as_image(img)
    lum = luminance(img)
    score = corner_response(lum, cfg.tensor_sigma)
    if exclude is not None:
        if exclude.shape != score.shape:
            raise DimensionMismatch("exclude mask does not match the image")
        score = np.where(exclude, 0.0, score)

    peaks = (score >= ndimage.maximum_filter(score, footprint=_disk(cfg.nms_radius), mode="constant"))
    peaks &= score >= cfg.score_threshold
    peaks &= score > 0
    rows, cols = np.nonzero(peaks)
    if len(rows) == 0 or cfg.max_keypoints == 0:
        return KeypointSet.empty(frame_id=frame_id)

    offsets = _subpixel_offsets(score, rows, cols)
    xy = np.column_stack([cols + offsets[:, 0], rows + offsets[:, 1]])
    vals = score[rows, cols]
    desc, ok = patch_descriptors(lum, xy, cfg.patch_size)
    xy, vals, desc = xy[ok], vals[ok], desc[ok]

    # strongest first; ties broken by raster position for determinism
    order = np.lexsort((xy[:, 0], xy[:, 1], -vals))
    kept = _greedy_nms(xy, order, cfg.nms_radius, cfg.max_keypoints)
    return KeypointSet(xy[kept], vals[kept], desc[kept], frame_id)


# ---------------------------------------------------------------------------
# keypoint files
# ---------------------------------------------------------------------------


def save_keypoints(path, kps: KeypointSet) -> None:
    doc = {
        "frame_id": kps.frame_id,
        "descriptor_dim": int(kps.descriptor_dim),
        "keypoints": [
            {"x": float(x), "y": float(y), "score": float(s), "descriptor": d.tolist()}
            for (x, y), s, d in zip(kps.xy, kps.scores, kps.descriptors)
        ],
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc))


def load_keypoints(path) -> KeypointSet:
    try:
        doc = json.loads(Path(path).read_text())
        dim = int(doc["descriptor_dim"])
        rows = doc["keypoints"]
        xy = np.array([[float(k["x"]), float(k["y"])] for k in rows]).reshape(-1, 2)
        scores = np.array([float(k["score"]) for k in rows])
        desc = np.array([[float(v) for v in k["descriptor"]] for k in rows]).reshape(len(rows), -1 if rows else dim)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"malformed keypoint file {path}: {exc}") from exc
    if len(rows) == 0:
        return KeypointSet.empty(dim, str(doc.get("frame_id", "")))
    if desc.shape[1] != dim:
        raise FormatError(f"descriptor length {desc.shape[1]} != descriptor_dim {dim}")
    norms = np.linalg.norm(desc, axis=1)
    bad = np.abs(norms - 1.0) > NORM_TOL
    if bad.any():
        raise NormalizationError(
            f"{int(bad.sum())} descriptors deviate from unit norm (first: {norms[bad][0]:.4f})")
    return KeypointSet(xy, scores, desc / norms[:, None], str(doc.get("frame_id", "")))


# ---------------------------------------------------------------------------
# rejection and matching
# ---------------------------------------------------------------------------


def dilate_mask(mask: np.ndarray, radius: float) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if radius <= 0:
        return mask
    return ndimage.binary_dilation(mask, structure=_disk(radius))


def reject_irrelevant(kps: KeypointSet, mask: np.ndarray, dilation: float = 2.0,
                      frame_shape=None) -> KeypointSet:
    """Drop keypoints whose rounded position falls in the dilated mask."""
    mask = np.asarray(mask, dtype=bool)
    if frame_shape is not None and tuple(frame_shape[:2]) != mask.shape:
        raise DimensionMismatch(f"mask {mask.shape} does not match frame {tuple(frame_shape[:2])}")
    if len(kps) == 0:
        return kps
    grown = dilate_mask(mask, dilation)
    h, w = grown.shape
    cx = np.clip(np.round(kps.xy[:, 0]).astype(int), 0, w - 1)
    cy = np.clip(np.round(kps.xy[:, 1]).astype(int), 0, h - 1)
    return kps.subset(~grown[cy, cx])


@dataclass(frozen=True)
class MatcherConfig:
    max_distance: float = 0.9
    ratio: float = 0.9


def descriptor_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d2 = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    return np.sqrt(np.maximum(d2, 0.0))


def match_descriptors(a: KeypointSet, b: KeypointSet, cfg: MatcherConfig = MatcherConfig()) -> List[Match]:
    """Mutual nearest neighbours passing an absolute and a ratio test.

    The ratio test is applied from both sides so that the result does not
    depend on argument order.
    """
    if a.descriptor_dim != b.descriptor_dim:
        raise DimensionMismatch(f"descriptor dims differ: {a.descriptor_dim} vs {b.descriptor_dim}")
    if len(a) == 0 or len(b) == 0:
        return []
    d = descriptor_distances(a.descriptors, b.descriptors)
    best_b = np.argmin(d, axis=1)
    best_a = np.argmin(d, axis=0)
    ia = np.arange(len(a))
    mutual = best_a[best_b] == ia
    dist = d[ia, best_b]

    def second_best(m: np.ndarray, axis: int) -> np.ndarray:
        if m.shape[axis] < 2:
            return np.full(m.shape[1 - axis], np.inf)
        return np.partition(m, 1, axis=axis).take(1, axis=axis)

    second_row = second_best(d, 1)
    second_col = second_best(d, 0)[best_b]
    keep = mutual & (dist <= cfg.max_distance)
    keep &= dist <= cfg.ratio * second_row
    keep &= dist <= cfg.ratio * second_col
    return [Match(int(i), int(best_b[i]), float(dist[i])) for i in np.flatnonzero(keep)]
