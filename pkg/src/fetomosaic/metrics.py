"""Registration quality: smoothed SSIM over n frames and ground-truth drift."""
from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy import ndimage

from .errors import MissingGroundTruth, NoOverlap
from .geometry import Affine2D, compose, invert
from .mosaic import chain, chain_forward, frame_corners, warp_image
from .registration import ACCEPTED, PairResult, RegistrationTrace, TraceEntry


def gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    if size % 2 != 1:
        raise ValueError("kernel size must be odd")
    x = np.arange(size) - size // 2
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return k / k.sum()


def _separable(img: np.ndarray, kernel: np.ndarray, mode: str = "reflect") -> np.ndarray:
    out = ndimage.correlate1d(img, kernel, axis=0, mode=mode)
    return ndimage.correlate1d(out, kernel, axis=1, mode=mode)


def gaussian_smooth(img: np.ndarray, size: int = 9, sigma: float = 1.5) -> np.ndarray:
    """Separable normalised Gaussian blur with half-sample reflection at borders."""
    return _separable(np.asarray(img, dtype=float), gaussian_kernel(size, sigma))


# ---------------------------------------------------------------------------
# SSIM
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SsimConfig:
    window: int = 11
    sigma: float = 1.5
    c1: float = 0.01 ** 2
    c2: float = 0.03 ** 2
    # "windowed" (local Gaussian statistics) or "global" (one window over the valid region)
    mode: str = "windowed"

    def __post_init__(self):
        if self.window % 2 != 1 or self.window < 1:
            raise ValueError("window must be odd")
        if self.sigma <= 0 or self.c1 <= 0 or self.c2 <= 0:
            raise ValueError("sigma, c1 and c2 must be positive")
        if self.mode not in ("windowed", "global"):
            raise ValueError(f"unknown SSIM mode {self.mode!r}")


def _ssim_formula(mu_a, mu_b, var_a, var_b, cov, c1, c2):
    return ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))


def ssim_map(a: np.ndarray, b: np.ndarray, cfg: SsimConfig = SsimConfig()) -> np.ndarray:
    """Per-pixel SSIM from Gaussian-weighted local statistics (single channel)."""
    k = gaussian_kernel(cfg.window, cfg.sigma)
    mu_a = _separable(a, k)
    mu_b = _separable(b, k)
    var_a = _separable(a * a, k) - mu_a ** 2
    var_b = _separable(b * b, k) - mu_b ** 2
    cov = _separable(a * b, k) - mu_a * mu_b
    return _ssim_formula(mu_a, mu_b, var_a, var_b, cov, cfg.c1, cfg.c2)


def window_support(valid: np.ndarray, window: int) -> np.ndarray:
    """Pixels whose whole window lies inside ``valid`` (outside the image counts as invalid)."""
    return ndimage.binary_erosion(valid, structure=np.ones((window, window), bool), border_value=0)


def ssim(a: np.ndarray, b: np.ndarray, valid: Optional[np.ndarray] = None,
         cfg: SsimConfig = SsimConfig()) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    valid = np.ones(a.shape[:2], bool) if valid is None else np.asarray(valid, bool)
    chans_a = [a] if a.ndim == 2 else [a[..., c] for c in range(a.shape[2])]
    chans_b = [b] if b.ndim == 2 else [b[..., c] for c in range(b.shape[2])]
    if cfg.mode == "global":
        if not valid.any():
            raise NoOverlap("no valid pixels")
        vals = []
        for ca, cb in zip(chans_a, chans_b):
            x, y = ca[valid], cb[valid]
            mx, my = x.mean(), y.mean()
            vals.append(_ssim_formula(mx, my, x.var(), y.var(), ((x - mx) * (y - my)).mean(), cfg.c1, cfg.c2))
        return float(np.mean(vals))
    support = window_support(valid, cfg.window)
    if not support.any():
        raise NoOverlap("no SSIM window fits inside the valid region")
    return float(np.mean([ssim_map(ca, cb, cfg)[support].mean() for ca, cb in zip(chans_a, chans_b)]))


# ---------------------------------------------------------------------------
# s over n frames
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EvalConfig:
    ssim: SsimConfig = field(default_factory=SsimConfig)
    smooth: bool = True
    smooth_size: int = 9
    smooth_sigma: float = 1.5
    min_overlap: float = 0.25
    identity_substitution: bool = True


@dataclass
class MetricRow:
    frame_index: int
    n: int
    s: float
    overlap_fraction: float
    flagged: bool


@dataclass
class Aggregate:
    n: int
    mean: float
    std: float
    count: int


@dataclass
class MetricReport:
    per_frame: List[MetricRow] = field(default_factory=list)

    def rows(self, n: int) -> List[MetricRow]:
        return [r for r in self.per_frame if r.n == n]

    @property
    def aggregates(self) -> Dict[int, Aggregate]:
        out = {}
        for n in sorted({r.n for r in self.per_frame}):
            vals = np.array([r.s for r in self.rows(n) if not r.flagged])
            mean = float(vals.mean()) if len(vals) else float("nan")
            std = float(vals.std()) if len(vals) else float("nan")
            out[n] = Aggregate(n, mean, std, len(vals))
        return out

    def mean(self, n: int) -> float:
        return self.aggregates[n].mean

    def quantiles(self) -> Dict[int, List[float]]:
        out = {}
        for n in sorted({r.n for r in self.per_frame}):
            vals = np.array([r.s for r in self.rows(n) if not r.flagged])
            out[n] = (np.quantile(vals, [0.0, 0.25, 0.5, 0.75, 1.0]).tolist() if len(vals)
                      else [float("nan")] * 5)
        return out

    def extend(self, other: "MetricReport") -> "MetricReport":
        self.per_frame.extend(other.per_frame)
        return self


def trace_from_transforms(pairwise: Sequence[Affine2D]) -> RegistrationTrace:
    """A trace in which every consecutive step is accepted with the given transform."""
    return RegistrationTrace(len(pairwise) + 1,
                             [TraceEntry(k, k + 1, PairResult(ACCEPTED, t)) for k, t in enumerate(pairwise)])


def _prepare(frames, cfg: EvalConfig, fov: Optional[np.ndarray], workers: int):
    def smooth(f):
        return gaussian_smooth(f, cfg.smooth_size, cfg.smooth_sigma) if cfg.smooth else np.asarray(f, float)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            smoothed = list(pool.map(smooth, frames))
    else:
        smoothed = [smooth(f) for f in frames]
    shape = np.asarray(frames[0]).shape[:2]
    if fov is None:
        region = np.ones(shape, bool)
        area = float(region.sum())
    else:
        area = float(np.count_nonzero(fov))
        # blurring mixes in the black surround up to the kernel radius
        r = cfg.smooth_size // 2 if cfg.smooth else 0
        region = ndimage.binary_erosion(fov, iterations=r) if r > 0 else np.asarray(fov, bool)
    return smoothed, region, area


def pair_similarity(src: np.ndarray, dst: np.ndarray, transform: Affine2D, region: np.ndarray,
                    area: float, cfg: EvalConfig):
    """s and overlap for one (already smoothed) source/target pair."""
    warped, valid = warp_image(src, transform, dst.shape, region)
    valid &= region
    overlap = float(valid.sum()) / area if area > 0 else 0.0
    try:
        s = ssim(warped, dst, valid, cfg.ssim)
    except NoOverlap:
        s = float("nan")
    return s, overlap


def eval_s(frames: Sequence[np.ndarray], trace: RegistrationTrace, n: int, cfg: EvalConfig = EvalConfig(),
           fov: Optional[np.ndarray] = None, workers: int = 1, _prepared=None) -> MetricReport:
    """Similarity between each frame warped ``n`` steps ahead and the target frame."""
    if not 1 <= n <= 5:
        raise ValueError("n must lie in [1, 5]")
    if trace.frame_count != len(frames):
        raise ValueError(f"trace covers {trace.frame_count} frames, got {len(frames)}")
    smoothed, region, area = _prepared or _prepare(frames, cfg, fov, workers)
    fwd = chain_forward(trace, cfg.identity_substitution)
    todo = [i for i in range(len(frames) - n) if fwd[i] is not None and fwd[i + n] is not None]

    def row(i: int) -> MetricRow:
        h = compose(fwd[i + n], invert(fwd[i]))
        s, overlap = pair_similarity(smoothed[i], smoothed[i + n], h, region, area, cfg)
        flagged = overlap < cfg.min_overlap or math.isnan(s)
        return MetricRow(i, n, s, overlap, flagged)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(row, todo))
    else:
        rows = [row(i) for i in todo]
    return MetricReport(rows)


def eval_all(frames, trace: RegistrationTrace, ns=(1, 2, 3, 4, 5), cfg: EvalConfig = EvalConfig(),
             fov: Optional[np.ndarray] = None, workers: int = 1) -> MetricReport:
    prepared = _prepare(frames, cfg, fov, workers)
    report = MetricReport()
    for n in ns:
        report.extend(eval_s(frames, trace, n, cfg, fov, workers, _prepared=prepared))
    return report


# ---------------------------------------------------------------------------
# ground truth drift
# ---------------------------------------------------------------------------


def gt_corner_error(trace: RegistrationTrace, gt, frame_size, identity_substitution: bool = True,
                    anchor: int = 0) -> np.ndarray:
    """Mean corner displacement (px) between estimated and true absolute transforms.

    ``gt`` is a ground-truth trace or the list of true pairwise transforms;
    frames without an estimated transform get NaN.
    """
    if gt is None:
        raise MissingGroundTruth("no ground truth available")
    gt_trace = gt if isinstance(gt, RegistrationTrace) else trace_from_transforms(list(gt))
    if gt_trace.frame_count != trace.frame_count:
        raise MissingGroundTruth(f"ground truth covers {gt_trace.frame_count} frames, trace {trace.frame_count}")
    est = chain(trace, anchor, identity_substitution)
    true = chain(gt_trace, anchor, True)
    corners = frame_corners(*frame_size)
    out = np.full(trace.frame_count, np.nan)
    for k, (e, t) in enumerate(zip(est, true)):
        if e is not None and t is not None:
            out[k] = float(np.linalg.norm(e.apply(corners) - t.apply(corners), axis=1).mean())
    return out


# ---------------------------------------------------------------------------
# reports on disk
# ---------------------------------------------------------------------------


def write_metrics_csv(path, report: MetricReport) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame_index", "n", "s", "overlap_fraction", "flagged"])
        for r in report.per_frame:
            w.writerow([r.frame_index, r.n, repr(float(r.s)), repr(float(r.overlap_fraction)), int(r.flagged)])


def read_metrics_csv(path) -> MetricReport:
    with Path(path).open(newline="") as fh:
        rows = [MetricRow(int(r["frame_index"]), int(r["n"]), float(r["s"]), float(r["overlap_fraction"]),
                          bool(int(r["flagged"]))) for r in csv.DictReader(fh)]
    return MetricReport(rows)


def write_aggregates_json(path, report: MetricReport) -> None:
    doc = [{"n": a.n, "mean": a.mean, "std": a.std, "count": a.count} for a in report.aggregates.values()]
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def write_quantiles_csv(path, report: MetricReport) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["n", "min", "q1", "median", "q3", "max"])
        for n, q in report.quantiles().items():
            w.writerow([n] + [repr(float(v)) for v in q])
