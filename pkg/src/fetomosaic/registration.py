"""Pairwise affine registration and the sequential skip-and-retry driver."""
from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence

import numpy as np
from scipy import ndimage

from .errors import DegenerateSample, FormatError, InsufficientMatches, NoConsensus
from .features import (DetectorConfig, KeypointSet, Match, MatcherConfig, detect_keypoints,
                       load_keypoints, match_descriptors, reject_irrelevant)
from .geometry import Affine2D, FilterThresholds, filter_homography
from .lm import LMResult, levenberg_marquardt

log = logging.getLogger(__name__)

ACCEPTED = "accepted"
INSUFFICIENT = "insufficient_matches"


@dataclass(frozen=True)
class RansacConfig:
    inlier_threshold: float = 2.0
    max_iterations: int = 2000
    confidence: float = 0.995
    min_inliers: int = 10
    seed: int = 42

    def __post_init__(self):
        if self.inlier_threshold <= 0:
            raise ValueError("inlier_threshold must be positive")
        if self.min_inliers < 3:
            raise ValueError("min_inliers must be at least 3")
        if not 0 < self.confidence < 1:
            raise ValueError("confidence must lie in (0, 1)")


@dataclass(frozen=True)
class LMConfig:
    max_iters: int = 50
    grad_tol: float = 1e-8
    damping_init: float = 1e-3
    huber: bool = False
    huber_delta: float = 1.0


# ---------------------------------------------------------------------------
# model fitting
# ---------------------------------------------------------------------------


def solve_affine_exact(src, dst) -> Affine2D:
    """Affine map sending three source points exactly onto three targets."""
    src = np.asarray(src, dtype=float).reshape(3, 2)
    dst = np.asarray(dst, dtype=float).reshape(3, 2)
    e1, e2 = src[1] - src[0], src[2] - src[0]
    if 0.5 * abs(e1[0] * e2[1] - e1[1] * e2[0]) <= 1e-9:
        raise DegenerateSample("source points are collinear")
    m = np.column_stack([src, np.ones(3)])
    sol = np.linalg.solve(m, dst)  # rows: coefficient of x, of y, constant
    return Affine2D(sol[0, 0], sol[1, 0], sol[0, 1], sol[1, 1], sol[2, 0], sol[2, 1])


def _batched_exact(src: np.ndarray, dst: np.ndarray, samples: np.ndarray):
    """Solve many minimal samples at once; returns (params (k, 6), ok (k,))."""
    s = src[samples]  # (k, 3, 2)
    d = dst[samples]
    e1, e2 = s[:, 1] - s[:, 0], s[:, 2] - s[:, 0]
    area = 0.5 * np.abs(e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])
    ok = area > 1e-9
    m = np.concatenate([s, np.ones((len(s), 3, 1))], axis=2)
    m[~ok] = np.eye(3)
    sol = np.linalg.solve(m, d)  # (k, 3, 2)
    params = np.stack([sol[:, 0, 0], sol[:, 1, 0], sol[:, 2, 0],
                       sol[:, 0, 1], sol[:, 1, 1], sol[:, 2, 1]], axis=1)
    return params, ok


def _params(a: Affine2D) -> np.ndarray:
    return np.array(a.to_list())


def reprojection_errors(a: Affine2D, src, dst) -> np.ndarray:
    return np.linalg.norm(a.apply(src) - np.asarray(dst, dtype=float), axis=1)


def affine_residuals(x: np.ndarray, src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Stacked residuals ``[dx0, dy0, dx1, dy1, ...]`` for parameters ``x``."""
    a11, a12, tx, a21, a22, ty = x
    px = a11 * src[:, 0] + a12 * src[:, 1] + tx - dst[:, 0]
    py = a21 * src[:, 0] + a22 * src[:, 1] + ty - dst[:, 1]
    return np.column_stack([px, py]).ravel()


def affine_jacobian(x: np.ndarray, src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    n = len(src)
    J = np.zeros((2 * n, 6))
    J[0::2, 0] = src[:, 0]
    J[0::2, 1] = src[:, 1]
    J[0::2, 2] = 1.0
    J[1::2, 3] = src[:, 0]
    J[1::2, 4] = src[:, 1]
    J[1::2, 5] = 1.0
    return J


def affine_cost(x, src, dst) -> float:
    r = affine_residuals(np.asarray(x, dtype=float), src, dst)
    return float(r @ r)


def affine_cost_gradient(x, src, dst) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return 2.0 * affine_jacobian(x, src, dst).T @ affine_residuals(x, src, dst)


def lm_refine(init: Affine2D, src, dst, cfg: LMConfig = LMConfig(), full_output: bool = False):
    """Least-squares polish of an affine estimate on matched point pairs.

    With ``full_output`` the :class:`~fetomosaic.lm.LMResult` is returned as a
    second value.
    """
    src = np.asarray(src, dtype=float).reshape(-1, 2)
    dst = np.asarray(dst, dtype=float).reshape(-1, 2)
    if len(src) < 3:
        raise InsufficientMatches("lm_refine needs at least 3 pairs")
    res = levenberg_marquardt(
        lambda x: affine_residuals(x, src, dst),
        lambda x: affine_jacobian(x, src, dst),
        _params(init),
        max_iters=cfg.max_iters,
        grad_tol=cfg.grad_tol,
        damping_init=cfg.damping_init,
        huber_delta=cfg.huber_delta if cfg.huber else None,
    )
    out = Affine2D.from_list(res.x)
    return (out, res) if full_output else out


@dataclass
class RansacResult:
    transform: Affine2D
    inliers: np.ndarray  # indices into the correspondence list
    iterations: int
    residual_rms: float
    lm: Optional[LMResult] = None


def _required_iterations(inlier_ratio: float, confidence: float, cap: int) -> int:
    if inlier_ratio >= 1.0:
        return 1
    if inlier_ratio <= 0.0:
        return cap
    denom = math.log(max(1e-300, 1.0 - inlier_ratio ** 3))
    if denom == 0.0:
        return cap
    return int(min(cap, math.ceil(math.log(1.0 - confidence) / denom)))


def ransac_affine(src, dst, cfg: RansacConfig = RansacConfig(), lm_cfg: LMConfig = LMConfig(),
                  batch: int = 64) -> RansacResult:
    """Classic RANSAC over 3-point samples followed by LM on the consensus set."""
    src = np.asarray(src, dtype=float).reshape(-1, 2)
    dst = np.asarray(dst, dtype=float).reshape(-1, 2)
    n = len(src)
    if n < 3:
        raise InsufficientMatches(f"need at least 3 correspondences, got {n}")
    rng = np.random.default_rng(cfg.seed)
    thr2 = cfg.inlier_threshold ** 2
    best_count, best_params = -1, None
    needed = cfg.max_iterations
    done = draws = 0
    max_draws = 10 * cfg.max_iterations
    while done < needed and draws < max_draws:
        k = min(batch, needed - done, max_draws - draws)
        if n == 3:
            samples = np.tile(np.arange(3), (k, 1))
        else:
            samples = np.argpartition(rng.random((k, n)), 3, axis=1)[:, :3]
        draws += k
        params, ok = _batched_exact(src, dst, samples)
        params = params[ok]
        if len(params) == 0:
            continue
        px = params[:, 0:1] * src[:, 0] + params[:, 1:2] * src[:, 1] + params[:, 2:3] - dst[:, 0]
        py = params[:, 3:4] * src[:, 0] + params[:, 4:5] * src[:, 1] + params[:, 5:6] - dst[:, 1]
        counts = ((px * px + py * py) < thr2).sum(axis=1)
        for c, p in zip(counts, params):
            done += 1
            if c > best_count:
                best_count, best_params = int(c), p
                needed = _required_iterations(best_count / n, cfg.confidence, cfg.max_iterations)
            if done >= needed:
                break
    if best_params is None:
        raise DegenerateSample("every drawn sample was degenerate")
    if best_count < cfg.min_inliers:
        raise NoConsensus(f"best consensus {best_count} < min_inliers {cfg.min_inliers}")

    model = Affine2D.from_list(best_params)
    inliers = np.flatnonzero(reprojection_errors(model, src, dst) < cfg.inlier_threshold)
    lm_res = None
    for _ in range(4):
        model, lm_res = lm_refine(model, src[inliers], dst[inliers], lm_cfg, full_output=True)
        updated = np.flatnonzero(reprojection_errors(model, src, dst) < cfg.inlier_threshold)
        if len(updated) < 3 or np.array_equal(updated, inliers):
            inliers = updated
            break
        inliers = updated
    if len(inliers) < cfg.min_inliers:
        raise NoConsensus(f"refined consensus {len(inliers)} < min_inliers {cfg.min_inliers}")
    err = reprojection_errors(model, src[inliers], dst[inliers])
    return RansacResult(model, inliers, done, float(np.sqrt(np.mean(err ** 2))), lm_res)


def estimate_affine_ransac(matches: Sequence[Match], kps_a: KeypointSet, kps_b: KeypointSet,
                           cfg: RansacConfig = RansacConfig(), lm_cfg: LMConfig = LMConfig()) -> RansacResult:
    """RANSAC + LM on matched keypoints; ``inliers`` index into ``matches``."""
    if len(matches) < 3:
        raise InsufficientMatches(f"need at least 3 matches, got {len(matches)}")
    ia = np.array([m.index_a for m in matches])
    ib = np.array([m.index_b for m in matches])
    return ransac_affine(kps_a.xy[ia], kps_b.xy[ib], cfg, lm_cfg)


# ---------------------------------------------------------------------------
# keypoint sources
# ---------------------------------------------------------------------------


class CornerDetector:
    """Built-in detector; proposals are confined to the field of view.

    ``fov`` is a boolean mask (True = visible).  It is eroded by
    ``fov_margin`` pixels so the rim of the vignette does not produce
    corners that stay fixed in the image.
    """

    def __init__(self, cfg: DetectorConfig = DetectorConfig(), fov: Optional[np.ndarray] = None,
                 fov_margin: float = 8.0):
        self.cfg = cfg
        self.fov = fov
        self.fov_margin = fov_margin
        self._exclude = None
        if fov is not None:
            inner = ndimage.binary_erosion(fov, iterations=int(round(fov_margin))) if fov_margin > 0 else fov
            self._exclude = ~inner

    def __call__(self, frame: np.ndarray, frame_id: str = "") -> KeypointSet:
        exclude = self._exclude
        if exclude is not None and exclude.shape != frame.shape[:2]:
            raise ValueError("fov mask does not match the frame size")
        return detect_keypoints(frame, self.cfg, exclude=exclude, frame_id=frame_id)


class KeypointFileSource:
    """Reads externally computed keypoints from ``<directory>/<frame_id>.json``."""

    def __init__(self, directory):
        self.directory = Path(directory)

    def __call__(self, frame: np.ndarray, frame_id: str = "") -> KeypointSet:
        return load_keypoints(self.directory / f"{frame_id}.json")


Detector = Callable[[np.ndarray, str], KeypointSet]


# ---------------------------------------------------------------------------
# pair and sequence registration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RegistrationConfig:
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    matcher: MatcherConfig = field(default_factory=MatcherConfig)
    ransac: RansacConfig = field(default_factory=RansacConfig)
    lm: LMConfig = field(default_factory=LMConfig)
    thresholds: FilterThresholds = field(default_factory=FilterThresholds)
    mask_dilation: float = 2.0
    # candidate targets tried per source frame before giving up
    max_skip: int = 5


@dataclass
class PairResult:
    status: str
    transform: Optional[Affine2D] = None
    inlier_count: int = 0
    match_count: int = 0
    residual_rms: float = 0.0

    @property
    def accepted(self) -> bool:
        return self.status == ACCEPTED


@dataclass
class TraceEntry:
    source: int
    target: int
    result: PairResult


@dataclass
class RegistrationTrace:
    frame_count: int
    entries: List[TraceEntry] = field(default_factory=list)
    terminated_at: Optional[int] = None

    def accepted(self) -> List[TraceEntry]:
        return [e for e in self.entries if e.result.accepted]

    def to_dict(self) -> dict:
        return {
            "frame_count": self.frame_count,
            "terminated_at": self.terminated_at,
            "entries": [
                {
                    "source": e.source,
                    "target": e.target,
                    "status": e.result.status,
                    "transform": e.result.transform.to_list() if e.result.transform is not None else None,
                    "inliers": e.result.inlier_count,
                    "matches": e.result.match_count,
                    "residual_rms": e.result.residual_rms,
                }
                for e in self.entries
            ],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "RegistrationTrace":
        try:
            entries = []
            for row in doc["entries"]:
                t = row.get("transform")
                status = str(row["status"])
                if status != ACCEPTED and status != INSUFFICIENT and not status.startswith("rejected:"):
                    raise FormatError(f"unknown status {status!r}")
                if status == ACCEPTED and t is None:
                    raise FormatError("accepted entry without transform")
                entries.append(TraceEntry(int(row["source"]), int(row["target"]), PairResult(
                    status=status,
                    transform=Affine2D.from_list(t) if t is not None else None,
                    inlier_count=int(row.get("inliers", 0)),
                    match_count=int(row.get("matches", 0)),
                    residual_rms=float(row.get("residual_rms", 0.0)),
                )))
            term = doc.get("terminated_at")
            return cls(int(doc["frame_count"]), entries, None if term is None else int(term))
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"malformed trace: {exc}") from exc


def save_trace(path, trace: RegistrationTrace) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(trace.to_dict(), indent=1) + "\n")


def load_trace(path) -> RegistrationTrace:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, ValueError) as exc:
        raise FormatError(f"cannot read trace {path}: {exc}") from exc
    return RegistrationTrace.from_dict(doc)


def prepare_keypoints(frame: np.ndarray, detector: Detector, frame_id: str = "",
                      mask: Optional[np.ndarray] = None, dilation: float = 2.0) -> KeypointSet:
    kps = detector(frame, frame_id)
    if mask is not None:
        kps = reject_irrelevant(kps, mask, dilation, frame_shape=frame.shape)
    return kps


def match_and_estimate(kps_a: KeypointSet, kps_b: KeypointSet, frame_shape,
                       cfg: RegistrationConfig = RegistrationConfig()) -> PairResult:
    """Matching, RANSAC + LM and the plausibility filter on ready keypoints."""
    matches = match_descriptors(kps_a, kps_b, cfg.matcher)
    n = len(matches)
    if n < max(3, cfg.ransac.min_inliers):
        return PairResult(INSUFFICIENT, match_count=n)
    try:
        est = estimate_affine_ransac(matches, kps_a, kps_b, cfg.ransac, cfg.lm)
    except InsufficientMatches:
        return PairResult(INSUFFICIENT, match_count=n)
    except (NoConsensus, DegenerateSample):
        return PairResult("rejected:no_consensus", match_count=n)
    h, w = frame_shape[:2]
    decision = filter_homography(est.transform, cfg.thresholds, math.hypot(w, h))
    result = PairResult(ACCEPTED, est.transform, len(est.inliers), n, est.residual_rms)
    if not decision.accepted:
        result.status = f"rejected:{decision.reason}"
        result.transform = None
    return result


def register_pair(frame_a: np.ndarray, frame_b: np.ndarray,
                  mask_a: Optional[np.ndarray] = None, mask_b: Optional[np.ndarray] = None,
                  detector: Optional[Detector] = None,
                  cfg: RegistrationConfig = RegistrationConfig(),
                  ids=("", "")) -> PairResult:
    """Estimate the transform mapping ``frame_a`` points onto ``frame_b``."""
    if frame_a.shape != frame_b.shape:
        raise ValueError(f"frame shapes differ: {frame_a.shape} vs {frame_b.shape}")
    detector = detector or CornerDetector(cfg.detector)
    kps_a = prepare_keypoints(frame_a, detector, ids[0], mask_a, cfg.mask_dilation)
    kps_b = prepare_keypoints(frame_b, detector, ids[1], mask_b, cfg.mask_dilation)
    return match_and_estimate(kps_a, kps_b, frame_a.shape, cfg)


def register_sequence(frames: Sequence[np.ndarray], masks: Optional[Sequence[Optional[np.ndarray]]] = None,
                      detector: Optional[Detector] = None,
                      cfg: RegistrationConfig = RegistrationConfig(),
                      frame_ids: Optional[Sequence[str]] = None,
                      workers: int = 1) -> RegistrationTrace:
    """Register consecutive frames anchored at frame 0.

    When pair ``(i, j)`` fails, ``(i, j + 1)`` is tried, up to ``max_skip``
    candidate targets per source.  If every candidate fails, registration
    stops and ``terminated_at`` records ``i``.
    """
    n = len(frames)
    if n < 2:
        raise ValueError("need at least two frames")
    detector = detector or CornerDetector(cfg.detector)
    ids = list(frame_ids) if frame_ids is not None else [f"{k:06d}" for k in range(n)]
    masks = list(masks) if masks is not None else [None] * n
    if len(masks) != n or len(ids) != n:
        raise ValueError("frames, masks and frame_ids must have equal length")

    def keypoints_for(k: int) -> KeypointSet:
        return prepare_keypoints(frames[k], detector, ids[k], masks[k], cfg.mask_dilation)

    cache: dict = {}
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for k, kps in enumerate(pool.map(keypoints_for, range(n))):
                cache[k] = kps

    def get(k: int) -> KeypointSet:
        if k not in cache:
            cache[k] = keypoints_for(k)
        return cache[k]

    trace = RegistrationTrace(frame_count=n)
    i = 0
    while i < n - 1:
        tried = 0
        nxt = None
        for j in range(i + 1, min(i + cfg.max_skip, n - 1) + 1):
            res = match_and_estimate(get(i), get(j), frames[i].shape, cfg)
            trace.entries.append(TraceEntry(i, j, res))
            tried += 1
            log.debug("pair %d -> %d: %s (%d/%d inliers)", i, j, res.status, res.inlier_count, res.match_count)
            if res.accepted:
                nxt = j
                break
        if nxt is None:
            if tried >= cfg.max_skip:
                trace.terminated_at = i
                log.info("registration terminated at frame %d", i)
            break
        i = nxt
    return trace
