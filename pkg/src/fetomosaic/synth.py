"""Synthetic fetoscopy-like sequences with exact ground-truth motion.

A large vessel-textured canvas is viewed through a moving affine camera.
Each frame is cropped through a circular field of view, photometrically
jittered, and optionally overlaid with moving elliptical tool-like
occluders whose masks are returned alongside the frames.
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
from scipy import ndimage

from .errors import IndexOutOfRange, PathExitsTexture
from .geometry import Affine2D, compose, invert
from .imaging import bilinear_sample, circular_fov, save_mask, save_png


# ---------------------------------------------------------------------------
# texture
# ---------------------------------------------------------------------------


def _band_noise(rng: np.random.Generator, size: int, sigmas: Sequence[float],
                weights: Sequence[float]) -> np.ndarray:
    """Weighted sum of unit-variance Gaussian-blurred white-noise octaves."""
    out = np.zeros((size, size))
    for sigma, w in zip(sigmas, weights):
        layer = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma, mode="wrap")
        out += w * layer / max(layer.std(), 1e-12)
    return out


def _vessel_map(rng: np.random.Generator, size: int, trees: int) -> np.ndarray:
    """Branching random-walk curves rasterised as blurred dark lines."""
    widths = (3.0, 2.0, 1.2)
    layers = [np.zeros((size, size)) for _ in widths]
    density = 2.0  # samples per pixel of arc length
    stack = []
    for _ in range(trees):
        x, y = rng.uniform(0, size, 2)
        stack.append((x, y, rng.uniform(-math.pi, math.pi), 0, rng.uniform(150, 400)))
    while stack:
        x, y, heading, level, length = stack.pop()
        steps = int(length * density)
        turn = 0.0
        pts = np.empty((steps, 2))
        for s in range(steps):
            turn = 0.98 * turn + rng.normal(0.0, 0.004)
            heading += turn
            x += math.cos(heading) / density
            y += math.sin(heading) / density
            pts[s] = x, y
            if level < len(widths) - 1 and rng.random() < 0.004:
                side = 1 if rng.random() < 0.5 else -1
                stack.append((x, y, heading + side * rng.uniform(0.5, 1.2), level + 1, length * 0.6))
        inside = (pts[:, 0] >= 0) & (pts[:, 0] < size) & (pts[:, 1] >= 0) & (pts[:, 1] < size)
        p = pts[inside].astype(int)
        np.add.at(layers[level], (p[:, 1], p[:, 0]), 1.0)
    out = np.zeros((size, size))
    for w, layer in zip(widths, layers):
        sigma = w / 2.0
        peak = density / (math.sqrt(2 * math.pi) * sigma)
        out += ndimage.gaussian_filter(layer, sigma) / peak
    return np.clip(out, 0.0, 1.0)


def _speckle(rng: np.random.Generator, size: int, per_pixel: float) -> np.ndarray:
    """Sparse light and dark Gaussian spots of radius 1-2 px."""
    out = np.zeros((size, size))
    count = int(per_pixel * size * size)
    for sigma in (1.2, 1.6, 2.0):
        layer = np.zeros((size, size))
        xy = rng.integers(0, size, (count // 3, 2))
        amp = rng.uniform(0.3, 0.6, count // 3) * rng.choice([-1.0, 1.0], count // 3)
        np.add.at(layer, (xy[:, 1], xy[:, 0]), amp)
        out += ndimage.gaussian_filter(layer, sigma, mode="wrap") * (2 * math.pi * sigma * sigma)
    return out


def generate_texture(seed: int, size: int = 1536, vessel_trees: Optional[int] = None,
                     speckle_density: float = 1.0 / 120.0) -> np.ndarray:
    """Deterministic multi-octave noise, speckle and vessel-like dark curves."""
    rng = np.random.default_rng(seed)
    noise = _band_noise(rng, size, sigmas=(64.0, 24.0, 8.0), weights=(1.0, 0.6, 0.35))
    if vessel_trees is None:
        vessel_trees = max(4, size * size // 60000)
    vessels = _vessel_map(rng, size, vessel_trees)
    lo, hi = np.percentile(noise, [1.0, 99.0])
    noise = 0.15 + 0.7 * np.clip((noise - lo) / max(hi - lo, 1e-12), 0.0, 1.0)
    tex = (noise + _speckle(rng, size, speckle_density)) * (1.0 - 0.6 * vessels)
    lo, hi = np.percentile(tex, [1.0, 99.0])
    tex = (tex - lo) / max(hi - lo, 1e-12)
    return np.clip(0.05 + 0.9 * tex, 0.0, 1.0)


# ---------------------------------------------------------------------------
# specs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PathSpec:
    steps: int = 199
    # per-step bounds
    rotation: float = 0.012
    log_scale: float = 0.006
    translation: float = 5.0
    random_walk_seed: int = 1
    smoothing: float = 0.95
    # the zoom random walk is reflected at +-log_scale_limit
    log_scale_limit: float = 0.12

    def __post_init__(self):
        if not 0 <= self.smoothing < 1:
            raise ValueError("smoothing must lie in [0, 1)")
        if self.steps < 0:
            raise ValueError("steps must be non-negative")


@dataclass(frozen=True)
class PhotometricSpec:
    brightness_jitter: float = 0.02
    contrast_jitter: float = 0.03
    noise_sigma: float = 0.01
    vignette_strength: float = 0.2
    seed: int = 2


@dataclass(frozen=True)
class OccluderSpec:
    count: int = 0
    # target fraction of the field of view covered by all occluders together
    coverage: float = 0.2
    speed: float = 2.0
    seed: int = 3


@dataclass
class SyntheticSequence:
    frames: List[np.ndarray]
    fov_mask: np.ndarray
    occluder_masks: List[np.ndarray]
    gt_pairwise: List[Affine2D]
    # frame pixel -> texture pixel for every frame
    poses: List[Affine2D]
    texture_seed: Optional[int] = None

    @property
    def fov_masks(self) -> List[np.ndarray]:
        return [self.fov_mask] * len(self.frames)

    def __len__(self) -> int:
        return len(self.frames)

    def gt_absolute(self, k: int) -> Affine2D:
        """Transform taking frame 0 points to frame ``k`` (from the poses)."""
        return compose(invert(self.poses[k]), self.poses[0])


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------


def camera_path(path: PathSpec, texture_size: int, frame_size: int) -> List[Affine2D]:
    """Sequential seeded random walk of frame->texture poses."""
    rng = np.random.default_rng(path.random_walk_seed)
    fc = (frame_size - 1) / 2.0
    reach = math.exp(path.log_scale_limit) * fc * math.sqrt(2.0) + 2.0
    lo, hi = reach, texture_size - 1 - reach
    if lo >= hi:
        raise PathExitsTexture(f"texture of {texture_size} px cannot contain a {frame_size} px frame")
    center = np.array([(texture_size - 1) / 2.0] * 2)
    theta, logs = 0.0, 0.0
    vel = np.zeros(4)
    bounds = np.array([path.translation, path.translation, path.rotation, path.log_scale])
    poses = []
    for k in range(path.steps + 1):
        s = math.exp(logs)
        c, sn = math.cos(theta), math.sin(theta)
        lin = s * np.array([[c, -sn], [sn, c]])
        off = center - lin @ np.array([fc, fc])
        poses.append(Affine2D(lin[0, 0], lin[0, 1], lin[1, 0], lin[1, 1], off[0], off[1]))
        if k == path.steps:
            break
        # AR(1) velocity with stationary std bounds/2.5, clipped to the per-step bounds
        kick = rng.normal(0.0, 1.0, 4) * bounds / 2.5
        vel = np.clip(path.smoothing * vel + math.sqrt(1.0 - path.smoothing ** 2) * kick, -bounds, bounds)
        nxt = center + vel[:2]
        for d in range(2):
            if not lo <= nxt[d] <= hi:
                vel[d] = -vel[d]
        center = center + vel[:2]
        theta += vel[2]
        if abs(logs + vel[3]) > path.log_scale_limit:
            vel[3] = -vel[3]
        logs += vel[3]
    corners = np.array([[0, 0], [frame_size - 1, 0], [0, frame_size - 1], [frame_size - 1, frame_size - 1]], float)
    for k, pose in enumerate(poses):
        pts = pose.apply(corners)
        if pts.min() < 0 or pts.max() > texture_size - 1:
            raise PathExitsTexture(f"pose {k} leaves the texture")
    return poses


def _occluder_tracks(spec: OccluderSpec, n_frames: int, frame_size: int):
    """Per-frame (cx, cy, a, b, angle) for every occluder."""
    rng = np.random.default_rng(spec.seed)
    radius = frame_size / 2.0
    area_each = spec.coverage * math.pi * radius * radius / max(spec.count, 1)
    tracks = []
    for _ in range(spec.count):
        aspect = rng.uniform(1.8, 3.0)
        b = math.sqrt(area_each / (math.pi * aspect))
        a = aspect * b
        ang = rng.uniform(-math.pi, math.pi)
        r0 = rng.uniform(0.2, 0.6) * radius
        phi = rng.uniform(-math.pi, math.pi)
        pos = np.array([radius + r0 * math.cos(phi), radius + r0 * math.sin(phi)])
        heading = rng.uniform(-math.pi, math.pi)
        spin = rng.uniform(-0.01, 0.01)
        rows = []
        for _k in range(n_frames):
            rows.append((pos[0], pos[1], a, b, ang))
            heading += rng.normal(0.0, 0.15)
            step = spec.speed * np.array([math.cos(heading), math.sin(heading)])
            if np.hypot(*(pos + step - radius)) > 0.6 * radius:
                heading += math.pi
                step = -step
            pos = pos + step
            ang += spin
        tracks.append(rows)
    return tracks


def _stamp_occluders(frame: np.ndarray, tracks, k: int, xx: np.ndarray, yy: np.ndarray) -> np.ndarray:
    mask = np.zeros(frame.shape, dtype=bool)
    for j, rows in enumerate(tracks):
        cx, cy, a, b, ang = rows[k]
        c, s = math.cos(ang), math.sin(ang)
        u = (xx - cx) * c + (yy - cy) * s
        v = -(xx - cx) * s + (yy - cy) * c
        inside = (u / a) ** 2 + (v / b) ** 2 <= 1.0
        # metallic tool look: bands along the major axis plus a checker of rivets
        pattern = 0.35 + 0.25 * (np.floor(u / 7.0 + j) % 2) + 0.25 * ((np.floor(u / 11.0) + np.floor(v / 5.0)) % 2)
        frame[inside] = pattern[inside]
        mask |= inside
    return mask


def generate_sequence(texture: np.ndarray, path: PathSpec = PathSpec(),
                      photo: PhotometricSpec = PhotometricSpec(),
                      occluders: OccluderSpec = OccluderSpec(),
                      frame_size: int = 448, texture_seed: Optional[int] = None) -> SyntheticSequence:
    size = texture.shape[0]
    poses = camera_path(path, size, frame_size)
    n = len(poses)
    fov = circular_fov(frame_size, frame_size)
    yy, xx = np.mgrid[0:frame_size, 0:frame_size].astype(float)
    grid = np.column_stack([xx.ravel(), yy.ravel()])
    fc = (frame_size - 1) / 2.0
    r2 = ((xx - fc) ** 2 + (yy - fc) ** 2) / (frame_size / 2.0) ** 2
    vignette = 1.0 - photo.vignette_strength * np.clip(r2, 0.0, 1.0)
    rng = np.random.default_rng(photo.seed)
    tracks = _occluder_tracks(occluders, n, frame_size)

    frames, occ_masks = [], []
    for k, pose in enumerate(poses):
        pts = pose.apply(grid)
        vals, _ = bilinear_sample(texture, pts[:, 0], pts[:, 1])
        img = vals.reshape(frame_size, frame_size)
        mask = _stamp_occluders(img, tracks, k, xx, yy)
        gain = 1.0 + rng.uniform(-photo.contrast_jitter, photo.contrast_jitter)
        bias = rng.uniform(-photo.brightness_jitter, photo.brightness_jitter)
        img = ((img - 0.5) * gain + 0.5 + bias) * vignette
        if photo.noise_sigma > 0:
            img = img + rng.normal(0.0, photo.noise_sigma, img.shape)
        img = np.where(fov, np.clip(img, 0.0, 1.0), 0.0)
        frames.append(img)
        occ_masks.append(mask & fov)
    gt = [compose(invert(poses[k + 1]), poses[k]) for k in range(n - 1)]
    return SyntheticSequence(frames, fov, occ_masks, gt, poses, texture_seed)


def make_sequence(n_frames: int = 200, frame_size: int = 448, seed: int = 0,
                  texture_size: Optional[int] = None, occluders: int = 0,
                  photo: Optional[PhotometricSpec] = None, **path_kw) -> SyntheticSequence:
    """Convenience wrapper deriving every seed from ``seed``."""
    texture_size = texture_size or int(round(frame_size * 3.4))
    tex = generate_texture(seed, texture_size)
    path = PathSpec(steps=n_frames - 1, random_walk_seed=seed + 1, **path_kw)
    photo = photo or PhotometricSpec(seed=seed + 2)
    occ = OccluderSpec(count=occluders, seed=seed + 3)
    return generate_sequence(tex, path, photo, occ, frame_size=frame_size, texture_seed=seed)


BLACKOUT, BLUR, EXPOSURE = "blackout", "blur", "exposure"


def corrupt_frames(seq: SyntheticSequence, indices: Sequence[int], mode: str = BLACKOUT,
                   sigma: float = 8.0, gain: float = 4.0) -> SyntheticSequence:
    """Return a copy with the listed frames degraded; ground truth is untouched."""
    n = len(seq.frames)
    for k in indices:
        if not 0 <= k < n:
            raise IndexOutOfRange(f"frame index {k} outside [0, {n})")
    if mode not in (BLACKOUT, BLUR, EXPOSURE):
        raise ValueError(f"unknown corruption mode {mode!r}")
    frames = list(seq.frames)
    for k in set(indices):
        img = frames[k]
        if mode == BLACKOUT:
            out = np.zeros_like(img)
        elif mode == BLUR:
            out = ndimage.gaussian_filter(img, sigma)
        else:
            out = np.clip(img * gain, 0.0, 1.0)
        frames[k] = np.where(seq.fov_mask, out, 0.0)
    return dataclasses.replace(seq, frames=frames)


def write_sequence(seq: SyntheticSequence, directory) -> dict:
    """Write ``frames/``, ``masks/``, ``fov.png`` and ``gt_trace.json``; returns a manifest."""
    from .registration import ACCEPTED, PairResult, RegistrationTrace, TraceEntry, save_trace

    root = Path(directory)
    for k, (img, mask) in enumerate(zip(seq.frames, seq.occluder_masks)):
        save_png(root / "frames" / f"{k:06d}.png", img)
        save_mask(root / "masks" / f"{k:06d}.png", mask)
    save_mask(root / "fov.png", seq.fov_mask)
    trace = RegistrationTrace(len(seq.frames), [
        TraceEntry(k, k + 1, PairResult(ACCEPTED, t)) for k, t in enumerate(seq.gt_pairwise)
    ])
    save_trace(root / "gt_trace.json", trace)
    return {
        "frames": len(seq.frames),
        "frame_size": list(seq.fov_mask.shape[::-1]),
        "frames_dir": str(root / "frames"),
        "masks_dir": str(root / "masks"),
        "fov": str(root / "fov.png"),
        "gt_trace": str(root / "gt_trace.json"),
    }
