"""Affine transform algebra, SVD decomposition and the plausibility filter.

Transforms act on pixel coordinates ``(x, y)`` with the origin at the centre
of the top-left pixel.  A registration transform for the pair ``(i, j)`` maps
points of frame ``i`` onto the matching points of frame ``j``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import SingularTransform

DET_EPS = 1e-9


@dataclass(frozen=True)
class Affine2D:
    a11: float = 1.0
    a12: float = 0.0
    a21: float = 0.0
    a22: float = 1.0
    tx: float = 0.0
    ty: float = 0.0

    # -- constructors ---------------------------------------------------
    @classmethod
    def identity(cls) -> "Affine2D":
        return cls()

    @classmethod
    def translation(cls, tx: float, ty: float) -> "Affine2D":
        return cls(tx=float(tx), ty=float(ty))

    @classmethod
    def rotation(cls, theta: float, center: Optional[Sequence[float]] = None) -> "Affine2D":
        c, s = math.cos(theta), math.sin(theta)
        rot = cls(c, -s, s, c)
        if center is None:
            return rot
        cx, cy = center
        return compose(cls.translation(cx, cy), compose(rot, cls.translation(-cx, -cy)))

    @classmethod
    def scaling(cls, sx: float, sy: Optional[float] = None) -> "Affine2D":
        return cls(a11=float(sx), a22=float(sx if sy is None else sy))

    @classmethod
    def from_matrix(cls, m) -> "Affine2D":
        """Build from a 2x3 or 3x3 (affine) matrix."""
        m = np.asarray(m, dtype=float)
        if m.shape not in ((2, 3), (3, 3)):
            raise ValueError(f"expected a 2x3 or 3x3 matrix, got shape {m.shape}")
        return cls(m[0, 0], m[0, 1], m[1, 0], m[1, 1], m[0, 2], m[1, 2])

    @classmethod
    def from_list(cls, values: Sequence[float]) -> "Affine2D":
        """Inverse of :meth:`to_list` (row-major ``[a11, a12, tx, a21, a22, ty]``)."""
        if len(values) != 6:
            raise ValueError(f"expected 6 values, got {len(values)}")
        a11, a12, tx, a21, a22, ty = (float(v) for v in values)
        return cls(a11, a12, a21, a22, tx, ty)

    # -- views ------------------------------------------------------------
    def to_list(self) -> list:
        return [self.a11, self.a12, self.tx, self.a21, self.a22, self.ty]

    @property
    def linear(self) -> np.ndarray:
        return np.array([[self.a11, self.a12], [self.a21, self.a22]])

    @property
    def translation_vector(self) -> np.ndarray:
        return np.array([self.tx, self.ty])

    @property
    def matrix(self) -> np.ndarray:
        """Homogeneous 3x3 matrix."""
        return np.array([[self.a11, self.a12, self.tx],
                         [self.a21, self.a22, self.ty],
                         [0.0, 0.0, 1.0]])

    @property
    def det(self) -> float:
        return self.a11 * self.a22 - self.a12 * self.a21

    def apply(self, points) -> np.ndarray:
        """Map an ``(N, 2)`` array (or a single ``(2,)`` point)."""
        p = np.asarray(points, dtype=float)
        x, y = p[..., 0], p[..., 1]
        return np.stack([self.a11 * x + self.a12 * y + self.tx,
                         self.a21 * x + self.a22 * y + self.ty], axis=-1)

    __call__ = apply

    def __matmul__(self, other: "Affine2D") -> "Affine2D":
        return compose(self, other)

    def allclose(self, other: "Affine2D", atol: float = 1e-9) -> bool:
        return bool(np.allclose(self.to_list(), other.to_list(), rtol=0.0, atol=atol))


IDENTITY = Affine2D()


def compose(a: Affine2D, b: Affine2D) -> Affine2D:
    """Return the transform ``p -> a(b(p))``."""
    return Affine2D(
        a.a11 * b.a11 + a.a12 * b.a21,
        a.a11 * b.a12 + a.a12 * b.a22,
        a.a21 * b.a11 + a.a22 * b.a21,
        a.a21 * b.a12 + a.a22 * b.a22,
        a.a11 * b.tx + a.a12 * b.ty + a.tx,
        a.a21 * b.tx + a.a22 * b.ty + a.ty,
    )


def compose_all(transforms: Sequence[Affine2D]) -> Affine2D:
    """Compose ``[t0, t1, ..., tk]`` as ``tk o ... o t1 o t0`` (apply t0 first)."""
    out = IDENTITY
    for t in transforms:
        out = compose(t, out)
    return out


def invert(a: Affine2D) -> Affine2D:
    det = a.det
    if abs(det) <= DET_EPS:
        raise SingularTransform(f"transform is singular (det={det:.3g})")
    i11, i12 = a.a22 / det, -a.a12 / det
    i21, i22 = -a.a21 / det, a.a11 / det
    return Affine2D(i11, i12, i21, i22,
                    -(i11 * a.tx + i12 * a.ty),
                    -(i21 * a.tx + i22 * a.ty))


# ---------------------------------------------------------------------------
# decomposition
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AffineParams:
    """Rotation / singular-value scale / translation view of an affine map.

    ``stretch_angle`` is the direction of the major stretch axis (the first
    right singular vector).  It is needed to rebuild a sheared transform but
    plays no part in filtering.
    """

    theta: float = 0.0
    sx: float = 1.0
    sy: float = 1.0
    tx: float = 0.0
    ty: float = 0.0
    reflected: bool = False
    stretch_angle: float = 0.0


def _wrap_angle(a: float) -> float:
    """Wrap into (-pi, pi]."""
    a = math.atan2(math.sin(a), math.cos(a))
    return math.pi if a <= -math.pi else a


def _rot(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s], [s, c]])


def decompose(a: Affine2D) -> AffineParams:
    """Split the linear part as ``R(theta) . V diag(sx, sy) V^T [. F]``.

    ``R = U V^T`` is the rotation of the polar decomposition; when the map
    reflects, ``U`` is sign-corrected so that ``R`` stays a proper rotation
    and the reflection ``F`` about the major stretch axis is reported through
    ``reflected``.
    """
    det = a.det
    if abs(det) <= DET_EPS:
        raise SingularTransform(f"transform is singular (det={det:.3g})")
    u, s, vt = np.linalg.svd(a.linear)
    v = vt.T
    if np.linalg.det(v) < 0:
        v[:, 1] *= -1.0
        u[:, 1] *= -1.0
    reflected = det < 0
    if reflected:
        u[:, 1] *= -1.0
    r = u @ v.T
    theta = _wrap_angle(math.atan2(r[1, 0], r[0, 0]))
    phi = math.atan2(v[1, 0], v[0, 0])
    # axis direction, not a vector: fold into (-pi/2, pi/2]
    if phi <= -math.pi / 2:
        phi += math.pi
    elif phi > math.pi / 2:
        phi -= math.pi
    return AffineParams(theta=theta, sx=float(s[0]), sy=float(s[1]),
                        tx=a.tx, ty=a.ty, reflected=bool(reflected),
                        stretch_angle=phi)


def recompose(p: AffineParams) -> Affine2D:
    v = _rot(p.stretch_angle)
    lin = _rot(p.theta) @ v @ np.diag([p.sx, p.sy]) @ v.T
    if p.reflected:
        lin = lin @ (v @ np.diag([1.0, -1.0]) @ v.T)
    return Affine2D(lin[0, 0], lin[0, 1], lin[1, 0], lin[1, 1], p.tx, p.ty)


# ---------------------------------------------------------------------------
# plausibility filter
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FilterThresholds:
    max_abs_theta: float = math.radians(15.0)
    scale_min: float = 0.85
    scale_max: float = 1.18
    # fraction of the frame diagonal
    max_translation: float = 0.20
    allow_reflection: bool = False

    def __post_init__(self):
        if not self.max_abs_theta > 0:
            raise ValueError("max_abs_theta must be positive")
        if not 0 < self.scale_min < 1 < self.scale_max:
            raise ValueError("scale bounds must satisfy 0 < scale_min < 1 < scale_max")
        if not self.max_translation > 0:
            raise ValueError("max_translation must be positive")


# rejection reasons, in the order they are checked
SINGULAR = "singular"
REFLECTION = "reflection"
ROTATION = "rotation"
SCALE = "scale"
TRANSLATION = "translation"


@dataclass(frozen=True)
class FilterDecision:
    accepted: bool
    reason: Optional[str] = None
    params: Optional[AffineParams] = None

    def __bool__(self) -> bool:
        return self.accepted


def filter_homography(a: Affine2D, th: FilterThresholds = FilterThresholds(),
                      frame_diag: float = 1.0) -> FilterDecision:
    """Accept ``a`` or reject it with the first violated criterion."""
    try:
        p = decompose(a)
    except SingularTransform:
        return FilterDecision(False, SINGULAR)
    if p.reflected and not th.allow_reflection:
        return FilterDecision(False, REFLECTION, p)
    if abs(p.theta) > th.max_abs_theta:
        return FilterDecision(False, ROTATION, p)
    if not (th.scale_min <= p.sy and p.sx <= th.scale_max):
        return FilterDecision(False, SCALE, p)
    if math.hypot(p.tx, p.ty) > th.max_translation * frame_diag:
        return FilterDecision(False, TRANSLATION, p)
    return FilterDecision(True, None, p)
