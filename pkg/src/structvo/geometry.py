"""Frame-tagged rigid geometry, pinhole camera model and projection.

Conventions used throughout the package:

* A :class:`Pose` with ``source="world"`` and ``target="cam"`` maps world
  coordinates into camera coordinates, ``x_cam = R @ x_world + t``.
* Cameras look down ``+z`` with ``x`` right and ``y`` down.
* Angles are radians everywhere inside the library.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial.transform import Rotation

from .exceptions import FrameMismatch, NonPositiveDepth, SingularInput

ORTHO_TOL = 1e-9
DEPTH_EPS = 1e-12


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


def skew(v) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def so3_exp(w) -> np.ndarray:
    return Rotation.from_rotvec(np.asarray(w, dtype=float)).as_matrix()


def so3_log(R) -> np.ndarray:
    return Rotation.from_matrix(np.asarray(R, dtype=float)).as_rotvec()


def rotation_angle(R) -> float:
    """Geodesic angle of a rotation matrix, numerically safe near 0 and pi."""
    R = np.asarray(R, dtype=float)
    # atan2 form stays accurate for tiny angles where arccos loses digits
    s = 0.5 * np.linalg.norm([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    c = 0.5 * (np.trace(R) - 1.0)
    return float(np.arctan2(s, c))


def rotation_distance(R1, R2) -> float:
    return rotation_angle(np.asarray(R1).T @ np.asarray(R2))


def is_rotation(M, tol: float = ORTHO_TOL) -> bool:
    M = np.asarray(M, dtype=float)
    if M.shape != (3, 3) or not np.all(np.isfinite(M)):
        return False
    return bool(np.all(np.abs(M.T @ M - np.eye(3)) <= tol) and abs(np.linalg.det(M) - 1.0) <= tol)


def nearest_rotation(M) -> np.ndarray:
    """Closest rotation to ``M`` in Frobenius norm (orthogonal polar factor).

    Raises :class:`SingularInput` when the smallest singular value is below 1e-12.
    """
    M = np.asarray(M, dtype=float)
    U, s, Vt = np.linalg.svd(M)
    if s[-1] < 1e-12:
        raise SingularInput(f"smallest singular value {s[-1]:.3g} < 1e-12")
    D = np.eye(3)
    D[2, 2] = np.sign(np.linalg.det(U @ Vt))
    return U @ D @ Vt


def signed_permutations() -> list[np.ndarray]:
    """The 24 signed permutation matrices with determinant +1."""
    from itertools import permutations, product

    out = []
    for perm in permutations(range(3)):
        for signs in product((1.0, -1.0), repeat=3):
            P = np.zeros((3, 3))
            for r, (c, s) in enumerate(zip(perm, signs)):
                P[r, c] = s
            if np.linalg.det(P) > 0:
                out.append(P)
    return out


_SIGNED_PERMS = signed_permutations()


def rotation_distance_modulo_axes(R_est, R_gt) -> float:
    """Angle between two axis triads, ignoring axis labelling and sign.

    Both matrices have the axes as columns; ``R_est @ P`` ranges over the
    24-element signed-permutation group.
    """
    R_est = np.asarray(R_est, dtype=float)
    return min(rotation_distance(R_est @ P, R_gt) for P in _SIGNED_PERMS)


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (self.width > 0 and self.height > 0):
            raise ValueError("image size must be positive")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def scaled(self, factor: float) -> "CameraIntrinsics":
        """Intrinsics for an image resampled by ``factor`` (0.25 -> quarter size)."""
        w = max(1, int(round(self.width * factor)))
        h = max(1, int(round(self.height * factor)))
        return CameraIntrinsics(
            self.fx * factor,
            self.fy * factor,
            (self.cx + 0.5) * factor - 0.5,
            (self.cy + 0.5) * factor - 0.5,
            w,
            h,
        )

    def contains(self, uv, margin: float = 0.0) -> np.ndarray:
        uv = np.asarray(uv, dtype=float)
        return (
            (uv[..., 0] >= margin)
            & (uv[..., 0] <= self.width - 1 - margin)
            & (uv[..., 1] >= margin)
            & (uv[..., 1] <= self.height - 1 - margin)
        )

    def to_dict(self) -> dict:
        return dict(fx=self.fx, fy=self.fy, cx=self.cx, cy=self.cy, width=self.width, height=self.height)


def project(P, K: CameraIntrinsics) -> np.ndarray:
    """Pinhole projection of camera-frame point(s) ``P`` (shape ``(3,)`` or ``(N, 3)``)."""
    P = np.asarray(P, dtype=float)
    z = P[..., 2]
    if np.any(z <= DEPTH_EPS):
        raise NonPositiveDepth("point at or behind the camera plane")
    return np.stack([K.fx * P[..., 0] / z + K.cx, K.fy * P[..., 1] / z + K.cy], axis=-1)


def normalize_pixel(p, K: CameraIntrinsics) -> np.ndarray:
    """``K^-1 (u, v, 1)``; works on ``(2,)`` or ``(N, 2)`` arrays."""
    p = np.asarray(p, dtype=float)
    x = (p[..., 0] - K.cx) / K.fx
    y = (p[..., 1] - K.cy) / K.fy
    return np.stack([x, y, np.ones_like(x)], axis=-1)


def _check_tags(outer: Optional[str], inner: Optional[str]):
    if outer is not None and inner is not None and outer != inner:
        raise FrameMismatch(f"cannot chain a transform from {outer!r} onto one targeting {inner!r}")


@dataclass(frozen=True)
class RotationMatrix:
    """Rotation taking ``source``-frame coordinates into the ``target`` frame."""

    matrix: np.ndarray
    source: Optional[str] = None
    target: Optional[str] = None

    def __post_init__(self):
        M = _frozen(self.matrix)
        if not is_rotation(M):
            raise ValueError("matrix is not a rotation within 1e-9")
        object.__setattr__(self, "matrix", M)

    @classmethod
    def identity(cls, frame: Optional[str] = None) -> "RotationMatrix":
        return cls(np.eye(3), frame, frame)

    @classmethod
    def from_nearest(cls, M, source=None, target=None) -> "RotationMatrix":
        return cls(nearest_rotation(M), source, target)

    @property
    def T(self) -> "RotationMatrix":
        return RotationMatrix(self.matrix.T, self.target, self.source)

    def __matmul__(self, other):
        if isinstance(other, RotationMatrix):
            _check_tags(self.source, other.target)
            return RotationMatrix(self.matrix @ other.matrix, other.source, self.target)
        return self.matrix @ np.asarray(other, dtype=float)

    def angle_to(self, other: "RotationMatrix") -> float:
        return rotation_distance(self.matrix, other.matrix)


@dataclass(frozen=True)
class Pose:
    """Rigid transform ``x_target = R x_source + t`` with an optional timestamp."""

    rotation: RotationMatrix
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    timestamp: Optional[float] = None

    def __post_init__(self):
        if not isinstance(self.rotation, RotationMatrix):
            object.__setattr__(self, "rotation", RotationMatrix(self.rotation))
        t = _frozen(self.translation).reshape(3)
        if not np.all(np.isfinite(t)):
            raise ValueError("translation must be finite")
        object.__setattr__(self, "translation", t)

    @classmethod
    def from_rt(cls, R, t, source=None, target=None, timestamp=None) -> "Pose":
        return cls(RotationMatrix(R, source, target), t, timestamp)

    @classmethod
    def identity(cls, frame: Optional[str] = None, timestamp=None) -> "Pose":
        return cls(RotationMatrix.identity(frame), np.zeros(3), timestamp)

    @property
    def R(self) -> np.ndarray:
        return self.rotation.matrix

    @property
    def t(self) -> np.ndarray:
        return self.translation

    @property
    def source(self):
        return self.rotation.source

    @property
    def target(self):
        return self.rotation.target

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.t
        return T

    def apply(self, X) -> np.ndarray:
        return np.asarray(X, dtype=float) @ self.R.T + self.t

    def center(self) -> np.ndarray:
        """Target-frame origin in source coordinates (the camera centre for a world-to-camera pose)."""
        return -self.R.T @ self.t

    def with_timestamp(self, timestamp) -> "Pose":
        return Pose(self.rotation, self.translation, timestamp)

    def __matmul__(self, other: "Pose") -> "Pose":
        return compose(self, other)


def compose(a: Pose, b: Pose) -> Pose:
    """``a ∘ b``: apply ``b`` first, then ``a``. Requires ``a.source == b.target``."""
    rot = a.rotation @ b.rotation
    return Pose(rot, a.R @ b.t + a.t, b.timestamp if b.timestamp is not None else a.timestamp)


def inverse(a: Pose) -> Pose:
    return Pose(a.rotation.T, -a.R.T @ a.t, a.timestamp)
