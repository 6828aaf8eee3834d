"""Manhattan-frame rotation by spherical mean-shift over surface normals.

Each Manhattan axis ``r_n`` (a column of ``R_cm``, Manhattan -> camera) is
refined independently: normals within a cone around ``±r_n`` are folded onto
``+r_n``, mapped to the tangent plane at ``r_n`` by the gnomonic projection,
averaged under the Gaussian kernel ``exp(-c |m|^2)``, and the mean is lifted
back onto the sphere. The three updated axes are projected back onto SO(3)
after every sweep, each weighted by its support.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .exceptions import EmptyCluster, InsufficientSupport, OutsideCone
from .geometry import RotationMatrix, nearest_rotation
from .normals import NormalMap
from .validation import check_rotation, check_unit_vectors, check_vectors

MANHATTAN = "manhattan"
CAMERA = "cam"


@dataclass(frozen=True)
class MeanShiftConfig:
    kernel_width: float = 2.0
    conic_half_angle: float = np.deg2rad(20.0)
    max_iterations: int = 20
    convergence_angle: float = 1e-5
    min_support: int = 300
    stride: int = 4

    def __post_init__(self):
        for name in ("kernel_width", "conic_half_angle", "max_iterations", "convergence_angle", "stride"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.min_support < 1:
            raise ValueError("min_support must be positive")


@dataclass(frozen=True)
class ManhattanFrame:
    rotation: RotationMatrix
    support: tuple
    converged: bool
    iterations_used: int

    @property
    def R(self) -> np.ndarray:
        return self.rotation.matrix


def axis_frame(R: np.ndarray, n: int) -> np.ndarray:
    """``Q_n``: the current axes cyclically shifted so that ``r_n`` is the third column."""
    R = np.asarray(R, dtype=float)
    return R[:, [(n + 1) % 3, (n + 2) % 3, n]]


def tangent_project(v, n: int, Q: np.ndarray, conic_half_angle: float = np.deg2rad(20.0)) -> np.ndarray:
    """Gnomonic tangent-plane coordinates of direction(s) ``v`` around axis ``n``.

    ``Q`` is ``axis_frame(R, n)``. Directions closer to ``-r_n`` are folded.
    Raises :class:`OutsideCone` if any direction lies outside the cone.
    """
    v = np.asarray(v, dtype=float)
    single = v.ndim == 1
    w = np.atleast_2d(v) @ Q
    if np.any(np.abs(w[:, 2]) < np.cos(conic_half_angle) * np.linalg.norm(w, axis=1)):
        raise OutsideCone(f"direction is more than {np.rad2deg(conic_half_angle):.1f} deg from axis {n}")
    w = w * np.sign(w[:, 2:3])
    m = w[:, :2] / w[:, 2:3]
    return m[0] if single else m


def cluster_mean(points, c: float = 2.0) -> np.ndarray:
    """Gaussian-kernel weighted mean ``sum(exp(-c|m|^2) m) / sum(exp(-c|m|^2))``."""
    m = np.asarray(points, dtype=float).reshape(-1, 2)
    if m.shape[0] == 0:
        raise EmptyCluster("no tangent-plane samples")
    w = np.exp(-c * np.einsum("ij,ij->i", m, m))
    return (w @ m) / w.sum()


def lift(s_prime, Q: np.ndarray) -> np.ndarray:
    """Inverse gnomonic map of a tangent-plane point back onto the unit sphere."""
    s = Q @ np.array([s_prime[0], s_prime[1], 1.0])
    return s / np.linalg.norm(s)


def _collect_samples(nm, line_dirs, stride: int) -> np.ndarray:
    if isinstance(nm, NormalMap):
        S = nm.samples(stride)
    elif nm is None:
        S = np.zeros((0, 3))
    else:
        S = check_unit_vectors(nm, "normals")
    if line_dirs is not None and len(line_dirs):
        L = check_vectors(line_dirs, 3, "line_dirs")
        L = L / np.linalg.norm(L, axis=1, keepdims=True)
        S = np.vstack([S, L])
    return S


def mean_shift_sweep(S: np.ndarray, R: np.ndarray, cfg: MeanShiftConfig):
    """One update of all three axes. Returns ``(R_new, support)``."""
    cos_half = np.cos(cfg.conic_half_angle)
    absdot = np.abs(S @ R)
    axes = R.copy()
    support = []
    for n in range(3):
        sel = absdot[:, n] >= cos_half
        count = int(sel.sum())
        support.append(count)
        if count < cfg.min_support:
            continue
        Q = axis_frame(R, n)
        w = S[sel] @ Q
        w *= np.sign(w[:, 2:3])
        m = w[:, :2] / w[:, 2:3]
        axes[:, n] = lift(cluster_mean(m, cfg.kernel_width), Q)
    ok = [s >= cfg.min_support for s in support]
    if sum(ok) < 2:
        raise InsufficientSupport(f"axis support {support} below {cfg.min_support} on two or more axes")
    weights = np.array(support, dtype=float)
    if sum(ok) == 2:
        # one axis is unobserved: complete the right-handed triad from the other two
        n = ok.index(False)
        axes[:, n] = np.cross(axes[:, (n + 1) % 3], axes[:, (n + 2) % 3])
        weights[n] = min(weights[(n + 1) % 3], weights[(n + 2) % 3])
    # the variance of each cluster mean falls with its support, so weight the
    # projection onto SO(3) accordingly (weighted orthogonal Procrustes)
    return nearest_rotation(axes * weights), tuple(support)


def estimate_manhattan_rotation(
    nm,
    line_dirs=None,
    init=None,
    cfg: Optional[MeanShiftConfig] = None,
) -> ManhattanFrame:
    """Refine ``init`` (defaults to identity) to the Manhattan frame seen by ``nm``.

    ``nm`` is a :class:`NormalMap` (masked and subsampled with ``cfg.stride``)
    or an ``(N, 3)`` array of unit normals used as-is. Optional ``line_dirs``
    are camera-frame 3D line directions added as single samples.
    """
    cfg = cfg or MeanShiftConfig()
    R = np.eye(3) if init is None else check_rotation(init, "init")
    S = _collect_samples(nm, line_dirs, cfg.stride)
    converged = False
    support = (0, 0, 0)
    it = 0
    for it in range(1, cfg.max_iterations + 1):
        R_new, support = mean_shift_sweep(S, R, cfg)
        step = np.max(np.arccos(np.clip(np.einsum("ij,ij->j", R_new, R), -1.0, 1.0)))
        R = R_new
        if step < cfg.convergence_angle:
            converged = True
            break
    return ManhattanFrame(RotationMatrix(R, MANHATTAN, CAMERA), support, converged, it)


# coarse-to-fine cone schedule used only when starting from identity
INIT_CONE_SCHEDULE = (np.deg2rad(45.0), np.deg2rad(30.0))


def initialize_from_identity(nm, cfg: Optional[MeanShiftConfig] = None, line_dirs=None) -> ManhattanFrame:
    """First-frame Manhattan frame starting from the identity rotation.

    A wide cone is used first so that cameras turned up to ~45 degrees away
    from the Manhattan axes are captured, then the cone is narrowed to
    ``cfg.conic_half_angle``. The result is the axis labelling nearest to the
    identity.
    """
    cfg = cfg or MeanShiftConfig()
    R = np.eye(3)
    iterations = 0
    for angle in INIT_CONE_SCHEDULE:
        if angle <= cfg.conic_half_angle:
            continue
        try:
            mf = estimate_manhattan_rotation(nm, line_dirs, R, replace(cfg, conic_half_angle=angle))
        except InsufficientSupport:
            continue
        R = mf.R
        iterations += mf.iterations_used
    mf = estimate_manhattan_rotation(nm, line_dirs, R, cfg)
    return replace(mf, iterations_used=iterations + mf.iterations_used)


class ManhattanRotationEstimator(TransformerMixin, BaseEstimator):
    """Estimator wrapper around :func:`estimate_manhattan_rotation`.

    ``fit`` accepts a :class:`NormalMap` or an ``(N, 3)`` array of camera-frame
    unit normals and learns ``rotation_`` (Manhattan -> camera).
    ``transform`` expresses camera-frame directions in Manhattan coordinates.
    """

    def __init__(
        self,
        kernel_width=2.0,
        conic_half_angle=np.deg2rad(20.0),
        max_iterations=20,
        convergence_angle=1e-5,
        min_support=300,
        stride=4,
        init=None,
    ):
        self.kernel_width = kernel_width
        self.conic_half_angle = conic_half_angle
        self.max_iterations = max_iterations
        self.convergence_angle = convergence_angle
        self.min_support = min_support
        self.stride = stride
        self.init = init

    def _config(self) -> MeanShiftConfig:
        return MeanShiftConfig(
            self.kernel_width,
            self.conic_half_angle,
            self.max_iterations,
            self.convergence_angle,
            self.min_support,
            self.stride,
        )

    def fit(self, X, y=None, line_dirs=None):
        cfg = self._config()
        if self.init is None:
            mf = initialize_from_identity(X, cfg, line_dirs)
        else:
            mf = estimate_manhattan_rotation(X, line_dirs, self.init, cfg)
        self.manhattan_frame_ = mf
        self.rotation_ = mf.R
        self.support_ = np.array(mf.support)
        self.converged_ = mf.converged
        self.n_iter_ = mf.iterations_used
        return self

    def transform(self, X):
        check_is_fitted(self, "rotation_")
        return check_vectors(X) @ self.rotation_
