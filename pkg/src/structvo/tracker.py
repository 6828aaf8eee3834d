"""Per-frame pose tracking.

Reprojection residuals for points and lines, their analytic Jacobians, a
Huber-robust Levenberg-Marquardt solver (translation-only or full 6-DoF), and
the tracking flow: Manhattan rotation, translation from the two previous
frames, inlier-gated validation against the local map, frame-to-frame /
keyframe fallbacks and a final 6-DoF refinement.

Poses are world-to-camera. The 6-DoF parameterization perturbs on the left,
``R <- exp(phi) R``, ``t <- exp(phi) t + rho``, and Jacobian columns are
ordered ``(phi, rho)``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .exceptions import (
    DegenerateLine,
    Diverged,
    IllPosed,
    InsufficientSupport,
    NonPositiveDepth,
    TrackingLost,
)
from .features import FrameObservations, KeyframeMap, hamming_matrix, mutual_best_matches, sparse_hamming_matrix
from .geometry import DEPTH_EPS, CameraIntrinsics, Pose, so3_exp
from .manhattan import MeanShiftConfig, estimate_manhattan_rotation

logger = logging.getLogger(__name__)

MANHATTAN_MODE = "manhattan"
FRAME_TO_FRAME = "frame_to_frame"
KEYFRAME_FALLBACK = "keyframe_fallback"
INITIALIZING = "initializing"


def _rt(pose):
    if isinstance(pose, Pose):
        return pose.R, pose.t
    R, t = pose
    return np.asarray(R, dtype=float), np.asarray(t, dtype=float)


def _check_depth(Pc):
    if np.any(np.asarray(Pc)[..., 2] <= DEPTH_EPS):
        raise NonPositiveDepth("point at or behind the camera plane")


# ---------------------------------------------------------------- points


def point_residual(p_k, P_world, pose, K: CameraIntrinsics) -> np.ndarray:
    """``p_k - pi(R P + t)`` in pixels."""
    R, t = _rt(pose)
    Pc = R @ np.asarray(P_world, dtype=float) + t
    _check_depth(Pc)
    return np.asarray(p_k, dtype=float) - np.array([K.fx * Pc[0] / Pc[2] + K.cx, K.fy * Pc[1] / Pc[2] + K.cy])


def _point_jac(Pc, K):
    """Vectorized ``(N, 2, 6)`` point Jacobian for camera-frame points ``(N, 3)``."""
    x, y, z = Pc[:, 0], Pc[:, 1], Pc[:, 2]
    fx, fy = K.fx, K.fy
    iz = 1.0 / z
    iz2 = iz * iz
    J = np.empty((len(Pc), 2, 6))
    J[:, 0, 0] = fx * x * y * iz2
    J[:, 0, 1] = -fx * (1.0 + x * x * iz2)
    J[:, 0, 2] = fx * y * iz
    J[:, 0, 3] = -fx * iz
    J[:, 0, 4] = 0.0
    J[:, 0, 5] = fx * x * iz2
    J[:, 1, 0] = fy * (1.0 + y * y * iz2)
    J[:, 1, 1] = -fy * x * y * iz2
    J[:, 1, 2] = -fy * x * iz
    J[:, 1, 3] = 0.0
    J[:, 1, 4] = -fy * iz
    J[:, 1, 5] = fy * y * iz2
    return J


def point_jacobian(P_cam, K: CameraIntrinsics) -> np.ndarray:
    """Full 2x6 Jacobian of the point residual w.r.t. ``(phi, rho)``."""
    P_cam = np.asarray(P_cam, dtype=float).reshape(1, 3)
    _check_depth(P_cam)
    return _point_jac(P_cam, K)[0]


def point_jacobian_t(P_cam, K: CameraIntrinsics) -> np.ndarray:
    """Translation block of :func:`point_jacobian`."""
    return point_jacobian(P_cam, K)[:, 3:]


# ---------------------------------------------------------------- lines


def line_function(p_start, p_end) -> np.ndarray:
    """``(p_s x p_e) / (|p_s| |p_e|)`` with homogeneous pixels ``(u, v, 1)``."""
    ps = np.array([p_start[0], p_start[1], 1.0])
    pe = np.array([p_end[0], p_end[1], 1.0])
    l = np.cross(ps, pe)
    if np.linalg.norm(l) < 1e-12:
        raise DegenerateLine("line endpoints coincide")
    return l / (np.linalg.norm(ps) * np.linalg.norm(pe))


def line_functions(endpoints) -> np.ndarray:
    e = np.asarray(endpoints, dtype=float).reshape(-1, 2, 2)
    ps = np.concatenate([e[:, 0], np.ones((len(e), 1))], axis=1)
    pe = np.concatenate([e[:, 1], np.ones((len(e), 1))], axis=1)
    l = np.cross(ps, pe)
    if np.any(np.linalg.norm(l, axis=1) < 1e-12):
        raise DegenerateLine("line endpoints coincide")
    return l / (np.linalg.norm(ps, axis=1) * np.linalg.norm(pe, axis=1))[:, None]


def line_residual(l, P_world, pose, K: CameraIntrinsics) -> float:
    """``l . (u, v, 1)`` for the projection of a 3D line endpoint."""
    R, t = _rt(pose)
    Pc = R @ np.asarray(P_world, dtype=float) + t
    _check_depth(Pc)
    u = K.fx * Pc[0] / Pc[2] + K.cx
    v = K.fy * Pc[1] / Pc[2] + K.cy
    return float(np.dot(l, [u, v, 1.0]))


def _line_jac(Pc, l, K):
    """Vectorized ``(N, 6)`` line Jacobian; ``l`` is ``(N, 3)``."""
    x, y, z = Pc[:, 0], Pc[:, 1], Pc[:, 2]
    a = K.fx * l[:, 0]
    b = K.fy * l[:, 1]
    g = np.stack([a / z, b / z, -(a * x + b * y) / (z * z)], axis=1)
    return np.concatenate([np.cross(Pc, g), g], axis=1)


def line_jacobian(P_cam, l, K: CameraIntrinsics) -> np.ndarray:
    """Full 1x6 Jacobian of the line residual w.r.t. ``(phi, rho)``."""
    P_cam = np.asarray(P_cam, dtype=float).reshape(1, 3)
    _check_depth(P_cam)
    return _line_jac(P_cam, np.asarray(l, dtype=float).reshape(1, 3), K)


def line_jacobian_t(P_cam, l, K: CameraIntrinsics) -> np.ndarray:
    return line_jacobian(P_cam, l, K)[:, 3:]


# ---------------------------------------------------------------- robust LM


def huber(norms, k):
    """Huber cost and IRLS weight per term."""
    norms = np.asarray(norms, dtype=float)
    if not np.isfinite(k):
        return 0.5 * norms**2, np.ones_like(norms)
    small = norms <= k
    cost = np.where(small, 0.5 * norms**2, k * (norms - 0.5 * k))
    weight = np.where(small, 1.0, k / np.maximum(norms, 1e-300))
    return cost, weight


@dataclass
class LMResult:
    R: np.ndarray
    t: np.ndarray
    cost: float
    costs: list
    iterations: int
    point_errors: np.ndarray  # pixel error per point term at the solution
    line_errors: np.ndarray  # point-to-line pixel distance per line term
    point_inliers: np.ndarray
    line_inliers: np.ndarray

    @property
    def n_inliers(self) -> int:
        return int(self.point_inliers.sum() + self.line_inliers.sum())


@dataclass
class TranslationProblem:
    """Residual terms for a pose with fixed or free rotation.

    Line terms hold one 3D endpoint and the Eq.-10 coefficients of the
    observed 2D line. Inside the solver line residuals are divided by
    ``|(a, b)|`` so that they are point-to-line distances in pixels and share
    the pixel Huber scale.
    """

    rotation: np.ndarray
    K: CameraIntrinsics
    point_pixels: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    point_world: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    line_coeffs: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    line_world: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    t0: np.ndarray = field(default_factory=lambda: np.zeros(3))
    point_scale: float = 2.0
    line_scale: float = 1.5

    def __post_init__(self):
        self.rotation = np.asarray(getattr(self.rotation, "matrix", self.rotation), dtype=float)
        self.point_pixels = np.asarray(self.point_pixels, dtype=float).reshape(-1, 2)
        self.point_world = np.asarray(self.point_world, dtype=float).reshape(-1, 3)
        self.line_coeffs = np.asarray(self.line_coeffs, dtype=float).reshape(-1, 3)
        self.line_world = np.asarray(self.line_world, dtype=float).reshape(-1, 3)
        self.t0 = np.asarray(self.t0, dtype=float).reshape(3)

    @property
    def n_scalar_residuals(self) -> int:
        return 2 * len(self.point_pixels) + len(self.line_coeffs)

    def dropped_behind(self, R=None, t=None) -> tuple:
        """Boolean masks of terms with non-positive depth at ``(R, t)``."""
        R = self.rotation if R is None else R
        t = self.t0 if t is None else t
        zp = (self.point_world @ R.T + t)[:, 2]
        zl = (self.line_world @ R.T + t)[:, 2]
        return zp <= DEPTH_EPS, zl <= DEPTH_EPS

    def subset(self, point_mask, line_mask) -> "TranslationProblem":
        return TranslationProblem(
            self.rotation, self.K, self.point_pixels[point_mask], self.point_world[point_mask],
            self.line_coeffs[line_mask], self.line_world[line_mask], self.t0, self.point_scale, self.line_scale,
        )


class _Evaluator:
    def __init__(self, prob: TranslationProblem):
        self.p = prob
        ab = np.linalg.norm(prob.line_coeffs[:, :2], axis=1)
        self.line_unit = prob.line_coeffs / np.where(ab > 0, ab, 1.0)[:, None]

    def __call__(self, R, t, with_jac=True):
        p, K = self.p, self.p.K
        Pc = p.point_world @ R.T + t
        Lc = p.line_world @ R.T + t
        if np.any(Pc[:, 2] <= DEPTH_EPS) or np.any(Lc[:, 2] <= DEPTH_EPS):
            raise NonPositiveDepth("term moved behind the camera")
        rp = p.point_pixels - np.stack([K.fx * Pc[:, 0] / Pc[:, 2] + K.cx, K.fy * Pc[:, 1] / Pc[:, 2] + K.cy], axis=1)
        u = K.fx * Lc[:, 0] / Lc[:, 2] + K.cx
        v = K.fy * Lc[:, 1] / Lc[:, 2] + K.cy
        rl = self.line_unit[:, 0] * u + self.line_unit[:, 1] * v + self.line_unit[:, 2]
        if not with_jac:
            return rp, rl, None, None
        return rp, rl, _point_jac(Pc, K), _line_jac(Lc, self.line_unit, K)

    def cost(self, rp, rl):
        cp, _ = huber(np.linalg.norm(rp, axis=1), self.p.point_scale)
        cl, _ = huber(np.abs(rl), self.p.line_scale)
        return float(cp.sum() + cl.sum())


def _levenberg_marquardt(prob: TranslationProblem, R0, t0, full: bool, max_iterations=50,
                         lambda0=1e-3, rel_tol=1e-8, step_tol=1e-8, max_rejects=10,
                         inlier_factor=3.0) -> LMResult:
    ev = _Evaluator(prob)
    R, t = np.array(R0, dtype=float), np.array(t0, dtype=float)
    rp, rl, Jp, Jl = ev(R, t)
    cost = ev.cost(rp, rl)
    costs = [cost]
    lam = lambda0
    rejects = 0
    cols = slice(0, 6) if full else slice(3, 6)
    it = 0
    for it in range(1, max_iterations + 1):
        if cost == 0.0:
            break
        _, wp = huber(np.linalg.norm(rp, axis=1), prob.point_scale)
        _, wl = huber(np.abs(rl), prob.line_scale)
        Jp_ = Jp[:, :, cols]
        Jl_ = Jl[:, cols]
        H = np.einsum("n,nki,nkj->ij", wp, Jp_, Jp_) + np.einsum("n,ni,nj->ij", wl, Jl_, Jl_)
        g = np.einsum("n,nki,nk->i", wp, Jp_, rp) + np.einsum("n,ni,n->i", wl, Jl_, rl)
        while True:
            A = H + lam * np.diag(np.maximum(np.diag(H), 1e-12))
            try:
                delta = -np.linalg.solve(A, g)
            except np.linalg.LinAlgError as exc:
                raise IllPosed("normal equations are singular") from exc
            if full:
                dR = so3_exp(delta[:3])
                R_new, t_new = dR @ R, dR @ t + delta[3:]
            else:
                R_new, t_new = R, t + delta
            try:
                rp_n, rl_n, Jp_n, Jl_n = ev(R_new, t_new)
                cost_new = ev.cost(rp_n, rl_n)
            except NonPositiveDepth:
                cost_new = np.inf
            if cost_new <= cost:
                break
            if np.linalg.norm(delta) < step_tol:
                delta = None
                break
            lam *= 10.0
            rejects += 1
            if rejects >= max_rejects:
                raise Diverged(f"{rejects} consecutive rejected steps")
        if delta is None:
            break
        rel = (cost - cost_new) / cost
        R, t, rp, rl, Jp, Jl, cost = R_new, t_new, rp_n, rl_n, Jp_n, Jl_n, cost_new
        costs.append(cost)
        lam *= 0.5
        rejects = 0
        if rel < rel_tol or np.linalg.norm(delta) < step_tol:
            break
    # accepted costs must never increase
    assert all(b <= a for a, b in zip(costs, costs[1:])), "LM accepted a cost increase"
    ep = np.linalg.norm(rp, axis=1)
    el = np.abs(rl)
    return LMResult(
        R, t, cost, costs, it, ep, el,
        ep < inlier_factor * prob.point_scale, el < inlier_factor * prob.line_scale,
    )


def _solve_with_inlier_pass(prob: TranslationProblem, full: bool, min_residuals: int, max_iterations: int,
                            inlier_pass: bool, **kw) -> LMResult:
    res = _levenberg_marquardt(prob, prob.rotation, prob.t0, full, max_iterations, **kw)
    if not inlier_pass or (res.point_inliers.all() and res.line_inliers.all()):
        return res
    sub = prob.subset(res.point_inliers, res.line_inliers)
    if sub.n_scalar_residuals < min_residuals:
        return res
    # Huber bounds but does not remove the pull of gross outliers: re-solve on the inliers alone
    try:
        res2 = _levenberg_marquardt(sub, res.R, res.t, full, max_iterations, **kw)
    except Diverged:
        return res
    ev = _Evaluator(prob)
    try:
        rp, rl, _, _ = ev(res2.R, res2.t, with_jac=False)
    except NonPositiveDepth:
        return res
    factor = kw.get("inlier_factor", 3.0)
    ep, el = np.linalg.norm(rp, axis=1), np.abs(rl)
    return LMResult(res2.R, res2.t, ev.cost(rp, rl), res2.costs, res.iterations + res2.iterations, ep, el,
                    ep < factor * prob.point_scale, el < factor * prob.line_scale)


def solve_translation_lm(prob: TranslationProblem, max_iterations: int = 50, inlier_pass: bool = True,
                         **kw) -> LMResult:
    """Translation with the rotation held fixed (3-DoF).

    With ``inlier_pass`` the solve is repeated once on the terms classified as
    inliers; inlier flags always refer to every term of ``prob``.
    """
    if prob.n_scalar_residuals < 3:
        raise IllPosed(f"{prob.n_scalar_residuals} scalar residuals; need at least 3")
    return _solve_with_inlier_pass(prob, False, 3, max_iterations, inlier_pass, **kw)


def solve_pose_lm(prob: TranslationProblem, max_iterations: int = 50, inlier_pass: bool = True,
                  **kw) -> LMResult:
    """Rotation and translation (6-DoF) starting from ``(prob.rotation, prob.t0)``."""
    if prob.n_scalar_residuals < 6:
        raise IllPosed(f"{prob.n_scalar_residuals} scalar residuals; need at least 6")
    return _solve_with_inlier_pass(prob, True, 6, max_iterations, inlier_pass, **kw)


# ---------------------------------------------------------------- tracking


@dataclass(frozen=True)
class TrackerConfig:
    min_inliers: int = 30
    huber_scale_px: float = 2.0
    line_huber_scale_px: float = 1.5
    lm_max_iters: int = 50
    local_map_keyframes: int = 5
    window: int = 2
    search_radius: float = 30.0
    refine_radius: float = 8.0
    fallback_radius: float = 50.0
    max_hamming: int = 64
    ratio: float = 0.8
    inlier_factor: float = 3.0
    use_lines: bool = True


@dataclass
class TrackedFrame:
    frame: FrameObservations
    pose: Pose
    point_assoc: np.ndarray
    line_assoc: np.ndarray
    mode: str = MANHATTAN_MODE


@dataclass
class TrackResult:
    pose: Pose
    mode: str
    point_inliers: int
    line_inliers: int
    accepted: bool
    point_assoc: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    line_assoc: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    manhattan_rotation: Optional[np.ndarray] = None  # rotation before the final refinement
    manhattan_failure: Optional[str] = None

    def __post_init__(self):
        if self.accepted and self.mode != INITIALIZING and self.n_inliers < 0:
            raise ValueError("accepted result without inliers")

    @property
    def n_inliers(self) -> int:
        return self.point_inliers + self.line_inliers


@dataclass
class _Assoc:
    """Landmark-to-feature matches found for one frame."""

    point_lm: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    point_feat: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    line_lm: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    line_feat: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __len__(self):
        return len(self.point_lm) + len(self.line_lm)


def _landmark_descriptors(table, ids):
    return np.array([table[i].descriptor for i in ids], dtype=np.uint8).reshape(-1, 32)


def search_points_by_projection(frame, kmap, ids, R, t, K, radius, max_hamming, ratio):
    ids = np.asarray([i for i in ids if i in kmap.points], dtype=np.int64)
    if len(ids) == 0 or frame.n_points == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    Pc = kmap.point_array(ids) @ R.T + t
    front = Pc[:, 2] > 1e-6
    z = np.where(front, Pc[:, 2], 1.0)
    uv = np.stack([K.fx * Pc[:, 0] / z + K.cx, K.fy * Pc[:, 1] / z + K.cy], axis=1)
    vis = front & K.contains(uv, -radius)
    ids, uv = ids[vis], uv[vis]
    if len(ids) == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    d2 = ((uv[:, None, :] - frame.point_pixels[None, :, :]) ** 2).sum(-1)
    allowed = d2 <= radius * radius
    dist = sparse_hamming_matrix(_landmark_descriptors(kmap.points, ids), frame.point_descriptors, allowed)
    m = mutual_best_matches(dist, allowed, max_hamming, ratio)
    return ids[m[:, 0]], m[:, 1]


def search_lines_by_projection(frame, kmap, ids, R, t, K, radius, max_hamming, ratio):
    ids = np.asarray([i for i in ids if i in kmap.lines], dtype=np.int64)
    if len(ids) == 0 or frame.n_lines == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    E = kmap.line_array(ids) @ R.T + t  # (n, 2, 3)
    front = np.all(E[:, :, 2] > 1e-6, axis=1)
    ids, E = ids[front], E[front]
    if len(ids) == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    uv = np.stack([K.fx * E[..., 0] / E[..., 2] + K.cx, K.fy * E[..., 1] / E[..., 2] + K.cy], axis=-1)
    hs = np.concatenate([uv[:, 0], np.ones((len(uv), 1))], axis=1)
    he = np.concatenate([uv[:, 1], np.ones((len(uv), 1))], axis=1)
    lp = np.cross(hs, he)
    ab = np.linalg.norm(lp[:, :2], axis=1)
    ok = ab > 1e-9
    lp = lp / np.where(ok, ab, 1.0)[:, None]
    fe = frame.line_endpoints
    fh = np.concatenate([fe, np.ones((len(fe), 2, 1))], axis=2)  # (m, 2, 3)
    dist_s = np.abs(lp @ fh[:, 0].T)
    dist_e = np.abs(lp @ fh[:, 1].T)
    # candidate must also overlap the predicted segment along its direction
    d = uv[:, 1] - uv[:, 0]
    L2 = np.maximum((d**2).sum(1), 1e-12)
    mid = frame.line_midpoints
    s = ((mid[None, :, :] - uv[:, None, 0, :]) * d[:, None, :]).sum(-1) / L2[:, None]
    allowed = ok[:, None] & (dist_s <= radius) & (dist_e <= radius) & (s > -0.25) & (s < 1.25)
    dist = sparse_hamming_matrix(_landmark_descriptors(kmap.lines, ids), frame.line_descriptors, allowed)
    m = mutual_best_matches(dist, allowed, max_hamming, ratio)
    return ids[m[:, 0]], m[:, 1]


def _search(frame, kmap, point_ids, line_ids, R, t, K, radius, cfg: TrackerConfig) -> _Assoc:
    a = _Assoc()
    a.point_lm, a.point_feat = search_points_by_projection(
        frame, kmap, point_ids, R, t, K, radius, cfg.max_hamming, cfg.ratio)
    if cfg.use_lines:
        a.line_lm, a.line_feat = search_lines_by_projection(
            frame, kmap, line_ids, R, t, K, radius, cfg.max_hamming, cfg.ratio)
    return a


def build_problem(frame, kmap, assoc: _Assoc, R, t0, K, cfg: TrackerConfig) -> TranslationProblem:
    Pw = kmap.point_array(assoc.point_lm)
    obs = frame.point_pixels[assoc.point_feat]
    if len(assoc.line_lm):
        E = kmap.line_array(assoc.line_lm)
        l = line_functions(frame.line_endpoints[assoc.line_feat])
        line_world = E.reshape(-1, 3)
        line_coeffs = np.repeat(l, 2, axis=0)
    else:
        line_world = np.zeros((0, 3))
        line_coeffs = np.zeros((0, 3))
    return TranslationProblem(R, K, obs, Pw, line_coeffs, line_world, t0,
                              cfg.huber_scale_px, cfg.line_huber_scale_px)


def _drop_behind(prob: TranslationProblem, assoc: _Assoc):
    bp, bl = prob.dropped_behind()
    if not (bp.any() or bl.any()):
        return prob, assoc
    keep_line = ~(bl[0::2] | bl[1::2])
    assoc = _Assoc(assoc.point_lm[~bp], assoc.point_feat[~bp], assoc.line_lm[keep_line], assoc.line_feat[keep_line])
    return prob.subset(~bp, np.repeat(keep_line, 2)), assoc


def _solve(frame, kmap, assoc, R, t0, K, cfg, full) -> tuple:
    prob = build_problem(frame, kmap, assoc, R, t0, K, cfg)
    prob, assoc = _drop_behind(prob, assoc)
    solver = solve_pose_lm if full else solve_translation_lm
    res = solver(prob, cfg.lm_max_iters, inlier_factor=cfg.inlier_factor)
    return res, assoc


def _inlier_assoc(res: LMResult, assoc: _Assoc) -> _Assoc:
    lin = res.line_inliers[0::2] & res.line_inliers[1::2]
    return _Assoc(assoc.point_lm[res.point_inliers], assoc.point_feat[res.point_inliers],
                  assoc.line_lm[lin], assoc.line_feat[lin])


def _count(res: LMResult):
    return int(res.point_inliers.sum()), int(res.line_inliers.sum())


def local_map_ids(kmap: KeyframeMap, history, n_keyframes: int):
    pts, lns = set(), set()
    for kf in kmap.last_keyframes(n_keyframes):
        pts.update(kf.point_assoc[kf.point_assoc >= 0].tolist())
        lns.update(kf.line_assoc[kf.line_assoc >= 0].tolist())
    for h in history:
        pts.update(h.point_assoc[h.point_assoc >= 0].tolist())
        lns.update(h.line_assoc[h.line_assoc >= 0].tolist())
    return sorted(pts), sorted(lns)


def _validate_and_refine(frame, kmap, history, R, t, K, cfg: TrackerConfig, refine: bool = True):
    """Search the local map around ``(R, t)``, count inliers, optionally refine in 6-DoF.

    Returns ``(R, t, assoc, (n_point_inliers, n_line_inliers))`` or ``None``
    when the gate is not met.
    """
    pts, lns = local_map_ids(kmap, history, cfg.local_map_keyframes)
    assoc = _search(frame, kmap, pts, lns, R, t, K, cfg.refine_radius, cfg)
    if len(assoc) == 0:
        return None
    prob = build_problem(frame, kmap, assoc, R, t, K, cfg)
    prob, assoc = _drop_behind(prob, assoc)
    ev = _Evaluator(prob)
    rp, rl, _, _ = ev(R, t, with_jac=False)
    n_in = int((np.linalg.norm(rp, axis=1) < cfg.inlier_factor * cfg.huber_scale_px).sum()
               + (np.abs(rl) < cfg.inlier_factor * cfg.line_huber_scale_px).sum())
    if n_in < cfg.min_inliers:
        return None
    if refine and prob.n_scalar_residuals >= 6:
        try:
            res = solve_pose_lm(prob, cfg.lm_max_iters, inlier_factor=cfg.inlier_factor)
        except (Diverged, IllPosed):
            res = None
        if res is not None and res.n_inliers >= cfg.min_inliers:
            return res.R, res.t, _inlier_assoc(res, assoc), _count(res)
    # refinement failed or skipped: keep the validated pose
    res = LMResult(R, t, ev.cost(rp, rl), [], 0, np.linalg.norm(rp, axis=1), np.abs(rl),
                   np.linalg.norm(rp, axis=1) < cfg.inlier_factor * cfg.huber_scale_px,
                   np.abs(rl) < cfg.inlier_factor * cfg.line_huber_scale_px)
    return R, t, _inlier_assoc(res, assoc), _count(res)


def _result(frame, R, t, mode, assoc: _Assoc, counts, R_mw=None, mw_failure=None) -> TrackResult:
    pa = np.full(frame.n_points, -1, dtype=np.int64)
    la = np.full(frame.n_lines, -1, dtype=np.int64)
    pa[assoc.point_feat] = assoc.point_lm
    la[assoc.line_feat] = assoc.line_lm
    pose = Pose.from_rt(R, t, "world", "cam", frame.timestamp)
    return TrackResult(pose, mode, counts[0], counts[1], True, pa, la, R_mw, mw_failure)


def manhattan_rotation_for(normal_map, init_R, mcfg: MeanShiftConfig):
    """World-to-camera rotation from the normal map; the world frame is the Manhattan frame."""
    mf = estimate_manhattan_rotation(normal_map, None, init_R, mcfg)
    return mf.R


def track_frame(frame: FrameObservations, normal_map, kmap: KeyframeMap, history: list,
                K: CameraIntrinsics, cfg: TrackerConfig = TrackerConfig(),
                mcfg: MeanShiftConfig = MeanShiftConfig()) -> TrackResult:
    """Track one frame against the map; ``history`` holds previous :class:`TrackedFrame` s, newest last.

    Raises :class:`TrackingLost` if the Manhattan path and both fallbacks fail.
    """
    if not history:
        raise ValueError("tracking needs at least one previous frame")
    last = history[-1]
    R_mw, failure = None, None
    if normal_map is not None:
        try:
            R_mw = manhattan_rotation_for(normal_map, last.pose.R, mcfg)
        except InsufficientSupport as exc:
            failure = f"insufficient support: {exc}"
    else:
        failure = "no normal map"

    if R_mw is not None:
        window = history[-cfg.window:]
        t0 = -R_mw @ last.pose.center()
        assoc = _Assoc()
        parts = []
        for h in window:
            pts = h.point_assoc[h.point_assoc >= 0]
            lns = h.line_assoc[h.line_assoc >= 0] if cfg.use_lines else []
            parts.append(_search(frame, kmap, pts, lns, R_mw, t0, K, cfg.search_radius, cfg))
        assoc = _Assoc(*(np.concatenate([getattr(p, f) for p in parts]).astype(np.int64)
                         for f in ("point_lm", "point_feat", "line_lm", "line_feat")))
        try:
            res, assoc = _solve(frame, kmap, assoc, R_mw, t0, K, cfg, full=False)
            out = _validate_and_refine(frame, kmap, history, R_mw, res.t, K, cfg)
        except (IllPosed, Diverged, NonPositiveDepth) as exc:
            out = None
            failure = f"translation: {exc}"
        if out is not None:
            R, t, a, counts = out
            return _result(frame, R, t, MANHATTAN_MODE, a, counts, R_mw)
        failure = failure or "inlier gate rejected the Manhattan pose"
    logger.debug("frame %s: falling back (%s)", frame.frame_id, failure)
    return fallback_track(frame, kmap, history, K, cfg, R_mw, failure)


def fallback_track(frame: FrameObservations, kmap: KeyframeMap, history: list, K: CameraIntrinsics,
                   cfg: TrackerConfig = TrackerConfig(), R_mw=None, failure=None) -> TrackResult:
    """Frame-to-frame tracking, then keyframe descriptor matching, both in 6-DoF."""
    last = history[-1]
    R0, t0 = last.pose.R, last.pose.t
    # stage 1: re-projection guided search against the last frame
    pts = last.point_assoc[last.point_assoc >= 0]
    lns = last.line_assoc[last.line_assoc >= 0] if cfg.use_lines else []
    assoc = _search(frame, kmap, pts, lns, R0, t0, K, cfg.fallback_radius, cfg)
    out = _fallback_solve(frame, kmap, history, assoc, R0, t0, K, cfg)
    if out is not None:
        R, t, a, counts = out
        return _result(frame, R, t, FRAME_TO_FRAME, a, counts, R_mw, failure)
    # stage 2: descriptor matching against the last keyframe, lines by projection
    if kmap.keyframes:
        kf = kmap.keyframes[kmap.keyframe_ids[-1]]
        sel = np.flatnonzero(kf.point_assoc >= 0)
        sel = np.array([i for i in sel if kf.point_assoc[i] in kmap.points], dtype=np.int64)
        a = _Assoc()
        if len(sel) and frame.n_points:
            dist = hamming_matrix(kf.frame.point_descriptors[sel], frame.point_descriptors)
            m = mutual_best_matches(dist, np.ones_like(dist, dtype=bool), cfg.max_hamming, cfg.ratio)
            a.point_lm, a.point_feat = kf.point_assoc[sel][m[:, 0]], m[:, 1]
        if cfg.use_lines:
            kl = kf.line_assoc[kf.line_assoc >= 0]
            a.line_lm, a.line_feat = search_lines_by_projection(
                frame, kmap, kl, R0, t0, K, cfg.fallback_radius, cfg.max_hamming, cfg.ratio)
        out = _fallback_solve(frame, kmap, history, a, R0, t0, K, cfg)
        if out is not None:
            R, t, a, counts = out
            return _result(frame, R, t, KEYFRAME_FALLBACK, a, counts, R_mw, failure)
    raise TrackingLost(f"frame {frame.frame_id}: all tracking stages failed ({failure})")


def _fallback_solve(frame, kmap, history, assoc, R0, t0, K, cfg):
    if 2 * len(assoc.point_lm) + 2 * len(assoc.line_lm) < 6:
        return None
    try:
        res, assoc = _solve(frame, kmap, assoc, R0, t0, K, cfg, full=True)
    except (IllPosed, Diverged, NonPositiveDepth):
        return None
    if res.n_inliers < cfg.min_inliers // 2:
        return None
    return _validate_and_refine(frame, kmap, history, res.R, res.t, K, cfg)
