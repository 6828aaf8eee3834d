"""Synthetic planar scenes: ray-cast normals and depth, projected features.

Scenes are built from rectangles. Structural rectangles carry point and line
landmarks and occlude each other. Distractor rectangles only enter the
normal/depth renderer; they model clutter that the normal source sees (for
instance an unstructured object filling the view) and can be attached to
the camera and restricted to a frame range.

All randomness is drawn from generators seeded by ``(seed, stream, id)`` so
frames can be rendered in any order with identical output.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.spatial.transform import Rotation, Slerp

from ..features import DESCRIPTOR_BYTES, MIN_LINE_LENGTH, FrameObservations
from ..geometry import CameraIntrinsics, Pose
from ..normals import DepthMap, NormalMap

NEAR = 0.05
_PRE_NOISE_STREAM = 11
_NORMAL_STREAM = 13
_FEATURE_STREAM = 17


@dataclass(frozen=True)
class Rect:
    """Rectangle ``center + a*u + b*v`` with ``|a| <= half_u``, ``|b| <= half_v``."""

    center: tuple
    u: tuple
    v: tuple
    half_u: float
    half_v: float
    planar: bool = True
    frame: str = "world"  # "world" or "camera" (distractors only)
    frames: Optional[tuple] = None  # inclusive frame range in which a distractor exists
    name: str = ""

    @property
    def normal(self) -> np.ndarray:
        n = np.cross(self.u, self.v)
        return n / np.linalg.norm(n)

    def active(self, frame_id) -> bool:
        return self.frames is None or (frame_id is not None and self.frames[0] <= frame_id <= self.frames[1])

    def to_dict(self) -> dict:
        d = dict(center=list(map(float, self.center)), u=list(map(float, self.u)), v=list(map(float, self.v)),
                 half_u=float(self.half_u), half_v=float(self.half_v), planar=self.planar,
                 frame=self.frame, name=self.name)
        d["frames"] = None if self.frames is None else list(self.frames)
        return d

    @classmethod
    def from_dict(cls, d) -> "Rect":
        return cls(tuple(d["center"]), tuple(d["u"]), tuple(d["v"]), d["half_u"], d["half_v"],
                   d.get("planar", True), d.get("frame", "world"),
                   None if d.get("frames") is None else tuple(d["frames"]), d.get("name", ""))


def axis_rect(axis: int, offset: float, lo, hi, name: str = "") -> Rect:
    """Axis-aligned rectangle ``x[axis] = offset`` spanning ``lo..hi`` on the other two axes."""
    a, b = (axis + 1) % 3, (axis + 2) % 3
    c = np.zeros(3)
    c[axis] = offset
    c[a] = 0.5 * (lo[0] + hi[0])
    c[b] = 0.5 * (lo[1] + hi[1])
    u = np.zeros(3)
    u[a] = 1.0
    v = np.zeros(3)
    v[b] = 1.0
    return Rect(tuple(c), tuple(u), tuple(v), 0.5 * (hi[0] - lo[0]), 0.5 * (hi[1] - lo[1]), name=name)


@dataclass
class PlanarScene:
    planes: list
    points: np.ndarray  # (M, 3)
    point_planes: np.ndarray  # (M,) index into planes
    lines: np.ndarray  # (L, 2, 3)
    point_descriptors: np.ndarray  # (M, 32) uint8
    line_descriptors: np.ndarray  # (L, 32) uint8
    distractors: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return dict(
            schema="structvo-scene/1",
            planes=[p.to_dict() for p in self.planes],
            distractors=[p.to_dict() for p in self.distractors],
            points=self.points.tolist(),
            point_planes=self.point_planes.tolist(),
            lines=self.lines.tolist(),
            point_descriptors=[d.tobytes().hex() for d in self.point_descriptors],
            line_descriptors=[d.tobytes().hex() for d in self.line_descriptors],
        )

    @classmethod
    def from_dict(cls, d) -> "PlanarScene":
        def desc(lst):
            return np.array([np.frombuffer(bytes.fromhex(h), dtype=np.uint8) for h in lst],
                            dtype=np.uint8).reshape(-1, DESCRIPTOR_BYTES)

        return cls(
            [Rect.from_dict(p) for p in d["planes"]],
            np.array(d["points"], dtype=float).reshape(-1, 3),
            np.array(d["point_planes"], dtype=np.int64),
            np.array(d["lines"], dtype=float).reshape(-1, 2, 3),
            desc(d["point_descriptors"]),
            desc(d["line_descriptors"]),
            [Rect.from_dict(p) for p in d.get("distractors", [])],
        )


def _rng(seed, stream, *ids) -> np.random.Generator:
    return np.random.default_rng([int(seed), stream, *[int(i) for i in ids]])


def build_scene(planes, seed: int, points_per_m2: float = 0.0, textured=None, texture_lines=(),
                border_lines: bool = True, distractors=(), margin: float = 0.05) -> PlanarScene:
    """Scatter landmarks on ``planes`` and attach random 256-bit descriptors.

    ``textured`` selects plane indices that receive points (all by default).
    ``texture_lines`` is a sequence of extra ``(start, end)`` segments.
    """
    rng = _rng(seed, 1)
    textured = range(len(planes)) if textured is None else textured
    pts, owners = [], []
    for i in textured:
        p = planes[i]
        area = 4 * p.half_u * p.half_v
        n = int(rng.poisson(points_per_m2 * area)) if points_per_m2 > 0 else 0
        a = rng.uniform(-p.half_u + margin, p.half_u - margin, n)
        b = rng.uniform(-p.half_v + margin, p.half_v - margin, n)
        pts.append(np.asarray(p.center) + a[:, None] * np.asarray(p.u) + b[:, None] * np.asarray(p.v))
        owners.append(np.full(n, i))
    points = np.concatenate(pts) if pts else np.zeros((0, 3))
    owners = np.concatenate(owners).astype(np.int64) if owners else np.zeros(0, dtype=np.int64)

    segs = []
    seen = set()
    if border_lines:
        for p in planes:
            c, u, v = np.asarray(p.center), np.asarray(p.u), np.asarray(p.v)
            corners = [c + su * p.half_u * u + sv * p.half_v * v for su, sv in ((-1, -1), (1, -1), (1, 1), (-1, 1))]
            for k in range(4):
                s, e = corners[k], corners[(k + 1) % 4]
                key = tuple(sorted((tuple(np.round(s, 6)), tuple(np.round(e, 6)))))
                if key not in seen:
                    seen.add(key)
                    segs.append((s, e))
    segs.extend((np.asarray(s, dtype=float), np.asarray(e, dtype=float)) for s, e in texture_lines)
    lines = np.array(segs, dtype=float).reshape(-1, 2, 3)
    pdesc = rng.integers(0, 256, (len(points), DESCRIPTOR_BYTES), dtype=np.uint8)
    ldesc = rng.integers(0, 256, (len(lines), DESCRIPTOR_BYTES), dtype=np.uint8)
    return PlanarScene(list(planes), points, owners, lines, pdesc, ldesc, list(distractors))


# ---------------------------------------------------------------- ray casting


def _rect_arrays(rects):
    C = np.array([r.center for r in rects], dtype=float).reshape(-1, 3)
    U = np.array([r.u for r in rects], dtype=float).reshape(-1, 3)
    V = np.array([r.v for r in rects], dtype=float).reshape(-1, 3)
    N = np.cross(U, V)
    N /= np.linalg.norm(N, axis=1, keepdims=True)
    H = np.array([[r.half_u, r.half_v] for r in rects], dtype=float).reshape(-1, 2)
    return C, U, V, N, H


def cast(rects, origin, dirs, eps: float = 1e-12):
    """Nearest hit of rays ``origin + s * dirs`` (``s > eps``) with rectangles.

    Returns ``(s, index)``; misses have ``s = inf`` and index ``-1``.
    """
    dirs = np.asarray(dirs, dtype=float)
    best = np.full(len(dirs), np.inf)
    idx = np.full(len(dirs), -1, dtype=np.int64)
    if not rects:
        return best, idx
    C, U, V, N, Hh = _rect_arrays(rects)
    for k in range(len(C)):
        den = dirs @ N[k]
        with np.errstate(divide="ignore", invalid="ignore"):
            s = ((C[k] - origin) @ N[k]) / den
        s = np.where(np.abs(den) > 1e-15, s, -1.0)
        X = origin + s[:, None] * dirs - C[k]
        hit = (s > eps) & (np.abs(X @ U[k]) <= Hh[k, 0]) & (np.abs(X @ V[k]) <= Hh[k, 1])
        better = hit & (s < best)
        best[better] = s[better]
        idx[better] = k
    return best, idx


def pixel_rays(K: CameraIntrinsics) -> np.ndarray:
    v, u = np.mgrid[0 : K.height, 0 : K.width].astype(float)
    return np.stack([(u - K.cx) / K.fx, (v - K.cy) / K.fy, np.ones_like(u)], axis=-1)


def _render(scene: PlanarScene, pose_wc: Pose, K: CameraIntrinsics, frame_id=None):
    """Depth, camera-frame normal and planar flag per pixel (flattened)."""
    rays_c = pixel_rays(K).reshape(-1, 3)
    R_wc, C = pose_wc.R, pose_wc.t
    rays_w = rays_c @ R_wc.T
    s, idx = cast(scene.planes, C, rays_w)
    normals_w = np.zeros((len(rays_c), 3))
    if scene.planes:
        N = _rect_arrays(scene.planes)[3]
        hit = idx >= 0
        normals_w[hit] = N[idx[hit]]
    normals_c = normals_w @ R_wc  # R_cw n_w
    planar = idx >= 0

    active = [d for d in scene.distractors if d.active(frame_id)]
    for frame in ("world", "camera"):
        group = [d for d in active if d.frame == frame]
        if not group:
            continue
        if frame == "world":
            sd, di = cast(group, C, rays_w)
        else:
            sd, di = cast(group, np.zeros(3), rays_c)
        closer = sd < s
        Nd = _rect_arrays(group)[3]
        nd = Nd[di[closer]]
        normals_c[closer] = nd @ R_wc if frame == "world" else nd
        planar[closer] = np.array([group[i].planar for i in di[closer]], dtype=bool)
        s = np.where(closer, sd, s)
    valid = np.isfinite(s)
    flip = np.einsum("ij,ij->i", normals_c, rays_c) > 0
    normals_c[flip] *= -1.0
    return s, normals_c, planar & valid, valid


def render_normals(scene: PlanarScene, pose_wc: Pose, K: CameraIntrinsics, frame_id=None,
                   angular_sigma: float = 0.0, outlier_fraction: float = 0.0, seed: int = 0) -> NormalMap:
    """Ray-cast normal map for a camera with world-from-camera pose ``pose_wc``.

    Noise: each valid normal is rotated by an angle drawn from
    ``N(0, angular_sigma)`` about a random perpendicular axis; a fraction of
    pixels is then replaced by uniformly random camera-facing directions.
    """
    s, n, planar, valid = _render(scene, pose_wc, K, frame_id)
    if angular_sigma > 0 or outlier_fraction > 0:
        rng = _rng(seed, _NORMAL_STREAM, *(() if frame_id is None else (frame_id,)))
        n = add_normal_noise(n, valid, angular_sigma, outlier_fraction, rng, pixel_rays(K).reshape(-1, 3))
    return NormalMap(n.reshape(K.height, K.width, 3), planar.reshape(K.height, K.width),
                     valid.reshape(K.height, K.width))


def add_normal_noise(n, valid, sigma, outlier_fraction, rng, rays=None):
    n = n.copy()
    m = int(valid.sum())
    idx = np.flatnonzero(valid)
    if sigma > 0 and m:
        v = n[idx]
        r = rng.normal(size=(m, 3))
        axis = np.cross(v, r)
        axis /= np.linalg.norm(axis, axis=1, keepdims=True)
        ang = rng.normal(0.0, sigma, m)
        n[idx] = Rotation.from_rotvec(axis * ang[:, None]).apply(v)
    if outlier_fraction > 0 and m:
        pick = idx[rng.random(m) < outlier_fraction]
        w = rng.normal(size=(len(pick), 3))
        w /= np.linalg.norm(w, axis=1, keepdims=True)
        if rays is not None:
            flip = np.einsum("ij,ij->i", w, rays[pick]) > 0
            w[flip] *= -1
        n[pick] = w
    n[idx] /= np.linalg.norm(n[idx], axis=1, keepdims=True)
    return n


def render_depth(scene: PlanarScene, pose_wc: Pose, K: CameraIntrinsics, frame_id=None) -> DepthMap:
    """Analytic z-depth (metres, 0 where nothing is hit)."""
    s, _, _, valid = _render(scene, pose_wc, K, frame_id)
    return DepthMap(np.where(valid, s, 0.0).reshape(K.height, K.width))


# ---------------------------------------------------------------- features


@dataclass(frozen=True)
class NoiseSpec:
    pixel_sigma: float = 0.0
    normal_sigma: float = 0.0  # radians
    normal_outliers: float = 0.0
    descriptor_flip: float = 0.0  # per-bit flip probability


@dataclass
class Correspondences:
    """Ground-truth landmark id per emitted feature."""

    points: np.ndarray
    lines: np.ndarray
    point_pixels_clean: np.ndarray
    line_endpoints_clean: np.ndarray


def _corrupt(desc, p, rng):
    if p <= 0 or len(desc) == 0:
        return desc.copy()
    bits = np.unpackbits(desc, axis=1)
    flip = rng.random(bits.shape) < p
    return np.packbits(bits ^ flip, axis=1)


def _visible(scene, pose_wc, K, Xw, tol=1e-6):
    """In front, inside the image and not occluded by a structural plane."""
    R_cw = pose_wc.R.T
    C = pose_wc.t
    Pc = (Xw - C) @ R_cw.T
    front = Pc[:, 2] > NEAR
    z = np.where(front, Pc[:, 2], 1.0)
    uv = np.stack([K.fx * Pc[:, 0] / z + K.cx, K.fy * Pc[:, 1] / z + K.cy], axis=1)
    ok = front & K.contains(uv)
    if ok.any():
        d = Xw[ok] - C
        s, _ = cast(scene.planes, C, d)
        ok[np.flatnonzero(ok)] = s >= 1.0 - tol
    return ok, uv


def _frustum_interval(A, B, K):
    """Parameter interval ``[lo, hi]`` of segments ``A + t (B - A)`` (camera frame)
    that projects inside the image and lies beyond the near plane (Liang-Barsky)."""

    def half_spaces(P):
        x, y, z = P[:, 0], P[:, 1], P[:, 2]
        return np.stack([K.fx * x + K.cx * z, (K.width - 1 - K.cx) * z - K.fx * x,
                         K.fy * y + K.cy * z, (K.height - 1 - K.cy) * z - K.fy * y, z - NEAR], axis=1)

    fa, fb = half_spaces(A), half_spaces(B)
    d = fb - fa
    lo = np.zeros(len(A))
    hi = np.ones(len(A))
    with np.errstate(divide="ignore", invalid="ignore"):
        t = -fa / d
    lo = np.maximum(lo, np.where(d > 0, t, -np.inf).max(axis=1))
    hi = np.minimum(hi, np.where(d < 0, t, np.inf).min(axis=1))
    outside = np.any((d == 0) & (fa < 0), axis=1)
    return lo, hi, (lo < hi) & ~outside


def _clip_lines(scene, pose_wc, K, samples=33, iters=52):
    """Longest visible sub-segment of every scene line.

    Image borders are handled exactly; occlusion boundaries (if any) are
    located by bisection.
    """
    L = scene.lines
    if len(L) == 0:
        return np.zeros(0, dtype=np.int64), np.zeros((0, 2)), np.zeros((0, 2))
    R_cw, C = pose_wc.R.T, pose_wc.t
    Lc = (L - C) @ R_cw.T
    lo, hi, ok = _frustum_interval(Lc[:, 0], Lc[:, 1], K)
    ids = np.flatnonzero(ok)
    lo, hi = lo[ids], hi[ids]
    D = L[ids, 1] - L[ids, 0]

    def unoccluded(tt):
        X = L[ids, 0][:, None, :] + tt[..., None] * D[:, None, :]
        s, _ = cast(scene.planes, C, (X - C).reshape(-1, 3))
        return (s >= 1.0 - 1e-6).reshape(tt.shape)

    frac = np.linspace(0.0, 1.0, samples)
    ts = lo[:, None] + frac[None, :] * (hi - lo)[:, None]
    vis = unoccluded(ts)
    keep = vis.any(axis=1)
    t0, t1 = lo.copy(), hi.copy()
    for k in np.flatnonzero(keep & ~vis.all(axis=1)):
        v = vis[k]
        best, cur, start, bstart = 0, 0, 0, 0
        for i, f in enumerate(v):
            cur = cur + 1 if f else 0
            if cur == 1:
                start = i
            if cur > best:
                best, bstart = cur, start
        a, b = bstart, bstart + best - 1
        for end, inside, outside in ((0, a, a - 1), (1, b, b + 1)):
            if outside < 0 or outside >= samples:
                continue
            tin, tout = ts[k, inside], ts[k, outside]
            for _ in range(iters):
                mid = 0.5 * (tin + tout)
                X = L[ids[k], 0] + mid * D[k]
                s, _ = cast(scene.planes, C, (X - C)[None])
                if s[0] >= 1.0 - 1e-6:
                    tin = mid
                else:
                    tout = mid
            if end == 0:
                t0[k] = tin
            else:
                t1[k] = tin
    ids, t0, t1, D = ids[keep], t0[keep], t1[keep], D[keep]
    Ps = L[ids, 0] + t0[:, None] * D
    Pe = L[ids, 0] + t1[:, None] * D

    def proj(X):
        P = (X - C) @ R_cw.T
        return np.stack([K.fx * P[:, 0] / P[:, 2] + K.cx, K.fy * P[:, 1] / P[:, 2] + K.cy], axis=1)

    return ids, proj(Ps), proj(Pe)


def observe_features(scene: PlanarScene, pose_wc: Pose, K: CameraIntrinsics, noise: NoiseSpec = NoiseSpec(),
                     frame_id: int = 0, timestamp: float = 0.0, seed: int = 0,
                     include_points: bool = True, include_lines: bool = True):
    """Project visible landmarks; returns ``(FrameObservations, Correspondences)``.

    Landmark hints in the returned observations are left empty; the
    ground-truth association lives in the correspondence table.
    """
    rng = _rng(seed, _FEATURE_STREAM, frame_id)
    if include_points and len(scene.points):
        ok, uv = _visible(scene, pose_wc, K, scene.points)
        pid = np.flatnonzero(ok)
        clean = uv[pid]
    else:
        pid, clean = np.zeros(0, dtype=np.int64), np.zeros((0, 2))
    noisy = clean + rng.normal(0.0, noise.pixel_sigma, clean.shape) if noise.pixel_sigma > 0 else clean.copy()
    noisy = _clamp(noisy, K)
    pdesc = _corrupt(scene.point_descriptors[pid], noise.descriptor_flip, rng)

    if include_lines:
        lid, uvs, uve = _clip_lines(scene, pose_wc, K)
    else:
        lid, uvs, uve = np.zeros(0, dtype=np.int64), np.zeros((0, 2)), np.zeros((0, 2))
    ends = np.stack([uvs, uve], axis=1).reshape(-1, 2, 2)
    keep = np.linalg.norm(ends[:, 0] - ends[:, 1], axis=1) >= MIN_LINE_LENGTH + 1.0
    lid, ends = lid[keep], ends[keep]
    lclean = ends.copy()
    if noise.pixel_sigma > 0:
        ends = ends + rng.normal(0.0, noise.pixel_sigma, ends.shape)
    ends = _clamp(ends.reshape(-1, 2), K).reshape(-1, 2, 2)
    ok = np.linalg.norm(ends[:, 0] - ends[:, 1], axis=1) >= MIN_LINE_LENGTH
    lid, ends, lclean = lid[ok], ends[ok], lclean[ok]
    ldesc = _corrupt(scene.line_descriptors[lid], noise.descriptor_flip, rng)

    obs = FrameObservations(frame_id, timestamp, noisy, pdesc, ends, ldesc)
    return obs, Correspondences(pid, lid, clean, lclean)


def _clamp(uv, K):
    uv = np.array(uv, dtype=float)
    uv[:, 0] = np.clip(uv[:, 0], 0.0, K.width - 1)
    uv[:, 1] = np.clip(uv[:, 1], 0.0, K.height - 1)
    return uv


# ---------------------------------------------------------------- trajectories


def look_rotation(yaw: float = 0.0, pitch: float = 0.0, roll: float = 0.0) -> np.ndarray:
    """World-from-camera rotation for a camera yawed about world ``y`` (down), then pitched and rolled.

    With all angles zero the camera looks along world ``+z`` with ``x`` right and ``y`` down.
    Positive pitch tilts the view towards the floor (``+y``).
    """
    return Rotation.from_euler("YXZ", [yaw, -pitch, roll]).as_matrix()


@dataclass(frozen=True)
class TrajectorySpec:
    """Keyframed camera path; waypoints are ``(position, (yaw, pitch, roll))`` in radians."""

    waypoints: tuple
    n_frames: int
    fps: float = 30.0
    noise: NoiseSpec = NoiseSpec()
    seed: int = 0

    def poses(self) -> list:
        """World-from-camera poses, evenly spaced in time through the waypoints."""
        pos = np.array([w[0] for w in self.waypoints], dtype=float)
        rots = Rotation.from_matrix([look_rotation(*w[1]) for w in self.waypoints])
        knots = np.linspace(0.0, 1.0, len(self.waypoints))
        s = np.linspace(0.0, 1.0, self.n_frames)
        if len(self.waypoints) == 1:
            P = np.repeat(pos, self.n_frames, axis=0)
            Rs = np.repeat(rots.as_matrix()[None], self.n_frames, axis=0).reshape(-1, 3, 3)
        else:
            P = CubicSpline(knots, pos, bc_type="natural")(s) if len(pos) > 2 else (
                pos[0] + s[:, None] * (pos[1] - pos[0]))
            Rs = Slerp(knots, rots)(s).as_matrix()
        return [Pose.from_rt(Rs[i], P[i], "cam", "world", self.timestamp(i)) for i in range(self.n_frames)]

    def timestamp(self, i: int) -> float:
        return round(i / self.fps, 6)
