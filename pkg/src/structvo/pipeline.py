"""Monocular visual odometry front end over feature frames and normal maps.

The world frame is the Manhattan frame found in the first usable frame, its
origin is that camera's centre and the initial baseline has unit length.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, replace
from typing import Callable, Optional

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .config import PipelineConfig
from .epipolar import initialize_map, solve_translation
from .evaluation import Trajectory
from .exceptions import (
    DegeneratePlane,
    DegenerateTranslation,
    Diverged,
    IllPosed,
    InitializationFailed,
    InsufficientSupport,
    LowParallax,
    NegativeDepth,
    NonPositiveDepth,
    TooFewCorrespondences,
    TrackingLost,
)
from .features import (
    FrameObservations,
    add_observation,
    backprojected_plane,
    cull_landmarks,
    hamming_matrix,
    insert_keyframe,
    match_features,
    mutual_best_matches,
    should_insert_keyframe,
    triangulate_line,
    triangulate_points,
)
from .geometry import CameraIntrinsics, Pose, normalize_pixel
from .manhattan import estimate_manhattan_rotation, initialize_from_identity
from .normals import NormalMap
from .tracker import (
    INITIALIZING,
    TrackedFrame,
    TrackerConfig,
    _search,
    build_problem,
    solve_translation_lm,
    track_frame,
)

log = logging.getLogger(__name__)

LOST = "lost"
BORDER_MARGIN = 2.0


@dataclass
class FrameRecord:
    frame_id: int
    timestamp: float
    mode: str
    point_inliers: int = 0
    line_inliers: int = 0
    keyframe: bool = False
    map_points: int = 0
    map_lines: int = 0
    time_ms: float = 0.0
    manhattan_failure: Optional[str] = None
    manhattan_ok: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class _Pending:
    frame: FrameObservations
    R: Optional[np.ndarray]  # Manhattan world-to-camera rotation, None if unavailable
    time_ms: float
    failure: Optional[str] = None


def _stride_for(nm: NormalMap, K: CameraIntrinsics, stride: int) -> int:
    # strides are given for full-resolution images
    return max(1, int(round(stride * nm.width / K.width)))


def _unclipped(endpoints, K: CameraIntrinsics) -> np.ndarray:
    """Per-endpoint flag: the endpoint is not on the image border."""
    return K.contains(endpoints, BORDER_MARGIN)


def _ray_angles(d1, d2) -> np.ndarray:
    """Angle between corresponding world-frame ray directions."""
    cos = np.einsum("ij,ij->i", d1, d2) / (np.linalg.norm(d1, axis=1) * np.linalg.norm(d2, axis=1))
    return np.arccos(np.clip(cos, -1.0, 1.0))


def _plane_angle(e1, e2, pose1, pose2, K) -> float:
    """Angle between the planes back-projected from two observations of a segment."""
    n1 = backprojected_plane(e1, pose1, K)
    n2 = backprojected_plane(e2, pose2, K)
    return float(np.arccos(np.clip(abs(n1 @ n2), 0.0, 1.0)))


def _reprojection(X, pose, pix, K) -> float:
    Pc = pose.R @ X + pose.t
    if Pc[2] <= 0:
        return np.inf
    return float(np.hypot(K.fx * Pc[0] / Pc[2] + K.cx - pix[0], K.fy * Pc[1] / Pc[2] + K.cy - pix[1]))


class StructureVO(BaseEstimator):
    """Decoupled rotation/translation visual odometry.

    ``fit(frames, normals)`` processes a whole sequence; ``partial_fit`` one
    frame at a time. ``normals`` is a callable ``frame_id -> NormalMap`` (for
    example a :class:`~structvo.normals.NormalProvider`), a sequence aligned
    with ``frames``, or ``None``. After fitting, ``trajectory_`` holds the
    world-from-camera trajectory and ``records_`` the per-frame log.
    """

    def __init__(self, intrinsics: Optional[CameraIntrinsics] = None, config: Optional[PipelineConfig] = None,
                 use_lines: bool = True):
        self.intrinsics = intrinsics
        self.config = config
        self.use_lines = use_lines

    # ------------------------------------------------------------ public API

    def fit(self, frames, normals=None, y=None):
        self._reset()
        get = self._normal_getter(normals)
        for i, frame in enumerate(frames):
            self.partial_fit(frame, get(i, frame))
            if self.lost_:
                break
        return self

    def partial_fit(self, frame: FrameObservations, normal_map: Optional[NormalMap] = None):
        if not hasattr(self, "_records"):
            self._reset()
        if self.lost_:
            raise TrackingLost("tracking was lost; call fit to restart")
        if not self.use_lines:
            frame = frame.without_lines()
        t_start = time.perf_counter()
        if self.kmap_ is None:
            self._initialize_step(frame, normal_map, t_start)
        else:
            self._track_step(frame, normal_map, t_start)
        return self

    def predict(self, X=None) -> Trajectory:
        check_is_fitted(self, "lost_")
        return self.trajectory_

    @property
    def trajectory_(self) -> Trajectory:
        ids = sorted(self._poses)
        return Trajectory.from_camera_poses([self._poses[i].timestamp for i in ids], [self._poses[i] for i in ids])

    @property
    def camera_poses_(self) -> list:
        return [self._poses[i] for i in sorted(self._poses)]

    @property
    def records_(self) -> list:
        return [self._records[i] for i in sorted(self._records)]

    def run_log(self, header: Optional[dict] = None) -> str:
        """JSON-lines log: a header object followed by one object per frame."""
        cfg = self._cfg
        head = dict(kind="header", config_hash=cfg.hash(), seed=cfg.io.seed, use_lines=self.use_lines,
                    initialized=self.kmap_ is not None, lost=self.lost_, lost_at=self.lost_at_)
        head.update(header or {})
        lines = [json.dumps(head, sort_keys=True)]
        lines += [json.dumps(dict(kind="frame", **r.to_dict()), sort_keys=True) for r in self.records_]
        return "\n".join(lines) + "\n"

    # ------------------------------------------------------------ internals

    @property
    def _cfg(self) -> PipelineConfig:
        return self.config or PipelineConfig()

    @property
    def _K(self) -> CameraIntrinsics:
        if self.intrinsics is None:
            raise ValueError("intrinsics must be set")
        return self.intrinsics

    def _tcfg(self) -> TrackerConfig:
        t = self._cfg.tracker.tracker()
        return replace(t, use_lines=t.use_lines and self.use_lines)

    def _mcfg(self, nm: NormalMap):
        m = self._cfg.manhattan
        return m.mean_shift(_stride_for(nm, self._K, m.stride))

    def _reset(self):
        self.kmap_ = None
        self._poses = {}
        self._records = {}
        self._pending = []
        self._history = []
        self._ref_index = None
        self._last_kf_frame = None
        self._angles = {}  # triangulation angle per landmark, keyed by (kind, id)
        self._consecutive_lost = 0
        self.lost_ = False
        self.lost_at_ = None
        self.n_lost_frames_ = 0

    @staticmethod
    def _normal_getter(normals) -> Callable:
        if normals is None:
            return lambda i, f: None
        if callable(normals):
            return lambda i, f: normals(f.frame_id)
        seq = list(normals)
        return lambda i, f: seq[i]

    def _record(self, frame, mode, start, **kw) -> FrameRecord:
        r = FrameRecord(frame.frame_id, frame.timestamp, mode, time_ms=(time.perf_counter() - start) * 1e3, **kw)
        if self.kmap_ is not None:
            r.map_points, r.map_lines = len(self.kmap_.points), len(self.kmap_.lines)
        self._records[frame.frame_id] = r
        return r

    # ---------------- initialization

    def _manhattan(self, nm, init_R):
        if nm is None:
            return None, "no normal map"
        try:
            if init_R is None:
                return initialize_from_identity(nm, self._mcfg(nm)).R, None
            return estimate_manhattan_rotation(nm, None, init_R, self._mcfg(nm)).R, None
        except InsufficientSupport as exc:
            return None, str(exc)

    def _initialize_step(self, frame, nm, start):
        ref = self._reference()
        prev_R = next((p.R for p in reversed(self._pending) if p.R is not None), None)
        R, failure = self._manhattan(nm, prev_R)
        self._pending.append(_Pending(frame, R, 0.0, failure))
        cur = self._pending[-1]
        if ref is not None and R is not None:
            if self._try_initialize(ref, cur):
                cur.time_ms = (time.perf_counter() - start) * 1e3
                self._finish_initialization(ref, cur)
                return
            waited = sum(1 for p in self._pending if p.frame.frame_id > ref.frame.frame_id)
            if waited >= self._cfg.init.max_wait_frames:
                self._ref_index = len(self._pending) - 1
        elif ref is None and R is not None:
            self._ref_index = len(self._pending) - 1
        cur.time_ms = (time.perf_counter() - start) * 1e3
        # provisional pose until initialization places the frame
        self._poses[frame.frame_id] = Pose.from_rt(R if R is not None else np.eye(3), np.zeros(3),
                                                   "world", "cam", frame.timestamp)
        self._record(frame, INITIALIZING, start, manhattan_failure=failure, manhattan_ok=R is not None)

    def _reference(self) -> Optional[_Pending]:
        idx = self._ref_index
        return None if idx is None or idx >= len(self._pending) else self._pending[idx]

    def _init_correspondences(self, f1, f2, matches):
        K = self._K
        p1 = f1.point_pixels[matches.points[:, 0]]
        p2 = f2.point_pixels[matches.points[:, 1]]
        if len(p1) < self._cfg.init.min_matches and len(matches.lines):
            # texture-poor frames: use segment endpoints that are not cut by the image border
            e1 = f1.line_endpoints[matches.lines[:, 0]]
            e2 = f2.line_endpoints[matches.lines[:, 1]]
            d_same = np.linalg.norm(e1 - e2, axis=2).sum(1)
            d_swap = np.linalg.norm(e1 - e2[:, ::-1], axis=2).sum(1)
            e2 = np.where((d_swap < d_same)[:, None, None], e2[:, ::-1], e2)
            ok = _unclipped(e1, K) & _unclipped(e2, K)
            p1 = np.vstack([p1, e1[ok]])
            p2 = np.vstack([p2, e2[ok]])
        return p1, p2

    def _try_initialize(self, ref: _Pending, cur: _Pending) -> bool:
        icfg, tcfg, K = self._cfg.init, self._tcfg(), self._K
        matches = match_features(ref.frame, cur.frame, radius=np.inf, max_hamming=tcfg.max_hamming, ratio=tcfg.ratio)
        p1, p2 = self._init_correspondences(ref.frame, cur.frame, matches)
        if len(p1) < icfg.min_matches:
            return False
        R12 = cur.R @ ref.R.T
        # rotation-compensated disparity
        x1 = normalize_pixel(p1, K) @ R12.T
        pred = np.stack([K.fx * x1[:, 0] / x1[:, 2] + K.cx, K.fy * x1[:, 1] / x1[:, 2] + K.cy], axis=1)
        if np.median(np.linalg.norm(pred - p2, axis=1)) < icfg.min_disparity_px:
            return False
        try:
            est = solve_translation(np.hstack([p1, p2]), R12, K, icfg.min_condition_ratio)
            kmap = initialize_map(ref.frame, cur.frame, R12, est.direction, K, matches, world_rotation=ref.R,
                                  min_landmarks=icfg.min_landmarks, max_reprojection=icfg.max_reprojection_px,
                                  use_lines=tcfg.use_lines)
        except (DegenerateTranslation, TooFewCorrespondences, InitializationFailed) as exc:
            log.debug("initialization attempt %s-%s failed: %s", ref.frame.frame_id, cur.frame.frame_id, exc)
            return False
        self.kmap_ = kmap
        return True

    def _finish_initialization(self, ref: _Pending, cur: _Pending):
        kmap = self.kmap_
        kf1, kf2 = kmap.keyframes[ref.frame.frame_id], kmap.keyframes[cur.frame.frame_id]
        c1, c2 = kf1.pose.center(), kf2.pose.center()
        t1, t2 = ref.frame.timestamp, cur.frame.timestamp
        pts, lns = sorted(kmap.points), sorted(kmap.lines)
        for p in self._pending:
            fid = p.frame.frame_id
            mode_kf = fid in (kf1.id, kf2.id)
            if fid == kf1.id:
                pose = kf1.pose
            elif fid == kf2.id:
                pose = kf2.pose
            elif fid < kf1.id:
                R = p.R if p.R is not None else kf1.pose.R
                pose = Pose.from_rt(R, -R @ c1, "world", "cam", p.frame.timestamp)
            else:
                a = (p.frame.timestamp - t1) / (t2 - t1) if t2 > t1 else 0.5
                R = p.R if p.R is not None else kf1.pose.R
                pose = self._backfill(p.frame, R, (1 - a) * c1 + a * c2, pts, lns)
            self._poses[fid] = pose
            rec = FrameRecord(fid, p.frame.timestamp, INITIALIZING, keyframe=mode_kf, time_ms=p.time_ms,
                              manhattan_failure=p.failure, manhattan_ok=p.R is not None,
                              map_points=len(kmap.points), map_lines=len(kmap.lines))
            self._records[fid] = rec
        self._history = [
            TrackedFrame(kf1.frame, kf1.pose, kf1.point_assoc.copy(), kf1.line_assoc.copy(), INITIALIZING),
            TrackedFrame(kf2.frame, kf2.pose, kf2.point_assoc.copy(), kf2.line_assoc.copy(), INITIALIZING),
        ]
        self._last_kf_frame = cur.frame.frame_id
        self._pending = []
        self._ref_index = None
        log.info("initialized on frames %d-%d with %d points, %d lines", kf1.id, kf2.id,
                 len(kmap.points), len(kmap.lines))

    def _backfill(self, frame, R, center, pts, lns) -> Pose:
        """Translation of an in-between frame from the fresh map, or the interpolated centre."""
        K, tcfg = self._K, self._tcfg()
        t0 = -R @ center
        try:
            assoc = _search(frame, self.kmap_, pts, lns, R, t0, K, tcfg.fallback_radius, tcfg)
            prob = build_problem(frame, self.kmap_, assoc, R, t0, K, tcfg)
            res = solve_translation_lm(prob, tcfg.lm_max_iters, inlier_factor=tcfg.inlier_factor)
            if res.n_inliers >= tcfg.min_inliers:
                t0 = res.t
        except (IllPosed, Diverged, NonPositiveDepth):
            pass
        return Pose.from_rt(R, t0, "world", "cam", frame.timestamp)

    # ---------------- tracking

    def _track_step(self, frame, nm, start):
        cfg = self._cfg.tracker
        K, tcfg = self._K, self._tcfg()
        mcfg = self._mcfg(nm) if nm is not None else self._cfg.manhattan.mean_shift()
        try:
            res = track_frame(frame, nm, self.kmap_, self._history, K, tcfg, mcfg)
        except TrackingLost as exc:
            self._consecutive_lost += 1
            self.n_lost_frames_ += 1
            last = self._history[-1].pose
            self._poses[frame.frame_id] = last.with_timestamp(frame.timestamp)
            self._record(frame, LOST, start, manhattan_failure=str(exc))
            if self._consecutive_lost >= cfg.max_consecutive_lost:
                self.lost_ = True
                self.lost_at_ = frame.frame_id
                log.warning("tracking lost at frame %d", frame.frame_id)
            return
        self._consecutive_lost = 0
        tracked = TrackedFrame(frame, res.pose, res.point_assoc, res.line_assoc, res.mode)
        self._history = (self._history + [tracked])[-max(tcfg.window, 2):]
        self._poses[frame.frame_id] = res.pose

        n_tracked = int((res.point_assoc >= 0).sum() + (res.line_assoc >= 0).sum())
        ref_kf = self.kmap_.keyframes[self.kmap_.keyframe_ids[-1]]
        since = frame.frame_id - self._last_kf_frame
        is_kf = should_insert_keyframe(n_tracked, ref_kf.n_tracked, since, cfg.keyframe_inlier_ratio,
                                       cfg.keyframe_max_gap)
        if is_kf:
            kf = insert_keyframe(self.kmap_, frame, res.pose, res.point_assoc, res.line_assoc)
            self._refine_landmarks(kf)
            self._triangulate(kf)
            cull_landmarks(self.kmap_, cfg.cull_recent_keyframes, cfg.cull_min_observations)
            kf.n_tracked = int((kf.point_assoc >= 0).sum() + (kf.line_assoc >= 0).sum())
            self._history[-1] = TrackedFrame(frame, res.pose, kf.point_assoc.copy(), kf.line_assoc.copy(), res.mode)
            self._last_kf_frame = frame.frame_id
        self._record(frame, res.mode, start, point_inliers=res.point_inliers, line_inliers=res.line_inliers,
                     keyframe=is_kf, manhattan_failure=res.manhattan_failure,
                     manhattan_ok=res.manhattan_rotation is not None)

    def _refine_landmarks(self, kf):
        """Re-triangulate landmarks seen by ``kf`` against their oldest keyframe when that widens the angle."""
        K, kmap = self._K, self.kmap_
        max_err = self._cfg.tracker.max_reprojection_px
        for j, lid in enumerate(kf.point_assoc):
            if lid < 0 or lid not in kmap.points:
                continue
            lm = kmap.points[lid]
            k0, i0 = min(lm.observations)
            if k0 == kf.id:
                continue
            old = kmap.keyframes[k0]
            pa, pb = old.frame.point_pixels[i0][None], kf.frame.point_pixels[j][None]
            xa, xb = normalize_pixel(pa, K), normalize_pixel(pb, K)
            g = _ray_angles(xa @ old.pose.R, xb @ kf.pose.R)[0]
            if g <= self._angles.get(("point", lid), 0.0):
                continue
            X, status = triangulate_points(xa, xb, old.pose, kf.pose)
            if status[0] != 0 or not all(
                    _reprojection(X[0], pose, pix[0], K) <= max_err for pose, pix in ((old.pose, pa), (kf.pose, pb))):
                continue
            lm.position = X[0]
            self._angles[("point", lid)] = g
        for j, lid in enumerate(kf.line_assoc):
            if lid < 0 or lid not in kmap.lines:
                continue
            lm = kmap.lines[lid]
            k0, i0 = min(lm.observations)
            if k0 == kf.id:
                continue
            old = kmap.keyframes[k0]
            ea, eb = old.frame.line_endpoints[i0], kf.frame.line_endpoints[j]
            try:
                g = _plane_angle(ea, eb, old.pose, kf.pose, K)
            except DegeneratePlane:
                continue
            if g <= self._angles.get(("line", lid), 0.0):
                continue
            try:
                Ps, Pe = triangulate_line(ea, eb, old.pose, kf.pose, K, min_angle=np.deg2rad(1.0))
            except (LowParallax, DegeneratePlane, NegativeDepth):
                continue
            lm.start, lm.end = Ps, Pe
            self._angles[("line", lid)] = g

    def _triangulate(self, kf):
        """New landmarks from unassociated features shared with recent keyframes."""
        cfg, K, kmap = self._cfg.tracker, self._K, self.kmap_
        tcfg = self._tcfg()
        others = [k for k in kmap.last_keyframes(cfg.triangulation_keyframes + 1) if k.id != kf.id]
        for old in others:  # oldest first: widest baseline
            baseline = np.linalg.norm(old.pose.center() - kf.pose.center())
            if baseline <= 1e-9:
                continue
            self._triangulate_points(old, kf, K, tcfg, cfg.max_reprojection_px)
            if tcfg.use_lines:
                self._triangulate_lines(old, kf, K, tcfg, cfg.max_reprojection_px, baseline)

    def _triangulate_points(self, old, kf, K, tcfg, max_err):
        ia = np.flatnonzero(old.point_assoc < 0)
        ib = np.flatnonzero(kf.point_assoc < 0)
        if len(ia) == 0 or len(ib) == 0:
            return
        dist = hamming_matrix(old.frame.point_descriptors[ia], kf.frame.point_descriptors[ib])
        m = mutual_best_matches(dist, np.ones(dist.shape, dtype=bool), tcfg.max_hamming, tcfg.ratio)
        if len(m) == 0:
            return
        a, b = ia[m[:, 0]], ib[m[:, 1]]
        pa, pb = old.frame.point_pixels[a], kf.frame.point_pixels[b]
        X, status = triangulate_points(normalize_pixel(pa, K), normalize_pixel(pb, K), old.pose, kf.pose)
        ok = status == 0
        for pose, pix in ((old.pose, pa), (kf.pose, pb)):
            Pc = X @ pose.R.T + pose.t
            z = np.where(Pc[:, 2] > 0, Pc[:, 2], 1.0)
            uv = np.stack([K.fx * Pc[:, 0] / z + K.cx, K.fy * Pc[:, 1] / z + K.cy], axis=1)
            ok &= (Pc[:, 2] > 0) & (np.linalg.norm(uv - pix, axis=1) <= max_err)
        ang = _ray_angles(normalize_pixel(pa, K) @ old.pose.R, normalize_pixel(pb, K) @ kf.pose.R)
        for i, j, P, g in zip(a[ok], b[ok], X[ok], ang[ok]):
            lid = self.kmap_.add_point(P, descriptor=kf.frame.point_descriptors[j].copy())
            self._angles[("point", lid)] = g
            add_observation(self.kmap_, old, "point", int(i), lid)
            add_observation(self.kmap_, kf, "point", int(j), lid)

    def _triangulate_lines(self, old, kf, K, tcfg, max_err, baseline):
        ia = np.flatnonzero(old.line_assoc < 0)
        ib = np.flatnonzero(kf.line_assoc < 0)
        if len(ia) == 0 or len(ib) == 0:
            return
        dist = hamming_matrix(old.frame.line_descriptors[ia], kf.frame.line_descriptors[ib])
        m = mutual_best_matches(dist, np.ones(dist.shape, dtype=bool), tcfg.max_hamming, tcfg.ratio)
        for i, j in zip(ia[m[:, 0]], ib[m[:, 1]]):
            try:
                Ps, Pe = triangulate_line(old.frame.line_endpoints[i], kf.frame.line_endpoints[j],
                                          old.pose, kf.pose, K, min_angle=np.deg2rad(1.0))
            except (LowParallax, DegeneratePlane, NegativeDepth):
                continue
            # far-away intersections of nearly coplanar planes are unreliable
            depth = max((np.array([Ps, Pe]) @ old.pose.R.T + old.pose.t)[:, 2].max(),
                        (np.array([Ps, Pe]) @ kf.pose.R.T + kf.pose.t)[:, 2].max())
            if depth > 100.0 * baseline or np.linalg.norm(Pe - Ps) < 1e-9:
                continue
            lid = self.kmap_.add_line(Ps, Pe, descriptor=kf.frame.line_descriptors[j].copy())
            self._angles[("line", lid)] = _plane_angle(old.frame.line_endpoints[i], kf.frame.line_endpoints[j],
                                                        old.pose, kf.pose, K)
            add_observation(self.kmap_, old, "line", int(i), lid)
            add_observation(self.kmap_, kf, "line", int(j), lid)
