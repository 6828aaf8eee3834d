"""Point/line features, landmarks, the keyframe map, matching and two-view triangulation.

Feature extraction from images is not part of this package. Observations
come from the simulator or from feature files with the grammar::

    FEAT 1 <frame_id> <timestamp>
    P <u> <v> <hex-descriptor> [landmark]
    L <u1> <v1> <u2> <v2> <hex-descriptor> [landmark]

Descriptors are opaque 256-bit strings (64 hex digits) compared by Hamming
distance. Lines starting with ``#`` are comments.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .exceptions import CorruptInput, DegeneratePlane, LowParallax, NegativeDepth
from .geometry import CameraIntrinsics, Pose, normalize_pixel

DESCRIPTOR_BYTES = 32
MIN_LINE_LENGTH = 10.0
FEATURE_FILE_VERSION = 1
MIN_PARALLAX = np.deg2rad(0.5)
MIN_BASELINE = 1e-6



@dataclass(frozen=True)
class PointFeature:
    pixel: np.ndarray
    descriptor: bytes
    landmark_id: Optional[int] = None


@dataclass(frozen=True)
class LineFeature:
    p_start: np.ndarray
    p_end: np.ndarray
    descriptor: bytes
    landmark_id: Optional[int] = None

    def __post_init__(self):
        if np.linalg.norm(np.subtract(self.p_start, self.p_end)) < MIN_LINE_LENGTH:
            raise ValueError(f"line segments must be at least {MIN_LINE_LENGTH} px long")


def _descriptor_array(descs, n) -> np.ndarray:
    if descs is None or len(descs) == 0:
        return np.zeros((n, DESCRIPTOR_BYTES), dtype=np.uint8)
    a = np.asarray(descs, dtype=np.uint8).reshape(n, DESCRIPTOR_BYTES)
    return a


def _landmark_array(ids, n) -> np.ndarray:
    if ids is None:
        return np.full(n, -1, dtype=np.int64)
    return np.asarray(ids, dtype=np.int64).reshape(n)


class FrameObservations:
    """Features of one frame stored column-wise.

    Missing landmark hints are encoded as ``-1``.
    """

    def __init__(
        self,
        frame_id: int,
        timestamp: float,
        point_pixels=None,
        point_descriptors=None,
        line_endpoints=None,
        line_descriptors=None,
        point_landmarks=None,
        line_landmarks=None,
        normal_map=None,
    ):
        self.frame_id = int(frame_id)
        self.timestamp = float(timestamp)
        pp = np.zeros((0, 2)) if point_pixels is None else np.asarray(point_pixels, dtype=float).reshape(-1, 2)
        le = np.zeros((0, 2, 2)) if line_endpoints is None else np.asarray(line_endpoints, dtype=float).reshape(-1, 2, 2)
        self.point_pixels = pp
        self.point_descriptors = _descriptor_array(point_descriptors, len(pp))
        self.point_landmarks = _landmark_array(point_landmarks, len(pp))
        self.line_endpoints = le
        self.line_descriptors = _descriptor_array(line_descriptors, len(le))
        self.line_landmarks = _landmark_array(line_landmarks, len(le))
        self.normal_map = normal_map
        for a in (self.point_pixels, self.point_descriptors, self.point_landmarks,
                  self.line_endpoints, self.line_descriptors, self.line_landmarks):
            a.setflags(write=False)

    @property
    def n_points(self) -> int:
        return len(self.point_pixels)

    @property
    def n_lines(self) -> int:
        return len(self.line_endpoints)

    @cached_property
    def line_midpoints(self) -> np.ndarray:
        return self.line_endpoints.mean(axis=1)

    @property
    def points(self) -> list:
        return [
            PointFeature(p, d.tobytes(), None if lm < 0 else int(lm))
            for p, d, lm in zip(self.point_pixels, self.point_descriptors, self.point_landmarks)
        ]

    @property
    def lines(self) -> list:
        return [
            LineFeature(e[0], e[1], d.tobytes(), None if lm < 0 else int(lm))
            for e, d, lm in zip(self.line_endpoints, self.line_descriptors, self.line_landmarks)
        ]

    def without_lines(self) -> "FrameObservations":
        return FrameObservations(
            self.frame_id, self.timestamp, self.point_pixels, self.point_descriptors,
            None, None, self.point_landmarks, None, self.normal_map,
        )

    def same_features(self, other: "FrameObservations") -> bool:
        return (
            self.frame_id == other.frame_id
            and self.timestamp == other.timestamp
            and np.array_equal(self.point_pixels, other.point_pixels)
            and np.array_equal(self.point_descriptors, other.point_descriptors)
            and np.array_equal(self.point_landmarks, other.point_landmarks)
            and np.array_equal(self.line_endpoints, other.line_endpoints)
            and np.array_equal(self.line_descriptors, other.line_descriptors)
            and np.array_equal(self.line_landmarks, other.line_landmarks)
        )


# ---------------------------------------------------------------- feature files


def _fmt(x: float) -> str:
    return repr(float(x))


def format_features(obs: FrameObservations, include_landmarks: bool = True) -> str:
    lines = [f"FEAT {FEATURE_FILE_VERSION} {obs.frame_id} {_fmt(obs.timestamp)}"]
    for p, d, lm in zip(obs.point_pixels, obs.point_descriptors, obs.point_landmarks):
        rec = f"P {_fmt(p[0])} {_fmt(p[1])} {d.tobytes().hex()}"
        if include_landmarks and lm >= 0:
            rec += f" {lm}"
        lines.append(rec)
    for e, d, lm in zip(obs.line_endpoints, obs.line_descriptors, obs.line_landmarks):
        rec = f"L {_fmt(e[0, 0])} {_fmt(e[0, 1])} {_fmt(e[1, 0])} {_fmt(e[1, 1])} {d.tobytes().hex()}"
        if include_landmarks and lm >= 0:
            rec += f" {lm}"
        lines.append(rec)
    return "\n".join(lines) + "\n"


def write_features(path: Union[str, Path], obs: FrameObservations, include_landmarks: bool = True) -> None:
    Path(path).write_text(format_features(obs, include_landmarks))


def parse_features(text: str, source: str = "<string>") -> FrameObservations:
    rows = [r for r in text.splitlines() if r.strip() and not r.lstrip().startswith("#")]
    if not rows:
        raise CorruptInput(f"{source}: empty feature file")
    head = rows[0].split()
    if len(head) != 4 or head[0] != "FEAT":
        raise CorruptInput(f"{source}: bad header {rows[0]!r}")
    if int(head[1]) != FEATURE_FILE_VERSION:
        raise CorruptInput(f"{source}: unsupported feature file version {head[1]}")
    frame_id, timestamp = int(head[2]), float(head[3])
    pts, pdesc, plm, lns, ldesc, llm = [], [], [], [], [], []
    for lineno, row in enumerate(rows[1:], start=2):
        tok = row.split()
        try:
            if tok[0] == "P" and len(tok) in (4, 5):
                pts.append((float(tok[1]), float(tok[2])))
                pdesc.append(_parse_desc(tok[3]))
                plm.append(int(tok[4]) if len(tok) == 5 else -1)
            elif tok[0] == "L" and len(tok) in (6, 7):
                lns.append(((float(tok[1]), float(tok[2])), (float(tok[3]), float(tok[4]))))
                ldesc.append(_parse_desc(tok[5]))
                llm.append(int(tok[6]) if len(tok) == 7 else -1)
            else:
                raise ValueError("unknown record")
        except ValueError as exc:
            raise CorruptInput(f"{source}:{lineno}: {exc}: {row!r}") from exc
    return FrameObservations(
        frame_id, timestamp,
        np.array(pts).reshape(-1, 2), np.array(pdesc, dtype=np.uint8).reshape(-1, DESCRIPTOR_BYTES),
        np.array(lns).reshape(-1, 2, 2), np.array(ldesc, dtype=np.uint8).reshape(-1, DESCRIPTOR_BYTES),
        plm, llm,
    )


def _parse_desc(tok: str) -> np.ndarray:
    b = bytes.fromhex(tok)
    if len(b) != DESCRIPTOR_BYTES:
        raise ValueError(f"descriptor must be {DESCRIPTOR_BYTES} bytes")
    return np.frombuffer(b, dtype=np.uint8)


def read_features(path: Union[str, Path]) -> FrameObservations:
    path = Path(path)
    return parse_features(path.read_text(), str(path))


# ---------------------------------------------------------------- matching


def hamming_matrix(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    A = np.asarray(A, dtype=np.uint8).reshape(-1, DESCRIPTOR_BYTES)
    B = np.asarray(B, dtype=np.uint8).reshape(-1, DESCRIPTOR_BYTES)
    if len(A) == 0 or len(B) == 0:
        return np.zeros((len(A), len(B)), dtype=np.int64)
    # 256-bit descriptors as four 64-bit words
    a = np.ascontiguousarray(A).view(np.uint64)
    b = np.ascontiguousarray(B).view(np.uint64)
    return np.bitwise_count(a[:, None, :] ^ b[None, :, :]).sum(axis=-1, dtype=np.int64)


def hamming_pairs(A: np.ndarray, B: np.ndarray, i, j) -> np.ndarray:
    """Hamming distances of the descriptor pairs ``(A[i], B[j])``."""
    a = np.ascontiguousarray(np.asarray(A, dtype=np.uint8).reshape(-1, DESCRIPTOR_BYTES)).view(np.uint64)
    b = np.ascontiguousarray(np.asarray(B, dtype=np.uint8).reshape(-1, DESCRIPTOR_BYTES)).view(np.uint64)
    return np.bitwise_count(a[i] ^ b[j]).sum(axis=-1, dtype=np.int64)


def sparse_hamming_matrix(A: np.ndarray, B: np.ndarray, allowed: np.ndarray) -> np.ndarray:
    """Dense distance matrix with only the ``allowed`` entries computed; the rest are far."""
    D = np.full(allowed.shape, _FAR, dtype=np.int64)
    i, j = np.nonzero(allowed)
    if len(i):
        D[i, j] = hamming_pairs(A, B, i, j)
    return D


_FAR = np.iinfo(np.int64).max // 4


def mutual_best_matches(dist: np.ndarray, allowed: np.ndarray, max_hamming: int, ratio: float = 0.8) -> np.ndarray:
    """Pairs ``(i, j)`` that are each other's best candidate and pass the
    absolute and best/second-best ratio tests in both directions.

    The rule is symmetric, so transposing the inputs transposes the result.
    """
    na, nb = dist.shape
    if na == 0 or nb == 0:
        return np.zeros((0, 2), dtype=np.int64)
    D = np.where(allowed, dist, _FAR)

    def side(M):
        best = np.argmin(M, axis=1)
        bval = M[np.arange(len(M)), best]
        if M.shape[1] > 1:
            second = np.partition(M, 1, axis=1)[:, 1]
        else:
            second = np.full(len(M), _FAR)
        ok = (bval <= max_hamming) & ((second >= _FAR) | (bval < ratio * second))
        return best, ok

    ba, oka = side(D)
    bb, okb = side(D.T)
    i = np.flatnonzero(oka)
    j = ba[i]
    keep = okb[j] & (bb[j] == i)
    return np.stack([i[keep], j[keep]], axis=1).astype(np.int64)


@dataclass
class Matches:
    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))
    lines: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))

    def __len__(self):
        return len(self.points) + len(self.lines)


def match_features(
    a: FrameObservations,
    b: FrameObservations,
    radius: float = 30.0,
    max_hamming: int = 64,
    ratio: float = 0.8,
    line_radius: Optional[float] = None,
    predicted_points=None,
    predicted_lines=None,
) -> Matches:
    """Descriptor matching restricted to a search radius around each feature of ``a``.

    ``predicted_points`` / ``predicted_lines`` optionally replace ``a``'s pixel
    positions (point pixels / line midpoints) by motion-predicted ones.
    A radius of ``np.inf`` disables the spatial gate.
    """
    line_radius = 2.0 * radius if line_radius is None else line_radius
    pa = a.point_pixels if predicted_points is None else np.asarray(predicted_points, dtype=float)
    la = a.line_midpoints if predicted_lines is None else np.asarray(predicted_lines, dtype=float)
    out = Matches()
    if a.n_points and b.n_points:
        allowed = _within(pa, b.point_pixels, radius)
        out.points = mutual_best_matches(hamming_matrix(a.point_descriptors, b.point_descriptors), allowed, max_hamming, ratio)
    if a.n_lines and b.n_lines:
        allowed = _within(la, b.line_midpoints, line_radius)
        out.lines = mutual_best_matches(hamming_matrix(a.line_descriptors, b.line_descriptors), allowed, max_hamming, ratio)
    return out


def _within(pa, pb, radius) -> np.ndarray:
    if not np.isfinite(radius):
        return np.ones((len(pa), len(pb)), dtype=bool)
    d2 = ((pa[:, None, :] - pb[None, :, :]) ** 2).sum(-1)
    return d2 <= radius * radius


# ---------------------------------------------------------------- triangulation


def triangulate_points(x1, x2, pose1: Pose, pose2: Pose, min_parallax: float = MIN_PARALLAX):
    """Vectorized midpoint triangulation from normalized image coordinates.

    ``x1``, ``x2`` are ``(N, 3)`` rays ``(x, y, 1)`` in each camera; poses map
    world to camera. Returns ``(X, status)`` with status 0 ok, 1 low parallax,
    2 negative depth.
    """
    x1 = np.atleast_2d(x1)
    x2 = np.atleast_2d(x2)
    c1, c2 = pose1.center(), pose2.center()
    d1 = x1 @ pose1.R  # rows are R^T x
    d2 = x2 @ pose2.R
    w0 = c1 - c2
    a = np.einsum("ij,ij->i", d1, d1)
    b = np.einsum("ij,ij->i", d1, d2)
    c = np.einsum("ij,ij->i", d2, d2)
    d = d1 @ w0
    e = d2 @ w0
    den = a * c - b * b
    cosang = np.abs(b) / np.sqrt(a * c)
    status = np.zeros(len(x1), dtype=np.int64)
    status[cosang > np.cos(min_parallax)] = 1
    safe = np.where(den > 1e-300, den, 1.0)
    s = (b * e - c * d) / safe
    r = (a * e - b * d) / safe
    X = 0.5 * ((c1 + s[:, None] * d1) + (c2 + r[:, None] * d2))
    # depth along each camera's optical axis
    z1 = (X @ pose1.R.T + pose1.t)[:, 2]
    z2 = (X @ pose2.R.T + pose2.t)[:, 2]
    status[(status == 0) & ((s <= 0) | (r <= 0) | (z1 <= 0) | (z2 <= 0))] = 2
    return X, status


def triangulate_point(obs1, obs2, pose1: Pose, pose2: Pose, K: CameraIntrinsics,
                      min_parallax: float = MIN_PARALLAX) -> np.ndarray:
    """Midpoint of the common perpendicular of the two back-projected pixel rays."""
    if np.linalg.norm(pose1.center() - pose2.center()) <= MIN_BASELINE:
        raise LowParallax("camera centres coincide")
    X, status = triangulate_points(
        normalize_pixel(obs1, K)[None], normalize_pixel(obs2, K)[None], pose1, pose2, min_parallax
    )
    if status[0] == 1:
        raise LowParallax(f"rays are closer than {np.rad2deg(min_parallax):.2f} deg")
    if status[0] == 2:
        raise NegativeDepth("triangulated point lies behind a camera")
    return X[0]


def backprojected_plane(endpoints, pose: Pose, K: CameraIntrinsics):
    """World-frame unit normal of the plane through the camera centre and a 2D segment."""
    xs, xe = normalize_pixel(np.asarray(endpoints, dtype=float), K)
    n = pose.R.T @ np.cross(xs, xe)
    norm = np.linalg.norm(n)
    if norm < 1e-15:
        raise DegeneratePlane("segment endpoints coincide")
    return n / norm


def triangulate_line(l1, l2, pose1: Pose, pose2: Pose, K: CameraIntrinsics,
                     min_angle: float = MIN_PARALLAX):
    """Endpoints of ``l1`` intersected with the plane back-projected from ``l2``.

    ``l1``/``l2`` are :class:`LineFeature` objects or ``(2, 2)`` endpoint
    arrays. Returns ``(P_start, P_end)`` in world coordinates.
    """
    e1 = _endpoints(l1)
    e2 = _endpoints(l2)
    c1, c2 = pose1.center(), pose2.center()
    if np.linalg.norm(c1 - c2) <= MIN_BASELINE:
        raise LowParallax("camera centres coincide")
    n1 = backprojected_plane(e1, pose1, K)
    n2 = backprojected_plane(e2, pose2, K)
    if abs(n1 @ n2) > np.cos(min_angle):
        raise DegeneratePlane("back-projected planes are nearly parallel")
    rays = normalize_pixel(e1, K) @ pose1.R
    denom = rays @ n2
    # an endpoint ray grazing the other plane gives an ill-conditioned intersection
    if np.any(np.abs(denom) < np.sin(min_angle) * np.linalg.norm(rays, axis=1)):
        raise DegeneratePlane("endpoint ray is nearly parallel to the other back-projected plane")
    lam = (n2 @ (c2 - c1)) / denom
    X = c1 + lam[:, None] * rays
    z2 = (X @ pose2.R.T + pose2.t)[:, 2]
    if np.any(lam <= 0) or np.any(z2 <= 0):
        raise NegativeDepth("line endpoint behind a camera")
    return X[0], X[1]


def _endpoints(l) -> np.ndarray:
    if isinstance(l, LineFeature):
        return np.array([l.p_start, l.p_end], dtype=float)
    return np.asarray(l, dtype=float).reshape(2, 2)


# ---------------------------------------------------------------- map


@dataclass
class PointLandmark:
    position: np.ndarray
    observations: list = field(default_factory=list)  # (keyframe id, feature index)
    descriptor: Optional[np.ndarray] = None


@dataclass
class LineLandmark:
    start: np.ndarray
    end: np.ndarray
    observations: list = field(default_factory=list)
    descriptor: Optional[np.ndarray] = None

    def __post_init__(self):
        if np.linalg.norm(np.subtract(self.start, self.end)) <= 0:
            raise ValueError("line landmark endpoints coincide")

    @property
    def direction(self) -> np.ndarray:
        d = np.subtract(self.end, self.start)
        return d / np.linalg.norm(d)


@dataclass
class Keyframe:
    id: int
    pose: Pose  # world -> camera
    frame: FrameObservations
    point_assoc: np.ndarray  # landmark id per point feature, -1 if none
    line_assoc: np.ndarray
    n_tracked: int = 0


class KeyframeMap:
    """Keyframes, landmarks and covisibility; the tracker is the only writer."""

    def __init__(self):
        self.keyframes: dict[int, Keyframe] = {}
        self.points: dict[int, PointLandmark] = {}
        self.lines: dict[int, LineLandmark] = {}
        self.covisibility: Counter = Counter()
        self._next_id = 0

    def new_id(self) -> int:
        self._next_id += 1
        return self._next_id - 1

    @property
    def keyframe_ids(self) -> list:
        return sorted(self.keyframes)

    def last_keyframes(self, n: int) -> list:
        return [self.keyframes[i] for i in self.keyframe_ids[-n:]]

    def add_point(self, position, observations=(), descriptor=None) -> int:
        lid = self.new_id()
        self.points[lid] = PointLandmark(np.asarray(position, dtype=float), list(observations), descriptor)
        return lid

    def add_line(self, start, end, observations=(), descriptor=None) -> int:
        lid = self.new_id()
        self.lines[lid] = LineLandmark(np.asarray(start, dtype=float), np.asarray(end, dtype=float),
                                       list(observations), descriptor)
        return lid

    def point_array(self, ids) -> np.ndarray:
        return np.array([self.points[i].position for i in ids]).reshape(-1, 3)

    def line_array(self, ids) -> np.ndarray:
        return np.array([[self.lines[i].start, self.lines[i].end] for i in ids]).reshape(-1, 2, 3)

    def check_integrity(self) -> None:
        """Raise ``AssertionError`` if any reference dangles."""
        for kind, table, assoc_name, count in (
            ("point", self.points, "point_assoc", "n_points"),
            ("line", self.lines, "line_assoc", "n_lines"),
        ):
            for lid, lm in table.items():
                for kf_id, idx in lm.observations:
                    kf = self.keyframes.get(kf_id)
                    assert kf is not None, f"{kind} landmark {lid} references missing keyframe {kf_id}"
                    assert 0 <= idx < getattr(kf.frame, count), f"{kind} landmark {lid}: bad feature index"
                    assert getattr(kf, assoc_name)[idx] == lid, f"{kind} landmark {lid}: association mismatch"
            for kf in self.keyframes.values():
                for idx, lid in enumerate(getattr(kf, assoc_name)):
                    if lid >= 0:
                        assert lid in table, f"keyframe {kf.id} references missing {kind} landmark {lid}"
                        assert (kf.id, idx) in table[lid].observations


def should_insert_keyframe(n_tracked: int, ref_tracked: int, frames_since_last: int,
                           inlier_ratio: float = 0.5, max_gap: int = 20) -> bool:
    return n_tracked < inlier_ratio * ref_tracked or frames_since_last >= max_gap


def insert_keyframe(kmap: KeyframeMap, frame: FrameObservations, pose: Pose,
                    point_assoc=None, line_assoc=None) -> Keyframe:
    """Add a keyframe and register its landmark observations."""
    pa = np.full(frame.n_points, -1, dtype=np.int64) if point_assoc is None else np.array(point_assoc, dtype=np.int64)
    la = np.full(frame.n_lines, -1, dtype=np.int64) if line_assoc is None else np.array(line_assoc, dtype=np.int64)
    kf = Keyframe(frame.frame_id, pose, frame, pa, la)
    kmap.keyframes[kf.id] = kf
    seen = set()
    for assoc, table in ((pa, kmap.points), (la, kmap.lines)):
        for idx, lid in enumerate(assoc):
            if lid < 0:
                continue
            if lid not in table:
                assoc[idx] = -1
                continue
            table[lid].observations.append((kf.id, idx))
            seen.add(int(lid))
    for other in kmap.keyframes.values():
        if other.id == kf.id:
            continue
        shared = len(seen.intersection(other.point_assoc[other.point_assoc >= 0].tolist())) + len(
            seen.intersection(other.line_assoc[other.line_assoc >= 0].tolist())
        )
        if shared:
            kmap.covisibility[(other.id, kf.id)] = shared
    kf.n_tracked = len(seen)
    return kf


def add_observation(kmap: KeyframeMap, kf: Keyframe, kind: str, idx: int, lid: int) -> None:
    table, assoc = (kmap.points, kf.point_assoc) if kind == "point" else (kmap.lines, kf.line_assoc)
    assoc[idx] = lid
    table[lid].observations.append((kf.id, idx))


def cull_landmarks(kmap: KeyframeMap, recent: int = 3, min_observations: int = 2) -> int:
    """Remove landmarks with fewer than ``min_observations`` that none of the
    last ``recent`` keyframes observe. Returns the number removed."""
    recent_ids = set(kmap.keyframe_ids[-recent:])
    removed = 0
    for table, assoc_name in ((kmap.points, "point_assoc"), (kmap.lines, "line_assoc")):
        doomed = [
            lid for lid, lm in table.items()
            if len(lm.observations) < min_observations and not any(k in recent_ids for k, _ in lm.observations)
        ]
        for lid in doomed:
            for kf_id, idx in table[lid].observations:
                getattr(kmap.keyframes[kf_id], assoc_name)[idx] = -1
            del table[lid]
        removed += len(doomed)
    return removed
