"""Trajectory alignment and error metrics with TUM-format I/O.

Trajectories hold world-from-camera poses: ``positions[i]`` is the camera
centre in the world and ``quaternions[i]`` (x, y, z, w) its orientation.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union
from xml.sax.saxutils import escape

import numpy as np
from scipy.spatial.transform import Rotation
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .exceptions import CorruptInput, DatasetIOError, DegenerateConfiguration, NoOverlap
from .geometry import Pose
from .validation import check_paired_points

log = logging.getLogger(__name__)

QUAT_WARN = 1e-6
QUAT_REJECT = 1e-3
DEFAULT_MAX_DT = 0.02


@dataclass(frozen=True, eq=False)
class Trajectory:
    timestamps: np.ndarray
    positions: np.ndarray
    quaternions: np.ndarray  # (N, 4), x y z w

    def __post_init__(self):
        ts = np.asarray(self.timestamps, dtype=float).reshape(-1)
        p = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        q = np.asarray(self.quaternions, dtype=float).reshape(-1, 4)
        if not (len(ts) == len(p) == len(q)):
            raise ValueError("timestamps, positions and quaternions differ in length")
        if len(ts) > 1 and not np.all(np.diff(ts) > 0):
            raise ValueError("timestamps must be strictly increasing")
        for name, v in (("timestamps", ts), ("positions", p), ("quaternions", q)):
            v.setflags(write=False)
            object.__setattr__(self, name, v)

    def __len__(self) -> int:
        return len(self.timestamps)

    @classmethod
    def from_poses(cls, timestamps, poses) -> "Trajectory":
        """From world-from-camera :class:`Pose` objects or ``(R, t)`` pairs."""
        R = np.array([getattr(p, "R", None) if hasattr(p, "R") else p[0] for p in poses]).reshape(-1, 3, 3)
        t = np.array([getattr(p, "t", None) if hasattr(p, "t") else p[1] for p in poses]).reshape(-1, 3)
        q = Rotation.from_matrix(R).as_quat() if len(R) else np.zeros((0, 4))
        return cls(timestamps, t, q)

    @classmethod
    def from_camera_poses(cls, timestamps, poses) -> "Trajectory":
        """From camera-from-world poses ``x_cam = R x_world + t``."""
        return cls.from_poses(timestamps, [(p.R.T, p.center()) for p in poses])

    @property
    def rotations(self) -> np.ndarray:
        if len(self) == 0:
            return np.zeros((0, 3, 3))
        return Rotation.from_quat(self.quaternions).as_matrix()

    def poses(self) -> list:
        return [Pose.from_rt(R, t, "cam", "world", float(ts))
                for R, t, ts in zip(self.rotations, self.positions, self.timestamps)]

    def subset(self, idx) -> "Trajectory":
        idx = np.asarray(idx)
        return Trajectory(self.timestamps[idx], self.positions[idx], self.quaternions[idx])

    def transformed(self, s: float, R, t) -> "Trajectory":
        """Apply ``x -> s R x + t`` to the positions and ``R`` to the orientations."""
        R = np.asarray(R, dtype=float)
        p = s * self.positions @ R.T + np.asarray(t, dtype=float)
        q = (Rotation.from_matrix(R) * Rotation.from_quat(self.quaternions)).as_quat() if len(self) else self.quaternions
        return Trajectory(self.timestamps, p, q)

    def length(self) -> float:
        return float(np.linalg.norm(np.diff(self.positions, axis=0), axis=1).sum()) if len(self) > 1 else 0.0

    def equals(self, other: "Trajectory") -> bool:
        return all(np.array_equal(getattr(self, f), getattr(other, f))
                   for f in ("timestamps", "positions", "quaternions"))


# ---------------------------------------------------------------- TUM format


def format_tum(traj: Trajectory, header: Optional[str] = None) -> str:
    lines = [f"# {h}" for h in (header or "").splitlines()]
    lines.append("# timestamp tx ty tz qx qy qz qw")
    for ts, p, q in zip(traj.timestamps, traj.positions, traj.quaternions):
        lines.append(" ".join([f"{ts:.6f}"] + [f"{v:.9f}" for v in (*p, *q)]))
    return "\n".join(lines) + "\n"


def write_tum(path: Union[str, Path], traj: Trajectory, header: Optional[str] = None) -> None:
    try:
        Path(path).write_text(format_tum(traj, header))
    except OSError as e:
        raise DatasetIOError(f"cannot write {path}: {e}") from e


def parse_tum(text: str, source: str = "<string>") -> Trajectory:
    """Parse ``timestamp tx ty tz qx qy qz qw`` lines; ``#`` starts a comment."""
    rows = []
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.replace(",", " ").split()
        if len(tok) != 8:
            raise CorruptInput(f"{source}:{n}: expected 8 fields, got {len(tok)}")
        try:
            vals = [float(x) for x in tok]
        except ValueError as e:
            raise CorruptInput(f"{source}:{n}: {e}") from e
        if not all(math.isfinite(v) for v in vals):
            raise CorruptInput(f"{source}:{n}: non-finite value")
        q = np.array(vals[4:])
        dev = abs(np.linalg.norm(q) - 1.0)
        if dev > QUAT_REJECT:
            raise CorruptInput(f"{source}:{n}: quaternion norm off by {dev:.2g}")
        if dev > QUAT_WARN:
            log.warning("%s:%d: renormalizing quaternion (norm off by %.2g)", source, n, dev)
            vals[4:] = list(q / np.linalg.norm(q))
        rows.append(vals)
    a = np.array(rows, dtype=float).reshape(-1, 8)
    if len(a) > 1 and not np.all(np.diff(a[:, 0]) > 0):
        raise CorruptInput(f"{source}: timestamps are not strictly increasing")
    return Trajectory(a[:, 0], a[:, 1:4], a[:, 4:])


def read_tum(path: Union[str, Path]) -> Trajectory:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise DatasetIOError(f"cannot read {path}: {e}") from e
    return parse_tum(text, str(path))


# ---------------------------------------------------------------- association and alignment


def associate(est: Trajectory, gt: Trajectory, max_dt: float = DEFAULT_MAX_DT) -> np.ndarray:
    """Greedy nearest-timestamp pairing; returns ``(M, 2)`` index pairs ``(est, gt)`` sorted by ``est``."""
    if len(est) == 0 or len(gt) == 0:
        raise NoOverlap("empty trajectory")
    dt = np.abs(est.timestamps[:, None] - gt.timestamps[None, :])
    i, j = np.nonzero(dt <= max_dt)
    order = np.lexsort((j, i, dt[i, j]))
    used_e, used_g, pairs = set(), set(), []
    for k in order:
        a, b = int(i[k]), int(j[k])
        if a in used_e or b in used_g:
            continue
        used_e.add(a)
        used_g.add(b)
        pairs.append((a, b))
    if not pairs:
        raise NoOverlap(f"no timestamps within {max_dt} s")
    return np.array(sorted(pairs), dtype=np.int64)


@dataclass(frozen=True)
class Similarity:
    s: float
    R: np.ndarray
    t: np.ndarray

    def apply(self, X) -> np.ndarray:
        return self.s * np.asarray(X, dtype=float) @ self.R.T + self.t

    @classmethod
    def identity(cls) -> "Similarity":
        return cls(1.0, np.eye(3), np.zeros(3))


def align_sim3(est, gt, with_scale: bool = True) -> Similarity:
    """Least-squares ``(s, R, t)`` minimizing ``sum |gt_i - (s R est_i + t)|^2`` (Umeyama)."""
    X, Y = check_paired_points(est, gt)
    if len(X) < 3:
        raise DegenerateConfiguration(f"{len(X)} pairs; need at least 3")
    mx, my = X.mean(0), Y.mean(0)
    Xc, Yc = X - mx, Y - my
    var_x = np.einsum("ij,ij->", Xc, Xc) / len(X)
    scale = max(np.abs(Xc).max(), np.abs(Yc).max(), 1e-300)
    Sigma = Yc.T @ Xc / len(X)
    U, D, Vt = np.linalg.svd(Sigma)
    # rank < 2 means coincident or collinear points: rotation about the line is free
    if var_x <= (1e-12 * scale) ** 2 or D[1] <= 1e-10 * max(D[0], 1e-300):
        raise DegenerateConfiguration("points are coincident or collinear")
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    s = float(np.trace(np.diag(D) @ S) / var_x) if with_scale else 1.0
    t = my - s * R @ mx
    return Similarity(s, R, t)


class Sim3Aligner(TransformerMixin, BaseEstimator):
    """``fit(est_positions, gt_positions)``; ``transform`` maps estimates into the ground-truth frame."""

    def __init__(self, with_scale: bool = True):
        self.with_scale = with_scale

    def fit(self, X, y):
        sim = align_sim3(X, y, self.with_scale)
        self.scale_, self.rotation_, self.translation_ = sim.s, sim.R, sim.t
        return self

    def transform(self, X):
        check_is_fitted(self, "rotation_")
        return self.scale_ * np.asarray(X, dtype=float) @ self.rotation_.T + self.translation_


def position_errors(est_p, gt_p, alignment: Similarity) -> np.ndarray:
    return np.linalg.norm(np.asarray(gt_p) - alignment.apply(est_p), axis=1)


def ate_rmse(est_p, gt_p, alignment: Optional[Similarity] = None) -> float:
    """RMSE of ``|gt_i - (s R est_i + t)|`` over paired positions."""
    e = position_errors(est_p, gt_p, alignment or Similarity.identity())
    if len(e) == 0:
        raise ValueError("no pairs")
    return float(np.sqrt(np.mean(e ** 2)))


def _relative(R, t, i, j):
    """``T_i^-1 T_j`` for world-from-camera poses."""
    Rij = np.einsum("nba,nbc->nac", R[i], R[j])
    tij = np.einsum("nba,nb->na", R[i], t[j] - t[i])
    return Rij, tij


def rpe_pairs(est: Trajectory, gt: Trajectory, pairs) -> tuple:
    """Per-interval translation norm and rotation angle (degrees) of ``(gt_i^-1 gt_j)^-1 (est_i^-1 est_j)``."""
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    Re, te = _relative(est.rotations, est.positions, pairs[:, 0], pairs[:, 1])
    Rg, tg = _relative(gt.rotations, gt.positions, pairs[:, 0], pairs[:, 1])
    RE = np.einsum("nba,nbc->nac", Rg, Re)
    tE = np.einsum("nba,nb->na", Rg, te - tg)
    cos = np.clip((np.trace(RE, axis1=1, axis2=2) - 1.0) / 2.0, -1.0, 1.0)
    sin = np.linalg.norm(np.stack([RE[:, 2, 1] - RE[:, 1, 2], RE[:, 0, 2] - RE[:, 2, 0],
                                   RE[:, 1, 0] - RE[:, 0, 1]], axis=1), axis=1) / 2.0
    ang = np.degrees(np.arctan2(sin, cos))
    return np.linalg.norm(tE, axis=1), ang


def rpe(est: Trajectory, gt: Trajectory, delta: int = 1) -> tuple:
    """RMSE translation (m) and rotation (deg) over intervals of ``delta`` frames.

    ``est`` and ``gt`` must be index-aligned (same length, already paired).
    """
    n = len(est)
    if n != len(gt):
        raise ValueError("trajectories must be paired index by index")
    if n <= delta:
        raise ValueError(f"length {n} must exceed delta {delta}")
    i = np.arange(n - delta)
    tr, rot = rpe_pairs(est, gt, np.stack([i, i + delta], axis=1))
    return float(np.sqrt(np.mean(tr ** 2))), float(np.sqrt(np.mean(rot ** 2)))


def rpe_seconds(est: Trajectory, gt: Trajectory, seconds: float = 1.0) -> tuple:
    """RPE over pairs whose ground-truth time gap is closest to ``seconds``; NaN if none fit."""
    ts = gt.timestamps
    j = np.searchsorted(ts, ts + seconds)
    pairs = [(a, b) for a, b in enumerate(j) if b < len(ts)]
    if not pairs:
        return float("nan"), float("nan")
    tr, rot = rpe_pairs(est, gt, pairs)
    return float(np.sqrt(np.mean(tr ** 2))), float(np.sqrt(np.mean(rot ** 2)))


# ---------------------------------------------------------------- report


@dataclass
class MetricReport:
    ate_rmse: float
    rpe_trans: float
    rpe_rot: float
    alignment: Similarity
    errors: np.ndarray
    timestamps: np.ndarray
    rpe_trans_1s: float = float("nan")
    rpe_rot_1s: float = float("nan")
    n_pairs: int = 0
    gt_length: float = 0.0
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.alignment.s > 0:
            raise ValueError("alignment scale must be positive")

    TABLE_HEADER = "| sequence | pairs | ATE RMSE (m) | RPE trans (m) | RPE rot (deg) | scale |"

    def table_row(self, name: str = "-") -> str:
        return (f"| {name} | {self.n_pairs} | {self.ate_rmse:.3f} | {self.rpe_trans:.4f} | "
                f"{self.rpe_rot:.3f} | {self.alignment.s:.4f} |")

    def summary(self) -> str:
        rel = self.ate_rmse / self.gt_length * 100 if self.gt_length > 0 else float("nan")
        return "\n".join([
            f"pairs          {self.n_pairs}",
            f"ATE RMSE       {self.ate_rmse:.6f} m ({rel:.3f}% of {self.gt_length:.3f} m)",
            f"RPE/frame      {self.rpe_trans:.6f} m  {self.rpe_rot:.6f} deg",
            f"RPE/1s         {self.rpe_trans_1s:.6f} m  {self.rpe_rot_1s:.6f} deg",
            f"Sim(3) scale   {self.alignment.s:.6f}",
        ])


def evaluate(est: Trajectory, gt: Trajectory, max_dt: float = DEFAULT_MAX_DT, with_scale: bool = True) -> MetricReport:
    """Associate, align, and compute ATE and RPE."""
    pairs = associate(est, gt, max_dt)
    e, g = est.subset(pairs[:, 0]), gt.subset(pairs[:, 1])
    sim = align_sim3(e.positions, g.positions, with_scale)
    errs = position_errors(e.positions, g.positions, sim)
    # RPE is scale-sensitive; compare in the aligned frame
    ea = e.transformed(sim.s, sim.R, sim.t)
    if len(ea) > 1:
        tr, rot = rpe(ea, g, 1)
        tr1, rot1 = rpe_seconds(ea, g, 1.0)
    else:
        tr = rot = tr1 = rot1 = float("nan")
    return MetricReport(float(np.sqrt(np.mean(errs ** 2))), tr, rot, sim, errs, g.timestamps,
                        tr1, rot1, len(pairs), g.length())


def write_csv(path: Union[str, Path], report: MetricReport) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["timestamp", "ate_error_m"])
        for ts, err in zip(report.timestamps, report.errors):
            w.writerow([f"{ts:.6f}", f"{err:.9f}"])


def svg_plot(series: dict, title: str = "", width: int = 640, height: int = 480, margin: int = 40) -> str:
    """Top-down (x, z) plot with one polyline per named ``(N, 3)`` position series."""
    pts = [np.asarray(v, dtype=float).reshape(-1, 3)[:, [0, 2]] for v in series.values()]
    allp = np.concatenate(pts) if pts else np.zeros((1, 2))
    lo, hi = allp.min(0), allp.max(0)
    span = max(float((hi - lo).max()), 1e-9)
    sc = min(width, height) - 2 * margin
    colors = ("#d62728", "#1f77b4", "#2ca02c", "#9467bd")
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}">']
    if title:
        out.append(f'<title>{escape(title)}</title>')
    for k, (name, p) in enumerate(zip(series, pts)):
        xy = margin + (p - lo) / span * sc
        coords = " ".join(f"{x:.2f},{height - y:.2f}" for x, y in xy)
        out.append(f'<polyline id="{escape(str(name))}" fill="none" stroke="{colors[k % len(colors)]}" '
                   f'stroke-width="1.5" points="{coords}"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_svg(path: Union[str, Path], est: Trajectory, gt: Trajectory, report: MetricReport) -> None:
    pairs = associate(est, gt)
    aligned = report.alignment.apply(est.positions[pairs[:, 0]])
    Path(path).write_text(svg_plot({"estimate": aligned, "ground_truth": gt.positions[pairs[:, 1]]},
                                   f"ATE RMSE {report.ate_rmse:.4f} m"))
