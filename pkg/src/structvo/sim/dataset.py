"""On-disk synthetic datasets.

Layout::

    meta.json           seed, frame count, intrinsics, noise, generation hash
    scene.json          planes, distractors, landmarks and descriptors
    gt_trajectory.txt   ground truth, TUM format (world-from-camera)
    frames/<id>.feat    features (no landmark hints)
    frames/<id>.nrm     normal map, NRM1, at ``normal_scale`` of the image size
    frames/<id>.corr    hidden feature -> scene landmark table
    frames/<id>.png     optional 16-bit depth at the normal-map resolution
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np

from ..evaluation import Trajectory, read_tum, write_tum
from ..exceptions import CorruptInput, DatasetIOError, FrameNotFound
from ..features import FrameObservations, read_features, write_features
from ..geometry import CameraIntrinsics
from ..normals import FileNormalProvider, frame_stem, write_depth, write_normal_map
from .presets import Preset
from .world import Correspondences, NoiseSpec, PlanarScene, observe_features, render_depth, render_normals

SCHEMA = "structvo-dataset/1"
DEFAULT_NORMAL_SCALE = 0.25


def canonical_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()).hexdigest()[:16]


def format_correspondences(frame_id: int, corr: Correspondences) -> str:
    out = [f"CORR 1 {frame_id}"]
    out += [f"P {i} {lid}" for i, lid in enumerate(corr.points)]
    out += [f"L {i} {lid}" for i, lid in enumerate(corr.lines)]
    return "\n".join(out) + "\n"


def parse_correspondences(text: str, source: str = "<string>") -> tuple:
    """Returns ``(point_landmarks, line_landmarks)`` indexed by feature order."""
    lines = text.splitlines()
    if not lines or not lines[0].startswith("CORR 1"):
        raise CorruptInput(f"{source}: missing CORR header")
    pts, lns = [], []
    for n, raw in enumerate(lines[1:], 2):
        tok = raw.split()
        if not tok:
            continue
        if len(tok) != 3 or tok[0] not in "PL":
            raise CorruptInput(f"{source}:{n}: bad record {raw!r}")
        target = pts if tok[0] == "P" else lns
        if int(tok[1]) != len(target):
            raise CorruptInput(f"{source}:{n}: feature index out of order")
        target.append(int(tok[2]))
    return np.array(pts, dtype=np.int64), np.array(lns, dtype=np.int64)


def generate_sequence(
    preset: Preset,
    out_dir: Union[str, Path],
    normal_scale: float = DEFAULT_NORMAL_SCALE,
    with_depth: bool = False,
) -> Path:
    """Render every frame of ``preset`` and write the dataset to ``out_dir``."""
    out = Path(out_dir)
    traj = preset.trajectory
    K = preset.K
    Kn = K.scaled(normal_scale)
    noise: NoiseSpec = traj.noise
    poses = traj.poses()
    params = dict(
        schema=SCHEMA,
        preset=preset.name,
        seed=int(traj.seed),
        n_frames=int(traj.n_frames),
        fps=float(traj.fps),
        intrinsics=K.to_dict(),
        normal_intrinsics=Kn.to_dict(),
        normal_scale=float(normal_scale),
        noise=asdict(noise),
        include_points=preset.include_points,
        include_lines=preset.include_lines,
        waypoints=[[list(map(float, p)), list(map(float, a))] for p, a in traj.waypoints],
        notes=preset.notes,
        with_depth=with_depth,
    )
    meta = dict(params, config_hash=canonical_hash(params))
    try:
        (out / "frames").mkdir(parents=True, exist_ok=True)
        (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
        (out / "scene.json").write_text(json.dumps(preset.scene.to_dict(), indent=1) + "\n")
        gt = Trajectory.from_poses([p.timestamp for p in poses], poses)
        write_tum(out / "gt_trajectory.txt", gt, f"ground truth, preset {preset.name}, seed {traj.seed}")
        for i, pose in enumerate(poses):
            stem = out / "frames" / frame_stem(i)
            obs, corr = observe_features(preset.scene, pose, K, noise, i, pose.timestamp, traj.seed,
                                         preset.include_points, preset.include_lines)
            write_features(stem.with_suffix(".feat"), obs, include_landmarks=False)
            stem.with_suffix(".corr").write_text(format_correspondences(i, corr))
            nm = render_normals(preset.scene, pose, Kn, i, noise.normal_sigma, noise.normal_outliers, traj.seed)
            write_normal_map(stem.with_suffix(".nrm"), nm)
            if with_depth:
                write_depth(stem.with_suffix(".png"), render_depth(preset.scene, pose, Kn, i))
    except OSError as e:
        raise DatasetIOError(f"cannot write dataset to {out}: {e}") from e
    return out


@dataclass
class Dataset:
    root: Path
    meta: dict
    K: CameraIntrinsics
    normal_K: CameraIntrinsics
    gt: Trajectory

    @property
    def n_frames(self) -> int:
        return int(self.meta["n_frames"])

    @property
    def frames_dir(self) -> Path:
        return self.root / "frames"

    def frame_ids(self) -> list:
        return list(range(self.n_frames))

    def frame(self, i: int) -> FrameObservations:
        p = self.frames_dir / f"{frame_stem(i)}.feat"
        if not p.exists():
            raise FrameNotFound(f"no feature file for frame {i}")
        return read_features(p)

    def correspondences(self, i: int) -> tuple:
        p = self.frames_dir / f"{frame_stem(i)}.corr"
        try:
            return parse_correspondences(p.read_text(), str(p))
        except OSError as e:
            raise DatasetIOError(f"cannot read {p}: {e}") from e

    def normal_provider(self) -> FileNormalProvider:
        return FileNormalProvider(self.frames_dir)

    def scene(self) -> PlanarScene:
        return PlanarScene.from_dict(json.loads((self.root / "scene.json").read_text()))


def load_dataset(root: Union[str, Path]) -> Dataset:
    root = Path(root)
    try:
        meta = json.loads((root / "meta.json").read_text())
    except OSError as e:
        raise DatasetIOError(f"cannot read {root / 'meta.json'}: {e}") from e
    except json.JSONDecodeError as e:
        raise CorruptInput(f"{root / 'meta.json'}: {e}") from e
    if meta.get("schema") != SCHEMA:
        raise CorruptInput(f"{root}: unsupported dataset schema {meta.get('schema')!r}")
    K = CameraIntrinsics(**meta["intrinsics"])
    Kn = CameraIntrinsics(**meta.get("normal_intrinsics", meta["intrinsics"]))
    gt = read_tum(root / "gt_trajectory.txt")
    return Dataset(root, meta, K, Kn, gt)


def dataset_from_preset(preset: Preset, out_dir, normal_scale: Optional[float] = None, **kw) -> Dataset:
    generate_sequence(preset, out_dir, DEFAULT_NORMAL_SCALE if normal_scale is None else normal_scale, **kw)
    return load_dataset(out_dir)
