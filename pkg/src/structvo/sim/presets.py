"""Built-in scenarios.

World axes follow the camera convention at rest: ``x`` right, ``y`` down,
``z`` forward. All presets share a 640x480 camera.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from ..exceptions import BadPreset
from ..geometry import CameraIntrinsics
from .world import NoiseSpec, PlanarScene, Rect, TrajectorySpec, axis_rect, build_scene

DEFAULT_INTRINSICS = CameraIntrinsics(525.0, 525.0, 319.5, 239.5, 640, 480)
OCCLUSION_FRAMES = (100, 120)


@dataclass
class Preset:
    name: str
    scene: PlanarScene
    trajectory: TrajectorySpec
    K: CameraIntrinsics = DEFAULT_INTRINSICS
    include_points: bool = True
    include_lines: bool = True
    notes: dict = field(default_factory=dict)


def box(lo, hi, names=("left", "right", "ceiling", "floor", "back", "front")) -> list:
    """The six inward-facing walls of an axis-aligned box."""
    lo, hi = np.asarray(lo, dtype=float), np.asarray(hi, dtype=float)
    planes = []
    for axis in range(3):
        a, b = (axis + 1) % 3, (axis + 2) % 3
        for k, off in enumerate((lo[axis], hi[axis])):
            planes.append(axis_rect(axis, off, (lo[a], lo[b]), (hi[a], hi[b]), names[2 * axis + k]))
    return planes


def _corridor_lines(x_half, y_top, y_floor, z0, z1, door_every=2.0, tile_every=1.0):
    """Door frames on both side walls and tile joints on the floor."""
    segs = []
    for z in np.arange(z0 + 1.0, z1 - 1.0, door_every):
        for x in (-x_half, x_half):
            top = y_floor - 2.0
            segs.append(((x, y_floor, z), (x, top, z)))
            segs.append(((x, y_floor, z + 0.9), (x, top, z + 0.9)))
            segs.append(((x, top, z), (x, top, z + 0.9)))
        # picture rail on alternating sides
        x = -x_half if int(round(z)) % 4 == 0 else x_half
        segs.append(((x, y_top + 0.4, z + 1.1), (x, y_top + 0.4, z + 1.8)))
    for z in np.arange(z0 + 0.5, z1, tile_every):
        segs.append(((-x_half, y_floor, z), (x_half, y_floor, z)))
    for x in (-0.4, 0.4):
        segs.append(((x, y_top, z0 + 0.5), (x, y_top, z1 - 0.5)))
    return segs


def corridor(seed: int = 0, n_frames: int = 300, noise: Optional[NoiseSpec] = None, points: bool = True) -> Preset:
    x_half, y_top, y_floor = 1.2, -1.4, 1.3
    z0, z1 = -3.0, 20.0
    planes = box((-x_half, y_top, z0), (x_half, y_floor, z1))
    lines = _corridor_lines(x_half, y_top, y_floor, z0, z1)
    scene = build_scene(planes, seed, points_per_m2=3.0 if points else 0.0, textured=range(6),
                        texture_lines=lines)
    # walk forward 9 m with a gentle weave and head motion
    waypoints = (
        ((0.0, 0.2, 0.0), (0.00, 0.05, 0.00)),
        ((0.25, 0.15, 2.5), (0.12, 0.02, 0.02)),
        ((-0.2, 0.22, 5.0), (-0.10, 0.08, -0.02)),
        ((0.15, 0.18, 7.0), (0.08, 0.03, 0.01)),
        ((0.0, 0.2, 9.0), (0.00, 0.05, 0.00)),
    )
    noise = NoiseSpec(1.0, np.deg2rad(5.0), 0.0, 0.02) if noise is None else noise
    traj = TrajectorySpec(waypoints, n_frames, 30.0, noise, seed)
    return Preset("corridor", scene, traj, include_points=points)


def room(seed: int = 0, n_frames: int = 120, noise: Optional[NoiseSpec] = None) -> Preset:
    planes = box((-3.0, -1.5, -3.0), (3.0, 1.5, 3.0))
    scene = build_scene(planes, seed, points_per_m2=12.0)
    # pitched towards the floor while panning across two corners: two or three axes always in view
    waypoints = (
        ((-0.8, 0.0, -0.8), (0.5, 0.35, 0.0)),
        ((-0.3, -0.2, -1.0), (1.0, 0.42, 0.08)),
        ((0.3, 0.1, -0.6), (1.7, 0.3, -0.05)),
        ((0.6, 0.0, 0.2), (2.5, 0.38, 0.03)),
    )
    noise = NoiseSpec() if noise is None else noise
    return Preset("room", scene, TrajectorySpec(waypoints, n_frames, 30.0, noise, seed))


def pure_rotation(seed: int = 0, n_frames: int = 60, noise: Optional[NoiseSpec] = None) -> Preset:
    planes = box((-3.0, -1.5, -3.0), (3.0, 1.5, 3.0))
    scene = build_scene(planes, seed, points_per_m2=12.0)
    c = (0.2, 0.1, -0.3)
    waypoints = ((c, (0.0, 0.1, 0.0)), (c, (np.pi / 2, 0.1, 0.0)))
    noise = NoiseSpec() if noise is None else noise
    return Preset("pure_rotation", scene, TrajectorySpec(waypoints, n_frames, 30.0, noise, seed))


def occlusion_window(seed: int = 0, n_frames: int = 300, noise: Optional[NoiseSpec] = None) -> Preset:
    """Corridor whose normal channel is blanked by clutter for frames 100-120.

    A camera-attached, oblique, non-planar surface fills the field of view of
    the normal source during the window, so no Manhattan frame is visible
    while point and line features stay trackable.
    """
    p = corridor(seed, n_frames, noise)
    u = np.array([1.0, 0.0, 0.45])
    v = np.array([0.2, 1.0, -0.3])
    v -= u * (u @ v) / (u @ u)
    clutter = Rect((0.0, 0.0, 0.4), tuple(u / np.linalg.norm(u)), tuple(v / np.linalg.norm(v)), 5.0, 5.0,
                   planar=False, frame="camera", frames=OCCLUSION_FRAMES, name="clutter")
    scene = replace(p.scene, distractors=[clutter])
    return replace(p, name="occlusion_window", scene=scene, notes={"occluded_frames": list(OCCLUSION_FRAMES)})


def no_texture(seed: int = 0, n_frames: int = 300, noise: Optional[NoiseSpec] = None) -> Preset:
    p = corridor(seed, n_frames, noise, points=False)
    return replace(p, name="no_texture", include_points=False)


PRESETS = {
    "room": room,
    "corridor": corridor,
    "pure_rotation": pure_rotation,
    "occlusion_window": occlusion_window,
    "no_texture": no_texture,
}


def get_preset(name: str, seed: int = 0, n_frames: Optional[int] = None, **kw) -> Preset:
    if name not in PRESETS:
        raise BadPreset(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    if n_frames is not None:
        if n_frames < 2:
            raise BadPreset("a sequence needs at least 2 frames")
        kw["n_frames"] = int(n_frames)
    return PRESETS[name](seed=seed, **kw)
