"""Per-frame surface-normal maps and where they come from.

Three sources implement the same ``provide(frame_id)`` contract:

* :class:`SimulatorNormalProvider` - analytic normals rendered from a synthetic scene,
* :class:`DepthNormalProvider` - normals computed from depth images,
* :class:`FileNormalProvider` - precomputed ``.nrm`` files.

Normals are expressed in the camera frame and face the camera, i.e. for a
pixel ray ``d`` the stored normal satisfies ``n . d < 0``.

File formats (all little-endian)::

    NRM1 normal file:  b"NRM1" | u32 width | u32 height
                       | f32[height, width, 3] normals (row-major)
                       | u8[height, width] planar mask | u8[height, width] valid mask

    float depth file:  u32 width | u32 height | f32[height, width] depth (m)

Depth PNGs are 16-bit grayscale; metric depth is ``value / divisor``
(5000 for TUM / ICL-NUIM).
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Optional, Union

import numpy as np
from scipy.ndimage import uniform_filter

from .exceptions import CorruptInput, DimensionMismatch, FrameNotFound
from .geometry import CameraIntrinsics

logger = logging.getLogger(__name__)

NRM_MAGIC = b"NRM1"
UNIT_TOL = 1e-6
DEFAULT_WINDOW = 2
DEFAULT_RESIDUAL_THRESHOLD = 0.01  # metres RMS over the fitting patch
DEFAULT_DEPTH_DIVISOR = 5000.0


@dataclass(frozen=True, eq=False)
class NormalMap:
    normals: np.ndarray
    planar_mask: np.ndarray
    valid_mask: np.ndarray

    def __post_init__(self):
        n = np.asarray(self.normals)
        if n.ndim != 3 or n.shape[2] != 3:
            raise DimensionMismatch(f"normals must be (H, W, 3), got {n.shape}")
        valid = np.asarray(self.valid_mask, dtype=bool)
        planar = np.asarray(self.planar_mask, dtype=bool)
        if valid.shape != n.shape[:2] or planar.shape != n.shape[:2]:
            raise DimensionMismatch("mask shape does not match normal map")
        if np.any(planar & ~valid):
            raise ValueError("planar_mask must be a subset of valid_mask")
        if valid.any():
            norms = np.linalg.norm(n[valid].astype(float), axis=1)
            if not np.all(np.abs(norms - 1.0) <= UNIT_TOL):
                raise ValueError("valid normals must have unit norm within 1e-6")
        for name, value in (("normals", n), ("planar_mask", planar), ("valid_mask", valid)):
            value = np.array(value)
            value.setflags(write=False)
            object.__setattr__(self, name, value)

    @property
    def height(self) -> int:
        return self.normals.shape[0]

    @property
    def width(self) -> int:
        return self.normals.shape[1]

    def samples(self, stride: int = 1, use_planar_mask: bool = True) -> np.ndarray:
        """Masked normals on a regular ``stride`` grid as an ``(N, 3)`` float array."""
        sl = (slice(None, None, stride), slice(None, None, stride))
        mask = self.valid_mask[sl]
        if use_planar_mask:
            mask = mask & self.planar_mask[sl]
        return self.normals[sl][mask].astype(float)

    def equals(self, other: "NormalMap") -> bool:
        """Bit-level equality."""
        return (
            self.normals.dtype == other.normals.dtype
            and self.normals.shape == other.normals.shape
            and self.normals.tobytes() == other.normals.tobytes()
            and np.array_equal(self.planar_mask, other.planar_mask)
            and np.array_equal(self.valid_mask, other.valid_mask)
        )

    @classmethod
    def empty(cls, width: int, height: int) -> "NormalMap":
        z = np.zeros((height, width), dtype=bool)
        return cls(np.zeros((height, width, 3)), z, z)


@dataclass(frozen=True, eq=False)
class DepthMap:
    depth: np.ndarray

    def __post_init__(self):
        d = np.array(self.depth, dtype=float)
        if d.ndim != 2:
            raise DimensionMismatch("depth must be a 2-D array")
        if not np.all(np.isfinite(d)) or np.any(d < 0):
            raise ValueError("depths must be finite and non-negative")
        d.setflags(write=False)
        object.__setattr__(self, "depth", d)

    @property
    def height(self) -> int:
        return self.depth.shape[0]

    @property
    def width(self) -> int:
        return self.depth.shape[1]

    @property
    def valid(self) -> np.ndarray:
        return self.depth > 0


def backproject_depth(d: DepthMap, K: CameraIntrinsics) -> np.ndarray:
    v, u = np.mgrid[0 : d.height, 0 : d.width].astype(float)
    z = d.depth
    return np.stack([(u - K.cx) / K.fx * z, (v - K.cy) / K.fy * z, z], axis=-1)


def normals_from_depth(
    d: DepthMap,
    K: CameraIntrinsics,
    window: int = DEFAULT_WINDOW,
    residual_threshold: float = DEFAULT_RESIDUAL_THRESHOLD,
) -> NormalMap:
    """Camera-facing normals from a depth map.

    The normal at a pixel is the normalized cross product of the horizontal
    and vertical central differences of back-projected points ``window``
    pixels apart. A pixel is planar when the RMS orthogonal residual of the
    best-fit plane over its ``(2*window+1)^2`` patch is below
    ``residual_threshold`` metres.
    """
    if window < 1:
        raise ValueError("window must be >= 1")
    if (d.width, d.height) != (K.width, K.height):
        raise DimensionMismatch(f"depth is {d.width}x{d.height}, intrinsics expect {K.width}x{K.height}")
    H, W, w = d.height, d.width, window
    P = backproject_depth(d, K)
    valid = d.valid

    normals = np.zeros((H, W, 3))
    ok = np.zeros((H, W), dtype=bool)
    if H > 2 * w and W > 2 * w:
        c = (slice(w, H - w), slice(w, W - w))
        tu = P[w : H - w, 2 * w :] - P[w : H - w, : W - 2 * w]
        tv = P[2 * w :, w : W - w] - P[: H - 2 * w, w : W - w]
        n = np.cross(tu, tv)
        norm = np.linalg.norm(n, axis=-1)
        good = (
            valid[c]
            & valid[w : H - w, 2 * w :]
            & valid[w : H - w, : W - 2 * w]
            & valid[2 * w :, w : W - w]
            & valid[: H - 2 * w, w : W - w]
            & (norm > 1e-15)
        )
        n = n / np.where(norm > 0, norm, 1.0)[..., None]
        flip = np.einsum("ijk,ijk->ij", n, P[c]) > 0
        n[flip] *= -1.0
        n[~good] = 0.0
        normals[c] = n
        ok[c] = good

    # patch statistics for the plane-fit residual
    size = 2 * w + 1
    vf = valid.astype(float)
    cnt = uniform_filter(vf, size, mode="constant")
    full = cnt > 1.0 - 1e-9
    Pm = P * vf[..., None]
    mean = np.stack([uniform_filter(Pm[..., i], size, mode="constant") for i in range(3)], axis=-1)
    cov = np.empty((H, W, 3, 3))
    for i in range(3):
        for j in range(i, 3):
            m = uniform_filter(Pm[..., i] * Pm[..., j], size, mode="constant") - mean[..., i] * mean[..., j]
            cov[..., i, j] = cov[..., j, i] = m
    lam = np.linalg.eigvalsh(cov)[..., 0]
    rms = np.sqrt(np.clip(lam, 0.0, None))
    planar = ok & full & (rms < residual_threshold)
    return NormalMap(normals, planar, ok)


# ---------------------------------------------------------------- file i/o


def write_normal_map(path: Union[str, Path], nm: NormalMap) -> None:
    buf = bytearray(NRM_MAGIC)
    buf += struct.pack("<II", nm.width, nm.height)
    buf += np.ascontiguousarray(nm.normals, dtype="<f4").tobytes()
    buf += np.ascontiguousarray(nm.planar_mask, dtype=np.uint8).tobytes()
    buf += np.ascontiguousarray(nm.valid_mask, dtype=np.uint8).tobytes()
    Path(path).write_bytes(bytes(buf))


def read_normal_map(path: Union[str, Path]) -> NormalMap:
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != NRM_MAGIC:
        raise CorruptInput(f"{path}: missing NRM1 header")
    W, H = struct.unpack_from("<II", data, 4)
    n_f = H * W * 3 * 4
    if len(data) != 12 + n_f + 2 * H * W:
        raise CorruptInput(f"{path}: size does not match {W}x{H} header")
    normals = np.frombuffer(data, dtype="<f4", count=H * W * 3, offset=12).reshape(H, W, 3).astype(np.float32)
    masks = np.frombuffer(data, dtype=np.uint8, offset=12 + n_f).reshape(2, H, W)
    if masks.max(initial=0) > 1:
        raise CorruptInput(f"{path}: mask bytes must be 0 or 1")
    try:
        return NormalMap(normals, masks[0].astype(bool), masks[1].astype(bool))
    except ValueError as exc:
        raise CorruptInput(f"{path}: {exc}") from exc


def quantize_normal_map(nm: NormalMap) -> NormalMap:
    """The map exactly as it will read back from an NRM1 file."""
    n = nm.normals.astype(np.float32)
    valid = nm.valid_mask.copy()
    if valid.any():
        bad = np.abs(np.linalg.norm(n[valid].astype(float), axis=1) - 1.0) > UNIT_TOL
        if bad.any():
            idx = np.flatnonzero(valid)[bad]
            valid.flat[idx] = False
    return NormalMap(n, nm.planar_mask & valid, valid)


def write_depth(path: Union[str, Path], d: DepthMap, divisor: float = DEFAULT_DEPTH_DIVISOR) -> None:
    """Write a depth map; ``.png`` selects 16-bit PNG, anything else the float binary format.

    PNG depths beyond ``65535 / divisor`` are stored as 0 (no measurement),
    as a range-limited sensor would report them.
    """
    path = Path(path)
    if path.suffix.lower() == ".png":
        from PIL import Image

        raw = np.round(d.depth * divisor)
        raw[raw > 65535] = 0
        Image.fromarray(raw.astype(np.uint16)).save(path)
    else:
        path.write_bytes(struct.pack("<II", d.width, d.height) + d.depth.astype("<f4").tobytes())


def read_depth(path: Union[str, Path], divisor: float = DEFAULT_DEPTH_DIVISOR) -> DepthMap:
    path = Path(path)
    if not path.exists():
        raise FrameNotFound(str(path))
    if path.suffix.lower() == ".png":
        from PIL import Image

        try:
            with Image.open(path) as im:
                raw = np.array(im, dtype=np.float64)
        except OSError as exc:
            raise CorruptInput(f"{path}: {exc}") from exc
        if raw.ndim != 2:
            raise CorruptInput(f"{path}: depth PNG must be single channel")
        return DepthMap(raw / divisor)
    data = path.read_bytes()
    if len(data) < 8:
        raise CorruptInput(f"{path}: truncated header")
    W, H = struct.unpack_from("<II", data, 0)
    if len(data) != 8 + 4 * W * H:
        raise CorruptInput(f"{path}: size does not match {W}x{H} header")
    depth = np.frombuffer(data, dtype="<f4", offset=8).reshape(H, W).astype(float)
    try:
        return DepthMap(depth)
    except ValueError as exc:
        raise CorruptInput(f"{path}: {exc}") from exc


def frame_stem(frame_id) -> str:
    return f"{frame_id:06d}" if isinstance(frame_id, (int, np.integer)) else str(frame_id)


# ---------------------------------------------------------------- providers


class NormalProvider:
    """Read-only source of normal maps, keyed by frame id."""

    def provide(self, frame_id) -> NormalMap:
        raise NotImplementedError

    def __call__(self, frame_id) -> NormalMap:
        return self.provide(frame_id)


class FileNormalProvider(NormalProvider):
    def __init__(self, directory, suffix: str = ".nrm"):
        self.directory = Path(directory)
        self.suffix = suffix

    def path_for(self, frame_id) -> Path:
        return self.directory / f"{frame_stem(frame_id)}{self.suffix}"

    def provide(self, frame_id) -> NormalMap:
        path = self.path_for(frame_id)
        if not path.exists():
            raise FrameNotFound(f"no normal file for frame {frame_id!r} in {self.directory}")
        return read_normal_map(path)


class DepthNormalProvider(NormalProvider):
    """Normals computed on demand from ``<id>.png`` or ``<id>.depth`` files."""

    def __init__(
        self,
        directory,
        K: CameraIntrinsics,
        window: int = DEFAULT_WINDOW,
        residual_threshold: float = DEFAULT_RESIDUAL_THRESHOLD,
        divisor: float = DEFAULT_DEPTH_DIVISOR,
    ):
        self.directory = Path(directory)
        self.K = K
        self.window = window
        self.residual_threshold = residual_threshold
        self.divisor = divisor

    def path_for(self, frame_id) -> Path:
        stem = frame_stem(frame_id)
        for suffix in (".png", ".depth"):
            p = self.directory / f"{stem}{suffix}"
            if p.exists():
                return p
        raise FrameNotFound(f"no depth file for frame {frame_id!r} in {self.directory}")

    def provide(self, frame_id) -> NormalMap:
        d = read_depth(self.path_for(frame_id), self.divisor)
        return normals_from_depth(d, self.K, self.window, self.residual_threshold)


class SimulatorNormalProvider(NormalProvider):
    """Ground-truth normals rendered from a scene along known camera poses.

    ``render`` is called as ``render(frame_id)`` and is expected to be
    deterministic; see :func:`structvo.sim.world.render_normals`.
    """

    def __init__(self, render: Callable[[object], NormalMap], frame_ids: Optional[Mapping] = None):
        self._render = render
        self._frame_ids = None if frame_ids is None else set(frame_ids)

    def provide(self, frame_id) -> NormalMap:
        if self._frame_ids is not None and frame_id not in self._frame_ids:
            raise FrameNotFound(f"frame {frame_id!r} is not part of the simulated sequence")
        return self._render(frame_id)
