"""Pipeline configuration: INI sections ``[manhattan] [tracker] [init] [normals] [io]``.

Every key has a default; unknown sections or keys are rejected. Angles are
given in degrees in the file and converted where the algorithms need radians.
"""
from __future__ import annotations

import configparser
import hashlib
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Union

import numpy as np

from .exceptions import ConfigError
from .manhattan import MeanShiftConfig
from .tracker import TrackerConfig


@dataclass(frozen=True)
class ManhattanSection:
    kernel_width: float = 2.0
    conic_half_angle_deg: float = 20.0
    max_iterations: int = 20
    convergence_angle: float = 1e-5
    min_support: int = 300
    stride: int = 4

    def mean_shift(self, stride=None) -> MeanShiftConfig:
        return MeanShiftConfig(self.kernel_width, np.deg2rad(self.conic_half_angle_deg), self.max_iterations,
                               self.convergence_angle, self.min_support,
                               self.stride if stride is None else stride)


@dataclass(frozen=True)
class TrackerSection:
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
    keyframe_inlier_ratio: float = 0.5
    keyframe_max_gap: int = 20
    cull_recent_keyframes: int = 3
    cull_min_observations: int = 2
    triangulation_keyframes: int = 2
    max_reprojection_px: float = 2.0
    max_consecutive_lost: int = 10

    def tracker(self) -> TrackerConfig:
        names = {f.name for f in fields(TrackerConfig)}
        return TrackerConfig(**{k: v for k, v in asdict(self).items() if k in names})


@dataclass(frozen=True)
class InitSection:
    min_condition_ratio: float = 10.0
    min_landmarks: int = 30
    max_reprojection_px: float = 2.0
    min_disparity_px: float = 15.0
    max_wait_frames: int = 60
    min_matches: int = 30


@dataclass(frozen=True)
class NormalsSection:
    source: str = "file"  # file | sim | depth
    directory: str = ""
    window: int = 2
    residual_threshold: float = 0.01
    depth_divisor: float = 5000.0

    def __post_init__(self):
        if self.source not in ("file", "sim", "depth"):
            raise ConfigError(f"normals.source must be file, sim or depth, got {self.source!r}")


@dataclass(frozen=True)
class IOSection:
    max_dt: float = 0.02
    seed: int = 0
    log_level: str = "WARNING"


@dataclass(frozen=True)
class PipelineConfig:
    manhattan: ManhattanSection = field(default_factory=ManhattanSection)
    tracker: TrackerSection = field(default_factory=TrackerSection)
    init: InitSection = field(default_factory=InitSection)
    normals: NormalsSection = field(default_factory=NormalsSection)
    io: IOSection = field(default_factory=IOSection)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_ini(self) -> str:
        lines = []
        for sec in fields(self):
            lines.append(f"[{sec.name}]")
            for k, v in asdict(getattr(self, sec.name)).items():
                lines.append(f"{k} = {_fmt(v)}")
            lines.append("")
        return "\n".join(lines)

    def hash(self) -> str:
        return hashlib.sha256(self.to_ini().encode()).hexdigest()[:16]

    def with_overrides(self, **sections) -> "PipelineConfig":
        """``cfg.with_overrides(tracker={"use_lines": False})``."""
        out = self
        for name, values in sections.items():
            if name not in SECTIONS:
                raise ConfigError(f"unknown section [{name}]")
            _check_keys(name, values)
            out = replace(out, **{name: replace(getattr(out, name), **values)})
        return out


SECTIONS = {f.name: f.default_factory for f in fields(PipelineConfig)}


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _convert(section: str, key: str, raw: str, default):
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw.strip()
    except ValueError as e:
        raise ConfigError(f"[{section}] {key}: {e}") from e


def _check_keys(section: str, keys) -> None:
    known = {f.name for f in fields(SECTIONS[section]())}
    unknown = sorted(set(keys) - known)
    if unknown:
        raise ConfigError(f"[{section}] unknown keys: {', '.join(unknown)}")


def parse_config(text: str) -> PipelineConfig:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str  # keep keys case-sensitive
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError(str(e)) from e
    sections = {}
    for name in cp.sections():
        if name not in SECTIONS:
            raise ConfigError(f"unknown section [{name}]")
        _check_keys(name, cp[name].keys())
        default = SECTIONS[name]()
        values = {k: _convert(name, k, cp[name][k], getattr(default, k)) for k in cp[name]}
        sections[name] = replace(default, **values)
    return PipelineConfig(**sections)


def load_config(path: Union[str, Path, None]) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    return parse_config(text)
