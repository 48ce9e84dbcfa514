"""Flat simulation and filter configuration."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import yaml

from ..errors import ConfigError
from ..meas import CameraModel
from ..propagate import NoiseConfig

REGIME_BUDGETS = {"rich": (150, 50), "low": (50, 50)}


def _default_offsets():
    # x, y, z (m), yaw (deg)
    return [[0.0, 0.0, 0.0, 0.0], [0.5, 0.0, 0.0, 5.0], [0.0, 0.5, 0.0, -5.0]]


@dataclass
class SimConfig:
    num_robots: int = 3
    robot_offsets: list = field(default_factory=_default_offsets)
    regime: str = "low"
    # None means "take the regime default"
    max_points_per_frame: int | None = None
    max_lines_per_frame: int | None = None
    imu_rate: float = 200.0
    cam_rate: float = 20.0
    duration: float = 60.0
    trajectory: str = "figure8"  # or a path to a TUM pose file
    # IMU noise densities (continuous time) and pixel noise
    sigma_g: float = 1.6968e-4
    sigma_a: float = 2.0e-3
    sigma_wg: float = 1.9393e-5
    sigma_wa: float = 3.0e-3
    pixel_sigma: float = 1.0
    noiseless: bool = False
    # camera
    fu: float = 458.0
    fv: float = 457.0
    cu: float = 367.0
    cv: float = 248.0
    width: int = 752
    height: int = 480
    # world
    depth_min: float = 1.0
    depth_max: float = 20.0
    line_length_min: float = 0.5
    line_length_max: float = 4.0
    min_seg_px: float = 50.0
    # filter
    window: int = 11
    min_track_length: int = 3
    use_fej: bool = True
    estimate_calib: bool = False
    ci_weight_mode: str = "trace"  # or "equal"
    ci_inflation: str = "subspace"  # or "full"
    init_sigma_theta: float = 1e-3
    init_sigma_p: float = 1e-3
    init_sigma_v: float = 1e-2
    init_sigma_bg: float = 1e-4
    init_sigma_ba: float = 1e-2
    init_sigma_calib_theta: float = 1e-3
    init_sigma_calib_p: float = 1e-3
    perturb_init: bool = True
    # campaign
    mc_runs: int = 30
    seed: int = 0
    segment_lengths: list = field(default_factory=lambda: [8.0, 16.0, 24.0, 32.0, 40.0, 48.0])  # m

    def __post_init__(self):
        if self.regime not in REGIME_BUDGETS:
            raise ConfigError(f"regime must be one of {sorted(REGIME_BUDGETS)}, got {self.regime!r}")
        pts, lines = REGIME_BUDGETS[self.regime]
        if self.max_points_per_frame is None:
            self.max_points_per_frame = pts
        if self.max_lines_per_frame is None:
            self.max_lines_per_frame = lines
        if self.imu_rate <= 0 or self.cam_rate <= 0:
            raise ConfigError("rates must be positive")
        if self.max_points_per_frame < 0 or self.max_lines_per_frame < 0:
            raise ConfigError("feature budgets must be non-negative")
        if self.num_robots < 1 or len(self.robot_offsets) < self.num_robots:
            raise ConfigError("need one offset [x, y, z, yaw_deg] per robot")
        if abs(self.imu_rate / self.cam_rate - round(self.imu_rate / self.cam_rate)) > 1e-9:
            raise ConfigError("imu_rate must be an integer multiple of cam_rate")
        if self.window < 2:
            raise ConfigError("window must hold at least two clones")
        if self.ci_weight_mode not in ("equal", "trace"):
            raise ConfigError("ci_weight_mode must be 'equal' or 'trace'")
        if not self.segment_lengths or any(float(L) <= 0 for L in self.segment_lengths):
            raise ConfigError("segment_lengths must be positive")
        if self.ci_inflation not in ("full", "subspace"):
            raise ConfigError("ci_inflation must be 'full' or 'subspace'")

    @property
    def camera(self) -> CameraModel:
        return CameraModel(self.fu, self.fv, self.cu, self.cv, self.width, self.height, self.pixel_sigma)

    @property
    def noise(self) -> NoiseConfig:
        """Noise model assumed by the filter (independent of ``noiseless``)."""
        return NoiseConfig(self.sigma_g, self.sigma_a, self.sigma_wg, self.sigma_wa)

    @property
    def n_frames(self) -> int:
        return int(round(self.duration * self.cam_rate))

    def replace(self, **kw) -> "SimConfig":
        d = dataclasses.asdict(self)
        if "regime" in kw and "max_points_per_frame" not in kw:
            d["max_points_per_frame"] = d["max_lines_per_frame"] = None
        d.update(kw)
        return SimConfig(**d)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def from_yaml(cls, path) -> "SimConfig":
        try:
            with open(path) as fh:
                d = yaml.safe_load(fh) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if not isinstance(d, dict):
            raise ConfigError("config file must hold a mapping")
        d.pop("variants", None)
        return cls.from_dict(d)
