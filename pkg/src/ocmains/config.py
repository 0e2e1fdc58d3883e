"""Plain-text experiment configuration.

The file format is INI-style ``key = value`` pairs grouped in sections, one
section per subsystem.  Every key has a default, so an empty or missing file
runs the standard simulation experiment.  Values given on the command line
override the file.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field

import numpy as np

from .filtering import FilterConfig
from .magfield import ArrayGeometry, PolynomialFieldModel
from .simulator import NoiseConfig, TrajectoryConfig

__all__ = ["ConfigError", "EnvironmentParams", "RealParams", "ExperimentConfig", "load_config"]


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


@dataclass
class EnvironmentParams:
    seed: int = 1
    n_dipoles: int = 8
    standoff_min: float = 1.5
    standoff_max: float = 3.0
    band_min: float = 20.0
    band_max: float = 70.0
    earth_field: tuple = (20.0, 5.0, -44.0)


@dataclass
class RealParams:
    dataset_dir: str = ""
    reinits: int = 12


@dataclass
class ExperimentConfig:
    mode: str = "sim"
    runs: int = 50
    seed: int = 1
    oc: str = "both"       # on | off | both
    out_dir: str = "out"
    export_data: bool = False
    filter: FilterConfig = field(default_factory=FilterConfig)
    trajectory: TrajectoryConfig = field(default_factory=TrajectoryConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    environment: EnvironmentParams = field(default_factory=EnvironmentParams)
    real: RealParams = field(default_factory=RealParams)


def _get(parser, section, key, cast, default):
    if not parser.has_section(section) or not parser.has_option(section, key):
        return default
    raw = parser.get(section, key).strip()
    if raw == "":
        return default
    try:
        if cast is bool:
            return raw.lower() in ("1", "true", "yes", "on")
        if cast is tuple:
            return tuple(float(x) for x in raw.split())
        return cast(raw)
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r}") from exc


def load_config(path: str | None = None) -> ExperimentConfig:
    """Build an experiment configuration from an optional key=value file."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    if path is not None:
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        try:
            with open(path, "r", encoding="utf-8") as fh:
                parser.read_file(fh)
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from exc

    g = lambda *a: _get(parser, *a)  # noqa: E731

    order = g("filter", "field_order", int, 1)
    geom_file = g("geometry", "file", str, "")
    if geom_file:
        if not os.path.exists(geom_file):
            raise ConfigError(f"[geometry] file not found: {geom_file}")
        try:
            geometry = ArrayGeometry.from_file(geom_file)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    else:
        geometry = ArrayGeometry.default_grid(
            rows=g("geometry", "rows", int, 5),
            cols=g("geometry", "cols", int, 6),
            pitch=g("geometry", "pitch", float, 0.03),
        )

    try:
        filter_cfg = FilterConfig(
            field_model=PolynomialFieldModel(order=order),
            array_geometry=geometry,
            ts=g("filter", "ts", float, 0.01),
            gravity=np.array(g("filter", "gravity", tuple, (0.0, 0.0, -9.81))),
            accel_noise_density=g("filter", "accel_noise_density", float, 0.02),
            gyro_noise_density=g("filter", "gyro_noise_density", float, 5e-4),
            theta_rw_density=g("filter", "theta_rw_density", float, 0.5),
            accel_bias_rw_density=g("filter", "accel_bias_rw_density", float, 1e-4),
            gyro_bias_rw_density=g("filter", "gyro_bias_rw_density", float, 1e-6),
            mag_noise_std=g("filter", "mag_noise_std", float, 0.5),
            sigma_p0=g("filter", "sigma_p0", float, 1e-3),
            sigma_v0=g("filter", "sigma_v0", float, 1e-2),
            sigma_rp0=np.deg2rad(g("filter", "sigma_rp0_deg", float, 0.5)),
            sigma_yaw0=np.deg2rad(g("filter", "sigma_yaw0_deg", float, 1.0)),
            sigma_theta0=g("filter", "sigma_theta0", float, 10.0),
            sigma_ba0=g("filter", "sigma_ba0", float, 0.01),
            sigma_bg0=g("filter", "sigma_bg0", float, 5e-5),
            estimate_biases=g("filter", "estimate_biases", bool, True),
            second_order_position_blocks=g("filter", "second_order_position_blocks", bool, True),
            general_nullspace_projection=g("filter", "general_nullspace_projection", bool, False),
        )
        trajectory = TrajectoryConfig(
            side=g("trajectory", "side", float, 2.0),
            laps=g("trajectory", "laps", int, 1),
            duration=g("trajectory", "duration", float, 8.0),
            rate=g("trajectory", "rate", float, 100.0),
            corner_time=g("trajectory", "corner_time", float, 0.5),
            height=g("trajectory", "height", float, 0.0),
            tangent_yaw=g("trajectory", "tangent_yaw", bool, True),
        )
        noise = NoiseConfig(
            accel_density=g("noise", "accel_density", float, 0.02),
            gyro_density=g("noise", "gyro_density", float, 5e-4),
            accel_bias_std=g("noise", "accel_bias_std", float, 0.01),
            gyro_bias_std=g("noise", "gyro_bias_std", float, 5e-5),
            mag_std=g("noise", "mag_std", float, 0.5),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    if abs(filter_cfg.ts * trajectory.rate - 1.0) > 1e-9:
        raise ConfigError("filter ts and trajectory rate are inconsistent")

    mode = g("experiment", "mode", str, "sim")
    if mode not in ("sim", "real"):
        raise ConfigError(f"unknown mode {mode!r}")
    oc = g("experiment", "oc", str, "both")
    if oc not in ("on", "off", "both"):
        raise ConfigError(f"oc must be on, off or both, got {oc!r}")
    runs = g("experiment", "runs", int, 50)
    if runs < 1:
        raise ConfigError("runs must be at least 1")

    return ExperimentConfig(
        mode=mode,
        runs=runs,
        seed=g("experiment", "seed", int, 1),
        oc=oc,
        out_dir=g("experiment", "out", str, "out"),
        export_data=g("experiment", "export_data", bool, False),
        filter=filter_cfg,
        trajectory=trajectory,
        noise=noise,
        environment=EnvironmentParams(
            seed=g("environment", "seed", int, 1),
            n_dipoles=g("environment", "n_dipoles", int, 8),
            standoff_min=g("environment", "standoff_min", float, 1.5),
            standoff_max=g("environment", "standoff_max", float, 3.0),
            band_min=g("environment", "band_min", float, 20.0),
            band_max=g("environment", "band_max", float, 70.0),
            earth_field=g("environment", "earth_field", tuple, (20.0, 5.0, -44.0)),
        ),
        real=RealParams(
            dataset_dir=g("real", "dataset_dir", str, ""),
            reinits=g("real", "reinits", int, 12),
        ),
    )
