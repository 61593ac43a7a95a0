"""Run configuration (TOML) and scaling of dimensional inputs.

All physics keys are dimensionless. A config file is a flat TOML table::

    arrangement = "inline"     # or "staggered"
    grid = "basic"             # coarse | basic | fine, or set boundary_h/interior_h
    re = 50.0
    pe = 10.0
    sh1 = 0.001
    sh2_inv = 0.0
    tau = 0.1
    t_end = 50.0
    snapshot_times = [5.0, 10.0, 15.0]
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .errors import ConfigError
from .meshgen import GRID_PRESETS, Arrangement, BundleGeometry, preset_geometry
from .oxidation import KineticsParams

_GEOMETRY_KEYS = {"n_tubes", "pitch", "strip_width", "upstream_margin", "downstream_margin",
                  "boundary_h", "interior_h", "grading", "max_vertices"}


@dataclass(frozen=True)
class SimConfig:
    arrangement: str = "inline"
    grid: str = "basic"
    geometry_overrides: dict = field(default_factory=dict)
    mesh_path: str | None = None
    seed: int = 0
    re: float = 50.0
    pe: float = 10.0
    sh1: float = 0.001
    sh2_inv: float = 0.0
    tau: float = 0.1
    t_end: float = 50.0
    startup_steps: int = 4
    newton_rtol: float = 1e-10
    newton_atol: float = 1e-12
    newton_max_iter: int = 25
    linear_solver: str = "lu"
    snapshot_times: tuple = (5.0, 10.0, 15.0)
    series_every: int = 1
    film_tubes: tuple = (3,)
    mass_tubes: tuple = (1, 2, 3, 4, 5)
    output_dir: str = "out"

    def __post_init__(self):
        try:
            Arrangement(self.arrangement)
        except ValueError:
            raise ConfigError(f"arrangement must be 'inline' or 'staggered', got {self.arrangement!r}") from None
        if self.grid not in GRID_PRESETS and not {"boundary_h", "interior_h"} <= set(self.geometry_overrides):
            raise ConfigError(f"unknown grid {self.grid!r}; expected one of {sorted(GRID_PRESETS)}")
        for name in ("re", "pe", "sh1", "tau"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v > 0):
                raise ConfigError(f"{name} must be a positive number, got {v!r}")
        if not (self.sh2_inv >= 0 and math.isfinite(self.sh2_inv)):
            raise ConfigError(f"sh2_inv must be nonnegative, got {self.sh2_inv!r}")
        if self.t_end < 0:
            raise ConfigError("t_end must be nonnegative")
        n = round(self.t_end / self.tau)
        if abs(n * self.tau - self.t_end) > 1e-12 * max(1.0, self.t_end):
            raise ConfigError(f"tau = {self.tau} does not divide t_end = {self.t_end}")
        if self.linear_solver not in ("lu", "gmres"):
            raise ConfigError("linear_solver must be 'lu' or 'gmres'")
        if self.series_every < 1 or self.startup_steps < 0:
            raise ConfigError("series_every must be >= 1 and startup_steps >= 0")

    @property
    def kinetics(self) -> KineticsParams:
        return KineticsParams(self.sh1, self.sh2_inv, self.pe)

    @property
    def geometry(self) -> BundleGeometry:
        if self.grid in GRID_PRESETS:
            return preset_geometry(self.arrangement, self.grid, **self.geometry_overrides)
        return BundleGeometry(arrangement=Arrangement(self.arrangement), **self.geometry_overrides)

    def with_(self, **kw) -> "SimConfig":
        return replace(self, **kw)


_SCALARS = {f.name: f for f in fields(SimConfig)}


def config_from_dict(data: dict, base: SimConfig | None = None) -> SimConfig:
    base = base or SimConfig()
    kw = {}
    geom = dict(base.geometry_overrides)
    for key, value in data.items():
        if key in _GEOMETRY_KEYS:
            geom[key] = value
        elif key in ("geometry_overrides",):
            raise ConfigError(f"unknown key {key!r}")
        elif key in _SCALARS:
            default = getattr(base, key)
            if isinstance(default, tuple):
                if not isinstance(value, list):
                    raise ConfigError(f"{key} must be a list")
                value = tuple(value)
            elif isinstance(default, bool) or (isinstance(default, int) and not isinstance(default, bool)):
                if not isinstance(value, int) or isinstance(value, bool):
                    raise ConfigError(f"{key} must be an integer, got {value!r}")
            elif isinstance(default, float):
                if isinstance(value, bool) or not isinstance(value, (int, float)):
                    raise ConfigError(f"{key} must be a number, got {value!r}")
                value = float(value)
            elif isinstance(default, str) or default is None:
                if not isinstance(value, str):
                    raise ConfigError(f"{key} must be a string, got {value!r}")
            kw[key] = value
        else:
            raise ConfigError(f"unknown key {key!r}")
    if geom:
        kw["geometry_overrides"] = geom
    try:
        return replace(base, **kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def load_config(path, base: SimConfig | None = None) -> SimConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    nested = [k for k, v in data.items() if isinstance(v, dict)]
    if nested:
        raise ConfigError(f"{path}: tables are not supported (found [{nested[0]}]); use flat keys")
    return config_from_dict(data, base)


# ----------------------------------------------------------------------------
# dimensional inputs

@dataclass(frozen=True)
class DimensionalInputs:
    """Physical data in any consistent unit system.

    rho, mu: fluid density and viscosity; l: tube diameter; u: inlet speed;
    c: inlet oxidant concentration; D: oxidant diffusivity in the fluid;
    D0: oxidant diffusivity in the oxide; k: oxidation rate constant;
    rho0: oxide density.
    """

    rho: float
    mu: float
    l: float
    u: float
    c: float
    D: float
    D0: float
    k: float
    rho0: float

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not (math.isfinite(v) and v > 0):
                raise ConfigError(f"{f.name} must be positive, got {v!r}")


@dataclass(frozen=True)
class Groups:
    re: float
    pe: float
    sh1: float
    sh2_inv: float
    d_ref: float


def nondimensionalize(d: DimensionalInputs) -> Groups:
    """Reynolds, Peclet and Sherwood numbers plus the film reference thickness."""
    d_ref = d.D * d.c / (d.rho0 * d.u)
    sh2 = (d.l / d.D) * (d.D0 / d_ref)
    return Groups(re=d.rho * d.l * d.u / d.mu, pe=d.l * d.u / d.D, sh1=d.k * d.l / d.D,
                  sh2_inv=1.0 / sh2, d_ref=d_ref)
