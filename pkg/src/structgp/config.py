"""Run configuration: defaults, file loading and flag overrides."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field, fields

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:      # Python < 3.11
    import tomli as tomllib

__all__ = ["ConfigError", "RunConfig", "load_config_file"]


class ConfigError(ValueError):
    """Invalid configuration value or file."""


@dataclass
class RunConfig:
    """Every tunable of the fitting, prediction and simulation commands.

    Times share one unit (``time_unit``) and all lengthscales are expressed
    in that unit squared.
    """

    mode: str = "structgp"
    seed: int = 0
    time_unit: str = "days"
    # data
    transform: str = "none"            # none | normal-score
    lag_tasks: list = field(default_factory=list)   # entries "task:lag"
    constant_task: bool = False
    # kernel / noise
    noise_mode: str = "shared"         # shared | per-task | fixed
    noise_init: float = 0.1
    learn_diagonal: bool = False
    # structure learning
    lambda_grid: list = field(default_factory=list)
    n_lambda: int = 20
    lambda_max: float = 10.0
    lambda_min: float = 1e-3
    criterion: str = "aic"             # aic | validation
    val_fraction: float = 0.2
    warm_start: bool = True
    beta_L1: float = 100.0
    epsilon: float = 0.01
    rho_max: float = 1e8
    lr: float = 0.02
    inner_steps: int = 300
    max_outer: int = 30
    max_steps: int = 1500
    edge_threshold: float = 0.1
    batch_size: int = 32
    # pathways
    p: int = 2
    gamma: float = 0.3
    m: int = 64
    boundary_factor: float = 1.5
    tau_max: float | None = None
    beta_decay: float = 1.0
    lp_objective: str = "online"       # online | full
    lp_steps: int = 300
    lp_lambda: float = 0.01
    lr_pathway: float = 0.05
    # prediction and evaluation
    include_noise: bool = True
    n_boot: int = 1000

    def __post_init__(self):
        self.validate()

    def validate(self):
        from .models import MODES
        checks = [
            (self.mode in MODES, f"mode must be one of {MODES}"),
            (self.transform in ("none", "normal-score"), "transform must be none or normal-score"),
            (self.noise_mode in ("shared", "per-task", "fixed"), "noise_mode must be shared, per-task or fixed"),
            (self.criterion in ("aic", "validation"), "criterion must be aic or validation"),
            (self.lp_objective in ("online", "full"), "lp_objective must be online or full"),
            (self.beta_L1 > 0, "beta_L1 must be > 0"),
            (self.epsilon > 0, "epsilon must be > 0"),
            (self.rho_max >= 1, "rho_max must be >= 1"),
            (self.lr > 0 and self.lr_pathway > 0, "learning rates must be > 0"),
            (self.inner_steps >= 1 and self.max_outer >= 1 and self.max_steps >= 1, "step budgets must be >= 1"),
            (self.batch_size >= 1, "batch_size must be >= 1"),
            (self.p >= 1, "p must be >= 1"),
            (0.0 <= self.gamma <= 1.0, "gamma must lie in [0, 1]"),
            (self.m >= 1, "m must be >= 1"),
            (self.boundary_factor >= 1, "boundary_factor must be >= 1"),
            (0.0 <= self.beta_decay <= 1.0, "beta_decay must lie in [0, 1]"),
            (self.noise_init > 0, "noise_init must be > 0"),
            (0 < self.val_fraction < 1, "val_fraction must lie in (0, 1)"),
            (self.edge_threshold >= 0, "edge_threshold must be >= 0"),
            (self.n_lambda >= 1 and self.lambda_max > 0 and self.lambda_min > 0, "invalid lambda grid"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        grid = self.lambda_values()
        if any(b > a for a, b in zip(grid, grid[1:])):
            raise ConfigError("lambda_grid must be descending")
        for lag_spec in self.lag_tasks:
            parse_lag(lag_spec)

    def lambda_values(self) -> list:
        if self.lambda_grid:
            return [float(x) for x in self.lambda_grid]
        return np.logspace(math.log10(self.lambda_max), math.log10(self.lambda_min),
                           self.n_lambda).tolist()

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **kw) -> "RunConfig":
        return RunConfig(**{**self.to_dict(), **kw})

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


def parse_lag(lag_spec: str):
    """``"NE:2"`` -> ``("NE", 2.0)``."""
    name, sep, lag = str(lag_spec).rpartition(":")
    try:
        value = float(lag)
    except ValueError:
        value = math.nan
    if not sep or not name or not math.isfinite(value) or value < 0:
        raise ConfigError(f"lag task must look like 'task:lag' with lag >= 0, got {lag_spec!r}")
    return name, value


def load_config_file(path) -> dict:
    """Read a ``key = value`` config file (TOML syntax)."""
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
