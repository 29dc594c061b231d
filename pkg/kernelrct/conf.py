import dataclasses
import logging
import pathlib
import yaml

from dataclasses import dataclass
from typing import Any, Optional, Tuple, Union

log = logging.getLogger(__name__)

METHODS = ("mmd", "kernel-hotelling", "hotelling-f", "lmm")
POOLED_WEIGHTS = ("printed", "standard")


class ConfigError(Exception):
    pass


def load(path:Union[pathlib.Path,str]) -> dict:
    """JSON or YAML document with one mapping of run options."""
    try:
        with open(path) as f:
            cd = yaml.safe_load(f)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if cd is None:
        return {}
    if not isinstance(cd, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return cd


def bool_opt(data:dict, key:Any, default:bool=False) -> bool:
    if key in data:
        value = data[key]
        if isinstance(value, bool):
            return value
        else:
            value = str(value).strip().lower()
            if value in ("1", "on", "yes", "true"):
                return True
            elif value in ("0", "off", "no", "false"):
                return False
            else:
                raise ConfigError(f"option '{key}' expects a boolean, got {data[key]!r}")
    else:
        return default


@dataclass(frozen=True)
class RunConfig:
    # inputs and outputs
    cohort: Optional[str] = None
    trial: Optional[str] = None
    params: Optional[str] = None
    embedding: Optional[str] = None
    out: str = "out"
    asymptomatic: str = "CN"
    symptomatic: str = "MCI"
    # statistics
    seed: int = 0
    alpha: float = 0.05
    rho: float = 0.4
    gamma: float = 0.0
    method: str = "hotelling-f"
    pooled_weights: str = "printed"
    n_perm: int = 1000
    target_power: float = 0.8
    allocation: Tuple[int, int] = (1, 1)
    n_grid: Tuple[int, ...] = tuple(range(20, 401, 20))
    eps: Optional[float] = None
    # model fit
    restarts: int = 5
    max_iter: int = 500
    # preprocessing
    strict150: bool = False
    window_start: Tuple[int, int] = (5, 15)
    window_length: int = 150
    # synthetic cohort
    n_cn: int = 86
    n_mci: int = 11
    n_weeks: int = 250
    missing_rate: float = 0.05
    # simulation experiment
    n_sims: int = 1000
    n_embed: int = 100
    n_values: Tuple[int, ...] = (20, 40, 80)
    t_values: Tuple[int, ...] = (25, 75, 150)
    span_weeks: float = 150.0
    mu_shift: Optional[float] = None
    fit_embedding: bool = True
    # cross-validated pseudo-trial
    n_folds: int = 8
    fold_size: int = 11

    def __post_init__(self):
        _check(0.0 < self.alpha < 1.0, "alpha", "must be in (0, 1)", self.alpha)
        _check(0.0 <= self.rho <= 1.0, "rho", "must be in [0, 1]", self.rho)
        _check(self.gamma >= 0.0, "gamma", "must be >= 0", self.gamma)
        _check(self.seed >= 0, "seed", "must be >= 0", self.seed)
        _check(self.method in METHODS, "method", f"must be one of {', '.join(METHODS)}", self.method)
        _check(self.pooled_weights in POOLED_WEIGHTS, "pooled_weights",
               f"must be one of {', '.join(POOLED_WEIGHTS)}", self.pooled_weights)
        _check(self.n_perm >= 100, "n_perm", "must be >= 100", self.n_perm)
        _check(self.alpha < self.target_power < 1.0, "target_power", "must be in (alpha, 1)", self.target_power)
        _check(len(self.allocation) == 2 and min(self.allocation) >= 1, "allocation",
               "must be two positive integers", self.allocation)
        _check(len(self.n_grid) > 0 and min(self.n_grid) >= 2, "n_grid", "must be non-empty, all >= 2", self.n_grid)
        _check(self.eps is None or self.eps > 0, "eps", "must be > 0", self.eps)
        _check(self.restarts >= 1, "restarts", "must be >= 1", self.restarts)
        _check(self.max_iter >= 1, "max_iter", "must be >= 1", self.max_iter)
        lo, hi = self.window_start if len(self.window_start) == 2 else (1, 0)
        _check(0 <= lo <= hi, "window_start", "must be [first, last] with 0 <= first <= last", self.window_start)
        _check(self.window_length >= 2, "window_length", "must be >= 2", self.window_length)
        _check(self.n_cn >= 0 and self.n_mci >= 0, "n_cn/n_mci", "must be >= 0", (self.n_cn, self.n_mci))
        _check(self.n_weeks > hi + 2, "n_weeks", "must leave room after the window start", self.n_weeks)
        _check(0.0 <= self.missing_rate < 1.0, "missing_rate", "must be in [0, 1)", self.missing_rate)
        _check(self.n_sims >= 1, "n_sims", "must be >= 1", self.n_sims)
        _check(self.n_embed >= 2, "n_embed", "must be >= 2", self.n_embed)
        _check(len(self.n_values) > 0 and min(self.n_values) >= 2, "n_values",
               "must be non-empty, all >= 2", self.n_values)
        _check(len(self.t_values) > 0 and min(self.t_values) >= 2, "t_values",
               "must be non-empty, all >= 2", self.t_values)
        _check(self.span_weeks > 0, "span_weeks", "must be > 0", self.span_weeks)
        _check(self.n_folds >= 1 and self.fold_size >= 2, "n_folds/fold_size",
               "need at least one fold of two", (self.n_folds, self.fold_size))

    @classmethod
    def from_dict(cls, data:dict) -> "RunConfig":
        names = {f.name: f for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - set(names))
        if unknown:
            raise ConfigError(f"unknown option(s): {', '.join(unknown)}")
        values = {}
        for key, value in data.items():
            values[key] = _coerce(key, value, names[key].default)
        return cls(**values)

    @classmethod
    def load(cls, path:Union[pathlib.Path,str,None]=None, **overrides) -> "RunConfig":
        """Config file (optional) with non-None overrides applied on top; overrides win."""
        data = load(path) if path else {}
        data.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(data)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}


def _check(ok:bool, key:str, message:str, value):
    if not ok:
        raise ConfigError(f"option '{key}' {message}, got {value!r}")


def _coerce(key:str, value:Any, default:Any) -> Any:
    if value is None and default is not None:
        raise ConfigError(f"option '{key}' must not be empty")
    try:
        if isinstance(default, bool):
            return bool_opt({key: value}, key)
        if isinstance(default, tuple):
            if not isinstance(value, (list, tuple)):
                raise TypeError("expected a list")
            return tuple(int(v) for v in value)
        if value is None:
            return None
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError("expected an integer")
            return int(value)
        if isinstance(default, float) or key in ("eps", "mu_shift"):
            return float(value)
        return str(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"option '{key}': {exc} (got {value!r})") from None


# vim: set et sw=4 ts=4:
