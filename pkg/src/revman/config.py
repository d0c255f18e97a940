"""Run configuration read from a TOML file.

Every section is optional; missing keys take the module defaults.

```toml
[run]
seed = 0                 # overrides [simulate].seed and seeds resampling
out = "revman-out"       # artifact directory

[simulate]               # any SyntheticConfig field except ``routes``
epsilon = 4.04
beta = [2.23, 0.20, -2.07, 0.34]
train_scale = 1.0

[[simulate.route]]       # optional: restrict and adjust routes by name
name = "Mulhouse"
capacity = 60            # any RouteDef field may be overridden

[estimate]
multi_city = false
split_class = 0          # 0 means a single elasticity
intercept = true
n_boot = 100

[counterfactual]
scenarios = ["u.1", "s.5", "f.1"]   # default: all sixteen
ik_pcts = [0, 10, 20, 30, 40, 50, 60, 70, 80, 90, 100]

[infer]
scenarios = ["s.5", "f.1"]
per_stratum = 50
n_sub = 1000
alpha = 0.05

[numerics]               # recursion grids (see revman.alpha.Numerics)
n_grid = 200

[tolerances]
logit_grad_tol = 1e-8
logit_max_iter = 200
inversion_max_iter = 200
```
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from . import bounds as _bounds
from . import estimation as _estimation
from .alpha import Numerics
from .counterfactual import SCENARIO_IDS
from .synthetic import DEFAULT_ROUTES, RouteDef, SyntheticConfig


class ConfigError(ValueError):
    """Invalid or unreadable configuration."""


_SECTIONS = {"run", "simulate", "estimate", "counterfactual", "infer", "numerics", "tolerances"}


@dataclass(frozen=True)
class EstimateOptions:
    multi_city: bool = False
    split_class: int | None = None
    intercept: bool = True
    n_boot: int = 100


@dataclass(frozen=True)
class CounterfactualOptions:
    scenarios: tuple = SCENARIO_IDS
    ik_pcts: tuple = tuple(range(0, 101, 10))


@dataclass(frozen=True)
class InferOptions:
    scenarios: tuple = ("s.5", "f.1")
    per_stratum: int = 50
    n_sub: int = 1000
    alpha: float = 0.05


@dataclass(frozen=True)
class Tolerances:
    logit_grad_tol: float = _estimation.GRAD_TOL
    logit_max_iter: int = _estimation.MAX_ITER
    inversion_max_iter: int = _bounds.MAX_ITER


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    out: Path = Path("revman-out")
    simulate: SyntheticConfig = field(default_factory=SyntheticConfig)
    estimate: EstimateOptions = EstimateOptions()
    counterfactual: CounterfactualOptions = CounterfactualOptions()
    infer: InferOptions = InferOptions()
    numerics: Numerics = Numerics()
    tolerances: Tolerances = Tolerances()

    def apply_tolerances(self) -> None:
        """Push tolerance overrides into the modules that read them."""
        _estimation.GRAD_TOL = self.tolerances.logit_grad_tol
        _estimation.MAX_ITER = self.tolerances.logit_max_iter
        _bounds.MAX_ITER = self.tolerances.inversion_max_iter


def _build(cls, section: dict, name: str, skip=()):
    known = {f.name for f in fields(cls)} - set(skip)
    unknown = set(section) - known
    if unknown:
        raise ConfigError(f"[{name}] has unknown keys: {sorted(unknown)}")
    kw = {k: tuple(v) if isinstance(v, list) else v for k, v in section.items()}
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{name}]: {exc}") from None


def _routes(entries: list) -> tuple:
    by_name = {r.name: r for r in DEFAULT_ROUTES}
    out = []
    for entry in entries:
        entry = dict(entry)
        name = entry.pop("name", None)
        if name not in by_name:
            raise ConfigError(f"[[simulate.route]] name must be one of {sorted(by_name)}, got {name!r}")
        bad = set(entry) - {f.name for f in fields(RouteDef)} | ({"a", "b"} & set(entry))
        if bad:
            raise ConfigError(f"[[simulate.route]] {name}: cannot set {sorted(bad)}")
        try:
            out.append(replace(by_name[name], **entry))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[[simulate.route]] {name}: {exc}") from None
    return tuple(out)


def from_dict(data: dict) -> RunConfig:
    unknown = set(data) - _SECTIONS
    if unknown:
        raise ConfigError(f"unknown sections: {sorted(unknown)}")
    run = dict(data.get("run", {}))
    bad = set(run) - {"seed", "out"}
    if bad:
        raise ConfigError(f"[run] has unknown keys: {sorted(bad)}")
    seed = run.get("seed", 0)
    if not isinstance(seed, int) or seed < 0:
        raise ConfigError("[run] seed must be a non-negative integer")

    sim = dict(data.get("simulate", {}))
    route_entries = sim.pop("route", None)
    sim.setdefault("seed", seed)
    if route_entries is not None:
        sim["routes"] = _routes(route_entries)
    simulate = _build(SyntheticConfig, sim, "simulate")

    est = dict(data.get("estimate", {}))
    if est.get("split_class") == 0:
        est["split_class"] = None
    estimate = _build(EstimateOptions, est, "estimate")
    if estimate.n_boot < 0:
        raise ConfigError("[estimate] n_boot must be non-negative")

    cf = _build(CounterfactualOptions, dict(data.get("counterfactual", {})), "counterfactual")
    for sid in cf.scenarios:
        if sid not in SCENARIO_IDS:
            raise ConfigError(f"[counterfactual] unknown scenario {sid!r}")
    if any(not 0 <= p <= 100 for p in cf.ik_pcts):
        raise ConfigError("[counterfactual] ik_pcts must lie in [0, 100]")

    inf = _build(InferOptions, dict(data.get("infer", {})), "infer")
    for sid in inf.scenarios:
        if sid not in SCENARIO_IDS:
            raise ConfigError(f"[infer] unknown scenario {sid!r}")
    if not 0 < inf.alpha < 1 or inf.per_stratum < 1 or inf.n_sub < 1:
        raise ConfigError("[infer] needs 0 < alpha < 1, per_stratum >= 1 and n_sub >= 1")

    numerics = _build(Numerics, dict(data.get("numerics", {})), "numerics")
    tol = _build(Tolerances, dict(data.get("tolerances", {})), "tolerances")
    if tol.logit_grad_tol <= 0 or tol.logit_max_iter < 1 or tol.inversion_max_iter < 1:
        raise ConfigError("[tolerances] values must be positive")
    return RunConfig(seed, Path(run.get("out", "revman-out")), simulate, estimate, cf, inf, numerics, tol)


def load(path) -> RunConfig:
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    return from_dict(data)
