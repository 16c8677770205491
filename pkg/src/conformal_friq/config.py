"""Run configuration: a flat JSON object plus command-line overrides."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, fields, replace

from .metrics import METRICS
from .predictors import normalize_kind
from .sandbox import Fidelity, SandboxProblem, make_problem

SEED_ENV = "CONFORMAL_FRIQ_SEED"
STUDIES = ("coverage", "sweep-c", "sweep-alpha", "sweep-train", "multiround", "shift")
U64_MAX = 2**64 - 1


@dataclass(frozen=True)
class RunConfig:
    # sandbox
    height: int = 32
    width: int = 32
    noise_std: float = 0.75
    noise_spread: float = 0.3
    mask_seed: int = 0
    rates: tuple = (16, 8, 4, 2, 1)
    fidelity: str = "exact"
    # dataset
    n_instances: int = 4000
    c: int = 32
    p: int = 0
    normalize: bool = False
    metrics: tuple = ("psnr", "ssim")
    seed: int | None = None
    # bounds and studies
    metric: str = "psnr"
    bound: str = "quantile"
    bounds: tuple = ("non_adaptive", "quantile", "regression")
    alpha: float = 0.05
    rate: int = 1
    n_train: int = 1000
    split_fraction: float = 0.7
    trials: int = 1000
    tau: float | None = None
    threads: int = 1
    alphas: tuple = (0.05, 0.1, 0.25, 0.5)
    c_values: tuple = (1, 2, 4, 8, 16, 32)
    fractions: tuple = (0.1, 0.25, 0.5, 0.75, 0.9, 0.95)
    n_test: int = 900
    shift_alpha: float = 0.1
    shift_rate: int = 8
    shift_instances: int = 1000

    def __post_init__(self):
        for name in ("rates", "metrics", "bounds", "alphas", "c_values", "fractions"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        validate(self)

    def problem(self) -> SandboxProblem:
        return make_problem(
            height=self.height,
            width=self.width,
            noise_std=self.noise_std,
            noise_spread=self.noise_spread,
            rates=self.rates,
            fidelity=Fidelity.parse(self.fidelity),
            mask_seed=self.mask_seed,
        )

    def resolved_seed(self) -> int:
        """Explicit seed, else ``$CONFORMAL_FRIQ_SEED``, else 0."""
        if self.seed is not None:
            return self.seed
        env = os.environ.get(SEED_ENV)
        if env is None or env == "":
            return 0
        return parse_seed(env)

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def parse_seed(text) -> int:
    try:
        value = int(text)
    except (TypeError, ValueError):
        raise ValueError(f"seed must be an unsigned 64-bit integer, got {text!r}") from None
    if not 0 <= value <= U64_MAX:
        raise ValueError(f"seed must be an unsigned 64-bit integer, got {text!r}")
    return value


def _require(cond: bool, msg: str):
    if not cond:
        raise ValueError(msg)


def validate(cfg: RunConfig) -> None:
    _require(cfg.height >= 11 and cfg.width >= 11, "height and width must be >= 11 (SSIM window)")
    _require(cfg.noise_std >= 0, "noise_std must be >= 0")
    _require(cfg.noise_spread >= 0, "noise_spread must be >= 0")
    _require(len(cfg.rates) > 0 and all(isinstance(r, int) and r >= 1 for r in cfg.rates), "rates must be positive integers")
    Fidelity.parse(cfg.fidelity)
    _require(cfg.n_instances >= 1, "n_instances must be >= 1")
    _require(cfg.c >= 1, "c must be >= 1")
    _require(cfg.p >= 0, "p must be >= 0")
    _require(len(cfg.metrics) > 0 and all(m in METRICS for m in cfg.metrics), f"metrics must be drawn from {sorted(METRICS)}")
    _require(cfg.metric in METRICS, f"unknown metric {cfg.metric!r}")
    if cfg.seed is not None:
        parse_seed(cfg.seed)
    normalize_kind(cfg.bound)
    _require(len(cfg.bounds) > 0, "bounds must not be empty")
    for kind in cfg.bounds:
        normalize_kind(kind)
    _require(0 < cfg.alpha < 1, "alpha must lie in (0, 1)")
    _require(all(0 < a < 1 for a in cfg.alphas), "alphas must lie in (0, 1)")
    _require(0 < cfg.shift_alpha < 1, "shift_alpha must lie in (0, 1)")
    _require(cfg.rate >= 1 and cfg.shift_rate >= 1, "rates must be >= 1")
    _require(cfg.n_train >= 0, "n_train must be >= 0")
    _require(0 < cfg.split_fraction < 1, "split_fraction must lie in (0, 1)")
    _require(cfg.trials >= 1, "trials must be >= 1")
    _require(cfg.threads >= 1, "threads must be >= 1")
    _require(all(isinstance(c, int) and c >= 1 for c in cfg.c_values), "c_values must be positive integers")
    _require(all(0 < f < 1 for f in cfg.fractions), "fractions must lie in (0, 1)")
    _require(cfg.n_test >= 1 and cfg.shift_instances >= 2, "n_test and shift_instances must be positive")


_FIELDS = {f.name: f for f in fields(RunConfig)}


def from_mapping(data: dict, base: RunConfig | None = None) -> RunConfig:
    unknown = sorted(set(data) - set(_FIELDS))
    if unknown:
        raise ValueError(f"unknown configuration keys: {', '.join(unknown)}")
    try:
        return replace(base or RunConfig(), **data)
    except TypeError as exc:
        raise ValueError(f"bad configuration value: {exc}") from None


def load_config(path) -> RunConfig:
    with open(path) as fh:
        data = json.load(fh)
    if not isinstance(data, dict):
        raise ValueError(f"{path}: configuration must be a JSON object")
    return from_mapping(data)
