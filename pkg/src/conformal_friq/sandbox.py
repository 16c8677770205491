"""Synthetic inverse problems with exact Gaussian posteriors.

Each pixel ``j`` of the true image is drawn independently from
``N(prior_mean[j], prior_std[j]**2)``.  An instance is observed on a nested
subset of pixels ``S_R`` (``|S_R| = ceil(d / R)``) with additive Gaussian
noise, so the posterior is available in closed form pixel by pixel.  Every
instance draws its own noise level ``sigma_i = noise_std * exp(noise_spread *
xi_i)``; this heteroscedasticity is what gives adaptive bounds something to
adapt to, and it keeps instances i.i.d.

Randomness is organised as counter-based streams: a stream is keyed by a
seed plus a tuple of small integers (purpose, rate, ...), so any instance can
be regenerated alone and in any order.
"""

from __future__ import annotations

import dataclasses
import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

DEFAULT_RATES = (16, 8, 4, 2, 1)

# purpose keys for rng_stream
_INSTANCE = 0
_TRUTH = 1
_NOISE = 2
_SAMPLES = 3
_RECOVERY = 4
_MASK = 5


def rng_stream(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator for ``(seed, *keys)``; identical keys give identical streams."""
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in keys)))


def instance_seed(master_seed: int, instance_id: int) -> int:
    """Derive the 63-bit seed of one population member from the master seed."""
    ss = np.random.SeedSequence(entropy=int(master_seed), spawn_key=(_INSTANCE, int(instance_id)))
    return int(ss.generate_state(1, np.uint64)[0] >> np.uint64(1))


@dataclass(frozen=True)
class Fidelity:
    """Posterior sampler quality.

    ``exact`` draws from the true posterior, ``inflated`` multiplies the
    posterior std by ``value`` and ``biased`` shifts the mean by ``value``
    posterior stds.
    """

    kind: str = "exact"
    value: float = 0.0

    def __post_init__(self):
        if self.kind not in ("exact", "inflated", "biased"):
            raise ValueError(f"unknown sampler fidelity {self.kind!r}")
        if self.kind == "inflated" and not self.value > 0:
            raise ValueError(f"inflation factor must be positive, got {self.value}")
        if not math.isfinite(self.value):
            raise ValueError("fidelity value must be finite")

    @classmethod
    def exact(cls) -> "Fidelity":
        return cls("exact", 0.0)

    @classmethod
    def inflated(cls, kappa: float) -> "Fidelity":
        return cls("inflated", float(kappa))

    @classmethod
    def biased(cls, b: float) -> "Fidelity":
        return cls("biased", float(b))

    @classmethod
    def parse(cls, text: str) -> "Fidelity":
        """Parse ``exact``, ``inflated(2)`` or ``biased(0.5)``."""
        text = text.strip()
        if text == "exact":
            return cls.exact()
        for kind in ("inflated", "biased"):
            if text.startswith(kind + "(") and text.endswith(")"):
                return cls(kind, float(text[len(kind) + 1 : -1]))
        raise ValueError(f"cannot parse sampler fidelity {text!r}")

    def __str__(self) -> str:
        return "exact" if self.kind == "exact" else f"{self.kind}({self.value!r})"


@dataclass(frozen=True, eq=False)
class SandboxProblem:
    prior_mean: np.ndarray
    prior_std: np.ndarray
    noise_std: float
    mask_order: np.ndarray
    noise_spread: float = 0.0
    rates: tuple = DEFAULT_RATES
    fidelity: Fidelity = field(default_factory=Fidelity.exact)
    data_range: float = 1.0

    def __post_init__(self):
        mean = np.array(self.prior_mean, dtype=np.float64)
        std = np.array(self.prior_std, dtype=np.float64)
        if mean.ndim != 2 or mean.shape != std.shape:
            raise ValueError("prior_mean and prior_std must be 2-D arrays of equal shape")
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(std))):
            raise ValueError("prior fields must be finite")
        if np.any(std <= 0):
            raise ValueError("prior_std must be strictly positive")
        if not (self.noise_std >= 0 and math.isfinite(self.noise_std)):
            raise ValueError(f"noise_std must be finite and >= 0, got {self.noise_std}")
        if self.noise_spread < 0:
            raise ValueError("noise_spread must be >= 0")
        if self.data_range <= 0:
            raise ValueError("data_range must be positive")
        order = np.array(self.mask_order, dtype=np.int64)
        if sorted(order.tolist()) != list(range(mean.size)):
            raise ValueError("mask_order must be a permutation of the pixel indices")
        rates = tuple(int(r) for r in self.rates)
        if any(r < 1 for r in rates) or len(set(rates)) != len(rates):
            raise ValueError(f"rates must be distinct positive integers, got {rates}")
        for arr in (mean, std, order):
            arr.setflags(write=False)
        object.__setattr__(self, "prior_mean", mean)
        object.__setattr__(self, "prior_std", std)
        object.__setattr__(self, "mask_order", order)
        object.__setattr__(self, "rates", rates)
        object.__setattr__(self, "noise_std", float(self.noise_std))

    @property
    def shape(self) -> tuple:
        return self.prior_mean.shape

    @property
    def size(self) -> int:
        return self.prior_mean.size

    def mask(self, rate: int) -> np.ndarray:
        """Flat pixel indices observed at acceleration ``rate``."""
        if int(rate) not in self.rates:
            raise KeyError(f"rate {rate} is not in the mask schedule {self.rates}")
        return self.mask_order[: math.ceil(self.size / int(rate))]

    def replace(self, **changes) -> "SandboxProblem":
        return dataclasses.replace(self, **changes)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for arr in (self.prior_mean, self.prior_std, self.mask_order):
            h.update(np.ascontiguousarray(arr).tobytes())
        h.update(repr((self.noise_std, self.noise_spread, self.rates, str(self.fidelity), self.data_range)).encode())
        return h.hexdigest()

    def same_as(self, other: "SandboxProblem") -> bool:
        return self.fingerprint() == other.fingerprint()


def make_problem(
    height: int = 32,
    width: int = 32,
    noise_std: float = 0.75,
    noise_spread: float = 0.3,
    prior_level: float = 0.5,
    prior_texture: float = 0.25,
    prior_std_center: float = 1.0,
    prior_std_edge: float = 0.2,
    rates=DEFAULT_RATES,
    fidelity: Fidelity | None = None,
    data_range: float = 1.0,
    mask_seed: int = 0,
) -> SandboxProblem:
    """Build the default sandbox: smooth prior mean, radially decaying prior std,
    and a variable-density nested mask (center pixels are sampled first)."""
    if height < 1 or width < 1:
        raise ValueError("image shape must be positive")
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    cy, cx = (height - 1) / 2.0, (width - 1) / 2.0
    mean = prior_level + prior_texture * np.sin(2 * np.pi * xx / width) * np.cos(2 * np.pi * yy / height)
    r2 = (yy - cy) ** 2 + (xx - cx) ** 2
    scale = 0.3 * min(height, width)
    std = prior_std_edge + (prior_std_center - prior_std_edge) * np.exp(-r2 / (2 * scale**2))
    # sampling probability inversely proportional to distance from the center
    weights = 1.0 / (1.0 + np.sqrt(r2).ravel())
    order = rng_stream(mask_seed, _MASK).choice(height * width, size=height * width, replace=False, p=weights / weights.sum())
    return SandboxProblem(
        prior_mean=mean,
        prior_std=std,
        noise_std=noise_std,
        mask_order=order,
        noise_spread=noise_spread,
        rates=tuple(rates),
        fidelity=fidelity or Fidelity.exact(),
        data_range=data_range,
    )


@dataclass(frozen=True, eq=False)
class Observation:
    values: np.ndarray
    mask: np.ndarray
    noise_std: float
    rate: int

    def __post_init__(self):
        if len(self.values) != len(self.mask):
            raise ValueError("observation values and mask differ in length")


def draw_truth(problem: SandboxProblem, seed: int) -> np.ndarray:
    z = rng_stream(seed, _TRUTH).standard_normal(problem.shape)
    return problem.prior_mean + problem.prior_std * z


def instance_noise_std(problem: SandboxProblem, seed: int) -> float:
    """Noise level of the instance with this seed (first draw of its noise stream)."""
    xi = rng_stream(seed, _NOISE).standard_normal()
    return problem.noise_std * math.exp(problem.noise_spread * xi)


def observe(problem: SandboxProblem, truth, rate: int, seed: int) -> Observation:
    """Noisy measurement of ``truth`` on ``S_rate``.

    One noise vector over the whole mask order is drawn per seed, so denser
    rates reuse exactly the same noise on the pixels they share with sparser
    ones.
    """
    mask = problem.mask(rate)
    rng = rng_stream(seed, _NOISE)
    xi = rng.standard_normal()
    sigma = problem.noise_std * math.exp(problem.noise_spread * xi)
    noise = rng.standard_normal(problem.size)
    truth = np.asarray(truth, dtype=np.float64)
    if truth.shape != problem.shape:
        raise ValueError(f"truth shape {truth.shape} does not match problem shape {problem.shape}")
    values = truth.ravel()[mask] + sigma * noise[: len(mask)]
    return Observation(values=values, mask=mask, noise_std=sigma, rate=int(rate))


def posterior_law(problem: SandboxProblem, obs: Observation) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel posterior mean and std (Gaussian conjugacy)."""
    mean = problem.prior_mean.ravel().copy()
    std = problem.prior_std.ravel().copy()
    idx = obs.mask
    if obs.noise_std == 0:
        mean[idx] = obs.values
        std[idx] = 0.0
    else:
        prior_prec = 1.0 / std[idx] ** 2
        noise_prec = 1.0 / obs.noise_std**2
        var = 1.0 / (prior_prec + noise_prec)
        mean[idx] = var * (mean[idx] * prior_prec + obs.values * noise_prec)
        std[idx] = np.sqrt(var)
    return mean.reshape(problem.shape), std.reshape(problem.shape)


def _sample(problem, mean, std, count, rng, fidelity):
    fidelity = fidelity or problem.fidelity
    if fidelity.kind == "inflated":
        std = fidelity.value * std
    elif fidelity.kind == "biased":
        mean = mean + fidelity.value * std
    return mean + std * rng.standard_normal((count,) + problem.shape)


def draw_posterior_samples(problem: SandboxProblem, obs: Observation, count: int, seed: int, fidelity: Fidelity | None = None) -> np.ndarray:
    """``count`` posterior image samples, shape ``(count, H, W)``."""
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    mean, std = posterior_law(problem, obs)
    return _sample(problem, mean, std, count, rng_stream(seed, _SAMPLES, obs.rate), fidelity)


def recover(problem: SandboxProblem, obs: Observation, p: int, seed: int, fidelity: Fidelity | None = None) -> np.ndarray:
    """Image recovery: posterior mean for ``p == 0``, else the average of ``p``
    fresh posterior samples drawn from a stream disjoint from the bound samples."""
    if p < 0:
        raise ValueError(f"p must be >= 0, got {p}")
    mean, std = posterior_law(problem, obs)
    if p == 0:
        return mean
    draws = _sample(problem, mean, std, p, rng_stream(seed, _RECOVERY, obs.rate), fidelity)
    return draws.mean(axis=0)


MAX_SHIFT_LEVEL = 10


def shifted_problem(problem: SandboxProblem, level: int) -> SandboxProblem:
    """Shift level ``l``: noise std times ``1 + 0.05 l``, prior mean plus ``0.02 l`` prior stds."""
    if not (isinstance(level, (int, np.integer)) and 0 <= level <= MAX_SHIFT_LEVEL):
        raise ValueError(f"shift level must be an integer in 0..{MAX_SHIFT_LEVEL}, got {level!r}")
    if level == 0:
        return problem
    return problem.replace(
        noise_std=problem.noise_std * (1 + 0.05 * level),
        prior_mean=problem.prior_mean + 0.02 * level * problem.prior_std,
    )
