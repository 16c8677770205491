"""Full-reference image quality (FRIQ) metrics.

Images are plain ``numpy`` arrays whose last two axes are (height, width);
leading axes are treated as a batch, so ``psnr(recovery, samples)`` with
``samples`` of shape ``(c, H, W)`` returns ``c`` values.  Both images of a
pair share one ``data_range`` (the peak value used by PSNR and SSIM).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable

import numpy as np

PSNR_MAX = 300.0

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


class Orientation(str, enum.Enum):
    """Whether a larger metric value means a better image (HP) or a worse one (LP)."""

    HP = "HP"
    LP = "LP"


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"images must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-2:] != b.shape[-2:]:
        raise ValueError(f"image shapes differ: {a.shape[-2:]} vs {b.shape[-2:]}")
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ValueError(f"batch shapes do not broadcast: {a.shape} vs {b.shape}") from exc
    return a, b


def _scalar(x):
    return float(x) if np.ndim(x) == 0 else x


def mse(a, b):
    """Mean squared error over the last two axes."""
    a, b = _check_pair(a, b)
    return _scalar(np.mean((a - b) ** 2, axis=(-2, -1)))


def psnr(a, b, data_range: float = 1.0, max_value: float = PSNR_MAX):
    """Peak signal-to-noise ratio in dB, ``10 log10(L^2 / MSE)``.

    Identical images saturate at ``max_value`` instead of returning ``inf``.
    """
    if data_range <= 0:
        raise ValueError(f"data_range must be positive, got {data_range}")
    err = np.asarray(mse(a, b))
    with np.errstate(divide="ignore"):
        val = 10.0 * np.log10(data_range**2 / err)
    val = np.where(err > 0, np.minimum(val, max_value), max_value)
    return _scalar(val)


@lru_cache(maxsize=None)
def _window_matrix(n: int, size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    # Row i applies the normalized 1-D Gaussian to samples i .. i+size-1 (valid region).
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2.0 * sigma**2))
    g /= g.sum()
    m = np.zeros((n - size + 1, n))
    for i in range(n - size + 1):
        m[i, i : i + size] = g
    m.setflags(write=False)
    return m


def _filter(x, gh, gw):
    return gh @ x @ gw.T


def ssim_map(a, b, data_range: float = 1.0):
    """Local SSIM at every valid position of an 11x11 Gaussian window (sigma 1.5)."""
    a, b = _check_pair(a, b)
    h, w = a.shape[-2:]
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ValueError(f"image {h}x{w} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    if data_range <= 0:
        raise ValueError(f"data_range must be positive, got {data_range}")
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    gh, gw = _window_matrix(h), _window_matrix(w)
    mu_a = _filter(a, gh, gw)
    mu_b = _filter(b, gh, gw)
    var_a = _filter(a * a, gh, gw) - mu_a**2
    var_b = _filter(b * b, gh, gw) - mu_b**2
    cov = _filter(a * b, gh, gw) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a, b, data_range: float = 1.0):
    """Mean structural similarity over all valid window positions."""
    return _scalar(np.mean(ssim_map(a, b, data_range), axis=(-2, -1)))


@dataclass(frozen=True)
class MetricSpec:
    """A named FRIQ metric with its orientation.

    ``kernel(recovery, reference, data_range)`` must broadcast over leading
    batch axes the way :func:`psnr` and :func:`ssim` do.
    """

    name: str
    orientation: Orientation
    kernel: Callable

    def __call__(self, a, b, data_range: float = 1.0):
        return self.kernel(a, b, data_range)


def _mse_kernel(a, b, data_range=1.0):
    return mse(a, b)


METRICS: dict[str, MetricSpec] = {
    "psnr": MetricSpec("psnr", Orientation.HP, psnr),
    "ssim": MetricSpec("ssim", Orientation.HP, ssim),
    # Lower-preferred; stands in for LPIPS/DISTS when exercising LP code paths.
    "mse": MetricSpec("mse", Orientation.LP, _mse_kernel),
}


def register_metric(spec: MetricSpec, overwrite: bool = False) -> None:
    """Add a metric (e.g. a learned LP metric) to the name registry."""
    if spec.name in METRICS and not overwrite:
        raise ValueError(f"metric {spec.name!r} is already registered")
    METRICS[spec.name] = spec


def get_metric(name: str) -> MetricSpec:
    try:
        return METRICS[name]
    except KeyError:
        raise ValueError(f"unknown metric {name!r}; known: {sorted(METRICS)}") from None
