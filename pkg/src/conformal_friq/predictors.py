"""FRIQ estimators ``z_hat = f(u)`` feeding the conformal calibration.

Three families are supported:

``non_adaptive``
    ``f(u) = 0``; the bound is a constant learned from calibration data only.
``quantile``
    the alpha empirical quantile of the posterior FRIQs (``1 - alpha`` for
    lower-preferred metrics).
``regression``
    a linear spline in the sorted posterior FRIQs, fitted by ridge-penalised
    quantile regression on a training split that is disjoint from
    calibration.

Empirical quantile convention: sort ascending and take the order statistic
at 1-based index ``k = ceil(alpha * c)`` (``ceil((1 - alpha) * c)`` for LP
metrics), clamped to ``[1, c]``.  No interpolation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .metrics import MetricSpec, Orientation
from .qr_solver import DEFAULT_GAMMA_GRID, QRProblem, cross_validate, fit

KINDS = ("non_adaptive", "quantile", "regression")
KNOT_TIE_EPS = 1e-9


def normalize_kind(kind: str) -> str:
    """Accept CLI spellings such as ``nonadaptive``."""
    k = kind.replace("-", "_").lower()
    if k == "nonadaptive":
        k = "non_adaptive"
    if k not in KINDS:
        raise ValueError(f"unknown bound kind {kind!r}; expected one of {KINDS}")
    return k


def _exact(alpha) -> Fraction:
    # interpret the float through its shortest decimal repr, so 0.05 * 20 is exactly 1
    return Fraction(repr(float(alpha)))


def order_stat_index(level: float, c: int) -> int:
    """1-based index ``clamp(ceil(level * c), 1, c)``."""
    return min(c, max(1, math.ceil(_exact(level) * c)))


def posterior_friqs(metric: MetricSpec, recovery, samples, data_range: float = 1.0) -> np.ndarray:
    """``u_j = m(recovery, sample_j)`` for every posterior sample, order preserved."""
    recovery = np.asarray(recovery, dtype=np.float64)
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim == 2:
        samples = samples[None]
    if samples.shape[-2:] != recovery.shape:
        raise ValueError(f"sample shape {samples.shape[-2:]} differs from recovery shape {recovery.shape}")
    return np.atleast_1d(np.asarray(metric(recovery, samples, data_range), dtype=np.float64))


def empirical_quantile(alpha: float, values, orientation=Orientation.HP):
    """Order-statistic quantile along the last axis.

    HP metrics use level ``alpha``, LP metrics ``1 - alpha``.  Returns a
    float for 1-D input and an array for batched ``(n, c)`` input.
    """
    if not 0 < alpha < 1:
        raise ValueError(f"alpha must be in (0, 1), got {alpha}")
    v = np.asarray(values, dtype=np.float64)
    if v.ndim == 0 or v.shape[-1] == 0:
        raise ValueError("empirical_quantile needs at least one value")
    c = v.shape[-1]
    level = alpha if Orientation(orientation) is Orientation.HP else 1 - _exact(alpha)
    k = order_stat_index(level, c)
    out = np.partition(v, k - 1, axis=-1)[..., k - 1]
    return float(out) if out.ndim == 0 else out


def nonadaptive_predict(u=None):
    """Always zero; with a batch of features returns one zero per row."""
    if u is None:
        return 0.0
    u = np.asarray(u)
    return 0.0 if u.ndim <= 1 else np.zeros(u.shape[0])


def spline_featurize(u, t1: float, t2: float) -> np.ndarray:
    """Truncated power basis ``[s, (s - t1)+, (s - t2)+]`` of the ascending-sorted features."""
    if not t1 < t2:
        raise ValueError(f"knots must satisfy t1 < t2, got {t1}, {t2}")
    s = np.sort(np.asarray(u, dtype=np.float64), axis=-1)
    return np.concatenate([s, np.maximum(s - t1, 0.0), np.maximum(s - t2, 0.0)], axis=-1)


def choose_knots(train_features) -> tuple[float, float]:
    """Knots at the 1/3 and 2/3 empirical quantiles of the per-instance mean feature."""
    u = np.asarray(train_features, dtype=np.float64)
    if u.ndim != 2 or u.shape[0] < 3:
        raise ValueError("choose_knots needs at least 3 training feature vectors")
    means = np.sort(u.mean(axis=1))
    n = len(means)
    t1 = float(means[order_stat_index(1 / 3, n) - 1])
    t2 = float(means[order_stat_index(2 / 3, n) - 1])
    if not t2 > t1:
        t2 = t1 + KNOT_TIE_EPS
    return t1, t2


@dataclass(frozen=True)
class Spline:
    t1: float
    t2: float
    weights: tuple
    bias: float
    gamma: float

    def __post_init__(self):
        if not self.t1 < self.t2:
            raise ValueError("spline knots must satisfy t1 < t2")


@dataclass(frozen=True)
class PredictorModel:
    kind: str
    alpha: float
    orientation: Orientation
    c: int
    spline: Spline | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", normalize_kind(self.kind))
        object.__setattr__(self, "orientation", Orientation(self.orientation))
        if not 0 < self.alpha < 1:
            raise ValueError(f"alpha must be in (0, 1), got {self.alpha}")
        if (self.kind == "regression") != (self.spline is not None):
            raise ValueError("a spline is required for regression predictors and only for them")
        if self.spline is not None and len(self.spline.weights) != 3 * self.c:
            raise ValueError(f"regression predictor needs {3 * self.c} weights, got {len(self.spline.weights)}")

    def predict(self, u) -> np.ndarray:
        """Estimates for a batch ``(n, c)`` of feature vectors (or one vector)."""
        u = np.asarray(u, dtype=np.float64)
        if self.kind == "non_adaptive":
            return nonadaptive_predict(u)
        if u.shape[-1] != self.c:
            raise ValueError(f"predictor was built for c={self.c} features, got {u.shape[-1]}")
        if self.kind == "quantile":
            return empirical_quantile(self.alpha, u, self.orientation)
        return regression_predict(self, u)


def regression_predict(model: PredictorModel, u):
    """``psi(u) . w + b`` for one feature vector or a batch of them."""
    if model.kind != "regression":
        raise ValueError("regression_predict needs a regression model")
    u = np.asarray(u, dtype=np.float64)
    if u.shape[-1] != model.c:
        raise ValueError(f"expected {model.c} features, got {u.shape[-1]}")
    sp = model.spline
    out = spline_featurize(u, sp.t1, sp.t2) @ np.asarray(sp.weights) + sp.bias
    return float(out) if np.ndim(out) == 0 else out


def qr_level(alpha: float, orientation) -> float:
    """Quantile level actually fitted: alpha for HP, 1 - alpha for LP."""
    return alpha if Orientation(orientation) is Orientation.HP else float(1 - _exact(alpha))


def train_regression(
    u_train,
    z_train,
    alpha: float,
    orientation,
    gamma_grid=DEFAULT_GAMMA_GRID,
    seed: int = 0,
    gamma: float | None = None,
) -> PredictorModel:
    """Fit the spline predictor; ``gamma`` skips cross-validation when given."""
    u_train = np.asarray(u_train, dtype=np.float64)
    z_train = np.asarray(z_train, dtype=np.float64)
    c = u_train.shape[1]
    t1, t2 = choose_knots(u_train)
    X = spline_featurize(u_train, t1, t2)
    q = qr_level(alpha, orientation)
    if gamma is None:
        gamma, _ = cross_validate(X, z_train, q, gamma_grid, seed=seed)
    sol = fit(QRProblem(X, z_train, q, gamma))
    spline = Spline(t1=t1, t2=t2, weights=tuple(float(w) for w in sol.w), bias=float(sol.b), gamma=float(gamma))
    return PredictorModel("regression", alpha, orientation, c, spline)


def build_predictor(kind: str, alpha: float, orientation, c: int, u_train=None, z_train=None, **kwargs) -> PredictorModel:
    kind = normalize_kind(kind)
    if kind == "regression":
        if u_train is None or z_train is None:
            raise ValueError("regression predictors need training features and targets")
        return train_regression(np.asarray(u_train)[:, :c], z_train, alpha, orientation, **kwargs)
    return PredictorModel(kind, alpha, orientation, c)
