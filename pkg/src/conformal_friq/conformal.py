"""Split-conformal calibration of one-sided FRIQ bounds.

For a higher-preferred metric the prediction set is ``[z_hat - lam, inf)``,
for a lower-preferred one ``(-inf, z_hat + lam]``; both are closed on the
finite side.  Coverage fails exactly when the signed residual (``z_hat - z``
for HP, ``z - z_hat`` for LP) exceeds ``lam``, so the calibrated

    lam_hat = inf { lam : miscoverage(lam) <= alpha - (1 - alpha) / n }

is an order statistic of the residuals.  :func:`calibrate_lambda` computes it
directly and :func:`calibrate_lambda_bisect` gets the same value by bisection.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .metrics import Orientation
from .predictors import PredictorModel, Spline

SCHEMA_VERSION = 1


class CalibrationInfeasible(ValueError):
    """``alpha - (1 - alpha) / n < 0``: the calibration set is too small for alpha."""

    def __init__(self, n: int, alpha: float):
        self.n = n
        self.alpha = alpha
        self.min_n = min_calibration_size(alpha)
        super().__init__(f"alpha={alpha} needs at least n={self.min_n} calibration records, got n={n}")


def _frac(alpha) -> Fraction:
    return Fraction(repr(float(alpha)))


def min_calibration_size(alpha: float) -> int:
    """Smallest ``n`` with ``alpha - (1 - alpha) / n >= 0``, i.e. ``ceil((1 - alpha) / alpha)``."""
    a = _frac(alpha)
    return max(1, math.ceil((1 - a) / a))


def allowed_violations(n: int, alpha: float) -> int:
    """``floor(n * (alpha - (1 - alpha) / n))``, computed exactly; negative means infeasible."""
    a = _frac(alpha)
    return math.floor(a * n - (1 - a))


def residuals(z_hat, z, orientation) -> np.ndarray:
    """Signed residual that a bound must absorb: ``z_hat - z`` (HP) or ``z - z_hat`` (LP)."""
    z_hat = np.asarray(z_hat, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    return z_hat - z if Orientation(orientation) is Orientation.HP else z - z_hat


def bound_value(z_hat, lam, orientation):
    """The finite interval endpoint: ``z_hat - lam`` (HP) or ``z_hat + lam`` (LP)."""
    z_hat = np.asarray(z_hat, dtype=np.float64)
    out = z_hat - lam if Orientation(orientation) is Orientation.HP else z_hat + lam
    return float(out) if out.ndim == 0 else out


def covers(z_hat, z, lam, orientation):
    """Whether ``z`` lies in the lambda prediction set of ``z_hat`` (endpoint included)."""
    out = residuals(z_hat, z, orientation) <= lam
    return bool(out) if np.ndim(out) == 0 else out


def empirical_miscoverage(lam, z_hat, z, orientation) -> float:
    r = np.atleast_1d(residuals(z_hat, z, orientation))
    if r.size == 0:
        raise ValueError("empirical_miscoverage needs at least one record")
    return float(np.mean(r > lam))


def _check_records(z_hat, z):
    z_hat = np.atleast_1d(np.asarray(z_hat, dtype=np.float64))
    z = np.atleast_1d(np.asarray(z, dtype=np.float64))
    if z_hat.shape != z.shape or z.ndim != 1:
        raise ValueError(f"z_hat and z must be 1-D of equal length, got {z_hat.shape} and {z.shape}")
    if z.size == 0:
        raise ValueError("calibration needs at least one record")
    if not (np.all(np.isfinite(z_hat)) and np.all(np.isfinite(z))):
        raise ValueError("calibration records must be finite")
    return z_hat, z


def calibrate_lambda(z_hat, z, alpha: float, orientation) -> float:
    """Order-statistic calibration: the ``(k + 1)``-th largest residual, ``k`` = allowed violations."""
    if not 0 < alpha < 1:
        raise ValueError(f"alpha must be in (0, 1), got {alpha}")
    z_hat, z = _check_records(z_hat, z)
    n = z.size
    k = allowed_violations(n, alpha)
    if k < 0:
        raise CalibrationInfeasible(n, alpha)
    r = residuals(z_hat, z, orientation)
    # (k + 1)-th largest == (n - k)-th smallest
    return float(np.partition(r, n - k - 1)[n - k - 1])


def calibrate_lambda_bisect(z_hat, z, alpha: float, orientation, tol: float = 1e-12, lo=None, hi=None) -> float:
    """Bisection on the monotone miscoverage; returns the feasible end of the final bracket."""
    z_hat, z = _check_records(z_hat, z)
    n = z.size
    k = allowed_violations(n, alpha)
    if k < 0:
        raise CalibrationInfeasible(n, alpha)
    target = float(_frac(alpha) - (1 - _frac(alpha)) / n)
    r = residuals(z_hat, z, orientation)
    lo = float(r.min()) - 1.0 if lo is None else lo
    hi = float(r.max()) + 1.0 if hi is None else hi

    def count_ok(lam):
        return np.count_nonzero(r > lam) <= k

    if count_ok(lo):
        return lo
    if not count_ok(hi):
        raise ValueError("upper end of the search range is not feasible")
    while hi - lo > tol * max(1.0, abs(hi)):
        mid = 0.5 * (lo + hi)
        if mid in (lo, hi):
            break
        if count_ok(mid):
            hi = mid
        else:
            lo = mid
    assert empirical_miscoverage(hi, z_hat, z, orientation) <= target + 1e-15
    return hi


def empirical_coverage(lam, z_hat, z, orientation) -> float:
    """Fraction of records whose true value lies inside the calibrated set."""
    r = np.atleast_1d(residuals(z_hat, z, orientation))
    if r.size == 0:
        raise ValueError("empirical_coverage needs at least one record")
    return float(np.mean(r <= lam))


@dataclass(frozen=True)
class BoundModel:
    """A calibrated bounder: predictor plus ``lambda_hat``."""

    metric: str
    orientation: Orientation
    alpha: float
    predictor: PredictorModel
    lambda_hat: float
    n_cal: int
    rate: int | None = None
    dataset_fingerprint: str = ""

    @property
    def c(self) -> int:
        return self.predictor.c

    def predict(self, u) -> np.ndarray:
        return self.predictor.predict(u)

    def bound(self, u):
        return bound_value(self.predict(u), self.lambda_hat, self.orientation)

    def coverage(self, u, z) -> float:
        return empirical_coverage(self.lambda_hat, self.predict(u), z, self.orientation)

    # -- persistence --------------------------------------------------------

    def to_dict(self) -> dict:
        pred = self.predictor
        block = {"kind": pred.kind, "knots": None, "weights": None, "bias": None, "gamma": None}
        if pred.spline is not None:
            sp = pred.spline
            block.update(knots=[sp.t1, sp.t2], weights=list(sp.weights), bias=sp.bias, gamma=sp.gamma)
        return {
            "schema_version": SCHEMA_VERSION,
            "metric": self.metric,
            "orientation": Orientation(self.orientation).value,
            "alpha": self.alpha,
            "c": pred.c,
            "predictor": block,
            "lambda_hat": self.lambda_hat,
            "n_cal": self.n_cal,
            "rate": self.rate,
            "dataset_fingerprint": self.dataset_fingerprint,
        }

    def dumps(self) -> str:
        # Python float repr is the shortest string that round-trips exactly
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.dumps())

    @classmethod
    def from_dict(cls, d: dict) -> "BoundModel":
        version = d.get("schema_version")
        if version != SCHEMA_VERSION:
            raise ValueError(f"unsupported BoundModel schema_version {version!r} (expected {SCHEMA_VERSION})")
        block = d["predictor"]
        spline = None
        if block["kind"] == "regression":
            t1, t2 = block["knots"]
            spline = Spline(t1=float(t1), t2=float(t2), weights=tuple(float(w) for w in block["weights"]), bias=float(block["bias"]), gamma=float(block["gamma"]))
        orientation = Orientation(d["orientation"])
        predictor = PredictorModel(block["kind"], float(d["alpha"]), orientation, int(d["c"]), spline)
        return cls(
            metric=d["metric"],
            orientation=orientation,
            alpha=float(d["alpha"]),
            predictor=predictor,
            lambda_hat=float(d["lambda_hat"]),
            n_cal=int(d["n_cal"]),
            rate=None if d.get("rate") is None else int(d["rate"]),
            dataset_fingerprint=d.get("dataset_fingerprint", ""),
        )

    @classmethod
    def loads(cls, text: str) -> "BoundModel":
        return cls.from_dict(json.loads(text))

    @classmethod
    def load(cls, path) -> "BoundModel":
        with open(path) as fh:
            return cls.loads(fh.read())


def calibrate(predictor: PredictorModel, u_cal, z_cal, metric: str, rate=None, dataset_fingerprint: str = "") -> BoundModel:
    """Calibrate ``lambda_hat`` for a fixed predictor on ``(u_cal, z_cal)``."""
    z_cal = np.asarray(z_cal, dtype=np.float64)
    z_hat = np.broadcast_to(predictor.predict(u_cal), z_cal.shape)
    lam = calibrate_lambda(z_hat, z_cal, predictor.alpha, predictor.orientation)
    return BoundModel(
        metric=metric,
        orientation=predictor.orientation,
        alpha=predictor.alpha,
        predictor=predictor,
        lambda_hat=lam,
        n_cal=int(z_cal.size),
        rate=rate,
        dataset_fingerprint=dataset_fingerprint,
    )


__all__ = [
    "BoundModel",
    "CalibrationInfeasible",
    "allowed_violations",
    "bound_value",
    "calibrate",
    "calibrate_lambda",
    "calibrate_lambda_bisect",
    "covers",
    "empirical_coverage",
    "empirical_miscoverage",
    "min_calibration_size",
    "residuals",
]
