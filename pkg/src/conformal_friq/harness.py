"""Monte Carlo studies of conformal FRIQ bounds.

Every study works on a :class:`~conformal_friq.dataset.FriqDataset`.  The
first ``n_train`` instances are reserved for fitting regression predictors;
the rest form the pool that each trial splits at random into calibration and
test folds.  Trial ``t`` draws its split from ``rng_stream(seed, t)``, so all
bound kinds see the same splits and results do not depend on ``threads``.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy import stats

from .conformal import (
    CalibrationInfeasible,
    allowed_violations,
    bound_value,
    calibrate_lambda,
    residuals,
)
from .dataset import FriqDataset, generate_dataset
from .metrics import Orientation, get_metric
from .predictors import KINDS, build_predictor, normalize_kind
from .qr_solver import DEFAULT_GAMMA_GRID
from .sandbox import MAX_SHIFT_LEVEL, SandboxProblem, rng_stream, shifted_problem

DEFAULT_C_VALUES = (1, 2, 4, 8, 16, 32)
DEFAULT_ALPHAS = (0.05, 0.1, 0.25, 0.5)
DEFAULT_FRACTIONS = (0.1, 0.25, 0.5, 0.75, 0.9, 0.95)
MULTIROUND_RATES = (16, 8, 4, 2)


class InvariantViolation(AssertionError):
    """A property that must hold in every trial did not."""


class PearsonResult(NamedTuple):
    r: float
    constant: bool


def pearson(xs, ys) -> PearsonResult:
    """Sample Pearson correlation; ``(0.0, True)`` when either input is constant."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError(f"pearson needs two 1-D arrays of equal length, got {x.shape} and {y.shape}")
    if x.size < 2:
        raise ValueError("pearson needs at least two points")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0.0 or syy == 0.0 or np.ptp(x) == 0 or np.ptp(y) == 0:
        return PearsonResult(0.0, True)
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return PearsonResult(max(-1.0, min(1.0, r)), False)


def mean_se(values) -> tuple[float, float]:
    """Mean and Monte Carlo standard error."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return math.nan, math.nan
    se = float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else 0.0
    return float(v.mean()), se


def _map(fn, items, threads: int):
    items = list(items)
    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, items))
    return [fn(i) for i in items]


@dataclass
class TrialReport:
    trial_id: int
    coverage: float
    mcb: float
    mad: float
    pearson_r: float
    pearson_constant: bool
    lambda_hat: float
    cal_miscoverage: float
    per_sample: np.ndarray | None = field(default=None, repr=False)  # columns z, z_hat, beta


def summarize(reports) -> dict:
    """Mean and SE of each per-trial statistic."""
    out = {"trials": len(reports)}
    for key in ("coverage", "mcb", "mad", "pearson_r", "lambda_hat"):
        out[key + "_mean"], out[key + "_se"] = mean_se([getattr(r, key) for r in reports])
    out["pearson_constant"] = all(r.pearson_constant for r in reports)
    return out


def trial_split(n_pool: int, n_cal: int, seed: int, trial: int, n_test: int | None = None):
    """Random calibration/test index split of ``range(n_pool)`` for one trial."""
    if not 1 <= n_cal < n_pool:
        raise ValueError(f"n_cal={n_cal} must lie in 1..{n_pool - 1}")
    perm = rng_stream(seed, trial).permutation(n_pool)
    cal = perm[:n_cal]
    test = perm[n_cal:] if n_test is None else perm[n_cal : n_cal + n_test]
    return cal, test


def cal_size(n_pool: int, split_fraction: float) -> int:
    if not 0 < split_fraction < 1:
        raise ValueError(f"split_fraction must be in (0, 1), got {split_fraction}")
    return min(n_pool - 1, max(1, int(round(split_fraction * n_pool))))


def _evaluate_trial(trial, z_hat, z, orientation, alpha, cal, test, keep_per_sample):
    lam = calibrate_lambda(z_hat[cal], z[cal], alpha, orientation)
    r_cal = residuals(z_hat[cal], z[cal], orientation)
    viol = int(np.count_nonzero(r_cal > lam))
    if viol > allowed_violations(len(cal), alpha):
        raise InvariantViolation(f"trial {trial}: {viol} calibration violations exceed the allowed count")
    beta = bound_value(z_hat[test], lam, orientation)
    zt = z[test]
    covered = residuals(z_hat[test], zt, orientation) <= lam
    pr = pearson(beta, zt) if len(zt) >= 2 else PearsonResult(math.nan, False)
    return TrialReport(
        trial_id=trial,
        coverage=float(covered.mean()),
        mcb=float(beta.mean()),
        mad=float(np.mean(np.abs(zt - beta))),
        pearson_r=pr.r,
        pearson_constant=pr.constant,
        lambda_hat=lam,
        cal_miscoverage=viol / len(cal),
        per_sample=np.column_stack([zt, z_hat[test], beta]) if keep_per_sample else None,
    )


def _split_dataset(dataset: FriqDataset, n_train: int):
    n = len(dataset)
    if not 0 <= n_train < n:
        raise ValueError(f"n_train={n_train} leaves no pool in a dataset of {n}")
    return np.arange(n_train), np.arange(n_train, n)


def pool_predictions(
    dataset: FriqDataset,
    bound_kind: str,
    metric: str,
    alpha: float,
    c: int,
    rate: int = 1,
    n_train: int = 1000,
    gamma_grid=DEFAULT_GAMMA_GRID,
    seed: int = 0,
    train_idx=None,
    pool_idx=None,
):
    """Fit (if needed) the predictor on the training split and score the pool.

    Returns ``(z_hat_pool, z_pool, predictor)``.
    """
    kind = normalize_kind(bound_kind)
    orientation = get_metric(metric).orientation
    if train_idx is None or pool_idx is None:
        train_idx, pool_idx = _split_dataset(dataset, n_train)
    u = dataset.features(metric, rate, c)
    z = dataset.targets(metric, rate)
    if kind == "regression":
        if len(train_idx) < 5:
            raise ValueError("regression bounds need at least 5 training instances")
        predictor = build_predictor(kind, alpha, orientation, c, u[train_idx], z[train_idx], gamma_grid=gamma_grid, seed=seed)
    else:
        predictor = build_predictor(kind, alpha, orientation, c)
    z_hat = np.broadcast_to(predictor.predict(u[pool_idx]), (len(pool_idx),)).astype(np.float64)
    return z_hat, z[pool_idx], predictor


def run_trials(z_hat, z, orientation, alpha, T, n_cal, seed, threads=1, keep_per_sample=False, n_test=None) -> list[TrialReport]:
    """``T`` calibrate-then-test trials on fixed pool predictions."""
    z_hat = np.asarray(z_hat, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if allowed_violations(n_cal, alpha) < 0:
        raise CalibrationInfeasible(n_cal, alpha)

    def one(t):
        cal, test = trial_split(len(z), n_cal, seed, t, n_test)
        return _evaluate_trial(t, z_hat, z, Orientation(orientation), alpha, cal, test, keep_per_sample and t == 0)

    return _map(one, range(T), threads)


def run_coverage_study(
    dataset: FriqDataset,
    bound_kind: str,
    metric: str,
    alpha: float = 0.05,
    c: int = 32,
    T: int = 1000,
    split_fraction: float = 0.7,
    seed: int = 0,
    rate: int = 1,
    n_train: int = 1000,
    threads: int = 1,
    gamma_grid=DEFAULT_GAMMA_GRID,
    keep_per_sample: bool = False,
) -> list[TrialReport]:
    """Repeated random calibration/test splits of the non-training pool.

    The predictor is trained once; each trial recalibrates ``lambda_hat``.
    ``keep_per_sample`` stores the (z, z_hat, beta) scatter of trial 0.
    """
    z_hat, z, _ = pool_predictions(dataset, bound_kind, metric, alpha, c, rate, n_train, gamma_grid, seed)
    n_cal = cal_size(len(z), split_fraction)
    orientation = get_metric(metric).orientation
    return run_trials(z_hat, z, orientation, alpha, T, n_cal, seed, threads, keep_per_sample)


def summary_row(base: dict, reports) -> dict:
    row = dict(base)
    row.update(summarize(reports))
    row["error"] = ""
    return row


def _error_row(base: dict, exc: Exception) -> dict:
    row = dict(base)
    row["error"] = f"{type(exc).__name__}: {exc}"
    return row


def sweep_c(
    dataset: FriqDataset,
    bound_kinds=KINDS,
    metric: str = "psnr",
    alpha: float = 0.05,
    c_values=DEFAULT_C_VALUES,
    T: int = 1000,
    seed: int = 0,
    rate: int = 1,
    n_train: int = 1000,
    split_fraction: float = 0.7,
    threads: int = 1,
    gamma_grid=DEFAULT_GAMMA_GRID,
) -> list[dict]:
    """Coverage, MCB and MAD for every (bound kind, c)."""
    for c in c_values:
        if not 1 <= c <= dataset.c:
            raise ValueError(f"c={c} exceeds the {dataset.c} stored posterior samples")
    rows = []
    cache = {}
    for kind in map(normalize_kind, bound_kinds):
        for c in c_values:
            base = {"study": "sweep-c", "bound": kind, "metric": metric, "alpha": alpha, "c": c, "rate": rate}
            key = (kind, None if kind == "non_adaptive" else c)
            if key not in cache:
                cache[key] = run_coverage_study(dataset, kind, metric, alpha, c, T, split_fraction, seed, rate, n_train, threads, gamma_grid)
            rows.append(summary_row(base, cache[key]))
    return rows


def sweep_alpha(
    dataset: FriqDataset,
    bound_kinds=KINDS,
    metric: str = "psnr",
    alpha_values=DEFAULT_ALPHAS,
    T: int = 1000,
    seed: int = 0,
    c: int = 32,
    rate: int = 1,
    n_train: int = 1000,
    split_fraction: float = 0.7,
    threads: int = 1,
    gamma_grid=DEFAULT_GAMMA_GRID,
) -> list[dict]:
    """Coverage and MAD per (bound kind, alpha); infeasible cells carry an error entry."""
    rows = []
    for kind in map(normalize_kind, bound_kinds):
        for alpha in alpha_values:
            base = {"study": "sweep-alpha", "bound": kind, "metric": metric, "alpha": alpha, "c": c, "rate": rate}
            try:
                reports = run_coverage_study(dataset, kind, metric, alpha, c, T, split_fraction, seed, rate, n_train, threads, gamma_grid)
            except CalibrationInfeasible as exc:
                rows.append(_error_row(base, exc))
                continue
            rows.append(summary_row(base, reports))
    return rows


def sweep_train_fraction(
    dataset: FriqDataset,
    metric: str = "psnr",
    alpha: float = 0.05,
    c: int = 32,
    fractions=DEFAULT_FRACTIONS,
    T: int = 1000,
    seed: int = 0,
    bound_kinds=KINDS,
    n_test: int = 900,
    rate: int = 1,
    threads: int = 1,
    gamma_grid=DEFAULT_GAMMA_GRID,
) -> list[dict]:
    """Trade training against calibration data with the test fold size fixed.

    With ``N`` instances, ``n_train = round(f * (N - n_test))`` and the
    remaining ``N - n_train - n_test`` calibrate.  Non-adaptive and quantile
    bounds ignore the training split.
    """
    n = len(dataset)
    if not 0 < n_test < n:
        raise ValueError(f"n_test={n_test} must be smaller than the dataset ({n})")
    rows = []
    for frac in fractions:
        if not 0 < frac < 1:
            raise ValueError(f"fractions must lie in (0, 1), got {frac}")
        n_train = int(round(frac * (n - n_test)))
        n_cal = n - n_test - n_train
        train_idx, pool_idx = np.arange(n_train), np.arange(n_train, n)
        for kind in map(normalize_kind, bound_kinds):
            base = {"study": "sweep-train", "bound": kind, "metric": metric, "alpha": alpha, "c": c, "fraction": frac, "n_train": n_train, "n_cal": n_cal}
            try:
                if n_cal < 1:
                    raise CalibrationInfeasible(max(n_cal, 0), alpha)
                z_hat, z, _ = pool_predictions(dataset, kind, metric, alpha, c, rate, gamma_grid=gamma_grid, seed=seed, train_idx=train_idx, pool_idx=pool_idx)
                reports = run_trials(z_hat, z, get_metric(metric).orientation, alpha, T, n_cal, seed, threads, n_test=n_test)
            except (CalibrationInfeasible, ValueError) as exc:
                rows.append(_error_row(base, exc))
                continue
            rows.append(summary_row(base, reports))
    return rows


# -- multi-round acquisition -------------------------------------------------


def passes(beta, tau, orientation):
    """Stopping rule: HP bounds must reach ``tau`` from above, LP bounds from below."""
    return beta >= tau if Orientation(orientation) is Orientation.HP else beta <= tau


@dataclass
class MultiRoundTrial:
    trial_id: int
    avg_acceleration: float
    acceptance_coverage: float
    per_rate_coverage: dict
    accepted_fraction: dict


@dataclass
class MultiRoundReport:
    bound: str
    metric: str
    tau: float
    trials: list = field(repr=False)
    avg_acceleration: tuple = (math.nan, math.nan)
    acceptance_coverage: tuple = (math.nan, math.nan)
    per_rate_coverage: dict = field(default_factory=dict)
    accepted_fraction: dict = field(default_factory=dict)
    per_slice: list = field(default_factory=list, repr=False)


def nonadaptive_tau(dataset: FriqDataset, metric: str, alpha: float, T: int, seed: int, n_train: int = 1000, split_fraction: float = 0.7, rate: int = 2) -> float:
    """Least demanding threshold that every trial's non-adaptive rate-``rate`` bound still meets.

    That is the minimum (HP) or maximum (LP) over trials of the non-adaptive
    bound at ``rate``.
    """
    orientation = get_metric(metric).orientation
    _, pool_idx = _split_dataset(dataset, n_train)
    z = dataset.targets(metric, rate)[pool_idx]
    n_cal = cal_size(len(z), split_fraction)
    zero = np.zeros_like(z)
    betas = []
    for t in range(T):
        cal, _ = trial_split(len(z), n_cal, seed, t)
        betas.append(bound_value(0.0, calibrate_lambda(zero[cal], z[cal], alpha, orientation), orientation))
    return float(min(betas) if orientation is Orientation.HP else max(betas))


def run_multiround(
    dataset: FriqDataset,
    metric: str = "psnr",
    alpha: float = 0.05,
    tau: float | None = None,
    c: int = 32,
    T: int = 1000,
    seed: int = 0,
    bound_kinds=("non_adaptive", "quantile"),
    rates=MULTIROUND_RATES,
    n_train: int = 1000,
    split_fraction: float = 0.7,
    threads: int = 1,
    gamma_grid=DEFAULT_GAMMA_GRID,
) -> dict:
    """Collect measurements at ``R = 16, 8, 4, 2`` until the bound passes ``tau``.

    Each rate has its own calibrated bound.  Slices that never pass are
    accepted fully sampled (``R = 1``); their coverage is evaluated with the
    ``R = 1`` bound when the dataset holds that rate and counted as covered
    otherwise.  ``tau=None`` selects :func:`nonadaptive_tau`.
    """
    rates = tuple(int(r) for r in rates)
    for r in rates:
        if r not in dataset.rates:
            raise KeyError(f"no data (and hence no bound model) for rate {r}")
    orientation = get_metric(metric).orientation
    if tau is None:
        tau = nonadaptive_tau(dataset, metric, alpha, T, seed, n_train, split_fraction, rate=rates[-1])
    all_rates = rates + ((1,) if 1 in dataset.rates and 1 not in rates else ())
    train_idx, pool_idx = _split_dataset(dataset, n_train)
    n_pool = len(pool_idx)
    n_cal = cal_size(n_pool, split_fraction)
    out = {}
    for kind in map(normalize_kind, bound_kinds):
        preds = {}
        for r in all_rates:
            z_hat, z, _ = pool_predictions(dataset, kind, metric, alpha, c, r, gamma_grid=gamma_grid, seed=seed, train_idx=train_idx, pool_idx=pool_idx)
            preds[r] = (z_hat, z)

        def one(t, preds=preds, kind=kind):
            cal, test = trial_split(n_pool, n_cal, seed, t)
            beta, cov = {}, {}
            for r, (z_hat, z) in preds.items():
                lam = calibrate_lambda(z_hat[cal], z[cal], alpha, orientation)
                beta[r] = bound_value(z_hat[test], lam, orientation)
                cov[r] = residuals(z_hat[test], z[test], orientation) <= lam
            accepted = np.ones(len(test), dtype=np.int64)
            done = np.zeros(len(test), dtype=bool)
            for r in rates:
                hit = ~done & passes(beta[r], tau, orientation)
                accepted[hit] = r
                done |= hit
            if kind == "non_adaptive" and len(np.unique(accepted)) != 1:
                raise InvariantViolation(f"trial {t}: non-adaptive stopping rate differs across slices")
            acc_cov = np.ones(len(test), dtype=bool)
            for r in set(accepted.tolist()):
                sel = accepted == r
                if r in cov:
                    acc_cov[sel] = cov[r][sel]
            trial = MultiRoundTrial(
                trial_id=t,
                avg_acceleration=float(accepted.mean()),
                acceptance_coverage=float(acc_cov.mean()),
                per_rate_coverage={r: float(cov[r].mean()) for r in all_rates},
                accepted_fraction={r: float(np.mean(accepted == r)) for r in rates + (1,)},
            )
            slices = None
            if t == 0:
                slices = [
                    (int(dataset.instance_ids[pool_idx[test[i]]]), int(accepted[i]), {r: (float(beta[r][i]), float(preds[r][1][test[i]])) for r in all_rates})
                    for i in range(len(test))
                ]
            return trial, slices

        results = _map(one, range(T), threads)
        trials = [tr for tr, _ in results]
        rep = MultiRoundReport(bound=kind, metric=metric, tau=float(tau), trials=trials)
        rep.avg_acceleration = mean_se([tr.avg_acceleration for tr in trials])
        rep.acceptance_coverage = mean_se([tr.acceptance_coverage for tr in trials])
        rep.per_rate_coverage = {r: mean_se([tr.per_rate_coverage[r] for tr in trials]) for r in all_rates}
        rep.accepted_fraction = {r: mean_se([tr.accepted_fraction[r] for tr in trials]) for r in rates + (1,)}
        rep.per_slice = results[0][1] if results else []
        out[kind] = rep
    return out


# -- distribution shift ------------------------------------------------------


@dataclass
class ShiftReport:
    metric: str
    bound: str
    alpha: float
    per_level: dict  # level -> (mean coverage, se)
    residuals: dict = field(repr=False)  # level -> residuals over the whole level pool
    histogram_data: dict = field(repr=False)  # level -> trial-0 test residuals
    ks_statistic: dict = field(default_factory=dict)  # level -> KS(level 0, level)


def shift_datasets(problem: SandboxProblem, levels, n_instances: int, c: int, seed: int, rate: int = 8, threads: int = 1, metrics=("psnr", "ssim")) -> dict:
    """One population per shift level, each from its own seed stream.

    Data at level ``l`` come from the shifted problem while recovery and
    posterior sampling keep using the level-0 model.
    """
    out = {}
    for level in levels:
        lvl_seed = int(rng_stream(seed, 7, level).integers(2**62))
        out[level] = generate_dataset(shifted_problem(problem, level), n_instances, c, lvl_seed, rates=(rate,), metrics=metrics, threads=threads, model=problem)
    return out


def run_shift_study(
    problem: SandboxProblem | None,
    metric: str = "psnr",
    alpha: float = 0.1,
    c: int = 32,
    levels=range(MAX_SHIFT_LEVEL + 1),
    T: int = 1000,
    seed: int = 0,
    rate: int = 8,
    n_instances: int = 1000,
    split_fraction: float = 0.7,
    bound_kind: str = "quantile",
    threads: int = 1,
    datasets: dict | None = None,
) -> ShiftReport:
    """Calibrate on level 0 only and test on every shift level.

    Level 0 is split into calibration and test folds per trial; other levels
    contribute a random test sample of the same size as the level-0 test
    fold.  ``bound_kind`` must be ``quantile`` or ``non_adaptive``.
    """
    kind = normalize_kind(bound_kind)
    if kind == "regression":
        raise ValueError("the shift study supports non_adaptive and quantile bounds")
    levels = sorted(set(int(lv) for lv in levels) | {0})
    if datasets is None:
        if problem is None:
            raise ValueError("need a problem or precomputed datasets")
        datasets = shift_datasets(problem, levels, n_instances, c, seed, rate, threads)
    orientation = get_metric(metric).orientation
    preds = {}
    for level in levels:
        ds = datasets[level]
        idx = np.arange(len(ds))
        preds[level] = pool_predictions(ds, kind, metric, alpha, c, rate, seed=seed, train_idx=idx[:0], pool_idx=idx)[:2]
    z_hat0, z0 = preds[0]
    n_cal = cal_size(len(z0), split_fraction)

    def one(t):
        cal, test = trial_split(len(z0), n_cal, seed, t)
        lam = calibrate_lambda(z_hat0[cal], z0[cal], alpha, orientation)
        cov, hist = {0: float(np.mean(residuals(z_hat0[test], z0[test], orientation) <= lam))}, {}
        if t == 0:
            hist[0] = residuals(z_hat0[test], z0[test], orientation)
        for level in levels[1:]:
            zh, zz = preds[level]
            pick = rng_stream(seed, t, 1, level).choice(len(zz), size=min(len(test), len(zz)), replace=False)
            res = residuals(zh[pick], zz[pick], orientation)
            cov[level] = float(np.mean(res <= lam))
            if t == 0:
                hist[level] = res
        return cov, hist

    results = _map(one, range(T), threads)
    per_level = {lv: mean_se([cov[lv] for cov, _ in results]) for lv in levels}
    full = {lv: residuals(*preds[lv], orientation) for lv in levels}
    ks = {lv: float(stats.ks_2samp(full[0], full[lv]).statistic) for lv in levels}
    return ShiftReport(
        metric=metric,
        bound=kind,
        alpha=alpha,
        per_level=per_level,
        residuals=full,
        histogram_data=results[0][1] if results else {},
        ks_statistic=ks,
    )
