"""Acceptance suite: the twelve end-to-end criteria at their stated tolerances.

Each test prints one ``CRITERION n PASS|FAIL`` line (collected again in the
terminal summary) and then asserts.  Studies run at desk scale: 4000
instances (1000 train / 2100 cal / 900 test), c = 32, T = 1000 trials.
"""

import math
import time

import numpy as np
import pytest

from conformal_friq import harness
from conformal_friq.cli import run_study
from conformal_friq.conformal import calibrate_lambda, calibrate_lambda_bisect, residuals
from conformal_friq.config import STUDIES, RunConfig
from conformal_friq.dataset import generate_dataset
from conformal_friq.metrics import PSNR_MAX, Orientation, mse, psnr, ssim
from conformal_friq.predictors import choose_knots, spline_featurize
from conformal_friq.qr_solver import QRProblem, fit, pinball_loss
from conformal_friq.reports import read_table, strip_timestamp
from conformal_friq.sandbox import Fidelity, make_problem

N_INSTANCES = 4000
C = 32
T = 1000
ALPHA = 0.05
SEED = 2024
METRICS = ("psnr", "ssim")
KINDS = ("non_adaptive", "quantile", "regression")
COVERAGE_BAND = (0.945, 0.956)

RESULTS = {}


def record(n: int, ok: bool, detail: str) -> None:
    line = f"CRITERION {n:2d} {'PASS' if ok else 'FAIL'}: {detail}"
    RESULTS[n] = line
    print(line)
    assert ok, line


def in_band(x, band=COVERAGE_BAND):
    return band[0] <= x <= band[1]


@pytest.fixture(scope="module")
def timing():
    return {}


@pytest.fixture(scope="module")
def population(timing):
    t0 = time.perf_counter()
    ds = generate_dataset(make_problem(), N_INSTANCES, C, seed=SEED)
    timing["gen"] = time.perf_counter() - t0
    return ds


@pytest.fixture(scope="module")
def coverage_runs(population, timing):
    t0 = time.perf_counter()
    out = {}
    for metric in METRICS:
        for kind in KINDS:
            out[(metric, kind)] = harness.summarize(harness.run_coverage_study(population, kind, metric, ALPHA, C, T, seed=SEED))
    timing["coverage"] = time.perf_counter() - t0
    return out


@pytest.fixture(scope="module")
def alpha_rows(population):
    rows = []
    for metric in METRICS:
        rows += harness.sweep_alpha(population, KINDS, metric, (0.05, 0.1, 0.25, 0.5), T, seed=SEED)
    return rows


def test_criterion_01_coverage_law(coverage_runs, timing):
    cells = {k: v["coverage_mean"] for k, v in coverage_runs.items()}
    elapsed = timing["gen"] + timing["coverage"]
    ok = all(in_band(v) for v in cells.values()) and elapsed <= 600
    worst = min(cells.items(), key=lambda kv: min(kv[1] - COVERAGE_BAND[0], COVERAGE_BAND[1] - kv[1]))
    detail = ", ".join(f"{m}/{k}={v:.5f}" for (m, k), v in cells.items())
    record(1, ok, f"mean coverage in [0.945, 0.956] for 3 bounds x 2 metrics ({detail}); tightest {worst[0]}; runtime {elapsed:.0f}s <= 600s")


def test_criterion_02_coverage_vs_c(population):
    rows = []
    for metric in METRICS:
        rows += harness.sweep_c(population, ("quantile", "regression"), metric, ALPHA, (1, 2, 4, 8, 16, 32), T, seed=SEED)
    bad = [(r["metric"], r["bound"], r["c"], r["coverage_mean"]) for r in rows if not in_band(r["coverage_mean"])]
    lo = min(r["coverage_mean"] for r in rows)
    hi = max(r["coverage_mean"] for r in rows)
    mcb = {(r["metric"], r["c"]): r["mcb_mean"] for r in rows if r["bound"] == "quantile"}
    flat = ", ".join(f"{m} MCB(32) vs MCB(4) {abs(mcb[(m, 32)] - mcb[(m, 4)]) / abs(mcb[(m, 4)]):.2%}" for m in METRICS)
    record(2, not bad, f"{len(rows)} cells (quantile, regression) x c in 1..32 x 2 metrics, coverage range [{lo:.5f}, {hi:.5f}]; failures {bad}; reported: {flat}")


def test_criterion_03_coverage_vs_alpha(alpha_rows):
    bad, worst = [], 0.0
    for r in alpha_rows:
        if r["error"]:
            bad.append((r["metric"], r["bound"], r["alpha"], r["error"]))
            continue
        dev = abs(r["coverage_mean"] - (1 - r["alpha"]))
        tol = 0.006 + 3 * r["coverage_se"]
        worst = max(worst, dev / tol)
        if dev > tol:
            bad.append((r["metric"], r["bound"], r["alpha"], r["coverage_mean"]))
    record(3, not bad, f"{len(alpha_rows)} cells, alpha in {{0.05, 0.1, 0.25, 0.5}}; worst |cov - (1 - alpha)| uses {worst:.0%} of 0.006 + 3 SE; failures {bad}")


def test_criterion_04_tightness(coverage_runs, alpha_rows):
    checks, parts = [], []
    for metric in METRICS:
        na, q, rg = (coverage_runs[(metric, k)] for k in KINDS)
        checks.append(q["mad_mean"] < na["mad_mean"])
        # HP metrics: a larger lower bound is tighter
        checks.append(q["mcb_mean"] > na["mcb_mean"] and rg["mcb_mean"] > na["mcb_mean"])
        parts.append(f"{metric}: MAD q {q['mad_mean']:.4g} < na {na['mad_mean']:.4g}, MCB q {q['mcb_mean']:.4g} / reg {rg['mcb_mean']:.4g} > na {na['mcb_mean']:.4g}")
        mad = {r["alpha"]: r["mad_mean"] for r in alpha_rows if r["metric"] == metric and r["bound"] == "quantile"}
        checks.append(mad[0.5] < mad[0.05])
        parts.append(f"{metric} quantile MAD alpha=0.5 {mad[0.5]:.4g} < alpha=0.05 {mad[0.05]:.4g}")
    record(4, all(checks), "; ".join(parts))


def test_criterion_05_adaptivity(coverage_runs):
    parts, ok = [], True
    for metric in METRICS:
        q, na = coverage_runs[(metric, "quantile")], coverage_runs[(metric, "non_adaptive")]
        ok &= q["pearson_r_mean"] > 0.3 and na["pearson_r_mean"] == 0 and na["pearson_constant"]
        parts.append(f"{metric}: quantile r = {q['pearson_r_mean']:.3f}, non-adaptive r = {na['pearson_r_mean']} (constant flag {na['pearson_constant']})")
    record(5, ok, "; ".join(parts))


def grid_infimum(r_sorted, alpha, lo, h, npts):
    n = len(r_sorted)
    grid = lo + h * np.arange(npts)
    viol = n - np.searchsorted(r_sorted, grid, side="right")
    ok = viol <= math.floor(alpha * n - (1 - alpha) + 1e-12)
    if not ok.any():
        return math.inf
    return float(grid[np.argmax(ok)])


def test_criterion_06_calibration_oracle():
    rng = np.random.default_rng(6)
    h = 1e-6
    worst_grid = worst_bisect = 0.0
    n19_exact = True
    count = 0
    for n in (19, 39, 200, 2100):
        for _ in range(50):
            orientation = Orientation.HP if rng.random() < 0.5 else Orientation.LP
            zh, z = rng.random(n) * 0.5, rng.random(n) * 0.5
            lam = calibrate_lambda(zh, z, ALPHA, orientation)
            r = np.sort(residuals(zh, z, orientation))
            lo = r[0] - 10 * h
            g = grid_infimum(r, ALPHA, lo, h, int((r[-1] - lo) / h) + 20)
            worst_grid = max(worst_grid, abs(g - lam))
            worst_bisect = max(worst_bisect, abs(calibrate_lambda_bisect(zh, z, ALPHA, orientation) - lam))
            if n == 19:
                n19_exact &= lam == r[-1]
            count += 1
    ok = count == 200 and worst_grid <= h and worst_bisect <= 1e-9 and n19_exact
    record(6, ok, f"{count} calibration sets; max |grid - order stat| = {worst_grid:.2e} (<= 1e-6), max |bisect - order stat| = {worst_bisect:.2e} (<= 1e-9); n=19 returns max residual: {n19_exact}")


def test_criterion_07_qr_oracle(population):
    parts, ok = [], True
    z = population.targets("psnr")[:1000]
    for q in (0.05, 0.5, 0.95):
        scan = min(float(np.mean(pinball_loss(q, z, b))) for b in z)
        for X in (np.zeros((1000, 0)), np.zeros((1000, 1))):
            gap = abs(fit(QRProblem(X, z, q)).objective - scan)
            ok &= gap <= 1e-6
        parts.append(f"q={q}: constant fit gap {gap:.1e}")
    u = population.features("psnr", 1, C)[:1000]
    t1, t2 = choose_knots(u)
    X = spline_featurize(u, t1, t2)
    crushed = fit(QRProblem(X, z, ALPHA, gamma=1e6))
    wnorm = float(np.linalg.norm(crushed.w))
    ok &= wnorm < 1e-3
    parts.append(f"gamma=1e6 |w| = {wnorm:.1e}")
    for q in (0.05, 0.95):
        sol = fit(QRProblem(X, z, q))
        frac = float(np.mean(z < X @ sol.w + sol.b))
        ok &= frac <= q + 2 / len(z)
        parts.append(f"gamma=0 q={q} violation fraction {frac:.4f} <= {q + 2 / len(z):.4f}")
    record(7, ok, "; ".join(parts))


def test_criterion_08_multiround(population):
    parts, ok = [], True
    for metric in METRICS:
        out = harness.run_multiround(population, metric, ALPHA, None, C, T, seed=SEED, bound_kinds=("non_adaptive", "quantile"))
        na, q = out["non_adaptive"], out["quantile"]
        ok &= na.avg_acceleration[0] == 2.0
        ok &= q.avg_acceleration[0] > na.avg_acceleration[0]
        for rep in (na, q):
            ok &= all(in_band(rep.per_rate_coverage[r][0]) for r in (16, 8, 4, 2))
        covs = ", ".join(f"R{r} {q.per_rate_coverage[r][0]:.4f}" for r in (16, 8, 4, 2, 1))
        parts.append(
            f"{metric}: tau={na.tau:.6g}, avg accel non-adaptive {na.avg_acceleration[0]:.3f} vs quantile {q.avg_acceleration[0]:.3f}; quantile coverage {covs}; "
            f"acceptance coverage (reported) {q.acceptance_coverage[0]:.4f}"
        )
    record(8, ok, "; ".join(parts))


def test_criterion_09_shift(tmp_path):
    cfg = RunConfig(metric="psnr", trials=T, seed=SEED, bounds=("quantile",))
    run_study("shift", cfg, str(tmp_path))
    rows = read_table(tmp_path / "shift_summary.csv", ["level", "bound", "metric", "alpha", "trials", "coverage_mean", "coverage_se", "ks_statistic"])
    levels = [int(r["level"]) for r in rows]
    cov0, se0 = float(rows[0]["coverage_mean"]), float(rows[0]["coverage_se"])
    ks10 = float(rows[10]["ks_statistic"])
    ok = levels == list(range(11)) and abs(cov0 - 0.9) <= 0.006 + 3 * se0 and ks10 > 0.1
    curve = ", ".join(f"{r['level']}:{float(r['coverage_mean']):.3f}" for r in rows)
    record(9, ok, f"alpha=0.1, level-0 coverage {cov0:.4f} (+/- {se0:.1e}); KS(0, 10) = {ks10:.3f} > 0.1; 11-level table emitted: {curve}")


def test_criterion_10_determinism(population, tmp_path):
    small = population.subset(np.arange(1200))
    diffs = []
    for study in STUDIES:
        # shift generates its own data and takes no regression bound
        bounds = ("non_adaptive", "quantile") if study == "shift" else KINDS
        written = {}
        for threads in (1, 4):
            cfg = RunConfig(trials=20, seed=SEED, n_train=300, n_test=300, shift_instances=150, c_values=(1, 8), fractions=(0.25, 0.75), bounds=bounds, threads=threads)
            written[threads] = run_study(study, cfg, str(tmp_path / f"{study}-{threads}"), None if study == "shift" else small, per_trial=True)
        for a, b in zip(written[1], written[4]):
            if strip_timestamp(open(a).read()) != strip_timestamp(open(b).read()):
                diffs.append(a)
    record(10, not diffs, f"6 studies rerun with --threads 1 and 4; differing CSVs: {diffs}")


def naive_ssim(a, b, L=1.0, size=11, sigma=1.5):
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    win = np.outer(g, g)
    win /= win.sum()
    c1, c2 = (0.01 * L) ** 2, (0.03 * L) ** 2
    total, count = 0.0, 0
    for i in range(a.shape[0] - size + 1):
        for j in range(a.shape[1] - size + 1):
            pa, pb = a[i : i + size, j : j + size], b[i : i + size, j : j + size]
            ma, mb = np.sum(win * pa), np.sum(win * pb)
            va, vb = np.sum(win * (pa - ma) ** 2), np.sum(win * (pb - mb) ** 2)
            cov = np.sum(win * (pa - ma) * (pb - mb))
            total += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma**2 + mb**2 + c1) * (va + vb + c2))
            count += 1
    return total / count


def test_criterion_11_metric_kernels():
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(50):
        a = rng.random((32, 32))
        b = np.clip(a + rng.normal(scale=rng.uniform(0.01, 0.5), size=a.shape), 0, 1)
        worst = max(worst, abs(ssim(a, b) - naive_ssim(a, b)))
    zero, half = np.zeros((1, 2)), np.full((1, 2), 0.5)
    identities = [
        mse(zero, zero) == 0,
        mse(zero, half) == 0.25,
        psnr(zero, np.ones((1, 2))) == 0.0,
        psnr(zero, half) == 10 * math.log10(4),
        round(psnr(zero, half), 4) == 6.0206,
        psnr(half, half) == PSNR_MAX == 300,
    ]
    ok = worst <= 1e-6 and all(identities)
    record(11, ok, f"SSIM vs naive reference on 50 pairs: max |diff| = {worst:.1e} (<= 1e-6); PSNR identities {sum(identities)}/{len(identities)} exact")


def test_criterion_12_inflated_sampler():
    ds = generate_dataset(make_problem(fidelity=Fidelity.inflated(2)), N_INSTANCES, C, seed=SEED + 1)
    cells = {}
    for metric in METRICS:
        for kind in KINDS:
            cells[(metric, kind)] = harness.summarize(harness.run_coverage_study(ds, kind, metric, ALPHA, C, T, seed=SEED))["coverage_mean"]
    ok = all(in_band(v) for v in cells.values())
    detail = ", ".join(f"{m}/{k}={v:.5f}" for (m, k), v in cells.items())
    record(12, ok, f"inflated(2) sampler, coverage in [0.945, 0.956]: {detail}")
