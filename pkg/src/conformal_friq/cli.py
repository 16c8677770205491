"""Command-line interface: ``gen``, ``calibrate``, ``bound`` and ``study``.

Exit status is 0 on success, 1 when a study invariant fails and 2 for usage,
configuration or input errors.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import harness
from .conformal import BoundModel, CalibrationInfeasible, calibrate, empirical_coverage, residuals
from .config import STUDIES, RunConfig, from_mapping, load_config, parse_seed
from .dataset import generate_dataset, read_dataset, write_dataset
from .metrics import get_metric
from .predictors import build_predictor, normalize_kind
from .reports import render_table, write_table

EXIT_OK = 0
EXIT_INVARIANT = 1
EXIT_USAGE = 2

TRIAL_COLUMNS = ["trial_id", "coverage", "mcb", "mad", "pearson_r", "pearson_constant", "lambda_hat", "cal_miscoverage"]
SUMMARY_STATS = [
    "trials",
    "coverage_mean",
    "coverage_se",
    "mcb_mean",
    "mcb_se",
    "mad_mean",
    "mad_se",
    "pearson_r_mean",
    "pearson_r_se",
    "pearson_constant",
    "lambda_hat_mean",
    "lambda_hat_se",
    "error",
]
STUDY_KEYS = {
    "coverage": ["study", "bound", "metric", "alpha", "c", "rate"],
    "sweep-c": ["study", "bound", "metric", "alpha", "c", "rate"],
    "sweep-alpha": ["study", "bound", "metric", "alpha", "c", "rate"],
    "sweep-train": ["study", "bound", "metric", "alpha", "c", "fraction", "n_train", "n_cal"],
}


class CliError(Exception):
    pass


def _bound_kind(text: str) -> str:
    try:
        return normalize_kind(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _seed(text: str) -> int:
    try:
        return parse_seed(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="PATH", help="flat JSON configuration file")
    p.add_argument("--seed", type=_seed, help="master seed (u64); falls back to $CONFORMAL_FRIQ_SEED")
    p.add_argument("--threads", type=int, help="worker threads; never changes results")
    p.add_argument("--c", type=int, help="posterior samples per instance")
    p.add_argument("--alpha", type=float, help="miscoverage level")
    p.add_argument("--metric", help="FRIQ metric name")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="conformal-friq", description="Conformal bounds on image-quality metrics.")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a sandbox dataset")
    _common(g)
    g.add_argument("--p", type=int, help="posterior samples averaged into the recovery (0 = posterior mean)")
    g.add_argument("--n-instances", type=int, dest="n_instances")
    g.add_argument("--fidelity", help="exact, inflated(K) or biased(B)")
    g.add_argument("--out", required=True, metavar="PATH")
    g.add_argument("--no-timestamp", action="store_true", help="omit the generated-at comment line")

    c = sub.add_parser("calibrate", help="fit and calibrate a bound, write the artifact")
    _common(c)
    c.add_argument("--dataset", required=True, metavar="PATH")
    c.add_argument("--bound", type=_bound_kind)
    c.add_argument("--rate", type=int)
    c.add_argument("--n-train", type=int, dest="n_train", help="leading instances reserved for training")
    c.add_argument("--n-cal", type=int, dest="n_cal", help="calibration records after the training block (default: all)")
    c.add_argument("--expect-fingerprint", dest="expect_fingerprint")
    c.add_argument("--strict", action="store_true", help="fingerprint mismatch is an error, not a warning")
    c.add_argument("--out", required=True, metavar="PATH")

    b = sub.add_parser("bound", help="apply a calibrated artifact")
    b.add_argument("--model", required=True, metavar="PATH")
    src = b.add_mutually_exclusive_group(required=True)
    src.add_argument("--dataset", metavar="PATH")
    src.add_argument("--features", help="comma-separated posterior FRIQs of one instance")
    b.add_argument("--rate", type=int)
    b.add_argument("--out", metavar="PATH", help="report path (default: stdout)")
    b.add_argument("--no-timestamp", action="store_true")

    s = sub.add_parser("study", help="run a Monte Carlo study")
    s.add_argument("name", choices=STUDIES)
    _common(s)
    s.add_argument("--dataset", metavar="PATH", help="use this dataset instead of generating one")
    s.add_argument("--trials", type=int)
    s.add_argument("--tau", type=float, help="multiround threshold (default: non-adaptive R=2 bound)")
    s.add_argument("--bound", type=_bound_kind, help="restrict to one bound kind")
    s.add_argument("--p", type=int)
    s.add_argument("--n-instances", type=int, dest="n_instances")
    s.add_argument("--n-train", type=int, dest="n_train", help="leading instances reserved for training")
    s.add_argument("--out", required=True, metavar="DIR")
    s.add_argument("--per-trial", action="store_true", help="also write per-trial rows (coverage, multiround)")
    s.add_argument("--no-timestamp", action="store_true")
    return parser


_OVERRIDES = ("seed", "threads", "c", "alpha", "metric", "p", "n_instances", "fidelity", "trials", "tau", "n_train", "rate")


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    over = {k: getattr(args, k) for k in _OVERRIDES if getattr(args, k, None) is not None}
    if getattr(args, "bound", None) is not None:
        over["bound"] = args.bound
        over["bounds"] = (args.bound,)
    return from_mapping(over, cfg)


def _warn(msg: str) -> None:
    print(f"warning: {msg}", file=sys.stderr)


def cmd_gen(args) -> int:
    cfg = resolve_config(args)
    ds = generate_dataset(
        cfg.problem(),
        cfg.n_instances,
        cfg.c,
        cfg.resolved_seed(),
        rates=cfg.rates,
        p=cfg.p,
        metrics=cfg.metrics,
        normalize=cfg.normalize,
        threads=cfg.threads,
    )
    write_dataset(args.out, ds, timestamp=not args.no_timestamp)
    print(f"wrote {len(ds)} instances x {len(ds.rates)} rates to {args.out} (fingerprint {ds.fingerprint})")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    cfg = resolve_config(args)
    ds = read_dataset(args.dataset)
    if args.expect_fingerprint and args.expect_fingerprint != ds.fingerprint:
        msg = f"dataset fingerprint {ds.fingerprint} differs from expected {args.expect_fingerprint}"
        if args.strict:
            raise CliError(msg)
        _warn(msg)
    kind = normalize_kind(cfg.bound)
    metric = get_metric(cfg.metric)
    n = len(ds)
    n_train = cfg.n_train
    if not 0 <= n_train < n:
        raise CliError(f"n_train={n_train} leaves no calibration data in {n} instances")
    n_cal = n - n_train if args.n_cal is None else args.n_cal
    if not 1 <= n_cal <= n - n_train:
        raise CliError(f"n_cal={n_cal} must lie in 1..{n - n_train}")
    u = ds.features(cfg.metric, cfg.rate, cfg.c)
    z = ds.targets(cfg.metric, cfg.rate)
    predictor = build_predictor(
        kind, cfg.alpha, metric.orientation, cfg.c, u[:n_train], z[:n_train], **({"seed": cfg.resolved_seed()} if kind == "regression" else {})
    )
    cal = slice(n_train, n_train + n_cal)
    model = calibrate(predictor, u[cal], z[cal], cfg.metric, rate=cfg.rate, dataset_fingerprint=ds.fingerprint)
    model.save(args.out)
    print(f"lambda_hat={model.lambda_hat!r} n_cal={model.n_cal} alpha={model.alpha} -> {args.out}")
    return EXIT_OK


BOUND_COLUMNS = ["instance_id", "z", "zhat", "beta", "covered"]


def bound_rows(model: BoundModel, ds=None, rate=None, features=None) -> list[dict]:
    if features is not None:
        u = np.asarray(features, dtype=np.float64)
        if u.ndim != 1 or u.size != model.c:
            raise CliError(f"artifact expects {model.c} features, got {u.size}")
        zhat = float(np.asarray(model.predict(u[None]))[0])
        beta = float(np.asarray(model.bound(u[None]))[0])
        return [{"instance_id": 0, "z": None, "zhat": zhat, "beta": beta, "covered": None}]
    rate = rate if rate is not None else (model.rate if model.rate is not None else 1)
    if ds.c < model.c:
        raise CliError(f"artifact expects {model.c} features, dataset stores {ds.c}")
    if model.metric not in ds.metrics:
        raise CliError(f"dataset has no columns for metric {model.metric!r}")
    u = ds.features(model.metric, rate, model.c)
    z = ds.targets(model.metric, rate)
    zhat = np.broadcast_to(model.predict(u), z.shape)
    beta = np.broadcast_to(model.bound(u), z.shape)
    covered = residuals(zhat, z, model.orientation) <= model.lambda_hat
    return [
        {"instance_id": int(ds.instance_ids[i]), "z": float(z[i]), "zhat": float(zhat[i]), "beta": float(beta[i]), "covered": bool(covered[i])}
        for i in range(len(z))
    ]


def cmd_bound(args) -> int:
    model = BoundModel.load(args.model)
    if args.features is not None:
        try:
            feats = [float(x) for x in args.features.split(",")]
        except ValueError:
            raise CliError(f"cannot parse --features {args.features!r}") from None
        rows = bound_rows(model, features=feats)
    else:
        ds = read_dataset(args.dataset)
        rows = bound_rows(model, ds, args.rate)
        if ds.fingerprint != model.dataset_fingerprint:
            _warn("dataset fingerprint differs from the one used for calibration")
    if args.out:
        write_table(args.out, rows, BOUND_COLUMNS, timestamp=not args.no_timestamp)
    else:
        sys.stdout.write(render_table(rows, BOUND_COLUMNS, timestamp=False))
    if args.features is None and rows:
        cov = empirical_coverage(model.lambda_hat, [r["zhat"] for r in rows], [r["z"] for r in rows], model.orientation)
        print(f"covered fraction {cov!r} over {len(rows)} records", file=sys.stderr)
    return EXIT_OK


def _study_dataset(args, cfg: RunConfig):
    if args.dataset:
        return read_dataset(args.dataset)
    return generate_dataset(
        cfg.problem(), cfg.n_instances, cfg.c, cfg.resolved_seed(), rates=cfg.rates, p=cfg.p, metrics=cfg.metrics, normalize=cfg.normalize, threads=cfg.threads
    )


def _path(out, name):
    return os.path.join(out, name)


def run_study(name: str, cfg: RunConfig, out: str, dataset=None, per_trial: bool = False, timestamp: bool = True) -> list[str]:
    """Run one study and write its CSVs into ``out``; returns the written paths."""
    os.makedirs(out, exist_ok=True)
    seed = cfg.resolved_seed()
    T, threads = cfg.trials, cfg.threads
    kinds = tuple(normalize_kind(k) for k in cfg.bounds)
    written = []

    def emit(fname, rows, cols):
        path = _path(out, fname)
        write_table(path, rows, cols, timestamp)
        written.append(path)

    if name in ("coverage", "sweep-c", "sweep-alpha", "sweep-train"):
        ds = dataset
        if name == "coverage":
            rows, trial_rows, scatter = [], [], []
            for kind in kinds:
                reps = harness.run_coverage_study(
                    ds, kind, cfg.metric, cfg.alpha, cfg.c, T, cfg.split_fraction, seed, cfg.rate, cfg.n_train, threads, keep_per_sample=True
                )
                base = {"study": name, "bound": kind, "metric": cfg.metric, "alpha": cfg.alpha, "c": cfg.c, "rate": cfg.rate}
                rows.append(harness.summary_row(base, reps))
                for r in reps:
                    trial_rows.append({"bound": kind, **{k: getattr(r, k) for k in TRIAL_COLUMNS}})
                for zz, zh, bb in reps[0].per_sample:
                    scatter.append({"bound": kind, "z": float(zz), "zhat": float(zh), "beta": float(bb)})
            emit("coverage_scatter.csv", scatter, ["bound", "z", "zhat", "beta"])
            if per_trial:
                emit("coverage_trials.csv", trial_rows, ["bound"] + TRIAL_COLUMNS)
        elif name == "sweep-c":
            c_values = tuple(c for c in cfg.c_values if c <= ds.c)
            rows = harness.sweep_c(ds, kinds, cfg.metric, cfg.alpha, c_values, T, seed, cfg.rate, cfg.n_train, cfg.split_fraction, threads)
        elif name == "sweep-alpha":
            rows = harness.sweep_alpha(ds, kinds, cfg.metric, cfg.alphas, T, seed, cfg.c, cfg.rate, cfg.n_train, cfg.split_fraction, threads)
        else:
            rows = harness.sweep_train_fraction(ds, cfg.metric, cfg.alpha, cfg.c, cfg.fractions, T, seed, kinds, cfg.n_test, cfg.rate, threads)
        emit(f"{name}_summary.csv", rows, STUDY_KEYS[name] + SUMMARY_STATS)
    elif name == "multiround":
        ds = dataset
        rates = tuple(r for r in harness.MULTIROUND_RATES if r in ds.rates)
        reports = harness.run_multiround(ds, cfg.metric, cfg.alpha, cfg.tau, cfg.c, T, seed, kinds, rates, cfg.n_train, cfg.split_fraction, threads)
        all_rates = rates + ((1,) if 1 in ds.rates else ())
        cols = ["bound", "metric", "alpha", "tau", "trials", "avg_acceleration_mean", "avg_acceleration_se", "acceptance_coverage_mean", "acceptance_coverage_se"]
        cols += [f"coverage_r{r}_{s}" for r in all_rates for s in ("mean", "se")]
        cols += [f"accepted_r{r}_mean" for r in rates + (1,)]
        rows, slices, trial_rows = [], [], []
        for kind, rep in reports.items():
            row = {"bound": kind, "metric": cfg.metric, "alpha": cfg.alpha, "tau": rep.tau, "trials": len(rep.trials)}
            row["avg_acceleration_mean"], row["avg_acceleration_se"] = rep.avg_acceleration
            row["acceptance_coverage_mean"], row["acceptance_coverage_se"] = rep.acceptance_coverage
            for r in all_rates:
                row[f"coverage_r{r}_mean"], row[f"coverage_r{r}_se"] = rep.per_rate_coverage[r]
            for r in rates + (1,):
                row[f"accepted_r{r}_mean"] = rep.accepted_fraction[r][0]
            rows.append(row)
            for iid, acc, per in rep.per_slice:
                srow = {"bound": kind, "instance_id": iid, "accepted_rate": acc}
                for r in all_rates:
                    srow[f"beta_r{r}"], srow[f"z_r{r}"] = per[r]
                slices.append(srow)
            for tr in rep.trials:
                trial_rows.append({"bound": kind, "trial_id": tr.trial_id, "avg_acceleration": tr.avg_acceleration, "acceptance_coverage": tr.acceptance_coverage})
        emit("multiround_summary.csv", rows, cols)
        emit("multiround_slices.csv", slices, ["bound", "instance_id", "accepted_rate"] + [f"{k}_r{r}" for r in all_rates for k in ("beta", "z")])
        if per_trial:
            emit("multiround_trials.csv", trial_rows, ["bound", "trial_id", "avg_acceleration", "acceptance_coverage"])
    elif name == "shift":
        kind = "quantile" if "quantile" in kinds else kinds[0]
        if kind == "regression":
            raise CliError("the shift study supports nonadaptive and quantile bounds")
        rep = harness.run_shift_study(
            cfg.problem(), cfg.metric, cfg.shift_alpha, cfg.c, range(harness.MAX_SHIFT_LEVEL + 1), T, seed, cfg.shift_rate, cfg.shift_instances,
            cfg.split_fraction, kind, threads,
        )
        rows = [
            {"level": lv, "bound": rep.bound, "metric": rep.metric, "alpha": rep.alpha, "trials": T, "coverage_mean": m, "coverage_se": se, "ks_statistic": rep.ks_statistic[lv]}
            for lv, (m, se) in sorted(rep.per_level.items())
        ]
        emit("shift_summary.csv", rows, ["level", "bound", "metric", "alpha", "trials", "coverage_mean", "coverage_se", "ks_statistic"])
        hist = [{"level": lv, "residual": float(x)} for lv in (0, 5, 10) if lv in rep.histogram_data for x in rep.histogram_data[lv]]
        emit("shift_histogram.csv", hist, ["level", "residual"])
    else:
        raise CliError(f"unknown study {name!r}")
    return written


def cmd_study(args) -> int:
    cfg = resolve_config(args)
    ds = None if args.name == "shift" else _study_dataset(args, cfg)
    try:
        paths = run_study(args.name, cfg, args.out, ds, per_trial=args.per_trial, timestamp=not args.no_timestamp)
    except harness.InvariantViolation as exc:
        print(f"invariant failed: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    for p in paths:
        print(p)
    return EXIT_OK


COMMANDS = {"gen": cmd_gen, "calibrate": cmd_calibrate, "bound": cmd_bound, "study": cmd_study}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (CliError, CalibrationInfeasible, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
