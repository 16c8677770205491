"""Populations of sandbox instances reduced to FRIQ values.

For each instance and acceleration rate we keep the true FRIQ
``z = m(x_hat, x)`` and the ``c`` posterior FRIQs ``u_j = m(x_hat, x_tilde_j)``
for every requested metric.  Everything downstream (predictors, calibration,
studies) works from these numbers only.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone

import numpy as np

from .metrics import get_metric
from .sandbox import (
    Fidelity,
    SandboxProblem,
    draw_posterior_samples,
    draw_truth,
    instance_noise_std,
    instance_seed,
    observe,
    recover,
)

DEFAULT_METRICS = ("psnr", "ssim")
SCHEMA = "conformal-friq-dataset/1"


@dataclass
class FriqDataset:
    instance_ids: np.ndarray
    seeds: np.ndarray
    rates: tuple
    metrics: tuple
    c: int
    z: dict = field(repr=False)
    u: dict = field(repr=False)
    fingerprint: str = ""
    config: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.instance_ids)

    def _key(self, metric, rate):
        if metric not in self.metrics:
            raise KeyError(f"metric {metric!r} not in dataset (has {self.metrics})")
        if rate not in self.rates:
            raise KeyError(f"rate {rate} not in dataset (has {self.rates})")
        return (metric, rate)

    def targets(self, metric: str, rate: int = 1) -> np.ndarray:
        return self.z[self._key(metric, rate)]

    def features(self, metric: str, rate: int = 1, c: int | None = None) -> np.ndarray:
        """Posterior FRIQs, shape ``(n, c)``; a smaller ``c`` keeps the first ``c`` samples."""
        u = self.u[self._key(metric, rate)]
        if c is None:
            return u
        if not 1 <= c <= self.c:
            raise ValueError(f"c={c} outside 1..{self.c} stored posterior samples")
        return u[:, :c]

    def subset(self, idx) -> "FriqDataset":
        idx = np.asarray(idx)
        return FriqDataset(
            instance_ids=self.instance_ids[idx],
            seeds=self.seeds[idx],
            rates=self.rates,
            metrics=self.metrics,
            c=self.c,
            z={k: v[idx] for k, v in self.z.items()},
            u={k: v[idx] for k, v in self.u.items()},
            fingerprint=self.fingerprint,
            config=dict(self.config),
        )


def dataset_fingerprint(problem: SandboxProblem, **config) -> str:
    payload = json.dumps({"problem": problem.fingerprint(), **config}, sort_keys=True, default=str)
    return hashlib.sha256(payload.encode()).hexdigest()[:32]


def _normalize(recovery, *others):
    lo, hi = recovery.min(), recovery.max()
    span = hi - lo if hi > lo else 1.0
    return tuple((x - lo) / span for x in (recovery,) + others)


def _instance_friqs(problem, seed, rates, c, p, metric_specs, normalize, fidelity, model=None):
    truth = draw_truth(problem, seed)
    if model is not None:
        # the reconstructor keeps believing in `model`, including its noise level
        sigma_model = instance_noise_std(model, seed)
    z = np.empty((len(metric_specs), len(rates)))
    u = np.empty((len(metric_specs), len(rates), c))
    dr = 1.0 if normalize else problem.data_range
    for k, rate in enumerate(rates):
        obs = observe(problem, truth, rate, seed)
        belief = problem
        if model is not None:
            obs = replace(obs, noise_std=sigma_model)
            belief = model
        xhat = recover(belief, obs, p, seed, fidelity)
        samples = draw_posterior_samples(belief, obs, c, seed, fidelity)
        x = truth
        if normalize:
            xhat, x, samples = _normalize(xhat, x, samples)
        for m, spec in enumerate(metric_specs):
            z[m, k] = spec(xhat, x, dr)
            u[m, k] = spec(xhat, samples, dr)
    return z, u


def generate_dataset(
    problem: SandboxProblem,
    n_instances: int,
    c: int,
    seed: int,
    rates=None,
    p: int = 0,
    metrics=DEFAULT_METRICS,
    normalize: bool = False,
    fidelity: Fidelity | None = None,
    threads: int = 1,
    model: SandboxProblem | None = None,
) -> FriqDataset:
    """Draw ``n_instances`` i.i.d. instances and record their FRIQs.

    Truth and measurements come from ``problem``.  When ``model`` is given,
    recovery and posterior sampling use it instead (a mismatched sampler, as
    under distribution shift).  The result depends only on the arguments,
    not on ``threads``.
    """
    if n_instances < 1:
        raise ValueError("n_instances must be >= 1")
    if c < 1:
        raise ValueError("c must be >= 1")
    rates = tuple(int(r) for r in (rates if rates is not None else problem.rates))
    for r in rates:
        problem.mask(r)
    fidelity = fidelity or problem.fidelity
    specs = [get_metric(m) for m in metrics]
    seeds = np.array([instance_seed(seed, i) for i in range(n_instances)], dtype=np.uint64)

    def work(i):
        return _instance_friqs(problem, int(seeds[i]), rates, c, p, specs, normalize, fidelity, model)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, range(n_instances)))
    else:
        results = [work(i) for i in range(n_instances)]

    z_all = np.stack([r[0] for r in results])  # (n, M, R)
    u_all = np.stack([r[1] for r in results])  # (n, M, R, c)
    z, u = {}, {}
    for m, name in enumerate(metrics):
        for k, rate in enumerate(rates):
            z[(name, rate)] = np.ascontiguousarray(z_all[:, m, k])
            u[(name, rate)] = np.ascontiguousarray(u_all[:, m, k, :])
    config = {
        "n_instances": int(n_instances),
        "c": int(c),
        "seed": int(seed),
        "rates": list(rates),
        "p": int(p),
        "metrics": list(metrics),
        "normalize": bool(normalize),
        "fidelity": str(fidelity),
    }
    if model is not None:
        config["model"] = model.fingerprint()
    return FriqDataset(
        instance_ids=np.arange(n_instances),
        seeds=seeds,
        rates=rates,
        metrics=tuple(metrics),
        c=int(c),
        z=z,
        u=u,
        fingerprint=dataset_fingerprint(problem, **config),
        config=config,
    )


def _fmt(x: float) -> str:
    return f"{x:.17g}"


def dataset_header(metrics, c: int) -> list[str]:
    cols = ["instance_id", "rate", "seed"]
    cols += [f"z_{m}" for m in metrics]
    for m in metrics:
        cols += [f"u_{m}_{j}" for j in range(1, c + 1)]
    cols += [f"zhat_{m}" for m in metrics]
    return cols


def write_dataset(path, ds: FriqDataset, timestamp: bool = True) -> None:
    """Write one row per (instance, rate).  ``zhat_*`` columns are reserved and left empty."""
    with open(path, "w", newline="") as fh:
        fh.write(f"# {SCHEMA}\n")
        if timestamp:
            fh.write(f"# generated: {datetime.now(timezone.utc).isoformat(timespec='seconds')}\n")
        fh.write(f"# fingerprint: {ds.fingerprint}\n")
        fh.write(f"# config: {json.dumps(ds.config, sort_keys=True)}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(dataset_header(ds.metrics, ds.c))
        for i in range(len(ds)):
            for rate in ds.rates:
                row = [str(int(ds.instance_ids[i])), str(rate), str(int(ds.seeds[i]))]
                row += [_fmt(ds.z[(m, rate)][i]) for m in ds.metrics]
                for m in ds.metrics:
                    row += [_fmt(v) for v in ds.u[(m, rate)][i]]
                row += [""] * len(ds.metrics)
                writer.writerow(row)


def read_dataset(path) -> FriqDataset:
    meta = {}
    with open(path, newline="") as fh:
        lines = list(fh)
    if not lines or lines[0].strip() != f"# {SCHEMA}":
        raise ValueError(f"{path}: not a {SCHEMA} file")
    body = []
    for ln in lines[1:]:
        if ln.startswith("#"):
            key, _, val = ln[1:].strip().partition(":")
            meta[key.strip()] = val.strip()
        else:
            body.append(ln)
    reader = csv.reader(body)
    header = next(reader)
    metrics = tuple(h[2:] for h in header if h.startswith("z_"))
    u_cols = [h for h in header if h.startswith("u_")]
    if not metrics or len(u_cols) % len(metrics):
        raise ValueError(f"{path}: malformed header")
    c = len(u_cols) // len(metrics)
    if header != dataset_header(metrics, c):
        raise ValueError(f"{path}: unexpected column layout")
    rows = list(reader)
    ids, seeds, rate_list = [], {}, []
    z, u = {}, {}
    for row in rows:
        if len(row) != len(header):
            raise ValueError(f"{path}: row has {len(row)} fields, expected {len(header)}")
        iid, rate, seed = int(row[0]), int(row[1]), int(row[2])
        if iid not in seeds:
            ids.append(iid)
            seeds[iid] = seed
        if rate not in rate_list:
            rate_list.append(rate)
        vals = [float(v) for v in row[3 : 3 + len(metrics) * (1 + c)]]
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"{path}: non-finite value for instance {iid}, rate {rate}")
        for m_i, m in enumerate(metrics):
            z.setdefault((m, rate), {})[iid] = vals[m_i]
            start = len(metrics) + m_i * c
            u.setdefault((m, rate), {})[iid] = vals[start : start + c]
    z_arr = {k: np.array([v[i] for i in ids]) for k, v in z.items()}
    u_arr = {k: np.array([v[i] for i in ids]).reshape(len(ids), c) for k, v in u.items()}
    config = json.loads(meta["config"]) if "config" in meta else {}
    return FriqDataset(
        instance_ids=np.array(ids),
        seeds=np.array([seeds[i] for i in ids], dtype=np.uint64),
        rates=tuple(rate_list),
        metrics=metrics,
        c=c,
        z=z_arr,
        u=u_arr,
        fingerprint=meta.get("fingerprint", ""),
        config=config,
    )
