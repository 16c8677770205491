"""Ridge-penalised linear quantile regression.

Objective for features ``X`` (n x p), targets ``z`` and level ``q``::

    J(w, b) = (1/n) * sum_i pinball_q(z_i - X_i w - b) + gamma * ||w||^2

The bias is not penalised.  The default solver writes ``J`` as a QP over
``(w, b, r+, r-)`` and hands it to Clarabel; ``method="subgradient"`` runs
plain subgradient descent instead.  Both finish with an exact minimisation
over ``b`` for the final ``w``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import clarabel
import numpy as np
import scipy.sparse as sp

DEFAULT_GAMMA_GRID = (0.0, 1e-4, 1e-3, 1e-2, 1e-1, 1.0)
N_FOLDS = 5


class SolverError(RuntimeError):
    """Raised when the solver stops without reaching its tolerance."""

    def __init__(self, message, w=None, b=None, gap=None):
        super().__init__(message)
        self.w = w
        self.b = b
        self.gap = gap


def pinball_loss(q: float, z, z_hat):
    """``q max(0, z - z_hat) + (1 - q) max(0, z_hat - z)``, elementwise."""
    d = np.asarray(z, dtype=np.float64) - np.asarray(z_hat, dtype=np.float64)
    out = q * np.maximum(d, 0.0) + (1 - q) * np.maximum(-d, 0.0)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True, eq=False)
class QRProblem:
    features: np.ndarray
    targets: np.ndarray
    q: float
    gamma: float = 0.0

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.features, dtype=np.float64))
        z = np.asarray(self.targets, dtype=np.float64).ravel()
        if X.shape[0] != z.shape[0]:
            raise ValueError(f"{X.shape[0]} feature rows but {z.shape[0]} targets")
        if X.shape[0] < 1:
            raise ValueError("need at least one training row")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(z))):
            raise ValueError("features and targets must be finite")
        if not 0 < self.q < 1:
            raise ValueError(f"q must be in (0, 1), got {self.q}")
        if not self.gamma >= 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "targets", z)

    def objective(self, w, b) -> float:
        resid = self.targets - self.features @ np.asarray(w) - b
        return float(np.mean(pinball_loss(self.q, resid, 0.0)) + self.gamma * np.dot(w, w))


@dataclass(frozen=True)
class QRFit:
    w: np.ndarray
    b: float
    objective: float
    method: str
    iterations: int


def best_bias(q: float, residuals) -> float:
    """Exact minimiser over ``b`` of ``sum pinball_q(r_i - b)``: the order statistic at ``ceil(q n)``."""
    r = np.sort(np.asarray(residuals, dtype=np.float64))
    k = min(len(r), max(1, math.ceil(q * len(r))))
    return float(r[k - 1])


def _polish(problem: QRProblem, w):
    b = best_bias(problem.q, problem.targets - problem.features @ w)
    return b, problem.objective(w, b)


def _fit_qp(problem: QRProblem, tol: float):
    X, z, q, g = problem.features, problem.targets, problem.q, problem.gamma
    n, p = X.shape
    # variables: w (p), b (1), r_plus (n), r_minus (n);  X w + b + r+ - r- = z
    P = sp.diags(np.r_[np.full(p, 2.0 * g), np.zeros(1 + 2 * n)]).tocsc()
    cost = np.r_[np.zeros(p + 1), np.full(n, q / n), np.full(n, (1 - q) / n)]
    eq = sp.hstack([sp.csr_matrix(X), sp.csr_matrix(np.ones((n, 1))), sp.eye(n), -sp.eye(n)])
    nonneg = sp.hstack([sp.csr_matrix((2 * n, p + 1)), -sp.eye(2 * n)])
    A = sp.vstack([eq, nonneg]).tocsc()
    rhs = np.r_[z, np.zeros(2 * n)]
    settings = clarabel.DefaultSettings()
    settings.verbose = False
    settings.tol_gap_abs = tol
    settings.tol_gap_rel = tol
    settings.tol_feas = tol
    settings.max_iter = 500
    cones = [clarabel.ZeroConeT(n), clarabel.NonnegativeConeT(2 * n)]
    sol = clarabel.DefaultSolver(P, cost, A, rhs, cones, settings).solve()
    x = np.asarray(sol.x)
    status = str(sol.status)
    if "Solved" not in status:
        w = x[:p] if x.size else np.zeros(p)
        raise SolverError(f"QP solver stopped with status {status}", w=w, b=x[p] if x.size else 0.0, gap=None)
    return x[:p], int(sol.iterations), status


def _fit_subgradient(problem: QRProblem, max_iter: int, step: float):
    X, z, q, g = problem.features, problem.targets, problem.q, problem.gamma
    n, p = X.shape
    # iterate on standardized columns; w = v / sd, b = c0 - mu . w
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    sd[sd == 0] = 1.0
    Xs = (X - mu) / sd
    v = np.zeros(p)
    c0 = best_bias(q, z)
    best_obj, best_w = problem.objective(np.zeros(p), c0), np.zeros(p)
    for t in range(1, max_iter + 1):
        resid = z - Xs @ v - c0
        # derivative of the pinball loss with respect to the prediction
        dz = np.where(resid > 0, -q, 1 - q)
        gv = Xs.T @ dz / n + 2 * g * v / sd**2
        gc = float(dz.mean())
        eta = step / math.sqrt(t)
        v -= eta * gv
        c0 -= eta * gc
        if t % 50 == 0 or t == max_iter:
            w = v / sd
            obj = problem.objective(w, c0 - mu @ w)
            if obj < best_obj:
                best_obj, best_w = obj, w.copy()
    return best_w, max_iter


def fit(
    problem: QRProblem,
    method: str = "qp",
    tol: float = 1e-9,
    max_iter: int = 20_000,
    step: float = 1.0,
) -> QRFit:
    """Minimise the penalised pinball objective.

    ``method="qp"`` is accurate to the interior-point tolerance.
    ``method="subgradient"`` uses steps ``step / sqrt(t)`` for ``max_iter``
    iterations and keeps the best iterate; it is a fallback, not a
    high-accuracy solver.
    """
    p = problem.features.shape[1]
    if method == "qp":
        if p == 0:
            w, iters = np.zeros(0), 0
        else:
            w, iters, _ = _fit_qp(problem, tol)
    elif method == "subgradient":
        w, iters = _fit_subgradient(problem, max_iter, step)
    else:
        raise ValueError(f"unknown method {method!r}")
    w = np.asarray(w, dtype=np.float64)
    b, obj = _polish(problem, w)
    if not math.isfinite(obj):
        raise SolverError("objective is not finite", w=w, b=b)
    return QRFit(w=w, b=b, objective=obj, method=method, iterations=iters)


def fold_assignment(n: int, k: int = N_FOLDS, seed: int = 0) -> np.ndarray:
    """Fold label per row: seeded shuffle, then ``k`` contiguous blocks."""
    perm = np.random.default_rng(seed).permutation(n)
    labels = np.empty(n, dtype=np.int64)
    for f, block in enumerate(np.array_split(perm, k)):
        labels[block] = f
    return labels


def cross_validate(features, targets, q: float, gamma_grid=DEFAULT_GAMMA_GRID, k: int = N_FOLDS, seed: int = 0):
    """Pick the ridge weight with the lowest mean held-out pinball loss.

    Returns ``(best_gamma, table)`` where ``table`` holds one
    ``(gamma, mean_loss, fold_losses)`` tuple per grid value.  Ties go to the
    smallest gamma.
    """
    X = np.atleast_2d(np.asarray(features, dtype=np.float64))
    z = np.asarray(targets, dtype=np.float64).ravel()
    n = len(z)
    if n < k:
        raise ValueError(f"cross-validation with {k} folds needs at least {k} rows, got {n}")
    grid = [float(g) for g in gamma_grid]
    if not grid:
        raise ValueError("gamma_grid is empty")
    labels = fold_assignment(n, k, seed)
    table = []
    for g in grid:
        losses = []
        for f in range(k):
            tr, te = labels != f, labels == f
            sol = fit(QRProblem(X[tr], z[tr], q, g))
            pred = X[te] @ sol.w + sol.b
            losses.append(float(np.mean(pinball_loss(q, z[te], pred))))
        table.append((g, float(np.mean(losses)), tuple(losses)))
    best = min(table, key=lambda row: (row[1], row[0]))
    return best[0], table
