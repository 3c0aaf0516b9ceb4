"""Optimal-transport primitives for batch matching.

Two solvers over a non-negative cost matrix with uniform marginals:

* `sinkhorn` -- entropically regularized transport, run in log domain
  from the start so squared-Euclidean costs at high dimension never
  overflow the scaling kernel.
* `exact_assignment` -- exact minimum-cost perfect matching on square
  costs (Jonker-Volgenant via scipy).

Both are pure functions; cost matrices are plain float64 arrays.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import logsumexp

MAX_ASSIGNMENT_SIZE = 4096
DEFAULT_MAX_ITERS = 1000
DEFAULT_TOL = 1e-6
_CHECK_EVERY = 10


def validate_cost(cost: np.ndarray) -> np.ndarray:
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] < 1 or cost.shape[1] < 1:
        raise ValueError(f"cost matrix must be 2-D and non-empty, got shape {cost.shape}")
    if not np.isfinite(cost).all():
        raise ValueError("cost matrix entries must be finite")
    if (cost < 0).any():
        raise ValueError("cost matrix entries must be non-negative")
    return cost


def squared_distances(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Pairwise squared Euclidean costs, clipped at zero against roundoff."""
    sq = (
        np.sum(x * x, axis=1)[:, None]
        + np.sum(y * y, axis=1)[None, :]
        - 2.0 * (x @ y.T)
    )
    return np.maximum(sq, 0.0)


def default_reg(cost: np.ndarray) -> float:
    """Default entropic regularization: 0.05 x median cost (dimensionless)."""
    med = float(np.median(cost))
    return 0.05 * med if med > 0 else 0.05


@dataclass(frozen=True)
class Coupling:
    """Sinkhorn output: transport plan plus convergence bookkeeping.

    `error_trace` holds the marginal violation logged every 10 iterations
    (and at exit); `marginal_error` is the final violation in max norm.
    """

    entries: np.ndarray
    row_marginals: np.ndarray
    col_marginals: np.ndarray
    cost: float
    marginal_error: float
    iterations: int
    converged: bool
    error_trace: tuple[float, ...]


def sinkhorn(
    cost: np.ndarray,
    reg: float | None = None,
    max_iters: int = DEFAULT_MAX_ITERS,
    tol: float = DEFAULT_TOL,
) -> Coupling:
    """Entropic OT between uniform marginals 1/n and 1/m.

    Alternates the log-domain dual updates

        f_i = reg * log(a_i) - reg * LSE_j((g_j - C_ij) / reg)
        g_j = reg * log(b_j) - reg * LSE_i((f_i - C_ij) / reg)

    until the plan's worst marginal violation drops below `tol` or
    `max_iters` is hit (the achieved error is reported either way).
    """
    cost = validate_cost(cost)
    if reg is None:
        reg = default_reg(cost)
    if reg <= 0:
        raise ValueError(f"reg must be positive, got {reg}")
    if max_iters < 1:
        raise ValueError(f"max_iters must be >= 1, got {max_iters}")
    if tol <= 0:
        raise ValueError(f"tol must be positive, got {tol}")

    n, m = cost.shape
    scaled = cost / reg
    if not np.isfinite(scaled).all():
        raise ValueError(
            f"reg = {reg:.3e} underflows the scaling kernel even in log domain; "
            "increase reg"
        )
    log_a = np.full(n, -np.log(n))
    log_b = np.full(m, -np.log(m))
    a = np.full(n, 1.0 / n)
    b = np.full(m, 1.0 / m)

    f = np.zeros(n)
    g = np.zeros(m)
    trace: list[float] = []

    def plan() -> np.ndarray:
        return np.exp(f[:, None] / reg + g[None, :] / reg - scaled)

    def violation(p: np.ndarray) -> float:
        row = np.abs(p.sum(axis=1) - a).max()
        col = np.abs(p.sum(axis=0) - b).max()
        return float(max(row, col))

    err = violation(plan())
    trace.append(err)
    iterations = 0
    converged = err <= tol
    while not converged and iterations < max_iters:
        f = reg * log_a - reg * logsumexp(g[None, :] / reg - scaled, axis=1)
        g = reg * log_b - reg * logsumexp(f[:, None] / reg - scaled, axis=0)
        iterations += 1
        if iterations % _CHECK_EVERY == 0 or iterations == max_iters:
            err = violation(plan())
            trace.append(err)
            converged = err <= tol

    p = plan()
    err = violation(p)
    if trace[-1] != err:
        trace.append(err)
    total = float((p * cost).sum())
    return Coupling(
        entries=p,
        row_marginals=a,
        col_marginals=b,
        cost=total,
        marginal_error=err,
        iterations=iterations,
        converged=err <= tol,
        error_trace=tuple(trace),
    )


def exact_assignment(cost: np.ndarray) -> np.ndarray:
    """Permutation pi minimizing sum_i C[i, pi(i)] over square costs."""
    cost = validate_cost(cost)
    n, m = cost.shape
    if n != m:
        raise ValueError(f"exact assignment needs a square cost matrix, got {n}x{m}")
    if n > MAX_ASSIGNMENT_SIZE:
        raise ValueError(f"assignment size {n} exceeds the {MAX_ASSIGNMENT_SIZE} cap")
    _, cols = linear_sum_assignment(cost)
    return cols


def assignment_cost(cost: np.ndarray, permutation: np.ndarray) -> float:
    return float(cost[np.arange(cost.shape[0]), permutation].sum())
