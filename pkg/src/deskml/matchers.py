"""Bipartite matching for set-prediction losses.

Three solvers over an [n, m] cost matrix (n rows = targets, m columns =
prediction slots, n <= m):

* ``hungarian`` — exact minimum-cost assignment (Jonker-Volgenant style
  augmenting shortest paths, O(n^2 m)), with a deterministic
  lexicographic tie-break among optima.
* ``sinkhorn_match`` — entropy-regularized soft plan via Sinkhorn
  iterations, rounded to a hard assignment (exact solve on the log-plan
  by default, masked greedy argmax as a cheaper option).
* ``greedy_match`` — cheap baseline picking globally minimal cells.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class MatcherError(Exception):
    pass


@dataclass(frozen=True)
class Assignment:
    row_to_col: tuple[int, ...]
    total_cost: float


def _validate(costs: np.ndarray) -> np.ndarray:
    costs = np.asarray(costs, dtype=np.float64)
    if costs.ndim != 2:
        raise MatcherError(f"cost matrix must be 2-D, got shape {costs.shape}")
    n, m = costs.shape
    if n < 1 or m < 1:
        raise MatcherError("cost matrix must be at least 1x1")
    if n > m:
        raise MatcherError(f"need rows <= cols, got {n}x{m}")
    if not np.isfinite(costs).all():
        raise MatcherError("cost matrix contains non-finite entries")
    return costs


def _solve_jv(costs: np.ndarray) -> np.ndarray:
    """Minimum-cost row->col assignment via shortest augmenting paths."""
    n, m = costs.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    col_row = np.zeros(m + 1, dtype=np.int64)  # 1-based row matched to column
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        col_row[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = col_row[j0]
            cur = costs[i0 - 1] - u[i0] - v[1:]
            better = ~used[1:] & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            free = np.where(~used[1:])[0] + 1
            j1 = free[np.argmin(minv[free])]
            delta = minv[j1]
            u[col_row[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if col_row[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            col_row[j0] = col_row[j1]
            j0 = j1
    row_to_col = np.zeros(n, dtype=np.int64)
    for j in range(1, m + 1):
        if col_row[j] > 0:
            row_to_col[col_row[j] - 1] = j - 1
    return row_to_col


def _optimal_cost(costs: np.ndarray) -> float:
    rc = _solve_jv(costs)
    return float(costs[np.arange(costs.shape[0]), rc].sum())


def hungarian(costs) -> Assignment:
    """Exact minimum-cost assignment.

    Among all optimal assignments, returns the lexicographically
    smallest row_to_col vector, so results are deterministic even under
    cost ties.
    """
    costs = _validate(costs)
    n, m = costs.shape
    best = _optimal_cost(costs)
    scale = max(1.0, float(np.abs(costs).max()))
    tol = 1e-9 * scale * max(n, 1)

    # Fix rows in order to the smallest column that still admits an
    # optimal completion of the remaining subproblem.
    free_cols = list(range(m))
    remaining = best
    chosen = []
    for i in range(n):
        rest_rows = np.arange(i + 1, n)
        for c in sorted(free_cols):
            sub_budget = remaining - costs[i, c]
            if sub_budget < -tol:
                continue
            if len(rest_rows) == 0:
                if abs(sub_budget) <= tol:
                    chosen.append(c)
                    free_cols.remove(c)
                    remaining = sub_budget
                    break
                continue
            cols = [cc for cc in free_cols if cc != c]
            sub = costs[np.ix_(rest_rows, cols)]
            if abs(_optimal_cost(sub) - sub_budget) <= tol:
                chosen.append(c)
                free_cols.remove(c)
                remaining = sub_budget
                break
        else:
            raise MatcherError("internal error: no optimal completion found")

    total = float(costs[np.arange(n), chosen].sum())
    return Assignment(row_to_col=tuple(int(c) for c in chosen), total_cost=total)


def greedy_match(costs) -> Assignment:
    """Repeatedly pick the globally minimal remaining cell (not optimal)."""
    costs = _validate(costs)
    n, m = costs.shape
    work = costs.copy()
    row_to_col = np.full(n, -1, dtype=np.int64)
    for _ in range(n):
        # flat argmin resolves ties by (row, col) order
        i, j = np.unravel_index(np.argmin(work), work.shape)
        row_to_col[i] = j
        work[i, :] = np.inf
        work[:, j] = np.inf
    total = float(costs[np.arange(n), row_to_col].sum())
    return Assignment(row_to_col=tuple(int(c) for c in row_to_col), total_cost=total)


def _round_plan(plan: np.ndarray, costs: np.ndarray, rounding: str) -> Assignment:
    """Recover a hard assignment from a soft plan."""
    n, m = costs.shape
    work = plan[:n]
    if rounding == "exact":
        # At convergence -log(plan) equals the cost up to additive row and
        # column potentials, which are constant over assignments, so an
        # exact solve on the log-plan recovers the minimum-cost matching.
        neg_log = -np.log(np.maximum(work, 1e-300))
        row_to_col = np.asarray(_solve_jv(neg_log))
    elif rounding == "greedy":
        # greedy row-wise argmax with used-column masking, most
        # confident row first
        row_to_col = np.full(n, -1, dtype=np.int64)
        order = np.argsort(-work.max(axis=1), kind="stable")
        used = np.zeros(m, dtype=bool)
        for i in order:
            row = np.where(used, -np.inf, work[i])
            j = int(np.argmax(row))
            row_to_col[i] = j
            used[j] = True
    else:
        raise MatcherError(f"unknown rounding {rounding!r}")
    total = float(costs[np.arange(n), row_to_col].sum())
    return Assignment(row_to_col=tuple(int(c) for c in row_to_col), total_cost=total)


def _logsumexp(x: np.ndarray, axis: int) -> np.ndarray:
    mx = x.max(axis=axis, keepdims=True)
    out = np.log(np.exp(x - mx).sum(axis=axis)) + np.squeeze(mx, axis=axis)
    return out


def sinkhorn_match(costs, epsilon: float = 0.01, iters: int = 1000,
                   rounding: str = "exact"):
    """Entropy-regularized soft matching plus a rounded hard assignment.

    Returns ``(soft_plan, assignment, marginal_violation)`` where the
    plan has uniform marginals (rows sum to 1/n for square inputs; for
    n < m the matrix is padded with zero-cost rows so column mass is
    balanced). Small epsilon runs in the log domain for stability.
    """
    costs = _validate(costs)
    if epsilon <= 0:
        raise MatcherError(f"epsilon must be positive, got {epsilon}")
    if iters < 1:
        raise MatcherError(f"iters must be >= 1, got {iters}")
    n, m = costs.shape
    padded = costs
    if n < m:
        padded = np.vstack([costs, np.zeros((m - n, m))])
    k = padded.shape[0]
    target = 1.0 / k

    if epsilon > 0.05:
        # plain-domain iterations; fall back to log domain on underflow
        kern = np.exp(-padded / epsilon)
        u = np.full(k, 1.0)
        v = np.full(m, 1.0)
        ok = True
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            for _ in range(iters):
                kv = kern @ v
                if (kv <= 0).any() or not np.isfinite(kv).all():
                    ok = False
                    break
                u = target / kv
                ku = kern.T @ u
                if (ku <= 0).any() or not np.isfinite(ku).all():
                    ok = False
                    break
                v = target / ku
        plan = (u[:, None] * kern * v[None, :]) if ok else None
        if plan is None or not np.isfinite(plan).all():
            plan = _sinkhorn_uniform_log(padded, epsilon, iters, target)
    else:
        plan = _sinkhorn_uniform_log(padded, epsilon, iters, target)

    if not np.isfinite(plan).all():
        raise MatcherError("sinkhorn failed to produce a finite plan")
    violation = float(np.abs(plan.sum(axis=1) - target).max())
    soft_plan = plan[:n]
    return soft_plan, _round_plan(soft_plan, costs, rounding), violation


def _sinkhorn_uniform_log(costs: np.ndarray, epsilon: float, iters: int,
                          target: float) -> np.ndarray:
    k, m = costs.shape
    log_a = -costs / epsilon
    log_r = np.log(target)
    f = np.zeros(k)
    g = np.zeros(m)
    for _ in range(iters):
        f = log_r - _logsumexp(log_a + g[None, :], axis=1)
        g = log_r - _logsumexp(log_a + f[:, None], axis=0)
    return np.exp(log_a + f[:, None] + g[None, :])


_ALGORITHMS = {
    "hungarian": hungarian,
    "greedy": greedy_match,
    "sinkhorn": lambda c: sinkhorn_match(c)[1],
}


def batched_match(costs, algorithm: str = "hungarian") -> list[Assignment]:
    """Apply a matcher to every [n, m] slice of a [B, n, m] stack."""
    fn = _ALGORITHMS.get(algorithm)
    if fn is None:
        raise MatcherError(f"unknown algorithm {algorithm!r}; have {sorted(_ALGORITHMS)}")
    costs = np.asarray(costs, dtype=np.float64)
    if costs.ndim != 3:
        raise MatcherError(f"batched_match expects [B, n, m], got shape {costs.shape}")
    out = []
    for b in range(costs.shape[0]):
        try:
            out.append(fn(costs[b]))
        except MatcherError as e:
            raise MatcherError(f"slice {b}: {e}") from None
    return out
