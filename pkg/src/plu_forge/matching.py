"""Hungarian (Kuhn-Munkres) assignment with a deterministic tie-break."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Assignment:
    pairs: tuple[tuple[int, int], ...]
    total_cost: float


def _min_cost_square(cost: np.ndarray) -> tuple[list[int], float]:
    """Shortest-augmenting-path Hungarian on a square matrix.

    Returns ``assignment[row] = col`` and the minimal total.
    """
    n = cost.shape[0]
    inf = float("inf")
    u = [0.0] * (n + 1)
    v = [0.0] * (n + 1)
    p = [0] * (n + 1)  # p[col] = row, 1-based, 0 = free
    way = [0] * (n + 1)
    c = cost.tolist()
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = [inf] * (n + 1)
        used = [False] * (n + 1)
        while True:
            used[j0] = True
            i0 = p[j0]
            row = c[i0 - 1]
            ui0 = u[i0]
            delta = inf
            j1 = 0
            for j in range(1, n + 1):
                if not used[j]:
                    cur = row[j - 1] - ui0 - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    assignment = [0] * n
    for j in range(1, n + 1):
        assignment[p[j] - 1] = j - 1
    total = sum(c[i][assignment[i]] for i in range(n))
    return assignment, total


def _optimum(cost: np.ndarray) -> float:
    """Minimal total over matchings of size ``min(rows, cols)``."""
    r, k = cost.shape
    if r == 0 or k == 0:
        return 0.0
    n = max(r, k)
    square = np.zeros((n, n))
    square[:r, :k] = cost
    return _min_cost_square(square)[1]


def _close(a: float, b: float) -> bool:
    return abs(a - b) <= 1e-9 * max(1.0, abs(a), abs(b))


def hungarian_match(cost) -> Assignment:
    """Minimum-cost assignment of ``min(rows, cols)`` pairs.

    Among optimal assignments the one whose row-sorted pair sequence is
    lexicographically smallest is returned.
    """
    cost = np.asarray(cost, dtype=float)
    if cost.ndim != 2 or cost.size == 0:
        raise ValueError(f"cost matrix must be non-empty 2-D, got shape {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix has non-finite entries")
    n_rows, n_cols = cost.shape
    best = _optimum(cost)

    # Fix pairs greedily in lexicographic order, keeping the optimum reachable.
    rows = list(range(n_rows))
    cols = list(range(n_cols))
    pairs = []
    spent = 0.0
    need = min(n_rows, n_cols)
    while len(pairs) < need:
        r = rows[0]
        chosen = None
        for ci, c in enumerate(cols):
            sub = cost[np.ix_(rows[1:], cols[:ci] + cols[ci + 1:])]
            if _close(spent + cost[r, c] + _optimum(sub), best):
                chosen = c
                break
        rows.pop(0)
        if chosen is None:
            continue  # this row stays unmatched (only when rows > cols)
        cols.remove(chosen)
        pairs.append((r, chosen))
        spent += cost[r, chosen]
    total = float(sum(cost[r, c] for r, c in pairs))
    return Assignment(tuple(pairs), total)
