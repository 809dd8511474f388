"""Minimum-cost bipartite assignment with forbidden pairs.

Implements the O(n^3) potential/shortest-augmenting-path form of the
Hungarian algorithm. Rectangular inputs are padded to square; forbidden
pairs (np.inf) and padding are mapped to a finite sentinel strictly larger
than any achievable finite total, then any pair that went through the
sentinel is dropped from the result. The net effect: rows and columns may
stay unmatched, and no reported pair is ever forbidden.
"""

from __future__ import annotations

import numpy as np

FORBIDDEN = np.inf


def hungarian(cost: np.ndarray) -> list[tuple[int, int]]:
    """Optimal assignment for a (rows, cols) cost matrix.

    Entries set to np.inf can never be matched. Returns (row, col) pairs
    sorted by row; rows/columns left over (or only matchable through a
    forbidden entry) are simply absent from the result.
    """
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2:
        raise ValueError("cost matrix must be 2D")
    rows, cols = c.shape
    if rows == 0 or cols == 0:
        return []
    if np.any(np.isnan(c)) or np.any(np.isneginf(c)):
        raise ValueError("cost entries must be finite or +inf")

    finite = np.isfinite(c)
    # Any assignment that avoids k forbidden cells beats any that uses k+1,
    # because one sentinel exceeds the whole spread of finite totals.
    big = 2.0 * float(np.abs(c[finite]).sum()) + 1.0
    n = max(rows, cols)
    a = np.full((n, n), big)
    a[:rows, :cols] = np.where(finite, c, big)

    col_of_row = _solve_square(a)
    out = [
        (r, col_of_row[r])
        for r in range(rows)
        if col_of_row[r] < cols and finite[r, col_of_row[r]]
    ]
    return sorted(out)


def _solve_square(a: np.ndarray) -> list[int]:
    """Column assigned to each row of a square matrix, minimizing total cost."""
    n = len(a)
    u = [0.0] * (n + 1)
    v = [0.0] * (n + 1)
    p = [0] * (n + 1)  # p[j]: 1-based row matched to 1-based column j
    way = [0] * (n + 1)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = [np.inf] * (n + 1)
        used = [False] * (n + 1)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = np.inf
            j1 = 0
            for j in range(1, n + 1):
                if used[j]:
                    continue
                cur = a[i0 - 1, j - 1] - u[i0] - v[j]
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
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    col_of_row = [0] * n
    for j in range(1, n + 1):
        if p[j]:
            col_of_row[p[j] - 1] = j - 1
    return col_of_row
