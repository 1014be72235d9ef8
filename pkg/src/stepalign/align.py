"""Sequence alignment kernels.

drop_dtw computes a minimum-cost monotone correspondence between two ordered
sequences where elements on either side may be dropped for a fixed per-element
penalty. One-to-one mode matches each row with at most one column; many-to-one
mode lets a row absorb several columns. dtw is the classic boundary-to-boundary
alignment without drops. brute_force_align enumerates every legal
correspondence and is the test oracle for both.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import Correspondence, DataError, EmbeddingSequence

MODES = ("one_to_one", "many_to_one")

# traceback action codes, in tie-break preference order per state
_MATCH_NEW_OPEN = 0   # match (i, j), row i-1 was matched
_MATCH_NEW_DROP = 1   # match (i, j), row i-1 was dropped
_MATCH_EXTEND = 2     # match (i, j), row i already open (many_to_one)
_SKIP_COL_OPEN = 3    # drop column j while row i stays open
_SKIP_COL_DROP = 4    # drop column j while row i stays dropped
_DROP_ROW_OPEN = 5    # drop row i, row i-1 was matched
_DROP_ROW_DROP = 6    # drop row i, row i-1 was dropped


@dataclass(frozen=True)
class CostSpec:
    """Match costs plus optional per-side drop penalties."""

    match_cost: np.ndarray
    row_drop_cost: float | None = None
    col_drop_cost: float | None = None

    def __post_init__(self):
        costs = np.asarray(self.match_cost, dtype=np.float64)
        if costs.ndim != 2 or costs.size == 0:
            raise DataError("match_cost must be a non-empty 2-d matrix")
        if not np.isfinite(costs).all():
            raise DataError("match_cost contains non-finite entries")
        for name in ("row_drop_cost", "col_drop_cost"):
            value = getattr(self, name)
            if value is not None:
                value = float(value)
                if not math.isfinite(value):
                    raise DataError(f"{name} must be finite")
                object.__setattr__(self, name, value)
        if self.row_drop_cost is None and self.col_drop_cost is None:
            raise DataError("at least one drop cost must be present")
        costs = costs.copy()
        costs.flags.writeable = False
        object.__setattr__(self, "match_cost", costs)

    @property
    def shape(self):
        return self.match_cost.shape


def normalize_rows(data: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(data, axis=1, keepdims=True)
    if (norms == 0.0).any():
        raise DataError("zero-norm row")
    return data / norms


def match_cost_matrix(x: EmbeddingSequence, z: EmbeddingSequence) -> np.ndarray:
    """Negative cosine similarity; rows follow z, columns follow x."""
    if x.dim != z.dim:
        raise DataError(f"dimension mismatch: {z.dim} vs {x.dim}")
    return -(normalize_rows(z.data) @ normalize_rows(x.data).T)


def percentile_drop_cost(costs: np.ndarray, p: float = 0.8) -> float:
    """Nearest-rank percentile of the flattened cost matrix."""
    costs = np.asarray(costs, dtype=np.float64)
    if costs.size == 0:
        raise DataError("empty cost matrix")
    if not np.isfinite(costs).all():
        raise DataError("non-finite costs")
    if not (0.0 < p <= 1.0):
        raise DataError(f"percentile must lie in (0, 1], got {p}")
    flat = np.sort(costs, axis=None)
    rank = math.ceil(p * flat.size) - 1
    return float(flat[rank])


def _canonical_total(costs, matches, n_dropped_rows, n_dropped_cols, row_drop, col_drop):
    # single summation order shared by the DP, the oracle, and consistency checks
    total = 0.0
    for i, j in matches:
        total += costs[i, j]
    if n_dropped_rows:
        total += n_dropped_rows * row_drop
    if n_dropped_cols:
        total += n_dropped_cols * col_drop
    return total


def recompute_total(spec: CostSpec, corr: Correspondence) -> float:
    """Total cost implied by a correspondence's matches and drop sets."""
    return _canonical_total(
        spec.match_cost,
        corr.matches,
        len(corr.dropped_rows),
        len(corr.dropped_cols),
        spec.row_drop_cost if spec.row_drop_cost is not None else 0.0,
        spec.col_drop_cost if spec.col_drop_cost is not None else 0.0,
    )


def drop_dtw(spec: CostSpec, mode: str) -> Correspondence:
    """Minimum-total-cost correspondence with drops.

    Dynamic program over (rows consumed, columns consumed, row state) where the
    current row is either open (matched at least once, may absorb further
    columns in many_to_one mode) or dropped. A side without a drop cost cannot
    drop; costs admitting no feasible correspondence are rejected.
    """
    if mode not in MODES:
        raise DataError(f"unknown mode {mode!r}")
    costs = spec.match_cost
    K, N = costs.shape
    row_drop = spec.row_drop_cost if spec.row_drop_cost is not None else math.inf
    col_drop = spec.col_drop_cost if spec.col_drop_cost is not None else math.inf
    extend_ok = mode == "many_to_one"

    inf = math.inf
    open_tab = np.full((K + 1, N + 1), inf)
    drop_tab = np.full((K + 1, N + 1), inf)
    open_ptr = np.full((K + 1, N + 1), -1, dtype=np.int8)
    drop_ptr = np.full((K + 1, N + 1), -1, dtype=np.int8)

    drop_tab[0, 0] = 0.0
    for i in range(1, K + 1):
        drop_tab[i, 0] = drop_tab[i - 1, 0] + row_drop
        drop_ptr[i, 0] = _DROP_ROW_DROP
    for j in range(1, N + 1):
        drop_tab[0, j] = drop_tab[0, j - 1] + col_drop
        drop_ptr[0, j] = _SKIP_COL_DROP

    for i in range(1, K + 1):
        ci = costs[i - 1]
        for j in range(1, N + 1):
            c = ci[j - 1]
            # row i open at (i, j); candidates in tie-break preference order
            best, ptr = open_tab[i - 1, j - 1] + c, _MATCH_NEW_OPEN
            cand = drop_tab[i - 1, j - 1] + c
            if cand < best:
                best, ptr = cand, _MATCH_NEW_DROP
            if extend_ok:
                cand = open_tab[i, j - 1] + c
                if cand < best:
                    best, ptr = cand, _MATCH_EXTEND
            cand = open_tab[i, j - 1] + col_drop
            if cand < best:
                best, ptr = cand, _SKIP_COL_OPEN
            open_tab[i, j], open_ptr[i, j] = best, ptr
            # row i dropped at (i, j)
            best, ptr = drop_tab[i, j - 1] + col_drop, _SKIP_COL_DROP
            cand = open_tab[i - 1, j] + row_drop
            if cand < best:
                best, ptr = cand, _DROP_ROW_OPEN
            cand = drop_tab[i - 1, j] + row_drop
            if cand < best:
                best, ptr = cand, _DROP_ROW_DROP
            drop_tab[i, j], drop_ptr[i, j] = best, ptr

    if open_tab[K, N] <= drop_tab[K, N]:
        state, optimum = "open", open_tab[K, N]
    else:
        state, optimum = "drop", drop_tab[K, N]
    if not math.isfinite(optimum):
        raise DataError("no feasible correspondence (a side without a drop cost cannot drop)")

    matches = []
    i, j = K, N
    while i > 0 or j > 0:
        ptr = open_ptr[i, j] if state == "open" else drop_ptr[i, j]
        if ptr in (_MATCH_NEW_OPEN, _MATCH_NEW_DROP):
            matches.append((i - 1, j - 1))
            state = "open" if ptr == _MATCH_NEW_OPEN else "drop"
            i, j = i - 1, j - 1
        elif ptr == _MATCH_EXTEND:
            matches.append((i - 1, j - 1))
            state = "open"
            j -= 1
        elif ptr in (_SKIP_COL_OPEN, _SKIP_COL_DROP):
            state = "open" if ptr == _SKIP_COL_OPEN else "drop"
            j -= 1
        elif ptr in (_DROP_ROW_OPEN, _DROP_ROW_DROP):
            state = "open" if ptr == _DROP_ROW_OPEN else "drop"
            i -= 1
        else:
            raise AssertionError("broken traceback")
    matches.reverse()

    matrix = np.zeros((K, N), dtype=np.int8)
    for mi, mj in matches:
        matrix[mi, mj] = 1
    dropped_rows = {r for r in range(K) if matrix[r].sum() == 0}
    dropped_cols = {c for c in range(N) if matrix[:, c].sum() == 0}
    total = _canonical_total(
        costs, matches, len(dropped_rows), len(dropped_cols),
        row_drop if math.isfinite(row_drop) else 0.0,
        col_drop if math.isfinite(col_drop) else 0.0,
    )
    assert abs(total - optimum) <= 1e-9 * max(1.0, abs(optimum)), "traceback disagrees with DP optimum"
    return Correspondence(matrix, total, dropped_rows, dropped_cols, mode)


def dtw(costs: np.ndarray) -> Correspondence:
    """Classic DTW: full monotone path with steps (1,0), (0,1), (1,1)."""
    costs = np.asarray(costs, dtype=np.float64)
    if costs.ndim != 2 or costs.size == 0:
        raise DataError("costs must be a non-empty 2-d matrix")
    if not np.isfinite(costs).all():
        raise DataError("non-finite costs")
    K, N = costs.shape
    acc = np.full((K, N), math.inf)
    acc[0, 0] = costs[0, 0]
    for i in range(K):
        for j in range(N):
            if i == 0 and j == 0:
                continue
            best = math.inf
            if i > 0 and j > 0:
                best = acc[i - 1, j - 1]
            if i > 0:
                best = min(best, acc[i - 1, j])
            if j > 0:
                best = min(best, acc[i, j - 1])
            acc[i, j] = costs[i, j] + best
    # traceback, preferring the diagonal on ties
    path = [(K - 1, N - 1)]
    i, j = K - 1, N - 1
    while i > 0 or j > 0:
        options = []
        if i > 0 and j > 0:
            options.append((acc[i - 1, j - 1], i - 1, j - 1))
        if i > 0:
            options.append((acc[i - 1, j], i - 1, j))
        if j > 0:
            options.append((acc[i, j - 1], i, j - 1))
        _, i, j = min(options, key=lambda t: t[0])
        path.append((i, j))
    path.reverse()
    matrix = np.zeros((K, N), dtype=np.int8)
    for pi, pj in path:
        matrix[pi, pj] = 1
    total = 0.0
    for pi, pj in path:
        total += costs[pi, pj]
    return Correspondence(matrix, total, set(), set(), "many_to_many")


# --- exhaustive oracles -----------------------------------------------------

def brute_force_align(spec: CostSpec, mode: str) -> Correspondence:
    """Enumerate every correspondence legal for `mode` and return a cheapest one.

    Ties prefer more matches, then the lexicographically smallest match set.
    Only intended for small instances.
    """
    if mode not in MODES:
        raise DataError(f"unknown mode {mode!r}")
    K, N = spec.shape
    if K > 6 or N > 7:
        raise DataError(f"oracle bound exceeded: {K}x{N} (max 6x7)")
    costs = spec.match_cost
    row_drop = spec.row_drop_cost
    col_drop = spec.col_drop_cost

    best = None  # (total, -num_matches, matches)

    def consider(matches, used_rows):
        nonlocal best
        if row_drop is None and used_rows != K:
            return
        if col_drop is None and len(matches) != N:
            return
        dropped_cols = N - len(matches)
        dropped_rows = K - used_rows
        total = _canonical_total(
            costs, matches, dropped_rows, dropped_cols,
            row_drop if row_drop is not None else 0.0,
            col_drop if col_drop is not None else 0.0,
        )
        key = (total, -len(matches), tuple(matches))
        if best is None or key < best:
            best = key

    if mode == "one_to_one":
        def recurse(row_start, col_start, matches):
            consider(list(matches), len(matches))
            for i in range(row_start, K):
                for j in range(col_start, N):
                    matches.append((i, j))
                    recurse(i + 1, j + 1, matches)
                    matches.pop()
        recurse(0, 0, [])
    else:
        def recurse(j, last_row, used_rows, matches):
            if j == N:
                consider(list(matches), used_rows)
                return
            recurse(j + 1, last_row, used_rows, matches)  # drop column j
            for r in range(max(last_row, 0), K):
                matches.append((r, j))
                recurse(j + 1, r, used_rows + (1 if r != last_row else 0), matches)
                matches.pop()
        recurse(0, -1, 0, [])

    if best is None:
        raise DataError("no feasible correspondence")
    total, _, matches = best
    matrix = np.zeros((K, N), dtype=np.int8)
    for i, j in matches:
        matrix[i, j] = 1
    dropped_rows = {r for r in range(K) if matrix[r].sum() == 0}
    dropped_cols = {c for c in range(N) if matrix[:, c].sum() == 0}
    return Correspondence(matrix, total, dropped_rows, dropped_cols, mode)


def brute_force_dtw(costs: np.ndarray) -> float:
    """Minimum path cost over all monotone boundary-to-boundary DTW paths."""
    costs = np.asarray(costs, dtype=np.float64)
    K, N = costs.shape
    best = math.inf

    def recurse(i, j, running):
        nonlocal best
        running = running + costs[i, j]
        if i == K - 1 and j == N - 1:
            best = min(best, running)
            return
        if i + 1 < K and j + 1 < N:
            recurse(i + 1, j + 1, running)
        if i + 1 < K:
            recurse(i + 1, j, running)
        if j + 1 < N:
            recurse(i, j + 1, running)

    recurse(0, 0, 0.0)
    return best
