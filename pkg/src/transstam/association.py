"""Turning match probabilities into one-to-one tracklet/detection pairs."""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

DEFAULT_TAU = 0.5
DEFAULT_MAX_SPEED = 0.1


@dataclass
class Matching:
    pairs: list = field(default_factory=list)
    unmatched_tracklets: list = field(default_factory=list)
    unmatched_detections: list = field(default_factory=list)


def pair_speeds(track_centers, track_frames, det_centers, frame):
    """(N, M) implied speeds: center distance over frame gap, normalized units.

    Pairs whose tracklet ends on ``frame`` or later get ``inf``.
    """
    track_centers = np.asarray(track_centers, dtype=np.float64).reshape(-1, 2)
    det_centers = np.asarray(det_centers, dtype=np.float64).reshape(-1, 2)
    gaps = frame - np.asarray(track_frames, dtype=np.float64).reshape(-1)
    dist = np.linalg.norm(track_centers[:, None, :] - det_centers[None, :, :], axis=-1)
    speed = np.full(dist.shape, np.inf)
    ok = gaps > 0
    if not ok.all():
        warnings.warn("tracklet ends on the current frame; its pairs are masked", RuntimeWarning, stacklevel=3)
    speed[ok] = dist[ok] / gaps[ok, None]
    return speed


def speed_filter(track_centers, track_frames, det_centers, frame, max_speed=DEFAULT_MAX_SPEED):
    """Boolean (N, M) mask, True where the implied speed exceeds ``max_speed``.

    Speed is the distance between the tracklet's latest box center and the
    detection center divided by the frame gap, in normalized units.
    """
    if max_speed <= 0:
        raise ValueError("max_speed must be positive")
    return pair_speeds(track_centers, track_frames, det_centers, frame) > max_speed


def cap_candidates(mask, speed, k):
    """Also mask all but the ``k`` slowest admissible tracklets of each detection.

    Ties go to the lower tracklet index.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    mask = np.asarray(mask, dtype=bool).copy()
    n = mask.shape[0]
    if n <= k:
        return mask
    key = np.where(mask, np.inf, speed)
    order = np.argsort(key, axis=0, kind="stable")
    drop = np.zeros_like(mask)
    np.put_along_axis(drop, order[k:], True, axis=0)
    return mask | drop


# ------------------------------------------------------------------ Hungarian


def _solve_rect(cost):
    """Shortest-augmenting-path assignment of every row of a wide (n <= m) matrix.

    Returns (col_of_row, u, v) with ``u[i] + v[j] <= cost[i, j]``, equality on
    the assignment, ``v <= 0`` everywhere and ``v == 0`` on unused columns.
    """
    n, m = cost.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=np.intp)
    way = np.zeros(m + 1, dtype=np.intp)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            free = ~used[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    col_of_row = np.empty(n, dtype=np.intp)
    taken = np.flatnonzero(p[1:])
    col_of_row[p[1:][taken] - 1] = taken
    return col_of_row, u[1:], v[1:]


def _solve_square(cost, n_rows, n_cols):
    """Optimal assignment of a zero-padded square matrix whose real part is n_rows x n_cols.

    Only the real part is solved; padding rows or columns take what is left
    with dual 0, which keeps every reduced cost non-negative.
    """
    n = cost.shape[0]
    col_of_row = np.empty(n, dtype=np.intp)
    u = np.zeros(n)
    v = np.zeros(n)
    if n_rows <= n_cols:
        col_of_row[:n_rows], u[:n_rows], v[:] = _solve_rect(cost[:n_rows])
        free = np.setdiff1d(np.arange(n), col_of_row[:n_rows])
        col_of_row[n_rows:] = free
    else:
        row_of_col, v[:n_cols], u[:] = _solve_rect(cost[:, :n_cols].T)
        col_of_row[:] = -1
        col_of_row[row_of_col] = np.arange(n_cols)
        idle = col_of_row < 0
        col_of_row[idle] = np.arange(n_cols, n)
    return col_of_row, u, v


def _canonicalize(cost, col_of_row, u, v, admissible):
    """Rotate an optimal assignment to the lexicographically smallest admissible pair list.

    Every assignment made only of zero-reduced-cost edges is optimal, so
    rows are fixed one at a time to their smallest admissible column that
    still closes an alternating cycle through tight edges. Unmatched rows
    (and padding) are never fixed, so the columns they hold stay reachable.
    """
    n = cost.shape[0]
    tol = 1e-9 * max(1.0, float(np.abs(cost).max()))
    tight = cost - u[:, None] - v[None, :] <= tol
    tight[np.arange(n), col_of_row] = True
    col_of_row = col_of_row.copy()
    row_of_col = np.empty(n, dtype=np.intp)
    row_of_col[col_of_row] = np.arange(n)
    fixed = np.zeros(n, dtype=bool)
    for r in np.flatnonzero((tight & admissible).any(axis=1)):
        cur = col_of_row[r]
        nxt = {cur: None}
        frontier = [cur]
        while frontier:
            new = []
            for x in frontier:
                rows = np.flatnonzero(tight[:, x] & ~fixed)
                for q in rows:
                    if q == r:
                        continue
                    c = col_of_row[q]
                    if c not in nxt:
                        nxt[c] = x
                        new.append(c)
            frontier = new
        options = [c for c in nxt if tight[r, c] and admissible[r, c]]
        if not options:
            # row stays unmatched; its placeholder column may still move
            continue
        best = min(options)
        if best != cur:
            x = best
            while x != cur:
                q = row_of_col[x]
                col_of_row[q] = nxt[x]
                x = nxt[x]
            col_of_row[r] = best
            row_of_col[col_of_row] = np.arange(n)
        fixed[r] = True
    return col_of_row


def _admissible(cost, mask):
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError(f"cost must be a matrix, got shape {cost.shape}")
    ok = np.isfinite(cost)
    if mask is not None:
        ok &= ~np.asarray(mask, dtype=bool)
    return cost, ok


def matching_cost(cost, pairs):
    return math.fsum(float(cost[r, c]) for r, c in sorted(pairs))


def _components(ok):
    """Connected components of the admissible bipartite graph as (rows, cols) index arrays."""
    n_rows, n_cols = ok.shape
    row_seen = np.zeros(n_rows, dtype=bool)
    out = []
    for start in np.flatnonzero(ok.any(axis=1)):
        if row_seen[start]:
            continue
        rows = np.zeros(n_rows, dtype=bool)
        rows[start] = True
        cols = np.zeros(n_cols, dtype=bool)
        while True:
            new_cols = ok[rows].any(axis=0) & ~cols
            if not new_cols.any():
                break
            cols |= new_cols
            rows |= ok[:, new_cols].any(axis=1)
        row_seen |= rows
        out.append((np.flatnonzero(rows), np.flatnonzero(cols)))
    return out


def _solve_block(cost, ok):
    n_rows, n_cols = cost.shape
    n = max(n_rows, n_cols)
    real = cost[ok]
    span = float(real.max() - real.min())
    sentinel = float(real.max()) + (n + 1) * (span + 1.0)
    square = np.zeros((n, n))
    square[:n_rows, :n_cols] = np.where(ok, cost, sentinel)
    admissible = np.zeros((n, n), dtype=bool)
    admissible[:n_rows, :n_cols] = ok
    col_of_row, u, v = _solve_square(square, n_rows, n_cols)
    col_of_row = _canonicalize(square, col_of_row, u, v, admissible)
    return [(r, int(col_of_row[r])) for r in range(n_rows) if admissible[r, col_of_row[r]]]


def hungarian(cost, mask=None):
    """Minimum-cost matching among maximum matchings of admissible pairs.

    ``mask`` marks inadmissible pairs (non-finite costs are also
    inadmissible). Ties are broken towards the lexicographically smallest
    sorted (row, col) list. Returns that sorted list.

    Connected groups of admissible pairs are solved separately: both the
    optimum and the tie-break decompose over groups sharing no row or column.
    """
    cost, ok = _admissible(cost, mask)
    if cost.shape[0] == 0 or cost.shape[1] == 0 or not ok.any():
        return []
    pairs = []
    for rows, cols in _components(ok):
        sub = _solve_block(cost[np.ix_(rows, cols)], ok[np.ix_(rows, cols)])
        pairs += [(int(rows[r]), int(cols[c])) for r, c in sub]
    return sorted(pairs)


def brute_force_match(cost, mask=None, limit=8):
    """Exhaustive version of :func:`hungarian` for small matrices (test oracle)."""
    cost, ok = _admissible(cost, mask)
    n_rows, n_cols = cost.shape
    if min(n_rows, n_cols) > limit:
        raise ValueError(f"brute force refuses a {n_rows}x{n_cols} problem")
    if n_rows == 0 or n_cols == 0:
        return []
    best_key, best = None, []
    if n_rows <= n_cols:
        candidates = (list(zip(range(n_rows), cols)) for cols in itertools.permutations(range(n_cols), n_rows))
    else:
        candidates = (list(zip(rows, range(n_cols))) for rows in itertools.permutations(range(n_rows), n_cols))
    for cand in candidates:
        pairs = sorted((r, c) for r, c in cand if ok[r, c])
        key = (-len(pairs), matching_cost(cost, pairs), pairs)
        if best_key is None or key < best_key:
            best_key, best = key, pairs
    return best


# ------------------------------------------------------------------ association


def associate(values, tau=DEFAULT_TAU, mask=None, row_ids=None, order="match_then_filter"):
    """Optimal one-to-one matching on ``1 - A`` keeping only pairs with ``A > tau``.

    ``order="filter_then_match"`` masks sub-threshold pairs before solving
    instead of discarding them after.
    """
    if not 0 < tau < 1:
        raise ValueError("tau must lie in (0, 1)")
    values = np.asarray(values, dtype=np.float64)
    n_rows, n_cols = values.shape
    row_ids = list(range(n_rows)) if row_ids is None else list(row_ids)
    mask = np.zeros(values.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if order == "filter_then_match":
        mask = mask | (values <= tau)
    elif order != "match_then_filter":
        raise ValueError(f"unknown order {order!r}")
    pairs = [(r, c) for r, c in hungarian(1.0 - values, mask) if values[r, c] > tau]
    rows = {r for r, _ in pairs}
    cols = {c for _, c in pairs}
    return Matching(
        pairs=[(row_ids[r], c) for r, c in pairs],
        unmatched_tracklets=[row_ids[r] for r in range(n_rows) if r not in rows],
        unmatched_detections=[c for c in range(n_cols) if c not in cols],
    )
