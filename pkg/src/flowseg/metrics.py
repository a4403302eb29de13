"""Distribution-level segmentation metrics.

Masks are boolean (or 0/1) arrays of identical shape.  A *mask set* is any
sequence of masks, or an array whose leading axis indexes masks.

The distance between two masks is ``1 - IoU``.  When both masks are empty
the IoU is undefined; :class:`EmptyPolicy` decides whether such a pair counts
as a perfect match or is dropped.
"""

from __future__ import annotations

import enum
import itertools
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "EmptyPolicy",
    "UndefinedMetricError",
    "iou",
    "pairwise_iou",
    "ged_squared",
    "hungarian_solve",
    "hungarian_matched_iou",
    "average_iou",
    "ged_curve",
    "brute_force_assignment",
]


class EmptyPolicy(enum.Enum):
    INCLUDE_AS_ONE = "include"
    EXCLUDE = "exclude"

    @classmethod
    def parse(cls, value) -> "EmptyPolicy":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("-", "_")
        aliases = {"include": cls.INCLUDE_AS_ONE, "include_as_one": cls.INCLUDE_AS_ONE,
                   "incl": cls.INCLUDE_AS_ONE, "exclude": cls.EXCLUDE, "excl": cls.EXCLUDE}
        try:
            return aliases[key]
        except KeyError:
            raise ValueError(f"unknown empty policy {value!r}") from None


class UndefinedMetricError(ValueError):
    """Every pair contributing to a term had an empty union under EXCLUDE."""


def _as_mask_set(masks) -> np.ndarray:
    arr = np.asarray(masks)
    if arr.ndim < 2 or arr.shape[0] == 0:
        raise ValueError("mask set must be a non-empty sequence of masks")
    return arr.reshape(arr.shape[0], -1).astype(bool)


def iou(a, b, policy=EmptyPolicy.INCLUDE_AS_ONE) -> float | None:
    """IoU of two masks; ``None`` when the union is empty under EXCLUDE."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"iou: mask shapes differ, {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0 if EmptyPolicy.parse(policy) is EmptyPolicy.INCLUDE_AS_ONE else None
    return np.count_nonzero(a & b) / union


def pairwise_iou(A, B, policy=EmptyPolicy.INCLUDE_AS_ONE) -> np.ndarray:
    """Matrix of IoU values between every mask of A and every mask of B.

    Undefined entries are NaN under EXCLUDE.
    """
    a = _as_mask_set(A).astype(np.int64)
    b = _as_mask_set(B).astype(np.int64)
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"mask sets differ in mask size ({a.shape[1]} vs {b.shape[1]} pixels)")
    inter = a @ b.T
    union = a.sum(1)[:, None] + b.sum(1)[None, :] - inter
    empty = union == 0
    out = inter / np.where(empty, 1, union)
    fill = 1.0 if EmptyPolicy.parse(policy) is EmptyPolicy.INCLUDE_AS_ONE else np.nan
    out[empty] = fill
    return out


def _mean_distance(A, B, policy, term: str) -> float:
    d = 1.0 - pairwise_iou(A, B, policy)
    d = d[~np.isnan(d)]
    if d.size == 0:
        raise UndefinedMetricError(f"GED term {term}: every pair has an empty union")
    return float(d.mean())


def ged_squared(S, Y, policy=EmptyPolicy.INCLUDE_AS_ONE) -> float:
    """Squared generalized energy distance between ground truth S and predictions Y.

    Expectations are means over the full ordered cross product of each pair of
    sets, including equal-index pairs, so ``ged_squared(S, S) == 0``.
    """
    policy = EmptyPolicy.parse(policy)
    cross = _mean_distance(S, Y, policy, "d(S,Y)")
    gt = _mean_distance(S, S, policy, "d(S,S')")
    pred = _mean_distance(Y, Y, policy, "d(Y,Y')")
    return 2.0 * cross - gt - pred


# -- assignment ---------------------------------------------------------------


def _hungarian_duals(cost: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Shortest-augmenting-path Hungarian method with row/column potentials.

    Returns (assignment, u, v) with ``cost[i, j] - u[i] - v[j] >= 0`` and
    equality on the assigned pairs.
    """
    n = cost.shape[0]
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    match = np.zeros(n + 1, dtype=np.int64)  # match[j] = row (1-based) owning column j
    way = np.zeros(n + 1, dtype=np.int64)
    c = np.zeros((n + 1, n + 1))
    c[1:, 1:] = cost
    for i in range(1, n + 1):
        match[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = match[j0]
            free = ~used
            free[0] = False
            cur = c[i0] - u[i0] - v
            better = free & (cur < minv)
            minv[better] = cur[better]
            way[better] = j0
            cand = np.where(free, minv, np.inf)
            j1 = int(np.argmin(cand))
            delta = cand[j1]
            u[match[used]] += delta
            v[used] -= delta
            minv[free] -= delta
            j0 = j1
            if match[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            match[j0] = match[j1]
            j0 = j1
    assignment = np.empty(n, dtype=np.int64)
    assignment[match[1:] - 1] = np.arange(n)
    return assignment, u[1:], v[1:]


def _has_perfect_matching(adj: np.ndarray, rows: list[int], cols_free: np.ndarray) -> bool:
    """Kuhn's augmenting-path check restricted to ``rows`` and free columns."""
    owner = {}

    def augment(r, seen):
        for c in np.flatnonzero(adj[r] & cols_free):
            if c in seen:
                continue
            seen.add(c)
            if c not in owner or augment(owner[c], seen):
                owner[c] = r
                return True
        return False

    return all(augment(r, set()) for r in rows)


def hungarian_solve(cost) -> np.ndarray:
    """Minimum-cost perfect matching of a square cost matrix.

    Returns ``assignment`` with row ``i`` matched to column ``assignment[i]``.
    Among all optimal matchings the lexicographically smallest assignment
    vector is returned.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise ValueError(f"hungarian_solve needs a square matrix, got shape {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise ValueError("hungarian_solve: costs must be finite")
    n = cost.shape[0]
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    _, u, v = _hungarian_duals(cost)
    # every optimal matching uses only tight edges, and any perfect matching
    # on tight edges is optimal; walk rows picking the smallest feasible column
    reduced = cost - u[:, None] - v[None, :]
    scale = max(1.0, float(np.abs(cost).max()))
    tight = reduced <= 1e-9 * scale * n
    free = np.ones(n, dtype=bool)
    out = np.empty(n, dtype=np.int64)
    for i in range(n):
        for j in np.flatnonzero(tight[i] & free):
            free[j] = False
            if _has_perfect_matching(tight, list(range(i + 1, n)), free):
                out[i] = j
                break
            free[j] = True
        else:  # pragma: no cover - tight graph always admits a matching
            raise RuntimeError("hungarian_solve: no tight matching found")
    return out


def brute_force_assignment(cost) -> np.ndarray:
    """Exhaustive search over permutations; lexicographically first optimum."""
    cost = np.asarray(cost, dtype=np.float64)
    n = cost.shape[0]
    best, best_perm = np.inf, None
    rows = np.arange(n)
    for perm in itertools.permutations(range(n)):
        total = cost[rows, perm].sum()
        if total < best - 1e-12:
            best, best_perm = total, perm
    return np.array(best_perm, dtype=np.int64)


def hungarian_matched_iou(S, Y) -> float:
    """Mean IoU over an optimal matching of duplicated ground truth to samples."""
    s = _as_mask_set(S)
    y = _as_mask_set(Y)
    if len(y) % len(s):
        raise ValueError(
            f"{len(y)} samples is not a multiple of {len(s)} annotations; "
            f"draw a multiple of {len(s)} samples"
        )
    s = np.tile(s, (len(y) // len(s), 1))
    ious = pairwise_iou(s, y, EmptyPolicy.INCLUDE_AS_ONE)
    assignment = hungarian_solve(1.0 - ious)
    return float(ious[np.arange(len(s)), assignment].mean())


def average_iou(S, Y, policy=EmptyPolicy.INCLUDE_AS_ONE) -> float:
    """Mean IoU of every sample against the single annotation."""
    s = _as_mask_set(S)
    if len(s) != 1:
        raise ValueError("average_iou expects one annotation; use hungarian_matched_iou")
    vals = pairwise_iou(s, Y, policy)[0]
    vals = vals[~np.isnan(vals)]
    if vals.size == 0:
        raise UndefinedMetricError("average IoU: every pair has an empty union")
    return float(vals.mean())


def ged_curve(
    S,
    sampler: Callable[[int, np.random.Generator], np.ndarray],
    sizes: Sequence[int],
    repeats: int,
    rng: np.random.Generator,
    policy=EmptyPolicy.INCLUDE_AS_ONE,
) -> list[dict]:
    """Mean and standard deviation of GED over repeated n-sample prediction sets.

    ``sampler(n, rng)`` must return ``n`` masks.  Draws happen in order of
    ``sizes`` then repeats, so a caller replaying the same generator sees the
    same prediction sets.
    """
    if any(n < 2 for n in sizes):
        raise ValueError("every sample size must be at least 2")
    rows = []
    for n in sizes:
        vals = np.array([ged_squared(S, sampler(n, rng), policy) for _ in range(repeats)])
        rows.append({"size": int(n), "mean": float(vals.mean()), "std": float(vals.std()),
                     "values": vals})
    return rows
