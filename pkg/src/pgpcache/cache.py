"""Static cache placement and cache-hit-ratio evaluation.

Placement maximises predicted hits ``w . r`` subject to ``w . s <= C`` with
``w`` binary.  The production solver is a ratio-greedy fill; an exact
dynamic program serves as the small-instance oracle.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from pgpcache.errors import InvalidInputError
from pgpcache.posterior import RequestMatrix, mle_popularity

SEEN_BUDGET_SHARE = 0.8


@dataclass(frozen=True)
class ContentCatalog:
    sizes: np.ndarray
    seen_mask: np.ndarray

    def __post_init__(self):
        sizes = np.asarray(self.sizes, dtype=float)
        seen = np.asarray(self.seen_mask, dtype=bool)
        if sizes.ndim != 1 or sizes.shape != seen.shape:
            raise InvalidInputError("sizes and seen_mask must be 1-d of equal length")
        if not np.all(np.isfinite(sizes)) or np.any(sizes <= 0):
            raise InvalidInputError("content sizes must be finite and > 0")
        if not seen.any():
            raise InvalidInputError("catalog needs at least one seen content")
        object.__setattr__(self, "sizes", sizes)
        object.__setattr__(self, "seen_mask", seen)

    @property
    def n_contents(self) -> int:
        return self.sizes.size

    @property
    def total_size(self) -> float:
        return float(self.sizes.sum())

    @classmethod
    def uniform(cls, seen_mask) -> "ContentCatalog":
        seen = np.asarray(seen_mask, dtype=bool)
        return cls(np.ones(seen.size), seen)


@dataclass(frozen=True)
class CachePlan:
    selected: np.ndarray
    used_capacity: float
    predicted_value: float

    @property
    def n_selected(self) -> int:
        return int(self.selected.sum())


def _make_plan(selected, popularities, sizes) -> CachePlan:
    selected = np.asarray(selected, dtype=bool)
    return CachePlan(selected, float(sizes[selected].sum()), float(popularities[selected].sum()))


def _check(popularities, catalog, capacity):
    r = np.asarray(popularities, dtype=float)
    if r.shape != catalog.sizes.shape:
        raise InvalidInputError(f"{r.size} popularities for {catalog.n_contents} contents")
    if np.any(r < 0) or not np.all(np.isfinite(r)):
        raise InvalidInputError("popularities must be finite and >= 0")
    if not capacity >= 0:
        raise InvalidInputError("capacity must be >= 0")
    return r


def _greedy(order, sizes, capacity, selected):
    used = 0.0
    for m in order:
        if used + sizes[m] <= capacity:
            selected[m] = True
            used += sizes[m]
    return used


def place(popularities, catalog: ContentCatalog, capacity: float) -> CachePlan:
    """Fill by descending popularity/size, skipping items that no longer fit.

    Ties go to the lower content index.  With equal sizes this is plain
    top-k selection.
    """
    r = _check(popularities, catalog, capacity)
    sizes = catalog.sizes
    selected = np.zeros(r.size, dtype=bool)
    if np.all(sizes == sizes[0]):
        k = min(int(np.floor(capacity / sizes[0] + 1e-12)), r.size)
        # stable sort on -r keeps ascending index among ties
        selected[np.argsort(-r, kind="stable")[:k]] = True
        return _make_plan(selected, r, sizes)
    order = np.argsort(-(r / sizes), kind="stable")
    _greedy(order, sizes, capacity, selected)
    return _make_plan(selected, r, sizes)


def place_exact_small(popularities, catalog: ContentCatalog, capacity: float,
                      max_items: int = 25) -> CachePlan:
    """Exact 0/1 knapsack optimum for small catalogs.

    Dynamic programming over the set of reachable total sizes, pruned to the
    Pareto frontier (smaller size, larger value).  Exact for real-valued
    sizes, so no size rounding is needed.
    """
    r = _check(popularities, catalog, capacity)
    n = r.size
    if n > max_items or max_items > 25:
        raise InvalidInputError(f"exact solver limited to {min(max_items, 25)} items, got {n}")
    sizes = catalog.sizes
    if capacity >= sizes.sum():
        return _make_plan(np.ones(n, dtype=bool), r, sizes)
    # states: (size, value, bitmask)
    states = [(0.0, 0.0, 0)]
    for m in range(n):
        grown = [(s + sizes[m], v + r[m], mask | (1 << m))
                 for s, v, mask in states if s + sizes[m] <= capacity]
        merged = sorted(states + grown, key=lambda t: (t[0], -t[1], t[2]))
        frontier = []
        best = -np.inf
        for st in merged:
            if st[1] > best:
                frontier.append(st)
                best = st[1]
        states = frontier
    _, _, mask = max(states, key=lambda t: (t[1], -t[0]))
    selected = np.array([(mask >> m) & 1 for m in range(n)], dtype=bool)
    return _make_plan(selected, r, sizes)


def mle_rand_place(data: RequestMatrix, catalog: ContentCatalog, capacity: float, seed,
                   seen_share: float = SEEN_BUDGET_SHARE) -> CachePlan:
    """Baseline: MLE-ranked seen contents in ``seen_share * C``, random unseen in the rest.

    ``data`` rows follow the seen contents of ``catalog`` in index order.  Budget
    left over by the seen part is not handed to the unseen part; a capacity
    covering the whole catalog caches everything.
    """
    if not 0 <= seen_share <= 1:
        raise InvalidInputError("seen_share must lie in [0, 1]")
    seen_idx = np.flatnonzero(catalog.seen_mask)
    unseen_idx = np.flatnonzero(~catalog.seen_mask)
    if data.n_contents != seen_idx.size:
        raise InvalidInputError(f"{data.n_contents} request rows for {seen_idx.size} seen contents")
    r_seen = mle_popularity(data)
    popularity = np.zeros(catalog.n_contents)
    popularity[seen_idx] = r_seen
    _check(popularity, catalog, capacity)

    if capacity >= catalog.total_size:
        return _make_plan(np.ones(catalog.n_contents, dtype=bool), popularity, catalog.sizes)

    seen_cat = ContentCatalog(catalog.sizes[seen_idx], np.ones(seen_idx.size, dtype=bool))
    seen_plan = place(r_seen, seen_cat, seen_share * capacity)
    selected = np.zeros(catalog.n_contents, dtype=bool)
    selected[seen_idx[seen_plan.selected]] = True

    rng = np.random.default_rng(seed)
    order = unseen_idx[rng.permutation(unseen_idx.size)]
    _greedy(order, catalog.sizes, (1 - seen_share) * capacity, selected)
    return _make_plan(selected, popularity, catalog.sizes)


def evaluate_chr(plan: CachePlan, future) -> float:
    """Share of held-out requests that hit the cache.

    ``future`` is either a ``RequestMatrix`` over all catalog contents or a
    vector of per-content request totals.
    """
    if isinstance(future, RequestMatrix):
        totals = future.totals
    else:
        totals = np.asarray(future, dtype=float)
        if totals.ndim == 2:
            totals = totals.sum(axis=1)
    if totals.shape != plan.selected.shape:
        raise InvalidInputError(f"future covers {totals.size} contents, plan {plan.selected.size}")
    denom = totals.sum()
    if denom <= 0:
        return 0.0
    return float(totals[plan.selected].sum() / denom)


def write_plan_csv(plan: CachePlan, catalog: ContentCatalog, popularities, path,
                   content_ids=None) -> None:
    ids = np.arange(catalog.n_contents) if content_ids is None else content_ids
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["content_id", "size", "predicted_popularity", "selected"])
        for i, s, r, sel in zip(ids, catalog.sizes, popularities, plan.selected):
            w.writerow([int(i), repr(float(s)), repr(float(r)), int(sel)])
