"""Exact ranked-retrieval metrics on binary relevance lists.

A ranked list is a sequence of 0/1 relevance flags, best match first.
Ties are represented explicitly as a sequence of bins, each bin holding
(relevant_count, irrelevant_count); items inside a bin have no defined
order and metrics over tied lists are expectations over the orderings.
"""

from __future__ import annotations

import itertools
import math
from typing import Sequence

import numpy as np

from .errors import CapacityError, UndefinedMetricError


def _as_relevance(ranked: Sequence[int]) -> np.ndarray:
    rel = np.asarray(ranked)
    if rel.ndim != 1 or rel.size == 0:
        raise ValueError("ranked list must be a non-empty 1-d sequence")
    if not np.isin(rel, (0, 1)).all():
        raise ValueError("relevance flags must be 0 or 1")
    return rel.astype(np.float64)


def prec_at_k(ranked: Sequence[int], k: int) -> float:
    """Fraction of relevant items among the first k entries."""
    rel = _as_relevance(ranked)
    if not 1 <= k <= rel.size:
        raise ValueError(f"k={k} outside valid range 1..{rel.size}")
    return float(rel[:k].sum() / k)


def exact_ap(ranked: Sequence[int]) -> float:
    """Average precision of a fully ordered relevance list.

    Mean of precision-at-rank over the ranks that hold a relevant item.
    Raises UndefinedMetricError when the list has no relevant item.
    """
    rel = _as_relevance(ranked)
    n_rel = rel.sum()
    if n_rel == 0:
        raise UndefinedMetricError("average precision undefined without relevant items")
    ranks = np.arange(1, rel.size + 1, dtype=np.float64)
    prec = np.cumsum(rel) / ranks
    return float((prec * rel).sum() / n_rel)


def tie_aware_ap_oracle(bins: Sequence[tuple[int, int]], max_items: int = 8) -> float:
    """Expected AP over uniformly random orderings within tied bins.

    ``bins`` lists (relevant, irrelevant) counts from best bin to worst.
    Enumerates every distinct arrangement of each bin, so the total item
    count is capped (default 8); pass a larger ``max_items`` knowingly.
    """
    counts = [(int(r), int(i)) for r, i in bins]
    if not counts:
        raise ValueError("need at least one bin")
    if any(r < 0 or i < 0 for r, i in counts):
        raise ValueError("bin counts must be non-negative")
    total = sum(r + i for r, i in counts)
    if total > max_items:
        raise CapacityError(
            f"{total} items exceeds the exhaustive enumeration cap of {max_items}"
        )
    if sum(r for r, _ in counts) == 0:
        raise UndefinedMetricError("average precision undefined without relevant items")

    # Distinct arrangements of one bin: choose which slots hold relevant items.
    per_bin = []
    for r, i in counts:
        n = r + i
        placements = []
        for slots in itertools.combinations(range(n), r):
            flags = [0] * n
            for s in slots:
                flags[s] = 1
            placements.append(flags)
        per_bin.append(placements)

    total_ap = 0.0
    count = 0
    for arrangement in itertools.product(*per_bin):
        flat = [f for bin_flags in arrangement for f in bin_flags]
        total_ap += exact_ap(flat)
        count += 1
    return total_ap / count


def mean_ap(aps: Sequence[float]) -> float:
    """Mean of per-query average precisions."""
    values = np.asarray(aps, dtype=np.float64)
    if values.size == 0:
        raise UndefinedMetricError("mean AP over an empty collection is undefined")
    if not np.isfinite(values).all():
        raise ValueError("per-query AP values must be finite")
    return float(values.mean())


def expected_arrangements(bins: Sequence[tuple[int, int]]) -> int:
    """Number of distinct orderings the oracle would enumerate."""
    out = 1
    for r, i in bins:
        out *= math.comb(r + i, r)
    return out
