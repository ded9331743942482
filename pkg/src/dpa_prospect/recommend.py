"""Product recommendation models used to backfill carousel ads."""

from __future__ import annotations

from collections import Counter
from typing import Iterable

import numpy as np
from scipy import sparse

from .catalog import ProductKey


class ItemToItem:
    """Cosine similarity between products' co-engagement vectors.

    Each product is a binary vector over the users who engaged with it, so the
    similarity of p and q is |U_p ∩ U_q| / sqrt(|U_p| |U_q|).
    """

    def __init__(self, engagements: Iterable[tuple[str, ProductKey]]):
        pairs = sorted(set(engagements), key=lambda x: (x[0], x[1].product_id))
        users = sorted({u for u, _ in pairs})
        self.products = sorted({p for _, p in pairs})
        self._index = {p: i for i, p in enumerate(self.products)}
        uidx = {u: i for i, u in enumerate(users)}
        rows = [uidx[u] for u, _ in pairs]
        cols = [self._index[p] for _, p in pairs]
        m = sparse.csr_matrix((np.ones(len(pairs)), (rows, cols)),
                              shape=(len(users), len(self.products)))
        self._co = (m.T @ m).tocsr()
        self._norm = np.sqrt(self._co.diagonal())
        self._cache: dict[ProductKey, list[tuple[ProductKey, float]]] = {}

    def similarity(self, p: ProductKey, q: ProductKey) -> float:
        i, j = self._index.get(p), self._index.get(q)
        if i is None or j is None:
            return 0.0
        return float(self._co[i, j] / (self._norm[i] * self._norm[j]))

    def related(self, pivot: ProductKey) -> list[tuple[ProductKey, float]]:
        """Same-advertiser products with positive similarity, best first."""
        hit = self._cache.get(pivot)
        if hit is not None:
            return hit
        i = self._index.get(pivot)
        if i is None:
            return []
        row = self._co.getrow(i)
        out = []
        for j, co in zip(row.indices, row.data):
            other = self.products[j]
            if j == i or co <= 0 or other.advertiser_id != pivot.advertiser_id:
                continue
            out.append((other, float(co / (self._norm[i] * self._norm[j]))))
        out.sort(key=lambda x: (-x[1], x[0].product_id))
        self._cache[pivot] = out
        return out


class Popularity:
    """Per-advertiser product ranking by engagement count."""

    def __init__(self, counts: Counter | dict[ProductKey, int]):
        self.counts = Counter(counts)
        self._by_adv: dict[str, list[ProductKey]] = {}
        for key in sorted(self.counts, key=lambda k: (-self.counts[k], k.product_id)):
            self._by_adv.setdefault(key.advertiser_id, []).append(key)

    def top(self, advertiser_id: str, exclude=()) -> list[ProductKey]:
        skip = set(exclude)
        return [k for k in self._by_adv.get(advertiser_id, []) if k not in skip]
