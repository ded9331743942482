"""Trending-prospecting: lookalike model, eligibility thresholds and publication.

The lookalike model is trained on pixel-feed positives (purchase and
add-to-cart) against impressions sampled per product as negatives, so the
eligibility score approximates pos(u, p) / (pos(u, p) + neg(u)) for the
demographic cell of user u.
"""

from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .catalog import ProductKey
from .click import ADVERTISER_ID, PRODUCT_ID, PRODUCT_SET_ID
from .errors import DPAError, EmptyCurveError, NotScorableError
from .offset import (
    DEFAULT_ETA0,
    DEFAULT_INIT_VARIANCE,
    DEFAULT_LAMBDA,
    Event,
    FeatureSchema,
    ModelState,
    build_ad_vector,
    build_user_vector,
    load_model,
    predict,
    save_model,
    score_vectors,
    sigmoid,
    train_batch,
)
from .records import Impression, PixelEvent
from .seeds import seed_stream

log = logging.getLogger(__name__)

LOOKALIKE_USER_FEATURES = ("age", "gender")
LOOKALIKE_AD_FEATURES = (ADVERTISER_ID, PRODUCT_SET_ID, PRODUCT_ID)
KNOWN_GENDERS = ("female", "male")


@dataclass(frozen=True)
class LookalikeConfig:
    top_n_products: int = 10_000
    negatives_per_product: int = 2000
    stale_days: int = 10
    publish_t: int = 3500
    sample_r: int = 20_000
    passes: int = 3
    pair_width: int = 8
    solo_width: int = 4
    eta0: float = DEFAULT_ETA0
    lam: float = DEFAULT_LAMBDA
    init_variance: float = DEFAULT_INIT_VARIANCE
    seed: int = 0

    def __post_init__(self):
        counts = (self.top_n_products, self.negatives_per_product, self.stale_days,
                  self.publish_t, self.sample_r, self.passes)
        if min(counts) < 1:
            raise ValueError("lookalike counts must all be >= 1")

    def schema(self) -> FeatureSchema:
        return FeatureSchema(LOOKALIKE_USER_FEATURES, self.pair_width, self.solo_width,
                             LOOKALIKE_AD_FEATURES)

    def new_model(self) -> ModelState:
        return ModelState(self.schema(), init_variance=self.init_variance, lam=self.lam,
                          eta0=self.eta0, seed=self.seed)


def known(age: int, gender: str) -> bool:
    return age > 0 and gender in KNOWN_GENDERS


def lookalike_event(age: int, gender: str, key: ProductKey, label: int = 0, timestamp: int = 0,
                    kind: str = "impression") -> Event:
    """Ages are kept in whole years, one value per year."""
    return Event({"age": [(str(age), 1.0)], "gender": [(gender, 1.0)]},
                 {ADVERTISER_ID: key.advertiser_id, PRODUCT_SET_ID: key.product_set_id,
                  PRODUCT_ID: key.product_id}, {}, label, kind, timestamp)


def positive_counts(pixel_feed: Iterable[PixelEvent]) -> Counter:
    return Counter(ev.product for ev in pixel_feed if ev.positive)


def select_top_products(pixel_feed: Sequence[PixelEvent], n: int) -> list[ProductKey]:
    """The ``n`` products with most purchase/add-to-cart events, ties by product id."""
    if not pixel_feed:
        raise ValueError("pixel feed is empty")
    counts = positive_counts(pixel_feed)
    ranked = sorted(counts, key=lambda k: (-counts[k], k.product_id))
    return ranked[:n]


def positive_events(pixel_feed: Iterable[PixelEvent], products: Iterable[ProductKey]) -> list[Event]:
    wanted = set(products)
    return [lookalike_event(ev.age, ev.gender, ev.product, 1, ev.timestamp, ev.kind)
            for ev in pixel_feed
            if ev.positive and ev.product in wanted and known(ev.age, ev.gender)]


def sample_negatives(impressions: Sequence[Impression], products: Sequence[ProductKey], m: int,
                     seed: int) -> list[Event]:
    """Per product, ``m`` impressions drawn without replacement become negatives.

    Impressions of users with unknown age or gender are removed first.  Each
    product draws from its own seeded stream, so products sample independently.
    """
    eligible = [imp for imp in impressions if known(imp.age, imp.gender)]
    if len(eligible) < m:
        log.warning("only %d eligible impressions for %d negatives per product", len(eligible), m)
    events = []
    for key in products:
        take = min(m, len(eligible))
        idx = seed_stream(seed, "negatives:" + key.product_id).choice(len(eligible), take,
                                                                   replace=False)
        for i in np.sort(idx):
            imp = eligible[i]
            events.append(lookalike_event(imp.age, imp.gender, key, 0, imp.timestamp))
    return events


def train_lookalike(positives: Sequence[Event], negatives: Sequence[Event],
                    model: ModelState, passes: int = 1) -> ModelState:
    """Time-ordered training over the merged feed, replayed ``passes`` times."""
    merged = sorted([*positives, *negatives], key=lambda e: e.timestamp)
    for _ in range(passes):
        train_batch(merged, model)
    return model


class LookalikeModel:
    """Daily-updated lookalike model that forgets products gone stale."""

    def __init__(self, config: LookalikeConfig, model: ModelState | None = None):
        self.config = config
        self.model = model or config.new_model()
        self.absent_days: dict[str, int] = {}
        self.positives: Counter = Counter()

    def daily_update(self, positives: Sequence[Event], negatives: Sequence[Event]) -> list[str]:
        """Train on one day's feed; return the product ids evicted afterwards."""
        train_lookalike(positives, negatives, self.model, self.config.passes)
        present = {ev.ad_values[PRODUCT_ID] for ev in (*positives, *negatives)}
        for ev in positives:
            self.positives[ev.ad_values[PRODUCT_ID]] += 1
        evicted = []
        for pid in sorted(set(self.absent_days) | present):
            if pid in present:
                self.absent_days[pid] = 0
                continue
            self.absent_days[pid] += 1
            if self.absent_days[pid] >= self.config.stale_days:
                self.model.ad_table.remove(PRODUCT_ID, pid)
                del self.absent_days[pid]
                evicted.append(pid)
        return evicted

    def product_ids(self) -> list[str]:
        return sorted(self.absent_days)


def eligibility_score(age: int, gender: str, key: ProductKey, model: ModelState) -> float:
    if not known(age, gender):
        raise NotScorableError(f"unknown demographics (age={age}, gender={gender!r})")
    return predict(lookalike_event(age, gender, key), model)


# -- thresholds --------------------------------------------------------------

@dataclass(frozen=True)
class ThresholdCurve:
    advertiser_id: str
    values: tuple[float, ...]

    def __post_init__(self):
        if list(self.values) != sorted(self.values):
            raise ValueError("curve values must be sorted ascending")


def sample_curve_users(impressions: Sequence[Impression], r: int,
                       seed: int) -> list[tuple[int, str]]:
    """Up to ``r`` distinct impression-feed users as (age, gender)."""
    users = {}
    for imp in impressions:
        users.setdefault(imp.user_id, (imp.age, imp.gender))
    ids = sorted(users)
    take = min(r, len(ids))
    idx = seed_stream(seed, "curve-users").choice(len(ids), take, replace=False)
    return [users[ids[i]] for i in np.sort(idx)]


class _MaxScorer:
    """Per-user maximum eligibility over a product set, cached per demographic cell."""

    def __init__(self, model: ModelState, products: Sequence[ProductKey]):
        self.model = model
        self.ad_vectors = [build_ad_vector(lookalike_event(30, "female", k), model)
                           for k in products]
        self._cache: dict[tuple[int, str], float] = {}

    def __call__(self, age: int, gender: str) -> float:
        cell = (age, gender)
        best = self._cache.get(cell)
        if best is None:
            user = build_user_vector(
                Event({"age": [(str(age), 1.0)], "gender": [(gender, 1.0)]}, {}), self.model)
            best = max(sigmoid(score_vectors(user, a, self.model)) for a in self.ad_vectors)
            self._cache[cell] = best
        return best


def advertiser_products(products: Iterable[ProductKey], advertiser_id: str) -> list[ProductKey]:
    return sorted(k for k in products if k.advertiser_id == advertiser_id)


def build_threshold_curve(model: ModelState, advertiser_id: str,
                          products: Iterable[ProductKey],
                          users: Sequence[tuple[int, str]]) -> ThresholdCurve:
    if not model.frozen:
        raise DPAError("threshold curves are built from a frozen model")
    mine = advertiser_products(products, advertiser_id)
    if not mine:
        raise EmptyCurveError(f"advertiser {advertiser_id} has no products")
    scorer = _MaxScorer(model, mine)
    values = sorted(scorer(age, gender) for age, gender in users if known(age, gender))
    return ThresholdCurve(advertiser_id, tuple(values))


def threshold_for_percentile(curve: ThresholdCurve, pct: float) -> float:
    """Smallest curve value t with at most ``pct`` percent of the curve strictly above t."""
    if not 0 < pct < 100:
        raise ValueError("pct must lie strictly between 0 and 100")
    values = curve.values
    if not values:
        raise EmptyCurveError(f"empty curve for {curve.advertiser_id}")
    allowed = math.floor(pct * len(values) / 100 + 1e-9)
    return values[len(values) - 1 - allowed]


# -- publication -------------------------------------------------------------

def allocate_slots(spend: Mapping[str, float], capacity: Mapping[str, int],
                   total: int) -> dict[str, int]:
    """Split ``total`` slots across groups proportionally to spend.

    Largest-remainder rounding, each group capped by its capacity; slots freed
    by capped groups are redistributed among the rest.  Groups without spend
    only receive slots once every spending group is full.
    """
    alloc = {g: 0 for g in capacity}
    left = min(total, sum(capacity.values()))
    while left > 0:
        open_groups = sorted(g for g in capacity if alloc[g] < capacity[g])
        weights = {g: max(float(spend.get(g, 0.0)), 0.0) for g in open_groups}
        if sum(weights.values()) <= 0:
            weights = {g: 1.0 for g in open_groups}
        else:
            weights = {g: w for g, w in weights.items() if w > 0}
        norm = sum(weights.values())
        quotas = {g: left * w / norm for g, w in weights.items()}
        grant = {g: int(math.floor(q)) for g, q in quotas.items()}
        spare = left - sum(grant.values())
        for g in sorted(weights, key=lambda g: (-(quotas[g] - grant[g]), -weights[g], g))[:spare]:
            grant[g] += 1
        given = 0
        for g, n in grant.items():
            n = min(n, capacity[g] - alloc[g])
            alloc[g] += n
            given += n
        left -= given
    return alloc


@dataclass(frozen=True)
class PublishedTrendyModel:
    model: ModelState
    products: tuple[ProductKey, ...]
    thresholds: Mapping[str, float]
    percentiles: Mapping[str, float]
    _scorers: dict = field(default_factory=dict, compare=False, repr=False)

    def max_score(self, age: int, gender: str, advertiser_id: str) -> float:
        if not known(age, gender):
            raise NotScorableError("unknown demographics")
        scorer = self._scorers.get(advertiser_id)
        if scorer is None:
            mine = advertiser_products(self.products, advertiser_id)
            if not mine:
                raise EmptyCurveError(f"advertiser {advertiser_id} has no products")
            scorer = self._scorers[advertiser_id] = _MaxScorer(self.model, mine)
        return scorer(age, gender)

    def is_eligible(self, age: int, gender: str, advertiser_id: str) -> bool:
        t = self.thresholds.get(advertiser_id)
        if t is None or not known(age, gender):
            return False
        return self.max_score(age, gender, advertiser_id) > t

    def manifest(self) -> dict:
        return {
            "kind": "trending",
            "products": [k.path for k in self.products],
            "thresholds": {a: [self.thresholds[a], self.percentiles.get(a)]
                           for a in sorted(self.thresholds)},
        }

    def save(self, path):
        return save_model(self.model, path, self.manifest())

    @classmethod
    def load(cls, path) -> "PublishedTrendyModel":
        model, manifest = load_model(path)
        if manifest.get("kind") != "trending":
            raise DPAError(f"{path} is not a published trending model")
        thresholds = {a: float(t) for a, (t, _) in manifest["thresholds"].items()}
        pcts = {a: p for a, (_, p) in manifest["thresholds"].items() if p is not None}
        return cls(model, tuple(ProductKey.from_path(p) for p in manifest["products"]),
                   thresholds, pcts)


def publish_trendy_model(model: ModelState, thresholds: Mapping[str, float],
                         spend_by_group: Mapping[str, float],
                         positives: Mapping[ProductKey, int], t_cap: int,
                         percentiles: Mapping[str, float] | None = None) -> PublishedTrendyModel:
    """Keep at most ``t_cap`` products, shared across groups by previous-day spend."""
    if not model.frozen:
        raise DPAError("publish a frozen model snapshot")
    by_group: dict[str, list[ProductKey]] = {}
    for key in positives:
        by_group.setdefault(key.product_group_id, []).append(key)
    alloc = allocate_slots(spend_by_group, {g: len(v) for g, v in by_group.items()}, t_cap)
    chosen = []
    for group in sorted(by_group):
        ranked = sorted(by_group[group], key=lambda k: (-positives[k], k.product_id))
        chosen.extend(ranked[:alloc[group]])
    chosen.sort()
    advertisers = {k.advertiser_id for k in chosen}
    return PublishedTrendyModel(
        model.restricted(PRODUCT_ID, [k.product_id for k in chosen]),
        tuple(chosen),
        {a: float(t) for a, t in sorted(thresholds.items()) if a in advertisers},
        dict(percentiles or {}),
    )
