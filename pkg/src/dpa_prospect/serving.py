"""DPA request path: gather, match, filter, rank, auction, dedupe, group, backfill, render.

Every stage is a plain function over immutable :class:`Candidate` values so
requests are stateless given a :class:`SnapshotBundle`.  Candidate sources
are plugins; the stub DPA types simply return configured fixture products.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Mapping, Protocol, Sequence

import numpy as np

from .catalog import Catalog, ProductKey, ProductStats
from .click import ClickModelConfig, product_ad_values, sim_bins, user_event
from .conversion import ConvModelConfig, PublishedConvModel, bid_final, conv_ad_values, \
    conv_user_values, correct_prediction
from .offset import Event, ModelState, build_ad_vector, build_user_vector, score_vectors, \
    sigmoid, sim_total
from .recommend import ItemToItem, Popularity
from .records import Campaign, UserProfile
from .trending import PublishedTrendyModel, advertiser_products

RETARGETING_TYPES = ("retargeting", "cross_sell", "out_of_stock_stub")
PROSPECTING_TYPES = ("conversion_prospecting", "trending_prospecting", "search_stub",
                     "location_stub")
SOURCE_TYPES = RETARGETING_TYPES + PROSPECTING_TYPES


@dataclass(frozen=True)
class Candidate:
    product: ProductKey
    source_type: str
    bid: float = 0.0  # cents per click
    pctr: float = 0.0
    recency: int = -1  # seconds since the user last saw the product, -1 if never
    campaign: Campaign | None = None
    backfill: bool = False

    def __post_init__(self):
        if self.source_type not in SOURCE_TYPES:
            raise ValueError(f"unknown source type {self.source_type!r}")
        if self.bid < 0:
            raise ValueError("bid must be non-negative")

    @property
    def score(self) -> float:
        return self.pctr * self.bid

    @property
    def prospecting(self) -> bool:
        return self.source_type in PROSPECTING_TYPES


def rank_key(c: Candidate):
    return (-c.score, c.product.product_id, c.source_type)


@dataclass(frozen=True)
class ServeRequest:
    request_id: str
    user: UserProfile
    page_section: str
    floor_price: int  # cents
    supports_carousel: bool = True
    device: str = "nonMobile"
    slot: int = 1
    language: str = "en"
    day: int = 0
    frequency: int = 0

    def __post_init__(self):
        if self.floor_price < 0:
            raise ValueError("floor_price must be non-negative")


@dataclass(frozen=True)
class ServeConfig:
    auction_l: int = 40
    min_slots: int = 3
    max_slots: int = 5


@dataclass(frozen=True)
class SingleAd:
    advertiser_id: str
    slots: tuple[Candidate, ...]

    @property
    def pivot(self) -> Candidate:
        return self.slots[0]


@dataclass(frozen=True)
class PartialCarousel(SingleAd):
    """A carousel that still needs backfilled products."""


@dataclass(frozen=True)
class CarouselAd(SingleAd):
    min_slots: int = 3

    def __post_init__(self):
        if len(self.slots) < self.min_slots:
            raise ValueError(f"carousel needs at least {self.min_slots} products")
        if len({c.product for c in self.slots}) != len(self.slots):
            raise ValueError("carousel products must be distinct")


class Counters(Counter):
    """Per-stage drop counters."""

    def drop(self, stage: str, n: int = 1, reason: str | None = None):
        if n:
            self[stage] += n
            if reason:
                self[f"{stage}.{reason}"] += n

    def to_json(self) -> str:
        return json.dumps(dict(sorted(self.items())), sort_keys=True)


# -- snapshot bundle -----------------------------------------------------------

class CandidateSource(Protocol):
    source_type: str

    def candidates(self, request: ServeRequest, bundle: "SnapshotBundle") -> list[Candidate]:
        ...


@dataclass
class SnapshotBundle:
    """Everything a request reads; treated as immutable once serving starts."""

    click_model: ModelState
    click_config: ClickModelConfig
    catalog: Catalog
    campaigns: Mapping[str, Campaign]  # product_group_id -> campaign
    product_stats: Mapping[ProductKey, ProductStats] = field(default_factory=dict)
    history: Mapping[str, Sequence[tuple[ProductKey, int]]] = field(default_factory=dict)
    conv: PublishedConvModel | None = None
    conv_config: ConvModelConfig = field(default_factory=ConvModelConfig)
    trendy: PublishedTrendyModel | None = None
    item_to_item: ItemToItem | None = None
    popularity: Popularity | None = None
    sources: list = field(default_factory=list)
    config: ServeConfig = field(default_factory=ServeConfig)
    _ad_vectors: dict = field(default_factory=dict, repr=False)
    _conv_matrix: tuple | None = field(default=None, repr=False)

    def __post_init__(self):
        if not self.sources:
            self.sources = [RetargetingSource(), ConversionSource(), TrendingSource()]

    def click_ad_vector(self, key: ProductKey) -> np.ndarray:
        vec = self._ad_vectors.get(key)
        if vec is None:
            ads = product_ad_values(key, self.product_stats.get(key), self.click_config)
            vec = self._ad_vectors[key] = build_ad_vector(Event({}, ads), self.click_model)
        return vec

    def conv_matrix(self):
        if self._conv_matrix is None:
            products = self.conv.products
            if products:
                mat = np.stack([build_ad_vector(Event({}, conv_ad_values(k)), self.conv.model)
                                for k in products])
            else:
                mat = np.zeros((0, self.conv.model.schema.dim))
            self._conv_matrix = (products, mat)
        return self._conv_matrix


# -- candidate sources ---------------------------------------------------------

class RetargetingSource:
    source_type = "retargeting"

    def candidates(self, request, bundle):
        seen = {}
        for key, recency in bundle.history.get(request.user.user_id, ()):
            if key not in seen or recency < seen[key]:
                seen[key] = recency
        return [Candidate(k, "retargeting", recency=r) for k, r in sorted(seen.items())]


@dataclass
class FixtureSource:
    """Plugin for DPA types whose eligibility logic lives elsewhere."""

    source_type: str
    products: Sequence[ProductKey] = ()
    per_user: Mapping[str, Sequence[ProductKey]] = field(default_factory=dict)

    def candidates(self, request, bundle):
        keys = self.per_user.get(request.user.user_id, self.products)
        return [Candidate(k, self.source_type) for k in keys]


class ConversionSource:
    source_type = "conversion_prospecting"

    def candidates(self, request, bundle):
        pub = bundle.conv
        if pub is None or not pub.products:
            return []
        products, mat = bundle.conv_matrix()
        user = Event(conv_user_values(request.user, request.page_section, self.source_type,
                                      bundle.conv_config), {})
        u = build_user_vector(user, pub.model)
        raw = mat @ u + pub.model.bias
        out = []
        for key, s in zip(products, raw):
            pconv = correct_prediction(sigmoid(float(s)))
            bid = bid_final(pconv, pub.tcpa[key.advertiser_id], pub.bids[key.product_group_id])
            if bid >= request.floor_price:
                out.append(Candidate(key, self.source_type, bid=bid))
        return out


class TrendingSource:
    source_type = "trending_prospecting"

    def candidates(self, request, bundle):
        pub = bundle.trendy
        if pub is None:
            return []
        user = request.user
        out = []
        for advertiser in sorted(pub.thresholds):
            if pub.is_eligible(user.age, user.gender, advertiser):
                out.extend(Candidate(k, self.source_type)
                           for k in advertiser_products(pub.products, advertiser))
        return out


# -- stages --------------------------------------------------------------------

def gather(request: ServeRequest, bundle: SnapshotBundle) -> list[Candidate]:
    out = []
    for source in bundle.sources:
        out.extend(source.candidates(request, bundle))
    return out


def match(candidates: Sequence[Candidate], campaigns: Mapping[str, Campaign],
          counters: Counters) -> list[Candidate]:
    """Attach campaign terms; non-conversion types bid the product-group bid."""
    out = []
    for c in candidates:
        camp = campaigns.get(c.product.product_group_id)
        if camp is None or camp.advertiser_id != c.product.advertiser_id:
            counters.drop("match", reason="no_campaign")
            continue
        bid = c.bid if c.source_type == "conversion_prospecting" else float(camp.bid)
        out.append(replace(c, campaign=camp, bid=bid))
    return out


def filter_candidates(candidates: Sequence[Candidate], request: ServeRequest,
                      counters: Counters) -> list[Candidate]:
    out = []
    for c in candidates:
        camp = c.campaign
        if request.user.gender not in camp.target_genders:
            reason = "targeting"
        elif camp.expiration_day < request.day:
            reason = "expired"
        elif request.language not in camp.languages:
            reason = "policy"
        elif camp.budget < c.bid:
            reason = "budget"
        elif c.bid < request.floor_price:
            reason = "floor"
        else:
            out.append(c)
            continue
        counters.drop("filter", reason=reason)
    return out


def rank(candidates: Sequence[Candidate], request: ServeRequest,
         bundle: SnapshotBundle) -> list[Candidate]:
    """Attach click-model pCTR (the dpa-type feature follows the source) and sort by score."""
    model, config = bundle.click_model, bundle.click_config
    users: dict[str, np.ndarray] = {}
    out = []
    for c in candidates:
        u = users.get(c.source_type)
        if u is None:
            ev = user_event(request.user, request.page_section, c.source_type, config=config)
            u = users[c.source_type] = build_user_vector(ev, model)
        bins = sim_bins(request.frequency, c.recency, request.slot, request.device)
        bins = {k: v for k, v in bins.items() if k in config.similarity_features}
        s = score_vectors(u, bundle.click_ad_vector(c.product), model, sim_total(bins, model))
        out.append(replace(c, pctr=sigmoid(s)))
    out.sort(key=rank_key)
    return out


def preliminary_auction(candidates: Sequence[Candidate], l: int) -> list[Candidate]:
    """Top ``l`` prospecting candidates by pctr x bid."""
    return sorted(candidates, key=rank_key)[:l]


def dedupe(ranked: Sequence[Candidate]) -> list[Candidate]:
    """One instance per product, then only each advertiser's best product group."""
    best: dict[ProductKey, Candidate] = {}
    for c in sorted(ranked, key=rank_key):
        best.setdefault(c.product, c)
    ordered = sorted(best.values(), key=rank_key)
    line: dict[str, str] = {}
    out = []
    for c in ordered:
        group = line.setdefault(c.product.advertiser_id, c.product.product_group_id)
        if c.product.product_group_id == group:
            out.append(c)
    return out


def group(candidates: Sequence[Candidate], request: ServeRequest,
          config: ServeConfig = ServeConfig()) -> list[SingleAd]:
    by_adv: dict[str, list[Candidate]] = {}
    for c in sorted(candidates, key=rank_key):
        by_adv.setdefault(c.product.advertiser_id, []).append(c)
    ads = []
    for adv, members in by_adv.items():
        if not request.supports_carousel:
            ads.append(SingleAd(adv, (members[0],)))
        elif len(members) >= config.min_slots:
            ads.append(CarouselAd(adv, tuple(members[:config.max_slots]), config.min_slots))
        else:
            ads.append(PartialCarousel(adv, tuple(members)))
    ads.sort(key=lambda a: rank_key(a.pivot))
    return ads


def backfill(partial: SingleAd, bundle: SnapshotBundle, config: ServeConfig = ServeConfig()):
    """Fill a short carousel from related products, falling back to popularity."""
    slots = list(partial.slots)
    present = {c.product for c in slots}
    need = config.min_slots - len(slots)
    pivot = partial.pivot
    related = []
    if bundle.item_to_item is not None:
        related = [k for k, _ in bundle.item_to_item.related(pivot.product) if k not in present]
    fill = related[:need]
    if len(related) < 2 and bundle.popularity is not None:
        for k in bundle.popularity.top(pivot.product.advertiser_id, present):
            if len(fill) >= need:
                break
            if k not in fill:
                fill.append(k)
    if len(fill) < need:
        return SingleAd(partial.advertiser_id, (pivot,))
    slots.extend(Candidate(k, pivot.source_type, backfill=True) for k in fill)
    return CarouselAd(partial.advertiser_id, tuple(slots), config.min_slots)


@dataclass(frozen=True)
class RenderedSlot:
    product: str
    title: str
    image: str
    description: str
    source_type: str
    bid: float
    pctr: float
    backfill: bool


@dataclass(frozen=True)
class RenderedAd:
    advertiser_id: str
    format: str  # "carousel" or "single"
    slots: tuple[RenderedSlot, ...]

    def to_dict(self) -> dict:
        return {"advertiser_id": self.advertiser_id, "format": self.format,
                "slots": [s.__dict__ for s in self.slots]}


def render(ads: Sequence[SingleAd], catalog: Catalog, counters: Counters) -> list[RenderedAd]:
    out = []
    for ad in ads:
        slots = []
        for c in ad.slots:
            entry = catalog.get(c.product.product_id)
            if entry is None or not entry.has_assets:
                break
            slots.append(RenderedSlot(c.product.path, entry.title, entry.image,
                                      entry.description, c.source_type, c.bid, c.pctr,
                                      c.backfill))
        else:
            fmt = "carousel" if isinstance(ad, CarouselAd) else "single"
            out.append(RenderedAd(ad.advertiser_id, fmt, tuple(slots)))
            continue
        counters.drop("render", reason="missing_asset")
    return out


@dataclass(frozen=True)
class ServeResult:
    request_id: str
    ads: tuple[RenderedAd, ...]
    counters: Counters

    def to_json(self) -> str:
        return json.dumps({"request_id": self.request_id,
                           "ads": [a.to_dict() for a in self.ads],
                           "dropped": dict(sorted(self.counters.items()))}, sort_keys=True)


def serve(request: ServeRequest, bundle: SnapshotBundle) -> ServeResult:
    counters = Counters()
    cfg = bundle.config
    cands = gather(request, bundle)
    cands = match(cands, bundle.campaigns, counters)
    cands = filter_candidates(cands, request, counters)
    ranked = rank(cands, request, bundle)
    prospecting = [c for c in ranked if c.prospecting]
    winners = preliminary_auction(prospecting, cfg.auction_l)
    counters.drop("auction", len(prospecting) - len(winners))
    ranked = sorted([c for c in ranked if not c.prospecting] + winners, key=rank_key)
    deduped = dedupe(ranked)
    counters.drop("dedupe", len(ranked) - len(deduped))
    ads = [backfill(ad, bundle, cfg) if isinstance(ad, PartialCarousel) else ad
           for ad in group(deduped, request, cfg)]
    return ServeResult(request.request_id, tuple(render(ads, bundle.catalog, counters)), counters)
