"""Conversion-prospecting: conversion-given-click model, tCPA, bids and publication."""

from __future__ import annotations

import bisect
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .catalog import ProductKey, ProductStats
from .click import ADVERTISER_ID, PRODUCT_ID, PRODUCT_SET_ID, dpa_type_experiment
from .errors import DPAError
from .offset import (
    DEFAULT_ETA0,
    DEFAULT_INIT_VARIANCE,
    DEFAULT_LAMBDA,
    Event,
    FeatureSchema,
    ModelState,
    load_model,
    predict,
    save_model,
)
from .records import Conversion, Impression, UserProfile

log = logging.getLogger(__name__)

CONV_USER_FEATURES = ("ctr-campaign-top", "dpa-type-experiment-id", "page-section")
CONV_AD_FEATURES = (PRODUCT_ID, PRODUCT_SET_ID, ADVERTISER_ID)

RETARGETING = "retargeting"
PROSPECTING_TYPES = ("conversion_prospecting", "trending_prospecting", "search_stub",
                     "location_stub")
ATTRIBUTION_WINDOW = 30 * 86400


@dataclass(frozen=True)
class ConvModelConfig:
    publish_k: int = 1000
    min_conversions: int = 10
    publish_period_hours: int = 6
    tcpa_multiplier: float = 1.5
    user_features: tuple[str, ...] = CONV_USER_FEATURES
    pair_width: int = 2
    solo_width: int = 2
    eta0: float = DEFAULT_ETA0
    lam: float = DEFAULT_LAMBDA
    init_variance: float = DEFAULT_INIT_VARIANCE
    seed: int = 0

    def __post_init__(self):
        if self.publish_k < 1 or self.min_conversions < 1:
            raise ValueError("publish_k and min_conversions must be >= 1")

    def schema(self) -> FeatureSchema:
        return FeatureSchema(self.user_features, self.pair_width, self.solo_width,
                             CONV_AD_FEATURES)

    def new_model(self) -> ModelState:
        return ModelState(self.schema(), init_variance=self.init_variance, lam=self.lam,
                          eta0=self.eta0, seed=self.seed)


@dataclass
class AdvertiserPerf:
    advertiser_id: str
    spend_by_type: dict[str, int] = field(default_factory=dict)
    conversions_by_type: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if any(v < 0 for v in self.spend_by_type.values()) or any(
                v < 0 for v in self.conversions_by_type.values()):
            raise ValueError("spend and conversions must be non-negative")

    def type_cpa(self, dpa_type: str) -> float | None:
        conv = self.conversions_by_type.get(dpa_type, 0)
        if conv <= 0:
            return None
        return self.spend_by_type.get(dpa_type, 0) / conv


def conv_ad_values(key: ProductKey) -> dict[str, str]:
    return {PRODUCT_ID: key.product_id, PRODUCT_SET_ID: key.product_set_id,
            ADVERTISER_ID: key.advertiser_id}


def conv_user_values(profile: UserProfile, page_section: str, dpa_type: str,
                     config: ConvModelConfig) -> dict:
    out = {name: [(v, 1.0) for v in values] or [("none", 1.0)]
           for name, values in profile.features.items() if name in config.user_features}
    if "page-section" in config.user_features:
        out["page-section"] = [(page_section, 1.0)]
    if "dpa-type-experiment-id" in config.user_features:
        out["dpa-type-experiment-id"] = [(dpa_type_experiment(dpa_type), 1.0)]
    return out


def conv_event(profile: UserProfile, page_section: str, dpa_type: str, key: ProductKey,
               config: ConvModelConfig, label: int = 0, timestamp: int = 0,
               kind: str = "impression") -> Event:
    return Event(conv_user_values(profile, page_section, dpa_type, config), conv_ad_values(key),
                 {}, label, kind, timestamp)


def attribute_conversions(clicks: Sequence[Impression], conversions: Sequence[Conversion]
                          ) -> tuple[list[tuple[Conversion, Impression]], int]:
    """Pair each conversion with the latest same (user, product) click at or before it.

    Clicks more than 30 days before the conversion do not count.  Returns the
    attributed pairs and the number of conversions left without a click.
    """
    by_key: dict[tuple[str, str], list[Impression]] = defaultdict(list)
    for click in clicks:
        by_key[(click.user_id, click.product.product_id)].append(click)
    for lst in by_key.values():
        lst.sort(key=lambda c: c.timestamp)
    times = {k: [c.timestamp for c in lst] for k, lst in by_key.items()}
    pairs, dropped = [], 0
    for conv in conversions:
        key = (conv.user_id, conv.product.product_id)
        ts = times.get(key, [])
        pos = bisect.bisect_right(ts, conv.timestamp) - 1
        if pos < 0 or conv.timestamp - ts[pos] > ATTRIBUTION_WINDOW:
            dropped += 1
            continue
        pairs.append((conv, by_key[key][pos]))
    return pairs, dropped


def build_conv_training_feed(clicks: Sequence[Impression], conversions: Sequence[Conversion],
                             profiles: Mapping[str, UserProfile],
                             config: ConvModelConfig) -> tuple[list[Event], int]:
    """Every click becomes a negative; every attributed conversion an extra positive.

    Attribution follows :func:`attribute_conversions`.  Returns the time-ordered
    events and the number of conversions dropped for lack of a matching click.
    """
    events = [conv_event(profiles[c.user_id], c.page_section, c.dpa_type, c.product, config, 0,
                         c.timestamp, "click") for c in clicks]
    pairs, dropped = attribute_conversions(clicks, conversions)
    for conv, click in pairs:
        events.append(conv_event(profiles[click.user_id], click.page_section, click.dpa_type,
                                 click.product, config, 1, conv.timestamp, "conversion"))
    if dropped:
        log.warning("dropped %d conversions without a matching click", dropped)
    events.sort(key=lambda e: e.timestamp)
    return events, dropped


def correct_prediction(raw: float) -> float:
    """Undo the click/conversion double counting: raw ~ c/(1+c), so c ~ raw/(1-raw)."""
    if not 0.0 <= raw < 1.0:
        raise ValueError(f"raw prediction must lie in [0, 1), got {raw}")
    return min(raw / (1.0 - raw), 1.0)


def round_cents(value: float) -> int:
    return int(math.floor(value + 0.5))


def compute_tcpa(perf: AdvertiserPerf, multiplier: float = 1.5) -> int | None:
    base = perf.type_cpa(RETARGETING)
    if base is None:
        cpas = [c for c in (perf.type_cpa(t) for t in PROSPECTING_TYPES) if c is not None]
        if not cpas:
            return None
        base = min(cpas)
    return round_cents(multiplier * base)


def bid_final(pconv: float, tcpa: float, bid_pg: float) -> float:
    if min(pconv, tcpa, bid_pg) < 0:
        raise ValueError("bid inputs must be non-negative")
    return min(pconv * tcpa, bid_pg)


@dataclass(frozen=True)
class PublishedConvModel:
    model: ModelState
    products: tuple[ProductKey, ...]
    tcpa: Mapping[str, int]
    bids: Mapping[str, int]

    def pconv(self, profile: UserProfile, page_section: str, key: ProductKey,
              config: ConvModelConfig, dpa_type: str = "conversion_prospecting") -> float:
        raw = predict(conv_event(profile, page_section, dpa_type, key, config), self.model)
        return correct_prediction(raw)

    def manifest(self) -> dict:
        return {
            "kind": "conversion",
            "products": [k.path for k in self.products],
            "tcpa": dict(sorted(self.tcpa.items())),
            "bids": dict(sorted(self.bids.items())),
        }

    def save(self, path):
        return save_model(self.model, path, self.manifest())

    @classmethod
    def load(cls, path) -> "PublishedConvModel":
        model, manifest = load_model(path)
        if manifest.get("kind") != "conversion":
            raise DPAError(f"{path} is not a published conversion model")
        return cls(model, tuple(ProductKey.from_path(p) for p in manifest["products"]),
                   {k: int(v) for k, v in manifest["tcpa"].items()},
                   {k: int(v) for k, v in manifest["bids"].items()})


def publish_conv_model(model: ModelState, stats: Mapping[ProductKey, ProductStats],
                       tcpas: Mapping[str, int | None], bids: Mapping[str, int],
                       config: ConvModelConfig) -> PublishedConvModel:
    if not model.frozen:
        raise DPAError("publish a frozen model snapshot")
    eligible = [key for key, st in stats.items()
                if st.conversions >= config.min_conversions
                and tcpas.get(key.advertiser_id) is not None
                and key.product_group_id in bids]
    eligible.sort(key=lambda k: (-stats[k].conversions, k.product_id))
    chosen = tuple(eligible[:config.publish_k])
    advertisers = {k.advertiser_id for k in chosen}
    groups = {k.product_group_id for k in chosen}
    return PublishedConvModel(
        model.restricted(PRODUCT_ID, [k.product_id for k in chosen]),
        chosen,
        {a: int(tcpas[a]) for a in sorted(advertisers)},
        {g: int(bids[g]) for g in sorted(groups)},
    )
