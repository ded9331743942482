"""DPA click-through-rate model.

Products are described by their four-level hierarchy.  Products with few
impressions share their group's *default-product-group* vector (stored as the
pseudo product-id ``__default__@<group>``); once a product crosses the
impression threshold it gets its own product-id vector, initialized as a copy
of that default vector.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Iterable, Mapping, Sequence

from .catalog import ProductKey, ProductStats
from .offset import (
    DEFAULT_ETA0,
    DEFAULT_INIT_VARIANCE,
    DEFAULT_LAMBDA,
    Event,
    FeatureSchema,
    ModelState,
    predict,
    train_batch,
)
from .records import Impression, UserProfile

log = logging.getLogger(__name__)

ADVERTISER_ID = "advertiser-id"
PRODUCT_SET_ID = "product-set-id"
PRODUCT_GROUP_ID = "product-group-id"
PRODUCT_ID = "product-id"
AD_FEATURES = (ADVERTISER_ID, PRODUCT_SET_ID, PRODUCT_GROUP_ID, PRODUCT_ID)

USER_FEATURES = (
    "techno-segments",
    "page-section",
    "dpa-type-experiment-id",
    "impression-history",
    "age",
    "user-clicked-category",
    "mobile-activity",
    "ctr-advertiser-top",
    "user-clicked-product-category",
)
SIM_FEATURES = ("frequency", "recency", "slot-device")

DEFAULT_PREFIX = "__default__@"

FREQUENCY_BINS = ("0", "1", "2", "3-5", "6+")
RECENCY_BINS = ("<1h", "<1d", "<3d", "<7d", "7d+")


@dataclass(frozen=True)
class ClickModelConfig:
    promote_threshold: int = 1000
    user_features: tuple[str, ...] = USER_FEATURES
    similarity_features: tuple[str, ...] = SIM_FEATURES
    pair_width: int = 2
    solo_width: int = 2
    eta0: float = DEFAULT_ETA0
    lam: float = DEFAULT_LAMBDA
    init_variance: float = DEFAULT_INIT_VARIANCE
    seed: int = 0

    def __post_init__(self):
        if self.promote_threshold < 1:
            raise ValueError("promote_threshold must be >= 1")

    def schema(self) -> FeatureSchema:
        return FeatureSchema(self.user_features, self.pair_width, self.solo_width, AD_FEATURES,
                             self.similarity_features)

    def new_model(self) -> ModelState:
        return ModelState(self.schema(), init_variance=self.init_variance, lam=self.lam,
                          eta0=self.eta0, seed=self.seed)


def default_product_value(group_id: str) -> str:
    return DEFAULT_PREFIX + group_id


def product_ad_values(key: ProductKey, stats: ProductStats | None,
                      config: ClickModelConfig) -> dict[str, str]:
    promoted = stats is not None and stats.impressions > config.promote_threshold
    return {
        ADVERTISER_ID: key.advertiser_id,
        PRODUCT_SET_ID: key.product_set_id,
        PRODUCT_GROUP_ID: key.product_group_id,
        PRODUCT_ID: key.product_id if promoted else default_product_value(key.product_group_id),
    }


def promote_product(key: ProductKey, model: ModelState) -> bool:
    """Give ``key`` its own product-id vector, copied from the group default.

    Returns False (and changes nothing) when the product already has a vector.
    """
    model._check_writable()
    table = model.ad_table
    if (PRODUCT_ID, key.product_id) in table:
        log.info("product %s already promoted", key.product_id)
        return False
    table.set(PRODUCT_ID, key.product_id,
              table.get(PRODUCT_ID, default_product_value(key.product_group_id)))
    return True


# -- binning -----------------------------------------------------------------

def frequency_bin(count: int) -> str:
    if count <= 2:
        return FREQUENCY_BINS[max(count, 0)]
    return "3-5" if count <= 5 else "6+"


def recency_bin(seconds: int) -> str:
    """Bin the time since the product was last seen; negative means never."""
    if seconds < 0:
        return "7d+"
    for limit, name in ((3600, "<1h"), (86400, "<1d"), (3 * 86400, "<3d"), (7 * 86400, "<7d")):
        if seconds < limit:
            return name
    return "7d+"


def slot_device(slot: int, device: str) -> str:
    return f"slot{slot}_{'mobile' if device == 'mobile' else 'nonMobile'}"


def age_bin(age: int) -> str:
    if age <= 0:
        return "unknown"
    low = (age // 5) * 5
    return f"{low}-{low + 4}"


def dpa_type_experiment(dpa_type: str, experiment: str = "e0") -> str:
    return f"{dpa_type}:{experiment}"


# -- event assembly ----------------------------------------------------------

def user_values(profile: UserProfile, page_section: str, dpa_type: str) -> dict:
    """Click-model user features for one impression context."""
    out = {}
    for name, values in profile.features.items():
        out[name] = [(v, 1.0) for v in values] if values else [("none", 1.0)]
    out["page-section"] = [(page_section, 1.0)]
    out["dpa-type-experiment-id"] = [(dpa_type_experiment(dpa_type), 1.0)]
    out["age"] = [(age_bin(profile.age), 1.0)]
    return out


def sim_bins(frequency: int, recency: int, slot: int, device: str) -> dict[str, str]:
    return {
        "frequency": frequency_bin(frequency),
        "recency": recency_bin(recency),
        "slot-device": slot_device(slot, device),
    }


def user_event(profile: UserProfile, page_section: str, dpa_type: str, *, frequency=0,
               recency=-1, slot=1, device="nonMobile", timestamp=0,
               config: ClickModelConfig | None = None) -> Event:
    """User-only event (no ad values) carrying the configured features."""
    config = config or ClickModelConfig()
    values = user_values(profile, page_section, dpa_type)
    sims = sim_bins(frequency, recency, slot, device)
    return Event(
        {k: v for k, v in values.items() if k in config.user_features},
        {},
        {k: v for k, v in sims.items() if k in config.similarity_features},
        timestamp=timestamp,
    )


def with_product(user: Event, key: ProductKey, stats: ProductStats | None,
                 config: ClickModelConfig, label: int = 0, kind: str | None = None) -> Event:
    return replace(user, ad_values=product_ad_values(key, stats, config), label=label,
                   kind=kind or user.kind)


def pctr(user: Event, key: ProductKey, model: ModelState, stats: ProductStats | None,
         config: ClickModelConfig) -> float:
    return predict(with_product(user, key, stats, config), model)


def impression_event(imp: Impression, profile: UserProfile, stats: ProductStats | None,
                     config: ClickModelConfig) -> Event:
    user = user_event(profile, imp.page_section, imp.dpa_type, frequency=imp.frequency,
                      recency=imp.recency, slot=imp.slot, device=imp.device,
                      timestamp=imp.timestamp, config=config)
    return with_product(user, imp.product, stats, config, label=imp.clicked,
                        kind="click" if imp.clicked else "skip")


class ClickTrainer:
    """Incremental click-model training with promotion at batch boundaries."""

    def __init__(self, config: ClickModelConfig, model: ModelState | None = None,
                 stats: Mapping[ProductKey, ProductStats] | None = None):
        self.config = config
        self.model = model or config.new_model()
        self.stats: dict[ProductKey, ProductStats] = {
            k: replace(v) for k, v in (stats or {}).items()}
        for key, st in self.stats.items():
            if st.impressions > config.promote_threshold:
                promote_product(key, self.model)

    def train(self, impressions: Sequence[Impression], profiles: Mapping[str, UserProfile]):
        events = [impression_event(imp, profiles[imp.user_id], self.stats.get(imp.product),
                                   self.config) for imp in impressions]
        train_batch(events, self.model)
        crossed = []
        for imp in impressions:
            st = self.stats.setdefault(imp.product, ProductStats())
            was = st.impressions
            st.impressions += 1
            st.clicks += imp.clicked
            st.last_seen_day = max(st.last_seen_day, imp.timestamp // 86400)
            if was <= self.config.promote_threshold < st.impressions:
                crossed.append(imp.product)
        for key in crossed:
            promote_product(key, self.model)
        return crossed

    def train_many(self, batches: Iterable[Sequence[Impression]],
                   profiles: Mapping[str, UserProfile]):
        for batch in batches:
            self.train(batch, profiles)
        return self.model
