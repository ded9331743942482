"""In-memory pipeline stages: feed accounting, training, publication, serving, evaluation.

The CLI verbs and :mod:`dpa_prospect.runner` are thin file-handling wrappers
around these functions.
"""

from __future__ import annotations

import json
import logging
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Mapping, Sequence

from .catalog import Catalog, ProductKey, ProductStats
from .click import ClickModelConfig, ClickTrainer, impression_event
from .conversion import (
    AdvertiserPerf,
    ConvModelConfig,
    PublishedConvModel,
    attribute_conversions,
    build_conv_training_feed,
    compute_tcpa,
    publish_conv_model,
)
from .errors import ConfigError
from .metrics import AdvertiserOutcome, HappinessResult, MetricReport, evaluate, happiness_report
from .offset import ModelState, train_batch
from .recommend import ItemToItem, Popularity
from .records import Campaign, Conversion, Impression, PixelEvent, UserProfile
from .serving import Counters, ServeConfig, ServeRequest, ServeResult, SnapshotBundle, serve
from .synth import DAY, DayFeeds, SyntheticWorldConfig, World
from .trending import (
    LookalikeConfig,
    LookalikeModel,
    PublishedTrendyModel,
    advertiser_products,
    build_threshold_curve,
    positive_events,
    publish_trendy_model,
    sample_curve_users,
    sample_negatives,
    select_top_products,
    threshold_for_percentile,
)

log = logging.getLogger(__name__)

_SECTIONS = {"click": ClickModelConfig, "conv": ConvModelConfig, "lookalike": LookalikeConfig,
             "serve": ServeConfig}


@dataclass(frozen=True)
class PipelineConfig:
    """One declarative file covering the world, every model, and the run itself."""

    world: SyntheticWorldConfig = field(default_factory=SyntheticWorldConfig)
    click: ClickModelConfig = field(default_factory=ClickModelConfig)
    conv: ConvModelConfig = field(default_factory=lambda: ConvModelConfig(min_conversions=10))
    lookalike: LookalikeConfig = field(default_factory=lambda: LookalikeConfig(
        negatives_per_product=500, passes=1, publish_t=3500, sample_r=20_000))
    serve: ServeConfig = field(default_factory=ServeConfig)
    test_days: int = 1
    trendy_percentile: float = 5.0
    serve_requests: int = 2000
    happiness_error: float = 0.01

    def __post_init__(self):
        if not 1 <= self.test_days < self.world.days:
            raise ConfigError("test_days must leave at least one training day")
        if not 0 < self.trendy_percentile < 100:
            raise ConfigError("trendy_percentile must lie strictly between 0 and 100")
        if self.serve_requests < 0:
            raise ConfigError("serve_requests must be non-negative")

    @property
    def train_days(self) -> int:
        return self.world.days - self.test_days

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["world"] = self.world.to_dict()
        for name in _SECTIONS:
            d[name] = asdict(d[name])
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kw = dict(d)
        if "world" in kw:
            kw["world"] = SyntheticWorldConfig.from_dict(kw["world"])
        for name, section in _SECTIONS.items():
            if name in kw:
                values = dict(kw[name])
                bad = set(values) - {f.name for f in fields(section)}
                if bad:
                    raise ConfigError(f"unknown {name} keys: {sorted(bad)}")
                for key, value in values.items():
                    if isinstance(value, list):
                        values[key] = tuple(value)
                try:
                    kw[name] = section(**values)
                except ValueError as exc:
                    raise ConfigError(f"{name}: {exc}") from exc
        return cls(**kw)

    @classmethod
    def from_json(cls, text: str) -> "PipelineConfig":
        return cls.from_dict(json.loads(text))

    def with_overrides(self, overrides: Mapping[str, str]) -> "PipelineConfig":
        """Apply ``section.key=value`` overrides (values parsed as JSON when possible)."""
        d = self.to_dict()
        for dotted, raw in overrides.items():
            try:
                value = json.loads(raw)
            except json.JSONDecodeError:
                value = raw
            node = d
            *path, last = dotted.split(".")
            for part in path:
                if not isinstance(node.get(part), dict):
                    raise ConfigError(f"unknown config section in {dotted!r}")
                node = node[part]
            if last not in node:
                raise ConfigError(f"unknown config key {dotted!r}")
            node[last] = value
        return PipelineConfig.from_dict(d)

    def with_seed(self, seed: int) -> "PipelineConfig":
        """One seed for every stream: world, feeds, init, and sampling."""
        return replace(self, world=replace(self.world, seed=seed),
                       click=replace(self.click, seed=seed), conv=replace(self.conv, seed=seed),
                       lookalike=replace(self.lookalike, seed=seed))


# -- feed accounting -----------------------------------------------------------------

def flatten(days: Sequence[DayFeeds], attr: str) -> list:
    return [r for d in days for r in getattr(d, attr)]


def product_stats(catalog: Catalog, impressions: Sequence[Impression],
                  conversions: Sequence[Conversion],
                  campaigns: Mapping[str, Campaign]) -> dict[ProductKey, ProductStats]:
    """Impression, click, conversion and spend counts; each click costs the group bid."""
    stats = {e.key: ProductStats() for e in catalog}
    for imp in impressions:
        st = stats.setdefault(imp.product, ProductStats())
        st.impressions += 1
        st.last_seen_day = max(st.last_seen_day, imp.timestamp // DAY)
        if imp.clicked:
            st.clicks += 1
            camp = campaigns.get(imp.product.product_group_id)
            st.spend += camp.bid if camp else 0
    for conv in conversions:
        stats.setdefault(conv.product, ProductStats()).conversions += 1
    return stats


def advertiser_perf(clicks: Sequence[Impression], conversions: Sequence[Conversion],
                    campaigns: Mapping[str, Campaign]) -> dict[str, AdvertiserPerf]:
    """Spend and attributed conversions per advertiser and DPA type."""
    perf: dict[str, AdvertiserPerf] = {}
    for click in clicks:
        p = perf.setdefault(click.product.advertiser_id, AdvertiserPerf(click.product.advertiser_id))
        camp = campaigns.get(click.product.product_group_id)
        p.spend_by_type[click.dpa_type] = p.spend_by_type.get(click.dpa_type, 0) + (
            camp.bid if camp else 0)
    pairs, _ = attribute_conversions(clicks, conversions)
    for _, click in pairs:
        p = perf[click.product.advertiser_id]
        p.conversions_by_type[click.dpa_type] = p.conversions_by_type.get(click.dpa_type, 0) + 1
    return perf


def group_spend(clicks: Sequence[Impression], campaigns: Mapping[str, Campaign],
                dpa_type: str | None = None) -> dict[str, int]:
    spend: Counter = Counter()
    for click in clicks:
        if dpa_type is None or click.dpa_type == dpa_type:
            camp = campaigns.get(click.product.product_group_id)
            spend[click.product.product_group_id] += camp.bid if camp else 0
    return dict(spend)


# -- training and publication -------------------------------------------------------------

def train_click(days: Sequence[DayFeeds], profiles: Mapping[str, UserProfile],
                config: ClickModelConfig, trainer: ClickTrainer | None = None) -> ClickTrainer:
    """One incremental batch per day; products are promoted at batch boundaries."""
    trainer = trainer or ClickTrainer(config)
    for d in days:
        crossed = trainer.train(d.impressions, profiles)
        log.info("click model day %d: %d impressions, %d products promoted", d.day,
                 len(d.impressions), len(crossed))
    return trainer


def train_conv(clicks: Sequence[Impression], conversions: Sequence[Conversion],
               profiles: Mapping[str, UserProfile], config: ConvModelConfig,
               model: ModelState | None = None) -> ModelState:
    events, dropped = build_conv_training_feed(clicks, conversions, profiles, config)
    model = model or config.new_model()
    train_batch(events, model)
    log.info("conversion model: %d events, %d conversions unattributed", len(events), dropped)
    return model


def publish_conv(model: ModelState, clicks: Sequence[Impression],
                 conversions: Sequence[Conversion], catalog: Catalog,
                 campaigns: Mapping[str, Campaign], config: ConvModelConfig) -> PublishedConvModel:
    pairs, _ = attribute_conversions(clicks, conversions)
    stats = {e.key: ProductStats() for e in catalog}
    for conv, _ in pairs:
        stats.setdefault(conv.product, ProductStats()).conversions += 1
    perf = advertiser_perf(clicks, conversions, campaigns)
    tcpas = {a: compute_tcpa(p, config.tcpa_multiplier) for a, p in perf.items()}
    bids = {g: c.bid for g, c in campaigns.items()}
    return publish_conv_model(model.freeze(), stats, tcpas, bids, config)


def train_lookalike_days(days: Sequence[DayFeeds], config: LookalikeConfig,
                         model: LookalikeModel | None = None) -> LookalikeModel:
    """Daily updates: top pixel products, their positives, and sampled negatives."""
    model = model or LookalikeModel(config)
    for d in days:
        if not d.pixels:
            model.daily_update([], [])
            continue
        products = select_top_products(d.pixels, config.top_n_products)
        pos = positive_events(d.pixels, products)
        neg = sample_negatives(d.impressions, products, config.negatives_per_product,
                               config.seed + d.day)
        evicted = model.daily_update(pos, neg)
        log.info("lookalike day %d: %d positives, %d negatives, %d evicted", d.day, len(pos),
                 len(neg), len(evicted))
    return model


def publish_trendy(model: LookalikeModel, catalog: Catalog, impressions: Sequence[Impression],
                   spend_by_group: Mapping[str, float], config: LookalikeConfig,
                   pct: float) -> PublishedTrendyModel:
    """Bounded product set by spend share, then a threshold per advertiser at ``pct``."""
    positives = {catalog.key(pid): n for pid, n in model.positives.items()
                 if pid in catalog and pid in model.absent_days}
    base = publish_trendy_model(model.model.freeze(), {}, spend_by_group, positives,
                                config.publish_t)
    users = sample_curve_users(impressions, config.sample_r, config.seed)
    thresholds, pcts = {}, {}
    for adv in sorted({k.advertiser_id for k in base.products}):
        curve = build_threshold_curve(base.model, adv, base.products, users)
        if curve.values:
            thresholds[adv] = threshold_for_percentile(curve, pct)
            pcts[adv] = pct
    return replace(base, thresholds=thresholds, percentiles=pcts, _scorers={})


# -- serving --------------------------------------------------------------------------------

def build_history(pixels: Sequence[PixelEvent], at: int) -> dict[str, list[tuple[ProductKey, int]]]:
    """User -> (product, seconds since last site event) as of timestamp ``at``."""
    last: dict[tuple[str, ProductKey], int] = {}
    for ev in pixels:
        if ev.timestamp <= at:
            k = (ev.user_id, ev.product)
            last[k] = max(last.get(k, ev.timestamp), ev.timestamp)
    out: dict[str, list[tuple[ProductKey, int]]] = defaultdict(list)
    for (user, key), ts in sorted(last.items()):
        out[user].append((key, at - ts))
    return dict(out)


def build_bundle(world: World, train: Sequence[DayFeeds], click: ClickTrainer,
                 conv: PublishedConvModel | None, trendy: PublishedTrendyModel | None,
                 config: PipelineConfig, at: int) -> SnapshotBundle:
    impressions = flatten(train, "impressions")
    pixels = flatten(train, "pixels")
    engagements = [(i.user_id, i.product) for i in impressions if i.clicked]
    engagements += [(p.user_id, p.product) for p in pixels]
    popularity = Counter(p.product for p in pixels if p.positive)
    return SnapshotBundle(
        click_model=click.model, click_config=click.config, catalog=world.catalog,
        campaigns=world.campaign_map(), product_stats=click.stats,
        history=build_history(pixels, at), conv=conv, conv_config=config.conv, trendy=trendy,
        item_to_item=ItemToItem(engagements), popularity=Popularity(popularity),
        config=config.serve)


@dataclass
class ServeSummary:
    requests: int
    ads: int
    carousels: int
    by_source: dict
    dropped: dict

    def to_dict(self) -> dict:
        return asdict(self)


def simulate_serve(requests: Sequence[ServeRequest], bundle: SnapshotBundle
                   ) -> tuple[list[ServeResult], ServeSummary]:
    results = [serve(r, bundle) for r in requests]
    dropped, by_source = Counters(), Counter()
    ads = carousels = 0
    for res in results:
        dropped.update(res.counters)
        for ad in res.ads:
            ads += 1
            carousels += ad.format == "carousel"
            by_source[ad.slots[0].source_type] += 1
    return results, ServeSummary(len(requests), ads, carousels, dict(sorted(by_source.items())),
                                 dict(sorted(dropped.items())))


# -- evaluation -----------------------------------------------------------------------------

def evaluate_click(trainer: ClickTrainer, impressions: Sequence[Impression],
                   profiles: Mapping[str, UserProfile]) -> MetricReport:
    events = [impression_event(i, profiles[i.user_id], trainer.stats.get(i.product),
                               trainer.config) for i in impressions]
    return evaluate(trainer.model, events)


def evaluate_conv(model: ModelState, clicks: Sequence[Impression],
                  conversions: Sequence[Conversion], profiles: Mapping[str, UserProfile],
                  config: ConvModelConfig) -> MetricReport:
    events, _ = build_conv_training_feed(clicks, conversions, profiles, config)
    return evaluate(model, events)


def conv_happiness(clicks: Sequence[Impression], conversions: Sequence[Conversion],
                   campaigns: Mapping[str, Campaign], tcpa: Mapping[str, int],
                   error: float, dpa_type: str = "conversion_prospecting",
                   min_conversions: int = 10) -> HappinessResult:
    """Happiness of advertisers whose ``dpa_type`` CPA is measured against their tCPA."""
    perf = advertiser_perf(clicks, conversions, campaigns)
    outcomes = [AdvertiserOutcome(a, p.spend_by_type.get(dpa_type, 0),
                                  p.conversions_by_type.get(dpa_type, 0), tcpa.get(a))
                for a, p in sorted(perf.items())]
    return happiness_report(outcomes, error, min_conversions)


def published_products(pub) -> dict[str, list[str]]:
    adv = sorted({k.advertiser_id for k in pub.products})
    return {a: [k.product_id for k in advertiser_products(pub.products, a)] for a in adv}
