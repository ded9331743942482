"""Synthetic advertiser worlds and daily feeds with planted structure.

Everything produced here is a pure function of the :class:`SyntheticWorldConfig`
(including its seed).  Randomness is drawn from named streams so each day's
feed can be regenerated on its own.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .catalog import Catalog, CatalogEntry, ProductKey, ProductStats
from .errors import ConfigError
from .feeds import read_catalog, read_feed, write_feed
from .records import Campaign, Conversion, Impression, PixelEvent, UserProfile
from .seeds import seed_stream
from .serving import ServeRequest

log = logging.getLogger(__name__)

DAY = 86400
MAX_CONVERSION_DELAY = 30 * DAY
CATEGORIES = ("apparel", "electronics", "home", "beauty", "sports", "toys")
TECHNO = ("ios", "android", "windows", "mac", "linux", "chromeos")
ACTIVITY = ("low", "mid", "high")


@dataclass(frozen=True)
class AffinityRule:
    """Users in the (age range, gender) cell are ``multiplier`` times as likely to
    click on and buy from ``advertiser_id``."""

    age_min: int
    age_max: int
    gender: str
    advertiser_id: str
    multiplier: float

    def matches(self, age: np.ndarray, gender: np.ndarray) -> np.ndarray:
        return (age >= self.age_min) & (age <= self.age_max) & (gender == self.gender)


def _default_rules():
    return (AffinityRule(18, 25, "female", "a0", 3.0), AffinityRule(40, 60, "male", "a1", 2.5))


@dataclass(frozen=True)
class SyntheticWorldConfig:
    seed: int = 1
    n_users: int = 30_000  # enough distinct users for a 20K threshold-curve sample
    n_advertisers: int = 4
    sets_per_advertiser: int = 2
    groups_per_set: int = 2
    products_per_group: int = 5
    days: int = 7
    impressions_per_day: int = 100_000
    pixels_per_day: int = 20_000
    base_ctr: float = 0.02
    page_ctr: dict = field(default_factory=lambda: {
        "news": 1.0, "sports": 1.3, "finance": 0.7, "mail": 0.8, "home": 1.2})
    page_cvr: dict = field(default_factory=lambda: {
        "news": 0.1, "sports": 0.05, "finance": 0.3, "mail": 0.1, "home": 0.05})
    page_vocabulary: int = 200  # page sections, spread evenly over the page_ctr keys
    type_mix: dict = field(default_factory=lambda: {
        "retargeting": 0.5, "conversion_prospecting": 0.25, "trending_prospecting": 0.25})
    type_ctr: dict = field(default_factory=lambda: {
        "retargeting": 2.0, "conversion_prospecting": 1.0, "trending_prospecting": 1.0})
    activity_ctr: dict = field(default_factory=lambda: {"low": 0.7, "mid": 1.0, "high": 1.4})
    affinity_rules: tuple = field(default_factory=_default_rules)
    pixel_kinds: dict = field(default_factory=lambda: {
        "purchase": 0.3, "add_to_cart": 0.3, "view": 0.4})
    popularity_exponent: float = 0.8
    unknown_rate: float = 0.05
    missing_asset_rate: float = 0.02
    mobile_rate: float = 0.6
    mean_conversion_delay_days: float = 1.5
    bid_range: tuple = (20, 200)  # cents per click

    def __post_init__(self):
        counts = ("n_users", "n_advertisers", "sets_per_advertiser", "groups_per_set",
                  "products_per_group", "days", "impressions_per_day")
        for name in counts:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1")
        if self.pixels_per_day < 0:
            raise ConfigError("pixels_per_day must be non-negative")
        rates = [("base_ctr", self.base_ctr), ("unknown_rate", self.unknown_rate),
                 ("missing_asset_rate", self.missing_asset_rate),
                 ("mobile_rate", self.mobile_rate)]
        rates += [(f"page_cvr[{k}]", v) for k, v in self.page_cvr.items()]
        for name, value in rates:
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {value}")
        if set(self.page_ctr) != set(self.page_cvr):
            raise ConfigError("page_ctr and page_cvr must cover the same page sections")
        if self.page_vocabulary < len(self.page_ctr):
            raise ConfigError("page_vocabulary must cover every page_ctr key")
        for name in ("page_ctr", "type_ctr", "activity_ctr"):
            if any(v < 0 for v in getattr(self, name).values()):
                raise ConfigError(f"{name} multipliers must be non-negative")
        for name in ("type_mix", "pixel_kinds"):
            probs = getattr(self, name)
            if any(v < 0 for v in probs.values()) or not np.isclose(sum(probs.values()), 1.0):
                raise ConfigError(f"{name} must be a probability distribution")
        if set(self.type_mix) - set(self.type_ctr):
            raise ConfigError("type_ctr needs a multiplier for every type in type_mix")
        if self.mean_conversion_delay_days <= 0:
            raise ConfigError("mean_conversion_delay_days must be positive")
        lo, hi = self.bid_range
        if not 0 < lo <= hi:
            raise ConfigError("bid_range must satisfy 0 < low <= high")
        rules = tuple(r if isinstance(r, AffinityRule) else AffinityRule(**r)
                      for r in self.affinity_rules)
        if any(r.multiplier < 0 for r in rules):
            raise ConfigError("affinity multipliers must be non-negative")
        object.__setattr__(self, "affinity_rules", rules)
        object.__setattr__(self, "bid_range", tuple(self.bid_range))

    @property
    def n_products(self) -> int:
        return (self.n_advertisers * self.sets_per_advertiser * self.groups_per_set
                * self.products_per_group)

    def page_sections(self) -> list[tuple[str, str]]:
        """(page section, base key) pairs; a section inherits its base's multipliers."""
        bases = sorted(self.page_ctr)
        return [(f"{bases[j % len(bases)]}-{j // len(bases):03d}", bases[j % len(bases)])
                for j in range(self.page_vocabulary)]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["affinity_rules"] = [asdict(r) for r in self.affinity_rules]
        d["bid_range"] = list(self.bid_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticWorldConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown world config keys: {sorted(unknown)}")
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "SyntheticWorldConfig":
        return cls.from_dict(json.loads(text))


@dataclass
class World:
    catalog: Catalog
    users: list[UserProfile]
    campaigns: list[Campaign]
    popularity: np.ndarray  # per catalog product, sums to 1

    @property
    def products(self) -> list[ProductKey]:
        return [e.key for e in self.catalog]

    def profiles(self) -> dict[str, UserProfile]:
        return {u.user_id: u for u in self.users}

    def campaign_map(self) -> dict[str, Campaign]:
        return {c.product_group_id: c for c in self.campaigns}


@dataclass
class DayFeeds:
    day: int
    impressions: list[Impression]
    conversions: list[Conversion]
    pixels: list[PixelEvent]

    @property
    def clicks(self) -> list[Impression]:
        return [i for i in self.impressions if i.clicked]


# -- world ------------------------------------------------------------------------------

def _pick(rng, pool, lo, hi) -> list[str]:
    k = int(rng.integers(lo, hi + 1))
    return sorted(str(x) for x in rng.choice(pool, size=min(k, len(pool)), replace=False))


def gen_world(config: SyntheticWorldConfig) -> World:
    """Catalog with the four-level hierarchy, campaigns, and a user population."""
    rng = seed_stream(config.seed, "world")
    entries, campaigns = [], []
    for a in range(config.n_advertisers):
        adv = f"a{a}"
        for s in range(config.sets_per_advertiser):
            pset = f"{adv}s{s}"
            category = CATEGORIES[int(rng.integers(len(CATEGORIES)))]
            for g in range(config.groups_per_set):
                group = f"{pset}g{g}"
                bid = int(rng.integers(config.bid_range[0], config.bid_range[1] + 1))
                campaigns.append(Campaign(adv, group, bid, budget=10_000_000,
                                          expiration_day=config.days + 30))
                for p in range(config.products_per_group):
                    pid = f"{group}p{p}"
                    key = ProductKey(adv, pset, group, pid)
                    missing = rng.random() < config.missing_asset_rate
                    entries.append(CatalogEntry(
                        key, ProductStats(), title=f"{category} item {pid}",
                        image="" if missing else f"https://img.example/{pid}.jpg",
                        description=f"A {category} product from advertiser {adv}",
                        category=category))
    n = len(entries)
    ranks = rng.permutation(n)
    weights = 1.0 / (ranks + 1.0) ** config.popularity_exponent
    popularity = weights / weights.sum()

    advertisers = [f"a{a}" for a in range(config.n_advertisers)]
    groups = [c.product_group_id for c in campaigns]
    users = []
    for u in range(config.n_users):
        unknown_age = rng.random() < config.unknown_rate
        unknown_gender = rng.random() < config.unknown_rate
        age = 0 if unknown_age else int(rng.integers(18, 71))
        gender = "unknown" if unknown_gender else ("female" if rng.random() < 0.5 else "male")
        feats = {
            "techno-segments": _pick(rng, TECHNO, 1, 2),
            "impression-history": _pick(rng, advertisers, 0, 3),
            "user-clicked-category": _pick(rng, CATEGORIES, 0, 2),
            "mobile-activity": [ACTIVITY[int(rng.integers(len(ACTIVITY)))]],
            "ctr-advertiser-top": [advertisers[int(rng.integers(len(advertisers)))]],
            "user-clicked-product-category": _pick(rng, CATEGORIES, 0, 2),
            "ctr-campaign-top": [groups[int(rng.integers(len(groups)))]],
        }
        users.append(UserProfile(f"u{u}", age, gender, feats))
    return World(Catalog(entries), users, campaigns, popularity)


def affinity_matrix(users: list[UserProfile], advertisers: list[str],
                    rules) -> np.ndarray:
    """users x advertisers multiplier; overlapping rules multiply."""
    age = np.array([u.age for u in users])
    gender = np.array([u.gender for u in users])
    out = np.ones((len(users), len(advertisers)))
    col = {a: i for i, a in enumerate(advertisers)}
    for rule in rules:
        if rule.advertiser_id in col:
            out[rule.matches(age, gender), col[rule.advertiser_id]] *= rule.multiplier
    return out


# -- feeds ------------------------------------------------------------------------------

class _Sampler:
    """Cached per-world arrays shared by every day's draw."""

    def __init__(self, world: World, config: SyntheticWorldConfig):
        self.products = world.products
        self.advertisers = sorted({k.advertiser_id for k in self.products})
        adv_col = {a: i for i, a in enumerate(self.advertisers)}
        self.product_adv = np.array([adv_col[k.advertiser_id] for k in self.products])
        self.popularity = world.popularity
        self.users = world.users
        self.affinity = affinity_matrix(world.users, self.advertisers, config.affinity_rules)
        self.activity = np.array([config.activity_ctr[u.features["mobile-activity"][0]]
                                  for u in world.users])
        sections = config.page_sections()
        self.pages = [name for name, _ in sections]
        self.page_ctr = np.array([config.page_ctr[base] for _, base in sections])
        self.page_cvr = np.array([config.page_cvr[base] for _, base in sections])
        self.types = sorted(config.type_mix)
        self.type_p = np.array([config.type_mix[t] for t in self.types])
        self.type_ctr = np.array([config.type_ctr[t] for t in self.types])


def _draw_impressions(s: _Sampler, config: SyntheticWorldConfig, day: int):
    rng = seed_stream(config.seed, f"impressions:day{day}")
    n = config.impressions_per_day
    ts = day * DAY + np.sort(rng.integers(0, DAY, n))
    user = rng.integers(len(s.users), size=n)
    prod = rng.choice(len(s.products), size=n, p=s.popularity)
    typ = rng.choice(len(s.types), size=n, p=s.type_p)
    page = rng.integers(len(s.pages), size=n)
    mobile = rng.random(n) < config.mobile_rate
    slot = rng.integers(1, 6, size=n)
    freq = rng.poisson(1.5, size=n)
    seen = rng.random(n) < np.where(np.array(s.types)[typ] == "retargeting", 1.0, 0.3)
    recency = np.where(seen, rng.exponential(2 * DAY, n).astype(np.int64), -1)
    ctr = (config.base_ctr * s.page_ctr[page] * s.type_ctr[typ] * s.activity[user]
           * s.affinity[user, s.product_adv[prod]])
    clicked = seed_stream(config.seed, f"clicks:day{day}").random(n) < np.clip(ctr, 0.0, 1.0)
    return ts, user, prod, typ, page, mobile, slot, freq, recency, clicked


def _draw_conversions(s: _Sampler, config: SyntheticWorldConfig, day: int, ts, user, prod,
                      page, clicked) -> list[Conversion]:
    rng = seed_stream(config.seed, f"conversions:day{day}")
    idx = np.flatnonzero(clicked)
    hit = rng.random(len(idx)) < s.page_cvr[page[idx]]
    delay = rng.exponential(config.mean_conversion_delay_days * DAY, len(idx))
    delay = np.clip(np.ceil(delay), 1, MAX_CONVERSION_DELAY).astype(np.int64)
    out = []
    for i, d in zip(idx[hit], delay[hit]):
        out.append(Conversion(int(ts[i] + d), s.users[user[i]].user_id, s.products[prod[i]],
                              int(ts[i])))
    return out


def _draw_pixels(s: _Sampler, config: SyntheticWorldConfig, day: int) -> list[PixelEvent]:
    rng = seed_stream(config.seed, f"pixels:day{day}")
    n = config.pixels_per_day
    if n == 0:
        return []
    ts = day * DAY + np.sort(rng.integers(0, DAY, n))
    user = rng.integers(len(s.users), size=n)
    kinds = sorted(config.pixel_kinds)
    kind = rng.choice(len(kinds), size=n, p=[config.pixel_kinds[k] for k in kinds])
    # product choice depends on the user's affinity row; users sharing a row share a law
    rows, inverse = np.unique(s.affinity[user], axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    prod = np.empty(n, dtype=np.int64)
    for r, row in enumerate(rows):
        where = np.flatnonzero(inverse == r)
        w = s.popularity * row[s.product_adv]
        prod[where] = rng.choice(len(s.products), size=len(where), p=w / w.sum())
    return [PixelEvent(int(t), s.users[u].user_id, s.users[u].age, s.users[u].gender,
                       s.products[p], kinds[k])
            for t, u, p, k in zip(ts, user, prod, kind)]


def gen_feeds(world: World, config: SyntheticWorldConfig) -> list[DayFeeds]:
    """Impressions (with clicks), post-click conversions and pixel events per day.

    Conversions land in the day of their own timestamp; those falling after the
    simulated horizon are not observed.
    """
    s = _Sampler(world, config)
    days = []
    late: list[Conversion] = []
    for day in range(config.days):
        ts, user, prod, typ, page, mobile, slot, freq, rec, clicked = \
            _draw_impressions(s, config, day)
        imps = [Impression(int(t), s.users[u].user_id, s.users[u].age, s.users[u].gender,
                           s.products[p], s.types[y], s.pages[g],
                           "mobile" if m else "nonMobile", int(sl), int(f), int(r), int(c))
                for t, u, p, y, g, m, sl, f, r, c
                in zip(ts, user, prod, typ, page, mobile, slot, freq, rec, clicked)]
        late.extend(_draw_conversions(s, config, day, ts, user, prod, page, clicked))
        days.append(DayFeeds(day, imps, [], _draw_pixels(s, config, day)))
    horizon = config.days * DAY
    for conv in sorted(late, key=lambda c: (c.timestamp, c.user_id, c.product)):
        if conv.timestamp < horizon:
            days[conv.timestamp // DAY].conversions.append(conv)
    log.info("generated %d days: %d impressions, %d conversions", config.days,
             sum(len(d.impressions) for d in days), sum(len(d.conversions) for d in days))
    return days


def gen_requests(world: World, config: SyntheticWorldConfig, n: int, day: int,
                 seed_name: str = "requests") -> list[ServeRequest]:
    """Serve requests for simulated traffic on ``day``."""
    rng = seed_stream(config.seed, f"{seed_name}:day{day}")
    pages = [name for name, _ in config.page_sections()]
    user = rng.integers(len(world.users), size=n)
    page = rng.integers(len(pages), size=n)
    floor = rng.integers(0, 30, size=n)
    carousel = rng.random(n) < 0.8
    mobile = rng.random(n) < config.mobile_rate
    slot = rng.integers(1, 6, size=n)
    return [ServeRequest(f"r{day}-{i}", world.users[u], pages[g], int(f), bool(c),
                         "mobile" if m else "nonMobile", int(sl), day=day)
            for i, (u, g, f, c, m, sl) in enumerate(zip(user, page, floor, carousel, mobile,
                                                        slot))]


# -- files ------------------------------------------------------------------------------

def write_world(world: World, directory) -> dict[str, Path]:
    d = Path(directory)
    return {
        "catalog": write_feed(d / "catalog.tsv", "catalog", world.catalog),
        "users": write_feed(d / "users.tsv", "users", world.users),
        "campaigns": write_feed(d / "campaigns.tsv", "campaigns", world.campaigns),
        "popularity": _write_popularity(d / "popularity.json", world),
    }


def _write_popularity(path: Path, world: World) -> Path:
    path.write_text(json.dumps({k.product_id: float(p)
                                for k, p in zip(world.products, world.popularity)}))
    return path


def read_world(directory) -> World:
    d = Path(directory)
    catalog = read_catalog(d / "catalog.tsv")
    pop = json.loads((d / "popularity.json").read_text())
    return World(catalog, read_feed(d / "users.tsv", "users"),
                 read_feed(d / "campaigns.tsv", "campaigns"),
                 np.array([pop[e.key.product_id] for e in catalog]))


FEED_KINDS = ("impressions", "conversions", "pixels")


def write_feeds(days: list[DayFeeds], directory) -> list[Path]:
    out = []
    for d in days:
        base = Path(directory) / f"day{d.day:02d}"
        out.append(write_feed(base / "impressions.tsv", "impressions", d.impressions))
        out.append(write_feed(base / "conversions.tsv", "conversions", d.conversions))
        out.append(write_feed(base / "pixels.tsv", "pixels", d.pixels))
    return out


def read_feeds(directory) -> list[DayFeeds]:
    days = []
    for base in sorted(Path(directory).glob("day*")):
        day = int(base.name[3:])
        days.append(DayFeeds(day, read_feed(base / "impressions.tsv", "impressions"),
                             read_feed(base / "conversions.tsv", "conversions"),
                             read_feed(base / "pixels.tsv", "pixels")))
    return days
