import math
import random
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dpa_prospect.catalog import Catalog, CatalogEntry, ProductKey, ProductStats
from dpa_prospect.click import ClickModelConfig, pctr, user_event, with_product
from dpa_prospect.conversion import ConvModelConfig, PublishedConvModel
from dpa_prospect.offset import train_batch
from dpa_prospect.recommend import ItemToItem, Popularity
from dpa_prospect.records import Campaign, UserProfile
from dpa_prospect.serving import (
    Candidate,
    CarouselAd,
    Counters,
    FixtureSource,
    PartialCarousel,
    RetargetingSource,
    ServeRequest,
    SingleAd,
    SnapshotBundle,
    backfill,
    dedupe,
    filter_candidates,
    gather,
    group,
    match,
    preliminary_auction,
    rank,
    render,
    serve,
)
from dpa_prospect.trending import LookalikeConfig, PublishedTrendyModel
from oracles import top_l_brute

CLICK = ClickModelConfig(user_features=("page-section", "age"))
USER = UserProfile("u1", 30, "female", {"ctr-campaign-top": ["c1"]})


def key(adv="a1", grp="g1", pid="p1"):
    return ProductKey(adv, "s1", f"{adv}-{grp}", pid)


def campaign(adv="a1", grp="g1", bid=20, **kw):
    return Campaign(adv, f"{adv}-{grp}", bid, kw.pop("budget", 10_000),
                    kw.pop("expiration_day", 100), **kw)


def catalog_for(keys, missing=()):
    entries = []
    for k in keys:
        image = "" if k.product_id in missing else f"img/{k.product_id}.jpg"
        entries.append(CatalogEntry(k, ProductStats(), f"title {k.product_id}", image,
                                    f"desc {k.product_id}"))
    return Catalog(entries)


def request(**kw):
    base = dict(request_id="r1", user=USER, page_section="news", floor_price=0)
    base.update(kw)
    return ServeRequest(**base)


def bundle(keys=(), **kw):
    keys = list(keys)
    model = kw.pop("click_model", None) or CLICK.new_model().freeze()
    campaigns = kw.pop("campaigns", None)
    if campaigns is None:
        campaigns = {k.product_group_id: campaign(k.advertiser_id, k.product_group_id.split("-")[1])
                     for k in keys}
    return SnapshotBundle(model, CLICK, kw.pop("catalog", catalog_for(keys)), campaigns, **kw)


def cand(pid, score_parts=(0.1, 10.0), adv="a1", grp="g1", source="retargeting"):
    p, b = score_parts
    return Candidate(key(adv, grp, pid), source, bid=b, pctr=p)


# -- candidate basics ----------------------------------------------------------

def test_candidate_score_and_validation():
    c = Candidate(key(), "retargeting", bid=12.5, pctr=0.02)
    assert c.score == 0.02 * 12.5
    with pytest.raises(ValueError):
        Candidate(key(), "unknown_type")
    with pytest.raises(ValueError):
        Candidate(key(), "retargeting", bid=-1)
    with pytest.raises(ValueError):
        request(floor_price=-1)


# -- gather --------------------------------------------------------------------

def test_gather_empty():
    assert gather(request(), bundle()) == []


def test_gather_retargeting_from_history():
    k1, k2 = key(pid="p1"), key(pid="p2")
    b = bundle([k1, k2], history={"u1": [(k2, 500), (k1, 100), (k2, 50)]})
    out = gather(request(), b)
    assert [(c.product, c.recency) for c in out] == [(k1, 100), (k2, 50)]


def _conv_bundle(pconv, tcpa=500, bid_pg=20):
    config = ConvModelConfig(init_variance=0.0)
    model = config.new_model()
    raw = pconv / (1 + pconv)
    model.bias = math.log(raw / (1 - raw))
    k = key()
    pub = PublishedConvModel(model.freeze(), (k,), {"a1": tcpa}, {k.product_group_id: bid_pg})
    return bundle([k], conv=pub, conv_config=config), k


def test_gather_conversion_floor_exclusion():
    b, k = _conv_bundle(0.02)
    assert gather(request(floor_price=12), b) == []
    out = gather(request(floor_price=10), b)
    assert len(out) == 1 and out[0].bid == pytest.approx(10.0)
    assert out[0].source_type == "conversion_prospecting"


def test_gather_conversion_bid_capped():
    b, _ = _conv_bundle(0.9)
    assert gather(request(), b)[0].bid == 20.0


def test_gather_trending_strict_threshold():
    config = LookalikeConfig()
    k = key()
    model = config.new_model().freeze()
    probe = PublishedTrendyModel(model, (k,), {"a1": 0.0}, {})
    s = probe.max_score(30, "female", "a1")
    at = bundle([k], trendy=PublishedTrendyModel(model, (k,), {"a1": s}, {}))
    assert gather(request(), at) == []
    below = bundle([k], trendy=PublishedTrendyModel(model, (k,), {"a1": math.nextafter(s, 0)},
                                                     {}))
    assert [c.product for c in gather(request(), below)] == [k]
    unknown = request(user=UserProfile("u2", 0, "female"))
    assert gather(unknown, below) == []


def test_gather_stub_fixtures_and_union():
    k1, k2 = key(pid="p1"), key(pid="p2")
    sources = [RetargetingSource(), FixtureSource("search_stub", [k1]),
               FixtureSource("cross_sell", per_user={"u1": [k2]})]
    b = bundle([k1, k2], history={"u1": [(k1, 10)]}, sources=sources)
    assert Counter(c.source_type for c in gather(request(), b)) == {
        "retargeting": 1, "search_stub": 1, "cross_sell": 1}


# -- match / filter ------------------------------------------------------------

def test_match_counts_and_attributes():
    keys = [key(pid=f"p{i}", grp=f"g{i}") for i in range(100)]
    camps = {k.product_group_id: campaign("a1", f"g{i}") for i, k in enumerate(keys[3:], 3)}
    counters = Counters()
    out = match([Candidate(k, "retargeting") for k in keys], camps, counters)
    assert len(out) == 97
    assert counters["match"] == 3
    c = out[0]
    assert c.campaign.budget and c.campaign.expiration_day and c.campaign.target_genders
    assert c.bid == c.campaign.bid


def test_match_keeps_conversion_bid():
    out = match([Candidate(key(), "conversion_prospecting", bid=7.5)],
                {key().product_group_id: campaign()}, Counters())
    assert out[0].bid == 7.5


@pytest.mark.parametrize("camp, req, reason", [
    (campaign(expiration_day=3), request(day=4), "expired"),
    (campaign(target_genders=("male",)), request(), "targeting"),
    (campaign(languages=("fr",)), request(), "policy"),
    (campaign(budget=5), request(), "budget"),
    (campaign(bid=20), request(floor_price=21), "floor"),
])
def test_filter_removals(camp, req, reason):
    c = match([Candidate(key(), "retargeting")], {key().product_group_id: camp}, Counters())
    counters = Counters()
    assert filter_candidates(c, req, counters) == []
    assert counters[f"filter.{reason}"] == 1


def test_filter_retains_passing_unchanged():
    c = match([Candidate(key(), "retargeting")], {key().product_group_id: campaign()}, Counters())
    assert filter_candidates(c, request(day=100, floor_price=20), Counters()) == c


# -- auction / rank --------------------------------------------------------------

def test_preliminary_auction_examples():
    cands = [cand(f"p{i:03d}", (0.01 * (i % 7 + 1), 10 + i), source="search_stub")
             for i in range(100)]
    top = preliminary_auction(cands, 40)
    assert len(top) == 40
    assert top == top_l_brute(cands, 40)
    assert len(preliminary_auction(cands[:10], 40)) == 10


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.sampled_from([0.0, 0.01, 0.02, 0.05]), st.sampled_from([0, 5, 10])),
                max_size=500), st.integers(0, 60))
def test_preliminary_auction_matches_brute_force(parts, l):
    cands = [cand(f"p{i:04d}", p) for i, p in enumerate(parts)]
    top = preliminary_auction(cands, l)
    assert top == top_l_brute(cands, l)
    assert len(top) == min(l, len(cands))
    assert set(top) <= set(cands)


@pytest.fixture(scope="module")
def trained_click():
    rng = np.random.default_rng(0)
    model = CLICK.new_model()
    keys = [key(pid=f"p{i}", grp=f"g{i % 2}") for i in range(6)]
    events = []
    for t in range(3000):
        k = keys[rng.integers(len(keys))]
        page = ["news", "sports"][rng.integers(2)]
        ev = user_event(USER, page, "retargeting", timestamp=t, config=CLICK)
        events.append(with_product(ev, k, None, CLICK, label=int(rng.random() < 0.05 * (
            1 + int(k.product_id[1:])))))
    train_batch(events, model)
    return model.freeze(), keys


def test_rank_uses_click_model_and_is_permutation_invariant(trained_click):
    model, keys = trained_click
    b = bundle(keys, click_model=model)
    cands = match([Candidate(k, t) for k in keys for t in ("retargeting", "search_stub")],
                  b.campaigns, Counters())
    ranked = rank(cands, request(), b)
    for c in ranked:
        ev = user_event(USER, "news", c.source_type, config=CLICK)
        assert c.pctr == pctr(ev, c.product, model, None, CLICK)
    scores = [c.score for c in ranked]
    assert scores == sorted(scores, reverse=True)
    shuffled = cands[:]
    random.Random(1).shuffle(shuffled)
    assert rank(shuffled, request(), b) == ranked


def test_rank_tie_break_by_product_id():
    model = ClickModelConfig(user_features=("page-section", "age"), init_variance=0.0)
    k1, k2 = key(pid="p2"), key(pid="p1")
    b = SnapshotBundle(model.new_model().freeze(), model, catalog_for([k1, k2]),
                       {k1.product_group_id: campaign()})
    cands = match([Candidate(k1, "retargeting"), Candidate(k2, "retargeting")], b.campaigns,
                  Counters())
    assert [c.product.product_id for c in rank(cands, request(), b)] == ["p1", "p2"]


# -- dedupe / group ------------------------------------------------------------

def test_dedupe_keeps_higher_scoring_type():
    a = cand("p1", (0.03, 10), source="retargeting")
    b = cand("p1", (0.02, 10), source="conversion_prospecting")
    assert dedupe([b, a]) == [a]


def test_dedupe_one_line_per_advertiser():
    top = cand("p1", (0.05, 10), grp="g1")
    others = [cand("p2", (0.04, 10), grp="g2"), cand("p3", (0.03, 10), grp="g3")]
    assert dedupe([*others, top]) == [top]


def test_dedupe_identity_without_duplicates():
    cands = [cand("p1", (0.05, 10), adv="a1"), cand("p2", (0.04, 10), adv="a2")]
    assert dedupe(cands) == cands


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 9), st.integers(0, 2), st.integers(0, 2),
                          st.sampled_from(["retargeting", "search_stub", "trending_prospecting"]),
                          st.sampled_from([0.01, 0.02, 0.03])), max_size=40))
def test_dedupe_idempotent(rows):
    cands = [cand(f"p{p}", (s, 10), adv=f"a{a}", grp=f"g{g}", source=t)
             for p, a, g, t, s in rows]
    # a product id determines its path
    seen = {}
    cands = [c for c in cands if seen.setdefault(c.product.product_id, c.product) == c.product]
    once = dedupe(cands)
    assert dedupe(once) == once
    assert len({c.product for c in once}) == len(once)
    lines = {}
    for c in once:
        assert lines.setdefault(c.product.advertiser_id, c.product.product_group_id) \
            == c.product.product_group_id


def test_group_carousel_and_single():
    cands = [cand(f"p{i}", (0.05 - 0.01 * i, 10)) for i in range(3)]
    ads = group(cands, request())
    assert len(ads) == 1 and isinstance(ads[0], CarouselAd)
    assert [c.product.product_id for c in ads[0].slots] == ["p0", "p1", "p2"]
    single = group(cands, request(supports_carousel=False))
    assert type(single[0]) is SingleAd and single[0].slots == (cands[0],)
    partial = group(cands[:2], request())
    assert isinstance(partial[0], PartialCarousel) and len(partial[0].slots) == 2


def test_carousel_requires_three_slots():
    with pytest.raises(ValueError):
        CarouselAd("a1", (cand("p1"), cand("p2")))


# -- recommendation and backfill ---------------------------------------------------

def test_item_to_item_hand_computed():
    p = [key(pid=f"p{i}") for i in range(5)]
    other_adv = key(adv="a2", pid="q1")
    engagements = [
        ("u1", p[0]), ("u1", p[1]),
        ("u2", p[0]), ("u2", p[1]), ("u2", p[2]),
        ("u3", p[0]), ("u3", p[3]), ("u3", other_adv),
        ("u4", p[4]),
    ]
    i2i = ItemToItem(engagements)
    # p0 users {1,2,3}; p1 {1,2}; p2 {2}; p3 {3}; p4 {4}
    expected = {p[1]: 2 / math.sqrt(6), p[2]: 1 / math.sqrt(3), p[3]: 1 / math.sqrt(3)}
    related = i2i.related(p[0])
    assert [k for k, _ in related] == [p[1], p[2], p[3]]
    for k, s in related:
        assert s == pytest.approx(expected[k], abs=1e-12)
    assert i2i.similarity(p[0], p[4]) == 0.0
    assert i2i.related(key(pid="nope")) == []


def test_item_to_item_always_together():
    a, b_ = key(pid="p1"), key(pid="p2")
    i2i = ItemToItem([(f"u{i}", k) for i in range(5) for k in (a, b_)] + [("u9", key(pid="p3"))])
    assert i2i.related(a) == [(b_, pytest.approx(1.0))]


def _partial(*pids):
    return PartialCarousel("a1", tuple(cand(pid, (0.05, 10)) for pid in pids))


def test_backfill_from_related():
    pivot = key(pid="p0")
    rel = [key(pid=f"r{i}") for i in range(5)]
    eng = [("u0", pivot)] + [(f"u{j}", r) for i, r in enumerate(rel) for j in range(i + 1)]
    eng += [(f"u{j}", pivot) for j in range(5)]
    b = bundle([pivot] + rel, item_to_item=ItemToItem(eng), popularity=Popularity({}))
    ad = backfill(_partial("p0"), b)
    assert isinstance(ad, CarouselAd)
    top2 = [k for k, _ in b.item_to_item.related(pivot)][:2]
    assert [c.product for c in ad.slots[1:]] == top2
    assert all(c.backfill for c in ad.slots[1:])


def test_backfill_uses_popularity_when_few_related():
    pivot, r1 = key(pid="p0"), key(pid="r1")
    pops = {key(pid="hot"): 50, key(pid="warm"): 10, key(adv="a2", pid="x"): 99, pivot: 100}
    b = bundle([pivot, r1], item_to_item=ItemToItem([("u", pivot), ("u", r1)]),
               popularity=Popularity(pops))
    ad = backfill(_partial("p0"), b)
    assert [c.product.product_id for c in ad.slots] == ["p0", "r1", "hot"]


def test_backfill_degrades_to_single():
    b = bundle([key(pid="p0")], item_to_item=ItemToItem([]), popularity=Popularity({}))
    ad = backfill(_partial("p0", "p1"), b)
    assert type(ad) is SingleAd and ad.slots[0].product.product_id == "p0"


# -- render --------------------------------------------------------------------

def test_render_assets_and_missing():
    keys = [key(pid=f"p{i}") for i in range(3)]
    catalog = catalog_for(keys + [key(pid="bad")], missing={"bad"})
    counters = Counters()
    ads = [CarouselAd("a1", tuple(Candidate(k, "retargeting") for k in keys)),
           SingleAd("a2", (Candidate(key(pid="bad"), "retargeting"),))]
    out = render(ads, catalog, counters)
    assert len(out) == 1 and out[0].format == "carousel"
    assert [s.title for s in out[0].slots] == ["title p0", "title p1", "title p2"]
    assert all(s.image and s.description for s in out[0].slots)
    assert counters["render"] == 1


# -- end to end ----------------------------------------------------------------

def test_serve_end_to_end(trained_click):
    model, keys = trained_click
    extra = [key(adv="a2", grp="g1", pid=f"b{i}") for i in range(2)]
    allkeys = keys + extra
    sources = [RetargetingSource(), FixtureSource("search_stub", allkeys)]
    b = bundle(allkeys, click_model=model, sources=sources,
               history={"u1": [(k, 100) for k in keys[:2]]},
               item_to_item=ItemToItem([("u", k) for k in allkeys]),
               popularity=Popularity({k: 1 for k in allkeys}))
    first = serve(request(), b)
    assert first.to_json() == serve(request(), b).to_json()
    advertisers = [a.advertiser_id for a in first.ads]
    assert len(advertisers) == len(set(advertisers)) == 2
    for ad in first.ads:
        if ad.format == "carousel":
            assert len(ad.slots) >= 3
        for s in ad.slots:
            assert s.backfill or s.bid >= 0
    assert first.counters["dedupe"] > 0
