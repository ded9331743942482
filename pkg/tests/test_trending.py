import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dpa_prospect.catalog import ProductKey
from dpa_prospect.click import PRODUCT_ID
from dpa_prospect.errors import DPAError, EmptyCurveError, NotScorableError
from dpa_prospect.offset import predict
from dpa_prospect.records import Impression, PixelEvent
from dpa_prospect.trending import (
    LookalikeConfig,
    LookalikeModel,
    PublishedTrendyModel,
    ThresholdCurve,
    allocate_slots,
    build_threshold_curve,
    eligibility_score,
    lookalike_event,
    positive_counts,
    positive_events,
    publish_trendy_model,
    sample_curve_users,
    sample_negatives,
    select_top_products,
    threshold_for_percentile,
    train_lookalike,
)
from worlds import cell_counts, lookalike_world

P = [ProductKey("a", "s", f"g{i}", f"p{i}") for i in range(4)]


def pixel(t, key, kind="purchase", age=30, gender="female"):
    return PixelEvent(t, f"u{t}", age, gender, key, kind)


def imp(t, age=30, gender="female"):
    return Impression(t, f"u{t}", age, gender, P[0], "retargeting", "news", "mobile", 1, 0, -1)


# -- product selection and sampling -------------------------------------------

def test_select_top_products_counts_positives_only():
    feed = ([pixel(i, P[0]) for i in range(5)] + [pixel(i, P[1], "add_to_cart") for i in range(3)]
            + [pixel(0, P[2])] + [pixel(i, P[3], "view") for i in range(10)])
    assert select_top_products(feed, 2) == [P[0], P[1]]
    assert P[3] not in select_top_products(feed, 10)
    assert select_top_products(feed, 10) == [P[0], P[1], P[2]]


def test_select_top_products_ties_and_empty():
    feed = [pixel(0, P[2]), pixel(1, P[1])]
    assert select_top_products(feed, 1) == [P[1]]
    with pytest.raises(ValueError):
        select_top_products([], 3)


def test_sample_negatives_skips_unknown_and_is_deterministic():
    feed = [imp(t, gender="unknown" if t % 3 == 0 else "male") for t in range(300)]
    feed += [imp(1000, age=0)]
    first = sample_negatives(feed, P[:2], 50, seed=7)
    assert first == sample_negatives(feed, P[:2], 50, seed=7)
    assert len(first) == 100
    assert all(e.user_values["gender"] == [("male", 1.0)] for e in first)
    assert all(e.label == 0 for e in first)
    per_product = {}
    for e in first:
        per_product.setdefault(e.ad_values[PRODUCT_ID], []).append(e.timestamp)
    for stamps in per_product.values():
        assert len(set(stamps)) == len(stamps)  # no repeats within a product
    assert first != sample_negatives(feed, P[:2], 50, seed=8)


def test_sample_negatives_short_feed_takes_all(caplog):
    feed = [imp(t) for t in range(10)]
    events = sample_negatives(feed, [P[0]], 50, seed=0)
    assert len(events) == 10
    assert "only 10" in caplog.text


def test_unknown_demographics_not_scorable():
    model = LookalikeConfig().new_model()
    with pytest.raises(NotScorableError):
        eligibility_score(0, "female", P[0], model)
    with pytest.raises(NotScorableError):
        eligibility_score(30, "unknown", P[0], model)


def test_untrained_model_scores_half():
    model = LookalikeConfig(init_variance=0.0).new_model()
    assert eligibility_score(30, "male", P[0], model) == 0.5


# -- training ----------------------------------------------------------------

@pytest.fixture(scope="module")
def trained_world():
    products, imps, pixels = lookalike_world(seed=0)
    config = LookalikeConfig(negatives_per_product=2000)
    top = select_top_products(pixels, config.top_n_products)
    pos = positive_events(pixels, top)
    neg = sample_negatives(imps, top, config.negatives_per_product, seed=1)
    model = train_lookalike(pos, neg, config.new_model(), passes=config.passes)
    return products, pos, neg, model


def test_cell_scores_match_cell_frequencies(trained_world):
    products, pos, neg, model = trained_world
    total, positives = cell_counts(pos + neg)
    by_id = {p.product_id: p for p in products}
    checked = 0
    for (age, gender, pid), n in total.items():
        if n < 50:
            continue
        s = eligibility_score(age, gender, by_id[pid], model)
        assert abs(s - positives[(age, gender, pid)] / n) <= 0.05
        checked += 1
    assert checked >= 20


def test_planted_cell_ranks_first(trained_world):
    products, _, _, model = trained_world
    hot = eligibility_score(22, "female", products[0], model)
    for age in (22, 30, 40, 50):
        for gender in ("female", "male"):
            if (age, gender) != (22, "female"):
                assert eligibility_score(age, gender, products[0], model) < hot


def test_zero_positive_cell_scores_low():
    config = LookalikeConfig()
    neg = [lookalike_event(40, "male", P[0], 0, t) for t in range(300)]
    pos = [lookalike_event(22, "female", P[0], 1, t) for t in range(300)]
    model = train_lookalike(pos, neg, config.new_model(), passes=3)
    assert eligibility_score(40, "male", P[0], model) < 0.05


def test_pos_neg_cell_ratio():
    config = LookalikeConfig()
    events = []
    for t in range(400):
        events.append(lookalike_event(30, "female", P[0], int(t % 4 == 0), t))
    model = train_lookalike(events, [], config.new_model(), passes=3)
    assert eligibility_score(30, "female", P[0], model) == pytest.approx(0.25, abs=0.05)


def test_stale_products_evicted_after_ten_days():
    lm = LookalikeModel(LookalikeConfig())
    day0 = [lookalike_event(30, "male", P[0], 1, 0), lookalike_event(30, "male", P[1], 1, 0)]
    lm.daily_update(day0, [])
    assert (PRODUCT_ID, "p0") in lm.model.ad_table
    for day in range(1, 10):
        assert lm.daily_update([lookalike_event(30, "male", P[1], 1, day)], []) == []
    # p0 absent 9 days: still there; a 10th absent day evicts it
    assert (PRODUCT_ID, "p0") in lm.model.ad_table
    assert lm.daily_update([lookalike_event(30, "male", P[1], 1, 10)], []) == ["p0"]
    assert (PRODUCT_ID, "p0") not in lm.model.ad_table
    assert lm.product_ids() == ["p1"]


def test_absent_nine_days_then_present_is_retained():
    lm = LookalikeModel(LookalikeConfig())
    lm.daily_update([lookalike_event(30, "male", P[0], 1, 0)], [])
    for day in range(1, 10):
        lm.daily_update([lookalike_event(30, "male", P[1], 1, day)], [])
    lm.daily_update([lookalike_event(30, "male", P[0], 1, 10)], [])
    for day in range(11, 20):
        lm.daily_update([lookalike_event(30, "male", P[1], 1, day)], [])
    assert (PRODUCT_ID, "p0") in lm.model.ad_table
    assert lm.absent_days["p0"] == 9


# -- threshold curves ----------------------------------------------------------

def _curve(values):
    return ThresholdCurve("adv", tuple(sorted(values)))


@pytest.mark.parametrize("pct, expected", [(25, 0.3), (50, 0.2), (75, 0.1), (10, 0.4)])
def test_threshold_small_cases(pct, expected):
    assert threshold_for_percentile(_curve([0.4, 0.2, 0.1, 0.3]), pct) == expected


def test_threshold_errors():
    with pytest.raises(EmptyCurveError):
        threshold_for_percentile(_curve([]), 5)
    with pytest.raises(ValueError):
        threshold_for_percentile(_curve([0.1]), 0)
    with pytest.raises(ValueError):
        ThresholdCurve("adv", (0.2, 0.1))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=300), st.floats(0.5, 99.5))
def test_threshold_is_smallest_with_bounded_exceedance(values, pct):
    curve = _curve(values)
    t = threshold_for_percentile(curve, pct)
    allowed = pct * len(values) / 100
    assert sum(v > t for v in values) <= allowed + 1e-9
    smaller = [v for v in values if v < t]
    if smaller:
        assert sum(v > max(smaller) for v in values) > allowed + 1e-9


def test_curve_identical_users_single_value(trained_world):
    products, _, _, model = trained_world
    curve = build_threshold_curve(model.freeze(), "adv", products, [(30, "male")] * 20)
    assert len(set(curve.values)) == 1 and len(curve.values) == 20


def test_curve_matches_brute_force(trained_world):
    products, _, _, model = trained_world
    frozen = model.freeze()
    rng = np.random.default_rng(2)
    users = [(int(rng.integers(18, 70)), ["female", "male", "unknown"][rng.integers(3)])
             for _ in range(300)]
    curve = build_threshold_curve(frozen, "adv", products, users)
    brute = sorted(max(predict(lookalike_event(a, g, p), frozen) for p in products)
                   for a, g in users if g != "unknown")
    assert list(curve.values) == brute


def test_curve_errors(trained_world):
    products, _, _, model = trained_world
    with pytest.raises(EmptyCurveError):
        build_threshold_curve(model.freeze(), "other", products, [(30, "male")])
    with pytest.raises(DPAError):
        build_threshold_curve(model, "adv", products, [(30, "male")])


def test_sample_curve_users_distinct_and_seeded():
    feed = [imp(t % 50) for t in range(200)]
    users = sample_curve_users(feed, 20, seed=3)
    assert len(users) == 20
    assert users == sample_curve_users(feed, 20, seed=3)
    assert len(sample_curve_users(feed, 500, seed=3)) == 50


# -- publication -------------------------------------------------------------

def test_allocation_examples():
    assert allocate_slots({"g1": 300, "g2": 100}, {"g1": 10, "g2": 10}, 4) == {"g1": 3, "g2": 1}
    assert allocate_slots({"g1": 5}, {"g1": 3}, 10) == {"g1": 3}
    # capped group's leftover goes to the other group
    assert allocate_slots({"g1": 900, "g2": 100}, {"g1": 2, "g2": 10}, 6) == {"g1": 2, "g2": 4}


@settings(max_examples=200, deadline=None)
@given(st.dictionaries(st.sampled_from([f"g{i}" for i in range(8)]),
                       st.tuples(st.integers(0, 10_000), st.integers(0, 50)), min_size=1),
       st.integers(0, 200))
def test_allocation_sums_and_monotone(groups, total):
    spend = {g: s for g, (s, _) in groups.items()}
    cap = {g: c for g, (_, c) in groups.items()}
    alloc = allocate_slots(spend, cap, total)
    assert sum(alloc.values()) == min(total, sum(cap.values()))
    assert all(0 <= alloc[g] <= cap[g] for g in cap)
    for a in cap:
        for b in cap:
            # among groups not limited by capacity, more spend never gets fewer slots
            if spend[a] > spend[b] and alloc[a] < cap[a] and alloc[b] < cap[b]:
                assert alloc[a] >= alloc[b]


def test_publish_trendy_model(trained_world, tmp_path):
    products, pos, _, model = trained_world
    counts = {p: 0 for p in products}
    for e in pos:
        counts[next(p for p in products if p.product_id == e.ad_values[PRODUCT_ID])] += 1
    frozen = model.freeze()
    spend = {"g0": 300, "g1": 100, "g2": 0}
    pub = publish_trendy_model(frozen, {"adv": 0.3, "gone": 0.1}, spend, counts, 2, {"adv": 5})
    assert pub.products == (products[0], products[1])
    assert pub.thresholds == {"adv": 0.3}
    assert {v for f, v in pub.model.ad_table.keys() if f == PRODUCT_ID} == {"p0", "p1"}
    again = publish_trendy_model(frozen, {"adv": 0.3}, spend, counts, 2, {"adv": 5})
    assert again.products == pub.products
    pub.save(tmp_path / "trendy.npz")
    back = PublishedTrendyModel.load(tmp_path / "trendy.npz")
    assert back.products == pub.products and back.thresholds == pub.thresholds
    assert back.max_score(30, "female", "adv") == pub.max_score(30, "female", "adv")


def test_eligibility_is_strict_and_monotone(trained_world):
    products, _, _, model = trained_world
    frozen = model.freeze()
    counts = {p: 1 for p in products}
    base = publish_trendy_model(frozen, {"adv": 0.0}, {"g0": 1}, counts, 10)
    s = base.max_score(22, "female", "adv")
    at = publish_trendy_model(frozen, {"adv": s}, {"g0": 1}, counts, 10)
    assert not at.is_eligible(22, "female", "adv")
    below = publish_trendy_model(frozen, {"adv": math.nextafter(s, 0)}, {"g0": 1}, counts, 10)
    assert below.is_eligible(22, "female", "adv")
    assert not below.is_eligible(0, "female", "adv")
    assert not below.is_eligible(22, "female", "other")


def test_positive_counts_exclude_views():
    feed = [pixel(0, P[0]), pixel(1, P[0], "view"), pixel(2, P[1], "add_to_cart")]
    assert positive_counts(feed) == {P[0]: 1, P[1]: 1}
