import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dpa_prospect.errors import UndefinedMetricError
from dpa_prospect.metrics import (
    HIGHER_BETTER,
    LOWER_BETTER,
    AdvertiserOutcome,
    BucketDay,
    MetricReport,
    auc,
    bucket_lift_report,
    cpa,
    forward_selection,
    happiness,
    happiness_report,
    lift,
    logloss,
)
from oracles import brute_force_auc
from worlds import selection_world

# -- logloss -----------------------------------------------------------------------


def test_logloss_half():
    assert logloss([0.5] * 7, [0, 1, 1, 0, 1, 0, 0]) == pytest.approx(7 * math.log(2))


def test_logloss_perfect_is_near_zero():
    assert logloss([1.0, 0.0], [1, 0]) < 1e-10


def test_logloss_hand_computed():
    expected = -(math.log(0.9) + math.log(1 - 0.2) + math.log(0.4))
    assert logloss([0.9, 0.2, 0.4], [1, 0, 1]) == pytest.approx(expected, abs=1e-12)


def test_logloss_length_mismatch():
    with pytest.raises(ValueError):
        logloss([0.5], [0, 1])


# -- AUC ---------------------------------------------------------------------------

def test_auc_examples():
    assert auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert auc([0.3] * 6, [0, 1, 0, 1, 1, 0]) == 0.5
    with pytest.raises(UndefinedMetricError):
        auc([0.1, 0.2], [1, 1])


def test_auc_matches_brute_force_random():
    rng = np.random.default_rng(0)
    for _ in range(30):
        n = int(rng.integers(2, 400))
        scores = np.round(rng.random(n), int(rng.integers(1, 4)))  # coarse rounding forces ties
        labels = rng.integers(0, 2, n)
        if labels.min() == labels.max():
            labels[0] = 1 - labels[0]
        assert auc(scores, labels) == brute_force_auc(list(scores), list(labels))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 5), st.integers(0, 1)), min_size=2, max_size=60))
def test_auc_property_brute_force(rows):
    scores = [s / 5 for s, _ in rows]
    labels = [y for _, y in rows]
    if len(set(labels)) < 2:
        with pytest.raises(UndefinedMetricError):
            auc(scores, labels)
        return
    assert auc(scores, labels) == brute_force_auc(scores, labels)


# -- lift ---------------------------------------------------------------------------

def test_lift_examples():
    assert lift(0.72, 0.70, HIGHER_BETTER) == pytest.approx(2.857142857)
    assert lift(0.50, 0.55, LOWER_BETTER) == pytest.approx(10.0)
    assert lift(0.3, 0.3, HIGHER_BETTER) == 0.0
    assert lift(0.3, 0.3, LOWER_BETTER) == 0.0


def test_lift_errors():
    with pytest.raises(ValueError):
        lift(0.0, 0.5)
    with pytest.raises(ValueError):
        lift(0.5, 0.5, "sideways")


@given(st.floats(1e-3, 1e3))
def test_lift_identity(x):
    assert lift(x, x) == 0.0


# -- CPA and happiness -----------------------------------------------------------------

def test_cpa_examples():
    assert cpa(10000, 100) == 100
    assert cpa(1, 1) == 1
    with pytest.raises(UndefinedMetricError):
        cpa(100, 0)


def test_happiness_weighted_share():
    res = happiness({"a": 100.0, "b": 300.0}, {"a": 100.0, "b": 100.0}, {"a": 80, "b": 20}, 0.0)
    assert res.percent == pytest.approx(80.0)
    assert res.happy == ("a",) and res.unhappy == ("b",)


def test_happiness_boundaries():
    retarg = 100.0
    conv = happiness({"a": 1.515 * retarg}, {"a": 1.5 * retarg}, {"a": 1}, 0.01)
    assert conv.percent == 100.0
    trendy = happiness({"a": 1.11 * retarg}, {"a": retarg}, {"a": 1}, 0.10)
    assert trendy.percent == 0.0


def test_happiness_excludes_missing_target():
    res = happiness({"a": 1.0, "b": 1.0}, {"a": 1.0, "b": None}, {"a": 5, "b": 5}, 0.0)
    assert res.excluded == ("b",) and res.percent == 100.0


def test_happiness_report_min_conversions():
    outcomes = [AdvertiserOutcome("a", 1000, 10, 100.0), AdvertiserOutcome("b", 900, 9, 1.0)]
    res = happiness_report(outcomes, 0.0)
    assert res.happy == ("a",) and "b" in res.excluded


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(1, 1000), st.floats(1, 1000), st.integers(1, 10_000)),
                min_size=1, max_size=10),
       st.sampled_from([0.5, 2.0, 100.0]), st.sampled_from([0.0, 0.01, 0.1]))
def test_happiness_scale_invariant(rows, scale, error):
    cpas = {f"a{i}": r[0] for i, r in enumerate(rows)}
    tcpas = {f"a{i}": r[1] for i, r in enumerate(rows)}
    spend = {f"a{i}": r[2] for i, r in enumerate(rows)}
    base = happiness(cpas, tcpas, spend, error)
    scaled = happiness({k: v * scale for k, v in cpas.items()},
                       {k: v * scale for k, v in tcpas.items()},
                       {k: v * scale for k, v in spend.items()}, error)
    assert scaled.happy == base.happy
    assert scaled.percent == pytest.approx(base.percent)


# -- bucket reports ----------------------------------------------------------------------

def _days(bucket, spends, imps):
    return [BucketDay(bucket, d, s, i) for d, (s, i) in enumerate(zip(spends, imps))]


def test_bucket_identical():
    days = _days("test", [100, 200], [10, 20])
    control = _days("control", [100, 200], [10, 20])
    rep = bucket_lift_report(days, control)
    assert rep.avg_spend_lift == 0.0 and rep.avg_delivery_lift == 0.0


def test_bucket_fixture_lifts():
    control = _days("control", [10_000, 20_000, 15_000], [1000, 2000, 1500])
    test = _days("test", [10_158, 20_316, 15_237], [1100, 2200, 1650])
    rep = bucket_lift_report(test, control)
    assert rep.avg_spend_lift == pytest.approx(1.58)
    assert rep.avg_delivery_lift == pytest.approx(10.0)
    csv_text = rep.to_csv()
    assert csv_text.splitlines()[0] == "day,spend_lift_pct,delivery_lift_pct"
    assert csv_text.splitlines()[-1].startswith("average,1.5800")


def test_bucket_missing_day_skipped(caplog):
    control = _days("control", [100, 100], [10, 10])
    test = _days("test", [110], [11])
    rep = bucket_lift_report(test, control)
    assert rep.skipped_days == (1,) and len(rep.rows) == 1
    assert "missing" in caplog.text
    with pytest.raises(ValueError):
        BucketDay("other", 0, 1, 1)


# -- forward selection ----------------------------------------------------------------------

def _fake_scorer(table):
    """Scorer returning preset logloss per feature tuple (and AUC = 1 - logloss)."""
    def scorer(features, train, test, ad_features, seed, **kw):
        key = tuple(f for f in features if f != "__const__")
        loss = table.get(key, table.get("default"))
        if "__const__" in features:
            loss = table.get(("ctl",) + key, loss + 1e-9 if key in table else loss)
        return MetricReport(loss, 1 - loss, 10, 5)
    return scorer


def test_forward_selection_order_and_rows():
    table = {(): 0.60, ("A",): 0.50, ("B",): 0.58, ("C",): 0.61,
             ("A", "B"): 0.48, ("A", "C"): 0.51, ("ctl", "A"): 0.50,
             ("A", "B", "C"): 0.49, ("ctl", "A", "B"): 0.48, "default": 0.9}
    res = forward_selection((), ["A", "B", "C"], [], [], ("p",), scorer=_fake_scorer(table))
    assert res.order == ["A", "B"] and res.rejected == ["C"]
    rows = res.rows()
    assert [r[0] for r in rows] == ["1 (1)", "2 (1+2)"]
    assert rows[0][1] == "A" and rows[0][3] == f"{(0.60 / 0.50 - 1) * 100:.2f}%"
    assert res.table().splitlines()[0] == "# | Feature | AUC lift | Logloss lift"
    assert all(s.logloss_lift > 0 for s in res.accepted)


def test_forward_selection_nothing_informative():
    table = {(): 0.5, "default": 0.6}
    res = forward_selection((), ["A", "B"], [], [], ("p",), scorer=_fake_scorer(table))
    assert res.accepted == [] and res.rejected == ["A", "B"]
    assert forward_selection((), [], [], [], ("p",), scorer=_fake_scorer(table)).accepted == []


def test_forward_selection_requires_beating_control():
    # B improves on the incumbent only as much as an equally sized constant feature
    table = {(): 0.6, ("A",): 0.5, ("A", "B"): 0.49, ("ctl", "A"): 0.49, "default": 0.9}
    res = forward_selection((), ["A", "B"], [], [], ("p",), scorer=_fake_scorer(table))
    assert res.order == ["A"]


@pytest.fixture(scope="module")
def planted_selection():
    train, test = selection_world(seed=3)
    return train, test, forward_selection((), ["A", "B", "C"], train, test, ("product-id",), seed=0)


def test_forward_selection_planted_world(planted_selection):
    _, _, res = planted_selection
    assert res.order == ["A", "B"] and res.rejected == ["C"]
    assert all(s.logloss_lift > 0 and s.auc_lift > 0 for s in res.accepted)


def test_forward_selection_deterministic(planted_selection):
    train, test, res = planted_selection
    again = forward_selection((), ["A", "B", "C"], train, test, ("product-id",), seed=0)
    assert again.rows() == res.rows()
