"""Offline metrics, wrapper forward selection, and bucket-level business reports."""

from __future__ import annotations

import csv
import hashlib
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import UndefinedMetricError
from .offset import PROB_CLAMP, Event, FeatureSchema, ModelState, predict, train_batch

log = logging.getLogger(__name__)

HIGHER_BETTER = "higher_better"
LOWER_BETTER = "lower_better"
CONST_FEATURE = "__const__"


def logloss(predictions: Sequence[float], labels: Sequence[int]) -> float:
    """Summed log loss with predictions clamped away from 0 and 1."""
    q = np.asarray(predictions, dtype=float)
    y = np.asarray(labels, dtype=float)
    if q.shape != y.shape:
        raise ValueError(f"length mismatch: {q.shape} vs {y.shape}")
    q = np.clip(q, PROB_CLAMP, 1 - PROB_CLAMP)
    return float(-(y * np.log(q) + (1 - y) * np.log1p(-q)).sum())


def auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Probability that a random positive outranks a random negative; ties earn half."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels)
    if s.shape != y.shape:
        raise ValueError(f"length mismatch: {s.shape} vs {y.shape}")
    n_pos = int((y == 1).sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative")
    ranks = rankdata(s)  # average ranks, so ties contribute 0.5
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


def lift(model_metric: float, baseline_metric: float, direction: str = HIGHER_BETTER) -> float:
    """Relative improvement in percent."""
    if model_metric <= 0 or baseline_metric <= 0:
        raise ValueError("lift is defined for positive metrics only")
    if direction == HIGHER_BETTER:
        return (model_metric / baseline_metric - 1) * 100
    if direction == LOWER_BETTER:
        return (baseline_metric / model_metric - 1) * 100
    raise ValueError(f"unknown direction {direction!r}")


@dataclass(frozen=True)
class MetricReport:
    logloss: float  # average per event
    auc: float
    n_events: int
    n_positives: int

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def evaluate(model: ModelState, events: Sequence[Event]) -> MetricReport:
    preds = [predict(e, model) for e in events]
    labels = [e.label for e in events]
    n = len(events)
    return MetricReport(logloss(preds, labels) / max(n, 1), auc(preds, labels), n, sum(labels))


# -- forward selection -----------------------------------------------------------

@dataclass(frozen=True)
class SelectionStep:
    features: tuple[str, ...]
    report: MetricReport
    auc_lift: float
    logloss_lift: float


@dataclass
class SelectionResult:
    baseline: MetricReport
    accepted: list[SelectionStep] = field(default_factory=list)
    rejected: list[str] = field(default_factory=list)
    trials: list[tuple[int, str, MetricReport]] = field(default_factory=list)
    controls: list[tuple[int, str, MetricReport]] = field(default_factory=list)

    @property
    def order(self) -> list[str]:
        return [s.features[-1] for s in self.accepted]

    def rows(self) -> list[tuple[str, str, str, str]]:
        """Rows shaped "# / Feature / AUC lift / Logloss lift", e.g. "2 (1+2)"."""
        out = []
        for i, step in enumerate(self.accepted, 1):
            label = f"{i} ({'+'.join(str(j) for j in range(1, i + 1))})"
            out.append((label, step.features[-1], f"{step.auc_lift:.2f}%",
                        f"{step.logloss_lift:.2f}%"))
        return out

    def table(self) -> str:
        lines = ["# | Feature | AUC lift | Logloss lift"]
        lines += [" | ".join(r) for r in self.rows()]
        return "\n".join(lines)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["#", "feature", "auc_lift_pct", "logloss_lift_pct"])
        writer.writerows(self.rows())
        return buf.getvalue()


def _seed_for(step: int, candidate: str, seed: int) -> int:
    text = f"{seed}:{step}:{candidate}"
    return int.from_bytes(hashlib.blake2b(text.encode(), digest_size=4).digest(), "little")


def _project(events: Sequence[Event], features: tuple[str, ...]) -> list[Event]:
    keep = set(features)
    out = []
    for e in events:
        users = {k: v for k, v in e.user_values.items() if k in keep}
        if CONST_FEATURE in keep:
            users[CONST_FEATURE] = [("1", 1.0)]
        out.append(Event(users, e.ad_values, {}, e.label, e.kind, e.timestamp))
    return out


def train_and_score(features: tuple[str, ...], train: Sequence[Event], test: Sequence[Event],
                    ad_features: tuple[str, ...], seed: int, *, pair_width: int = 2,
                    solo_width: int = 2, passes: int = 1, eta0: float = 0.05,
                    lam: float = 1e-5) -> MetricReport:
    """Train from scratch on ``features`` (a constant pseudo-feature if empty) and evaluate."""
    features = tuple(features) or (CONST_FEATURE,)
    schema = FeatureSchema(features, pair_width, solo_width, ad_features)
    model = ModelState(schema, seed=seed, eta0=eta0, lam=lam)
    tr = _project(train, features)
    for _ in range(passes):
        train_batch(tr, model)
    return evaluate(model, _project(test, features))


def forward_selection(base_features: Sequence[str], candidates: Sequence[str],
                      train: Sequence[Event], test: Sequence[Event],
                      ad_features: tuple[str, ...], seed: int = 0,
                      scorer: Callable[..., MetricReport] | None = None,
                      min_gain: float = 0.1, **train_kw) -> SelectionResult:
    """Greedy wrapper selection on test LogLoss.

    Each added user feature also enlarges the model (more pair blocks), so the
    step's winner must also beat a same-sized, same-seed control in which its
    slot holds an uninformative constant feature, by more than ``min_gain``
    percent of LogLoss (a margin against test-set noise).  Lifts are reported against the
    base-feature model.
    """
    scorer = scorer or train_and_score
    base = tuple(base_features)
    baseline = scorer(base, train, test, ad_features, _seed_for(0, "", seed), **train_kw)
    result = SelectionResult(baseline)
    current = base
    remaining = list(candidates)
    step = 1
    while remaining:
        trials = []
        for cand in remaining:
            report = scorer(current + (cand,), train, test, ad_features,
                            _seed_for(step, cand, seed), **train_kw)
            result.trials.append((step, cand, report))
            trials.append((report.logloss, remaining.index(cand), cand, report))
        best_loss, _, best, report = min(trials)
        if current:
            # same seed as the winner, so only the candidate's own vectors differ
            control = scorer(current + (CONST_FEATURE,), train, test, ad_features,
                             _seed_for(step, best, seed), **train_kw)
        else:
            control = baseline
        result.controls.append((step, best, control))
        logloss_lift = lift(report.logloss, baseline.logloss, LOWER_BETTER)
        gain = lift(report.logloss, control.logloss, LOWER_BETTER)
        if not (gain > min_gain and logloss_lift > 0):
            break
        current = current + (best,)
        result.accepted.append(SelectionStep(
            current, report, lift(report.auc, baseline.auc, HIGHER_BETTER), logloss_lift))
        remaining.remove(best)
        step += 1
    result.rejected = remaining
    return result


# -- business metrics --------------------------------------------------------------

def cpa(spend: float, conversions: int) -> float:
    if conversions <= 0:
        raise UndefinedMetricError("CPA is undefined without conversions")
    return spend / conversions


@dataclass(frozen=True)
class HappinessResult:
    percent: float
    happy: tuple[str, ...]
    unhappy: tuple[str, ...]
    excluded: tuple[str, ...]


BOUNDARY_RTOL = 1e-12


def is_happy(cpa_value: float, tcpa: float, error: float) -> bool:
    """CPA / tCPA <= 1 + error, with the bound itself counted as satisfied."""
    ratio = cpa_value / tcpa
    bound = 1 + error
    return ratio <= bound or math.isclose(ratio, bound, rel_tol=BOUNDARY_RTOL)


def happiness(cpas: Mapping[str, float], tcpas: Mapping[str, float | None],
              spends: Mapping[str, float], error: float) -> HappinessResult:
    """Share of spend (in percent) from advertisers whose CPA meets their target."""
    happy, unhappy, excluded = [], [], []
    for adv in sorted(cpas):
        target = tcpas.get(adv)
        if target is None or target <= 0 or adv not in spends:
            excluded.append(adv)
        elif is_happy(cpas[adv], target, error):
            happy.append(adv)
        else:
            unhappy.append(adv)
    total = sum(spends[a] for a in happy + unhappy)
    if total <= 0:
        raise UndefinedMetricError("no spend among scorable advertisers")
    pct = 100.0 * sum(spends[a] for a in happy) / total
    return HappinessResult(pct, tuple(happy), tuple(unhappy), tuple(excluded))


@dataclass(frozen=True)
class AdvertiserOutcome:
    advertiser_id: str
    spend: int  # cents
    conversions: int
    target_cpa: float | None  # tCPA, or the control bucket's CPA for trending


def happiness_report(outcomes: Sequence[AdvertiserOutcome], error: float,
                     min_conversions: int = 10) -> HappinessResult:
    """Happiness over advertisers with at least ``min_conversions`` conversions."""
    cpas, tcpas, spends, skipped = {}, {}, {}, []
    for o in outcomes:
        if o.conversions < min_conversions:
            skipped.append(o.advertiser_id)
            continue
        cpas[o.advertiser_id] = cpa(o.spend, o.conversions)
        tcpas[o.advertiser_id] = o.target_cpa
        spends[o.advertiser_id] = o.spend
    res = happiness(cpas, tcpas, spends, error)
    return HappinessResult(res.percent, res.happy, res.unhappy,
                           tuple(sorted(res.excluded + tuple(skipped))))


# -- bucket reports ----------------------------------------------------------------

@dataclass(frozen=True)
class BucketDay:
    bucket: str  # "test" or "control"
    day: int
    spend: int
    impressions: int
    per_advertiser: Mapping[str, tuple[int, int]] = field(default_factory=dict)

    def __post_init__(self):
        if self.bucket not in ("test", "control"):
            raise ValueError(f"unknown bucket {self.bucket!r}")
        if self.spend < 0 or self.impressions < 0:
            raise ValueError("spend and impressions must be non-negative")


@dataclass(frozen=True)
class LiftReport:
    rows: tuple[tuple[int, float, float], ...]  # (day, spend lift %, delivery lift %)
    avg_spend_lift: float
    avg_delivery_lift: float
    skipped_days: tuple[int, ...]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["day", "spend_lift_pct", "delivery_lift_pct"])
        for day, s, d in self.rows:
            writer.writerow([day, f"{s:.4f}", f"{d:.4f}"])
        writer.writerow(["average", f"{self.avg_spend_lift:.4f}", f"{self.avg_delivery_lift:.4f}"])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {"rows": [list(r) for r in self.rows], "avg_spend_lift": self.avg_spend_lift,
                "avg_delivery_lift": self.avg_delivery_lift,
                "skipped_days": list(self.skipped_days)}


def bucket_lift_report(test_days: Sequence[BucketDay],
                       control_days: Sequence[BucketDay]) -> LiftReport:
    test = {d.day: d for d in test_days}
    control = {d.day: d for d in control_days}
    rows, skipped = [], []
    for day in sorted(set(test) | set(control)):
        t, c = test.get(day), control.get(day)
        if t is None or c is None:
            log.warning("day %s missing from one bucket; skipped", day)
            skipped.append(day)
            continue
        rows.append((day, lift(t.spend, c.spend), lift(t.impressions, c.impressions)))
    if not rows:
        raise UndefinedMetricError("no day present in both buckets")
    return LiftReport(tuple(rows), float(np.mean([r[1] for r in rows])),
                      float(np.mean([r[2] for r in rows])), tuple(skipped))
