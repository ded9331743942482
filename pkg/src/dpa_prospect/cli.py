"""Command line entry point: ``dpa <verb> [options]``.

Every verb accepts ``--config`` (a JSON pipeline config), repeated
``--set section.key=value`` overrides and ``--seed``.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

from .click import impression_event
from .conversion import build_conv_training_feed
from .errors import DPAError
from .feeds import read_feed, write_feed
from .metrics import (
    AdvertiserOutcome,
    BucketDay,
    bucket_lift_report,
    evaluate,
    forward_selection,
    happiness_report,
)
from .offset import load_model
from .pipeline import PipelineConfig, flatten, train_lookalike_days
from .runner import (
    STAGES,
    Workspace,
    load_click,
    load_lookalike,
    run_pipeline,
    run_stage,
    save_lookalike,
)
from .synth import DayFeeds
from .trending import (
    PublishedTrendyModel,
    build_threshold_curve,
    sample_curve_users,
    threshold_for_percentile,
)

HAPPINESS_ERROR = {"conv": 0.01, "trendy": 0.10}


def load_config(args) -> PipelineConfig:
    config = PipelineConfig()
    if getattr(args, "config", None):
        config = PipelineConfig.from_json(Path(args.config).read_text())
    overrides = dict(kv.split("=", 1) for kv in getattr(args, "set", None) or [])
    if overrides:
        config = config.with_overrides(overrides)
    if getattr(args, "seed", None) is not None:
        config = config.with_seed(args.seed)
    return config


def _emit(rows: list[list], payload, out: str | None):
    """Print CSV rows; with ``--out PREFIX`` also write PREFIX.csv and PREFIX.json."""
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    sys.stdout.write(buf.getvalue())
    if out:
        base = Path(out)
        base.parent.mkdir(parents=True, exist_ok=True)
        Path(f"{base}.csv").write_text(buf.getvalue())
        Path(f"{base}.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _stage(verb: str):
    def handler(args):
        config = load_config(args)
        ws = Workspace(args.workdir, args.world, args.feeds)
        for path in run_stage(verb, ws, config):
            print(path)
    return handler


# -- verbs ----------------------------------------------------------------------------------

def cmd_train_lookalike(args):
    config = load_config(args)
    lk = config.lookalike
    if args.n is not None or args.m is not None:
        lk = replace(lk, top_n_products=args.n or lk.top_n_products,
                     negatives_per_product=args.m or lk.negatives_per_product)
    if args.pixel and args.impressions:
        days = [DayFeeds(0, read_feed(args.impressions, "impressions"), [],
                         read_feed(args.pixel, "pixels"))]
    else:
        ws = Workspace(args.workdir, args.world, args.feeds)
        days, _ = ws.split(config)
    model = train_lookalike_days(days, lk)
    out = Path(args.out or Path(args.workdir) / "models" / "lookalike.npz")
    out.parent.mkdir(parents=True, exist_ok=True)
    print(save_lookalike(model, out))


def cmd_threshold_curve(args):
    config = load_config(args)
    ws = Workspace(args.workdir, args.world, args.feeds)
    model_path = Path(args.model or Path(args.workdir) / "published" / "trendy.npz")
    pub = PublishedTrendyModel.load(model_path)
    if args.impressions:
        impressions = read_feed(args.impressions, "impressions")
    else:
        train, _ = ws.split(config)
        impressions = flatten(train, "impressions")
    users = sample_curve_users(impressions, args.r, config.lookalike.seed)
    curve = build_threshold_curve(pub.model, args.advertiser, pub.products, users)
    t = threshold_for_percentile(curve, args.pct)
    rows = [["advertiser_id", "pct", "r", "threshold"], [args.advertiser, args.pct, len(users), t]]
    _emit(rows, {"advertiser_id": args.advertiser, "pct": args.pct, "threshold": t,
                 "curve": list(curve.values)}, args.out)


def cmd_publish_trendy(args):
    config = load_config(args)
    ws = Workspace(args.workdir, args.world, args.feeds)
    if args.pct is not None:
        config = replace(config, trendy_percentile=args.pct)
    if args.model:
        ws.remember("lookalike", load_lookalike(args.model, config.lookalike))
    for path in run_stage("publish-trendy", ws, config):
        print(path)


def _events_from_workdir(args, config: PipelineConfig, kind: str, split: str):
    ws = Workspace(args.workdir, args.world, args.feeds)
    train, test = ws.split(config)
    days = train if split == "train" else test
    profiles = ws.world().profiles()
    if kind == "click":
        trainer = load_click(ws.need(Path(args.workdir) / "models" / "click.npz"))
        imps = flatten(days, "impressions")[: args.limit or None]
        return [impression_event(i, profiles[i.user_id], trainer.stats.get(i.product),
                                 trainer.config) for i in imps]
    events, _ = build_conv_training_feed(flatten(days, "clicks"), flatten(days, "conversions"),
                                         profiles, config.conv)
    return events[: args.limit or None]


def cmd_export_events(args):
    config = load_config(args)
    events = _events_from_workdir(args, config, args.kind, args.split)
    print(write_feed(args.out, "events", events))


def cmd_eval(args):
    model, _ = load_model(args.model)
    report = evaluate(model, read_feed(args.test, "events"))
    rows = [["metric", "value"]] + [[k, v] for k, v in asdict(report).items()]
    _emit(rows, asdict(report), args.out)


def cmd_forward_select(args):
    config = load_config(args)
    candidates = [c for c in args.candidates.split(",") if c]
    base = [c for c in (args.base or "").split(",") if c]
    train = read_feed(args.train, "events")
    test = read_feed(args.test, "events")
    ad_features = tuple(args.ad_features.split(","))
    result = forward_selection(base, candidates, train, test, ad_features,
                               seed=config.click.seed, min_gain=args.min_gain,
                               passes=args.passes)
    print(result.table())
    if args.out:
        base_path = Path(args.out)
        base_path.parent.mkdir(parents=True, exist_ok=True)
        Path(f"{base_path}.csv").write_text(result.to_csv())
        payload = {"order": result.order, "rejected": result.rejected,
                   "baseline": asdict(result.baseline),
                   "rows": [list(r) for r in result.rows()]}
        Path(f"{base_path}.json").write_text(json.dumps(payload, indent=2) + "\n")


def _read_outcomes(path) -> list[AdvertiserOutcome]:
    with open(path, newline="") as fh:
        return [AdvertiserOutcome(r["advertiser_id"], int(r["spend"]), int(r["conversions"]),
                                  float(r["target_cpa"]) if r.get("target_cpa") else None)
                for r in csv.DictReader(fh)]


def cmd_happiness(args):
    error = args.error if args.error is not None else HAPPINESS_ERROR[args.mode]
    res = happiness_report(_read_outcomes(args.outcomes), error, args.min_conversions)
    rows = [["mode", "error", "happiness_pct", "happy", "unhappy", "excluded"],
            [args.mode, error, f"{res.percent:.4f}", " ".join(res.happy), " ".join(res.unhappy),
             " ".join(res.excluded)]]
    _emit(rows, {"mode": args.mode, "error": error, **asdict(res)}, args.out)


def _read_bucket(directory, bucket: str) -> list[BucketDay]:
    with open(Path(directory) / "days.csv", newline="") as fh:
        return [BucketDay(bucket, int(r["day"]), int(r["spend"]), int(r["impressions"]))
                for r in csv.DictReader(fh)]


def cmd_report(args):
    rep = bucket_lift_report(_read_bucket(args.test_bucket, "test"),
                             _read_bucket(args.control_bucket, "control"))
    sys.stdout.write(rep.to_csv())
    if args.out:
        base = Path(args.out)
        base.parent.mkdir(parents=True, exist_ok=True)
        Path(f"{base}.csv").write_text(rep.to_csv())
        Path(f"{base}.json").write_text(json.dumps(rep.to_dict(), indent=2) + "\n")


def cmd_run(args):
    config = load_config(args)
    stages = args.stages.split(",") if args.stages else STAGES
    manifest = run_pipeline(config, args.workdir, stages, args.world, args.feeds)
    for name, seconds in manifest.stages:
        print(f"{name}\t{seconds:.1f}s")
    print(f"manifest: {Path(args.workdir) / 'run_manifest.json'}")


def cmd_show_config(args):
    print(load_config(args).to_json())


# -- parser -------------------------------------------------------------------------------------

def _common(p: argparse.ArgumentParser, workdir=True):
    p.add_argument("--config", help="JSON pipeline config")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                   help="config override, repeatable")
    p.add_argument("--seed", type=int, help="seed for every random stream")
    if workdir:
        p.add_argument("--workdir", default="work", help="pipeline work directory")
        p.add_argument("--world", help="world directory (default WORKDIR/world)")
        p.add_argument("--feeds", help="feeds directory (default WORKDIR/feeds)")


def _seed_only(p: argparse.ArgumentParser):
    p.add_argument("--seed", type=int, help="accepted everywhere; this verb draws no random numbers")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dpa", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)

    for verb, helptext in (
            ("gen-world", "generate catalog, campaigns and users"),
            ("gen-feeds", "generate daily impression/conversion/pixel feeds"),
            ("train-click", "train the click model on the training days"),
            ("train-conv", "train the conversion model on the training days"),
            ("publish-conv", "publish the bounded conversion model with tCPAs"),
            ("simulate-serve", "serve simulated requests against published snapshots")):
        p = sub.add_parser(verb, help=helptext)
        _common(p)
        p.set_defaults(func=_stage(verb))

    p = sub.add_parser("train-lookalike", help="daily lookalike training from pixel feeds")
    _common(p)
    p.add_argument("--pixel", help="single pixel feed (with --impressions)")
    p.add_argument("--impressions", help="single impression feed (with --pixel)")
    p.add_argument("--n", type=int, help="top products per day")
    p.add_argument("--m", type=int, help="negatives per product")
    p.add_argument("--out", help="snapshot path (default WORKDIR/models/lookalike.npz)")
    p.set_defaults(func=cmd_train_lookalike)

    p = sub.add_parser("publish-trendy", help="publish the bounded trending model")
    _common(p)
    p.add_argument("--model", help="lookalike snapshot (default WORKDIR/models/lookalike.npz)")
    p.add_argument("--pct", type=float, help="requested eligible percentile")
    p.set_defaults(func=cmd_publish_trendy)

    p = sub.add_parser("threshold-curve", help="threshold for one advertiser at a percentile")
    _common(p)
    p.add_argument("--model", help="published trendy snapshot")
    p.add_argument("--advertiser", required=True)
    p.add_argument("--pct", type=float, default=5.0)
    p.add_argument("--r", type=int, default=20_000, help="sampled users")
    p.add_argument("--impressions", help="impression feed to sample users from")
    p.add_argument("--out", help="output prefix for CSV + JSON")
    p.set_defaults(func=cmd_threshold_curve)

    p = sub.add_parser("export-events", help="write model training/test events as a feed")
    _common(p)
    p.add_argument("--kind", choices=("click", "conv"), default="click")
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--limit", type=int, help="keep only the first N events")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_events)

    p = sub.add_parser("eval", help="LogLoss and AUC of a snapshot on an events feed")
    p.add_argument("--model", required=True)
    p.add_argument("--test", required=True, help="events feed")
    p.add_argument("--out", help="output prefix for CSV + JSON")
    _seed_only(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("forward-select", help="wrapper forward feature selection")
    _common(p, workdir=False)
    p.add_argument("--candidates", required=True, help="comma-separated user features")
    p.add_argument("--base", help="comma-separated features always included")
    p.add_argument("--train", required=True, help="events feed")
    p.add_argument("--test", required=True, help="events feed")
    p.add_argument("--ad-features", default="advertiser-id,product-set-id,product-group-id,"
                                            "product-id")
    p.add_argument("--min-gain", type=float, default=0.1,
                   help="percent LogLoss gain required over a constant-feature control")
    p.add_argument("--passes", type=int, default=1)
    p.add_argument("--out", help="output prefix for CSV + JSON")
    p.set_defaults(func=cmd_forward_select)

    p = sub.add_parser("happiness", help="spend-weighted advertiser happiness")
    p.add_argument("--mode", choices=("conv", "trendy"), required=True)
    p.add_argument("--error", type=float, help="allowed CPA overshoot (default by mode)")
    p.add_argument("--outcomes", required=True,
                   help="CSV with advertiser_id,spend,conversions,target_cpa")
    p.add_argument("--min-conversions", type=int, default=10)
    p.add_argument("--out", help="output prefix for CSV + JSON")
    _seed_only(p)
    p.set_defaults(func=cmd_happiness)

    p = sub.add_parser("report", help="daily spend/delivery lift between two buckets")
    p.add_argument("--test-bucket", required=True, help="directory holding days.csv")
    p.add_argument("--control-bucket", required=True, help="directory holding days.csv")
    p.add_argument("--out", help="output prefix for CSV + JSON")
    _seed_only(p)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("run", help="every stage end to end, with a digest manifest")
    _common(p)
    p.add_argument("--stages", help=f"comma-separated subset of {','.join(STAGES)}")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("show-config", help="print the effective config")
    _common(p, workdir=False)
    p.set_defaults(func=cmd_show_config)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (DPAError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
