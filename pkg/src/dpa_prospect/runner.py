"""File-based pipeline stages and the end-to-end ``run`` with a digest manifest.

Work directory layout::

    world/      catalog.tsv users.tsv campaigns.tsv popularity.json
    feeds/      dayNN/{impressions,conversions,pixels}.tsv
    models/     click.npz conv.npz lookalike.npz
    published/  conv.npz trendy.npz
    serve/      requests.jsonl results.jsonl summary.json
    reports/    eval.json eval.csv
    run_manifest.json
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from importlib import metadata
from pathlib import Path
from typing import Callable, Sequence

from .catalog import ProductKey, ProductStats
from .click import ClickModelConfig, ClickTrainer
from .conversion import PublishedConvModel
from .errors import DPAError, StageError, UndefinedMetricError
from .feeds import request_to_dict, write_jsonl
from .offset import load_model, save_model
from .pipeline import (
    PipelineConfig,
    build_bundle,
    conv_happiness,
    evaluate_click,
    evaluate_conv,
    flatten,
    group_spend,
    publish_conv,
    publish_trendy,
    simulate_serve,
    train_click,
    train_conv,
    train_lookalike_days,
)
from .synth import (DAY, DayFeeds, World, gen_feeds, gen_requests, gen_world, read_feeds,
                    read_world, write_feeds, write_world)
from .trending import LookalikeModel, PublishedTrendyModel

log = logging.getLogger(__name__)

STAGES = ("gen-world", "gen-feeds", "train-click", "train-conv", "publish-conv",
          "train-lookalike", "publish-trendy", "simulate-serve", "eval")


def tool_version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "0+unknown"


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def config_hash(config: PipelineConfig) -> str:
    return hashlib.sha256(json.dumps(config.to_dict(), sort_keys=True).encode()).hexdigest()


@dataclass
class RunManifest:
    config_hash: str
    tool_version: str
    inputs: dict[str, str] = field(default_factory=dict)
    outputs: dict[str, str] = field(default_factory=dict)
    stages: list[tuple[str, float]] = field(default_factory=list)  # (stage, seconds)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunManifest":
        d = json.loads(text)
        d["stages"] = [tuple(s) for s in d["stages"]]
        return cls(**d)


class Workspace:
    """Paths under one work directory plus a per-run cache of parsed inputs."""

    def __init__(self, root, world_dir=None, feeds_dir=None):
        self.root = Path(root)
        self.world_dir = Path(world_dir) if world_dir else self.root / "world"
        self.feeds_dir = Path(feeds_dir) if feeds_dir else self.root / "feeds"
        self.read: set[Path] = set()
        self._cache: dict = {}

    def path(self, *parts) -> Path:
        p = self.root.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def need(self, path: Path) -> Path:
        if not path.exists():
            raise FileNotFoundError(f"missing input {path}")
        self.read.add(path)
        return path

    def world(self) -> World:
        if "world" not in self._cache:
            for name in ("catalog.tsv", "users.tsv", "campaigns.tsv", "popularity.json"):
                self.need(self.world_dir / name)
            self._cache["world"] = read_world(self.world_dir)
        return self._cache["world"]

    def feeds(self) -> list[DayFeeds]:
        if "feeds" not in self._cache:
            days = sorted(self.feeds_dir.glob("day*")) if self.feeds_dir.exists() else []
            if not days:
                raise FileNotFoundError(f"no daily feeds under {self.feeds_dir}")
            for d in days:
                for f in sorted(d.glob("*.tsv")):
                    self.need(f)
            self._cache["feeds"] = read_feeds(self.feeds_dir)
        return self._cache["feeds"]

    def split(self, config: PipelineConfig) -> tuple[list[DayFeeds], list[DayFeeds]]:
        days = self.feeds()
        n = len(days) - config.test_days
        if n < 1:
            raise DPAError(f"{len(days)} feed days cannot hold {config.test_days} test days")
        return days[:n], days[n:]

    def remember(self, key, value):
        self._cache[key] = value
        return value

    def cached(self, key, load: Callable):
        if key not in self._cache:
            self._cache[key] = load()
        return self._cache[key]


# -- persistence helpers ---------------------------------------------------------------

def save_click(trainer: ClickTrainer, path) -> Path:
    stats = {k.path: [s.impressions, s.clicks, s.conversions, s.spend, s.last_seen_day]
             for k, s in sorted(trainer.stats.items())}
    return save_model(trainer.model, path, {"kind": "click", "config": asdict(trainer.config),
                                            "stats": stats})


def load_click(path) -> ClickTrainer:
    model, manifest = load_model(path)
    if manifest.get("kind") != "click":
        raise DPAError(f"{path} is not a click model snapshot")
    cfg = {k: tuple(v) if isinstance(v, list) else v for k, v in manifest["config"].items()}
    trainer = ClickTrainer(ClickModelConfig(**cfg), model)
    trainer.stats = {ProductKey.from_path(p): ProductStats(*v)
                     for p, v in manifest["stats"].items()}
    return trainer


def save_lookalike(model: LookalikeModel, path) -> Path:
    return save_model(model.model, path, {
        "kind": "lookalike", "config": asdict(model.config),
        "absent_days": dict(sorted(model.absent_days.items())),
        "positives": dict(sorted(model.positives.items()))})


def load_lookalike(path, config) -> LookalikeModel:
    state, manifest = load_model(path)
    if manifest.get("kind") != "lookalike":
        raise DPAError(f"{path} is not a lookalike model snapshot")
    model = LookalikeModel(config, state)
    model.absent_days = {k: int(v) for k, v in manifest["absent_days"].items()}
    model.positives.update({k: int(v) for k, v in manifest["positives"].items()})
    return model


def _write_json(path: Path, payload) -> Path:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


# -- stages -----------------------------------------------------------------------------------

def stage_gen_world(ws: Workspace, config: PipelineConfig) -> list[Path]:
    world = ws.remember("world", gen_world(config.world))
    return list(write_world(world, ws.world_dir).values())


def stage_gen_feeds(ws: Workspace, config: PipelineConfig) -> list[Path]:
    days = ws.remember("feeds", gen_feeds(ws.world(), config.world))
    return write_feeds(days, ws.feeds_dir)


def stage_train_click(ws: Workspace, config: PipelineConfig) -> list[Path]:
    train, _ = ws.split(config)
    trainer = ws.remember("click", train_click(train, ws.world().profiles(), config.click))
    return [save_click(trainer, ws.path("models", "click.npz"))]


def stage_train_conv(ws: Workspace, config: PipelineConfig) -> list[Path]:
    train, _ = ws.split(config)
    model = train_conv(flatten(train, "clicks"), flatten(train, "conversions"),
                       ws.world().profiles(), config.conv)
    ws.remember("conv-model", model)
    return [save_model(model, ws.path("models", "conv.npz"), {"kind": "conv-train"})]


def stage_publish_conv(ws: Workspace, config: PipelineConfig) -> list[Path]:
    train, _ = ws.split(config)
    model = ws.cached("conv-model",
                      lambda: load_model(ws.need(ws.root / "models" / "conv.npz"))[0])
    world = ws.world()
    pub = publish_conv(model, flatten(train, "clicks"), flatten(train, "conversions"),
                       world.catalog, world.campaign_map(), config.conv)
    ws.remember("conv", pub)
    log.info("published conversion model with %d products", len(pub.products))
    return [pub.save(ws.path("published", "conv.npz"))]


def stage_train_lookalike(ws: Workspace, config: PipelineConfig) -> list[Path]:
    train, _ = ws.split(config)
    model = ws.remember("lookalike", train_lookalike_days(train, config.lookalike))
    return [save_lookalike(model, ws.path("models", "lookalike.npz"))]


def stage_publish_trendy(ws: Workspace, config: PipelineConfig) -> list[Path]:
    train, _ = ws.split(config)
    model = ws.cached("lookalike", lambda: load_lookalike(
        ws.need(ws.root / "models" / "lookalike.npz"), config.lookalike))
    world = ws.world()
    last = train[-1]  # publication shares follow the previous day's spend
    spend = group_spend(last.clicks, world.campaign_map())
    pub = publish_trendy(model, world.catalog, flatten(train, "impressions"), spend,
                         config.lookalike, config.trendy_percentile)
    ws.remember("trendy", pub)
    log.info("published trendy model with %d products", len(pub.products))
    return [pub.save(ws.path("published", "trendy.npz"))]


def _click(ws: Workspace) -> ClickTrainer:
    return ws.cached("click", lambda: load_click(ws.need(ws.root / "models" / "click.npz")))


def _published(ws: Workspace, key: str, cls):
    return ws.cached(key, lambda: cls.load(ws.need(ws.root / "published" / f"{key}.npz")))


def stage_simulate_serve(ws: Workspace, config: PipelineConfig) -> list[Path]:
    train, test = ws.split(config)
    world = ws.world()
    day = test[0].day
    bundle = build_bundle(world, train, _click(ws), _published(ws, "conv", PublishedConvModel),
                          _published(ws, "trendy", PublishedTrendyModel), config, day * DAY)
    requests = gen_requests(world, config.world, config.serve_requests, day)
    results, summary = simulate_serve(requests, bundle)
    req_path = write_jsonl(ws.path("serve", "requests.jsonl"),
                           (request_to_dict(r) for r in requests))
    res_path = ws.path("serve", "results.jsonl")
    with res_path.open("w", encoding="utf-8") as fh:
        for r in results:
            fh.write(r.to_json() + "\n")
    return [req_path, res_path, _write_json(ws.path("serve", "summary.json"), summary.to_dict())]


def stage_eval(ws: Workspace, config: PipelineConfig) -> list[Path]:
    train, test = ws.split(config)
    world = ws.world()
    profiles = world.profiles()
    report: dict = {"test_days": [d.day for d in test]}
    click = evaluate_click(_click(ws), flatten(test, "impressions"), profiles)
    report["click"] = asdict(click)
    conv_model = ws.cached("conv-model",
                           lambda: load_model(ws.need(ws.root / "models" / "conv.npz"))[0])
    try:
        report["conversion"] = asdict(evaluate_conv(conv_model, flatten(test, "clicks"),
                                                    flatten(test, "conversions"), profiles,
                                                    config.conv))
    except UndefinedMetricError as exc:
        report["conversion"] = {"error": str(exc)}
    pub = _published(ws, "conv", PublishedConvModel)
    try:
        # whole horizon: one test day holds too few attributable conversions
        days = train + test
        h = conv_happiness(flatten(days, "clicks"), flatten(days, "conversions"),
                           world.campaign_map(), pub.tcpa, config.happiness_error,
                           min_conversions=config.conv.min_conversions)
        report["conv_happiness"] = asdict(h)
    except UndefinedMetricError as exc:
        report["conv_happiness"] = {"error": str(exc)}
    summary_path = ws.root / "serve" / "summary.json"
    if summary_path.exists():
        report["serve"] = json.loads(ws.need(summary_path).read_text())
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric", "value"])
    for section in ("click", "conversion"):
        for k, v in report[section].items():
            w.writerow([f"{section}.{k}", v])
    if "percent" in report["conv_happiness"]:
        w.writerow(["conv_happiness.percent", report["conv_happiness"]["percent"]])
    csv_path = ws.path("reports", "eval.csv")
    csv_path.write_text(buf.getvalue())
    return [_write_json(ws.path("reports", "eval.json"), report), csv_path]


STAGE_FUNCS: dict[str, Callable[[Workspace, PipelineConfig], list[Path]]] = {
    "gen-world": stage_gen_world,
    "gen-feeds": stage_gen_feeds,
    "train-click": stage_train_click,
    "train-conv": stage_train_conv,
    "publish-conv": stage_publish_conv,
    "train-lookalike": stage_train_lookalike,
    "publish-trendy": stage_publish_trendy,
    "simulate-serve": stage_simulate_serve,
    "eval": stage_eval,
}


def run_stage(name: str, ws: Workspace, config: PipelineConfig) -> list[Path]:
    try:
        return STAGE_FUNCS[name](ws, config)
    except Exception as exc:  # any failure is reported with the stage that raised it
        raise StageError(name, exc) from exc


def run_pipeline(config: PipelineConfig, workdir, stages: Sequence[str] = STAGES,
                 world_dir=None, feeds_dir=None) -> RunManifest:
    """Run ``stages`` in order against ``workdir``; write and return the manifest."""
    unknown = [s for s in stages if s not in STAGE_FUNCS]
    if unknown:
        raise ValueError(f"unknown stages {unknown}")
    ws = Workspace(workdir, world_dir, feeds_dir)
    ws.root.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(config_hash(config), tool_version())
    produced: list[Path] = []
    for name in stages:
        t0 = time.perf_counter()
        produced.extend(run_stage(name, ws, config))
        manifest.stages.append((name, round(time.perf_counter() - t0, 3)))
        log.info("stage %s done in %.1fs", name, manifest.stages[-1][1])
    outputs = {p.resolve() for p in produced}
    manifest.outputs = {_rel(p, ws.root): sha256_file(p) for p in sorted(outputs)}
    manifest.inputs = {_rel(p, ws.root): sha256_file(p)
                       for p in sorted({p.resolve() for p in ws.read} - outputs)}
    _write_json(ws.root / "run_manifest.json", json.loads(manifest.to_json()))
    return manifest


def _rel(path: Path, root: Path) -> str:
    try:
        return str(path.relative_to(root.resolve()))
    except ValueError:
        return str(path)
