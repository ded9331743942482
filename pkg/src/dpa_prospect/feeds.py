"""Tab-separated feed codecs.

Every feed file starts with one header line ``#<kind> v<version>`` followed by
the tab-separated column names, then one record per line.  Free-form string
fields are percent-encoded so tabs, newlines and the structural separators
(``; = | :``) can never break a row.  ``parse(serialize(x)) == x`` holds for
every record type, given non-empty list elements (an empty element list and a
list holding one empty string share a spelling).
"""

from __future__ import annotations

import json
from functools import lru_cache
from dataclasses import asdict
from pathlib import Path
from typing import Callable, Iterable, Iterator
from urllib.parse import quote, unquote

from .catalog import Catalog, CatalogEntry, ProductKey, ProductStats
from .errors import DPAError
from .offset import Event
from .records import Campaign, Conversion, Impression, PixelEvent, UserProfile
from .serving import ServeRequest

FORMAT_VERSION = 1
_SAFE = "<>+@/!*'()[]{}~"
EMPTY = "-"


class FeedFormatError(DPAError, ValueError):
    pass


@lru_cache(maxsize=1 << 16)
def enc(text: str) -> str:
    out = quote(str(text), safe=_SAFE)
    return "%2D" if out == EMPTY else out  # keep the empty marker unambiguous


def dec(text: str) -> str:
    return unquote(text)


def _fmt_float(x: float) -> str:
    return repr(float(x))


# -- structured fields --------------------------------------------------------------

def encode_user_values(values: dict[str, list[tuple[str, float]]]) -> str:
    """``name=value:weight|value:weight;name=...`` (``-`` when empty)."""
    if not values:
        return EMPTY
    parts = []
    for name, pairs in values.items():
        body = "|".join(f"{enc(v)}:{_fmt_float(w)}" for v, w in pairs)
        parts.append(f"{enc(name)}={body}")
    return ";".join(parts)


def decode_user_values(text: str) -> dict[str, list[tuple[str, float]]]:
    if text == EMPTY:
        return {}
    out = {}
    for part in text.split(";"):
        name, _, body = part.partition("=")
        pairs = []
        for item in body.split("|") if body else ():
            value, _, weight = item.rpartition(":")
            pairs.append((dec(value), float(weight)))
        out[dec(name)] = pairs
    return out


def encode_map(values: dict[str, str]) -> str:
    if not values:
        return EMPTY
    return ";".join(f"{enc(k)}={enc(v)}" for k, v in values.items())


def decode_map(text: str) -> dict[str, str]:
    if text == EMPTY:
        return {}
    out = {}
    for part in text.split(";"):
        k, _, v = part.partition("=")
        out[dec(k)] = dec(v)
    return out


def encode_profile_features(features: dict[str, list[str]]) -> str:
    if not features:
        return EMPTY
    return ";".join(f"{enc(k)}=" + "|".join(enc(v) for v in vs) for k, vs in features.items())


def decode_profile_features(text: str) -> dict[str, list[str]]:
    if text == EMPTY:
        return {}
    out = {}
    for part in text.split(";"):
        k, _, body = part.partition("=")
        out[dec(k)] = [dec(v) for v in body.split("|")] if body else []
    return out


def _encode_tuple(values) -> str:
    return ",".join(enc(v) for v in values) if values else EMPTY


def _decode_tuple(text: str) -> tuple[str, ...]:
    return () if text == EMPTY else tuple(dec(v) for v in text.split(","))


@lru_cache(maxsize=1 << 16)
def _path(text: str) -> ProductKey:
    return ProductKey.from_path(dec(text))


# -- codecs -----------------------------------------------------------------------------

class Codec:
    def __init__(self, kind: str, columns: tuple[str, ...], to_row: Callable, from_row: Callable):
        self.kind = kind
        self.columns = columns
        self.to_row = to_row
        self.from_row = from_row

    @property
    def header(self) -> str:
        return f"#{self.kind} v{FORMAT_VERSION}\t" + "\t".join(self.columns)

    def serialize(self, record) -> str:
        return "\t".join(self.to_row(record))

    def parse(self, line: str):
        row = line.rstrip("\n").split("\t")
        if len(row) != len(self.columns):
            raise FeedFormatError(f"{self.kind}: expected {len(self.columns)} columns, "
                                  f"got {len(row)}")
        try:
            return self.from_row(row)
        except (ValueError, TypeError) as exc:
            raise FeedFormatError(f"{self.kind}: {exc}") from exc


def _imp_row(r: Impression):
    return [str(r.timestamp), enc(r.user_id), str(r.age), enc(r.gender), enc(r.product.path),
            enc(r.dpa_type), enc(r.page_section), enc(r.device), str(r.slot), str(r.frequency),
            str(r.recency), str(r.clicked), enc(r.language)]


def _imp_parse(row):
    return Impression(int(row[0]), dec(row[1]), int(row[2]), dec(row[3]), _path(row[4]),
                      dec(row[5]), dec(row[6]), dec(row[7]), int(row[8]), int(row[9]),
                      int(row[10]), int(row[11]), dec(row[12]))


_IMP_COLS = ("timestamp", "user_id", "age", "gender", "product", "dpa_type", "page_section",
             "device", "slot", "frequency", "recency", "clicked", "language")


def _catalog_row(e: CatalogEntry):
    s = e.stats
    return [enc(e.key.path), str(s.impressions), str(s.clicks), str(s.conversions), str(s.spend),
            str(s.last_seen_day), enc(e.title), enc(e.image), enc(e.description), enc(e.category)]


def _catalog_parse(row):
    stats = ProductStats(*(int(x) for x in row[1:6]))
    return CatalogEntry(_path(row[0]), stats, dec(row[6]), dec(row[7]), dec(row[8]), dec(row[9]))


CODECS: dict[str, Codec] = {
    "impressions": Codec("impressions", _IMP_COLS, _imp_row, _imp_parse),
    "clicks": Codec("clicks", _IMP_COLS, _imp_row, _imp_parse),
    "conversions": Codec(
        "conversions", ("timestamp", "user_id", "product", "click_timestamp"),
        lambda r: [str(r.timestamp), enc(r.user_id), enc(r.product.path), str(r.click_timestamp)],
        lambda row: Conversion(int(row[0]), dec(row[1]), _path(row[2]), int(row[3]))),
    "pixels": Codec(
        "pixels", ("timestamp", "user_id", "age", "gender", "product", "kind"),
        lambda r: [str(r.timestamp), enc(r.user_id), str(r.age), enc(r.gender),
                   enc(r.product.path), enc(r.kind)],
        lambda row: PixelEvent(int(row[0]), dec(row[1]), int(row[2]), dec(row[3]), _path(row[4]),
                               dec(row[5]))),
    "catalog": Codec(
        "catalog", ("product", "impressions", "clicks", "conversions", "spend", "last_seen_day",
                    "title", "image", "description", "category"),
        _catalog_row, _catalog_parse),
    "users": Codec(
        "users", ("user_id", "age", "gender", "features"),
        lambda r: [enc(r.user_id), str(r.age), enc(r.gender), encode_profile_features(r.features)],
        lambda row: UserProfile(dec(row[0]), int(row[1]), dec(row[2]),
                                decode_profile_features(row[3]))),
    "campaigns": Codec(
        "campaigns", ("advertiser_id", "product_group_id", "bid", "budget", "expiration_day",
                      "target_genders", "languages"),
        lambda r: [enc(r.advertiser_id), enc(r.product_group_id), str(r.bid), str(r.budget),
                   str(r.expiration_day), _encode_tuple(r.target_genders),
                   _encode_tuple(r.languages)],
        lambda row: Campaign(dec(row[0]), dec(row[1]), int(row[2]), int(row[3]), int(row[4]),
                             _decode_tuple(row[5]), _decode_tuple(row[6]))),
    "events": Codec(
        "events", ("timestamp", "kind", "label", "user", "ad", "sim"),
        lambda e: [str(e.timestamp), enc(e.kind), str(e.label), encode_user_values(e.user_values),
                   encode_map(e.ad_values), encode_map(e.sim_bins)],
        lambda row: Event(decode_user_values(row[3]), decode_map(row[4]), decode_map(row[5]),
                          int(row[2]), dec(row[1]), int(row[0]))),
}


def _codec(kind: str) -> Codec:
    try:
        return CODECS[kind]
    except KeyError:
        raise FeedFormatError(f"unknown feed kind {kind!r}") from None


def write_feed(path, kind: str, records: Iterable) -> Path:
    codec = _codec(kind)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        fh.write(codec.header + "\n")
        for r in records:
            fh.write(codec.serialize(r) + "\n")
    return path


def iter_feed(path, kind: str) -> Iterator:
    codec = _codec(kind)
    with Path(path).open(encoding="utf-8") as fh:
        head = fh.readline().rstrip("\n")
        tag = head.split("\t", 1)[0]
        if tag != f"#{kind} v{FORMAT_VERSION}":
            raise FeedFormatError(f"{path}: expected header '#{kind} v{FORMAT_VERSION}', "
                                  f"found {tag!r}")
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            try:
                yield codec.parse(line)
            except FeedFormatError as exc:
                raise FeedFormatError(f"{path}:{lineno}: {exc}") from exc


def read_feed(path, kind: str) -> list:
    return list(iter_feed(path, kind))


def read_catalog(path) -> Catalog:
    return Catalog(iter_feed(path, "catalog"))


# -- JSON lines (serve requests and results) -------------------------------------------------

def write_jsonl(path, rows: Iterable[dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    return path


def read_jsonl(path) -> list[dict]:
    with Path(path).open(encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def request_to_dict(req) -> dict:
    d = asdict(req)
    d["user"] = {"user_id": req.user.user_id, "age": req.user.age, "gender": req.user.gender,
                 "features": req.user.features}
    return d


def request_from_dict(d: dict) -> ServeRequest:
    fields = dict(d)
    fields["user"] = UserProfile(**d["user"])
    return ServeRequest(**fields)
