"""Feature-enhanced factorization event predictor.

An event (user, ad) is scored as

    score = bias + <user_vector, ad_vector> + sum of similarity-bin weights

and predicted as ``sigmoid(score)``.  The ad vector is the sum of one
D-dimensional vector per ad feature value.  The user vector is assembled from
one d-dimensional vector per user feature: every feature vector is cut into
(K - 1) pair-blocks of width ``pair_width`` (one per other feature, in schema
order) followed by a solo-block of width ``solo_width``.  The output holds,
for every pair (i, j) with i < j, the entry-wise product of feature i's block
for j with feature j's block for i, followed by the K solo-blocks copied as is.

Training is one-pass online gradient descent on the regularized log loss with
per-parameter AdaGrad step sizes.  Vectors for unseen feature values are drawn
lazily from N(0, init_variance * I), keyed by (seed, side, feature, value) so
the same value always starts from the same vector.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from math import comb
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    FrozenModelError,
    IncompleteEventError,
    InvalidEventError,
    InvalidSchemaError,
)

SNAPSHOT_VERSION = 1

EVENT_KINDS = ("click", "skip", "conversion", "purchase", "add_to_cart", "impression")

DEFAULT_INIT_VARIANCE = 0.01
DEFAULT_ETA0 = 0.05
DEFAULT_LAMBDA = 1e-5
ADAGRAD_EPS = 1e-8
PROB_CLAMP = 1e-12

_USER_SIDE = 0
_AD_SIDE = 1


def derive_dims(n_features: int, pair_width: int, solo_width: int) -> tuple[int, int]:
    """Return ``(d, D)``: per-feature user vector size and final vector size."""
    if n_features < 1:
        raise InvalidSchemaError("at least one user feature is required")
    if pair_width < 0 or solo_width < 0:
        raise InvalidSchemaError("block widths must be non-negative")
    d = (n_features - 1) * pair_width + solo_width
    D = comb(n_features, 2) * pair_width + n_features * solo_width
    return d, D


@dataclass(frozen=True)
class FeatureSchema:
    user_features: tuple[str, ...]
    pair_width: int
    solo_width: int
    ad_features: tuple[str, ...]
    similarity_features: tuple[str, ...] = ()

    def __post_init__(self):
        for name in ("user_features", "ad_features", "similarity_features"):
            names = tuple(getattr(self, name))
            if len(set(names)) != len(names):
                raise InvalidSchemaError(f"duplicate names in {name}: {names}")
            object.__setattr__(self, name, names)
        d, _ = derive_dims(len(self.user_features), self.pair_width, self.solo_width)
        if d < 1:
            raise InvalidSchemaError("user feature vectors must have at least one entry")
        if not self.ad_features:
            raise InvalidSchemaError("at least one ad feature is required")

    @property
    def user_dim(self) -> int:
        return derive_dims(len(self.user_features), self.pair_width, self.solo_width)[0]

    @property
    def dim(self) -> int:
        return derive_dims(len(self.user_features), self.pair_width, self.solo_width)[1]

    @cached_property
    def layout(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Flat indices into the (K, d) feature matrix.

        Returns ``(left, right, solo)``; the final vector is
        ``concat(V[left] * V[right], V[solo])``.  Pairs are in lexicographic
        (i, j) order, solos in schema order.
        """
        K, o, s = len(self.user_features), self.pair_width, self.solo_width
        d = self.user_dim
        left, right = [], []
        for i in range(K):
            for j in range(i + 1, K):
                # feature i keeps its block for j at position j - 1, feature j keeps i's at i
                start_i = i * d + (j - 1) * o
                start_j = j * d + i * o
                left.extend(range(start_i, start_i + o))
                right.extend(range(start_j, start_j + o))
        solo = [k * d + (K - 1) * o + t for k in range(K) for t in range(s)]
        return (np.array(left, dtype=np.intp), np.array(right, dtype=np.intp),
                np.array(solo, dtype=np.intp))

    @cached_property
    def _name_sets(self):
        return (frozenset(self.user_features), frozenset(self.ad_features),
                frozenset(self.similarity_features))

    def to_dict(self) -> dict:
        return {
            "user_features": list(self.user_features),
            "pair_width": self.pair_width,
            "solo_width": self.solo_width,
            "ad_features": list(self.ad_features),
            "similarity_features": list(self.similarity_features),
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "FeatureSchema":
        return cls(tuple(data["user_features"]), int(data["pair_width"]),
                   int(data["solo_width"]), tuple(data["ad_features"]),
                   tuple(data.get("similarity_features", ())))


@dataclass
class Event:
    """One labeled record.

    ``user_values`` maps a user feature to its weighted values; categorical
    features are a single ``(value, 1.0)`` pair.
    """

    user_values: dict[str, list[tuple[str, float]]]
    ad_values: dict[str, str]
    sim_bins: dict[str, str] = field(default_factory=dict)
    label: int = 0
    kind: str = "impression"
    timestamp: int = 0

    @classmethod
    def build(cls, user: Mapping, ad: Mapping, sims: Mapping | None = None,
              label: int = 0, kind: str = "impression", timestamp: int = 0) -> "Event":
        """Convenience constructor accepting plain strings for categorical values."""
        return cls(
            {name: as_weighted(values) for name, values in user.items()},
            {name: str(value) for name, value in ad.items()},
            {name: str(b) for name, b in (sims or {}).items()},
            label, kind, timestamp,
        )

    def project(self, schema: FeatureSchema) -> "Event":
        """Drop every feature the schema does not know."""
        users, ads, sims = schema._name_sets
        return Event(
            {k: v for k, v in self.user_values.items() if k in users},
            {k: v for k, v in self.ad_values.items() if k in ads},
            {k: v for k, v in self.sim_bins.items() if k in sims},
            self.label, self.kind, self.timestamp,
        )


def as_weighted(values) -> list[tuple[str, float]]:
    if isinstance(values, str):
        return [(values, 1.0)]
    out = []
    for item in values:
        if isinstance(item, str):
            out.append((item, 1.0))
        else:
            value, weight = item
            out.append((str(value), float(weight)))
    return out


def _stable_hash(text: str) -> int:
    return int.from_bytes(hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest(), "little")


class LatentTable:
    """(feature, value) -> vector store with parallel AdaGrad accumulators."""

    def __init__(self, dim: int, init_variance: float = DEFAULT_INIT_VARIANCE,
                 seed: int = 0, side: int = _USER_SIDE):
        if init_variance < 0:
            raise InvalidSchemaError("init_variance must be non-negative")
        self.dim = dim
        self.init_variance = init_variance
        self.seed = seed
        self.side = side
        self._index: dict[tuple[str, str], int] = {}
        self._keys: list[tuple[str, str]] = []
        self.vectors = np.zeros((16, dim))
        self.acc = np.zeros((16, dim))

    def __len__(self):
        return len(self._keys)

    def __contains__(self, key) -> bool:
        return key in self._index

    def keys(self) -> list[tuple[str, str]]:
        return list(self._keys)

    def lookup(self, feature: str, value: str) -> int:
        return self._index.get((feature, value), -1)

    def lazy_vector(self, feature: str, value: str) -> np.ndarray:
        if self.init_variance == 0:
            return np.zeros(self.dim)
        rng = np.random.default_rng(
            [self.seed, self.side, _stable_hash(feature), _stable_hash(value)])
        return rng.normal(0.0, math.sqrt(self.init_variance), self.dim)

    def get(self, feature: str, value: str) -> np.ndarray:
        """Stored vector, or the vector this value would be initialized with."""
        row = self._index.get((feature, value))
        if row is None:
            return self.lazy_vector(feature, value)
        return self.vectors[row].copy()

    def row(self, feature: str, value: str) -> int:
        """Row of an entry, lazily creating it."""
        key = (feature, value)
        row = self._index.get(key)
        if row is None:
            row = self._append(key, self.lazy_vector(feature, value), None)
        return row

    def set(self, feature: str, value: str, vector, acc=None) -> int:
        vector = np.asarray(vector, dtype=float)
        if vector.shape != (self.dim,):
            raise InvalidSchemaError(f"expected vector of size {self.dim}, got {vector.shape}")
        key = (feature, value)
        row = self._index.get(key)
        if row is None:
            return self._append(key, vector, acc)
        self.vectors[row] = vector
        self.acc[row] = 0.0 if acc is None else acc
        return row

    def remove(self, feature: str, value: str) -> bool:
        key = (feature, value)
        row = self._index.pop(key, None)
        if row is None:
            return False
        last = len(self._keys) - 1
        if row != last:
            moved = self._keys[last]
            self._keys[row] = moved
            self._index[moved] = row
            self.vectors[row] = self.vectors[last]
            self.acc[row] = self.acc[last]
        self._keys.pop()
        self.vectors[last] = 0.0
        self.acc[last] = 0.0
        return True

    def _append(self, key, vector, acc) -> int:
        row = len(self._keys)
        if row == self.vectors.shape[0]:
            grow = max(16, row)
            self.vectors = np.vstack([self.vectors, np.zeros((grow, self.dim))])
            self.acc = np.vstack([self.acc, np.zeros((grow, self.dim))])
        self.vectors[row] = vector
        self.acc[row] = 0.0 if acc is None else acc
        self._keys.append(key)
        self._index[key] = row
        return row

    def _freeze(self):
        self.vectors.flags.writeable = False
        self.acc.flags.writeable = False


class ModelState:
    """All learned parameters plus the hyperparameters that produced them."""

    def __init__(self, schema: FeatureSchema, *, init_variance: float = DEFAULT_INIT_VARIANCE,
                 lam: float = DEFAULT_LAMBDA, eta0: float = DEFAULT_ETA0, seed: int = 0,
                 eps: float = ADAGRAD_EPS):
        if lam < 0 or eta0 <= 0:
            raise InvalidSchemaError("need lam >= 0 and eta0 > 0")
        self.schema = schema
        self.user_table = LatentTable(schema.user_dim, init_variance, seed, _USER_SIDE)
        self.ad_table = LatentTable(schema.dim, init_variance, seed, _AD_SIDE)
        self.bias = 0.0
        self.bias_acc = 0.0
        self.sim_weights: dict[tuple[str, str], float] = {}
        self.sim_acc: dict[tuple[str, str], float] = {}
        self.lam = lam
        self.eta0 = eta0
        self.seed = seed
        self.init_variance = init_variance
        self.eps = eps
        self.frozen = False

    def copy(self) -> "ModelState":
        dup = copy.deepcopy(self)
        dup.frozen = False
        for table in (dup.user_table, dup.ad_table):
            table.vectors = np.array(table.vectors)
            table.acc = np.array(table.acc)
        return dup

    def freeze(self) -> "ModelState":
        """Immutable snapshot; the original stays trainable."""
        snap = self.copy()
        snap.frozen = True
        snap.user_table._freeze()
        snap.ad_table._freeze()
        return snap

    def restricted(self, feature: str, keep: Iterable[str]) -> "ModelState":
        """Frozen copy in which ``feature`` (ad side) keeps only ``keep`` values."""
        keep = set(keep)
        dup = self.copy()
        for feat, value in dup.ad_table.keys():
            if feat == feature and value not in keep:
                dup.ad_table.remove(feat, value)
        return dup.freeze()

    def accumulators(self):
        """Yield every AdaGrad accumulator value (for invariant checks)."""
        n = len(self.user_table)
        yield from self.user_table.acc[:n].ravel()
        n = len(self.ad_table)
        yield from self.ad_table.acc[:n].ravel()
        yield self.bias_acc
        yield from self.sim_acc.values()

    def _check_writable(self):
        if self.frozen:
            raise FrozenModelError("frozen model snapshots cannot be trained")


def aggregate_feature(values: Sequence[tuple[str, float]], table: LatentTable,
                      feature: str) -> np.ndarray:
    """``(1/sqrt(n)) * sum(w_i * v(value_i))`` over the n listed values."""
    if not values:
        raise IncompleteEventError(f"feature {feature!r} has no values")
    total = np.zeros(table.dim)
    for value, weight in values:
        if not math.isfinite(weight):
            raise InvalidEventError(f"non-finite weight for {feature}={value}")
        total += weight * table.get(feature, value)
    return total / math.sqrt(len(values))


class _Forward:
    __slots__ = ("rows", "coefs", "feats", "vecs", "V", "u", "ad_rows", "ad_mat", "a",
                 "sim_keys", "score")


def _user_values(event: Event, model: ModelState, create: bool, fw: _Forward):
    """Flatten all user values into parallel (row, coef, feature-index) arrays.

    Duplicate values within a feature are merged by summing their weights; the
    1/sqrt(n) factor uses the original list length.  Rows are -1 for values
    not stored in the table (prediction path only).
    """
    table = model.user_table
    lookup = table.row if create else table.lookup
    rows, coefs, feats, missing = [], [], [], []
    for k, name in enumerate(model.schema.user_features):
        values = event.user_values.get(name)
        if not values:
            raise IncompleteEventError(f"missing user feature {name!r}")
        if len(values) == 1:
            value, weight = values[0]
            if not math.isfinite(weight):
                raise InvalidEventError(f"non-finite weight for {name}={value}")
            row = lookup(name, value)
            if row < 0:
                missing.append((len(rows), name, value))
            rows.append(row)
            coefs.append(weight)
            feats.append(k)
            continue
        merged: dict[str, float] = {}
        for value, weight in values:
            if not math.isfinite(weight):
                raise InvalidEventError(f"non-finite weight for {name}={value}")
            merged[value] = merged.get(value, 0.0) + weight
        scale = 1.0 / math.sqrt(len(values))
        for value, weight in merged.items():
            row = lookup(name, value)
            if row < 0:
                missing.append((len(rows), name, value))
            rows.append(row)
            coefs.append(weight * scale)
            feats.append(k)
    fw.rows = np.array(rows, dtype=np.intp)
    fw.coefs = np.array(coefs)
    fw.feats = np.array(feats, dtype=np.intp)
    fw.vecs = table.vectors[fw.rows]
    for pos, name, value in missing:
        fw.vecs[pos] = table.lazy_vector(name, value)

    K = len(model.schema.user_features)
    if len(rows) == K:
        fw.V = fw.coefs[:, None] * fw.vecs
    else:
        mix = np.zeros((K, len(rows)))
        mix[fw.feats, np.arange(len(rows))] = fw.coefs
        fw.V = mix @ fw.vecs


def _combine(V: np.ndarray, schema: FeatureSchema) -> np.ndarray:
    left, right, solo = schema.layout
    flat = V.ravel()
    return np.concatenate((flat[left] * flat[right], flat[solo]))


def _check_names(event: Event, schema: FeatureSchema):
    users, ads, sims = schema._name_sets
    if not (event.user_values.keys() <= users and event.ad_values.keys() <= ads
            and event.sim_bins.keys() <= sims):
        unknown = (set(event.user_values) - users) | (set(event.ad_values) - ads) \
            | (set(event.sim_bins) - sims)
        raise InvalidEventError(f"features not in schema: {sorted(unknown)}")


def _ad_side(event: Event, model: ModelState, create: bool, fw: _Forward):
    table = model.ad_table
    present = [(name, event.ad_values[name]) for name in model.schema.ad_features
               if name in event.ad_values]
    if not present:
        raise IncompleteEventError("event has no ad features")
    if create:
        fw.ad_rows = np.array([table.row(n, v) for n, v in present], dtype=np.intp)
        fw.ad_mat = table.vectors[fw.ad_rows]
    else:
        fw.ad_rows = None
        fw.ad_mat = np.stack([table.get(n, v) for n, v in present])
    fw.a = fw.ad_mat.sum(axis=0) if len(present) > 1 else fw.ad_mat[0].copy()


def _forward(event: Event, model: ModelState, create: bool) -> _Forward:
    schema = model.schema
    _check_names(event, schema)
    fw = _Forward()
    _user_values(event, model, create, fw)
    fw.u = _combine(fw.V, schema)
    _ad_side(event, model, create, fw)
    fw.sim_keys = list(event.sim_bins.items())
    fw.score = model.bias + float(np.dot(fw.u, fw.a)) + sim_total(event.sim_bins, model)
    return fw


def build_user_vector(event: Event, model: ModelState) -> np.ndarray:
    _check_names(event, model.schema)
    fw = _Forward()
    _user_values(event, model, False, fw)
    return _combine(fw.V, model.schema)


def build_ad_vector(event: Event, model: ModelState) -> np.ndarray:
    fw = _Forward()
    _ad_side(event, model, False, fw)
    return fw.a


def sim_total(sim_bins: Mapping[str, str], model: ModelState) -> float:
    total = 0.0
    weights = model.sim_weights
    for key in sim_bins.items():
        total += weights.get(key, 0.0)
    return total


def score_vectors(user_vector: np.ndarray, ad_vector: np.ndarray, model: ModelState,
                  sims: float = 0.0) -> float:
    """Score from prebuilt vectors; the same arithmetic as :func:`score`."""
    return model.bias + float(np.dot(user_vector, ad_vector)) + sims


def score(event: Event, model: ModelState) -> float:
    return _forward(event, model, create=False).score


def sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    z = math.exp(x)
    return z / (1.0 + z)


def predict(event: Event, model: ModelState) -> float:
    return sigmoid(score(event, model))


def _softplus(x: float) -> float:
    return max(x, 0.0) + math.log1p(math.exp(-abs(x)))


def event_loss(event: Event, model: ModelState) -> float:
    """Log loss of one event plus ``lam/2 * ||theta||^2`` over the parameters it touches."""
    fw = _forward(event, model, create=False)
    loss = _softplus(fw.score) - event.label * fw.score
    reg = model.bias ** 2 + float(np.sum(fw.vecs ** 2)) + float(np.sum(fw.ad_mat ** 2))
    for key in set(fw.sim_keys):
        reg += model.sim_weights.get(key, 0.0) ** 2
    return loss + 0.5 * model.lam * reg


def _backward(fw: _Forward, label: int, model: ModelState):
    g = sigmoid(fw.score) - label
    lam = model.lam
    left, right, solo = model.schema.layout
    n_pair = len(left)

    grad_u = g * fw.a
    flat = fw.V.ravel()
    dV = np.empty_like(flat)
    dV[left] = grad_u[:n_pair] * flat[right]
    dV[right] = grad_u[:n_pair] * flat[left]
    dV[solo] = grad_u[n_pair:]
    dV = dV.reshape(fw.V.shape)

    user_grad = fw.coefs[:, None] * dV[fw.feats] + lam * fw.vecs
    ad_grad = g * fw.u + lam * fw.ad_mat
    bias_grad = g + lam * model.bias
    sim_grads = {key: g + lam * model.sim_weights.get(key, 0.0)
                 for key in dict.fromkeys(fw.sim_keys)}
    return bias_grad, user_grad, ad_grad, sim_grads


def _validate_label(event: Event):
    if event.label not in (0, 1):
        raise InvalidEventError(f"label must be 0 or 1, got {event.label!r}")


def gradients(event: Event, model: ModelState) -> dict[tuple, np.ndarray | float]:
    """Analytic gradient of :func:`event_loss` for every touched parameter.

    Keys are ``("bias",)``, ``("user", feature, value)``, ``("ad", feature, value)``
    and ``("sim", feature, bin)``.  Missing parameters are lazily created (which
    does not change any prediction).
    """
    model._check_writable()
    _validate_label(event)
    fw = _forward(event, model, create=True)
    bias_grad, user_grad, ad_grad, sim_grads = _backward(fw, event.label, model)
    out: dict[tuple, np.ndarray | float] = {("bias",): bias_grad}
    keys = model.user_table.keys()
    for row, grad in zip(fw.rows, user_grad):
        out[("user",) + keys[row]] = grad
    keys = model.ad_table.keys()
    for row, grad in zip(fw.ad_rows, ad_grad):
        out[("ad",) + keys[row]] = grad
    for key, grad in sim_grads.items():
        out[("sim",) + key] = grad
    return out


def _adagrad_rows(table: LatentTable, rows: np.ndarray, grad: np.ndarray, eta0: float, eps: float):
    acc = table.acc[rows] + grad * grad
    table.acc[rows] = acc
    table.vectors[rows] -= eta0 * grad / np.sqrt(acc + eps)


def train_step(event: Event, model: ModelState) -> ModelState:
    """One AdaGrad-scaled gradient step on a single event (in place)."""
    model._check_writable()
    _validate_label(event)
    fw = _forward(event, model, create=True)
    bias_grad, user_grad, ad_grad, sim_grads = _backward(fw, event.label, model)
    eta0, eps = model.eta0, model.eps

    model.bias_acc += bias_grad * bias_grad
    model.bias -= eta0 * bias_grad / math.sqrt(model.bias_acc + eps)
    _adagrad_rows(model.user_table, fw.rows, user_grad, eta0, eps)
    _adagrad_rows(model.ad_table, fw.ad_rows, ad_grad, eta0, eps)
    for key, grad in sim_grads.items():
        acc = model.sim_acc.get(key, 0.0) + grad * grad
        model.sim_acc[key] = acc
        model.sim_weights[key] = model.sim_weights.get(key, 0.0) - eta0 * grad / math.sqrt(acc + eps)
    return model


def train_batch(events: Sequence[Event], model: ModelState) -> ModelState:
    """Fold :func:`train_step` over time-ordered events."""
    last = -math.inf
    for i, event in enumerate(events):
        if event.timestamp < last:
            raise InvalidEventError("events are not time-ordered", index=i)
        last = event.timestamp
        try:
            train_step(event, model)
        except InvalidEventError as exc:
            raise type(exc)(str(exc), index=i) from exc
    return model



# -- snapshots ---------------------------------------------------------------

def _meta(model: ModelState) -> dict:
    return {
        "version": SNAPSHOT_VERSION,
        "schema": model.schema.to_dict(),
        "bias": model.bias,
        "bias_acc": model.bias_acc,
        "lam": model.lam,
        "eta0": model.eta0,
        "seed": model.seed,
        "init_variance": model.init_variance,
        "eps": model.eps,
        "user_keys": [list(k) for k in model.user_table.keys()],
        "ad_keys": [list(k) for k in model.ad_table.keys()],
        "sim": [[f, b, w, model.sim_acc.get((f, b), 0.0)]
                for (f, b), w in model.sim_weights.items()],
        "frozen": model.frozen,
    }


def save_model(model: ModelState, path, manifest: Mapping | None = None) -> Path:
    """Write a lossless ``.npz`` snapshot, optionally with a JSON manifest section."""
    path = Path(path)
    nu, na = len(model.user_table), len(model.ad_table)
    with open(path, "wb") as fh:
        np.savez(
            fh,
            meta=np.array(json.dumps(_meta(model))),
            manifest=np.array(json.dumps(dict(manifest or {}))),
            user_vectors=model.user_table.vectors[:nu],
            user_acc=model.user_table.acc[:nu],
            ad_vectors=model.ad_table.vectors[:na],
            ad_acc=model.ad_table.acc[:na],
        )
    return path


def load_model(path) -> tuple[ModelState, dict]:
    """Inverse of :func:`save_model`; returns ``(model, manifest)``."""
    with np.load(Path(path), allow_pickle=False) as data:
        meta = json.loads(str(data["meta"]))
        if meta.get("version") != SNAPSHOT_VERSION:
            raise InvalidSchemaError(f"unsupported snapshot version {meta.get('version')}")
        manifest = json.loads(str(data["manifest"]))
        model = ModelState(
            FeatureSchema.from_dict(meta["schema"]), init_variance=meta["init_variance"],
            lam=meta["lam"], eta0=meta["eta0"], seed=meta["seed"], eps=meta["eps"])
        model.bias = meta["bias"]
        model.bias_acc = meta["bias_acc"]
        for table, keys, vecs, accs in (
            (model.user_table, meta["user_keys"], data["user_vectors"], data["user_acc"]),
            (model.ad_table, meta["ad_keys"], data["ad_vectors"], data["ad_acc"]),
        ):
            for (feature, value), vec, acc in zip(keys, vecs, accs):
                table.set(feature, value, vec, acc)
        for f, b, w, acc in meta["sim"]:
            model.sim_weights[(f, b)] = w
            model.sim_acc[(f, b)] = acc
    if meta.get("frozen"):
        model = model.freeze()
    return model, manifest
