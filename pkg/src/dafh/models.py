"""Group classifier, logistic classifiers, and the model bundle format.

A :class:`TrainedSystem` pairs an *assigner* (anything with
``assign(data) -> int array``) with one logistic model per group and a pooled
logistic model. The learned assigner is :class:`GroupMLP`; baseline assigners
live in :mod:`dafh.baselines` and register themselves with
:func:`register_assigner` so bundles can restore them.
"""

import json
from dataclasses import dataclass, field
from typing import Any, Optional

import numpy as np

from .errors import InvalidArgument, ModelFileError, NumericFailure
from .rng import Stream

HIDDEN = 100
BUNDLE_VERSION = 1


def sigmoid(t):
    t = np.asarray(t, dtype=np.float64)
    out = np.empty_like(t)
    pos = t >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-t[pos]))
    e = np.exp(t[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def softmax(z):
    z = np.asarray(z, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _as_rows(x, d):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x2 = x[None, :] if single else x
    if x2.ndim != 2 or x2.shape[1] != d:
        raise InvalidArgument(f"expected feature dimension {d}, got shape {x.shape}")
    return x2, single


@dataclass
class LogisticModel:
    weights: np.ndarray
    bias: float = 0.0

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        self.bias = float(self.bias)

    @classmethod
    def zeros(cls, d):
        return cls(np.zeros(d), 0.0)

    @property
    def d(self):
        return self.weights.shape[0]

    def copy(self):
        return LogisticModel(self.weights.copy(), self.bias)

    def params(self):
        return {"weights": self.weights.tolist(), "bias": self.bias}


def logistic_forward(model, x):
    """P(y = +1 | x) for one row or a matrix of rows."""
    rows, single = _as_rows(x, model.d)
    p = sigmoid(rows @ model.weights + model.bias)
    if not np.all(np.isfinite(p)):
        raise NumericFailure("logistic output is not finite")
    return p[0] if single else p


def predict(model, x):
    """Hard +1/-1 prediction; +1 iff the probability is at least one half."""
    return np.where(logistic_forward(model, x) >= 0.5, 1, -1)


@dataclass
class GroupMLP:
    """One hidden ReLU layer, softmax over K groups."""

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray

    def __post_init__(self):
        self.W1 = np.asarray(self.W1, dtype=np.float64)
        self.b1 = np.asarray(self.b1, dtype=np.float64).reshape(-1)
        self.W2 = np.asarray(self.W2, dtype=np.float64)
        self.b2 = np.asarray(self.b2, dtype=np.float64).reshape(-1)
        h, d = self.W1.shape
        if self.b1.shape != (h,) or self.W2.shape[1] != h or self.b2.shape != (self.W2.shape[0],):
            raise InvalidArgument("inconsistent GroupMLP parameter shapes")
        if self.K < 2:
            raise InvalidArgument(f"group count K must be at least 2, got {self.K}")

    @property
    def K(self):
        return self.W2.shape[0]

    @property
    def d(self):
        return self.W1.shape[1]

    def copy(self):
        return GroupMLP(self.W1.copy(), self.b1.copy(), self.W2.copy(), self.b2.copy())

    def logits(self, x):
        rows, single = _as_rows(x, self.d)
        hidden = np.maximum(rows @ self.W1.T + self.b1, 0.0)
        z = hidden @ self.W2.T + self.b2
        return z[0] if single else z

    def assign(self, data):
        return hard_assign(group_forward(self, data.features))

    def params(self):
        return {k: getattr(self, k).tolist() for k in ("W1", "b1", "W2", "b2")}

    def to_dict(self):
        return {"type": "mlp", **self.params()}

    @classmethod
    def from_dict(cls, doc):
        return cls(doc["W1"], doc["b1"], doc["W2"], doc["b2"])


def group_forward(model, x):
    """Softmax group probabilities for one row or a matrix of rows."""
    p = softmax(model.logits(x))
    if not np.all(np.isfinite(p)):
        raise NumericFailure("group classifier output is not finite")
    return p


def hard_assign(probs):
    """Argmax group index (0-based); ties go to the lowest index."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.size == 0 or probs.shape[-1] == 0:
        raise InvalidArgument("cannot assign from an empty probability vector")
    return np.argmax(probs, axis=-1)


def init_mlp(d, K, stream, hidden=HIDDEN):
    if d < 1:
        raise InvalidArgument(f"feature dimension must be positive, got {d}")
    if K < 2:
        raise InvalidArgument(f"group count K must be at least 2, got {K}")
    lim1 = 1.0 / np.sqrt(d)
    lim2 = 1.0 / np.sqrt(hidden)
    W1 = stream.uniform_range(-lim1, lim1, hidden * d).reshape(hidden, d)
    W2 = stream.uniform_range(-lim2, lim2, K * hidden).reshape(K, hidden)
    return GroupMLP(W1, np.zeros(hidden), W2, np.zeros(K))


# -- systems -----------------------------------------------------------------

_ASSIGNERS = {"mlp": GroupMLP}


def register_assigner(tag, cls):
    _ASSIGNERS[tag] = cls
    return cls


@dataclass
class TrainedSystem:
    group: Any
    decoupled: list
    pooled: LogisticModel
    config: Optional[dict] = None
    fingerprint: Optional[str] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        K = getattr(self.group, "K", len(self.decoupled))
        if K != len(self.decoupled):
            raise InvalidArgument(f"{len(self.decoupled)} decoupled models for K={K}")
        d = self.pooled.d
        if any(m.d != d for m in self.decoupled):
            raise InvalidArgument("decoupled models disagree on feature dimension")
        if isinstance(self.group, GroupMLP) and self.group.d != d:
            raise InvalidArgument("group classifier and decoupled models disagree on dimension")

    @property
    def K(self):
        return len(self.decoupled)

    @property
    def d(self):
        return self.pooled.d

    def assign(self, data):
        return np.asarray(self.group.assign(data), dtype=np.int64)

    def copy(self):
        group = self.group.copy() if hasattr(self.group, "copy") else self.group
        return TrainedSystem(group, [m.copy() for m in self.decoupled], self.pooled.copy(),
                             self.config, self.fingerprint, dict(self.meta))


def init_system(d, K, seed=0):
    """Zero logistic models; MLP weights uniform in +-1/sqrt(fan_in), zero biases."""
    mlp = init_mlp(d, K, Stream(seed))
    return TrainedSystem(mlp, [LogisticModel.zeros(d) for _ in range(K)], LogisticModel.zeros(d))


# -- bundle I/O --------------------------------------------------------------

def system_to_dict(system):
    return {
        "format": "dafh-model-bundle",
        "version": BUNDLE_VERSION,
        "K": system.K,
        "d": system.d,
        "fingerprint": system.fingerprint,
        "config": system.config,
        "meta": system.meta,
        "group": system.group.to_dict(),
        "decoupled": [m.params() for m in system.decoupled],
        "pooled": system.pooled.params(),
    }


def system_from_dict(doc):
    if doc.get("format") != "dafh-model-bundle":
        raise ModelFileError("corrupt model file: not a model bundle")
    if doc.get("version") != BUNDLE_VERSION:
        raise ModelFileError(f"unsupported model bundle version {doc.get('version')!r}")
    try:
        gdoc = doc["group"]
        cls = _ASSIGNERS[gdoc["type"]]
        group = cls.from_dict(gdoc)
        dec = [LogisticModel(m["weights"], m["bias"]) for m in doc["decoupled"]]
        pooled = LogisticModel(doc["pooled"]["weights"], doc["pooled"]["bias"])
        system = TrainedSystem(group, dec, pooled, doc.get("config"), doc.get("fingerprint"),
                               doc.get("meta") or {})
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFileError(f"corrupt model file: {exc}") from None
    if system.K != doc.get("K") or system.d != doc.get("d"):
        raise ModelFileError("corrupt model file: K/d header disagrees with parameters")
    return system


def save_system(system, path):
    # json writes floats with repr(), which round-trips float64 exactly
    text = json.dumps(system_to_dict(system), allow_nan=False)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)
        fh.write("\n")


def load_system(path):
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise ModelFileError(f"missing model file: {path}") from None
    except (json.JSONDecodeError, UnicodeDecodeError):
        raise ModelFileError("corrupt model file") from None
    if not isinstance(doc, dict):
        raise ModelFileError("corrupt model file")
    return system_from_dict(doc)


def check_fingerprint(system, data):
    """Refuse to evaluate a system on data with a different feature layout."""
    if system.d != data.d:
        raise ModelFileError(
            f"fingerprint mismatch: model expects d={system.d}, data has d={data.d}")
    if system.fingerprint is not None and system.fingerprint != data.schema.fingerprint():
        raise ModelFileError("fingerprint mismatch: feature columns differ from training data")
