"""Comparison partitions and their decoupled classifiers.

Each partition carries an assigner that can place unseen rows, so a baseline
system evaluates exactly like a learned one. Assigners register with the
model bundle format under a type tag.
"""

import itertools
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, EmptyGroupError, InvalidArgument
from .metrics import age_bin
from .models import TrainedSystem, register_assigner
from .rng import Stream
from .training import POOLED_STREAM, fit_logistic, train_pooled

log = logging.getLogger(__name__)

INTERSECTION_CAP = 32
WHITE = {"caucasian", "white"}
UNDER_45 = {"Less than 25", "25 - 45"}

_KMEANS, _MANUAL = 5, 11


# -- assigners ---------------------------------------------------------------

class ConstantAssigner:
    """Everyone in one group; the pooled baseline's stand-in for a partition."""

    K = 1

    def assign(self, data):
        return np.zeros(data.n, dtype=np.int64)

    def copy(self):
        return self

    def to_dict(self):
        return {"type": "constant"}

    @classmethod
    def from_dict(cls, doc):
        return cls()


def _cell_keys(data, attributes, thresholds):
    cols = []
    for a in attributes:
        v = data.sensitive_column(a)
        if a in thresholds:
            t = thresholds[a]
            v = np.asarray(v, dtype=np.float64)
            cols.append(np.where(v < t, f"<{t:g}", f">={t:g}"))
        else:
            cols.append(np.asarray(v).astype(str))
    return list(zip(*cols))


class CellAssigner:
    """Group = index of the row's sensitive-value combination.

    ``thresholds`` binarize numeric attributes (below vs at-or-above).
    Combinations never seen in training go to ``fallback``.
    """

    def __init__(self, attributes, cells, fallback=0, thresholds=None):
        self.attributes = list(attributes)
        self.cells = [tuple(c) for c in cells]
        self.fallback = int(fallback)
        self.thresholds = dict(thresholds or {})
        self._index = {c: k for k, c in enumerate(self.cells)}

    @property
    def K(self):
        return len(self.cells)

    def assign(self, data):
        keys = _cell_keys(data, self.attributes, self.thresholds)
        out = np.array([self._index.get(k, -1) for k in keys], dtype=np.int64)
        unseen = out < 0
        if unseen.any():
            log.info("%d rows with unseen attribute values sent to group %d",
                     int(unseen.sum()), self.fallback)
            out[unseen] = self.fallback
        return out

    def copy(self):
        return self

    def to_dict(self):
        return {"type": "cells", "attributes": self.attributes,
                "cells": [list(c) for c in self.cells], "fallback": self.fallback,
                "thresholds": self.thresholds}

    @classmethod
    def from_dict(cls, doc):
        return cls(doc["attributes"], doc["cells"], doc["fallback"], doc.get("thresholds"))


class CentroidAssigner:
    """Nearest centroid in feature space; ties go to the lower index."""

    def __init__(self, centroids):
        self.centroids = np.asarray(centroids, dtype=np.float64)

    @property
    def K(self):
        return self.centroids.shape[0]

    def assign(self, data):
        return _nearest(data.features, self.centroids)[0]

    def copy(self):
        return CentroidAssigner(self.centroids.copy())

    def to_dict(self):
        return {"type": "centroids", "centroids": self.centroids.tolist()}

    @classmethod
    def from_dict(cls, doc):
        return cls(doc["centroids"])


def _arrest_rule(data, race, sex, age):
    """0 for non-white males under 45, 1 for non-white females aged 25-45, -1 otherwise."""
    r = np.char.lower(data.sensitive_column(race).astype(str))
    s = np.char.lower(data.sensitive_column(sex).astype(str))
    a = age_bin(data.sensitive_column(age))
    nonwhite = ~np.isin(r, list(WHITE))
    out = np.full(data.n, -1, dtype=np.int64)
    out[nonwhite & (s == "male") & np.isin(a, list(UNDER_45))] = 0
    out[nonwhite & (s == "female") & (a == "25 - 45")] = 1
    return out


class ManualArrestAssigner:
    """Hand-written recidivism rule; other rows get a seeded fair coin in row order."""

    K = 2

    def __init__(self, race="race", sex="sex", age="age_cat", seed=0):
        self.race, self.sex, self.age, self.seed = race, sex, age, int(seed)

    def assign(self, data):
        out = _arrest_rule(data, self.race, self.sex, self.age)
        coin = (Stream(self.seed, _MANUAL).signs(data.n) > 0).astype(np.int64)
        rest = out < 0
        out[rest] = coin[rest]
        return out

    def copy(self):
        return self

    def to_dict(self):
        return {"type": "manual-arrest", "race": self.race, "sex": self.sex,
                "age": self.age, "seed": self.seed}

    @classmethod
    def from_dict(cls, doc):
        return cls(doc["race"], doc["sex"], doc["age"], doc["seed"])


register_assigner("constant", ConstantAssigner)
register_assigner("cells", CellAssigner)
register_assigner("centroids", CentroidAssigner)
register_assigner("manual-arrest", ManualArrestAssigner)


# -- partitions --------------------------------------------------------------

@dataclass
class Partition:
    assignment: np.ndarray
    K: int
    source: str  # attribute | kmeans | intersection | manual | learned
    assigner: object = None

    def __post_init__(self):
        self.assignment = np.asarray(self.assignment, dtype=np.int64)
        if self.assignment.size and (self.assignment.min() < 0 or self.assignment.max() >= self.K):
            raise InvalidArgument(f"assignment outside [0, {self.K})")

    @property
    def group_sizes(self):
        return np.bincount(self.assignment, minlength=self.K)

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write("index,group\n")
            for i, g in enumerate(self.assignment):
                fh.write(f"{i},{g}\n")


def intersection_partition(data, attributes, thresholds=None, cap=INTERSECTION_CAP,
                           source="intersection"):
    """One group per occupied combination of the listed sensitive attributes."""
    attributes = list(attributes)
    if not attributes:
        raise InvalidArgument("intersection partition needs at least one attribute")
    thresholds = dict(thresholds or {})
    keys = _cell_keys(data, attributes, thresholds)
    levels = [sorted({k[j] for k in keys}) for j in range(len(attributes))]
    product = int(np.prod([len(v) for v in levels]))
    if product > cap:
        raise InvalidArgument(f"{product} attribute combinations exceed the cap of {cap}")
    occupied = set(keys)
    cells = [c for c in itertools.product(*levels) if c in occupied]
    index = {c: k for k, c in enumerate(cells)}
    assignment = np.array([index[k] for k in keys], dtype=np.int64)
    largest = int(np.argmax(np.bincount(assignment, minlength=len(cells))))
    assigner = CellAssigner(attributes, cells, largest, thresholds)
    return Partition(assignment, len(cells), source, assigner)


def trivial_partition(data, attribute, binarize=None):
    """Two groups keyed on one sensitive attribute.

    ``binarize`` is a numeric threshold: values below it form one group.
    """
    thresholds = {} if binarize is None else {attribute: float(binarize)}
    part = intersection_partition(data, [attribute], thresholds, source="attribute")
    if part.K != 2:
        raise InvalidArgument(
            f"attribute {attribute!r} has {part.K} values; a trivial partition needs 2 "
            "(pass a binarize threshold)")
    return part


def manual_arrest_partition(data, race="race", sex="sex", age="age_cat", seed=0):
    for col in (race, sex, age):
        if data.sensitive is None or col not in data.sensitive.columns:
            raise DataError(f"manual partition needs sensitive column {col!r}")
    assigner = ManualArrestAssigner(race, sex, age, seed)
    return Partition(assigner.assign(data), 2, "manual", assigner)


# -- k-means -----------------------------------------------------------------

@dataclass
class KMeansState:
    centroids: np.ndarray
    iterations_run: int
    inertia: float
    history: list = field(default_factory=list)  # inertia per iteration


def _nearest(x, centroids):
    d2 = np.stack([((x - c) ** 2).sum(axis=1) for c in centroids], axis=1)
    labels = np.argmin(d2, axis=1)
    return labels, d2[np.arange(x.shape[0]), labels]


def _kmeans_pp(x, K, stream):
    n = x.shape[0]
    centers = [x[int(stream.uniform(1)[0] * n)]]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, K):
        total = d2.sum()
        if total > 0:
            i = stream.choice(n, d2 / total)
        else:
            i = int(stream.uniform(1)[0] * n)
        centers.append(x[i])
        d2 = np.minimum(d2, ((x - x[i]) ** 2).sum(axis=1))
    return np.array(centers)


def kmeans_partition(data, K, seed=0, max_iters=300, tol=1e-6):
    """Lloyd's algorithm from k-means++ seeds on the model features."""
    x = data.features
    n = x.shape[0]
    if K < 1:
        raise InvalidArgument(f"K must be positive, got {K}")
    if n < K:
        raise InvalidArgument(f"need at least K={K} rows, got {n}")
    stream = Stream(seed, _KMEANS)
    centroids = _kmeans_pp(x, K, stream)
    history = []
    it = 0
    labels, d2 = _nearest(x, centroids)
    for it in range(1, max_iters + 1):
        history.append(float(d2.sum()))
        new = centroids.copy()
        for k in range(K):
            members = labels == k
            if members.any():
                new[k] = x[members].mean(axis=0)
        counts = np.bincount(labels, minlength=K)
        for k in np.flatnonzero(counts == 0):
            # re-seed an empty cluster at the point farthest from its centroid
            far = int(np.argmax(d2))
            new[k] = x[far]
            d2[far] = 0.0
        shift = float(np.sqrt(((new - centroids) ** 2).sum(axis=1)).max())
        centroids = new
        prev = labels
        labels, d2 = _nearest(x, centroids)
        if shift < tol or np.array_equal(prev, labels) and not np.any(counts == 0):
            break
    inertia = float(d2.sum())
    history.append(inertia)
    state = KMeansState(centroids, it, inertia, history)
    return Partition(labels, K, "kmeans", CentroidAssigner(centroids)), state


# -- fitting -----------------------------------------------------------------

def pooled_system(train, lr=1e-2, epochs=3, seed=0, batch_size=1024, l2=0.0):
    pooled = train_pooled(train, lr, epochs, seed, batch_size=batch_size, l2=l2)
    return TrainedSystem(ConstantAssigner(), [pooled.copy()], pooled,
                         fingerprint=train.schema.fingerprint(), meta={"method": "pooled"})


def train_on_partition(train, partition, lr=1e-2, epochs=3, seed=0, batch_size=1024, l2=0.0):
    """One logistic model per group on its own rows, plus the pooled model.

    Every group fit uses the pooled fit's shuffle stream, so a single-group
    partition reproduces the pooled model exactly.
    """
    sizes = partition.group_sizes
    if np.any(sizes == 0):
        raise EmptyGroupError(np.flatnonzero(sizes == 0).tolist())
    pooled = train_pooled(train, lr, epochs, seed, batch_size=batch_size, l2=l2)
    decoupled = []
    for k in range(partition.K):
        rows = partition.assignment == k
        decoupled.append(fit_logistic(train.features[rows], train.labels[rows], lr, epochs,
                                      Stream(seed, POOLED_STREAM), batch_size=batch_size, l2=l2))
    return TrainedSystem(partition.assigner, decoupled, pooled,
                         fingerprint=train.schema.fingerprint(),
                         meta={"method": partition.source})
