"""Joint gradient ascent for the group and decoupled classifiers, plus the pooled fit."""

import csv
import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np

from .errors import InvalidArgument, NumericFailure
from .models import LogisticModel, init_system, sigmoid
from .objective import build_loss_table, surrogate_value, surrogate_value_and_grad
from .rng import Stream

log = logging.getLogger(__name__)

# sub-stream ids under a run seed (init_system uses the bare seed), kept apart so
# adding draws to one never shifts another
_SHUFFLE, POOLED_STREAM = 1, 2


@dataclass
class TrainConfig:
    K: int = 2
    batch_size: int = 1024
    epochs: int = 3
    lr_group: float = 1e-3
    lr_decoupled: float = 1e-2
    momentum_decoupled: float = 0.9
    lam: float = 10.0
    seed: int = 0
    tau: float = 1.0
    convergence_tol: float = 0.0
    pooled_lr: Optional[float] = None  # None: same as lr_decoupled
    pooled_epochs: Optional[int] = None  # None: same as epochs

    def __post_init__(self):
        if self.K < 2:
            raise InvalidArgument(f"K must be at least 2, got {self.K}")
        if self.batch_size < 1 or self.epochs < 1:
            raise InvalidArgument("batch_size and epochs must be positive")
        if self.lr_group < 0 or self.lr_decoupled < 0:
            raise InvalidArgument("learning rates must be non-negative")
        if not 0.0 <= self.momentum_decoupled < 1.0:
            raise InvalidArgument("momentum_decoupled must lie in [0, 1)")
        if self.lam < 0 or self.tau <= 0 or self.convergence_tol < 0:
            raise InvalidArgument("need lambda >= 0, tau > 0, convergence_tol >= 0")
        if self.seed < 0:
            raise InvalidArgument("seed must be unsigned")

    @property
    def effective_pooled_lr(self):
        return self.lr_decoupled if self.pooled_lr is None else self.pooled_lr

    @property
    def effective_pooled_epochs(self):
        return self.epochs if self.pooled_epochs is None else self.pooled_epochs

    def to_dict(self):
        doc = asdict(self)
        doc["lambda"] = doc.pop("lam")
        return doc

    @classmethod
    def from_dict(cls, doc):
        doc = dict(doc)
        if "lambda" in doc:
            doc["lam"] = doc.pop("lambda")
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise InvalidArgument(f"unknown training options: {sorted(unknown)}")
        return cls(**doc)


# Final per-dataset selections and the search grid from the experiments.
TUNED_SETTINGS = {
    "adult": dict(batch_size=1024, epochs=3, lr_group=1e-3, lr_decoupled=1e-2, momentum_decoupled=0.9, lam=10.0),
    "arrest": dict(batch_size=1024, epochs=3, lr_group=1e-3, lr_decoupled=1e-2, momentum_decoupled=0.9, lam=10.0),
    "violent": dict(batch_size=1024, epochs=3, lr_group=1e-3, lr_decoupled=1e-2, momentum_decoupled=0.9, lam=10.0),
    "german": dict(batch_size=256, epochs=3, lr_group=1e-3, lr_decoupled=1e-2, momentum_decoupled=0.9, lam=100.0),
    "bank": dict(batch_size=1024, epochs=2, lr_group=1e-3, lr_decoupled=1e-2, momentum_decoupled=0.9, lam=10.0),
}

SEARCH_GRID = {
    "batch_size": [256, 1024],
    "epochs": [2, 3, 4],
    "lr_group": [1e-4, 1e-3],
    "lr_decoupled": [1e-2, 1e-1],
    "momentum_decoupled": [0.9],
    "lam": [0.0, 1.0, 10.0, 100.0],
}


# -- pooled classifier -------------------------------------------------------

def logistic_loss(model, x, labels):
    margin = labels * (x @ model.weights + model.bias)
    return float(np.mean(np.logaddexp(0.0, -margin)))


def fit_logistic(x, labels, lr, epochs, stream, batch_size=1024, l2=0.0, history=None):
    """Mini-batch gradient descent on the mean logistic loss from a zero start."""
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    n, d = x.shape
    if n == 0:
        raise InvalidArgument("cannot fit a classifier on zero rows")
    w = np.zeros(d)
    b = 0.0
    for epoch in range(epochs):
        order = stream.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            xb, yb = x[idx], labels[idx]
            # d/dt log(1 + exp(-y t)) = -y * sigmoid(-y t)
            with np.errstate(over="ignore", invalid="ignore"):
                g = -yb * sigmoid(-yb * (xb @ w + b))
                w = w - lr * (g @ xb / len(idx) + l2 * w)
                b = b - lr * float(g.mean())
        if not np.all(np.isfinite(w)) or not np.isfinite(b):
            raise NumericFailure(f"logistic fit diverged in epoch {epoch}")
        loss = logistic_loss(LogisticModel(w, b), x, labels)
        if not np.isfinite(loss):
            raise NumericFailure(f"logistic fit diverged in epoch {epoch}")
        if history is not None:
            history.append(loss)
    return LogisticModel(w, b)


def train_pooled(train, lr=1e-2, epochs=3, seed=0, batch_size=1024, l2=0.0, history=None):
    """Empirical-risk logistic classifier over the whole training set."""
    return fit_logistic(train.features, train.labels, lr, epochs, Stream(seed, POOLED_STREAM),
                        batch_size=batch_size, l2=l2, history=history)


# -- joint training ----------------------------------------------------------

@dataclass
class TrainTrace:
    steps: list = field(default_factory=list)  # {step, epoch, objective, gamma}
    epochs: list = field(default_factory=list)  # epoch-end summaries
    initial_objective: float = float("nan")
    best_system: object = None
    best_epoch: Optional[int] = None
    converged: bool = False

    def to_csv(self, path):
        ends = {e["step"]: e for e in self.epochs}
        cols = ["step", "objective", "gamma", "train_acc", "train_pfwh", "test_acc", "test_pfwh"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for s in self.steps:
                e = ends.get(s["step"], {})
                w.writerow([s["step"], repr(s["objective"]), repr(s["gamma"])]
                           + [_fmt(e.get(c)) for c in cols[3:]])


def _fmt(v):
    return "" if v is None else repr(float(v))


def epoch_metrics(system, data):
    """Accuracy and fairness-without-harm rate of ``system`` on ``data``."""
    from .metrics import prob_fwh

    table = build_loss_table(system, data)
    acc = 1.0 - float(table.hard_losses[np.arange(table.n), table.assignments + 1].mean())
    sizes = table.group_sizes
    flags = [f"empty group {k}" for k in np.flatnonzero(sizes == 0)]
    return {"accuracy": acc, "prob_fwh": prob_fwh(table), "group_sizes": sizes.tolist(),
            "flags": flags}


def train_dafh(train, config, monitor=None):
    """Fit the group MLP and K decoupled logistic models by gradient ascent.

    The pooled model is fit first and frozen. Each step evaluates the
    surrogate gradient once at the current parameters, then moves the group
    classifier by plain ascent and the decoupled models by momentum ascent.
    If ``monitor`` is given, epoch-end metrics on it are traced and the
    epoch with the best monitor accuracy is kept as ``trace.best_system``.
    """
    cfg = config
    if train.n == 0:
        raise InvalidArgument("empty training set")
    system = init_system(train.d, cfg.K, seed=cfg.seed)
    system.pooled = train_pooled(train, cfg.effective_pooled_lr, cfg.effective_pooled_epochs,
                                 cfg.seed, batch_size=cfg.batch_size)
    system.config = cfg.to_dict()
    system.fingerprint = train.schema.fingerprint()

    x, labels = train.features, train.labels
    trace = TrainTrace()
    trace.initial_objective = surrogate_value(system, x, labels, cfg.lam, cfg.tau)
    vel_w = [np.zeros(train.d) for _ in range(cfg.K)]
    vel_b = [0.0] * cfg.K
    shuffle = Stream(cfg.seed, _SHUFFLE)
    mlp = system.group
    step = 0
    prev = trace.initial_objective
    best_acc = -1.0

    for epoch in range(cfg.epochs):
        order = shuffle.permutation(train.n)
        for start in range(0, train.n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            try:
                g = surrogate_value_and_grad(system, (x[idx], labels[idx]), cfg.lam, cfg.tau)
            except NumericFailure as exc:
                raise NumericFailure(f"step {step}: {exc}") from None
            trace.steps.append({"step": step, "epoch": epoch, "objective": g.value,
                                "gamma": g.gamma})
            for name, grad in g.mlp.items():
                setattr(mlp, name, getattr(mlp, name) + cfg.lr_group * grad)
            for k, (gw, gb) in enumerate(g.decoupled):
                vel_w[k] = cfg.momentum_decoupled * vel_w[k] + gw
                vel_b[k] = cfg.momentum_decoupled * vel_b[k] + gb
                m = system.decoupled[k]
                m.weights = m.weights + cfg.lr_decoupled * vel_w[k]
                m.bias = m.bias + cfg.lr_decoupled * vel_b[k]
            step += 1

        full = surrogate_value(system, x, labels, cfg.lam, cfg.tau)
        if not np.isfinite(full):
            raise NumericFailure(f"step {step - 1}: surrogate objective is not finite")
        record = {"epoch": epoch, "step": step - 1, "objective": full}
        tr = epoch_metrics(system, train)
        record.update(train_acc=tr["accuracy"], train_pfwh=tr["prob_fwh"])
        if monitor is not None:
            te = epoch_metrics(system, monitor)
            record.update(test_acc=te["accuracy"], test_pfwh=te["prob_fwh"])
            if te["accuracy"] > best_acc:
                best_acc = te["accuracy"]
                trace.best_system = system.copy()
                trace.best_epoch = epoch
        trace.epochs.append(record)
        log.debug("epoch %d objective %.6g", epoch, full)
        if cfg.convergence_tol > 0 and abs(full - prev) < cfg.convergence_tol:
            trace.converged = True
            break
        prev = full
    return system, trace
