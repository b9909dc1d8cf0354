"""Fairness-without-harm objectives on hard loss tables, and the smooth surrogate.

Hard quantities work on a :class:`LossTable` of 0-1 losses (column 0 is the
pooled classifier, columns 1..K the decoupled ones) plus a hard assignment.
The surrogate replaces the assignment by the group classifier's softmax and
the 0-1 loss by a sigmoid of the predicted probability; its gradient is
derived by hand below. Sums reduce sequentially along numpy's default order,
so repeated evaluation is bit-stable.
"""

from dataclasses import dataclass

import numpy as np

from .errors import EmptyGroupError, InvalidArgument, NumericFailure
from .models import predict, sigmoid, softmax


@dataclass
class LossTable:
    hard_losses: np.ndarray  # n x (K+1), entries in {0, 1}
    assignments: np.ndarray  # n, 0-based group index
    K: int

    def __post_init__(self):
        self.hard_losses = np.asarray(self.hard_losses, dtype=np.float64)
        self.assignments = np.asarray(self.assignments, dtype=np.int64)
        n = self.hard_losses.shape[0]
        if self.hard_losses.ndim != 2 or self.hard_losses.shape[1] != self.K + 1:
            raise InvalidArgument(f"loss table must be n x {self.K + 1}")
        if self.assignments.shape != (n,):
            raise InvalidArgument("assignment vector length does not match loss table")
        if n and (self.assignments.min() < 0 or self.assignments.max() >= self.K):
            raise InvalidArgument("assignment outside [0, K)")

    @property
    def n(self):
        return self.hard_losses.shape[0]

    @property
    def group_sizes(self):
        return np.bincount(self.assignments, minlength=self.K)

    @property
    def pi(self):
        """One-hot assignment matrix, n x K."""
        out = np.zeros((self.n, self.K))
        out[np.arange(self.n), self.assignments] = 1.0
        return out

    def group_risks(self):
        """K x (K+1) matrix: row k holds each classifier's mean loss on group k.

        Rows of empty groups are NaN.
        """
        sums = self.pi.T @ self.hard_losses
        sizes = self.group_sizes.astype(np.float64)[:, None]
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(sizes > 0, sums / np.where(sizes > 0, sizes, 1.0), np.nan)

    def to_csv(self, path):
        cols = ",".join(f"L{j}" for j in range(self.K + 1))
        with open(path, "w") as fh:
            fh.write(f"index,assignment,{cols}\n")
            for i in range(self.n):
                row = ",".join(str(int(v)) for v in self.hard_losses[i])
                fh.write(f"{i},{self.assignments[i]},{row}\n")


def build_loss_table(system, data):
    x = data.features
    losses = np.empty((data.n, system.K + 1))
    losses[:, 0] = predict(system.pooled, x) != data.labels
    for k, m in enumerate(system.decoupled):
        losses[:, k + 1] = predict(m, x) != data.labels
    return LossTable(losses, system.assign(data), system.K)


def exact_objective(table):
    """Rationality plus envy-freeness margins averaged over groups.

    Every group must be nonempty; the per-group means are undefined otherwise.
    """
    sizes = table.group_sizes
    if np.any(sizes == 0):
        raise EmptyGroupError(np.flatnonzero(sizes == 0).tolist())
    return objective_from_risks(table.group_risks())


def objective_from_risks(risks):
    """Exact objective from a K x (K+1) group-risk matrix.

    ``risks[k, 0]`` is the pooled classifier's risk on group k and
    ``risks[k, j + 1]`` that of decoupled classifier j.
    """
    K = risks.shape[0]
    own = risks[np.arange(K), np.arange(K) + 1]
    rational = risks[:, 0] - own
    envy = risks[:, 1:].sum(axis=1) - K * own
    return float(np.sum(rational + envy / K) / K)


def lower_bound_objective(table):
    """(1/(n K^2)) * sum_i sum_k (L_ik - 2K pi_ik L_ik)."""
    K, n = table.K, table.n
    L = table.hard_losses[:, 1:]
    return float(np.sum(L - 2 * K * table.pi * L) / (n * K * K))


def pooled_constant(table):
    """The term (1/(K n)) * sum_i L_i0 that the lower bound drops."""
    return float(table.hard_losses[:, 0].sum() / (table.K * table.n))


def assigned_accuracy(table):
    L = table.hard_losses[np.arange(table.n), table.assignments + 1]
    return float(1.0 - L.mean())


def decomposition_check(table):
    """Residual of lower_bound == (2/K) acc + (1/(n K^2)) sum L - 2/K."""
    K, n = table.K, table.n
    rhs = (2.0 / K) * assigned_accuracy(table) + table.hard_losses[:, 1:].sum() / (n * K * K) - 2.0 / K
    return lower_bound_objective(table) - rhs


# -- surrogate ---------------------------------------------------------------

def soft_losses(system, x, labels, tau=1.0):
    """Smooth 0-1 loss |sigmoid(tau * (p_k(x) - 1/2)) - (y+1)/2|, n x K, in [0, 1]."""
    q = np.column_stack([sigmoid(x @ m.weights + m.bias) for m in system.decoupled])
    s = sigmoid(tau * (q - 0.5))
    ybin = (labels[:, None] + 1) / 2
    return np.abs(s - ybin)


def balance_penalty(pbar):
    """Negative KL(pbar || uniform): 0 at uniform, negative otherwise."""
    K = pbar.shape[0]
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(pbar > 0, pbar * np.log(K * pbar), 0.0)
    return -float(terms.sum())


@dataclass
class SurrogateGrad:
    value: float
    gamma: float
    lam: float
    mlp: dict  # W1, b1, W2, b2 gradients
    decoupled: list  # [(dw, db)] per group


def _surrogate_core(system, x, labels, lam, tau):
    mlp = system.group
    a1 = x @ mlp.W1.T + mlp.b1
    hidden = np.maximum(a1, 0.0)
    P = softmax(hidden @ mlp.W2.T + mlp.b2)

    q = np.column_stack([sigmoid(x @ m.weights + m.bias) for m in system.decoupled])
    s = sigmoid(tau * (q - 0.5))
    Lt = np.abs(s - (labels[:, None] + 1) / 2)

    pbar = P.mean(axis=0)
    gamma = balance_penalty(pbar)
    value = surrogate_objective(P, Lt, lam)
    return a1, hidden, P, q, s, Lt, pbar, gamma, value


def surrogate_objective(soft_assign, soft_loss, lam):
    """(1/(n K^2)) sum_i sum_k (Lt_ik - 2K P_ik Lt_ik) + lam * balance_penalty(mean P)."""
    n, K = soft_assign.shape
    gamma = balance_penalty(soft_assign.mean(axis=0))
    return float(np.sum(soft_loss - 2 * K * soft_assign * soft_loss)) / (n * K * K) + lam * gamma


def surrogate_value(system, x, labels, lam, tau=1.0):
    return _surrogate_core(system, x, labels, lam, tau)[-1]


def surrogate_value_and_grad(system, batch, lam, tau=1.0):
    """Value of the smooth objective on ``batch`` and its exact gradient.

    ``batch`` is a Dataset or an ``(x, labels)`` pair. The pooled model gets
    no gradient: its term is constant in every trained parameter.
    """
    x, labels = (batch.features, batch.labels) if hasattr(batch, "features") else batch
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels)
    if x.ndim != 2 or x.shape[0] == 0:
        raise InvalidArgument("batch must be a nonempty 2-D feature matrix")
    if x.shape[1] != system.d:
        raise InvalidArgument(f"batch has d={x.shape[1]}, system expects {system.d}")
    mlp = system.group
    K = system.K
    n = x.shape[0]
    a1, hidden, P, q, s, Lt, pbar, gamma, value = _surrogate_core(system, x, labels, lam, tau)
    scale = 1.0 / (n * K * K)

    # d value / d soft loss, then through |s - ybin| (slope -y) and both sigmoids
    gL = scale * (1.0 - 2 * K * P)
    gt = gL * (-labels[:, None]) * tau * s * (1.0 - s) * q * (1.0 - q)
    dec = [(gt[:, k] @ x, float(gt[:, k].sum())) for k in range(K)]

    # d value / d P: surrogate term plus the balance penalty through pbar
    # an empty soft group sends log(pbar) to -inf; the finiteness checks below report it
    with np.errstate(divide="ignore", invalid="ignore"):
        dgamma = -(np.log(K * pbar) + 1.0)
        gP = scale * (-2 * K * Lt) + lam * dgamma[None, :] / n
        gz = P * (gP - np.sum(P * gP, axis=1, keepdims=True))
        gW2 = gz.T @ hidden
        gb2 = gz.sum(axis=0)
        ga1 = (gz @ mlp.W2) * (a1 > 0)
        gW1 = ga1.T @ x
        gb1 = ga1.sum(axis=0)

    blocks = {"W1": gW1, "b1": gb1, "W2": gW2, "b2": gb2}
    for name, g in blocks.items():
        if not np.all(np.isfinite(g)):
            raise NumericFailure(f"non-finite gradient in group classifier block {name}")
    for k, (gw, gb) in enumerate(dec):
        if not (np.all(np.isfinite(gw)) and np.isfinite(gb)):
            raise NumericFailure(f"non-finite gradient in decoupled classifier {k}")
    if not np.isfinite(value):
        raise NumericFailure("non-finite surrogate objective")
    return SurrogateGrad(value, gamma, lam, blocks, dec)
