"""Independent brute-force evaluators shared by the unit and acceptance tests.

Everything here is written with plain Python loops over the definitions and
never calls the package's vectorized code paths.
"""

import numpy as np

from dafh.models import LogisticModel, init_system
from dafh.objective import LossTable, surrogate_value
from dafh.rng import Stream


def random_table(rng, n_max=12, Ks=(2, 3), nonempty=False):
    K = int(rng.choice(Ks))
    n = int(rng.integers(K if nonempty else 1, n_max + 1))
    L = rng.integers(0, 2, size=(n, K + 1))
    if nonempty:
        a = np.concatenate([np.arange(K), rng.integers(0, K, size=n - K)])
        rng.shuffle(a)
    else:
        a = rng.integers(0, K, size=n)
    return LossTable(L, a, K)


def risk(table, k, col):
    """Mean loss of column ``col`` over rows assigned to group k (None if empty)."""
    rows = [i for i in range(table.n) if table.assignments[i] == k]
    if not rows:
        return None
    return sum(table.hard_losses[i][col] for i in rows) / len(rows)


def exact_objective(table, denom="group"):
    """Nested-loop objective; ``denom='n'`` swaps every group size for n."""
    K, n = table.K, table.n
    total = 0.0
    for k in range(K):
        rows = [i for i in range(n) if table.assignments[i] == k]
        size = len(rows) if denom == "group" else n
        R = [sum(table.hard_losses[i][c] for i in rows) / size for c in range(K + 1)]
        inner = sum(R[j + 1] - R[k + 1] for j in range(K))
        total += (R[0] - R[k + 1]) + inner / K
    return total / K


def lower_bound(table):
    K, n = table.K, table.n
    s = 0.0
    for i in range(n):
        for k in range(K):
            L = table.hard_losses[i][k + 1]
            pi = 1.0 if table.assignments[i] == k else 0.0
            s += L - 2 * K * pi * L
    return s / (n * K * K)


def accuracy(table):
    n = table.n
    good = sum(1 for i in range(n) if table.hard_losses[i][table.assignments[i] + 1] == 0)
    return good / n


def prob_fwh(table):
    ok = 0
    for i in range(table.n):
        own = table.hard_losses[i][table.assignments[i] + 1]
        if all(own <= table.hard_losses[i][c] for c in range(table.K + 1)):
            ok += 1
    return ok / table.n


def violations(table):
    count = 0
    for k in range(table.K):
        if risk(table, k, 0) is None:
            continue
        own = risk(table, k, k + 1)
        if own > risk(table, k, 0):
            count += 1
        for j in range(table.K):
            if j != k and own > risk(table, k, j + 1):
                count += 1
    return count


def max_gain(table):
    vals = [risk(table, k, 0) - risk(table, k, k + 1)
            for k in range(table.K) if risk(table, k, 0) is not None]
    return max(vals)


def min_envy(table):
    vals = []
    for k in range(table.K):
        if risk(table, k, 0) is None:
            continue
        for j in range(table.K):
            if j != k:
                vals.append(risk(table, k, j + 1) - risk(table, k, k + 1))
    return max(vals) if vals else float("nan")


def disparity(correct, groups):
    accs = {}
    for c, g in zip(correct, groups):
        accs.setdefault(g, []).append(c)
    means = [sum(v) / len(v) for v in accs.values()]
    return max(means) - min(means)


# -- gradients ---------------------------------------------------------------

def random_system(seed, d, K):
    s = init_system(d, K, seed)
    r = Stream(seed, 123)
    for m in s.decoupled:
        m.weights = r.normal(d)
        m.bias = float(r.normal(1)[0])
    s.group.b1 = 0.1 * r.normal(s.group.b1.shape[0])
    s.group.b2 = 0.1 * r.normal(K)
    s.pooled = LogisticModel(r.normal(d), 0.0)
    return s


def parameter_slots(system):
    """(name, getter, setter) triples over every trainable scalar."""
    slots = []
    mlp = system.group
    for name in ("W1", "b1", "W2", "b2"):
        arr = getattr(mlp, name)
        for idx in np.ndindex(arr.shape):
            slots.append((f"{name}{idx}", ("mlp", name, idx)))
    for k, m in enumerate(system.decoupled):
        for j in range(m.d):
            slots.append((f"h{k}.w{j}", ("dec", k, j)))
        slots.append((f"h{k}.b", ("dec", k, None)))
    return slots


def _get(system, where):
    if where[0] == "mlp":
        return getattr(system.group, where[1])[where[2]]
    m = system.decoupled[where[1]]
    return m.bias if where[2] is None else m.weights[where[2]]


def _set(system, where, value):
    if where[0] == "mlp":
        getattr(system.group, where[1])[where[2]] = value
    else:
        m = system.decoupled[where[1]]
        if where[2] is None:
            m.bias = value
        else:
            m.weights[where[2]] = value


def analytic_entry(grad, where):
    if where[0] == "mlp":
        return grad.mlp[where[1]][where[2]]
    gw, gb = grad.decoupled[where[1]]
    return gb if where[2] is None else gw[where[2]]


def near_relu_kink(system, x, margin=1e-4):
    """True if a hidden pre-activation is within ``margin`` of zero on some row."""
    a1 = x @ system.group.W1.T + system.group.b1
    return bool(np.any(np.abs(a1) < margin))


def finite_difference(system, x, y, lam, tau, where, step=1e-6):
    base = _get(system, where)
    _set(system, where, base + step)
    up = surrogate_value(system, x, y, lam, tau)
    _set(system, where, base - step)
    down = surrogate_value(system, x, y, lam, tau)
    _set(system, where, base)
    return (up - down) / (2 * step)
