"""Evaluation metrics on hard losses and hard assignments, plus two diagnostics.

Every metric here uses 0-1 losses and argmax group assignment; the soft
surrogate never enters evaluation. Group-risk metrics skip empty groups and
report them through flags instead of failing.
"""

import itertools
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import pandas as pd

from .data import Dataset
from .errors import DataError, InvalidArgument
from .models import predict
from .objective import build_loss_table, objective_from_risks
from .rng import Stream

log = logging.getLogger(__name__)

AGE_BINS = ("Less than 25", "25 - 45", "Greater than 45")


def prob_fwh(table):
    """Share of samples whose assigned classifier loses no more than any other.

    The comparison set is the pooled classifier and all K decoupled ones.
    """
    if table.n == 0:
        return float("nan")
    own = table.hard_losses[np.arange(table.n), table.assignments + 1]
    ok = np.all(own[:, None] <= table.hard_losses, axis=1)
    return float(ok.mean())


def _nonempty(table):
    sizes = table.group_sizes
    empty = np.flatnonzero(sizes == 0)
    if empty.size:
        log.warning("empty groups %s excluded from group metrics", empty.tolist())
    return np.flatnonzero(sizes > 0)


def violations(table):
    """Rationality failures plus ordered-pair envy failures over nonempty groups."""
    risks = table.group_risks()
    count = 0
    for k in _nonempty(table):
        own = risks[k, k + 1]
        count += int(own > risks[k, 0])
        count += int(sum(own > risks[k, j + 1] for j in range(table.K) if j != k))
    return count


def max_gain(table):
    """Largest pooled-minus-assigned risk over nonempty groups."""
    risks = table.group_risks()
    ks = _nonempty(table)
    if ks.size == 0:
        return float("nan")
    return float(np.max(risks[ks, 0] - risks[ks, ks + 1]))


def min_envy(table):
    """max over ordered pairs k != j of R_k(h_j) - R_k(h_k).

    Called min envy after the usual table header although it is a max.
    With K = 1 there are no pairs and the result is NaN.
    """
    risks = table.group_risks()
    best = float("nan")
    for k in _nonempty(table):
        for j in range(table.K):
            if j == k:
                continue
            gap = risks[k, j + 1] - risks[k, k + 1]
            best = gap if np.isnan(best) else max(best, gap)
    return float(best)


def _disparity(correct, groups):
    accs = [correct[groups == g].mean() for g in pd.unique(groups)]
    return float(max(accs) - min(accs))


def delta_disparity(system, data, groups_by, threshold=None):
    """Accuracy disparity of the assigned system minus that of the pooled model.

    Disparity is the largest accuracy gap between the groups defined by the
    sensitive column ``groups_by``, split below / at-or-above ``threshold``
    when one is given. Negative values favour the decoupled system.
    """
    groups = data.sensitive_column(groups_by)
    if threshold is not None:
        groups = np.asarray(groups, dtype=np.float64) >= threshold
    table = build_loss_table(system, data)
    assigned = 1.0 - table.hard_losses[np.arange(table.n), table.assignments + 1]
    pooled = 1.0 - table.hard_losses[:, 0]
    return _disparity(assigned, groups) - _disparity(pooled, groups)


def age_bin(values):
    """Map numeric ages onto the three recidivism-data bins; strings pass through."""
    values = np.asarray(values)
    if values.dtype.kind not in "iuf":
        return values.astype(str)
    out = np.where(values < 25, AGE_BINS[0], np.where(values <= 45, AGE_BINS[1], AGE_BINS[2]))
    return out.astype(object)


def composition(assignments, data, attributes, K=None):
    """Per-group distribution over the cross-product of sensitive attributes.

    Columns cover every combination of observed values, so empty cells show
    as 0. Rows of empty groups are NaN. Numeric ``age`` columns are binned.
    """
    assignments = np.asarray(getattr(assignments, "assignment", assignments), dtype=np.int64)
    if assignments.shape != (data.n,):
        raise InvalidArgument("assignment length does not match the data")
    if not attributes:
        raise InvalidArgument("composition needs at least one attribute")
    cols = []
    for a in attributes:
        v = data.sensitive_column(a)
        cols.append(age_bin(v) if a.startswith("age") else v.astype(str))
    levels = [sorted(set(c.tolist())) for c in cols]
    cells = list(itertools.product(*levels))
    index = {cell: j for j, cell in enumerate(cells)}
    keys = np.array([index[cell] for cell in zip(*cols)])
    K = int(assignments.max()) + 1 if K is None else K
    counts = np.zeros((K, len(cells)))
    np.add.at(counts, (assignments, keys), 1.0)
    totals = counts.sum(axis=1, keepdims=True)
    with np.errstate(invalid="ignore"):
        props = counts / totals
    names = ["|".join(cell) for cell in cells]
    return pd.DataFrame(props, index=pd.Index(range(K), name="group"), columns=names)


# -- diagnostics -------------------------------------------------------------

def group_risk_sums(system, data, chunk=65536):
    """Per-group loss sums (K x (K+1)) and sizes, streamed over row chunks."""
    K = system.K
    sums = np.zeros((K, K + 1))
    sizes = np.zeros(K, dtype=np.int64)
    for start in range(0, data.n, chunk):
        part = data.take(np.arange(start, min(start + chunk, data.n)))
        table = build_loss_table(system, part)
        sums += table.pi.T @ table.hard_losses
        sizes += table.group_sizes
    return sums, sizes


@dataclass
class GapSamples:
    gaps: np.ndarray  # |obj - obj_hat| per trial, NaN for flagged trials
    nbar: np.ndarray  # smallest group size per trial, 0 if a group was empty
    reference: float  # obj on the reference pool
    flags: list = field(default_factory=list)

    def coverage(self, eps):
        """Fraction of trials with gap <= eps; flagged trials count as misses."""
        return float(np.mean(np.nan_to_num(self.gaps, nan=np.inf) <= eps))


def concentration_bound(eps, nbar, K):
    """Lower bound 1 - 2K(K+1) exp(-2 eps^2 nbar / 9) on P(gap <= eps)."""
    return 1.0 - 2 * K * (K + 1) * np.exp(-2.0 * eps * eps * nbar / 9.0)


def generalization_gap(system, sampler, n_per_trial, trials, seed=0, n_test_pool=10**6):
    """Monte Carlo spread of the exact objective around its population value.

    ``sampler(n, seed)`` must return a fresh Dataset. The population value is
    taken from one pool of ``n_test_pool`` rows; each trial then draws its own
    sample of ``n_per_trial`` rows on a seed derived from ``seed``.
    """
    seeds = Stream(seed, 7).raw(trials + 1)
    pool = sampler(n_test_pool, int(seeds[0]))
    sums, sizes = group_risk_sums(system, pool)
    if np.any(sizes == 0):
        raise InvalidArgument("reference pool leaves a group empty")
    reference = objective_from_risks(sums / sizes[:, None])
    gaps = np.full(trials, np.nan)
    nbar = np.zeros(trials, dtype=np.int64)
    flags = []
    for t in range(trials):
        sample = sampler(n_per_trial, int(seeds[t + 1]))
        s, z = group_risk_sums(system, sample)
        if np.any(z == 0):
            flags.append(f"trial {t}: empty group")
            continue
        nbar[t] = z.min()
        gaps[t] = abs(objective_from_risks(s / z[:, None]) - reference)
    return GapSamples(gaps, nbar, reference, flags)


def discrepancy_estimate(part_a, part_b, grid):
    """max over hypothesis pairs of |disagreement rate on A - on B|."""
    xa = part_a.features if isinstance(part_a, Dataset) else np.asarray(part_a, dtype=np.float64)
    xb = part_b.features if isinstance(part_b, Dataset) else np.asarray(part_b, dtype=np.float64)
    if len(grid) == 0 or xa.shape[0] == 0 or xb.shape[0] == 0:
        raise InvalidArgument("discrepancy needs a nonempty grid and nonempty samples")
    pa = np.stack([predict(h, xa) for h in grid])
    pb = np.stack([predict(h, xb) for h in grid])
    best = 0.0
    for i in range(len(grid)):
        da = (pa[i][None, :] != pa).mean(axis=1)
        db = (pb[i][None, :] != pb).mean(axis=1)
        best = max(best, float(np.max(np.abs(da - db))))
    return best


# -- reports -----------------------------------------------------------------

@dataclass
class EvalReport:
    prob_fwh: float
    accuracy: float
    violations: int
    max_gain: float
    min_envy: float
    delta_disparity: float
    group_sizes: list
    composition: Optional[pd.DataFrame] = None
    flags: list = field(default_factory=list)

    @property
    def n_bar(self):
        return int(min(self.group_sizes))

    def to_dict(self):
        doc = {
            "prob_fwh": self.prob_fwh,
            "accuracy": self.accuracy,
            "violations": self.violations,
            "max_gain": self.max_gain,
            "min_envy": self.min_envy,
            "delta_disparity": self.delta_disparity,
            "n_bar": self.n_bar,
            "group_sizes": ";".join(str(s) for s in self.group_sizes),
            "flags": ";".join(self.flags),
        }
        if self.composition is not None:
            for g, row in self.composition.iterrows():
                for cell, v in row.items():
                    doc[f"composition.{g}.{cell}"] = float(v)
        return doc

    def csv_header(self):
        return ",".join(self.to_dict())

    def csv_row(self):
        return ",".join(_csv_cell(v) for v in self.to_dict().values())


def _csv_cell(v):
    if isinstance(v, float):
        return repr(v)
    text = str(v)
    return f'"{text}"' if any(c in text for c in ',"\n') else text


METRIC_NAMES = ("prob_fwh", "accuracy", "violations", "max_gain", "min_envy", "delta_disparity")


def evaluate(system, data, disparity_by=None, composition_by=None, partitioned=True,
             disparity_threshold=None):
    """All evaluation metrics of ``system`` on ``data``.

    ``partitioned=False`` marks the pooled baseline, whose fairness rate is
    undefined (no partition) and reported as NaN. ``disparity_threshold``
    binarizes a numeric ``disparity_by`` column.
    """
    table = build_loss_table(system, data)
    sizes = table.group_sizes
    flags = [f"empty group {k}" for k in np.flatnonzero(sizes == 0)]
    acc = 1.0 - float(table.hard_losses[np.arange(table.n), table.assignments + 1].mean())
    pf = prob_fwh(table) if partitioned else float("nan")
    if not partitioned:
        flags.append("no group partition")
    dd = float("nan")
    if disparity_by:
        try:
            dd = delta_disparity(system, data, disparity_by, disparity_threshold)
        except DataError:
            flags.append(f"missing sensitive data: {disparity_by}")
    comp = None
    if composition_by:
        try:
            comp = composition(table.assignments, data, list(composition_by), K=table.K)
        except DataError as exc:
            flags.append(f"missing sensitive data: {exc}")
    return EvalReport(
        prob_fwh=pf,
        accuracy=acc,
        violations=violations(table),
        max_gain=max_gain(table),
        min_envy=min_envy(table),
        delta_disparity=dd,
        group_sizes=sizes.tolist(),
        composition=comp,
        flags=flags,
    )
