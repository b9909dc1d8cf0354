"""Multi-repeat experiments: config parsing, cell execution, aggregation, reports.

A config is a YAML document (see README for the grammar). Every (method,
repeat) pair is one independent cell; cells may run in worker processes and
are collected in a fixed order, so the aggregate is byte-identical however
many jobs ran.
"""

import copy
import hashlib
import itertools
import json
import logging
import math
import os
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from importlib import metadata

import numpy as np
import yaml

from . import baselines
from .data import SplitSpec, gen_synthetic, load_csv, split, standardize
from .errors import DafhError, InvalidArgument
from .metrics import METRIC_NAMES, evaluate
from .models import save_system
from .training import TUNED_SETTINGS, TrainConfig, train_dafh

log = logging.getLogger(__name__)

METHODS = ("dafh", "pooled", "trivial", "cluster", "lr-all", "manual")
REPORT_FORMAT = "dafh-aggregate-report"

# Conventional file names and columns for the five benchmark tables. Users can
# override any field from the config's dataset block.
DATASETS = {
    "adult": dict(file="adult.csv", label="income", sensitive=["race"], disparity_by="race"),
    "arrest": dict(file="arrest.csv", label="two_year_recid", sensitive=["race"],
                   disparity_by="race"),
    "violent": dict(file="violent.csv", label="two_year_recid", sensitive=["race"],
                    disparity_by="race"),
    "german": dict(file="german.csv", label="credit", sensitive=["sex"], disparity_by="sex"),
    "bank": dict(file="bank.csv", label="y", sensitive=["age"], disparity_by="age",
                 binarize={"age": 40.0}),
}


def package_version():
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "0+unknown"


# -- config ------------------------------------------------------------------

@dataclass
class MethodSpec:
    method: str
    label: str
    train: TrainConfig
    options: dict = field(default_factory=dict)
    grid_group: str = ""  # set on variants expanded from one grid entry


@dataclass
class ExperimentConfig:
    dataset: dict
    methods: list
    repeats: int = 5
    split: dict = field(default_factory=lambda: {"train_fraction": 0.75, "seed": 0})
    standardize: bool = False
    disparity_by: str = ""
    composition_by: list = field(default_factory=list)
    output: str = ""
    raw: dict = field(default_factory=dict)  # normalized document, hashed


def _default_label(entry):
    m = entry["method"]
    if m == "trivial":
        return f"trivial({entry.get('attribute', '?')})"
    if m == "lr-all":
        return f"lr-all({','.join(entry.get('attributes', []))})"
    if m == "cluster":
        return f"cluster(k={entry.get('k', 2)})"
    return m


def _grid_points(grid):
    keys = sorted(grid)
    for values in itertools.product(*(grid[k] for k in keys)):
        yield dict(zip(keys, values))


def parse_config(doc, base_dir="."):
    """Validate a config document and expand hyperparameter grids."""
    if not isinstance(doc, dict):
        raise InvalidArgument("experiment config must be a mapping")
    doc = copy.deepcopy(doc)
    known = {"dataset", "methods", "repeats", "split", "standardize", "disparity_by",
             "composition_by", "output"}
    unknown = set(doc) - known
    if unknown:
        raise InvalidArgument(f"unknown config keys: {sorted(unknown)}")
    dataset = dict(doc.get("dataset") or {"kind": "synthetic"})
    kind = dataset.setdefault("kind", "synthetic")
    if kind == "synthetic":
        for k, v in (("n", 20000), ("delta", 0.4), ("sigma", 0.3), ("seed", 0)):
            dataset.setdefault(k, v)
    elif kind == "csv":
        name = dataset.get("name")
        for k, v in DATASETS.get(name, {}).items():
            dataset.setdefault(k, copy.deepcopy(v))
        if "path" not in dataset:
            data_dir = dataset.get("data_dir") or os.environ.get("DAFH_DATA_DIR", ".")
            if "file" not in dataset:
                raise InvalidArgument("csv dataset needs a path (or a known name)")
            dataset["path"] = os.path.join(data_dir, dataset["file"])
        dataset["path"] = os.path.join(base_dir, dataset["path"])
        if "label" not in dataset:
            raise InvalidArgument("csv dataset needs a label column")
        dataset.setdefault("sensitive", [])
        dataset.setdefault("drop", [])
        dataset.setdefault("binarize", {})
    else:
        raise InvalidArgument(f"unknown dataset kind {kind!r}")

    repeats = int(doc.get("repeats", 5))
    if repeats < 1:
        raise InvalidArgument("repeats must be at least 1")
    split_doc = {"train_fraction": 0.75, "seed": 0, **(doc.get("split") or {})}
    SplitSpec(split_doc["train_fraction"], split_doc["seed"])  # validates

    entries = doc.get("methods") or []
    if not entries:
        raise InvalidArgument("config lists no methods")
    methods = []
    for entry in entries:
        entry = {"method": entry} if isinstance(entry, str) else dict(entry)
        m = entry.get("method")
        if m not in METHODS:
            raise InvalidArgument(f"unknown method {m!r}; expected one of {list(METHODS)}")
        train_doc = dict(entry.pop("train", {}) or {})
        preset = entry.pop("preset", None)
        if preset is not None:
            if preset not in TUNED_SETTINGS:
                raise InvalidArgument(f"unknown preset {preset!r}")
            train_doc = {**TUNED_SETTINGS[preset], **train_doc}
        grid = entry.pop("grid", None)
        label = entry.pop("label", None) or _default_label(entry)
        options = {k: v for k, v in entry.items() if k != "method"}
        if grid:
            for point in _grid_points(grid):
                tag = ",".join(f"{k}={point[k]}" for k in sorted(point))
                tc = TrainConfig.from_dict({**train_doc, **point})
                methods.append(MethodSpec(m, f"{label}[{tag}]", tc, options, grid_group=label))
        else:
            methods.append(MethodSpec(m, label, TrainConfig.from_dict(train_doc), options))
    labels = [s.label for s in methods]
    if len(set(labels)) != len(labels):
        raise InvalidArgument("method labels must be unique; add a label field")

    cfg = ExperimentConfig(
        dataset=dataset,
        methods=methods,
        repeats=repeats,
        split=split_doc,
        # z-scoring is real-data preprocessing; synthetic features stay raw by default
        standardize=bool(doc.get("standardize", kind == "csv")),
        disparity_by=doc.get("disparity_by") or dataset.get("disparity_by", ""),
        composition_by=list(doc.get("composition_by") or []),
        output=doc.get("output") or os.environ.get("DAFH_OUTPUT_DIR", ""),
    )
    cfg.raw = {
        "dataset": dataset,
        "methods": [{"method": s.method, "label": s.label, "train": s.train.to_dict(),
                     "options": s.options, "grid_group": s.grid_group} for s in methods],
        "repeats": repeats,
        "split": split_doc,
        "standardize": cfg.standardize,
        "disparity_by": cfg.disparity_by,
        "composition_by": cfg.composition_by,
    }
    return cfg


def load_config(path):
    try:
        with open(path, encoding="utf-8") as fh:
            doc = yaml.safe_load(fh)
    except FileNotFoundError:
        raise InvalidArgument(f"missing config file: {path}") from None
    except yaml.YAMLError as exc:
        raise InvalidArgument(f"config is not valid YAML: {exc}") from None
    return parse_config(doc, base_dir=os.path.dirname(os.path.abspath(path)))


def config_hash(cfg):
    """sha256 over the normalized config, the package version and any input file."""
    h = hashlib.sha256()
    h.update(json.dumps(cfg.raw, sort_keys=True).encode())
    h.update(package_version().encode())
    if cfg.dataset["kind"] == "csv" and os.path.exists(cfg.dataset["path"]):
        with open(cfg.dataset["path"], "rb") as fh:
            h.update(hashlib.sha256(fh.read()).digest())
    return h.hexdigest()


# -- cells -------------------------------------------------------------------

_DATA_CACHE = {}


def load_dataset(spec):
    key = json.dumps(spec, sort_keys=True)
    if key not in _DATA_CACHE:
        if spec["kind"] == "synthetic":
            data = gen_synthetic(spec["n"], spec["delta"], spec["sigma"], spec["seed"])
        else:
            data = load_csv(spec["path"], spec["label"], spec["sensitive"], spec.get("drop", ()))
        _DATA_CACHE[key] = data
    return _DATA_CACHE[key]


def prepare_split(cfg, repeat):
    data = load_dataset(cfg.dataset)
    spec = SplitSpec(cfg.split["train_fraction"], cfg.split["seed"], repeat)
    train, test = split(data, spec)
    if cfg.standardize:
        train, (test,), _ = standardize(train, [test])
    return train, test


def fit_method(spec, train, test, seed, binarize=None):
    """Train one method; returns (final system, system for the group-risk metrics)."""
    tc = spec.train
    opts = spec.options
    common = dict(lr=tc.effective_pooled_lr, epochs=tc.effective_pooled_epochs, seed=seed,
                  batch_size=tc.batch_size, l2=float(opts.get("l2", 0.0)))
    if spec.method == "dafh":
        cfg = TrainConfig.from_dict({**tc.to_dict(), "seed": seed})
        system, trace = train_dafh(train, cfg, monitor=test)
        return system, trace.best_system or system
    if spec.method == "pooled":
        system = baselines.pooled_system(train, **common)
        return system, system
    if spec.method == "trivial":
        attr = opts.get("attribute")
        if not attr:
            raise InvalidArgument("trivial method needs an attribute")
        rule = opts.get("binarize", (binarize or {}).get(attr))
        part = baselines.trivial_partition(train, attr, rule)
    elif spec.method == "lr-all":
        attrs = list(opts.get("attributes") or [])
        rules = {a: float(t) for a, t in (binarize or {}).items() if a in attrs}
        rules.update(opts.get("binarize") or {})
        part = baselines.intersection_partition(train, attrs, rules,
                                                cap=int(opts.get("cap", baselines.INTERSECTION_CAP)))
    elif spec.method == "cluster":
        part, _ = baselines.kmeans_partition(train, int(opts.get("k", 2)), seed)
    else:
        part = baselines.manual_arrest_partition(
            train, opts.get("race", "race"), opts.get("sex", "sex"), opts.get("age", "age_cat"),
            seed)
    system = baselines.train_on_partition(train, part, **common)
    return system, system


def run_cell(cfg, index):
    """Run cell ``index`` (method-major order); never raises for module errors."""
    spec = cfg.methods[index // cfg.repeats]
    repeat = index % cfg.repeats
    row = {"method": spec.label, "repeat": repeat}
    try:
        train, test = prepare_split(cfg, repeat)
        seed = spec.train.seed + repeat
        final, snapshot = fit_method(spec, train, test, seed, cfg.dataset.get("binarize"))
        partitioned = spec.method != "pooled"
        cut = (cfg.dataset.get("binarize") or {}).get(cfg.disparity_by)
        main = evaluate(final, test, cfg.disparity_by or None, cfg.composition_by or None,
                        partitioned=partitioned, disparity_threshold=cut)
        best = evaluate(snapshot, test, cfg.disparity_by or None, partitioned=partitioned,
                        disparity_threshold=cut)
        doc = main.to_dict()
        for name in ("violations", "max_gain", "min_envy", "delta_disparity"):
            doc[name] = getattr(best, name)
        row.update(doc)
        row["status"] = "ok"
        if cfg.output:
            cell_dir = os.path.join(cfg.output, "cells", f"{_safe(spec.label)}_r{repeat}")
            os.makedirs(cell_dir, exist_ok=True)
            save_system(final, os.path.join(cell_dir, "model.json"))
    except (DafhError, ValueError, ArithmeticError) as exc:
        log.warning("cell %s repeat %d failed: %s", spec.label, repeat, exc)
        row.update(status="failed", error=f"{type(exc).__name__}: {exc}")
    return row


def _safe(label):
    return "".join(c if c.isalnum() or c in "-_=." else "_" for c in label)


def _run_cell_job(args):
    cfg, index = args
    return run_cell(cfg, index)


# -- aggregation -------------------------------------------------------------

def _clean(v):
    if isinstance(v, (np.floating, float)):
        v = float(v)
        return None if math.isnan(v) or math.isinf(v) else v
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, dict):
        return {k: _clean(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_clean(x) for x in v]
    return v


def summarize(values):
    """Mean and population std of the finite values; None when there are none."""
    vals = np.array([v for v in values if v is not None and np.isfinite(v)], dtype=np.float64)
    if vals.size == 0:
        return {"mean": None, "std": None, "n": 0}
    return {"mean": float(vals.mean()), "std": float(vals.std()), "n": int(vals.size)}


@dataclass
class AggregateReport:
    methods: dict  # label -> metric -> {mean, std, n}
    rows: list
    failures: list
    selection: dict  # grid group -> chosen label
    stamp: dict  # version, config hash, seeds

    def to_dict(self):
        return _clean({"format": REPORT_FORMAT, "stamp": self.stamp, "methods": self.methods,
                       "selection": self.selection, "rows": self.rows,
                       "failures": self.failures})

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=2, allow_nan=False) + "\n"

    @classmethod
    def from_dict(cls, doc):
        if doc.get("format") != REPORT_FORMAT:
            raise InvalidArgument("not an aggregate report")
        return cls(doc["methods"], doc["rows"], doc["failures"], doc.get("selection", {}),
                   doc["stamp"])

    def write(self, path):
        atomic_write(path, self.to_json())


def atomic_write(path, text):
    folder = os.path.dirname(os.path.abspath(path))
    os.makedirs(folder, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=folder, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def aggregate(cfg, rows):
    ok = [r for r in rows if r["status"] == "ok"]
    failures = [r for r in rows if r["status"] != "ok"]
    methods = {}
    for spec in cfg.methods:
        mine = [r for r in ok if r["method"] == spec.label]
        methods[spec.label] = {m: summarize([r.get(m) for r in mine]) for m in METRIC_NAMES}
        methods[spec.label]["repeats_ok"] = len(mine)
    selection = {}
    groups = sorted({s.grid_group for s in cfg.methods if s.grid_group})
    for g in groups:
        # highest mean fairness-without-harm rate; first listed wins ties
        best, best_val = None, -math.inf
        for s in cfg.methods:
            if s.grid_group != g:
                continue
            v = methods[s.label]["prob_fwh"]["mean"]
            if v is not None and v > best_val:
                best, best_val = s.label, v
        selection[g] = best
    stamp = {"version": package_version(), "config_hash": config_hash(cfg),
             "split_seed": cfg.split["seed"], "repeats": cfg.repeats,
             "train_seeds": {s.label: s.train.seed for s in cfg.methods}}
    return AggregateReport(methods, rows, failures, selection, stamp)


def run_experiment(cfg, jobs=1):
    cells = len(cfg.methods) * cfg.repeats
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_run_cell_job, [(cfg, i) for i in range(cells)]))
    else:
        rows = [run_cell(cfg, i) for i in range(cells)]
    rows = [_clean(r) for r in rows]
    report = aggregate(cfg, rows)
    if report.failures:
        log.warning("%d of %d cells failed and were left out of the aggregate",
                    len(report.failures), cells)
    return report


# -- formatting --------------------------------------------------------------

def pct(mean, std):
    if mean is None:
        return "N/A"
    return f"{100 * mean:.2f}% ± {100 * (std or 0.0):.2f}%"


def format_report(report, mode="markdown", metrics=METRIC_NAMES):
    if not report.methods:
        raise InvalidArgument("aggregate report has no methods")
    if mode == "csv":
        cols = ["method"] + [f"{m}_{s}" for m in metrics for s in ("mean", "std")]
        lines = [",".join(cols)]
        for label, stats in report.methods.items():
            cells = [f'"{label}"' if "," in label else label]
            for m in metrics:
                for s in ("mean", "std"):
                    v = stats[m][s]
                    cells.append("" if v is None else repr(v))
            lines.append(",".join(cells))
        return "\n".join(lines) + "\n"
    if mode != "markdown":
        raise InvalidArgument(f"unknown report mode {mode!r}")
    lines = ["| method | " + " | ".join(metrics) + " |",
             "|---" * (len(metrics) + 1) + "|"]
    for label, stats in report.methods.items():
        cells = []
        for m in metrics:
            st = stats[m]
            if m in ("prob_fwh", "accuracy"):
                cells.append(pct(st["mean"], st["std"]))
            elif st["mean"] is None:
                cells.append("N/A")
            else:
                cells.append(f"{st['mean']:.4f} ± {st['std']:.4f}")
        lines.append(f"| {label} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"
