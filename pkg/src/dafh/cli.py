"""Command-line entry point: ``dafh <command> [flags]``.

Exit codes: 0 success, 1 usage, 2 data, 3 numeric failure, 4 partial
experiment failure. Errors print one JSON line on stderr, e.g.
``{"error": {"kind": "data", "exit_code": 2, "message": "..."}}``.
"""

import argparse
import json
import logging
import os
import sys
from dataclasses import replace

from . import baselines
from .data import apply_stats, gen_synthetic, load_csv, standardize, write_synthetic_csv
from .errors import DafhError, DataError, EmptyGroupError, InvalidArgument, NumericFailure
from .experiment import AggregateReport, atomic_write, format_report, load_config, run_experiment
from .metrics import evaluate
from .models import check_fingerprint, load_system, save_system
from .training import TrainConfig, train_dafh

log = logging.getLogger("dafh")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC, EXIT_PARTIAL = 0, 1, 2, 3, 4


class UsageError(InvalidArgument):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _kind(exc):
    if isinstance(exc, (NumericFailure, EmptyGroupError)):
        return "numeric"
    if isinstance(exc, (DataError, OSError)):
        return "data"
    return "usage"


def _report_error(exc):
    kind = _kind(exc)
    code = {"usage": EXIT_USAGE, "data": EXIT_DATA, "numeric": EXIT_NUMERIC}[kind]
    msg = str(exc) if not isinstance(exc, OSError) else f"{exc.strerror}: {exc.filename}"
    print(json.dumps({"error": {"kind": kind, "exit_code": code, "message": msg}}),
          file=sys.stderr)
    return code


def _csv_list(text):
    return [t.strip() for t in text.split(",") if t.strip()] if text else []


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {text}")
    return v


def _load(args):
    """Dataset named by --data/--label/--sensitive; a synthetic CSV needs no flags."""
    sensitive = _csv_list(args.sensitive)
    return load_csv(args.data, args.label, sensitive)


# -- commands ----------------------------------------------------------------

def cmd_gen_synth(args):
    data = gen_synthetic(args.n, args.delta, args.sigma, args.seed)
    write_synthetic_csv(data, args.out)
    log.info("wrote %d rows to %s", data.n, args.out)
    return EXIT_OK


def _maybe_standardize(args, data):
    if not args.standardize:
        return data, None
    data, _, schema = standardize(data)
    return data, {k: list(v) for k, v in schema.numeric_stats.items()}


def _stamp(system, args, stats):
    system.meta.update(label=args.label, sensitive=_csv_list(args.sensitive))
    if stats is not None:
        system.meta["numeric_stats"] = stats


def cmd_train(args):
    if args.k < 2:
        raise UsageError(f"--k must be at least 2, got {args.k}")
    data, stats = _maybe_standardize(args, _load(args))
    cfg = TrainConfig(K=args.k, batch_size=args.batch, epochs=args.epochs,
                      lr_group=args.lr_group, lr_decoupled=args.lr_dec,
                      momentum_decoupled=args.momentum, lam=args.lam, seed=args.seed,
                      tau=args.tau, convergence_tol=args.tol)
    system, trace = train_dafh(data, cfg)
    _stamp(system, args, stats)
    os.makedirs(args.out, exist_ok=True)
    save_system(system, os.path.join(args.out, "model.json"))
    trace.to_csv(os.path.join(args.out, "trace.csv"))
    log.info("trained K=%d on %d rows; bundle in %s", cfg.K, data.n, args.out)
    return EXIT_OK


def cmd_baseline(args):
    data, stats = _maybe_standardize(args, _load(args))
    common = dict(lr=args.lr, epochs=args.epochs, seed=args.seed, batch_size=args.batch)
    m = args.method
    if m == "pooled":
        system = baselines.pooled_system(data, **common)
    else:
        if m == "trivial":
            if not args.attribute:
                raise UsageError("--method trivial needs --attribute")
            part = baselines.trivial_partition(data, args.attribute, args.age_threshold)
        elif m == "lr-all":
            attrs = _csv_list(args.attributes)
            rules = {a: args.age_threshold for a in attrs
                     if a.startswith("age") and args.age_threshold is not None}
            part = baselines.intersection_partition(data, attrs, rules)
        elif m == "cluster":
            part, state = baselines.kmeans_partition(data, args.k, args.seed)
            log.info("k-means stopped after %d iterations, inertia %.6g",
                     state.iterations_run, state.inertia)
        else:
            part = baselines.manual_arrest_partition(data, args.race, args.sex, args.age,
                                                     args.seed)
        system = baselines.train_on_partition(data, part, **common)
        if args.partition_csv:
            part.to_csv(args.partition_csv)
    _stamp(system, args, stats)
    save_system(system, args.out)
    return EXIT_OK


def cmd_eval(args):
    system = load_system(args.model)
    label = args.label or system.meta.get("label") or "y"
    sensitive = (_csv_list(args.sensitive) if args.sensitive is not None
                 else system.meta.get("sensitive", []))
    data = load_csv(args.data, label, sensitive)
    check_fingerprint(system, data)
    stats = system.meta.get("numeric_stats")
    if stats:
        data = apply_stats(data, replace(data.schema,
                                         numeric_stats={k: tuple(v) for k, v in stats.items()}))
    report = evaluate(system, data, args.disparity_by or None, _csv_list(args.composition_by),
                      partitioned=system.meta.get("method") != "pooled",
                      disparity_threshold=args.disparity_threshold)
    if args.format == "csv":
        text = report.csv_header() + "\n" + report.csv_row() + "\n"
    else:
        doc = {k: (None if isinstance(v, float) and v != v else v)
               for k, v in report.to_dict().items()}
        text = json.dumps(doc, indent=2) + "\n"
    if args.report:
        atomic_write(args.report, text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_experiment(args):
    cfg = load_config(args.config)
    if args.output:
        cfg.output = args.output
    report = run_experiment(cfg, jobs=args.jobs)
    out = args.report or (os.path.join(cfg.output, "aggregate.json") if cfg.output else None)
    if out:
        report.write(out)
        log.info("aggregate report written to %s", out)
    else:
        sys.stdout.write(report.to_json())
    if report.failures:
        print(json.dumps({"error": {"kind": "partial", "exit_code": EXIT_PARTIAL,
                                    "message": f"{len(report.failures)} cells failed"}}),
              file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


def cmd_report(args):
    try:
        with open(args.input, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError:
        raise DataError(f"not a JSON report: {args.input}") from None
    report = AggregateReport.from_dict(doc)
    sys.stdout.write(format_report(report, args.format))
    return EXIT_OK


# -- parser ------------------------------------------------------------------

def _data_flags(p, label_default="y"):
    p.add_argument("--data", required=True, help="input CSV")
    p.add_argument("--label", default=label_default, help="label column")
    p.add_argument("--sensitive", default="s1,s2",
                   help="comma-separated sensitive columns, excluded from features")
    p.add_argument("--standardize", action="store_true",
                   help="z-score numeric features; stats are stored in the bundle")


def build_parser():
    parser = _Parser(prog="dafh", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-synth", help="write the synthetic two-attribute dataset")
    p.add_argument("--n", type=_positive_int, default=20000)
    p.add_argument("--delta", type=float, default=0.4)
    p.add_argument("--sigma", type=float, default=0.3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("train", help="train the group classifier and decoupled models")
    _data_flags(p)
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--batch", type=_positive_int, default=1024)
    p.add_argument("--epochs", type=_positive_int, default=3)
    p.add_argument("--lr-group", type=float, default=1e-3)
    p.add_argument("--lr-dec", type=float, default=1e-2)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--lambda", dest="lam", type=float, default=10.0)
    p.add_argument("--tau", type=float, default=1.0)
    p.add_argument("--tol", type=float, default=0.0, help="early-stop tolerance, 0 disables")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory for model.json and trace.csv")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("baseline", help="fit a comparison partition and its classifiers")
    _data_flags(p)
    p.add_argument("--method", required=True,
                   choices=["pooled", "trivial", "cluster", "lr-all", "manual"])
    p.add_argument("--attribute")
    p.add_argument("--attributes")
    p.add_argument("--k", type=_positive_int, default=2)
    p.add_argument("--age-threshold", type=float,
                   help="binarize the age attribute: below vs at-or-above")
    p.add_argument("--race", default="race")
    p.add_argument("--sex", default="sex")
    p.add_argument("--age", default="age_cat")
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--epochs", type=_positive_int, default=3)
    p.add_argument("--batch", type=_positive_int, default=1024)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--partition-csv", help="also write the training partition")
    p.add_argument("--out", required=True, help="model bundle path")
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("eval", help="evaluate a model bundle on a dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--label", help="label column (default: from the bundle)")
    p.add_argument("--sensitive", help="sensitive columns (default: from the bundle)")
    p.add_argument("--disparity-by")
    p.add_argument("--disparity-threshold", type=float,
                   help="binarize a numeric --disparity-by column: below vs at-or-above")
    p.add_argument("--composition-by")
    p.add_argument("--format", choices=["json", "csv"], default="json")
    p.add_argument("--report", help="write here instead of stdout")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("experiment", help="run a multi-repeat experiment from a YAML config")
    p.add_argument("config")
    p.add_argument("--jobs", type=_positive_int, default=1)
    p.add_argument("--output", help="output directory (overrides the config)")
    p.add_argument("--report", help="aggregate report path (default: <output>/aggregate.json)")
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("report", help="render an aggregate report as a table")
    p.add_argument("input")
    p.add_argument("--format", choices=["markdown", "csv"], default="markdown")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return _report_error(exc)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (DafhError, OSError) as exc:
        return _report_error(exc)


if __name__ == "__main__":
    sys.exit(main())
