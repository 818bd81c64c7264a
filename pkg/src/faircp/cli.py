"""Command-line interface.

Subcommands: gen-data, train-classifier, run, sweep, audit, plot.
Exit codes: 0 success, 2 config error, 3 data error, 4 training error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace

import numpy as np

from . import svgplot
from .conformal import marginal_cp, partial_cp
from .datasets import (
    GENERATORS,
    SplitSpec,
    save_dataset,
    split,
    write_nursery_surrogate,
)
from .errors import ConfigError, DataError, TrainingError
from .groups import latent_cp
from .harness import (
    RunRecord,
    load_config,
    make_dataset,
    run_experiment,
    run_sweep,
    train_base_classifier,
    wsc_audit,
)
from .metrics import covered_bits
from .nnet import RngStream

logger = logging.getLogger("faircp")


def _add_common(p: argparse.ArgumentParser, config_required: bool = True) -> None:
    p.add_argument("--config", required=config_required, help="experiment config file (INI)")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--out", default=None, help="override the output directory")
    p.add_argument("--repeats", type=int, default=None, help="override the repeat count")


def _load(args) -> "ExperimentConfig":
    config = load_config(args.config)
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    if args.out is not None:
        config = replace(config, out_dir=args.out)
    if getattr(args, "repeats", None) is not None:
        config = replace(config, repeats=args.repeats)
    return config


def cmd_gen_data(args) -> None:
    os.makedirs(args.out, exist_ok=True)
    if args.dataset == "nursery-surrogate":
        path = os.path.join(args.out, "nursery.csv")
        write_nursery_surrogate(path)
        print(path)
        return
    if args.dataset not in GENERATORS:
        raise ConfigError(
            f"unknown dataset {args.dataset!r}; choose from "
            f"{sorted(GENERATORS)} or nursery-surrogate"
        )
    data = GENERATORS[args.dataset](args.n, RngStream(args.seed).child(0))
    path = os.path.join(args.out, f"{args.dataset}.csv")
    save_dataset(data, path)
    print(path)


def cmd_train_classifier(args) -> None:
    config = _load(args)
    rng = RngStream(config.seed)
    data = make_dataset(config, rng.child(0))
    train, calib, test = split(data, SplitSpec(*config.split), rng.child(1))
    clf = train_base_classifier(train.x, train.y, data.n_classes, config.classifier, rng.child(2))
    os.makedirs(config.out_dir, exist_ok=True)
    rows = []
    for name, part in (("train", train), ("calibration", calib), ("test", test)):
        acc = float((clf.predict_proba(part.x).argmax(axis=1) == part.y).mean())
        rows.append((name, part.n, acc))
    path = os.path.join(config.out_dir, "classifier_metrics.csv")
    with open(path, "w", encoding="ascii", newline="\n") as handle:
        handle.write("split,n,accuracy\n")
        for name, n, acc in rows:
            handle.write(f"{name},{n},{acc!r}\n")
    print(path)


def cmd_run(args) -> None:
    config = _load(args)
    records = run_experiment(config)
    print(os.path.join(config.out_dir, "aggregate.csv"))
    for method in sorted({r.method for r in records}):
        rows = [r for r in records if r.method == method]
        cov = np.nanmean([r.average_coverage for r in rows])
        size = np.nanmean([r.average_size for r in rows])
        print(f"{method}: runs={len(rows)} coverage={cov:.3f} size={size:.3f}")


def cmd_sweep(args) -> None:
    config = _load(args)
    values = [v for v in args.values.split(",") if v]
    path = run_sweep(config, args.parameter, values)
    print(path)


def cmd_audit(args) -> None:
    config = _load(args)
    rng = RngStream(config.seed)
    data = make_dataset(config, rng.child(0))
    train, calib, test = split(data, SplitSpec(*config.split), rng.child(1))
    clf = train_base_classifier(train.x, train.y, data.n_classes, config.classifier, rng.child(2))
    calib_probs = clf.predict_proba(calib.x)
    test_probs = clf.predict_proba(test.x)
    method = args.method
    method_rng = rng.child(10)
    if method == "marginal":
        sets = marginal_cp(calib_probs, calib.y, test_probs, config.alpha, method_rng)
    elif method == "partial":
        sens = list(calib.sensitive_columns)
        sets = partial_cp(
            calib_probs, calib.y, calib.x[:, sens].astype(np.int64),
            test_probs, test.x[:, sens].astype(np.int64), config.alpha, method_rng,
        )
    elif method == "latent":
        sets = latent_cp(
            calib.x, calib_probs, calib.y, test_probs, config.alpha, config.train, method_rng
        ).sets
    else:
        raise ConfigError(f"unknown method {method!r}")
    audit_cols = list(test.audit_columns) if test.audit_columns is not None else None
    audit_x = test.x[:, audit_cols] if audit_cols else test.x
    os.makedirs(config.out_dir, exist_ok=True)
    path = os.path.join(config.out_dir, "audit_coverages.csv")
    with open(path, "w", encoding="ascii", newline="\n") as handle:
        handle.write("kind,probe,coverage\n")
        for kind in ("linear", "quadratic"):
            result = wsc_audit(
                sets, test.y, audit_x, config.audit.delta,
                config.audit.n_probes, kind, rng.child(20 if kind == "linear" else 21),
            )
            for i, cov in enumerate(result.coverages):
                handle.write(f"{kind},{i},{float(cov)!r}\n")
            print(f"{kind}: min worst-slab coverage = {result.min_coverage:.4f}")
    print(path)


def _read_csv(path: str):
    if not os.path.exists(path):
        raise DataError(f"no such file: {path}")
    with open(path, "r", encoding="ascii") as handle:
        rows = [line.strip() for line in handle if line.strip()]
    rows = [r for r in rows if not r.startswith("#")]
    if not rows:
        raise DataError(f"{path}: empty table")
    header = rows[0].split(",")
    body = [r.split(",") for r in rows[1:]]
    for i, row in enumerate(body, start=2):
        if len(row) != len(header):
            raise DataError(f"{path}:{i}: wrong column count")
    return header, body


def cmd_plot(args) -> None:
    header, body = _read_csv(args.input)
    os.makedirs(args.out, exist_ok=True)
    written = []
    if header[:3] == ["kind", "probe", "coverage"]:
        groups: dict[str, list[float]] = {}
        for row in body:
            groups.setdefault(row[0], []).append(float(row[2]))
        path = os.path.join(args.out, "audit_cdf.svg")
        svgplot.cdf_chart(path, groups, "Worst-slab coverage CDF", "coverage")
        written.append(path)
    elif "method" in header and header[0] != "method":
        x_name = header[0]
        for metric in RunRecord.METRICS:
            col = f"{metric}_mean"
            if col not in header:
                raise DataError(f"{args.input}: missing column {col}")
            xi, mi, ci = header.index(x_name), header.index("method"), header.index(col)
            series: dict[str, tuple[list[float], list[float]]] = {}
            for row in body:
                if not row[ci]:
                    continue
                xs, ys = series.setdefault(row[mi], ([], []))
                xs.append(float(row[xi]))
                ys.append(float(row[ci]))
            path = os.path.join(args.out, f"{metric}.svg")
            svgplot.line_chart(path, series, metric.replace("_", " "), x_name, metric.replace("_", " "))
            written.append(path)
    elif header[0] == "method":
        for metric in RunRecord.METRICS:
            col = f"{metric}_mean"
            if col not in header:
                raise DataError(f"{args.input}: missing column {col}")
            ci = header.index(col)
            series = {
                row[0]: ([0.0], [float(row[ci])]) for row in body if row[ci]
            }
            path = os.path.join(args.out, f"{metric}.svg")
            svgplot.line_chart(path, series, metric.replace("_", " "), "", metric.replace("_", " "))
            written.append(path)
    else:
        raise DataError(f"{args.input}: unrecognized table schema")
    for path in written:
        print(path)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="faircp",
        description="Fair conformal prediction experiments and audits",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a dataset to CSV")
    p.add_argument("--dataset", required=True,
                   help="xnor | eight-subgroup | metric-eval | nursery-surrogate")
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-classifier", help="train the base classifier")
    _add_common(p)
    p.set_defaults(func=cmd_train_classifier)

    p = sub.add_parser("run", help="run the configured method comparison")
    _add_common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="sweep one group-learning hyperparameter")
    _add_common(p)
    p.add_argument("--parameter", required=True, help="delta | T | beta")
    p.add_argument("--values", required=True, help="comma-separated values")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("audit", help="worst-slab audits for one method")
    _add_common(p)
    p.add_argument("--method", default="marginal", help="marginal | partial | latent")
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("plot", help="render SVG charts from result CSVs")
    p.add_argument("--input", required=True, help="aggregate.csv, sweep.csv, or audit CSV")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except ConfigError as exc:
        logger.error("config error: %s", exc)
        return 2
    except DataError as exc:
        logger.error("data error: %s", exc)
        return 3
    except TrainingError as exc:
        logger.error("training error: %s", exc)
        return 4
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
