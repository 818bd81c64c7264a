"""Experiment orchestration: classifier training, method comparison, sweeps.

A run is fully determined by its config and seed: every random draw flows
from one seeded stream per repeat, and CSV emission is byte-stable. Wall
clock timings are recorded separately so the deterministic outputs stay
deterministic.
"""

from __future__ import annotations

import configparser
import logging
import math
import os
import time
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .conformal import marginal_cp, partial_cp
from .datasets import (
    GENERATORS,
    Dataset,
    SplitSpec,
    corrupt_group,
    load_dataset,
    load_nursery,
    split,
)
from .errors import ConfigError, DataError, TrainingError
from .groups import TrainConfig, latent_cp
from .metrics import average_coverage, average_size, group_coverage, wsc_audit
from .nnet import Adam, Mlp, RngStream, cross_entropy

logger = logging.getLogger(__name__)

METHODS = ("marginal", "partial", "latent")

RUNS_SCHEMA = "faircp/runs/1"
AGGREGATE_SCHEMA = "faircp/aggregate/1"
SWEEP_SCHEMA = "faircp/sweep/1"


# ---------------------------------------------------------------------------
# Base classifier
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ClassifierConfig:
    hidden: tuple[int, int] = (64, 32)
    epochs: int = 200
    learning_rate: float = 1e-3
    batch_size: int = 128


@dataclass
class Classifier:
    """Probability-emitting predictor with frozen input standardization."""

    net: Mlp
    mean: np.ndarray
    std: np.ndarray
    n_classes: int

    def predict_proba(self, x) -> np.ndarray:
        return self.net.forward((np.asarray(x, dtype=np.float64) - self.mean) / self.std)


def train_base_classifier(
    x, y, n_classes: int, config: ClassifierConfig, rng: RngStream
) -> Classifier:
    """Cross-entropy training of a softmax network on standardized features."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    if x.shape[0] == 0:
        raise DataError("cannot train a classifier on an empty dataset")
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std[std < 1e-12] = 1.0
    xs = (x - mean) / std
    net = Mlp.init((x.shape[1], *config.hidden, n_classes), "softmax", rng.child(0))
    opt = Adam.for_mlp(net, config.learning_rate)
    shuffle = rng.child(1)
    n = x.shape[0]
    for _ in range(config.epochs):
        perm = shuffle.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = perm[start : start + config.batch_size]
            probs = net.forward(xs[idx])
            loss, dprobs = cross_entropy(probs, y[idx])
            if not math.isfinite(loss):
                raise TrainingError("non-finite classifier loss")
            grads, _ = net.backprop(xs[idx], dprobs)
            opt.step(net, grads)
    return Classifier(net=net, mean=mean, std=std, n_classes=n_classes)


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AuditConfig:
    delta: float = 0.5
    n_probes: int = 1000
    kind: str = "quadratic"

    def __post_init__(self):
        if not 0.0 < self.delta < 1.0:
            raise ConfigError(f"audit delta must be in (0,1), got {self.delta}")
        if self.n_probes < 0:
            raise ConfigError("audit n_probes must be nonnegative")
        if self.kind not in ("linear", "quadratic"):
            raise ConfigError(f"audit kind must be linear or quadratic, got {self.kind!r}")


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: str = "xnor"
    n: int = 2000
    path: str | None = None
    corrupt: bool = False
    alpha: float = 0.1
    split: tuple[float, float, float] = (0.25, 0.50, 0.25)
    methods: tuple[str, ...] = METHODS
    repeats: int = 10
    seed: int = 0
    out_dir: str = "out"
    train: TrainConfig = field(default_factory=TrainConfig.synthetic)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    audit: AuditConfig = field(default_factory=AuditConfig)

    def __post_init__(self):
        if self.dataset not in GENERATORS and self.dataset not in ("file", "nursery"):
            raise ConfigError(f"unknown dataset {self.dataset!r}")
        if self.dataset in ("file", "nursery") and not self.path:
            raise ConfigError(f"dataset {self.dataset!r} requires a path")
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError(f"alpha must be in (0,1), got {self.alpha}")
        if self.repeats < 1:
            raise ConfigError("repeats must be at least 1")
        unknown = set(self.methods) - set(METHODS)
        if unknown:
            raise ConfigError(f"unknown methods: {sorted(unknown)}")
        if len(self.split) != 3:
            raise ConfigError("split needs three fractions")


_BOOL_VALUES = {"true": True, "false": False, "1": True, "0": False}


def _parse_value(raw: str, kind, key: str):
    raw = raw.strip()
    try:
        if kind is bool:
            return _BOOL_VALUES[raw.lower()]
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is str:
            return raw
        if kind == "floats":
            return tuple(float(v) for v in raw.split(","))
        if kind == "ints":
            return tuple(int(v) for v in raw.split(","))
        if kind == "strs":
            return tuple(v.strip() for v in raw.split(",") if v.strip())
        if kind == "opt_int":
            return None if raw.lower() in ("", "none") else int(raw)
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    raise ConfigError(f"unhandled option kind for {key}")


_EXPERIMENT_KEYS = {
    "dataset": str,
    "n": int,
    "path": str,
    "corrupt": bool,
    "alpha": float,
    "split": "floats",
    "methods": "strs",
    "repeats": int,
    "seed": int,
    "out_dir": str,
}
_TRAIN_KEYS = {
    "delta": float,
    "beta": float,
    "epochs": int,
    "batch_size": int,
    "learning_rate": float,
    "n_group_samples": int,
    "latent_dim": int,
    "hidden": "ints",
    "stage2_epochs": "opt_int",
    "kl_warmup_steps": int,
}
_CLASSIFIER_KEYS = {
    "hidden": "ints",
    "epochs": int,
    "learning_rate": float,
    "batch_size": int,
}
_AUDIT_KEYS = {"delta": float, "n_probes": int, "kind": str}


def _section(parser: configparser.ConfigParser, name: str, keys: dict) -> dict:
    if not parser.has_section(name):
        return {}
    out = {}
    for key, raw in parser.items(name):
        if key not in keys:
            raise ConfigError(f"unknown key [{name}] {key}")
        out[key] = _parse_value(raw, keys[key], f"[{name}] {key}")
    return out


def load_config(path: str) -> ExperimentConfig:
    """Parse an INI-style experiment config, rejecting unknown keys."""
    if not os.path.exists(path):
        raise ConfigError(f"no such config file: {path}")
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        with open(path, "r", encoding="utf-8") as handle:
            parser.read_file(handle)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    known = {"experiment", "train", "classifier", "audit"}
    extra = set(parser.sections()) - known
    if extra:
        raise ConfigError(f"unknown config sections: {sorted(extra)}")

    exp = _section(parser, "experiment", _EXPERIMENT_KEYS)
    dataset = exp.get("dataset", "xnor")
    base_train = TrainConfig.nursery() if dataset == "nursery" else TrainConfig.synthetic()
    try:
        train = replace(base_train, **_section(parser, "train", _TRAIN_KEYS))
        classifier = replace(ClassifierConfig(), **_section(parser, "classifier", _CLASSIFIER_KEYS))
        audit = replace(AuditConfig(), **_section(parser, "audit", _AUDIT_KEYS))
        if "split" in exp:
            exp["split"] = tuple(exp["split"])
        return ExperimentConfig(**exp, train=train, classifier=classifier, audit=audit)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


# ---------------------------------------------------------------------------
# Experiment execution
# ---------------------------------------------------------------------------


@dataclass
class RunRecord:
    method: str
    seed: int
    group_coverage: float
    wsc: float
    wsc_plus: float
    average_coverage: float
    average_size: float
    seconds: float

    METRICS = ("group_coverage", "wsc", "wsc_plus", "average_coverage", "average_size")


def make_dataset(config: ExperimentConfig, rng: RngStream) -> Dataset:
    """Generate or load the configured dataset, applying corruption if asked."""
    if config.dataset in GENERATORS:
        return GENERATORS[config.dataset](config.n, rng.child(0))
    data = load_nursery(config.path) if config.dataset == "nursery" else load_dataset(config.path)
    if config.corrupt:
        data = corrupt_group(data, rng.child(1))
    if 0 < config.n < data.n:
        data = data.take(rng.child(2).permutation(data.n)[: config.n])
    return data


def run_methods(config: ExperimentConfig, seed: int) -> list[RunRecord]:
    """One repeat: data, splits, classifier, every configured method, metrics."""
    rng = RngStream(seed)
    data = make_dataset(config, rng.child(0))
    train, calib, test = split(data, SplitSpec(*config.split), rng.child(1))
    clf = train_base_classifier(
        train.x, train.y, data.n_classes, config.classifier, rng.child(2)
    )
    calib_probs = clf.predict_proba(calib.x)
    test_probs = clf.predict_proba(test.x)
    sens = list(calib.sensitive_columns)
    audit_cols = list(test.audit_columns) if test.audit_columns is not None else None
    audit_x = test.x[:, audit_cols] if audit_cols else test.x

    records = []
    for m_idx, method in enumerate(config.methods):
        method_rng = rng.child(10 + m_idx)
        started = time.perf_counter()
        if method == "marginal":
            sets = marginal_cp(calib_probs, calib.y, test_probs, config.alpha, method_rng)
        elif method == "partial":
            if not sens:
                raise DataError("partial method requires sensitive features")
            sets = partial_cp(
                calib_probs,
                calib.y,
                calib.x[:, sens].astype(np.int64),
                test_probs,
                test.x[:, sens].astype(np.int64),
                config.alpha,
                method_rng,
            )
        elif method == "latent":
            sets = latent_cp(
                calib.x, calib_probs, calib.y, test_probs,
                config.alpha, config.train, method_rng,
            ).sets
        else:  # pragma: no cover - guarded by config validation
            raise ConfigError(f"unknown method {method!r}")
        seconds = time.perf_counter() - started

        gcov = (
            group_coverage(sets, test.y, test.unfair_flag)
            if test.unfair_flag is not None and test.unfair_flag.any()
            else math.nan
        )
        if config.audit.n_probes > 0:
            wsc = wsc_audit(
                sets, test.y, audit_x, config.audit.delta,
                config.audit.n_probes, "linear", rng.child(100 + m_idx),
            ).min_coverage
            wsc_plus = wsc_audit(
                sets, test.y, audit_x, config.audit.delta,
                config.audit.n_probes, "quadratic", rng.child(200 + m_idx),
            ).min_coverage
        else:
            wsc = wsc_plus = math.nan
        records.append(
            RunRecord(
                method=method,
                seed=seed,
                group_coverage=gcov,
                wsc=wsc,
                wsc_plus=wsc_plus,
                average_coverage=average_coverage(sets, test.y),
                average_size=average_size(sets),
                seconds=seconds,
            )
        )
    return records


def _fmt(value: float) -> str:
    return "" if isinstance(value, float) and math.isnan(value) else repr(float(value))


def write_runs_csv(records: list[RunRecord], path: str) -> None:
    records = sorted(records, key=lambda r: (r.method, r.seed))
    with open(path, "w", encoding="ascii", newline="\n") as handle:
        handle.write(f"# schema: {RUNS_SCHEMA}\n")
        handle.write("method,seed," + ",".join(RunRecord.METRICS) + "\n")
        for r in records:
            cells = [r.method, str(r.seed)]
            cells += [_fmt(getattr(r, metric)) for metric in RunRecord.METRICS]
            handle.write(",".join(cells) + "\n")


def write_timings_csv(records: list[RunRecord], path: str) -> None:
    records = sorted(records, key=lambda r: (r.method, r.seed))
    with open(path, "w", encoding="ascii", newline="\n") as handle:
        handle.write("method,seed,seconds\n")
        for r in records:
            handle.write(f"{r.method},{r.seed},{r.seconds:.6f}\n")


def aggregate(records: list[RunRecord]) -> dict[str, dict[str, tuple[float, float]]]:
    """Per-method mean and sample standard deviation of each metric."""
    out: dict[str, dict[str, tuple[float, float]]] = {}
    for method in sorted({r.method for r in records}):
        rows = [r for r in records if r.method == method]
        stats = {}
        for metric in RunRecord.METRICS:
            values = np.array([getattr(r, metric) for r in rows], dtype=np.float64)
            values = values[~np.isnan(values)]
            if values.size == 0:
                stats[metric] = (math.nan, math.nan)
            elif values.size == 1:
                stats[metric] = (float(values[0]), math.nan)
            else:
                stats[metric] = (float(values.mean()), float(values.std(ddof=1)))
        out[method] = stats
    return out


def write_aggregate_csv(records: list[RunRecord], path: str) -> None:
    stats = aggregate(records)
    with open(path, "w", encoding="ascii", newline="\n") as handle:
        handle.write(f"# schema: {AGGREGATE_SCHEMA}\n")
        cols = []
        for metric in RunRecord.METRICS:
            cols += [f"{metric}_mean", f"{metric}_std"]
        handle.write("method,n_runs," + ",".join(cols) + "\n")
        for method, metrics in stats.items():
            n_runs = sum(1 for r in records if r.method == method)
            cells = [method, str(n_runs)]
            for metric in RunRecord.METRICS:
                mean, std = metrics[metric]
                cells += [_fmt(mean), _fmt(std)]
            handle.write(",".join(cells) + "\n")


def run_experiment(config: ExperimentConfig) -> list[RunRecord]:
    """All repeats of the configured comparison, with CSV output.

    A repeat that raises is logged and dropped; at least one repeat must
    survive. Writes runs.csv, aggregate.csv, and timings.csv under out_dir.
    """
    os.makedirs(config.out_dir, exist_ok=True)
    records: list[RunRecord] = []
    last_error: Exception | None = None
    for i in range(config.repeats):
        seed = config.seed + i
        try:
            records.extend(run_methods(config, seed))
        except (DataError, TrainingError, ValueError) as exc:
            last_error = exc
            logger.error("repeat with seed %d failed: %s", seed, exc)
    if not records:
        raise last_error if last_error is not None else DataError("no repeats survived")
    write_runs_csv(records, os.path.join(config.out_dir, "runs.csv"))
    write_aggregate_csv(records, os.path.join(config.out_dir, "aggregate.csv"))
    write_timings_csv(records, os.path.join(config.out_dir, "timings.csv"))
    return records


SWEEP_PARAMETERS = {
    "delta": ("delta", float),
    "beta": ("beta", float),
    "T": ("n_group_samples", int),
}


def run_sweep(config: ExperimentConfig, parameter: str, values) -> str:
    """run_experiment per value of one group-learning hyperparameter.

    Aggregates are concatenated into sweep.csv keyed by the swept value.
    """
    if parameter not in SWEEP_PARAMETERS:
        raise ConfigError(
            f"sweep parameter must be one of {sorted(SWEEP_PARAMETERS)}, got {parameter!r}"
        )
    values = list(values)
    if not values:
        raise ConfigError("sweep needs at least one value")
    field_name, cast = SWEEP_PARAMETERS[parameter]
    os.makedirs(config.out_dir, exist_ok=True)
    sweep_path = os.path.join(config.out_dir, "sweep.csv")
    rows = []
    for value in values:
        value = cast(value)
        sub = replace(
            config,
            train=replace(config.train, **{field_name: value}),
            out_dir=os.path.join(config.out_dir, f"{parameter}_{value}"),
        )
        records = run_experiment(sub)
        for method, metrics in aggregate(records).items():
            rows.append((value, method, metrics))
    with open(sweep_path, "w", encoding="ascii", newline="\n") as handle:
        handle.write(f"# schema: {SWEEP_SCHEMA}\n")
        cols = []
        for metric in RunRecord.METRICS:
            cols += [f"{metric}_mean", f"{metric}_std"]
        handle.write(f"{parameter},method," + ",".join(cols) + "\n")
        for value, method, metrics in rows:
            cells = [repr(float(value)), method]
            for metric in RunRecord.METRICS:
                mean, std = metrics[metric]
                cells += [_fmt(mean), _fmt(std)]
            handle.write(",".join(cells) + "\n")
    return sweep_path
