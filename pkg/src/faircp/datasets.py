"""Dataset generation, ingestion, corruption, and splitting.

Categorical features are ordinal-encoded; the encoding lives in the feature
metadata so files round-trip exactly. Generated datasets carry a ground-truth
flag for the subpopulation whose labels were made hard to predict.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, ShapeError
from .nnet import RngStream

DATASET_SCHEMA = "faircp/dataset/1"


@dataclass(frozen=True)
class FeatureInfo:
    """Column metadata; values is the ordinal code list, None for continuous."""

    name: str
    values: tuple[str, ...] | None = None

    @property
    def is_categorical(self) -> bool:
        return self.values is not None


@dataclass
class Dataset:
    """Feature matrix with class labels and fairness metadata.

    Arrays are marked read-only after construction; derive new datasets
    instead of mutating.
    """

    x: np.ndarray
    y: np.ndarray
    n_classes: int
    features: tuple[FeatureInfo, ...]
    sensitive: tuple[str, ...] = ()
    unfair_flag: np.ndarray | None = None
    audit_columns: tuple[int, ...] | None = None

    def __post_init__(self):
        self.x = np.ascontiguousarray(self.x, dtype=np.float64)
        self.y = np.ascontiguousarray(self.y, dtype=np.int64)
        if self.x.ndim != 2:
            raise ShapeError(f"features must be 2-D, got {self.x.shape}")
        if self.y.shape != (self.x.shape[0],):
            raise ShapeError("labels do not align with feature rows")
        if self.x.shape[1] != len(self.features):
            raise ShapeError("feature metadata does not match column count")
        if self.y.size and (self.y.min() < 0 or self.y.max() >= self.n_classes):
            raise DataError("labels outside [0, n_classes)")
        names = [f.name for f in self.features]
        if len(set(names)) != len(names):
            raise DataError("duplicate feature names")
        unknown = set(self.sensitive) - set(names)
        if unknown:
            raise DataError(f"sensitive features not in schema: {sorted(unknown)}")
        if self.unfair_flag is not None:
            self.unfair_flag = np.ascontiguousarray(self.unfair_flag, dtype=np.int64)
            if self.unfair_flag.shape != (self.x.shape[0],):
                raise ShapeError("unfair_flag does not align with rows")
            self.unfair_flag.setflags(write=False)
        self.x.setflags(write=False)
        self.y.setflags(write=False)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def d(self) -> int:
        return self.x.shape[1]

    def column(self, name: str) -> int:
        for i, f in enumerate(self.features):
            if f.name == name:
                return i
        raise DataError(f"no feature named {name!r}")

    @property
    def sensitive_columns(self) -> tuple[int, ...]:
        return tuple(self.column(name) for name in self.sensitive)

    def audit_matrix(self) -> np.ndarray:
        """Feature columns used by slab audits (all columns by default)."""
        if self.audit_columns is None:
            return self.x
        return self.x[:, list(self.audit_columns)]

    def take(self, indices) -> "Dataset":
        indices = np.asarray(indices)
        flag = None if self.unfair_flag is None else self.unfair_flag[indices].copy()
        return Dataset(
            x=self.x[indices].copy(),
            y=self.y[indices].copy(),
            n_classes=self.n_classes,
            features=self.features,
            sensitive=self.sensitive,
            unfair_flag=flag,
            audit_columns=self.audit_columns,
        )


@dataclass(frozen=True)
class SplitSpec:
    """Train/calibration/test fractions; must be positive and sum to one."""

    train: float
    calibration: float
    test: float
    seed: int | None = None

    def __post_init__(self):
        total = self.train + self.calibration + self.test
        if abs(total - 1.0) > 1e-12:
            raise DataError(f"split fractions sum to {total}, expected 1")
        if min(self.train, self.calibration, self.test) <= 0.0:
            raise DataError("split fractions must all be positive")


def split(data: Dataset, spec: SplitSpec, rng: RngStream):
    """Seeded shuffle followed by a contiguous three-way partition."""
    n = data.n
    n_train = round(spec.train * n)
    n_cal = round(spec.calibration * n)
    n_test = n - n_train - n_cal
    if min(n_train, n_cal, n_test) < 1:
        raise DataError(
            f"split of n={n} gives empty part: {(n_train, n_cal, n_test)}"
        )
    perm = rng.permutation(n)
    return (
        data.take(perm[:n_train]),
        data.take(perm[n_train : n_train + n_cal]),
        data.take(perm[n_train + n_cal :]),
    )


# ---------------------------------------------------------------------------
# Synthetic generators
# ---------------------------------------------------------------------------

N_SYNTH_CLASSES = 6

_AGE_VALUES = ("child", "youth", "middle", "elder")
_REGION_VALUES = ("asia", "europe", "africa", "america", "oceania")

_SYNTH_FEATURES = (
    FeatureInfo("color", ("blue", "red")),
    FeatureInfo("gender", ("male", "female")),
    FeatureInfo("x2"),
    FeatureInfo("x3"),
    FeatureInfo("x4"),
    FeatureInfo("x5"),
    FeatureInfo("x6"),
    FeatureInfo("x7"),
    FeatureInfo("age_group", _AGE_VALUES),
    FeatureInfo("region", _REGION_VALUES),
)
_SYNTH_SENSITIVE = ("color", "gender", "age_group", "region")
_SYNTH_AUDIT = (0, 1, 8, 9)


def _deterministic_labels(x2: np.ndarray) -> np.ndarray:
    """Easy rows: the class is the sextile of the driving coordinate."""
    return np.clip(np.floor(N_SYNTH_CLASSES * x2), 0, N_SYNTH_CLASSES - 1).astype(
        np.int64
    )


def _hard_labels(x2: np.ndarray, rng: RngStream) -> np.ndarray:
    """Hard rows: uniform over one class triple, picked by the 0.5 threshold."""
    triple = rng.integers(0, 3, size=x2.shape[0])
    return (triple + 3 * (x2 >= 0.5)).astype(np.int64)


def _mixed_labels(flag: np.ndarray, x2: np.ndarray, rng: RngStream) -> np.ndarray:
    y = _deterministic_labels(x2)
    hard = np.flatnonzero(flag)
    y[hard] = _hard_labels(x2[hard], rng)
    return y


def _synth_features(n: int, rng: RngStream):
    color = rng.integers(0, 2, size=n).astype(np.float64)
    gender = rng.integers(0, 2, size=n).astype(np.float64)
    reals = rng.uniform(size=(n, 6))
    age = rng.integers(0, 4, size=n).astype(np.float64)
    region = (np.arange(n) % 5).astype(np.float64)
    x = np.column_stack([color, gender, reals, age, region])
    return x, color.astype(np.int64), gender.astype(np.int64), age.astype(np.int64)


def gen_synthetic_xnor(n: int, rng: RngStream) -> Dataset:
    """Diagnosis-style data where two binary features agreeing marks the hard group.

    Labels on the hard group are uniform over a class triple chosen by the
    first continuous coordinate; everywhere else the label is a deterministic
    function of that coordinate.
    """
    if n < 1:
        raise DataError("need n >= 1")
    x, color, gender, _ = _synth_features(n, rng)
    flag = (color == gender).astype(np.int64)
    y = _mixed_labels(flag, x[:, 2], rng)
    return Dataset(
        x=x,
        y=y,
        n_classes=N_SYNTH_CLASSES,
        features=_SYNTH_FEATURES,
        sensitive=_SYNTH_SENSITIVE,
        unfair_flag=flag,
        audit_columns=_SYNTH_AUDIT,
    )


def gen_eight_subgroup(n: int, rng: RngStream) -> Dataset:
    """Variant with four of the eight gender-by-age cells treated unfairly."""
    if n < 1:
        raise DataError("need n >= 1")
    x, _, gender, age = _synth_features(n, rng)
    # Flagged cells: male child, male youth, female middle, female elder.
    flag = (gender == (age >= 2)).astype(np.int64)
    y = _mixed_labels(flag, x[:, 2], rng)
    return Dataset(
        x=x,
        y=y,
        n_classes=N_SYNTH_CLASSES,
        features=_SYNTH_FEATURES,
        sensitive=_SYNTH_SENSITIVE,
        unfair_flag=flag,
        audit_columns=_SYNTH_AUDIT,
    )


def gen_metric_eval(n: int, rng: RngStream) -> Dataset:
    """Ten uniform features; exactly one small coordinate marks the hard group."""
    if n < 1:
        raise DataError("need n >= 1")
    x = rng.uniform(size=(n, 10))
    flag = ((x[:, 0] >= 0.1) != (x[:, 1] >= 0.1)).astype(np.int64)
    y = _mixed_labels(flag, x[:, 2], rng)
    return Dataset(
        x=x,
        y=y,
        n_classes=N_SYNTH_CLASSES,
        features=tuple(FeatureInfo(f"x{i}") for i in range(10)),
        sensitive=("x0", "x1"),
        unfair_flag=flag,
        audit_columns=(0, 1),
    )


# ---------------------------------------------------------------------------
# Nursery-style categorical data
# ---------------------------------------------------------------------------

NURSERY_VOCAB = (
    FeatureInfo("parents", ("usual", "pretentious", "great_pret")),
    FeatureInfo("has_nurs", ("proper", "less_proper", "improper", "critical", "very_crit")),
    FeatureInfo("form", ("complete", "completed", "incomplete", "foster")),
    FeatureInfo("children", ("1", "2", "3", "more")),
    FeatureInfo("housing", ("convenient", "less_conv", "critical")),
    FeatureInfo("finance", ("convenient", "inconv")),
    FeatureInfo("social", ("nonprob", "slightly_prob", "problematic")),
    FeatureInfo("health", ("recommended", "priority", "not_recom")),
)
NURSERY_CLASSES = ("not_recom", "recommend", "very_recom", "priority", "spec_prior")
_NURSERY_SENSITIVE = tuple(f.name for f in NURSERY_VOCAB if f.name != "housing")


def load_nursery(path: str) -> Dataset:
    """Parse a nursery-layout file: 8 categorical columns plus a class column."""
    if not os.path.exists(path):
        raise DataError(f"no such file: {path}")
    codebooks = [
        {val: float(i) for i, val in enumerate(f.values)} for f in NURSERY_VOCAB
    ]
    class_codes = {val: i for i, val in enumerate(NURSERY_CLASSES)}
    rows, labels = [], []
    with open(path, "r", encoding="ascii") as handle:
        for lineno, line in enumerate(handle, start=1):
            line = line.strip()
            if not line:
                continue
            parts = [p.strip() for p in line.split(",")]
            if len(parts) != 9:
                raise DataError(
                    f"{path}:{lineno}: expected 9 comma-separated fields, got {len(parts)}"
                )
            try:
                rows.append([codebooks[j][parts[j]] for j in range(8)])
            except KeyError as exc:
                raise DataError(f"{path}:{lineno}: unknown category {exc.args[0]!r}") from exc
            if parts[8] not in class_codes:
                raise DataError(f"{path}:{lineno}: unknown class {parts[8]!r}")
            labels.append(class_codes[parts[8]])
    if not rows:
        raise DataError(f"{path}: no data rows")
    audit = tuple(i for i, f in enumerate(NURSERY_VOCAB) if f.name != "housing")
    return Dataset(
        x=np.array(rows, dtype=np.float64),
        y=np.array(labels, dtype=np.int64),
        n_classes=len(NURSERY_CLASSES),
        features=NURSERY_VOCAB,
        sensitive=_NURSERY_SENSITIVE,
        unfair_flag=None,
        audit_columns=audit,
    )


def write_nursery_surrogate(path: str) -> None:
    """Write a stand-in nursery-layout file: the full 12,960-row factorial.

    Labels come from a fixed hand-written ranking rule, not from the original
    source; the file only mirrors the schema and rough class balance so the
    ingestion and corruption pipeline can run offline.
    """
    weights = {
        "parents": {"usual": 2, "pretentious": 1, "great_pret": 0},
        "has_nurs": {"proper": 3, "less_proper": 2, "improper": 1, "critical": -1, "very_crit": -3},
        "form": {"complete": 2, "completed": 1, "incomplete": 0, "foster": 0},
        "children": {"1": 1, "2": 1, "3": 0, "more": 0},
        "housing": {"convenient": 1, "less_conv": 0, "critical": -1},
        "finance": {"convenient": 1, "inconv": 0},
        "social": {"nonprob": 1, "slightly_prob": 1, "problematic": -1},
        "health": {"recommended": 2, "priority": 0, "not_recom": 0},
    }
    with open(path, "w", encoding="ascii", newline="\n") as handle:
        for combo in _factorial(NURSERY_VOCAB):
            row = dict(zip((f.name for f in NURSERY_VOCAB), combo))
            if row["health"] == "not_recom":
                label = "not_recom"
            else:
                score = sum(weights[name][value] for name, value in row.items())
                if score >= 12:
                    label = "recommend"
                elif score >= 10 and row["health"] == "recommended":
                    label = "very_recom"
                elif score >= 6:
                    label = "priority"
                else:
                    label = "spec_prior"
            handle.write(",".join(combo) + "," + label + "\n")


def _factorial(features):
    values = [f.values for f in features]
    idx = [0] * len(values)
    while True:
        yield tuple(values[j][idx[j]] for j in range(len(values)))
        j = len(values) - 1
        while j >= 0:
            idx[j] += 1
            if idx[j] < len(values[j]):
                break
            idx[j] = 0
            j -= 1
        if j < 0:
            return


def corrupt_group(data: Dataset, rng: RngStream) -> Dataset:
    """Scramble labels inside the parents/finance-defined group.

    Flagged rows get label + uniform noise of width (L-1), rounded and clamped;
    all other rows are untouched. The flag is recorded on the returned dataset.
    """
    parents = data.x[:, data.column("parents")].astype(np.int64)
    finance = data.x[:, data.column("finance")].astype(np.int64)
    flag = (((parents == 0) | (parents == 1)) & (finance == 1)).astype(np.int64)
    y = data.y.copy()
    hard = np.flatnonzero(flag)
    half_width = (data.n_classes - 1) / 2.0
    noise = rng.uniform(size=hard.shape[0], low=-half_width, high=half_width)
    y[hard] = np.clip(np.rint(y[hard] + noise), 0, data.n_classes - 1).astype(np.int64)
    return Dataset(
        x=data.x.copy(),
        y=y,
        n_classes=data.n_classes,
        features=data.features,
        sensitive=data.sensitive,
        unfair_flag=flag,
        audit_columns=data.audit_columns,
    )


# ---------------------------------------------------------------------------
# CSV export / import with a JSON metadata sidecar
# ---------------------------------------------------------------------------


def meta_path(csv_path: str) -> str:
    return csv_path + ".meta.json"


def save_dataset(data: Dataset, csv_path: str) -> None:
    """Write features plus labels as CSV and the schema as a JSON sidecar."""
    header = [f.name for f in data.features] + ["label"]
    if data.unfair_flag is not None:
        header.append("unfair_flag")
    with open(csv_path, "w", encoding="ascii", newline="\n") as handle:
        handle.write(",".join(header) + "\n")
        for i in range(data.n):
            cells = [repr(float(v)) for v in data.x[i]]
            cells.append(str(int(data.y[i])))
            if data.unfair_flag is not None:
                cells.append(str(int(data.unfair_flag[i])))
            handle.write(",".join(cells) + "\n")
    meta = {
        "schema": DATASET_SCHEMA,
        "n_classes": data.n_classes,
        "features": [
            {"name": f.name, "values": list(f.values) if f.values else None}
            for f in data.features
        ],
        "sensitive": list(data.sensitive),
        "audit_columns": list(data.audit_columns) if data.audit_columns else None,
        "has_unfair_flag": data.unfair_flag is not None,
    }
    with open(meta_path(csv_path), "w", encoding="ascii", newline="\n") as handle:
        json.dump(meta, handle, indent=2, sort_keys=True)
        handle.write("\n")


def load_dataset(csv_path: str) -> Dataset:
    """Inverse of save_dataset; round-trips bit-exactly."""
    mpath = meta_path(csv_path)
    if not os.path.exists(csv_path) or not os.path.exists(mpath):
        raise DataError(f"missing dataset file or sidecar for {csv_path}")
    with open(mpath, "r", encoding="ascii") as handle:
        meta = json.load(handle)
    if meta.get("schema") != DATASET_SCHEMA:
        raise DataError(f"unsupported dataset schema {meta.get('schema')!r}")
    features = tuple(
        FeatureInfo(f["name"], tuple(f["values"]) if f["values"] else None)
        for f in meta["features"]
    )
    has_flag = bool(meta["has_unfair_flag"])
    d = len(features)
    xs, ys, flags = [], [], []
    with open(csv_path, "r", encoding="ascii") as handle:
        header = handle.readline().strip().split(",")
        expected = [f.name for f in features] + ["label"] + (
            ["unfair_flag"] if has_flag else []
        )
        if header != expected:
            raise DataError(f"{csv_path}:1: header does not match sidecar schema")
        for lineno, line in enumerate(handle, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != len(expected):
                raise DataError(f"{csv_path}:{lineno}: wrong column count")
            xs.append([float(v) for v in parts[:d]])
            ys.append(int(parts[d]))
            if has_flag:
                flags.append(int(parts[d + 1]))
    return Dataset(
        x=np.array(xs, dtype=np.float64),
        y=np.array(ys, dtype=np.int64),
        n_classes=int(meta["n_classes"]),
        features=features,
        sensitive=tuple(meta["sensitive"]),
        unfair_flag=np.array(flags, dtype=np.int64) if has_flag else None,
        audit_columns=tuple(meta["audit_columns"]) if meta["audit_columns"] else None,
    )


GENERATORS = {
    "xnor": gen_synthetic_xnor,
    "eight-subgroup": gen_eight_subgroup,
    "metric-eval": gen_metric_eval,
}
