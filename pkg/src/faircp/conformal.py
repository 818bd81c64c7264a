"""Split conformal prediction for classification.

Scores follow the adaptive-prediction-sets convention: the score of a label is
the probability mass ranked strictly above it plus a randomized share of its
own mass. Smaller scores are more conforming; a set contains every label whose
score is at or below the calibrated threshold.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .errors import DataError, ShapeError
from .nnet import RngStream, as_matrix

logger = logging.getLogger(__name__)

PredictionSet = frozenset

#: Threshold value meaning "admit every label" (calibration set too small for
#: the requested level).
ALL_INCLUSIVE = math.inf


def _check_simplex(probs: np.ndarray) -> None:
    if np.any(probs < -1e-9) or abs(float(probs.sum()) - 1.0) > 1e-6:
        raise ValueError("probabilities must form a simplex point")


def aps_score(probs, label: int, u: float) -> float:
    """Nonconformity score of one label under one probability vector.

    Classes are ranked by descending probability (ties broken by index); the
    score is the mass strictly above the label's rank plus u times the label's
    own probability.
    """
    p = np.asarray(probs, dtype=np.float64)
    _check_simplex(p)
    if not 0 <= label < p.shape[0]:
        raise IndexError(f"label {label} out of range for {p.shape[0]} classes")
    order = np.argsort(-p, kind="stable")
    rank = int(np.nonzero(order == label)[0][0])
    above = float(p[order[:rank]].sum())
    return above + float(u) * float(p[label])


def aps_score_table(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Scores of every candidate label for every row, sharing one u per row."""
    probs = as_matrix(probs, "probabilities")
    u = np.asarray(u, dtype=np.float64)
    if u.shape != (probs.shape[0],):
        raise ShapeError(f"u shape {u.shape} != ({probs.shape[0]},)")
    order = np.argsort(-probs, axis=1, kind="stable")
    sorted_p = np.take_along_axis(probs, order, axis=1)
    above = np.cumsum(sorted_p, axis=1) - sorted_p
    scored = above + u[:, None] * sorted_p
    table = np.empty_like(scored)
    np.put_along_axis(table, order, scored, axis=1)
    return table


def aps_scores(probs: np.ndarray, labels: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Score of each row's true label."""
    labels = np.asarray(labels)
    table = aps_score_table(probs, u)
    return table[np.arange(table.shape[0]), labels]


@dataclass(frozen=True)
class CalibratedPredictor:
    """A conformal threshold bound to the calibration set that produced it."""

    threshold: float
    n_calib: int
    alpha: float
    convention: str = "aps-nonconformity"

    @property
    def is_all_inclusive(self) -> bool:
        return math.isinf(self.threshold)


def calibrate(scores, alpha: float) -> CalibratedPredictor:
    """Finite-sample threshold: the ceil((1-alpha)(N+1))-th smallest score.

    When that index exceeds N the threshold degenerates to all-inclusive.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    n = scores.shape[0]
    if n == 0:
        raise DataError("cannot calibrate on an empty score list")
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must be in (0,1), got {alpha}")
    k = math.ceil((1.0 - alpha) * (n + 1))
    if k > n:
        return CalibratedPredictor(ALL_INCLUSIVE, n, alpha)
    threshold = float(np.partition(scores, k - 1)[k - 1])
    return CalibratedPredictor(threshold, n, alpha)


def coverage_bits(scores, predictor: CalibratedPredictor) -> np.ndarray:
    """1 where the scored label would be inside the predictor's set."""
    scores = np.asarray(scores, dtype=np.float64)
    return (scores <= predictor.threshold).astype(np.int64)


def predict_set(probs, predictor: CalibratedPredictor, u: float) -> PredictionSet:
    """Labels whose score is at or below the threshold."""
    p = np.asarray(probs, dtype=np.float64)
    if predictor.is_all_inclusive:
        return frozenset(range(p.shape[0]))
    table = aps_score_table(p[None, :], np.asarray([u]))
    return frozenset(np.flatnonzero(table[0] <= predictor.threshold).tolist())


def predict_sets(probs: np.ndarray, predictor: CalibratedPredictor, u: np.ndarray):
    """Vectorized predict_set over rows; one u per row."""
    probs = as_matrix(probs, "probabilities")
    if predictor.is_all_inclusive:
        full = frozenset(range(probs.shape[1]))
        return [full] * probs.shape[0]
    table = aps_score_table(probs, u)
    inside = table <= predictor.threshold
    return [frozenset(np.flatnonzero(row).tolist()) for row in inside]


def _draw_u(n: int, rng: RngStream | None) -> np.ndarray:
    """Randomization terms; deterministic mode (all ones) when rng is None."""
    if rng is None:
        return np.ones(n)
    return rng.uniform(size=n)


def marginal_cp(
    calib_probs: np.ndarray,
    calib_labels: np.ndarray,
    test_probs: np.ndarray,
    alpha: float,
    rng: RngStream | None,
) -> list[PredictionSet]:
    """Plain split conformal prediction: one threshold from all calibration data."""
    calib_probs = as_matrix(calib_probs, "calibration probabilities")
    calib_labels = np.asarray(calib_labels)
    if calib_labels.shape != (calib_probs.shape[0],):
        raise ShapeError("calibration labels do not align with probability rows")
    u_cal = _draw_u(calib_probs.shape[0], rng)
    u_test = _draw_u(np.asarray(test_probs).shape[0], rng)
    predictor = calibrate(aps_scores(calib_probs, calib_labels, u_cal), alpha)
    return predict_sets(test_probs, predictor, u_test)


def partial_cp(
    calib_probs: np.ndarray,
    calib_labels: np.ndarray,
    calib_sensitive: np.ndarray,
    test_probs: np.ndarray,
    test_sensitive: np.ndarray,
    alpha: float,
    rng: RngStream | None,
) -> list[PredictionSet]:
    """Single-feature equalized coverage baseline.

    For each sensitive feature, calibration is repeated within the subgroup
    sharing the test instance's value; the final set is the union over
    features. Subgroups absent from calibration fall back to the marginal
    threshold with a logged warning.
    """
    calib_probs = as_matrix(calib_probs, "calibration probabilities")
    test_probs = as_matrix(test_probs, "test probabilities")
    calib_sensitive = np.asarray(calib_sensitive)
    test_sensitive = np.asarray(test_sensitive)
    if calib_sensitive.ndim != 2 or test_sensitive.ndim != 2:
        raise ShapeError("sensitive feature values must be 2-D (instances x features)")
    if calib_sensitive.shape[1] != test_sensitive.shape[1]:
        raise ShapeError("calibration and test sensitive feature counts differ")

    u_cal = _draw_u(calib_probs.shape[0], rng)
    u_test = _draw_u(test_probs.shape[0], rng)
    scores = aps_scores(calib_probs, calib_labels, u_cal)
    marginal = calibrate(scores, alpha)
    table = aps_score_table(test_probs, u_test)

    n_test = test_probs.shape[0]
    thresholds = np.full(n_test, -math.inf)
    for k in range(calib_sensitive.shape[1]):
        col = calib_sensitive[:, k]
        by_value: dict[float, float] = {}
        for value in np.unique(col):
            by_value[float(value)] = calibrate(scores[col == value], alpha).threshold
        for i in range(n_test):
            value = float(test_sensitive[i, k])
            if value in by_value:
                thr = by_value[value]
            else:
                logger.warning(
                    "sensitive feature %d value %r absent from calibration; "
                    "falling back to the marginal threshold",
                    k,
                    value,
                )
                thr = marginal.threshold
            if thr > thresholds[i]:
                thresholds[i] = thr
    # The union over per-feature sets equals the set under the largest
    # threshold because all sets share the same scores.
    return [
        frozenset(np.flatnonzero(table[i] <= thresholds[i]).tolist())
        for i in range(n_test)
    ]


def union_sets(sets) -> PredictionSet:
    """Union of prediction sets; empty input gives the empty set."""
    out: frozenset = frozenset()
    for s in sets:
        out = out | s
    return out
