"""Evaluation metrics: coverage summaries and worst-slab coverage audits.

A slab probe maps features to a scalar (linearly or through a quadratic form);
the audit finds the value window holding at least a delta fraction of the data
with the lowest empirical coverage. The window search is exact: every feasible
window is considered, with tied projection values kept together.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .errors import ShapeError
from .nnet import RngStream, as_matrix


def group_coverage(sets, labels, mask) -> float:
    """Fraction of masked instances whose true label is in their set."""
    labels = np.asarray(labels)
    mask = np.asarray(mask).astype(bool)
    if len(sets) != labels.shape[0] or mask.shape != labels.shape:
        raise ShapeError("sets, labels, and mask lengths differ")
    idx = np.flatnonzero(mask)
    if idx.size == 0:
        raise ValueError("mask selects no instances")
    hits = sum(1 for i in idx if int(labels[i]) in sets[i])
    return hits / idx.size


def average_coverage(sets, labels) -> float:
    """Marginal empirical coverage over all instances."""
    labels = np.asarray(labels)
    return group_coverage(sets, labels, np.ones(labels.shape[0], dtype=bool))


def average_size(sets) -> float:
    """Mean prediction-set cardinality."""
    if len(sets) == 0:
        raise ValueError("cannot average over an empty list of sets")
    return sum(len(s) for s in sets) / len(sets)


def covered_bits(sets, labels) -> np.ndarray:
    """1 where the true label is inside the set."""
    labels = np.asarray(labels)
    if len(sets) != labels.shape[0]:
        raise ShapeError("sets and labels lengths differ")
    return np.array([int(int(y) in s) for s, y in zip(sets, labels)], dtype=np.int64)


@dataclass
class SlabProbe:
    """A scalar projection of the feature space plus a minimum-mass fraction.

    kind "linear" uses v.x; kind "quadratic" uses x.W.x + v.x with W symmetric
    (symmetrized on construction).
    """

    kind: str
    v: np.ndarray
    delta: float
    w: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("linear", "quadratic"):
            raise ValueError(f"kind must be linear or quadratic, got {self.kind!r}")
        if not 0.0 < self.delta < 1.0:
            raise ValueError(f"delta must be in (0,1), got {self.delta}")
        self.v = np.asarray(self.v, dtype=np.float64).ravel()
        if self.kind == "quadratic":
            if self.w is None:
                raise ShapeError("quadratic probe requires a W matrix")
            w = as_matrix(self.w, "W")
            d = self.v.shape[0]
            if w.shape != (d, d):
                raise ShapeError(f"W shape {w.shape} incompatible with v length {d}")
            self.w = 0.5 * (w + w.T)
        elif self.w is not None:
            raise ShapeError("linear probe must not carry a W matrix")

    def project(self, x) -> np.ndarray:
        """Projection values t_i for each feature row."""
        x = as_matrix(x, "features")
        if x.shape[1] != self.v.shape[0]:
            raise ShapeError(f"feature width {x.shape[1]} != probe width {self.v.shape[0]}")
        t = x @ self.v
        if self.kind == "quadratic":
            t = t + np.einsum("nd,de,ne->n", x, self.w, x)
        return t


@dataclass(frozen=True)
class SlabResult:
    """The worst window found for one probe: value range, coverage, and mass."""

    a: float
    b: float
    coverage: float
    mass: float


@njit(cache=True)
def _min_window(cnt: np.ndarray, cov: np.ndarray, min_count: int):
    """Minimum-average window over prefix sums, window size >= min_count.

    cnt/cov are cumulative counts and covered counts over value groups, with a
    leading zero entry. Returns (coverage, i, j) where the window spans groups
    i..j-1 in prefix terms. Exact search: candidate start points live on the
    upper convex hull of the prefix curve and the slope to each end point is
    unimodal along it, so a binary search per end point inspects every window
    that can attain the minimum.
    """
    n_pts = cnt.shape[0]
    best = 2.0
    bi = -1
    bj = -1
    hull = np.empty(n_pts, np.int64)
    hlen = 0
    nxt = 0
    for j in range(1, n_pts):
        limit = cnt[j] - min_count
        while nxt < j and cnt[nxt] <= limit:
            while hlen >= 2:
                a = hull[hlen - 2]
                b = hull[hlen - 1]
                keep = (cnt[b] - cnt[a]) * (cov[nxt] - cov[a]) - (
                    cov[b] - cov[a]
                ) * (cnt[nxt] - cnt[a])
                if keep >= 0:
                    hlen -= 1
                else:
                    break
            hull[hlen] = nxt
            hlen += 1
            nxt += 1
        if hlen == 0:
            continue
        lo = 0
        hi = hlen - 1
        while lo < hi:
            mid = (lo + hi) // 2
            a = hull[mid]
            b = hull[mid + 1]
            sa = (cov[j] - cov[a]) / (cnt[j] - cnt[a])
            sb = (cov[j] - cov[b]) / (cnt[j] - cnt[b])
            if sb <= sa:
                lo = mid + 1
            else:
                hi = mid
        a = hull[lo]
        s = (cov[j] - cov[a]) / (cnt[j] - cnt[a])
        if s < best:
            best = s
            bi = a
            bj = j
    return best, bi, bj


def _group_prefixes(t: np.ndarray, covered: np.ndarray):
    """Sort by projection value and merge ties into value groups."""
    order = np.argsort(t, kind="stable")
    ts = t[order]
    cs = covered[order]
    boundaries = np.empty(ts.shape[0], dtype=bool)
    boundaries[0] = True
    boundaries[1:] = ts[1:] > ts[:-1]
    starts = np.flatnonzero(boundaries)
    values = ts[starts]
    cnt = np.zeros(starts.shape[0] + 1, dtype=np.int64)
    cov = np.zeros(starts.shape[0] + 1, dtype=np.int64)
    counts = np.diff(np.append(starts, ts.shape[0]))
    cnt[1:] = np.cumsum(counts)
    csum = np.cumsum(cs)
    cov[1:] = csum[np.append(starts[1:], ts.shape[0]) - 1]
    return values, cnt, cov


def worst_slab(probe: SlabProbe, x, covered) -> SlabResult:
    """Lowest-coverage value window of the probe holding >= delta of the mass.

    Windows are closed value intervals [a, b]; points sharing a projection
    value always move together.
    """
    x = as_matrix(x, "features")
    covered = np.asarray(covered).astype(np.int64).ravel()
    n = x.shape[0]
    if covered.shape[0] != n:
        raise ShapeError("covered bits do not align with feature rows")
    if n == 0:
        raise ValueError("need at least one instance")
    min_count = math.ceil(probe.delta * n - 1e-9)
    if min_count < 1:
        raise ValueError(f"delta {probe.delta} selects no instances at n={n}")
    t = probe.project(x)
    values, cnt, cov = _group_prefixes(t, covered)
    coverage, i, j = _min_window(cnt, cov, min_count)
    if i < 0:
        raise ValueError("no feasible window; delta too large for the data")
    mass = (cnt[j] - cnt[i]) / n
    return SlabResult(
        a=float(values[i]),
        b=float(values[j - 1]),
        coverage=float(coverage),
        mass=float(mass),
    )


def draw_probe(d: int, kind: str, delta: float, rng: RngStream) -> SlabProbe:
    """One random probe: entries uniform on [-1, 1].

    Linear directions are normalized to unit length; quadratic probes are left
    unnormalized because window selection is scale invariant.
    """
    v = rng.uniform(size=d, low=-1.0, high=1.0)
    if kind == "linear":
        norm = float(np.linalg.norm(v))
        if norm < 1e-12:
            v = np.ones(d)
            norm = float(np.linalg.norm(v))
        return SlabProbe(kind="linear", v=v / norm, delta=delta)
    w = rng.uniform(size=(d, d), low=-1.0, high=1.0)
    return SlabProbe(kind="quadratic", v=v, w=w, delta=delta)


@dataclass(frozen=True)
class AuditResult:
    """Worst-slab coverages over a family of random probes."""

    min_coverage: float
    coverages: np.ndarray

    @property
    def n_probes(self) -> int:
        return self.coverages.shape[0]


def audit_bits(
    x, covered, delta: float, n_probes: int, kind: str, rng: RngStream
) -> AuditResult:
    """Worst-slab audit on precomputed coverage bits."""
    if n_probes < 1:
        raise ValueError("need at least one probe")
    x = as_matrix(x, "features")
    coverages = np.empty(n_probes)
    for p in range(n_probes):
        probe = draw_probe(x.shape[1], kind, delta, rng)
        coverages[p] = worst_slab(probe, x, covered).coverage
    return AuditResult(float(coverages.min()), coverages)


def wsc_audit(
    sets, labels, x, delta: float, n_probes: int, kind: str, rng: RngStream
) -> AuditResult:
    """Worst-slab audit of prediction sets against true labels."""
    return audit_bits(x, covered_bits(sets, labels), delta, n_probes, kind, rng)
