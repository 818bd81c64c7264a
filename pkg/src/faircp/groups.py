"""Learning low-coverage latent groups and building union prediction sets.

A stochastic encoder maps features to a Gaussian latent code; a sigmoid
decoder turns codes into group-membership probabilities, trained to minimize
the soft conditional coverage of the fuzzy group it defines, subject to a
minimum group-mass constraint enforced by Euclidean projection. A second
decoder reconstructs the input from the code so the learned group can be
interpreted in feature space. Sampled member subsets are then used to
recalibrate conformal thresholds, and final sets are unions over the sampled
groups plus the marginal set.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .conformal import (
    CalibratedPredictor,
    PredictionSet,
    aps_score_table,
    aps_scores,
    calibrate,
    union_sets,
)
from .errors import DataError, ShapeError, TrainingError
from .nnet import (
    SIGMA_MAX,
    SIGMA_MIN,
    Adam,
    Layer,
    Mlp,
    RngStream,
    as_matrix,
)

logger = logging.getLogger(__name__)

#: Groups smaller than this are skipped during recalibration; conformal
#: quantiles on fewer points are vacuous.
MIN_GROUP_SIZE = 10


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters for group learning.

    delta is the minimum fraction of the data the learned group must cover;
    beta weighs the compression (KL) term; n_group_samples is how many member
    subsets are drawn when building prediction sets.
    """

    delta: float = 0.3
    beta: float = 2.0
    epochs: int = 2000
    batch_size: int = 500
    learning_rate: float = 1e-3
    n_group_samples: int = 20
    latent_dim: int = 4
    hidden: tuple[int, int] = (64, 32)
    stage2_epochs: int | None = None
    # The compression weight ramps linearly from 0 to beta over this many
    # optimizer steps; starting at full strength collapses the code to the
    # prior before the coverage signal can shape it.
    kl_warmup_steps: int = 2000

    def __post_init__(self):
        if not 0.0 < self.delta < 1.0:
            raise ValueError(f"delta must be in (0,1), got {self.delta}")
        if self.beta < 0.0:
            raise ValueError("beta must be nonnegative")
        if min(self.epochs, self.batch_size, self.latent_dim) < 1:
            raise ValueError("epochs, batch_size, and latent_dim must be positive")
        if self.learning_rate <= 0.0:
            raise ValueError("learning_rate must be positive")
        if self.n_group_samples < 0:
            raise ValueError("n_group_samples must be nonnegative")
        if self.kl_warmup_steps < 0:
            raise ValueError("kl_warmup_steps must be nonnegative")

    @classmethod
    def synthetic(cls) -> "TrainConfig":
        return cls(delta=0.3, beta=2.0, epochs=2000, batch_size=500,
                   learning_rate=1e-3, n_group_samples=20)

    @classmethod
    def nursery(cls) -> "TrainConfig":
        return cls(delta=0.1, beta=0.1, epochs=800, batch_size=500,
                   learning_rate=1e-2, n_group_samples=100)


@dataclass
class GroupModel:
    """Encoder pair, membership decoder, and reconstruction decoder."""

    enc_mu: Mlp
    enc_logvar: Mlp
    member: Mlp
    recon: Mlp
    latent_dim: int
    config: TrainConfig | None = None

    @classmethod
    def init(cls, n_features: int, config: TrainConfig, rng: RngStream) -> "GroupModel":
        h1, h2 = config.hidden
        k = config.latent_dim
        return cls(
            enc_mu=Mlp.init((n_features, h1, h2, k), "identity", rng.child(0)),
            enc_logvar=Mlp.init((n_features, h1, h2, k), "identity", rng.child(1)),
            member=Mlp.init((k, h1, h2, 1), "sigmoid", rng.child(2)),
            recon=Mlp.init((k, h1, h2, n_features), "identity", rng.child(3)),
            latent_dim=k,
            config=config,
        )

    def encode(self, x) -> tuple[np.ndarray, np.ndarray]:
        """Latent mean and clamped standard deviation per row."""
        mu = self.enc_mu.forward(x)
        sigma = np.clip(np.exp(0.5 * self.enc_logvar.forward(x)), SIGMA_MIN, SIGMA_MAX)
        return mu, sigma

    def membership(self, z) -> np.ndarray:
        """Group-membership probability of latent codes, strictly inside (0,1)."""
        q = self.member.forward(z)
        q = q if q.ndim == 0 else q.reshape(np.asarray(z).shape[0] if np.asarray(z).ndim == 2 else -1)
        return np.clip(q, 1e-12, 1.0 - 1e-12)

    def membership_from_features(self, x) -> np.ndarray:
        """Membership probabilities through the latent mean (no sampling noise)."""
        mu = self.enc_mu.forward(as_matrix(x, "features"))
        return np.clip(self.member.forward(mu).ravel(), 1e-12, 1.0 - 1e-12)

    def reconstruct(self, z) -> np.ndarray:
        return self.recon.forward(z)

    def copy(self) -> "GroupModel":
        return GroupModel(
            self.enc_mu.copy(), self.enc_logvar.copy(), self.member.copy(),
            self.recon.copy(), self.latent_dim, self.config,
        )


def coverage_loss(q, covered) -> float:
    """Soft conditional coverage of the fuzzy group: sum(q*c) / sum(q)."""
    loss, _ = coverage_loss_grad(q, covered)
    return loss


def coverage_loss_grad(
    q, covered, mass_floor: float = 0.0
) -> tuple[float, np.ndarray]:
    """Soft conditional coverage and its gradient in the membership weights.

    mass_floor clips the denominator from below. During training it is set to
    the constraint level delta*N: the objective is only meaningful on the
    feasible set, and without the floor a shrinking membership mass is
    rewarded for hiding covered points rather than finding uncovered ones.
    """
    q = np.asarray(q, dtype=np.float64).ravel()
    c = np.asarray(covered, dtype=np.float64).ravel()
    if q.shape != c.shape:
        raise ShapeError(f"membership shape {q.shape} != covered shape {c.shape}")
    total = float(q.sum())
    if total <= 0.0:
        raise ValueError("membership weights sum to zero")
    hits = float((q * c).sum())
    if total >= mass_floor:
        loss = hits / total
        return loss, (c - loss) / total
    loss = hits / mass_floor
    return loss, c / mass_floor


def project_min_mass(q, delta: float, n: int | None = None) -> np.ndarray:
    """Euclidean projection of q onto {v in [0,1]^N : sum(v) >= delta*N}.

    Unchanged when the constraint already holds. Otherwise each coordinate is
    lifted by a common amount and clamped at one; the clamp count is found by
    traversing candidate counts from N-1 down to 0 and the result lands on the
    constraint boundary exactly.
    """
    q = np.asarray(q, dtype=np.float64).ravel()
    if np.any(q < -1e-12) or np.any(q > 1.0 + 1e-12):
        raise ValueError("membership values must lie in [0,1]")
    q = np.clip(q, 0.0, 1.0)
    size = q.shape[0]
    if n is None:
        n = size
    target = delta * n
    if target > size + 1e-9:
        raise ValueError(f"infeasible constraint: delta*N={target} exceeds N={size}")
    if q.sum() >= target - 1e-12:
        return q.copy()
    qs = np.sort(q)[::-1]
    tails = np.concatenate([np.cumsum(qs[::-1])[::-1], [0.0]])  # tails[k] = sum qs[k:]
    for k in range(size - 1, -1, -1):
        omega = 2.0 * (target - k - tails[k]) / (size - k)
        if omega < 0.0:
            continue
        if k > 0 and qs[k - 1] + omega / 2.0 < 1.0:
            continue
        if qs[k] + omega / 2.0 >= 1.0:
            continue
        return np.minimum(1.0, q + omega / 2.0)
    return np.ones_like(q)  # only reachable when target == N


def _loss_terms(
    model: GroupModel,
    x: np.ndarray,
    covered: np.ndarray,
    beta: float,
    eps: np.ndarray,
    with_coverage: bool,
    with_recon: bool,
    with_kl: bool,
    mass_floor: float = 0.0,
):
    """Forward and backward pass of the selected objective terms.

    Returns (total, parts, grads) where grads holds per-network Layer lists
    for exactly the networks the selected terms touch.
    """
    x = as_matrix(x, "batch")
    c = np.asarray(covered, dtype=np.float64).ravel()
    if c.shape[0] != x.shape[0]:
        raise ShapeError("covered bits do not align with batch rows")
    if eps.shape != (x.shape[0], model.latent_dim):
        raise ShapeError(f"noise shape {eps.shape} != {(x.shape[0], model.latent_dim)}")

    mu = model.enc_mu.forward(x)
    logvar = model.enc_logvar.forward(x)
    sigma_raw = np.exp(0.5 * logvar)
    sigma = np.clip(sigma_raw, SIGMA_MIN, SIGMA_MAX)
    z = mu + sigma * eps

    n = x.shape[0]
    parts: dict[str, float] = {}
    grads: dict[str, list[Layer]] = {}
    dz = np.zeros_like(z)
    total = 0.0

    if with_coverage:
        q = np.clip(model.member.forward(z).ravel(), 1e-12, 1.0 - 1e-12)
        lcc, dq = coverage_loss_grad(q, c, mass_floor)
        member_grads, dz_m = model.member.backprop(z, dq[:, None])
        grads["member"] = member_grads
        dz = dz + dz_m
        parts["coverage"] = lcc
        total += lcc
    if with_recon:
        xhat = model.recon.forward(z)
        diff = xhat - x
        lmse = float((diff * diff).mean())
        recon_grads, dz_r = model.recon.backprop(z, 2.0 * diff / diff.size)
        grads["recon"] = recon_grads
        dz = dz + dz_r
        parts["reconstruction"] = lmse
        total += lmse

    dmu = dz.copy()
    dsigma = dz * eps
    lkl = float(0.5 * np.sum(mu * mu + sigma * sigma - 1.0 - 2.0 * np.log(sigma)) / n)
    parts["kl"] = lkl
    if with_kl:
        total += beta * lkl
        dmu += beta * mu / n
        dsigma += beta * (sigma - 1.0 / sigma) / n
    inside = (sigma_raw > SIGMA_MIN) & (sigma_raw < SIGMA_MAX)
    dlogvar = np.where(inside, dsigma * 0.5 * sigma_raw, 0.0)
    grads["enc_mu"], _ = model.enc_mu.backprop(x, dmu)
    grads["enc_logvar"], _ = model.enc_logvar.backprop(x, dlogvar)
    return total, parts, grads


def combined_loss(
    model: GroupModel, x, covered, beta: float, eps: np.ndarray
) -> tuple[float, dict[str, float]]:
    """Full objective: coverage + reconstruction + beta * KL, on given noise."""
    total, parts, _ = _loss_terms(
        model, np.asarray(x, dtype=np.float64), covered, beta, eps,
        with_coverage=True, with_recon=True, with_kl=True,
    )
    return total, parts


def combined_loss_grads(model: GroupModel, x, covered, beta: float, eps: np.ndarray):
    """Full objective with per-network gradients (for tests and diagnostics)."""
    return _loss_terms(
        model, np.asarray(x, dtype=np.float64), covered, beta, eps,
        with_coverage=True, with_recon=True, with_kl=True,
    )


def _solve_bias_shift(logits: np.ndarray, target_mean: float) -> float:
    """Additive logit shift making the mean sigmoid equal target_mean."""

    def mean_at(shift: float) -> float:
        shifted = logits + shift
        out = np.empty_like(shifted)
        pos = shifted >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-shifted[pos]))
        e = np.exp(shifted[~pos])
        out[~pos] = e / (1.0 + e)
        return float(out.mean())

    lo, hi = 0.0, 1.0
    while mean_at(hi) < target_mean and hi < 1e6:
        hi *= 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mean_at(mid) < target_mean:
            lo = mid
        else:
            hi = mid
    return hi


@dataclass
class TrainResult:
    """Trained model plus the trajectories needed for diagnostics."""

    model: GroupModel
    stage1_losses: np.ndarray
    stage2_losses: np.ndarray
    val_history: list[tuple[int, float, float]]  # (epoch, val coverage, val mean q)
    best_epoch: int
    best_val_coverage: float
    constraint_met: bool


def train_group_model(
    x_train,
    covered_train,
    x_val,
    covered_val,
    config: TrainConfig,
    rng: RngStream,
) -> TrainResult:
    """Two-stage training of the group model.

    Stage one fits the encoder and membership decoder on the coverage and KL
    terms; after every optimizer step, if the mean membership over the whole
    training half has fallen below delta, the membership probabilities are
    projected back onto the mass constraint and the projection is realized as
    a shift of the decoder's output bias. Stage two fits the reconstruction
    decoder on frozen codes. The returned model carries the stage-one
    checkpoint with the lowest validation coverage among those meeting the
    mass constraint on the validation half.
    """
    x_train = as_matrix(x_train, "training features")
    x_val = as_matrix(x_val, "validation features")
    c_train = np.asarray(covered_train, dtype=np.float64).ravel()
    c_val = np.asarray(covered_val, dtype=np.float64).ravel()
    if c_train.shape[0] != x_train.shape[0] or c_val.shape[0] != x_val.shape[0]:
        raise ShapeError("covered bits do not align with features")

    model = GroupModel.init(x_train.shape[1], config, rng.child(0))
    eps_rng = rng.child(1)
    shuffle_rng = rng.child(2)
    stage2_eps_rng = rng.child(3)
    stage2_shuffle_rng = rng.child(4)

    opts = {
        "enc_mu": Adam.for_mlp(model.enc_mu, config.learning_rate),
        "enc_logvar": Adam.for_mlp(model.enc_logvar, config.learning_rate),
        "member": Adam.for_mlp(model.member, config.learning_rate),
    }
    nets = {"enc_mu": model.enc_mu, "enc_logvar": model.enc_logvar, "member": model.member}

    n = x_train.shape[0]
    stage1_losses: list[float] = []
    val_history: list[tuple[int, float, float]] = []
    best_constrained: tuple[float, int, GroupModel] | None = None
    best_any: tuple[float, int, GroupModel] | None = None

    def _shift_for(logits: np.ndarray) -> float:
        """Bias shift restoring the projected mean membership, if any needed."""
        q = 1.0 / (1.0 + np.exp(-np.clip(logits, -500.0, 500.0)))
        if q.mean() >= config.delta - 1e-12:
            return 0.0
        projected = project_min_mass(q, config.delta)
        return _solve_bias_shift(logits, float(projected.mean()))

    step = 0
    for epoch in range(config.epochs):
        perm = shuffle_rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = perm[start : start + config.batch_size]
            eps = eps_rng.normal((idx.shape[0], config.latent_dim))
            if config.kl_warmup_steps > 0:
                beta_t = config.beta * min(1.0, step / config.kl_warmup_steps)
            else:
                beta_t = config.beta
            loss, parts, grads = _loss_terms(
                model, x_train[idx], c_train[idx], beta_t, eps,
                with_coverage=True, with_recon=False, with_kl=True,
                mass_floor=config.delta * idx.shape[0],
            )
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite stage-1 loss at epoch {epoch}")
            for name, opt in opts.items():
                opt.step(nets[name], grads[name])
            # Record the objective at the configured weight, not the ramped one.
            stage1_losses.append(parts["coverage"] + config.beta * parts["kl"])
            step += 1

            # Constraint pass: project the memberships back onto the mass
            # constraint, realized as a shift of the decoder output bias. The
            # shift covers both the sampled memberships the loss saw and the
            # mean-encoding memberships used for grouping.
            mu_b, sigma_b = model.encode(x_train[idx])
            sampled_logits = model.member.forward_preact(mu_b + sigma_b * eps).ravel()
            mean_logits = model.member.forward_preact(
                model.enc_mu.forward(x_train)
            ).ravel()
            shift = max(_shift_for(sampled_logits), _shift_for(mean_logits))
            if shift > 0.0:
                model.member.layers[-1].b += shift

        q_val = model.membership_from_features(x_val)
        val_cc = coverage_loss(q_val, c_val)
        val_mean = float(q_val.mean())
        val_history.append((epoch, val_cc, val_mean))
        if best_any is None or val_cc < best_any[0]:
            best_any = (val_cc, epoch, model.copy())
        if val_mean >= config.delta - 1e-9:
            if best_constrained is None or val_cc < best_constrained[0]:
                best_constrained = (val_cc, epoch, model.copy())

    if best_constrained is not None:
        best_val, best_epoch, best_model = best_constrained
        constraint_met = True
    else:
        logger.warning(
            "no stage-1 checkpoint met the mass constraint on the validation "
            "half; using the lowest-coverage checkpoint instead"
        )
        best_val, best_epoch, best_model = best_any  # type: ignore[misc]
        constraint_met = False
    model = best_model

    # Stage two: reconstruction decoder on frozen codes.
    recon_opt = Adam.for_mlp(model.recon, config.learning_rate)
    stage2_epochs = config.stage2_epochs if config.stage2_epochs is not None else config.epochs
    stage2_losses: list[float] = []
    for epoch in range(stage2_epochs):
        perm = stage2_shuffle_rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = perm[start : start + config.batch_size]
            eps = stage2_eps_rng.normal((idx.shape[0], config.latent_dim))
            loss, _, grads = _loss_terms(
                model, x_train[idx], c_train[idx], config.beta, eps,
                with_coverage=False, with_recon=True, with_kl=False,
            )
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite stage-2 loss at epoch {epoch}")
            recon_opt.step(model.recon, grads["recon"])
            stage2_losses.append(loss)

    return TrainResult(
        model=model,
        stage1_losses=np.asarray(stage1_losses),
        stage2_losses=np.asarray(stage2_losses),
        val_history=val_history,
        best_epoch=best_epoch,
        best_val_coverage=best_val,
        constraint_met=constraint_met,
    )


@dataclass(frozen=True)
class GroupSample:
    """One realized membership draw over the calibration set."""

    bits: np.ndarray
    indices: np.ndarray

    @classmethod
    def from_bits(cls, bits: np.ndarray) -> "GroupSample":
        bits = np.asarray(bits, dtype=np.int64)
        return cls(bits=bits, indices=np.flatnonzero(bits))

    @property
    def size(self) -> int:
        return int(self.indices.shape[0])


def sample_groups(model: GroupModel, x, n_samples: int, rng: RngStream):
    """Draw member subsets: independent Bernoulli per instance, mean encoding."""
    q = model.membership_from_features(x)
    return [GroupSample.from_bits(rng.bernoulli(q)) for _ in range(n_samples)]


@dataclass
class UnionPrediction:
    """Union prediction sets plus the calibration artifacts behind them."""

    sets: list[PredictionSet]
    marginal: CalibratedPredictor
    groups: list[GroupSample]
    group_predictors: list[CalibratedPredictor]
    skipped_groups: int


def predict_union_sets(
    model: GroupModel,
    calib_x,
    calib_probs,
    calib_labels,
    test_probs,
    alpha: float,
    n_samples: int,
    rng: RngStream,
    min_group_size: int = MIN_GROUP_SIZE,
) -> UnionPrediction:
    """Marginal set unioned with recalibrated sets over sampled member groups.

    Groups below min_group_size are skipped with a warning. With zero samples
    the output reduces to the plain marginal sets.
    """
    calib_probs = as_matrix(calib_probs, "calibration probabilities")
    test_probs = as_matrix(test_probs, "test probabilities")
    u_cal = rng.uniform(size=calib_probs.shape[0])
    u_test = rng.uniform(size=test_probs.shape[0])
    scores = aps_scores(calib_probs, np.asarray(calib_labels), u_cal)
    marginal = calibrate(scores, alpha)
    table = aps_score_table(test_probs, u_test)
    marginal_sets = [
        frozenset(np.flatnonzero(row <= marginal.threshold).tolist()) for row in table
    ]

    groups = sample_groups(model, calib_x, n_samples, rng)
    retained: list[GroupSample] = []
    predictors: list[CalibratedPredictor] = []
    skipped = 0
    for sample in groups:
        if sample.size < min_group_size:
            skipped += 1
            logger.warning(
                "skipping sampled group with %d members (< %d)",
                sample.size,
                min_group_size,
            )
            continue
        retained.append(sample)
        predictors.append(calibrate(scores[sample.indices], alpha))

    sets = []
    for i, base in enumerate(marginal_sets):
        per_group = [
            frozenset(np.flatnonzero(table[i] <= pred.threshold).tolist())
            for pred in predictors
        ]
        sets.append(union_sets([base, *per_group]))
    return UnionPrediction(
        sets=sets,
        marginal=marginal,
        groups=retained,
        group_predictors=predictors,
        skipped_groups=skipped,
    )


def holdout_group_coverage(
    model: GroupModel,
    union: UnionPrediction,
    test_x,
    test_probs,
    test_labels,
    rng: RngStream,
) -> tuple[np.ndarray, np.ndarray]:
    """Coverage of each retained group's own set on held-out group members.

    Test-instance membership is drawn with the same Bernoulli rule used on
    the calibration set, so members are exchangeable with the group that set
    was calibrated on. Returns (coverages, calibration group sizes) over the
    retained groups; groups with no sampled test members are skipped.
    """
    test_x = as_matrix(test_x, "test features")
    test_probs = as_matrix(test_probs, "test probabilities")
    labels = np.asarray(test_labels)
    q = model.membership_from_features(test_x)
    u = rng.uniform(size=test_probs.shape[0])
    scores = aps_scores(test_probs, labels, u)
    coverages, sizes = [], []
    for sample, predictor in zip(union.groups, union.group_predictors):
        members = np.flatnonzero(rng.bernoulli(q))
        if members.size == 0:
            continue
        coverages.append(float((scores[members] <= predictor.threshold).mean()))
        sizes.append(sample.size)
    return np.asarray(coverages), np.asarray(sizes, dtype=np.int64)


def attribute_features(
    model: GroupModel, x_ref, epsilon: float = 1e-3, top_k: int = 2
) -> np.ndarray:
    """Rank input features by how much the membership-critical latent axis moves them.

    The latent dimension whose +/- epsilon perturbation changes the mean
    membership most is perturbed, and features are ranked by the mean absolute
    change of their reconstruction relative to their base magnitude.
    """
    if epsilon <= 0.0:
        raise ValueError("epsilon must be positive")
    x_ref = as_matrix(x_ref, "reference data")
    mu = model.enc_mu.forward(x_ref)
    influence = np.empty(model.latent_dim)
    for j in range(model.latent_dim):
        plus = mu.copy()
        plus[:, j] += epsilon
        minus = mu.copy()
        minus[:, j] -= epsilon
        influence[j] = abs(
            float(model.membership(plus).mean()) - float(model.membership(minus).mean())
        )
    top_axis = int(np.argmax(influence))
    base = model.reconstruct(mu)
    shifted = mu.copy()
    shifted[:, top_axis] += epsilon
    moved = model.reconstruct(shifted)
    change = np.abs(moved - base).mean(axis=0)
    scale = np.abs(base).mean(axis=0) + 1e-12
    ratio = change / scale
    order = np.argsort(-ratio, kind="stable")
    return order[:top_k]


# ---------------------------------------------------------------------------
# The full method pipeline on one calibration set
# ---------------------------------------------------------------------------


@dataclass
class LatentMethodResult:
    """Everything the latent-group method produced for one run."""

    sets: list[PredictionSet]
    train_result: TrainResult
    union: UnionPrediction
    train_indices: np.ndarray
    val_indices: np.ndarray


def latent_cp(
    calib_x,
    calib_probs,
    calib_labels,
    test_probs,
    alpha: float,
    config: TrainConfig,
    rng: RngStream,
) -> LatentMethodResult:
    """End-to-end latent-group method on one calibration/test split.

    The calibration set is split in half; coverage bits are computed once from
    a threshold calibrated on the first half, the group model is trained on
    that half with the second half for model selection, and union sets are
    built over groups sampled from the whole calibration set.
    """
    calib_x = as_matrix(calib_x, "calibration features")
    calib_probs = as_matrix(calib_probs, "calibration probabilities")
    calib_labels = np.asarray(calib_labels)
    n = calib_x.shape[0]
    if n < 4:
        raise DataError("calibration set too small to split")
    perm = rng.child(0).permutation(n)
    half = n // 2
    tr_idx, val_idx = perm[:half], perm[half:]

    bits_rng = rng.child(1)
    u_tr = bits_rng.uniform(size=tr_idx.shape[0])
    u_val = bits_rng.uniform(size=val_idx.shape[0])
    scores_tr = aps_scores(calib_probs[tr_idx], calib_labels[tr_idx], u_tr)
    predictor = calibrate(scores_tr, alpha)
    c_tr = (scores_tr <= predictor.threshold).astype(np.int64)
    scores_val = aps_scores(calib_probs[val_idx], calib_labels[val_idx], u_val)
    c_val = (scores_val <= predictor.threshold).astype(np.int64)

    result = train_group_model(
        calib_x[tr_idx], c_tr, calib_x[val_idx], c_val, config, rng.child(2)
    )
    union = predict_union_sets(
        result.model,
        calib_x,
        calib_probs,
        calib_labels,
        test_probs,
        alpha,
        config.n_group_samples,
        rng.child(3),
    )
    return LatentMethodResult(
        sets=union.sets,
        train_result=result,
        union=union,
        train_indices=tr_idx,
        val_indices=val_idx,
    )


# ---------------------------------------------------------------------------
# Serialization: flat text, hex-encoded doubles, bit-exact round trip
# ---------------------------------------------------------------------------

MODEL_SCHEMA = "faircp-group-model/1"
_NET_NAMES = ("enc_mu", "enc_logvar", "member", "recon")


def _write_mlp(handle, name: str, mlp: Mlp) -> None:
    handle.write(f"net {name} {mlp.head} {len(mlp.layers)}\n")
    for layer in mlp.layers:
        rows, cols = layer.w.shape
        handle.write(f"layer {rows} {cols}\n")
        handle.write(" ".join(v.hex() for v in layer.w.ravel()) + "\n")
        handle.write(" ".join(v.hex() for v in layer.b) + "\n")


def save_group_model(model: GroupModel, path: str) -> None:
    """Write the model as versioned flat text with hex-encoded weights."""
    with open(path, "w", encoding="ascii", newline="\n") as handle:
        handle.write(MODEL_SCHEMA + "\n")
        handle.write(f"latent_dim {model.latent_dim}\n")
        for name in _NET_NAMES:
            _write_mlp(handle, name, getattr(model, name))


def load_group_model(path: str) -> GroupModel:
    """Inverse of save_group_model."""
    with open(path, "r", encoding="ascii") as handle:
        lines = [line.rstrip("\n") for line in handle]
    pos = 0

    def take() -> str:
        nonlocal pos
        if pos >= len(lines):
            raise DataError(f"{path}: truncated model file")
        line = lines[pos]
        pos += 1
        return line

    if take() != MODEL_SCHEMA:
        raise DataError(f"{path}: unsupported model schema")
    head_line = take().split()
    if len(head_line) != 2 or head_line[0] != "latent_dim":
        raise DataError(f"{path}: missing latent_dim")
    latent_dim = int(head_line[1])

    nets: dict[str, Mlp] = {}
    for expected in _NET_NAMES:
        tag, name, head, depth = take().split()
        if tag != "net" or name != expected:
            raise DataError(f"{path}: expected net {expected}, found {name!r}")
        layers = []
        for _ in range(int(depth)):
            _, rows, cols = take().split()
            rows, cols = int(rows), int(cols)
            w = np.array([float.fromhex(tok) for tok in take().split()])
            b = np.array([float.fromhex(tok) for tok in take().split()])
            if w.size != rows * cols or b.size != cols:
                raise DataError(f"{path}: layer size mismatch in {name}")
            layers.append(Layer(w.reshape(rows, cols), b))
        nets[name] = Mlp(layers, head)
    return GroupModel(
        enc_mu=nets["enc_mu"],
        enc_logvar=nets["enc_logvar"],
        member=nets["member"],
        recon=nets["recon"],
        latent_dim=latent_dim,
        config=None,
    )
