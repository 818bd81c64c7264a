"""Deterministic numeric core: seeded randomness and a small dense network engine.

Everything is float64 numpy. Networks are plain weight/bias layer lists with a
rectifier between hidden layers and a configurable output head; forward and
backward passes are written out by hand so that training is bit-reproducible
for a fixed seed and gradients can be checked against finite differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError, TrainingError

HEADS = ("identity", "softplus", "sigmoid", "softmax")

# Standard-deviation clamp used wherever a network parameterizes a Gaussian
# through its log-variance. Keeps the KL term finite.
SIGMA_MIN = 1e-6
SIGMA_MAX = 1e3


class RngStream:
    """Seeded random stream with reproducible, platform-stable draws.

    A stream is identified by its seed plus a key path; ``child(tag)`` derives
    an independent stream, so parallel consumers never share state.
    """

    def __init__(self, seed: int, _key: tuple[int, ...] = ()):
        self.seed = int(seed)
        self._key = tuple(int(k) for k in _key)
        self._gen = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence((self.seed, *self._key)))
        )
        self.n_draws = 0

    def child(self, tag: int) -> "RngStream":
        """Independent stream derived from this one; does not consume draws."""
        return RngStream(self.seed, self._key + (int(tag),))

    def uniform(self, size=None, low: float = 0.0, high: float = 1.0):
        self.n_draws += 1
        return self._gen.uniform(low, high, size)

    def normal(self, size=None):
        self.n_draws += 1
        return self._gen.standard_normal(size)

    def bernoulli(self, p, size=None):
        """Draw 0/1 with success probability p (scalar or array)."""
        self.n_draws += 1
        p = np.asarray(p, dtype=float)
        if size is None:
            size = p.shape
        return (self._gen.random(size) < p).astype(np.int64)

    def integers(self, low: int, high: int, size=None):
        self.n_draws += 1
        return self._gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        self.n_draws += 1
        return self._gen.permutation(n)

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"RngStream(seed={self.seed}, key={self._key}, draws={self.n_draws})"


def as_matrix(x, name: str = "input") -> np.ndarray:
    """Coerce to a 2-D float64 array, raising ShapeError otherwise."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    return arr


@dataclass
class Layer:
    """One dense layer: output = input @ w + b."""

    w: np.ndarray  # (fan_in, fan_out)
    b: np.ndarray  # (fan_out,)

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        if self.w.ndim != 2 or self.b.ndim != 1 or self.b.shape[0] != self.w.shape[1]:
            raise ShapeError(
                f"layer weight {self.w.shape} incompatible with bias {self.b.shape}"
            )


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _head_forward(z: np.ndarray, head: str) -> np.ndarray:
    if head == "identity":
        return z
    if head == "softplus":
        return np.logaddexp(0.0, z)
    if head == "sigmoid":
        return _sigmoid(z)
    if head == "softmax":
        return _softmax(z)
    raise ValueError(f"unknown head {head!r}")


def _head_backward(z: np.ndarray, y: np.ndarray, dy: np.ndarray, head: str) -> np.ndarray:
    """Gradient w.r.t. pre-head activations given dL/dy."""
    if head == "identity":
        return dy
    if head == "softplus":
        return dy * _sigmoid(z)
    if head == "sigmoid":
        return dy * y * (1.0 - y)
    if head == "softmax":
        inner = (dy * y).sum(axis=1, keepdims=True)
        return y * (dy - inner)
    raise ValueError(f"unknown head {head!r}")


class Mlp:
    """Small fully connected network: rectifier hidden layers, configurable head."""

    def __init__(self, layers: list[Layer], head: str = "identity"):
        if not layers:
            raise ShapeError("network needs at least one layer")
        if head not in HEADS:
            raise ValueError(f"head must be one of {HEADS}, got {head!r}")
        for prev, nxt in zip(layers, layers[1:]):
            if prev.w.shape[1] != nxt.w.shape[0]:
                raise ShapeError(
                    f"layer widths do not chain: {prev.w.shape} -> {nxt.w.shape}"
                )
        self.layers = layers
        self.head = head

    @classmethod
    def init(cls, sizes, head: str, rng: RngStream) -> "Mlp":
        """Fan-in scaled uniform initialization U(-1/sqrt(fan_in), +1/sqrt(fan_in))."""
        layers = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = 1.0 / math.sqrt(fan_in)
            w = rng.uniform(size=(fan_in, fan_out), low=-bound, high=bound)
            b = rng.uniform(size=(fan_out,), low=-bound, high=bound)
            layers.append(Layer(w, b))
        return cls(layers, head)

    @property
    def in_dim(self) -> int:
        return self.layers[0].w.shape[0]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].w.shape[1]

    def copy(self) -> "Mlp":
        return Mlp([Layer(l.w.copy(), l.b.copy()) for l in self.layers], self.head)

    def _trace(self, x: np.ndarray):
        """Forward pass keeping pre-activations and activations for backprop."""
        pres, acts = [], [x]
        h = x
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            z = h @ layer.w + layer.b
            pres.append(z)
            h = _head_forward(z, self.head) if i == last else np.maximum(z, 0.0)
            acts.append(h)
        return pres, acts

    def forward(self, x) -> np.ndarray:
        """Final-layer activations for a batch (rows are samples)."""
        single = np.asarray(x).ndim == 1
        batch = as_matrix([x] if single else x, "batch")
        if batch.shape[1] != self.in_dim:
            raise ShapeError(
                f"batch width {batch.shape[1]} != network input width {self.in_dim}"
            )
        out = self._trace(batch)[1][-1]
        return out[0] if single else out

    def forward_preact(self, x) -> np.ndarray:
        """Final-layer pre-head values (e.g. logits for a sigmoid/softmax head)."""
        single = np.asarray(x).ndim == 1
        batch = as_matrix([x] if single else x, "batch")
        if batch.shape[1] != self.in_dim:
            raise ShapeError(
                f"batch width {batch.shape[1]} != network input width {self.in_dim}"
            )
        out = self._trace(batch)[0][-1]
        return out[0] if single else out

    def backprop(self, x, upstream) -> tuple[list[Layer], np.ndarray]:
        """Exact gradients of sum(upstream * output) w.r.t. parameters and input.

        Returns ([Layer(dw, db) per layer], d_input).
        """
        batch = as_matrix(x, "batch")
        up = as_matrix(upstream, "upstream gradient")
        pres, acts = self._trace(batch)
        if up.shape != acts[-1].shape:
            raise ShapeError(
                f"upstream shape {up.shape} != output shape {acts[-1].shape}"
            )
        grads: list[Layer] = [None] * len(self.layers)  # type: ignore[list-item]
        dz = _head_backward(pres[-1], acts[-1], up, self.head)
        for i in range(len(self.layers) - 1, -1, -1):
            grads[i] = Layer(acts[i].T @ dz, dz.sum(axis=0))
            if i > 0:
                dh = dz @ self.layers[i].w.T
                dz = dh * (pres[i - 1] > 0.0)
            else:
                d_input = dz @ self.layers[0].w.T
        return grads, d_input


@dataclass
class Adam:
    """Adam optimizer state bound to one network's parameter shapes."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list[Layer] = field(default_factory=list)
    v: list[Layer] = field(default_factory=list)

    @classmethod
    def for_mlp(cls, mlp: Mlp, lr: float = 1e-3) -> "Adam":
        zeros = lambda: [Layer(np.zeros_like(l.w), np.zeros_like(l.b)) for l in mlp.layers]
        return cls(lr=lr, m=zeros(), v=zeros())

    def step(self, mlp: Mlp, grads: list[Layer]) -> None:
        """In-place bias-corrected Adam update; rejects non-finite gradients."""
        if len(grads) != len(mlp.layers):
            raise ShapeError("gradient list length does not match network depth")
        for i, g in enumerate(grads):
            if not (np.isfinite(g.w).all() and np.isfinite(g.b).all()):
                raise TrainingError(f"non-finite gradient in layer {i}")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for layer, g, m, v in zip(mlp.layers, grads, self.m, self.v):
            for attr in ("w", "b"):
                gv = getattr(g, attr)
                mv = getattr(m, attr)
                vv = getattr(v, attr)
                mv *= self.beta1
                mv += (1.0 - self.beta1) * gv
                vv *= self.beta2
                vv += (1.0 - self.beta2) * gv * gv
                update = (mv / c1) / (np.sqrt(vv / c2) + self.eps)
                getattr(layer, attr)[...] -= self.lr * update


def gaussian_kl(mu, sigma) -> float:
    """KL divergence of N(mu, diag(sigma^2)) from the standard normal.

    Closed form: 0.5 * sum(mu^2 + sigma^2 - 1 - 2 log sigma). Nonnegative,
    zero exactly at (mu, sigma) = (0, 1).
    """
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    if mu.shape != sigma.shape:
        raise ShapeError(f"mu shape {mu.shape} != sigma shape {sigma.shape}")
    if np.any(sigma <= 0.0):
        raise ValueError("sigma entries must be positive")
    return float(0.5 * np.sum(mu * mu + sigma * sigma - 1.0 - 2.0 * np.log(sigma)))


def gaussian_kl_grad(mu, sigma) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of gaussian_kl w.r.t. mu and sigma."""
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma <= 0.0):
        raise ValueError("sigma entries must be positive")
    return mu.copy(), sigma - 1.0 / sigma


def reparam_sample(mu, sigma, rng: RngStream) -> np.ndarray:
    """Draw mu + sigma * eps with eps standard normal from the stream.

    Gradients flow through mu and sigma only; eps is exogenous noise.
    """
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    if mu.shape != sigma.shape:
        raise ShapeError(f"mu shape {mu.shape} != sigma shape {sigma.shape}")
    return mu + np.maximum(sigma, SIGMA_MIN) * rng.normal(mu.shape)


def cross_entropy(probs: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood and its gradient w.r.t. the probabilities."""
    probs = as_matrix(probs, "probabilities")
    labels = np.asarray(labels)
    n = probs.shape[0]
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} incompatible with {probs.shape}")
    picked = np.clip(probs[np.arange(n), labels], 1e-12, None)
    loss = float(-np.log(picked).mean())
    dprobs = np.zeros_like(probs)
    dprobs[np.arange(n), labels] = -1.0 / (picked * n)
    return loss, dprobs


def flatten_params(mlps) -> list[np.ndarray]:
    """All parameter arrays of one or more networks, in a fixed order."""
    arrays = []
    for mlp in mlps:
        for layer in mlp.layers:
            arrays.extend([layer.w, layer.b])
    return arrays


def grad_check(loss_fn, params: list[np.ndarray], h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    loss_fn(params) must return (scalar loss, [gradient array per param]).
    Parameters are perturbed in place and restored.
    """
    _, grads = loss_fn(params)
    worst = 0.0
    for arr, grad in zip(params, grads):
        flat = arr.reshape(-1)
        gflat = np.asarray(grad).reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + h
            up, _ = loss_fn(params)
            flat[idx] = orig - h
            down, _ = loss_fn(params)
            flat[idx] = orig
            fd = (up - down) / (2.0 * h)
            err = abs(gflat[idx] - fd) / max(1e-8, abs(fd))
            worst = max(worst, err)
    return worst
