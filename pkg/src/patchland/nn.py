"""Fully-connected ReLU network with softmax output, trained by mini-batch backprop.

Also hosts the pieces shared with the CNN: activations, the loss, the
Adagrad/SGD update and the mini-batch training loop.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from patchland.errors import ConfigError, DataError, NumericalError

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 128
    epochs: int = 2000
    optimizer: str = "adagrad"
    adagrad_epsilon: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.optimizer not in ("adagrad", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class OptimizerState:
    accumulators: list[np.ndarray]

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray]) -> "OptimizerState":
        return cls([np.zeros_like(p) for p in params])


def relu(v):
    return np.maximum(v, 0)


def relu_grad(pre):
    # subgradient at exactly 0 is 0
    return (pre > 0).astype(pre.dtype)


def softmax(logits):
    z = np.asarray(logits)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(probs, true_class) -> float | np.ndarray:
    """-log p[true]; probabilities are floored at 1e-12."""
    probs = np.asarray(probs)
    if probs.ndim == 1:
        return float(-np.log(max(probs[true_class], PROB_FLOOR)))
    picked = probs[np.arange(probs.shape[0]), np.asarray(true_class)]
    return -np.log(np.maximum(picked, PROB_FLOOR))


def adagrad_step(params, grads, state: OptimizerState, lr: float, epsilon: float = 1e-8) -> None:
    """In-place Adagrad: acc += g^2; p -= lr * g / (sqrt(acc) + eps)."""
    for p, g, acc in zip(params, grads, state.accumulators):
        acc += g * g
        p -= (lr * g / (np.sqrt(acc) + epsilon)).astype(p.dtype)


def sgd_step(params, grads, lr: float) -> None:
    for p, g in zip(params, grads):
        p -= (lr * g).astype(p.dtype)


@dataclass
class TrainHistory:
    losses: list[float] = field(default_factory=list)
    steps: int = 0


def fit_minibatch(
    params: list[np.ndarray],
    loss_and_grads: Callable[[np.ndarray], tuple[float, list[np.ndarray]]],
    n: int,
    cfg: TrainConfig,
    max_steps: int | None = None,
) -> TrainHistory:
    """Generic seeded mini-batch loop shared by the MLP and the CNN.

    ``loss_and_grads(idx)`` returns the mean loss over the samples ``idx`` and
    the mean gradients, aligned with ``params``. The final short batch is
    kept. ``max_steps`` truncates training (used for smoke runs).
    """
    rng = np.random.default_rng([cfg.seed, 1])
    state = OptimizerState.zeros_like(params)
    hist = TrainHistory()
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        seen = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, grads = loss_and_grads(idx)
            if not np.isfinite(loss):
                raise NumericalError(f"non-finite loss at epoch {epoch}, step {hist.steps}")
            if cfg.optimizer == "adagrad":
                adagrad_step(params, grads, state, cfg.learning_rate, cfg.adagrad_epsilon)
            else:
                sgd_step(params, grads, cfg.learning_rate)
            total += loss * len(idx)
            seen += len(idx)
            hist.steps += 1
            if max_steps is not None and hist.steps >= max_steps:
                break
        hist.losses.append(total / seen)
        if max_steps is not None and hist.steps >= max_steps:
            break
    for p in params:
        if not np.all(np.isfinite(p)):
            raise NumericalError("training produced non-finite parameters")
    return hist


def argmax_lowest(probs: np.ndarray) -> np.ndarray:
    """Row-wise argmax; np.argmax already returns the first maximal index."""
    return np.argmax(probs, axis=-1)


# --- MLP --------------------------------------------------------------------


@dataclass
class MlpModel:
    """Dense layers ``W[i]`` of shape (fan_in, fan_out) with biases ``b[i]``."""

    layer_sizes: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    class_ids: tuple[int, ...] = ()

    def __post_init__(self):
        sizes = self.layer_sizes
        if len(self.weights) != len(sizes) - 1 or len(self.biases) != len(sizes) - 1:
            raise DataError("layer count does not match layer_sizes")
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.shape != (sizes[i], sizes[i + 1]) or b.shape != (sizes[i + 1],):
                raise DataError(f"layer {i} has shape {W.shape}/{b.shape}, expected {(sizes[i], sizes[i + 1])}")
        if not self.class_ids:
            self.class_ids = tuple(range(1, sizes[-1] + 1))

    @property
    def params(self) -> list[np.ndarray]:
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    @property
    def dtype(self):
        return self.weights[0].dtype

    def predict_proba(self, X) -> np.ndarray:
        return mlp_forward(self, X)[0]

    def predict_batch(self, X) -> np.ndarray:
        return np.asarray(self.class_ids, dtype=np.int64)[argmax_lowest(self.predict_proba(X))]

    def predict_patches(self, patches: np.ndarray) -> np.ndarray:
        return self.predict_batch(np.asarray(patches).reshape(len(patches), -1))

    def to_json(self) -> dict:
        return {
            "layer_sizes": list(self.layer_sizes),
            "class_ids": list(self.class_ids),
            "dtype": str(self.dtype),
            "weights": [W.tolist() for W in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "MlpModel":
        dt = np.dtype(doc.get("dtype", "float32"))
        sizes = tuple(int(s) for s in doc["layer_sizes"])
        weights = [np.array(W, dtype=dt).reshape(sizes[i], sizes[i + 1]) for i, W in enumerate(doc["weights"])]
        biases = [np.array(b, dtype=dt) for b in doc["biases"]]
        return cls(sizes, weights, biases, tuple(int(c) for c in doc["class_ids"]))


def he_uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def init_mlp(layer_sizes: Sequence[int], seed: int = 0, class_ids=(), dtype=np.float32) -> MlpModel:
    sizes = tuple(int(s) for s in layer_sizes)
    if len(sizes) < 2 or any(s < 1 for s in sizes):
        raise ConfigError(f"layer sizes must be >= 1 with at least input and output: {sizes}")
    rng = np.random.default_rng([seed, 0])
    weights = [he_uniform(rng, (sizes[i], sizes[i + 1]), sizes[i], dtype) for i in range(len(sizes) - 1)]
    biases = [np.zeros(sizes[i + 1], dtype=dtype) for i in range(len(sizes) - 1)]
    return MlpModel(sizes, weights, biases, tuple(class_ids))


@dataclass
class MlpCache:
    inputs: list[np.ndarray]  # input to each dense layer
    pre: list[np.ndarray]  # affine output of each dense layer
    probs: np.ndarray


def mlp_forward(m: MlpModel, x) -> tuple[np.ndarray, MlpCache]:
    """Forward pass for one vector or an (n, d) batch.

    Hidden layers are affine + ReLU, the last layer affine + softmax.
    """
    x = np.asarray(x, dtype=m.dtype)
    single = x.ndim == 1
    a = x[None, :] if single else x
    if a.shape[1] != m.layer_sizes[0]:
        raise DataError(f"input length {a.shape[1]} does not match {m.layer_sizes[0]}")
    inputs, pres = [], []
    last = len(m.weights) - 1
    for i, (W, b) in enumerate(zip(m.weights, m.biases)):
        inputs.append(a)
        z = a @ W + b
        pres.append(z)
        a = relu(z) if i < last else softmax(z)
    cache = MlpCache(inputs, pres, a)
    return (a[0] if single else a), cache


def mlp_backward(m: MlpModel, cache: MlpCache, true_class) -> list[np.ndarray]:
    """Gradients of mean cross-entropy, ordered like ``m.params``.

    ``true_class`` is an output index (0..K-1) or an array of them.
    """
    probs = cache.probs
    n = probs.shape[0]
    t = np.atleast_1d(np.asarray(true_class))
    delta = probs.copy()
    delta[np.arange(n), t] -= 1
    delta /= n
    grads: list[np.ndarray] = []
    for i in range(len(m.weights) - 1, -1, -1):
        a_in = cache.inputs[i]
        grads.append(delta.sum(axis=0))
        grads.append(a_in.T @ delta)
        if i > 0:
            delta = (delta @ m.weights[i].T) * relu_grad(cache.pre[i - 1])
    grads.reverse()
    # reversal yields [W0, b0, W1, b1, ...]
    return grads


def class_index(labels, class_ids) -> np.ndarray:
    lut = {c: i for i, c in enumerate(class_ids)}
    try:
        return np.array([lut[int(v)] for v in labels], dtype=np.int64)
    except KeyError as exc:
        raise DataError(f"label {exc.args[0]} not among class ids {tuple(class_ids)}") from None


def train_mlp(
    X,
    labels,
    hidden: Sequence[int],
    cfg: TrainConfig,
    class_ids=None,
    dtype=np.float32,
    max_steps: int | None = None,
) -> tuple[MlpModel, TrainHistory]:
    X = np.asarray(X, dtype=dtype)
    labels = np.asarray(labels)
    if X.ndim != 2 or X.shape[0] < 1:
        raise DataError("need a non-empty (n, d) feature matrix")
    if class_ids is None:
        class_ids = tuple(int(c) for c in np.unique(labels))
    if len(class_ids) < 2:
        raise DataError("training needs at least two classes")
    t = class_index(labels, class_ids)
    model = init_mlp((X.shape[1], *hidden, len(class_ids)), cfg.seed, class_ids, dtype)

    def loss_and_grads(idx):
        _, cache = mlp_forward(model, X[idx])
        loss = float(np.mean(cross_entropy(cache.probs, t[idx])))
        return loss, mlp_backward(model, cache, t[idx])

    hist = fit_minibatch(model.params, loss_and_grads, X.shape[0], cfg, max_steps)
    logger.info("MLP trained: %d steps, final loss %.4f", hist.steps, hist.losses[-1])
    return model, hist


def mlp_predict(m: MlpModel, x) -> int:
    return int(m.predict_batch(np.asarray(x)[None, :])[0])
