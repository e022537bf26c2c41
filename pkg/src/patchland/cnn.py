"""Two-block 2D convolutional network for patch classification.

Layout is channels-last throughout: tensors are (n, H, W, C) batches.
Convolutions are zero-padded "same" cross-correlations with stride 1, each
followed by ReLU and a 2x2/stride-2 max-pool. The pool is an identity when a
spatial side is below 2. After flattening in [row][col][channel] order come
dense ReLU layers and a softmax output.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from patchland.errors import ConfigError, DataError
from patchland.nn import (
    TrainConfig,
    TrainHistory,
    argmax_lowest,
    class_index,
    cross_entropy,
    fit_minibatch,
    he_uniform,
    relu,
    relu_grad,
    softmax,
)

logger = logging.getLogger(__name__)


@dataclass
class ConvLayer:
    """Filters of shape (k, k, c_in, filters) plus one bias per filter."""

    weights: np.ndarray
    biases: np.ndarray

    def __post_init__(self):
        w = self.weights
        if w.ndim != 4 or w.shape[0] != w.shape[1] or w.shape[0] % 2 == 0:
            raise DataError(f"conv kernel must be (k, k, c_in, c_out) with odd k, got {w.shape}")
        if self.biases.shape != (w.shape[3],):
            raise DataError("one bias per filter required")

    @property
    def kernel(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[2]

    @property
    def filter_count(self) -> int:
        return self.weights.shape[3]


@dataclass(frozen=True)
class PoolSpec:
    window: int = 2
    stride: int = 2
    mode: str = "max"


@dataclass(frozen=True)
class CnnArch:
    filters: tuple[int, int] = (500, 100)
    fc_sizes: tuple[int, ...] = (200, 84)
    kernel: int = 5

    def __post_init__(self):
        if len(self.filters) != 2 or any(f < 1 for f in self.filters):
            raise ConfigError(f"two positive filter counts required, got {self.filters}")
        if any(s < 1 for s in self.fc_sizes):
            raise ConfigError("dense layer sizes must be positive")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigError("kernel size must be odd")


def pooled_side(side: int) -> int:
    return side // 2 if side >= 2 else side


def flatten_length(p: int, filters2: int) -> int:
    s = pooled_side(pooled_side(p))
    return s * s * filters2


def _pad(x: np.ndarray, pad: int) -> np.ndarray:
    return np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))


def im2col(x: np.ndarray, k: int) -> np.ndarray:
    """(n, H, W, C) -> (n*H*W, k*k*C) rows of same-padded windows in (dy, dx, c) order."""
    n, H, W, C = x.shape
    xp = _pad(x, k // 2)
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))  # n,H,W,C,k,k
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(n * H * W, k * k * C)


def col2im(cols: np.ndarray, shape: tuple[int, int, int, int], k: int) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add window gradients back onto the input."""
    n, H, W, C = shape
    pad = k // 2
    g = cols.reshape(n, H, W, k, k, C)
    out = np.zeros((n, H + 2 * pad, W + 2 * pad, C), dtype=cols.dtype)
    for dy in range(k):
        for dx in range(k):
            out[:, dy:dy + H, dx:dx + W, :] += g[:, :, :, dy, dx, :]
    return out[:, pad:pad + H, pad:pad + W, :]


def conv2d_linear(x: np.ndarray, layer: ConvLayer) -> tuple[np.ndarray, np.ndarray]:
    """Pre-activation conv output and the im2col matrix used to build it."""
    if x.shape[3] != layer.in_channels:
        raise DataError(f"conv expects {layer.in_channels} channels, got {x.shape[3]}")
    n, H, W, _ = x.shape
    cols = im2col(x, layer.kernel)
    out = cols @ layer.weights.reshape(-1, layer.filter_count) + layer.biases
    return out.reshape(n, H, W, layer.filter_count), cols


def conv2d_forward(x: np.ndarray, layer: ConvLayer) -> np.ndarray:
    """Same-padded convolution followed by ReLU. Accepts (H, W, C) or (n, H, W, C)."""
    x = np.asarray(x)
    single = x.ndim == 3
    xb = x[None] if single else x
    out = relu(conv2d_linear(xb, layer)[0])
    return out[0] if single else out


def maxpool_forward(x: np.ndarray, pool: PoolSpec = PoolSpec()) -> tuple[np.ndarray, np.ndarray]:
    """2x2 stride-2 max-pool with floor geometry.

    Returns the pooled tensor and, per output cell, the flat index 0..3 of the
    winning position inside its window (row-major; first maximum wins ties).
    Accepts (H, W, C) or (n, H, W, C).
    """
    x = np.asarray(x)
    single = x.ndim == 3
    xb = x[None] if single else x
    n, H, W, C = xb.shape
    if H < 2 or W < 2:
        raise DataError("max-pool needs both spatial sides >= 2")
    Ho, Wo = H // 2, W // 2
    blocks = xb[:, :2 * Ho, :2 * Wo, :].reshape(n, Ho, 2, Wo, 2, C).transpose(0, 1, 3, 5, 2, 4)
    blocks = blocks.reshape(n, Ho, Wo, C, 4)
    arg = np.argmax(blocks, axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    if single:
        return out[0], arg[0]
    return out, arg


def maxpool_backward(dout: np.ndarray, arg: np.ndarray, in_shape: tuple[int, int, int, int]) -> np.ndarray:
    n, H, W, C = in_shape
    Ho, Wo = dout.shape[1], dout.shape[2]
    onehot = (arg[..., None] == np.arange(4)).astype(dout.dtype) * dout[..., None]
    g = onehot.reshape(n, Ho, Wo, C, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, 2 * Ho, 2 * Wo, C)
    dx = np.zeros(in_shape, dtype=dout.dtype)
    dx[:, :2 * Ho, :2 * Wo, :] = g
    return dx


def flatten(x: np.ndarray) -> np.ndarray:
    """[row][col][channel] order; (H, W, C) -> vector, (n, H, W, C) -> (n, H*W*C)."""
    x = np.asarray(x)
    return x.reshape(-1) if x.ndim == 3 else x.reshape(x.shape[0], -1)


@dataclass
class CnnModel:
    conv_layers: list[ConvLayer]
    fc_weights: list[np.ndarray]
    fc_biases: list[np.ndarray]
    input_geometry: tuple[int, int]  # (p, bands)
    class_ids: tuple[int, ...]
    pool: PoolSpec = PoolSpec()

    def __post_init__(self):
        p, bands = self.input_geometry
        if self.conv_layers[0].in_channels != bands:
            raise DataError("first conv layer does not match the input band count")
        for a, b in zip(self.conv_layers, self.conv_layers[1:]):
            if b.in_channels != a.filter_count:
                raise DataError("conv layers do not chain")
        expected = flatten_length(p, self.conv_layers[-1].filter_count)
        if self.fc_weights[0].shape[0] != expected:
            raise DataError(f"first dense layer takes {self.fc_weights[0].shape[0]} inputs, flatten gives {expected}")
        if self.fc_weights[-1].shape[1] != len(self.class_ids):
            raise DataError("output width differs from the class count")

    @property
    def arch(self) -> CnnArch:
        return CnnArch(
            filters=tuple(c.filter_count for c in self.conv_layers),
            fc_sizes=tuple(W.shape[1] for W in self.fc_weights[:-1]),
            kernel=self.conv_layers[0].kernel,
        )

    @property
    def params(self) -> list[np.ndarray]:
        out = []
        for c in self.conv_layers:
            out += [c.weights, c.biases]
        for W, b in zip(self.fc_weights, self.fc_biases):
            out += [W, b]
        return out

    @property
    def dtype(self):
        return self.fc_weights[0].dtype

    def predict_proba(self, patches) -> np.ndarray:
        return cnn_forward(self, patches)[0]

    def predict_batch(self, patches, chunk: int = 512) -> np.ndarray:
        patches = np.asarray(patches)
        idx = [argmax_lowest(self.predict_proba(patches[i:i + chunk])) for i in range(0, len(patches), chunk)]
        return np.asarray(self.class_ids, dtype=np.int64)[np.concatenate(idx)]

    predict_patches = predict_batch

    def to_json(self) -> dict:
        return {
            "arch": {
                "filters": list(self.arch.filters),
                "fc_sizes": list(self.arch.fc_sizes),
                "kernel": self.arch.kernel,
            },
            "class_ids": list(self.class_ids),
            "input_geometry": list(self.input_geometry),
            "dtype": str(self.dtype),
            "conv_weights": [c.weights.tolist() for c in self.conv_layers],
            "conv_biases": [c.biases.tolist() for c in self.conv_layers],
            "fc_weights": [W.tolist() for W in self.fc_weights],
            "fc_biases": [b.tolist() for b in self.fc_biases],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "CnnModel":
        dt = np.dtype(doc.get("dtype", "float32"))
        convs = [
            ConvLayer(np.array(w, dtype=dt), np.array(b, dtype=dt))
            for w, b in zip(doc["conv_weights"], doc["conv_biases"])
        ]
        return cls(
            conv_layers=convs,
            fc_weights=[np.array(W, dtype=dt) for W in doc["fc_weights"]],
            fc_biases=[np.array(b, dtype=dt) for b in doc["fc_biases"]],
            input_geometry=tuple(int(v) for v in doc["input_geometry"]),
            class_ids=tuple(int(c) for c in doc["class_ids"]),
        )


def init_cnn(p: int, bands: int, n_classes: int, arch: CnnArch, seed: int = 0, class_ids=(), dtype=np.float32) -> CnnModel:
    """He-uniform weights, zero biases, seeded."""
    rng = np.random.default_rng([seed, 0])
    k = arch.kernel
    convs = []
    c_in = bands
    for f in arch.filters:
        fan_in = k * k * c_in
        convs.append(ConvLayer(he_uniform(rng, (k, k, c_in, f), fan_in, dtype), np.zeros(f, dtype=dtype)))
        c_in = f
    sizes = [flatten_length(p, arch.filters[-1]), *arch.fc_sizes, n_classes]
    fc_w = [he_uniform(rng, (sizes[i], sizes[i + 1]), sizes[i], dtype) for i in range(len(sizes) - 1)]
    fc_b = [np.zeros(sizes[i + 1], dtype=dtype) for i in range(len(sizes) - 1)]
    if not class_ids:
        class_ids = tuple(range(1, n_classes + 1))
    return CnnModel(convs, fc_w, fc_b, (p, bands), tuple(class_ids))


@dataclass
class CnnCache:
    conv_in: list[np.ndarray]
    conv_cols: list[np.ndarray]
    conv_pre: list[np.ndarray]
    pool_in_shape: list[tuple | None]  # None when the pool was skipped
    pool_arg: list[np.ndarray | None]
    flat_shape: tuple
    fc_in: list[np.ndarray]
    fc_pre: list[np.ndarray]
    probs: np.ndarray


def cnn_forward(m: CnnModel, patches) -> tuple[np.ndarray, CnnCache]:
    """Forward pass for one (p, p, B) patch or an (n, p, p, B) batch."""
    x = np.asarray(patches, dtype=m.dtype)
    single = x.ndim == 3
    x = x[None] if single else x
    p, bands = m.input_geometry
    if x.shape[1:] != (p, p, bands):
        raise DataError(f"model expects {p}x{p}x{bands} patches, got {x.shape[1:]}")
    cache = CnnCache([], [], [], [], [], (), [], [], np.empty(0))
    a = x
    for layer in m.conv_layers:
        cache.conv_in.append(a)
        z, cols = conv2d_linear(a, layer)
        cache.conv_cols.append(cols)
        cache.conv_pre.append(z)
        a = relu(z)
        if a.shape[1] >= 2 and a.shape[2] >= 2:
            cache.pool_in_shape.append(a.shape)
            a, arg = maxpool_forward(a, m.pool)
            cache.pool_arg.append(arg)
        else:
            cache.pool_in_shape.append(None)
            cache.pool_arg.append(None)
    cache.flat_shape = a.shape
    a = flatten(a)
    last = len(m.fc_weights) - 1
    for i, (W, b) in enumerate(zip(m.fc_weights, m.fc_biases)):
        cache.fc_in.append(a)
        z = a @ W + b
        cache.fc_pre.append(z)
        a = relu(z) if i < last else softmax(z)
    cache.probs = a
    return (a[0] if single else a), cache


def cnn_backward(m: CnnModel, cache: CnnCache, true_class) -> list[np.ndarray]:
    """Gradients of mean cross-entropy, ordered like ``m.params``."""
    probs = cache.probs
    n = probs.shape[0]
    t = np.atleast_1d(np.asarray(true_class))
    delta = probs.copy()
    delta[np.arange(n), t] -= 1
    delta /= n
    fc_grads = []
    for i in range(len(m.fc_weights) - 1, -1, -1):
        fc_grads.append((cache.fc_in[i].T @ delta, delta.sum(axis=0)))
        delta = delta @ m.fc_weights[i].T
        if i > 0:
            delta = delta * relu_grad(cache.fc_pre[i - 1])
    fc_grads.reverse()

    g = delta.reshape(cache.flat_shape)
    conv_grads = []
    for j in range(len(m.conv_layers) - 1, -1, -1):
        layer = m.conv_layers[j]
        if cache.pool_arg[j] is not None:
            g = maxpool_backward(g, cache.pool_arg[j], cache.pool_in_shape[j])
        g = g * relu_grad(cache.conv_pre[j])
        gz = g.reshape(-1, layer.filter_count)
        dW = (cache.conv_cols[j].T @ gz).reshape(layer.weights.shape)
        db = gz.sum(axis=0)
        conv_grads.append((dW, db))
        if j > 0:
            dcols = gz @ layer.weights.reshape(-1, layer.filter_count).T
            g = col2im(dcols, cache.conv_in[j].shape, layer.kernel)
    conv_grads.reverse()

    out = []
    for dW, db in conv_grads + fc_grads:
        out += [dW, db]
    return out


def cnn_input_gradient(m: CnnModel, cache: CnnCache, true_class) -> np.ndarray:
    """Gradient of the loss w.r.t. the input patch batch (used for routing checks)."""
    probs = cache.probs
    n = probs.shape[0]
    t = np.atleast_1d(np.asarray(true_class))
    delta = probs.copy()
    delta[np.arange(n), t] -= 1
    delta /= n
    for i in range(len(m.fc_weights) - 1, -1, -1):
        delta = delta @ m.fc_weights[i].T
        if i > 0:
            delta = delta * relu_grad(cache.fc_pre[i - 1])
    g = delta.reshape(cache.flat_shape)
    for j in range(len(m.conv_layers) - 1, -1, -1):
        layer = m.conv_layers[j]
        if cache.pool_arg[j] is not None:
            g = maxpool_backward(g, cache.pool_arg[j], cache.pool_in_shape[j])
        g = g * relu_grad(cache.conv_pre[j])
        dcols = g.reshape(-1, layer.filter_count) @ layer.weights.reshape(-1, layer.filter_count).T
        g = col2im(dcols, cache.conv_in[j].shape, layer.kernel)
    return g


def train_cnn(
    patches,
    labels,
    cfg: TrainConfig,
    arch: CnnArch = CnnArch(),
    class_ids=None,
    dtype=np.float32,
    max_steps: int | None = None,
) -> tuple[CnnModel, TrainHistory]:
    patches = np.asarray(patches, dtype=dtype)
    labels = np.asarray(labels)
    if patches.ndim != 4 or patches.shape[1] != patches.shape[2] or len(patches) < 1:
        raise DataError("need a non-empty (n, p, p, bands) patch array")
    if class_ids is None:
        class_ids = tuple(int(c) for c in np.unique(labels))
    if len(class_ids) < 2:
        raise DataError("training needs at least two classes")
    t = class_index(labels, class_ids)
    p, bands = patches.shape[1], patches.shape[3]
    model = init_cnn(p, bands, len(class_ids), arch, cfg.seed, class_ids, dtype)

    def loss_and_grads(idx):
        _, cache = cnn_forward(model, patches[idx])
        loss = float(np.mean(cross_entropy(cache.probs, t[idx])))
        return loss, cnn_backward(model, cache, t[idx])

    hist = fit_minibatch(model.params, loss_and_grads, len(patches), cfg, max_steps)
    logger.info("CNN trained: %d steps, final loss %.4f", hist.steps, hist.losses[-1])
    return model, hist


def cnn_predict(m: CnnModel, patch) -> int:
    return int(m.predict_batch(np.asarray(patch)[None])[0])

