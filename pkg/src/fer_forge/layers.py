"""Layer forward/backward passes and the categorical cross-entropy loss.

Module-level functions hold the math; the Layer classes below wrap them
with parameter storage and per-forward caches so networks can run a
backward pass without an autodiff graph. All backward passes are checked
against central finite differences in the test suite.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from .tensor import (
    ConvGeometry,
    ShapeError,
    conv2d_backward,
    conv2d_forward,
    conv_patches,
    maxpool_backward,
    maxpool_forward,
)

log = logging.getLogger(__name__)


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, grad: np.ndarray) -> np.ndarray:
    # subgradient at exactly 0 is defined as 0
    return grad * (x > 0)


def softmax_forward(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max-subtraction for overflow safety."""
    if not np.all(np.isfinite(logits)):
        raise ValueError("softmax input contains non-finite values")
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(probs: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """Jacobian-vector product of softmax: p * (g - <g, p>)."""
    inner = (grad * probs).sum(axis=-1, keepdims=True)
    return probs * (grad - inner)


def dense_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    if x.shape[-1] != weights.shape[0]:
        raise ShapeError(
            f"dense input axis ({x.shape[-1]}) does not match weight rows ({weights.shape[0]})"
        )
    return x @ weights + bias


def dense_backward(
    x: np.ndarray, weights: np.ndarray, grad: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    x2 = x if x.ndim == 2 else x[None]
    g2 = grad if grad.ndim == 2 else grad[None]
    grad_w = x2.T @ g2
    grad_b = g2.sum(axis=0)
    grad_x = grad @ weights.T
    return grad_x, grad_w, grad_b


def dropout_forward(
    x: np.ndarray, rate: float, train: bool, rng: int | np.random.Generator
) -> tuple[np.ndarray, np.ndarray | None]:
    """Inverted dropout: zero with probability ``rate``, scale survivors by 1/(1-rate).

    Inference mode is the identity, so training-time expectations match
    inference activations. Returns (output, mask); the mask already carries
    the survivor scaling and is None in inference mode.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0,1), got {rate}")
    if not train or rate == 0.0:
        return x, None
    gen = np.random.default_rng(rng) if isinstance(rng, int) else rng
    keep = gen.random(x.shape) >= rate
    mask = keep.astype(x.dtype) / (1.0 - rate)
    return x * mask, mask


def dropout_backward(mask: np.ndarray | None, grad: np.ndarray) -> np.ndarray:
    return grad if mask is None else grad * mask


def flatten(x: np.ndarray) -> np.ndarray:
    """Row-major flatten of [C,H,W] (or each sample of [N,C,H,W])."""
    if x.ndim == 3:
        return x.reshape(-1)
    return x.reshape(x.shape[0], -1)


def cross_entropy_loss(
    probs: np.ndarray,
    target_onehot: np.ndarray,
    l2_terms: list[tuple[float, np.ndarray]] = (),
) -> float:
    """Categorical cross-entropy -log p[true] plus sum of penalty * sum(W^2).

    ``probs`` must come from a softmax; a batch is averaged. Probabilities
    at the true class are clamped at 1e-12 before the log.
    """
    p = probs if probs.ndim == 2 else probs[None]
    t = target_onehot if target_onehot.ndim == 2 else target_onehot[None]
    if p.shape != t.shape:
        raise ShapeError(f"probs {probs.shape} and targets {target_onehot.shape} disagree")
    true_p = (p * t).sum(axis=-1)
    degenerate = true_p <= 0
    if degenerate.any():
        log.warning("clamped %d degenerate probabilities before log", int(degenerate.sum()))
        true_p = np.maximum(true_p, 1e-12)
    loss = float(-np.log(true_p).mean())
    for penalty, w in l2_terms:
        loss += penalty * float(np.sum(np.square(w, dtype=np.float64)))
    return loss


def softmax_xent_grad(probs: np.ndarray, target_onehot: np.ndarray) -> np.ndarray:
    """Fused softmax + cross-entropy gradient at the logits: probs - target."""
    return probs - target_onehot


class Layer:
    """Base layer: parameter storage plus forward/backward with a cache."""

    kind = "layer"

    def __init__(self):
        self.params: list[np.ndarray] = []
        self.grads: list[np.ndarray] = []
        self._cache = None

    def build(self, in_shape: tuple[int, ...], rng: np.random.Generator) -> tuple[int, ...]:
        return in_shape

    def forward(self, x: np.ndarray, train: bool, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def l2_terms(self) -> list[tuple[float, np.ndarray]]:
        return []

    def hyperparams(self) -> dict:
        return {}

    def describe(self) -> dict:
        return {"kind": self.kind, **self.hyperparams()}


def _he_uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def _glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Conv2D(Layer):
    kind = "conv2d"

    def __init__(self, filters: int, kernel_size: int = 3, stride: int = 1, padding: int = 0):
        super().__init__()
        if filters < 1:
            raise ValueError(f"filter count must be >= 1, got {filters}")
        self.filters = filters
        self.geom = ConvGeometry(kernel_size, kernel_size, stride, padding)

    def build(self, in_shape, rng):
        if len(in_shape) != 3:
            raise ShapeError(f"conv2d expects [C,H,W] input, got {in_shape}")
        c, h, w = in_shape
        oh, ow = self.geom.out_hw(h, w)
        fan_in = c * self.geom.kernel_h * self.geom.kernel_w
        kernels = _he_uniform(
            rng, (self.filters, c, self.geom.kernel_h, self.geom.kernel_w), fan_in, np.float32
        )
        bias = np.zeros(self.filters, dtype=np.float32)
        self.params = [kernels, bias]
        self.grads = [np.zeros_like(kernels), np.zeros_like(bias)]
        return (self.filters, oh, ow)

    def forward(self, x, train, rng):
        cols = conv_patches(x, self.geom)
        # the patch matrix is the expensive part; keep it for backward
        self._cache = (x, cols if train else None)
        return conv2d_forward(x, self.params[0], self.params[1], self.geom, _cols=cols)

    def backward(self, grad):
        x, cols = self._cache
        grad_x, grad_k, grad_b = conv2d_backward(
            x, self.params[0], self.geom, grad, _cols=cols
        )
        self.grads[0][...] = grad_k
        self.grads[1][...] = grad_b
        return grad_x

    def hyperparams(self):
        return {
            "filters": self.filters,
            "kernel_size": self.geom.kernel_h,
            "stride": self.geom.stride,
            "padding": self.geom.padding,
        }


class MaxPool2D(Layer):
    kind = "maxpool2d"

    def build(self, in_shape, rng):
        if len(in_shape) != 3:
            raise ShapeError(f"maxpool2d expects [C,H,W] input, got {in_shape}")
        c, h, w = in_shape
        if h < 2 or w < 2:
            raise ShapeError(f"maxpool2d needs spatial dims >= 2, got {in_shape}")
        return (c, h // 2, w // 2)

    def forward(self, x, train, rng):
        out, index_map = maxpool_forward(x)
        self._cache = index_map
        return out

    def backward(self, grad):
        return maxpool_backward(self._cache, grad)


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, train, rng):
        self._cache = x
        return relu_forward(x)

    def backward(self, grad):
        return relu_backward(self._cache, grad)


class Dense(Layer):
    kind = "dense"

    def __init__(self, units: int, l2_penalty: float = 0.0, init: str = "he"):
        super().__init__()
        if units < 1:
            raise ValueError(f"units must be >= 1, got {units}")
        if l2_penalty < 0:
            raise ValueError(f"l2 penalty must be >= 0, got {l2_penalty}")
        self.units = units
        self.l2_penalty = l2_penalty
        self.init = init

    def build(self, in_shape, rng):
        if len(in_shape) != 1:
            raise ShapeError(f"dense expects flattened input, got {in_shape}")
        d = in_shape[0]
        if self.init == "glorot":
            weights = _glorot_uniform(rng, (d, self.units), d, self.units, np.float32)
        else:
            weights = _he_uniform(rng, (d, self.units), d, np.float32)
        bias = np.zeros(self.units, dtype=np.float32)
        self.params = [weights, bias]
        self.grads = [np.zeros_like(weights), np.zeros_like(bias)]
        return (self.units,)

    def forward(self, x, train, rng):
        self._cache = x
        return dense_forward(x, self.params[0], self.params[1])

    def backward(self, grad):
        grad_x, grad_w, grad_b = dense_backward(self._cache, self.params[0], grad)
        if self.l2_penalty:
            grad_w = grad_w + 2.0 * self.l2_penalty * self.params[0]
        self.grads[0][...] = grad_w
        self.grads[1][...] = grad_b
        return grad_x

    def l2_terms(self):
        if self.l2_penalty:
            return [(self.l2_penalty, self.params[0])]
        return []

    def hyperparams(self):
        return {"units": self.units, "l2_penalty": self.l2_penalty, "init": self.init}


class Dropout(Layer):
    kind = "dropout"

    def __init__(self, rate: float):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must be in [0,1), got {rate}")
        self.rate = rate

    def forward(self, x, train, rng):
        out, mask = dropout_forward(x, self.rate, train, rng)
        self._cache = mask
        return out

    def backward(self, grad):
        return dropout_backward(self._cache, grad)

    def hyperparams(self):
        return {"rate": self.rate}


class Flatten(Layer):
    kind = "flatten"

    def build(self, in_shape, rng):
        return (int(np.prod(in_shape)),)

    def forward(self, x, train, rng):
        self._cache = x.shape
        return flatten(x)

    def backward(self, grad):
        return grad.reshape(self._cache)


class Softmax(Layer):
    kind = "softmax"

    def build(self, in_shape, rng):
        if len(in_shape) != 1:
            raise ShapeError(f"softmax expects a vector input, got {in_shape}")
        return in_shape

    def forward(self, x, train, rng):
        probs = softmax_forward(x)
        self._cache = probs
        return probs

    def backward(self, grad):
        return softmax_backward(self._cache, grad)


LAYER_KINDS = {
    cls.kind: cls for cls in (Conv2D, MaxPool2D, ReLU, Dense, Dropout, Flatten, Softmax)
}


@dataclass
class LayerSpec:
    """Declarative layer description; ``materialize`` builds the Layer."""

    kind: str
    hyper: dict = field(default_factory=dict)

    def materialize(self) -> Layer:
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        return LAYER_KINDS[self.kind](**self.hyper)
