"""Layers with cached forward state and exact reverse-mode gradients.

Every layer works on float64 batches whose first axis is the sample axis and
checks the per-sample shape it was built for. ``forward`` caches whatever
``backward`` needs, including any random masks, so a backward pass always
differentiates the function that was actually executed.
"""

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from ..schemas import LayerKind, LayerSpec, Mode, Tensor

BATCHNORM_MOMENTUM = 0.99
BATCHNORM_EPSILON = 1e-3
FLIPOUT_INITIAL_STD = 0.05
DUQ_WEIGHT_STD = 0.05


class NNError(Exception):
    pass


class LayerShapeError(NNError):
    def __init__(
        self,
        kind: LayerKind,
        expected: tuple[int, ...],
        actual: tuple[int, ...],
        layer_index: int | str | None = None,
    ):
        self.kind = kind
        self.expected = expected
        self.actual = actual
        self.layer_index = layer_index
        where = f"layer {layer_index} " if layer_index is not None else ""
        super().__init__(
            f"{where}({kind.value}): expected per-sample shape {expected}, got {actual}"
        )

    def at(self, layer_index: int | str) -> "LayerShapeError":
        return LayerShapeError(self.kind, self.expected, self.actual, layer_index)


class MissingForwardCacheError(NNError):
    pass


def glorot_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> Tensor:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def softplus(x: Tensor) -> Tensor:
    return np.logaddexp(0.0, x)


def inverse_softplus(y: float) -> float:
    return math.log(math.expm1(y))


class Layer:
    kind: LayerKind
    stochastic = False

    def __init__(self, in_shape: tuple[int, ...]):
        self.in_shape = tuple(in_shape)
        self.params: dict[str, Tensor] = {}
        self.grads: dict[str, Tensor] = {}
        self.state: dict[str, Tensor] = {}
        self.stochastic_eval = False
        self._cache = None

    @property
    def out_shape(self) -> tuple[int, ...]:
        return self.in_shape

    def active(self, mode: Mode) -> bool:
        """Whether the stochastic behaviour of this layer is switched on."""
        return self.stochastic and (mode is Mode.train or self.stochastic_eval)

    def forward(self, x: Tensor, mode: Mode = Mode.eval, rng: np.random.Generator | None = None) -> Tensor:
        if tuple(x.shape[1:]) != self.in_shape:
            raise LayerShapeError(self.kind, self.in_shape, tuple(x.shape[1:]))
        if self.active(mode) and rng is None:
            raise NNError(f"{self.kind.value} layer needs an rng stream when active")
        out, self._cache = self._forward(x, mode, rng)
        return out

    def backward(self, upstream: Tensor) -> tuple[Tensor, dict[str, Tensor]]:
        if self._cache is None:
            raise MissingForwardCacheError(f"{self.kind.value}: backward called before forward")
        input_grad, self.grads = self._backward(self._cache, upstream)
        return input_grad, self.grads

    def _forward(self, x, mode, rng):
        raise NotImplementedError

    def _backward(self, cache, upstream):
        raise NotImplementedError

    def __repr__(self) -> str:
        return f"{type(self).__name__}{self.in_shape}->{self.out_shape}"


class Dense(Layer):
    kind = LayerKind.dense

    def __init__(self, in_shape, units: int, rng: np.random.Generator):
        super().__init__(in_shape)
        fan_in = math.prod(self.in_shape)
        self.units = units
        self.params = {
            "W": glorot_uniform(rng, (fan_in, units), fan_in, units),
            "b": np.zeros(units),
        }

    @property
    def out_shape(self):
        return (self.units,)

    def _forward(self, x, mode, rng):
        flat = x.reshape(len(x), -1)
        return flat @ self.params["W"] + self.params["b"], (x.shape, flat)

    def _backward(self, cache, upstream):
        shape, flat = cache
        input_grad = (upstream @ self.params["W"].T).reshape(shape)
        return input_grad, {"W": flat.T @ upstream, "b": upstream.sum(axis=0)}


def _im2col(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    padded = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    windows = sliding_window_view(padded, (3, 3), axis=(2, 3))  # n, c, h, w, 3, 3
    return windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * 9)


class Conv2d3x3(Layer):
    """3x3 cross-correlation with stride 1 and "same" zero padding."""

    kind = LayerKind.conv2d_3x3

    def __init__(self, in_shape, filters: int, rng: np.random.Generator):
        super().__init__(in_shape)
        if len(self.in_shape) != 3:
            raise LayerShapeError(self.kind, (-1, -1, -1), self.in_shape)
        channels = self.in_shape[0]
        self.filters = filters
        self.params = {
            "W": glorot_uniform(rng, (filters, channels, 3, 3), channels * 9, filters * 9),
            "b": np.zeros(filters),
        }

    @property
    def out_shape(self):
        return (self.filters, *self.in_shape[1:])

    def _forward(self, x, mode, rng):
        n, _, h, w = x.shape
        cols = _im2col(x)
        out = cols @ self.params["W"].reshape(self.filters, -1).T + self.params["b"]
        return out.reshape(n, h, w, self.filters).transpose(0, 3, 1, 2), (x.shape, cols)

    def _backward(self, cache, upstream):
        (n, c, h, w), cols = cache
        weights = self.params["W"]
        g = upstream.transpose(0, 2, 3, 1).reshape(-1, self.filters)
        grads = {"W": (g.T @ cols).reshape(weights.shape), "b": g.sum(axis=0)}

        dcols = (g @ weights.reshape(self.filters, -1)).reshape(n, h, w, c, 3, 3)
        dcols = dcols.transpose(0, 3, 1, 2, 4, 5)
        padded = np.zeros((n, c, h + 2, w + 2))
        for i in range(3):
            for j in range(3):
                padded[:, :, i : i + h, j : j + w] += dcols[..., i, j]
        return padded[:, :, 1:-1, 1:-1], grads


class MaxPool2x2(Layer):
    """2x2 max pooling with stride 2; odd trailing rows and columns are dropped."""

    kind = LayerKind.maxpool_2x2

    def __init__(self, in_shape):
        super().__init__(in_shape)
        if len(self.in_shape) != 3 or self.in_shape[1] < 2 or self.in_shape[2] < 2:
            raise LayerShapeError(self.kind, (-1, 2, 2), self.in_shape)

    @property
    def out_shape(self):
        c, h, w = self.in_shape
        return (c, h // 2, w // 2)

    def _forward(self, x, mode, rng):
        n = len(x)
        c, h2, w2 = self.out_shape
        blocks = (
            x[:, :, : 2 * h2, : 2 * w2]
            .reshape(n, c, h2, 2, w2, 2)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(n, c, h2, w2, 4)
        )
        winner = blocks.argmax(axis=-1)
        out = np.take_along_axis(blocks, winner[..., None], axis=-1)[..., 0]
        return out, (x.shape, winner)

    def _backward(self, cache, upstream):
        shape, winner = cache
        n = shape[0]
        c, h2, w2 = self.out_shape
        routed = np.zeros((n, c, h2, w2, 4))
        np.put_along_axis(routed, winner[..., None], upstream[..., None], axis=-1)
        input_grad = np.zeros(shape)
        input_grad[:, :, : 2 * h2, : 2 * w2] = (
            routed.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * h2, 2 * w2)
        )
        return input_grad, {}


class BatchNorm(Layer):
    """Per-feature (dense input) or per-channel (image input) normalisation."""

    kind = LayerKind.batchnorm

    def __init__(self, in_shape):
        super().__init__(in_shape)
        features = self.in_shape[0]
        self._axes = (0,) if len(self.in_shape) == 1 else (0, *range(2, len(self.in_shape) + 1))
        self._bshape = (1, features) + (1,) * (len(self.in_shape) - 1)
        self.params = {"gamma": np.ones(features), "beta": np.zeros(features)}
        self.state = {"running_mean": np.zeros(features), "running_var": np.ones(features)}

    def _forward(self, x, mode, rng):
        if mode is Mode.train:
            mean = x.mean(axis=self._axes)
            var = x.var(axis=self._axes)
            rm, rv = self.state["running_mean"], self.state["running_var"]
            rm[...] = BATCHNORM_MOMENTUM * rm + (1.0 - BATCHNORM_MOMENTUM) * mean
            rv[...] = BATCHNORM_MOMENTUM * rv + (1.0 - BATCHNORM_MOMENTUM) * var
        else:
            mean, var = self.state["running_mean"], self.state["running_var"]
        inv_std = 1.0 / np.sqrt(var.reshape(self._bshape) + BATCHNORM_EPSILON)
        xhat = (x - mean.reshape(self._bshape)) * inv_std
        out = self.params["gamma"].reshape(self._bshape) * xhat + self.params["beta"].reshape(self._bshape)
        return out, (mode, xhat, inv_std)

    def _backward(self, cache, upstream):
        mode, xhat, inv_std = cache
        grads = {
            "gamma": (upstream * xhat).sum(axis=self._axes),
            "beta": upstream.sum(axis=self._axes),
        }
        dxhat = upstream * self.params["gamma"].reshape(self._bshape)
        if mode is not Mode.train:
            return dxhat * inv_std, grads
        m = upstream.size // upstream.shape[1]
        input_grad = (inv_std / m) * (
            m * dxhat
            - dxhat.sum(axis=self._axes, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=self._axes, keepdims=True)
        )
        return input_grad, grads


class ReLU(Layer):
    kind = LayerKind.relu

    def _forward(self, x, mode, rng):
        return np.maximum(x, 0.0), x > 0.0

    def _backward(self, cache, upstream):
        return upstream * cache, {}


class Softmax(Layer):
    kind = LayerKind.softmax

    def _forward(self, x, mode, rng):
        shifted = np.exp(x - x.max(axis=-1, keepdims=True))
        out = shifted / shifted.sum(axis=-1, keepdims=True)
        return out, out

    def _backward(self, cache, upstream):
        s = cache
        return s * (upstream - (upstream * s).sum(axis=-1, keepdims=True)), {}


class Softplus(Layer):
    kind = LayerKind.softplus

    def _forward(self, x, mode, rng):
        return softplus(x), x

    def _backward(self, cache, upstream):
        return upstream * expit(cache), {}


class Dropout(Layer):
    """Inverted dropout: kept activations are scaled by 1/(1 - p) whenever active."""

    kind = LayerKind.dropout
    stochastic = True

    def __init__(self, in_shape, drop_prob: float, stochastic_eval: bool = False):
        super().__init__(in_shape)
        self.drop_prob = drop_prob
        self.stochastic_eval = stochastic_eval

    def _forward(self, x, mode, rng):
        if not self.active(mode):
            return x, 1.0
        scale = (rng.random(x.shape) >= self.drop_prob) / (1.0 - self.drop_prob)
        return x * scale, scale

    def _backward(self, cache, upstream):
        return upstream * cache, {}


class DropConnect(Layer):
    """Dense layer whose weights are masked (not rescaled) while active.

    When inactive the layer uses the expected weights (1 - p) W.
    """

    kind = LayerKind.dropconnect
    stochastic = True

    def __init__(self, in_shape, units: int, drop_prob: float, rng: np.random.Generator, stochastic_eval: bool = False):
        super().__init__(in_shape)
        fan_in = math.prod(self.in_shape)
        self.units = units
        self.drop_prob = drop_prob
        self.stochastic_eval = stochastic_eval
        self.params = {
            "W": glorot_uniform(rng, (fan_in, units), fan_in, units),
            "b": np.zeros(units),
        }

    @property
    def out_shape(self):
        return (self.units,)

    def _forward(self, x, mode, rng):
        flat = x.reshape(len(x), -1)
        if self.active(mode):
            mask = (rng.random(self.params["W"].shape) >= self.drop_prob).astype(np.float64)
        else:
            mask = np.full(self.params["W"].shape, 1.0 - self.drop_prob)
        return flat @ (self.params["W"] * mask) + self.params["b"], (x.shape, flat, mask)

    def _backward(self, cache, upstream):
        shape, flat, mask = cache
        input_grad = (upstream @ (self.params["W"] * mask).T).reshape(shape)
        return input_grad, {"W": (flat.T @ upstream) * mask, "b": upstream.sum(axis=0)}


class FlipoutDense(Layer):
    """Mean-field Gaussian dense layer sampled with Flipout sign decorrelation.

    Weights are N(mu, softplus(rho)^2); the bias is one learnable scalar and
    there is no prior. When inactive the layer returns the mean output.
    """

    kind = LayerKind.flipout_dense
    stochastic = True

    def __init__(self, in_shape, units: int, rng: np.random.Generator, stochastic_eval: bool = True):
        super().__init__(in_shape)
        fan_in = math.prod(self.in_shape)
        self.units = units
        self.stochastic_eval = stochastic_eval
        self.params = {
            "mu": glorot_uniform(rng, (fan_in, units), fan_in, units),
            "rho": np.full((fan_in, units), inverse_softplus(FLIPOUT_INITIAL_STD)),
            "bias": np.zeros(1),
        }

    @property
    def out_shape(self):
        return (self.units,)

    def _forward(self, x, mode, rng):
        flat = x.reshape(len(x), -1)
        out = flat @ self.params["mu"] + self.params["bias"]
        if not self.active(mode):
            return out, (x.shape, flat, None)
        noise = rng.standard_normal(self.params["mu"].shape)
        sign_in = rng.integers(0, 2, size=flat.shape) * 2.0 - 1.0
        sign_out = rng.integers(0, 2, size=out.shape) * 2.0 - 1.0
        perturbation = softplus(self.params["rho"]) * noise
        flipped = flat * sign_in
        out = out + (flipped @ perturbation) * sign_out
        return out, (x.shape, flat, (noise, sign_in, sign_out, perturbation, flipped))

    def _backward(self, cache, upstream):
        shape, flat, sampled = cache
        grads = {
            "mu": flat.T @ upstream,
            "rho": np.zeros_like(self.params["rho"]),
            "bias": np.array([upstream.sum()]),
        }
        input_grad = upstream @ self.params["mu"].T
        if sampled is not None:
            noise, sign_in, sign_out, perturbation, flipped = sampled
            g = upstream * sign_out
            grads["rho"] = (flipped.T @ g) * noise * expit(self.params["rho"])
            input_grad = input_grad + (g @ perturbation.T) * sign_in
        return input_grad.reshape(shape), grads


class RBFOutput(Layer):
    """DUQ output: K_c = exp(-||W_c h - e_c||^2 / (2 d l^2)) per class.

    Both the projections W_c and the centroids e_c are trained by gradient
    descent.
    """

    kind = LayerKind.rbf_output

    def __init__(self, in_shape, n_classes: int, rng: np.random.Generator, centroid_dim: int | None = None, length_scale: float = 0.1):
        super().__init__(in_shape)
        fan_in = math.prod(self.in_shape)
        self.n_classes = n_classes
        self.centroid_dim = centroid_dim or fan_in
        self.length_scale = length_scale
        self.params = {
            "W": rng.normal(0.0, DUQ_WEIGHT_STD, size=(n_classes, self.centroid_dim, fan_in)),
            "centroids": np.zeros((n_classes, self.centroid_dim)),
        }

    @property
    def out_shape(self):
        return (self.n_classes,)

    @property
    def _scale(self) -> float:
        return 2.0 * self.centroid_dim * self.length_scale**2

    def _forward(self, x, mode, rng):
        h = x.reshape(len(x), -1)
        diff = np.tensordot(h, self.params["W"], axes=([1], [2])) - self.params["centroids"]
        kernels = np.exp(-(diff**2).sum(axis=-1) / self._scale)
        return kernels, (x.shape, h, diff, kernels)

    def _backward(self, cache, upstream):
        shape, h, diff, kernels = cache
        dsq = -upstream * kernels / self._scale
        ddiff = 2.0 * diff * dsq[..., None]
        grads = {
            "W": np.tensordot(ddiff, h, axes=([0], [0])),
            "centroids": -ddiff.sum(axis=0),
        }
        input_grad = np.tensordot(ddiff, self.params["W"], axes=([1, 2], [0, 1]))
        return input_grad.reshape(shape), grads


def build_layer(spec: LayerSpec, in_shape: tuple[int, ...], rng: np.random.Generator) -> Layer:
    match spec.kind:
        case LayerKind.dense:
            return Dense(in_shape, spec.units, rng)
        case LayerKind.conv2d_3x3:
            return Conv2d3x3(in_shape, spec.filters, rng)
        case LayerKind.maxpool_2x2:
            return MaxPool2x2(in_shape)
        case LayerKind.batchnorm:
            return BatchNorm(in_shape)
        case LayerKind.relu:
            return ReLU(in_shape)
        case LayerKind.softmax:
            return Softmax(in_shape)
        case LayerKind.softplus:
            return Softplus(in_shape)
        case LayerKind.dropout:
            return Dropout(in_shape, spec.drop_prob, spec.stochastic_eval)
        case LayerKind.dropconnect:
            return DropConnect(in_shape, spec.units, spec.drop_prob, rng, spec.stochastic_eval)
        case LayerKind.flipout_dense:
            return FlipoutDense(in_shape, spec.units, rng, spec.stochastic_eval)
        case LayerKind.rbf_output:
            return RBFOutput(in_shape, spec.units, rng, spec.centroid_dim, spec.length_scale)
    raise NNError(f"unknown layer kind {spec.kind}")
