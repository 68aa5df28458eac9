import copy

import numpy as np

from ..schemas import LayerKind, LayerSpec, ModelSpec, Mode, Tensor
from .layers import Layer, LayerShapeError, NNError, Softmax, build_layer

INIT_STREAM = 0
TRAIN_STREAM = 1


def stream(seed: int, purpose: int) -> np.random.Generator:
    """Independent generator for one purpose (initialisation, training) of a seed."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(purpose,)))


class Network:
    """A layer chain with an optional variance head.

    With a variance head the last main layer is the mean head and both heads
    read the output of the layer before it.
    """

    def __init__(self, layers: list[Layer], variance_layers: list[Layer] | None = None, n_classes: int | None = None):
        self.layers = layers
        self.variance_layers = variance_layers
        self.n_classes = n_classes
        self._split = len(layers) - 1 if variance_layers is not None else len(layers)

    @property
    def input_shape(self) -> tuple[int, ...]:
        return self.layers[0].in_shape

    @property
    def all_layers(self) -> list[tuple[str, Layer]]:
        named = [(str(i), layer) for i, layer in enumerate(self.layers)]
        if self.variance_layers is not None:
            named += [(f"v{i}", layer) for i, layer in enumerate(self.variance_layers)]
        return named

    def _run(self, layers: list[Layer], x: Tensor, mode: Mode, rng, offset: int = 0, prefix: str = "") -> Tensor:
        for i, layer in enumerate(layers):
            try:
                x = layer.forward(x, mode, rng)
            except LayerShapeError as e:
                raise e.at(f"{prefix}{offset + i}" if prefix else offset + i) from None
        return x

    def forward_heads(self, x: Tensor, mode: Mode = Mode.eval, rng: np.random.Generator | None = None) -> tuple[Tensor, Tensor | None]:
        hidden = self._run(self.layers[: self._split], x, mode, rng)
        out = self._run(self.layers[self._split :], hidden, mode, rng, offset=self._split)
        if self.variance_layers is None:
            return out, None
        return out, self._run(self.variance_layers, hidden, mode, rng, prefix="v")

    def forward(self, x: Tensor, mode: Mode = Mode.eval, rng: np.random.Generator | None = None) -> Tensor:
        return self.forward_heads(x, mode, rng)[0]

    def backward(self, grad: Tensor, variance_grad: Tensor | None = None, from_logits: bool = False) -> Tensor:
        """Backpropagate; with ``from_logits`` the gradient enters below the final softmax."""
        trunk = self.layers[: self._split]
        head = self.layers[self._split :]
        if from_logits:
            if not isinstance(self.layers[-1], Softmax):
                raise NNError("from_logits backward needs a softmax output layer")
            if head:
                head = head[:-1]
            else:
                trunk = trunk[:-1]
        grad = _backprop(head, grad)
        if self.variance_layers is not None and variance_grad is not None:
            grad = grad + _backprop(self.variance_layers, variance_grad)
        return _backprop(trunk, grad)

    def parameters(self) -> dict[str, Tensor]:
        return {f"{i}.{k}": v for i, layer in self.all_layers for k, v in layer.params.items()}

    def gradients(self) -> dict[str, Tensor]:
        return {
            f"{i}.{k}": layer.grads.get(k, np.zeros_like(v))
            for i, layer in self.all_layers
            for k, v in layer.params.items()
        }

    def state(self) -> dict[str, Tensor]:
        return {f"{i}.{k}": v for i, layer in self.all_layers for k, v in layer.state.items()}

    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def find(self, layer_type: type[Layer]) -> list[Layer]:
        return [layer for _, layer in self.all_layers if isinstance(layer, layer_type)]

    def copy(self) -> "Network":
        return copy.deepcopy(self)


def _backprop(layers: list[Layer], grad: Tensor) -> Tensor:
    for layer in reversed(layers):
        grad, _ = layer.backward(grad)
    return grad


def build(spec: ModelSpec, seed: int) -> Network:
    rng = stream(seed, INIT_STREAM)
    shape = tuple(spec.input_shape)
    layers = []
    for i, layer_spec in enumerate(spec.layers):
        try:
            layer = build_layer(layer_spec, shape, rng)
        except LayerShapeError as e:
            raise e.at(i) from None
        layers.append(layer)
        shape = layer.out_shape

    variance_layers = None
    if spec.variance_head is not None:
        shape = layers[-1].in_shape
        variance_layers = []
        for layer_spec in spec.variance_head:
            layer = build_layer(layer_spec, shape, rng)
            variance_layers.append(layer)
            shape = layer.out_shape
    return Network(layers, variance_layers, spec.n_classes)


# Architectures
def softmax_head(n_classes: int) -> list[LayerSpec]:
    return [LayerSpec(kind=LayerKind.dense, units=n_classes), LayerSpec(kind=LayerKind.softmax)]


def cnn_spec(input_shape: tuple[int, ...], n_classes: int, head: list[LayerSpec] | None = None) -> ModelSpec:
    """Three conv/pool stages (64, 128, 128 filters), dense 256, then the head."""
    layers = []
    for filters in (64, 128, 128):
        layers += [
            LayerSpec(kind=LayerKind.conv2d_3x3, filters=filters),
            LayerSpec(kind=LayerKind.relu),
            LayerSpec(kind=LayerKind.batchnorm),
            LayerSpec(kind=LayerKind.maxpool_2x2),
        ]
    layers += [LayerSpec(kind=LayerKind.dense, units=256), LayerSpec(kind=LayerKind.relu)]
    return ModelSpec(
        input_shape=input_shape,
        layers=layers + (head or softmax_head(n_classes)),
        n_classes=n_classes,
    )


def mlp_spec(
    input_shape: tuple[int, ...],
    n_classes: int,
    head: list[LayerSpec] | None = None,
    hidden: tuple[int, ...] = (32, 32),
) -> ModelSpec:
    layers = []
    for units in hidden:
        layers += [LayerSpec(kind=LayerKind.dense, units=units), LayerSpec(kind=LayerKind.relu)]
    return ModelSpec(
        input_shape=input_shape,
        layers=layers + (head or softmax_head(n_classes)),
        n_classes=n_classes,
    )


def regression_spec(
    head: list[LayerSpec] | None = None,
    variance_head: list[LayerSpec] | None = None,
    hidden: tuple[int, ...] = (32, 32),
) -> ModelSpec:
    """1-D regressor; the variance head, when given, gets a softplus appended."""
    layers = []
    for units in hidden:
        layers += [LayerSpec(kind=LayerKind.dense, units=units), LayerSpec(kind=LayerKind.relu)]
    if variance_head is not None:
        variance_head = [*variance_head, LayerSpec(kind=LayerKind.softplus)]
    return ModelSpec(
        input_shape=(1,),
        layers=layers + (head or [LayerSpec(kind=LayerKind.dense, units=1)]),
        variance_head=variance_head,
    )
