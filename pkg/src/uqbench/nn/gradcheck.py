"""Central finite-difference checks of the analytic gradients."""

from collections.abc import Callable

import numpy as np

from ..schemas import LayerKind, LayerSpec, LossKind, ModelSpec, Mode, Tensor
from .layers import Layer, build_layer, inverse_softplus
from .losses import loss_binary_ce, loss_categorical_ce, loss_gaussian_nll, loss_mse
from .model import Network, build, mlp_spec, regression_spec
from .train import batch_loss

STEP = 1e-5
TOLERANCE = 1e-4
# Gradients below this magnitude are compared absolutely.
ERROR_FLOOR = 1e-4


def relative_error(analytic: Tensor, numeric: Tensor) -> float:
    if analytic.size == 0:
        return 0.0
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), ERROR_FLOOR)
    return float((np.abs(analytic - numeric) / scale).max())


def numeric_gradient(f: Callable[[], float], x: Tensor, h: float = STEP) -> Tensor:
    """d f / d x by central differences, perturbing ``x`` in place."""
    grad = np.empty_like(x)
    for i in np.ndindex(x.shape):
        original = x[i]
        x[i] = original + h
        plus = f()
        x[i] = original - h
        minus = f()
        x[i] = original
        grad[i] = (plus - minus) / (2.0 * h)
    return grad


def grad_check(
    net: Network,
    sample: tuple[np.ndarray, np.ndarray],
    loss: LossKind,
    mode: Mode = Mode.train,
    seed: int = 0,
    h: float = STEP,
    perturb: float = 0.0,
) -> float:
    """Worst relative error of the parameter gradients of ``loss`` on ``sample``.

    Every evaluation reuses the same random masks and restores the running
    state, so finite differences see the same function as the backward pass.
    """
    x, y = sample
    saved_state = {k: v.copy() for k, v in net.state().items()}

    def evaluate(backward: bool = False) -> float:
        for k, v in net.state().items():
            v[...] = saved_state[k]
        return batch_loss(net, x, y, loss, mode, np.random.default_rng(seed), backward=backward)

    evaluate(backward=True)
    analytic = {k: g.copy() * (1.0 + perturb) for k, g in net.gradients().items()}
    worst = 0.0
    for name, p in net.parameters().items():
        worst = max(worst, relative_error(analytic[name], numeric_gradient(evaluate, p, h)))
    evaluate()
    return worst


def check_layer(layer: Layer, x: Tensor, mode: Mode = Mode.train, seed: int = 0, perturb: float = 0.0) -> float:
    """Check input and parameter gradients of ``sum(layer(x) * R)`` for a random R."""
    projection = np.random.default_rng(seed + 1).normal(size=(len(x), *layer.out_shape))
    saved_state = {k: v.copy() for k, v in layer.state.items()}

    def evaluate() -> float:
        for k, v in layer.state.items():
            v[...] = saved_state[k]
        out = layer.forward(x, mode, np.random.default_rng(seed))
        return float((out * projection).sum())

    evaluate()
    input_grad, grads = layer.backward(projection)
    input_grad = input_grad * (1.0 + perturb)
    grads = {k: g.copy() * (1.0 + perturb) for k, g in grads.items()}
    worst = relative_error(input_grad, numeric_gradient(evaluate, x))
    for name, p in layer.params.items():
        worst = max(worst, relative_error(grads[name], numeric_gradient(evaluate, p)))
    return worst


def _away_from_zero(rng: np.random.Generator, shape: tuple[int, ...]) -> Tensor:
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(0.1, 1.0, size=shape)


def layer_cases(seed: int = 0) -> dict[LayerKind, tuple[Layer, Tensor]]:
    """One small randomised instance of every layer kind with an input batch."""
    rng = np.random.default_rng(seed)

    def make(kind: LayerKind, in_shape: tuple[int, ...], **fields) -> Layer:
        return build_layer(LayerSpec(kind=kind, **fields), in_shape, rng)

    cases: dict[LayerKind, tuple[Layer, Tensor]] = {}
    cases[LayerKind.dense] = (make(LayerKind.dense, (4,), units=3), rng.normal(size=(5, 4)))
    cases[LayerKind.conv2d_3x3] = (make(LayerKind.conv2d_3x3, (2, 5, 5), filters=3), rng.normal(size=(2, 2, 5, 5)))
    cases[LayerKind.maxpool_2x2] = (make(LayerKind.maxpool_2x2, (2, 4, 5)), rng.normal(size=(2, 2, 4, 5)))

    batchnorm = make(LayerKind.batchnorm, (3, 4, 4))
    batchnorm.params["gamma"][...] = rng.uniform(0.5, 1.5, size=3)
    batchnorm.params["beta"][...] = rng.normal(size=3)
    cases[LayerKind.batchnorm] = (batchnorm, rng.normal(size=(4, 3, 4, 4)))

    cases[LayerKind.relu] = (make(LayerKind.relu, (6,)), _away_from_zero(rng, (4, 6)))
    cases[LayerKind.softmax] = (make(LayerKind.softmax, (5,)), rng.normal(size=(3, 5)))
    cases[LayerKind.softplus] = (make(LayerKind.softplus, (5,)), rng.normal(size=(3, 5)))
    cases[LayerKind.dropout] = (make(LayerKind.dropout, (6,), drop_prob=0.3), rng.normal(size=(4, 6)))
    cases[LayerKind.dropconnect] = (
        make(LayerKind.dropconnect, (4,), units=3, drop_prob=0.3),
        rng.normal(size=(5, 4)),
    )

    flipout = make(LayerKind.flipout_dense, (4,), units=3)
    flipout.params["rho"][...] = inverse_softplus(0.3) + rng.normal(0.0, 0.1, size=flipout.params["rho"].shape)
    cases[LayerKind.flipout_dense] = (flipout, rng.normal(size=(5, 4)))

    rbf = make(LayerKind.rbf_output, (4,), units=3, centroid_dim=5, length_scale=0.5)
    rbf.params["W"][...] = rng.normal(0.0, 0.3, size=rbf.params["W"].shape)
    rbf.params["centroids"][...] = rng.normal(0.0, 0.3, size=rbf.params["centroids"].shape)
    cases[LayerKind.rbf_output] = (rbf, rng.normal(size=(5, 4)))
    return cases


def _check_loss(f: Callable[[], float], analytic: list[Tensor], inputs: list[Tensor], perturb: float) -> float:
    return max(
        relative_error(a * (1.0 + perturb), numeric_gradient(f, x)) for a, x in zip(analytic, inputs)
    )


def loss_cases(seed: int = 0, perturb: float = 0.0) -> dict[LossKind, float]:
    rng = np.random.default_rng(seed)
    errors = {}

    logits = rng.normal(size=(4, 5))
    labels = rng.integers(0, 5, size=4)

    def ce() -> float:
        shifted = np.exp(logits - logits.max(axis=1, keepdims=True))
        return loss_categorical_ce(shifted / shifted.sum(axis=1, keepdims=True), labels)[0]

    shifted = np.exp(logits - logits.max(axis=1, keepdims=True))
    _, grad = loss_categorical_ce(shifted / shifted.sum(axis=1, keepdims=True), labels)
    errors[LossKind.categorical_ce] = _check_loss(ce, [grad], [logits], perturb)

    outputs = rng.uniform(0.05, 0.95, size=(4, 3))
    targets = (rng.random((4, 3)) < 0.5).astype(np.float64)
    _, grad = loss_binary_ce(outputs, targets)
    errors[LossKind.binary_ce] = _check_loss(lambda: loss_binary_ce(outputs, targets)[0], [grad], [outputs], perturb)

    predictions = rng.normal(size=(6, 1))
    y = rng.normal(size=6)
    _, grad = loss_mse(predictions, y)
    errors[LossKind.mse] = _check_loss(lambda: loss_mse(predictions, y)[0], [grad], [predictions], perturb)

    mean = rng.normal(size=(6, 1))
    variance = rng.uniform(0.2, 2.0, size=(6, 1))
    _, (grad_mean, grad_var) = loss_gaussian_nll(mean, variance, y)
    errors[LossKind.gaussian_nll] = _check_loss(
        lambda: loss_gaussian_nll(mean, variance, y)[0],
        [grad_mean, grad_var],
        [mean, variance],
        perturb,
    )
    return errors


def model_cases(seed: int = 0, perturb: float = 0.0) -> dict[str, float]:
    """Whole-model checks: MLP classifier, small CNN in train mode, two-headed regressor."""
    rng = np.random.default_rng(seed)
    results = {}

    mlp = build(mlp_spec((3,), 3, hidden=(6,)), seed)
    results["mlp+ce"] = grad_check(
        mlp, (rng.normal(size=(5, 3)), rng.integers(0, 3, size=5)), LossKind.categorical_ce, perturb=perturb
    )

    small = [
        LayerSpec(kind=LayerKind.conv2d_3x3, filters=2),
        LayerSpec(kind=LayerKind.batchnorm),
        LayerSpec(kind=LayerKind.maxpool_2x2),
        LayerSpec(kind=LayerKind.dense, units=3),
        LayerSpec(kind=LayerKind.softmax),
    ]
    cnn = build(ModelSpec(input_shape=(1, 8, 8), layers=small, n_classes=3), seed)
    results["cnn+bn+ce"] = grad_check(
        cnn, (rng.normal(size=(4, 1, 8, 8)), rng.integers(0, 3, size=4)), LossKind.categorical_ce, perturb=perturb
    )

    regressor = build(regression_spec(variance_head=[LayerSpec(kind=LayerKind.dense, units=1)], hidden=(5, 5)), seed)
    results["regression+nll"] = grad_check(
        regressor, (rng.uniform(-4, 4, size=(6, 1)), rng.normal(size=6)), LossKind.gaussian_nll, perturb=perturb
    )
    return results


def run_suite(seed: int = 0, perturb: float = 0.0) -> dict[str, float]:
    """Worst relative error per layer kind, per loss and per whole-model check."""
    errors = {
        kind.value: check_layer(layer, x, seed=seed, perturb=perturb)
        for kind, (layer, x) in layer_cases(seed).items()
    }
    errors.update({kind.value: err for kind, err in loss_cases(seed, perturb).items()})
    errors.update({f"model:{name}": err for name, err in model_cases(seed, perturb).items()})
    return errors
