import numpy as np
import pytest

from uqbench.datasets import make_two_moons
from uqbench.methods import (
    EmptyScoresError,
    MissingStochasticLayerError,
    NotAnRbfModelError,
    aggregate,
    duq_forward,
    duq_to_probs,
    fit_method,
    gradient_to_confidence,
    gradient_uncertainty,
    method_spec,
    predict_baseline,
    predict_duq,
    predict_ensemble,
    predict_mc,
    train_ensemble,
)
from uqbench.nn.model import Network, build, mlp_spec
from uqbench.schemas import Aggregator, LayerKind, Method, MethodConfig, Mode, TrainConfig


def spec_for(method: Method, **fields):
    return method_spec(MethodConfig(method=method, **fields), "mlp", (2,), 2)


def constant_model(bias: list[float]) -> Network:
    net = build(mlp_spec((2,), 2, hidden=(4,)), seed=0)
    last = net.layers[-2]
    last.params["W"][...] = 0.0
    last.params["b"][...] = bias
    return net


def test_baseline_with_zeroed_output_is_uniform(rng):
    pred = predict_baseline(constant_model([0.0, 0.0]), rng.normal(size=(4, 2)))
    np.testing.assert_array_equal(pred.probs, np.full((4, 2), 0.5))
    assert pred.method is Method.baseline


def test_baseline_is_the_eval_forward(rng):
    net = build(spec_for(Method.baseline), seed=3)
    x = rng.normal(size=(5, 2))
    np.testing.assert_allclose(predict_baseline(net, x).probs, net.forward(x, Mode.eval), rtol=0, atol=1e-12)


@pytest.mark.parametrize("method", [Method.dropout, Method.dropconnect])
def test_mc_with_zero_drop_probability_is_baseline(method, rng):
    net = build(spec_for(method, drop_prob=0.0), seed=0)
    x = rng.normal(size=(6, 2))
    pred = predict_mc(net, x, 5, method.value, np.random.default_rng(0))
    deterministic = net.forward(x, Mode.eval, np.random.default_rng(1))
    np.testing.assert_allclose(pred.probs, deterministic, rtol=0, atol=1e-12)
    assert pred.method is method


def test_mc_single_pass_is_one_stochastic_forward(rng):
    net = build(spec_for(Method.dropout, drop_prob=0.5), seed=0)
    x = rng.normal(size=(3, 2))
    pred = predict_mc(net, x, 1, "dropout", np.random.default_rng(9))
    (child,) = np.random.default_rng(9).spawn(1)
    np.testing.assert_array_equal(pred.probs, net.forward(x, Mode.eval, child))


def test_mc_average_replays_scripted_passes(rng):
    net = build(spec_for(Method.dropconnect, drop_prob=0.3), seed=0)
    x = rng.normal(size=(4, 2))
    pred = predict_mc(net, x, 50, "dropconnect", np.random.default_rng(5))
    passes = [net.forward(x, Mode.eval, child) for child in np.random.default_rng(5).spawn(50)]
    np.testing.assert_allclose(pred.probs, np.mean(passes, axis=0), rtol=0, atol=1e-12)


def test_more_passes_reduce_monte_carlo_variance(rng):
    net = build(spec_for(Method.dropout, drop_prob=0.5), seed=0)
    x = rng.normal(size=(1, 2))

    def spread(n_samples: int) -> float:
        means = [predict_mc(net, x, n_samples, "dropout", np.random.default_rng(r)).probs[0, 0] for r in range(50)]
        return float(np.var(means))

    assert spread(50) <= spread(5)


def test_mc_needs_an_eval_time_stochastic_layer(rng):
    net = build(spec_for(Method.baseline), seed=0)
    with pytest.raises(MissingStochasticLayerError):
        predict_mc(net, rng.normal(size=(2, 2)), 3, "dropout", rng)


def test_flipout_mc_prediction(rng):
    net = build(spec_for(Method.flipout), seed=0)
    pred = predict_mc(net, rng.normal(size=(3, 2)), 4, "flipout", rng)
    assert pred.method is Method.flipout
    np.testing.assert_allclose(pred.probs.sum(axis=1), 1.0)


def test_ensemble_of_identical_members_is_baseline(rng):
    net = build(spec_for(Method.deepensemble), seed=0)
    x = rng.normal(size=(5, 2))
    np.testing.assert_allclose(predict_ensemble([net], x).probs, predict_baseline(net, x).probs, rtol=0, atol=1e-12)
    np.testing.assert_allclose(predict_ensemble([net, net, net], x).probs, predict_baseline(net, x).probs, rtol=0, atol=1e-12)


def test_ensemble_of_opposite_members_is_uniform(rng):
    members = [constant_model([50.0, -50.0]), constant_model([-50.0, 50.0])]
    pred = predict_ensemble(members, rng.normal(size=(3, 2)))
    np.testing.assert_allclose(pred.probs, 0.5, rtol=0, atol=1e-12)


def test_ensemble_is_the_elementwise_member_average(rng):
    members = [build(spec_for(Method.deepensemble), seed=s) for s in range(5)]
    x = rng.normal(size=(4, 2))
    expected = np.mean([m.forward(x, Mode.eval) for m in members], axis=0)
    np.testing.assert_allclose(predict_ensemble(members, x).probs, expected, rtol=0, atol=1e-12)


def test_train_ensemble_members_differ():
    data = make_two_moons(10, seed=0)
    members = train_ensemble(spec_for(Method.deepensemble), data, TrainConfig(epochs=1, seed=0), 2)
    assert len(members) == 2
    assert not np.array_equal(members[0].parameters()["0.W"], members[1].parameters()["0.W"])


def test_duq_to_probs():
    np.testing.assert_allclose(duq_to_probs(np.array([[1.0, 1.0]])), [[0.5, 0.5]])
    np.testing.assert_allclose(duq_to_probs(np.array([[0.8, 0.2]])), [[0.8, 0.2]])


def test_duq_underflow_gives_uniform_with_a_warning(log_messages):
    probs = duq_to_probs(np.array([[0.0, 0.0, 0.0], [0.2, 0.6, 0.2]]))
    np.testing.assert_allclose(probs[0], 1 / 3)
    np.testing.assert_allclose(probs[1], [0.2, 0.6, 0.2])
    assert any("underflowed" in m for m in log_messages)


def test_duq_probs_sum_to_one(rng):
    probs = duq_to_probs(rng.uniform(1e-6, 1.0, size=(50, 10)))
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, rtol=0, atol=1e-12)


def test_duq_prediction_keeps_kernels(rng):
    net = build(spec_for(Method.duq), seed=0)
    pred = predict_duq(net, rng.normal(size=(6, 2)))
    assert ((pred.kernels > 0) & (pred.kernels <= 1)).all()
    np.testing.assert_array_equal(pred.kernels.argmax(axis=1), pred.probs.argmax(axis=1))


def test_duq_needs_an_rbf_head(rng):
    with pytest.raises(NotAnRbfModelError):
        duq_forward(build(spec_for(Method.baseline), seed=0), rng.normal(size=(1, 2)))


def test_aggregators():
    v = np.array([1.0, -2.0, 3.0])
    assert aggregate(v, Aggregator.l1) == 6.0
    assert aggregate(v, Aggregator.l2) == pytest.approx(np.sqrt(14.0))
    assert aggregate(v, Aggregator.mean) == pytest.approx(2.0 / 3.0)
    assert aggregate(v, Aggregator.std) == pytest.approx(np.std(v))
    assert aggregate(v, Aggregator.min) == -2.0
    assert aggregate(v, Aggregator.max) == 3.0


def test_one_hot_output_has_zero_gradient(rng):
    net = constant_model([1000.0, -1000.0])
    scores, probs = gradient_uncertainty(net, rng.normal(size=(3, 2)), Aggregator.l1)
    np.testing.assert_array_equal(scores, 0.0)
    assert gradient_uncertainty(net, rng.normal(size=(1, 2)), Aggregator.l2)[0][0] == 0.0
    np.testing.assert_array_equal(probs[:, 0], 1.0)


def test_identical_samples_get_identical_scores(rng):
    net = build(spec_for(Method.gradient), seed=0)
    x = np.repeat(rng.normal(size=(1, 2)), 3, axis=0)
    scores, _ = gradient_uncertainty(net, x)
    assert scores[0] == scores[1] == scores[2]


def test_gradient_to_confidence():
    (p,) = gradient_to_confidence(np.array([0.0, 5.0, 10.0]))
    np.testing.assert_allclose(p, [1.0, 0.5, 0.0])
    (p,) = gradient_to_confidence(np.array([3.0, 3.0]))
    np.testing.assert_array_equal(p, [1.0, 1.0])


def test_zero_gradient_sample_gets_full_confidence():
    p_zero, p_other = gradient_to_confidence(np.array([0.0]), np.array([2.0, 4.0]))
    assert p_zero[0] == 1.0
    np.testing.assert_allclose(p_other, [0.5, 0.0])


def test_gradient_to_confidence_rejects_empty_input():
    with pytest.raises(EmptyScoresError):
        gradient_to_confidence(np.array([]))


@pytest.mark.parametrize(
    "method, last_kinds",
    [
        (Method.baseline, [LayerKind.dense, LayerKind.softmax]),
        (Method.dropout, [LayerKind.dropout, LayerKind.dense, LayerKind.softmax]),
        (Method.dropconnect, [LayerKind.dropconnect, LayerKind.softmax]),
        (Method.flipout, [LayerKind.flipout_dense, LayerKind.softmax]),
        (Method.duq, [LayerKind.rbf_output]),
    ],
)
def test_method_heads(method, last_kinds):
    layers = spec_for(method).layers
    assert [layer.kind for layer in layers[-len(last_kinds) :]] == last_kinds


def test_cnn_method_spec():
    spec = method_spec(MethodConfig(method=Method.dropout), "cnn", (1, 28, 28), 10)
    assert spec.layers[0].kind is LayerKind.conv2d_3x3
    assert spec.layers[-3].stochastic_eval


@pytest.mark.parametrize("method", list(Method))
def test_fit_and_predict_every_method(method, rng):
    data = make_two_moons(8, seed=0)
    cfg = MethodConfig(method=method, mc_samples=3, ensemble_size=2)
    predictor = fit_method(cfg, method_spec(cfg, "mlp", (2,), 2), data, TrainConfig(epochs=2, batch_size=4))
    pred = predictor.predict(rng.normal(size=(7, 2)), rng, batch_size=3)
    assert len(pred) == 7
    np.testing.assert_allclose(pred.probs.sum(axis=1), 1.0, atol=1e-6)
    assert (pred.confidence is not None) == (method is Method.gradient)
    assert (pred.kernels is not None) == (method is Method.duq)


def test_chunked_prediction_matches_single_batch(rng):
    data = make_two_moons(8, seed=0)
    cfg = MethodConfig(method=Method.baseline)
    predictor = fit_method(cfg, method_spec(cfg, "mlp", (2,), 2), data, TrainConfig(epochs=1))
    x = rng.normal(size=(10, 2))
    chunked = predictor.predict(x, np.random.default_rng(0), batch_size=3)
    whole = predictor.predict(x, np.random.default_rng(0), batch_size=100)
    np.testing.assert_allclose(chunked.probs, whole.probs, rtol=0, atol=1e-12)
