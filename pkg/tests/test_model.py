import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uast.errors import ConsistencyError, ContractError, NumericError, ParameterError, ShapeError
from uast.model import (
    UNLABELED,
    Dataset,
    Gradients,
    Layer,
    MlpModel,
    NllLoss,
    Sgd,
    backward,
    checkpoint_bytes,
    evaluate,
    forward,
    init_mlp,
    load_checkpoint,
    nll_loss,
    save_checkpoint,
    sgd_step,
)
from uast.numerics import SeededRng, finite_diff_grad, relative_error


def small_model(seed=0, d_in=3, hidden=(5, 4), c=3, att_rows=None):
    return init_mlp(d_in, c, SeededRng(seed), hidden=hidden, att_rows=att_rows)


def test_dims_must_chain():
    with pytest.raises(ShapeError):
        MlpModel([Layer(np.zeros((2, 3)), np.zeros(3)), Layer(np.zeros((4, 2)), np.zeros(2), "identity")])


def test_init_bounds_and_structure():
    m = small_model(att_rows=6)
    assert [l.activation for l in m.layers] == ["tanh", "tanh", "identity"]
    for l in m.layers:
        assert np.all(np.abs(l.weight) <= 1 / math.sqrt(l.d_in))
        assert np.all(l.bias == 0)
    assert m.att.shape == (6, 4)
    assert m.feature_dim == 4 and m.class_count == 3


# -- forward -------------------------------------------------------------------------


def test_forward_single_identity_layer_features_are_input():
    x = np.random.default_rng(0).normal(size=(4, 3))
    m = MlpModel([Layer(np.eye(3), np.zeros(3), "identity")])
    feats, logits = forward(m, x)
    assert np.array_equal(feats, x)
    assert np.array_equal(logits, x)


def test_forward_zero_params_give_zero_logits():
    m = MlpModel([Layer(np.zeros((2, 3)), np.zeros(3), "tanh"), Layer(np.zeros((3, 2)), np.zeros(2), "identity")])
    _, logits = forward(m, np.ones((5, 2)))
    assert np.array_equal(logits, np.zeros((5, 2)))


def test_forward_matches_hand_unrolled_layers():
    w1 = np.array([[0.5, -1.0], [0.25, 2.0]])
    b1 = np.array([0.1, -0.2])
    w2 = np.array([[1.0, -1.0, 0.5], [0.3, 0.2, -0.7]])
    b2 = np.array([0.0, 0.1, 0.2])
    m = MlpModel([Layer(w1, b1, "tanh"), Layer(w2, b2, "identity")])
    x = np.array([[1.0, 2.0], [-0.5, 0.0]])
    for row, (f, lg) in zip(x, zip(*forward(m, x))):
        h = [math.tanh(row[0] * w1[0, j] + row[1] * w1[1, j] + b1[j]) for j in range(2)]
        out = [h[0] * w2[0, j] + h[1] * w2[1, j] + b2[j] for j in range(3)]
        assert np.allclose(f, h, atol=1e-15)
        assert np.allclose(lg, out, atol=1e-15)


def test_forward_shape_error_and_determinism():
    m = small_model()
    with pytest.raises(ShapeError):
        forward(m, np.ones((2, 4)))
    x = np.random.default_rng(1).normal(size=(7, 3))
    a, b = forward(m, x), forward(m, x)
    assert np.array_equal(a[1], b[1])


# -- loss ----------------------------------------------------------------------------


def test_nll_examples():
    assert nll_loss([[0.0, 0.0]], [1]) == pytest.approx(math.log(2), abs=1e-15)
    assert nll_loss([[1000.0, 0.0]], [0]) <= 1e-9
    logits = np.array([[1.0, 2.0, 0.5], [0.0, -1.0, 3.0], [2.0, 2.0, 2.0]])
    labels = [0, 2, 1]
    manual = []
    for row, y in zip(logits, labels):
        manual.append(-(row[y] - math.log(sum(math.exp(v) for v in row))))
    assert nll_loss(logits, labels) == pytest.approx(sum(manual) / 3, rel=1e-14)


def test_nll_rejects_unlabeled():
    with pytest.raises(ContractError):
        nll_loss([[0.0, 1.0]], [UNLABELED])


# -- backward ------------------------------------------------------------------------


def test_backward_saturated_correct_prediction_is_flat():
    m = MlpModel([Layer(np.array([[100.0, -100.0]]), np.zeros(2), "identity")])
    g = backward(m, np.array([[1.0]]), NllLoss(np.array([0])))
    assert max(np.max(np.abs(a)) for a in g.arrays()) <= 1e-12


def test_backward_linear_softmax_closed_form():
    rng = np.random.default_rng(3)
    w, b, x = rng.normal(size=(4, 3)), rng.normal(size=3), rng.normal(size=(1, 4))
    m = MlpModel([Layer(w, b, "identity")])
    g = backward(m, x, NllLoss(np.array([2])))
    p = np.exp(x @ w + b)
    p /= p.sum()
    delta = p - np.eye(3)[2]
    assert np.allclose(g.weights[0], np.outer(x[0], delta[0]), atol=1e-14)
    assert np.allclose(g.biases[0], delta[0], atol=1e-14)


def _param_loss(model, x, labels, weights, layer, which):
    def f(p):
        trial = model.copy()
        if which == "w":
            trial.layers[layer].weight = p
        else:
            trial.layers[layer].bias = p.reshape(-1)
        _, logits = forward(trial, x)
        return nll_loss(logits, labels, weights)
    return f


@pytest.mark.parametrize("seed", range(20))
def test_backward_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    model = small_model(seed, d_in=4, hidden=(6, 5), c=3)
    # perturb biases so their gradients are generic
    for l in model.layers:
        l.bias[:] = rng.normal(scale=0.3, size=l.d_out)
    x = rng.normal(size=(8, 4))
    labels = rng.integers(0, 3, 8)
    weights = rng.uniform(0.5, 2.0, 8)
    g = backward(model, x, NllLoss(labels, weights))
    for i, layer in enumerate(model.layers):
        num_w = finite_diff_grad(_param_loss(model, x, labels, weights, i, "w"), layer.weight, 1e-5)
        num_b = finite_diff_grad(_param_loss(model, x, labels, weights, i, "b"), layer.bias[None, :], 1e-5)
        assert relative_error(g.weights[i], num_w) <= 1e-4
        assert relative_error(g.biases[i], num_b[0]) <= 1e-4


def test_backward_non_finite_reports_layer():
    m = MlpModel([Layer(np.array([[np.inf, 0.0]]), np.zeros(2), "identity")])
    with pytest.raises(NumericError, match="layer 0"), np.errstate(invalid="ignore"):
        backward(m, np.array([[1.0]]), NllLoss(np.array([0])))


# -- SGD -----------------------------------------------------------------------------


def scalar_model(w):
    return MlpModel([Layer(np.array([[w]]), np.zeros(1), "identity")])


def scalar_grads(g):
    return Gradients([np.array([[g]])], [np.zeros(1)])


def test_sgd_zero_gradient_leaves_params():
    m = small_model()
    before = [p.copy() for p in m.params()]
    sgd_step(m, Gradients([np.zeros_like(l.weight) for l in m.layers], [np.zeros_like(l.bias) for l in m.layers]),
             lr=0.1, momentum=0.9, weight_decay=0.0)
    assert all(np.array_equal(a, b) for a, b in zip(before, m.params()))


def test_sgd_single_step_arithmetic():
    m = sgd_step(scalar_model(1.0), scalar_grads(2.0), lr=0.1)
    assert m.layers[0].weight[0, 0] == pytest.approx(0.8, abs=1e-15)


def test_sgd_momentum_recurrence():
    m = scalar_model(1.0)
    opt = Sgd(0.1, 0.9, 0.01)
    for _ in range(2):
        sgd_step(m, scalar_grads(2.0), 0.1, optimizer=opt)
    w, v = 1.0, 0.0
    for _ in range(2):
        v = 0.9 * v - 0.1 * (2.0 + 0.01 * w)
        w += v
    assert m.layers[0].weight[0, 0] == pytest.approx(w, abs=1e-15)


def test_sgd_rejects_bad_settings_and_non_finite():
    with pytest.raises(ParameterError):
        Sgd(0.1, momentum=1.0)
    with pytest.raises(NumericError):
        sgd_step(scalar_model(1.0), scalar_grads(np.inf), lr=0.1)


def blob_data(seed, n=100):
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 2
    x = rng.normal(scale=0.5, size=(n, 2)) + np.where(y[:, None] == 0, -2.0, 2.0)
    return x, y


def test_nll_decreases_monotonically_on_separable_blobs():
    monotone = 0
    for seed in range(20):
        x, y = blob_data(seed)
        m = small_model(seed, d_in=2, hidden=(32, 32), c=2)
        opt = Sgd(0.05, 0.9)
        losses = []
        for _ in range(200):
            g = backward(m, x, NllLoss(y))
            losses.append(g.loss)
            opt.update(m.params(), g.arrays())
        monotone += all(b <= a for a, b in zip(losses, losses[1:]))
    assert monotone >= 18


# -- evaluation ----------------------------------------------------------------------


def one_layer_predicting(preds, c):
    # features are one-hot row ids; weights route each row to its predicted class
    n = len(preds)
    w = np.zeros((n, c))
    w[np.arange(n), preds] = 1.0
    return MlpModel([Layer(w, np.zeros(c), "identity")]), np.eye(n)


def test_evaluate_matches_hand_counted_confusion():
    truth = np.array([0, 0, 0, 0, 0, 0, 0, 1, 1, 1, 1, 1, 1, 2, 2, 2, 2, 2, 2, 2])
    preds = np.array([0, 0, 0, 0, 1, 2, 0, 1, 1, 1, 0, 1, 2, 2, 2, 2, 2, 0, 1, 2])
    model, x = one_layer_predicting(preds, 3)
    rep = evaluate(model, Dataset(x, truth, 3))
    # class 0: 5 of 7 right; class 1: 4 of 6; class 2: 5 of 7
    assert rep["confusion"] == [[5, 1, 1], [1, 4, 1], [1, 1, 5]]
    assert np.allclose(rep["per_class_accuracy"], [5 / 7, 4 / 6, 5 / 7], atol=1e-15)
    assert rep["mean_class_accuracy"] == pytest.approx((5 / 7 + 4 / 6 + 5 / 7) / 3, abs=1e-12)
    assert rep["overall_accuracy"] == pytest.approx(14 / 20)


def test_evaluate_constant_predictor_on_balanced_set():
    truth = np.array([0, 1] * 10)
    model, x = one_layer_predicting(np.zeros(20, dtype=int), 2)
    assert evaluate(model, Dataset(x, truth, 2))["mean_class_accuracy"] == 0.5


def test_evaluate_dimension_mismatch():
    with pytest.raises(ConsistencyError):
        evaluate(small_model(), Dataset(np.ones((3, 5)), [0, 1, 2], 3))


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=1, max_size=40))
def test_evaluate_mean_is_unweighted_class_mean(pairs):
    truth = np.array([t for t, _ in pairs])
    preds = np.array([p for _, p in pairs])
    model, x = one_layer_predicting(preds, 4)
    rep = evaluate(model, Dataset(x, truth, 4))
    present = [a for a in rep["per_class_accuracy"] if a is not None]
    assert abs(rep["mean_class_accuracy"] - sum(present) / len(present)) <= 1e-12


def test_dataset_rejects_out_of_range_labels():
    with pytest.raises(ConsistencyError):
        Dataset(np.ones((2, 2)), [0, 2], 2)


# -- checkpoints ---------------------------------------------------------------------


@pytest.mark.parametrize("suffix", [".uast", ".json"])
def test_checkpoint_round_trip(tmp_path, suffix):
    m = small_model(4, att_rows=6)
    path = tmp_path / f"model{suffix}"
    save_checkpoint(m, path)
    back = load_checkpoint(path)
    assert len(back.layers) == len(m.layers)
    for a, b in zip(m.layers, back.layers):
        assert np.array_equal(a.weight, b.weight) and np.array_equal(a.bias, b.bias)
        assert a.activation == b.activation
    assert np.array_equal(back.att, m.att)


def test_checkpoint_binary_header():
    m = small_model()
    raw = checkpoint_bytes(m)
    assert raw.startswith(b"UAST1")
    assert int.from_bytes(raw[5:9], "little") == 3  # layer count
    assert int.from_bytes(raw[9:13], "little") == 3  # class count
