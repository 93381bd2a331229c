import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from difflab import nn
from difflab.numerics import RngStream
from oracles import central_difference, loop_forward, relative_error


def small_net(seed, activation="tanh", dims=(5, 7, 6, 3)):
    return nn.Mlp.init(list(dims), RngStream(seed), activation)


def test_zero_network_outputs_zero():
    m = nn.Mlp.zeros([4, 3, 2])
    assert np.array_equal(nn.forward(m, np.ones(4)), np.zeros(2))


def test_identity_layer():
    m = nn.Mlp([3, 3], [np.eye(3)], [np.zeros(3)])
    x = np.array([0.3, -2.0, 5.0])
    assert np.array_equal(nn.forward(m, x), x)


@pytest.mark.parametrize("activation", ["tanh", "relu"])
def test_forward_matches_loop_oracle(activation):
    m = small_net(3, activation)
    x = RngStream(4).normal(5)
    ref = loop_forward(m.layer_dims, m.weights, m.biases, activation, x)
    np.testing.assert_allclose(nn.forward(m, x), ref, rtol=1e-12, atol=1e-12)


def test_batch_forward_equals_rowwise():
    m = small_net(1)
    xb = RngStream(2).normal((6, 5))
    np.testing.assert_allclose(nn.forward(m, xb), np.stack([nn.forward(m, r) for r in xb]), atol=1e-14)


def test_forward_rejects_wrong_width():
    with pytest.raises(ValueError):
        nn.forward(small_net(0), np.ones(4))


def test_mlp_rejects_inconsistent_shapes():
    with pytest.raises(ValueError):
        nn.Mlp([3, 2], [np.zeros((2, 3))], [np.zeros(2)])
    with pytest.raises(ValueError):
        nn.Mlp([3, 2], [np.zeros((3, 2))], [np.zeros(2)], "sigmoid")


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("activation", ["tanh", "relu"])
def test_backward_matches_finite_differences(seed, activation):
    m = small_net(seed, activation)
    r = RngStream(100 + seed)
    x = r.normal((4, 5))
    g_out = r.normal((4, 3))

    def loss():
        return float((nn.forward(m, x) * g_out).sum())

    grads = nn.backward(m, x, g_out)
    for p, g in zip(m.params(), grads.params()):
        assert relative_error(g, central_difference(loss, p)) <= 1e-4
    assert relative_error(grads.input, central_difference(loss, x)) <= 1e-4


def test_zero_output_grad_gives_zero_gradients():
    m = small_net(2)
    grads = nn.backward(m, np.ones(5), np.zeros(3))
    assert all(not g.any() for g in grads.params())
    assert not grads.input.any()


def test_linear_layer_input_gradient_closed_form():
    r = RngStream(5)
    w, b = r.normal((4, 3)), r.normal(3)
    m = nn.Mlp([4, 3], [w], [b])
    g = r.normal(3)
    np.testing.assert_allclose(nn.backward(m, r.normal(4), g).input, w @ g, atol=1e-14)


def test_backward_shape_mismatch():
    with pytest.raises(ValueError):
        nn.backward(small_net(0), np.ones(5), np.ones(2))


def test_gradients_mirror_model_shapes():
    m = small_net(0)
    grads = nn.backward(m, np.ones((2, 5)), np.ones((2, 3)))
    assert [g.shape for g in grads.params()] == [p.shape for p in m.params()]


def test_cross_entropy_uniform_logits():
    loss, grad = nn.cross_entropy_with_grad(np.zeros(5), 2)
    assert loss == pytest.approx(math.log(5), abs=1e-12)
    assert abs(grad.sum()) < 1e-12


def test_cross_entropy_gradient_is_softmax_minus_onehot():
    z = RngStream(1).normal(4)
    _, g = nn.cross_entropy_with_grad(z, 1)
    expected = np.exp(z) / np.exp(z).sum()
    expected[1] -= 1.0
    np.testing.assert_allclose(g, expected, atol=1e-14)


@pytest.mark.parametrize("seed", range(5))
def test_cross_entropy_finite_differences(seed):
    z = RngStream(seed).normal((3, 6)) * 3
    labels = np.array([0, 5, 2])
    _, g = nn.cross_entropy_with_grad(z, labels)
    fd = central_difference(lambda: nn.cross_entropy_with_grad(z, labels)[0], z, h=1e-5)
    np.testing.assert_allclose(g, fd, atol=1e-6)


def test_cross_entropy_label_out_of_range():
    with pytest.raises(ValueError):
        nn.cross_entropy_with_grad(np.zeros(3), 3)
    with pytest.raises(ValueError):
        nn.cross_entropy_with_grad(np.zeros((2, 3)), [0, -1])


def test_cross_entropy_extreme_logits_finite():
    loss, g = nn.cross_entropy_with_grad(np.array([1000.0, -1000.0]), 1)
    assert math.isfinite(loss) and np.all(np.isfinite(g))


# -- optimizer --------------------------------------------------------------------

def _zero_grads(m):
    return nn.Gradients([np.zeros_like(w) for w in m.weights], [np.zeros_like(b) for b in m.biases])


def test_zero_gradients_leave_parameters_unchanged():
    m = small_net(0)
    before = [p.copy() for p in m.params()]
    state = nn.OptimizerState.for_model(m)
    nn.optimizer_step(state, m, _zero_grads(m))
    assert all(np.array_equal(a, b) for a, b in zip(before, m.params()))
    assert state.step == 1


def test_adam_step_reduces_scalar_quadratic():
    m = nn.Mlp([1, 1], [np.array([[2.0]])], [np.array([0.0])])
    state = nn.OptimizerState.for_model(m, lr=0.1)

    def loss():
        return float(m.weights[0][0, 0] ** 2)

    before = loss()
    grads = nn.Gradients([2 * m.weights[0]], [np.zeros(1)])
    nn.optimizer_step(state, m, grads)
    assert loss() < before
    # first Adam step moves by exactly lr * sign(g)
    assert m.weights[0][0, 0] == pytest.approx(1.9, abs=1e-6)


def test_optimizer_is_deterministic():
    def run():
        m = small_net(4)
        state = nn.OptimizerState.for_model(m, lr=0.01)
        r = RngStream(8)
        for _ in range(5):
            x, g = r.normal((3, 5)), r.normal((3, 3))
            nn.optimizer_step(state, m, nn.backward(m, x, g))
        return m.params()

    assert all(np.array_equal(a, b) for a, b in zip(run(), run()))


def test_optimizer_shape_mismatch():
    m = small_net(0)
    other = small_net(0, dims=(5, 4, 3))
    with pytest.raises(ValueError):
        nn.optimizer_step(nn.OptimizerState.for_model(m), m, _zero_grads(other))
    with pytest.raises(ValueError):
        nn.optimizer_step(nn.OptimizerState.for_model(other), m, _zero_grads(m))


def test_train_classifier_learns_separable_data():
    r = RngStream(0)
    y = np.arange(400) % 2
    x = r.normal((400, 2)) * 0.3 + np.where(y[:, None] == 1, 1.5, -1.5)
    m = nn.train_classifier(nn.Mlp.init([2, 16, 2], r.derive("init")), x, y, epochs=20, rng=r.derive("t"),
                            lr=1e-2)
    assert np.mean(nn.predict(m, x) == y) >= 0.99


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    m = small_net(6, "relu")
    path = tmp_path / "m.npz"
    nn.save_mlp(m, path)
    loaded = nn.load_mlp(path)
    x = RngStream(1).normal((7, 5))
    assert np.array_equal(nn.forward(m, x), nn.forward(loaded, x))
    assert loaded.layer_dims == m.layer_dims and loaded.activation == "relu"


def test_checkpoint_version_checked(tmp_path):
    import json
    path = tmp_path / "m.npz"
    meta = {"version": 99, "layer_dims": [1, 1], "activation": "relu"}
    np.savez(path, meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8),
             p0=np.zeros((1, 1)), p1=np.zeros(1))
    with pytest.raises(ValueError):
        nn.load_mlp(path)


@given(hnp.arrays(np.float64, 5, elements=st.floats(-1e6, 1e6)),
       st.sampled_from(["tanh", "relu"]), st.integers(0, 2 ** 32))
@settings(max_examples=50, deadline=None)
def test_forward_finite_for_finite_input(x, activation, seed):
    out = nn.forward(small_net(seed, activation), x)
    assert np.all(np.isfinite(out))
