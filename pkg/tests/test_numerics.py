import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from disease_atlas import numerics as nx


def _grad_check(build, arrays_, tol=1e-5):
    """Compare backward() against central differences for every array in ``arrays_``."""
    leaves = [nx.Tensor(a, requires_grad=True) for a in arrays_]
    with nx.Graph():
        loss = build(*leaves)
    grads = nx.backward(loss)

    def f():
        return float(build(*[nx.Tensor(a) for a in arrays_]).value.sum())

    for leaf, a in zip(leaves, arrays_):
        num = nx.numeric_gradient(f, a)
        assert nx.relative_error(grads[leaf], num) < tol


class TestAffine:
    def test_identity(self):
        out = nx.affine(nx.Tensor([1.0, 2.0]), nx.Tensor(np.eye(2)), nx.Tensor([0.0, 0.0]))
        np.testing.assert_array_equal(out.value, [1.0, 2.0])

    def test_forced_zero(self):
        out = nx.affine(nx.Tensor([1.0, 1.0]), nx.Tensor([[2.0, 3.0]]), nx.Tensor([-5.0]))
        np.testing.assert_array_equal(out.value, [0.0])

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(nx.DimensionError, match=r"\(2, 3\).*\(2,\)|\(2,\).*\(2, 3\)"):
            nx.affine(nx.Tensor([1.0, 2.0]), nx.Tensor(np.ones((2, 3))), nx.Tensor([0.0, 0.0]))

    def test_weight_gradient_matches_differences(self):
        rng = np.random.default_rng(0)
        W, x, a = rng.normal(size=(4, 3)), rng.normal(size=3), rng.normal(size=4)
        _grad_check(lambda W_, x_, a_: nx.affine(x_, W_, a_).sum(), [W, x, a], tol=1e-6)

    def test_batched_rows(self):
        rng = np.random.default_rng(1)
        W, X, a = rng.normal(size=(4, 3)), rng.normal(size=(5, 3)), rng.normal(size=4)
        out = nx.affine(nx.Tensor(X), nx.Tensor(W), nx.Tensor(a))
        np.testing.assert_allclose(out.value, X @ W.T + a, rtol=0, atol=1e-14)


class TestActivations:
    def test_softplus_zero(self):
        assert nx.softplus(nx.Tensor(0.0)).item() == pytest.approx(math.log(2.0), abs=1e-15)

    def test_elu_and_sigmoid_at_zero(self):
        assert nx.elu(nx.Tensor(0.0)).item() == 0.0
        assert nx.sigmoid(nx.Tensor(0.0)).item() == 0.5

    def test_softplus_large_argument(self):
        ref = 50.0 + math.log1p(math.exp(-50.0))  # high-precision closed form
        assert nx.softplus(nx.Tensor(50.0)).item() == pytest.approx(ref, rel=1e-15)
        with np.errstate(over="raise"):
            assert np.isfinite(nx.softplus(nx.Tensor([800.0, -800.0])).value).all()

    def test_elu_negative_branch(self):
        v = np.array([-1.0, -0.5, 2.0])
        np.testing.assert_allclose(nx.elu(nx.Tensor(v)).value, [math.expm1(-1.0), math.expm1(-0.5), 2.0])

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            nx.activate(nx.Tensor(1.0), "relu6")

    @pytest.mark.parametrize("kind", ["elu", "sigmoid", "softplus", "tanh"])
    def test_activation_gradients(self, kind):
        x = np.random.default_rng(2).uniform(-2, 2, size=7)
        _grad_check(lambda t: nx.activate(t, kind).sum(), [x])


class TestBackward:
    def test_sigmoid_slope_at_zero(self):
        w = nx.Tensor(0.0, requires_grad=True)
        with nx.Graph():
            loss = nx.sigmoid(w)
        assert nx.backward(loss)[w] == pytest.approx(0.25, abs=1e-15)

    def test_linear_sum(self):
        x = np.array([1.0, -2.0, 3.0])
        W = nx.Tensor(np.zeros((2, 3)), requires_grad=True)
        with nx.Graph():
            loss = nx.affine(nx.Tensor(x), W, nx.Tensor(np.zeros(2))).sum()
        np.testing.assert_array_equal(nx.backward(loss)[W], np.outer(np.ones(2), x))

    def test_reused_leaf_accumulates(self):
        w = nx.Tensor(3.0, requires_grad=True)
        with nx.Graph():
            loss = w * w + w
        assert nx.backward(loss)[w] == pytest.approx(7.0)

    def test_three_layer_composition(self):
        rng = np.random.default_rng(3)
        W1, W2, W3 = rng.uniform(-1, 1, (5, 4)), rng.uniform(-1, 1, (3, 5)), rng.uniform(-1, 1, (1, 3))
        x = rng.uniform(-2, 2, (1, 4))

        def net(a, b, c):
            h = nx.elu(nx.linear(nx.Tensor(x), a))
            h = nx.softplus(nx.linear(h, b))
            return nx.sigmoid(nx.linear(h, c)).sum()

        _grad_check(net, [W1, W2, W3])

    def test_outside_graph_is_usage_error(self):
        w = nx.Tensor(1.0, requires_grad=True)
        with pytest.raises(nx.GraphUsageError):
            nx.backward(nx.exp(w))

    def test_non_scalar_loss_rejected(self):
        w = nx.Tensor(np.ones(3), requires_grad=True)
        with nx.Graph():
            y = nx.exp(w)
        with pytest.raises(nx.GraphUsageError):
            nx.backward(y)

    def test_nothing_recorded_outside_graph(self):
        w = nx.Tensor(np.ones(3), requires_grad=True)
        y = nx.exp(w) * 2.0
        assert not y.tracked and y.parents == ()

    def test_take_and_concat_gradients(self):
        rng = np.random.default_rng(4)
        A, B = rng.normal(size=(4, 3)), rng.normal(size=(4, 2))
        idx = np.array([0, 2, 2, 3])
        _grad_check(lambda a, b: nx.square(nx.take(nx.concat([a, b], axis=1), idx)).sum()
                    + nx.take(a, (slice(1, 3), 0)).sum(), [A, B])

    def test_division_clip_maximum_log(self):
        rng = np.random.default_rng(5)
        a, b = rng.uniform(0.5, 2, 6), rng.uniform(0.5, 2, 6)
        _grad_check(lambda x, y: nx.log(nx.maximum(x / y, 1e-3)).sum() + nx.clip(x - y, -0.3, 0.3).sum(),
                    [a, b])

    def test_broadcast_bias_gradient(self):
        rng = np.random.default_rng(6)
        X, bias = rng.normal(size=(5, 3)), rng.normal(size=3)
        _grad_check(lambda x, c: nx.tanh(x + c).sum(), [X, bias])


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.integers(1, 6), elements=st.floats(-2, 2)),
       st.sampled_from(["elu", "sigmoid", "softplus", "tanh"]))
def test_activation_gradient_property(x, kind):
    # finite differences straddle the ELU kink at 0; keep away from it
    x = np.where(np.abs(x) < 1e-3, 0.5, x)
    _grad_check(lambda t: (nx.activate(t, kind) * nx.activate(t, kind)).sum(), [x.copy()])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_forward_is_bit_deterministic(seed):
    rng = np.random.default_rng(seed)
    W, x, a = rng.normal(size=(3, 4)), rng.normal(size=4), rng.normal(size=3)
    runs = [nx.softplus(nx.affine(nx.Tensor(x), nx.Tensor(W), nx.Tensor(a))).value for _ in range(2)]
    assert runs[0].tobytes() == runs[1].tobytes()


class TestAdam:
    def test_first_step_moves_by_learning_rate(self):
        # t=1: m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps)
        params, state = nx.adam_step({"w": np.array([0.0])}, {"w": np.array([1.0])}, nx.AdamState(1e-3))
        assert params["w"][0] == pytest.approx(-1e-3 * 1.0 / (1.0 + 1e-8), rel=1e-12)
        assert state.step == 1

    def test_zero_gradient_is_a_fixed_point(self):
        p = {"w": np.array([1.0, -2.0]), "b": np.array([[0.5]])}
        state = nx.AdamState()
        for _ in range(5):
            p2, state = nx.adam_step(p, {k: np.zeros_like(v) for k, v in p.items()}, state)
            for k in p:
                np.testing.assert_array_equal(p2[k], p[k])
        assert state.step == 5

    def test_identical_calls_are_bit_identical(self):
        rng = np.random.default_rng(0)
        p, g = {"w": rng.normal(size=4)}, {"w": rng.normal(size=4)}
        a = nx.adam_step(p, g, nx.AdamState())
        b = nx.adam_step(p, g, nx.AdamState())
        assert a[0]["w"].tobytes() == b[0]["w"].tobytes()
        assert a[1].second_moment["w"].tobytes() == b[1].second_moment["w"].tobytes()

    def test_missing_gradient(self):
        with pytest.raises(nx.GraphUsageError):
            nx.adam_step({"w": np.ones(2), "b": np.ones(1)}, {"w": np.ones(2)}, nx.AdamState())

    def test_invalid_hyperparameters(self):
        with pytest.raises(ValueError):
            nx.AdamState(beta1=1.0)
        with pytest.raises(ValueError):
            nx.AdamState(epsilon=0.0)

    def test_matches_reference_recursion(self):
        rng = np.random.default_rng(1)
        p = rng.normal(size=3)
        grads = rng.normal(size=(4, 3))
        m = v = np.zeros(3)
        ref = p.copy()
        for t, g in enumerate(grads, start=1):
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            ref = ref - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        params, state = {"w": p}, nx.AdamState(0.01)
        for g in grads:
            params, state = nx.adam_step(params, {"w": g}, state)
        np.testing.assert_allclose(params["w"], ref, rtol=1e-14)
