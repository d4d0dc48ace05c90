import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from owt import tensor as T
from owt.tensor import DiffTensor

from conftest import numeric_grad, rel_err


def t64(data, requires_grad=True):
    return DiffTensor(np.asarray(data, dtype=np.float64), requires_grad=requires_grad, dtype=np.float64)


def t32(data, requires_grad=True):
    return DiffTensor(np.asarray(data, dtype=np.float32), requires_grad=requires_grad)


class TestMatmul:
    def test_identity(self):
        a = t32([[1.0, 2.0], [3.0, 4.0]])
        eye = t32(np.eye(2), requires_grad=False)
        out = T.matmul(a, eye)
        np.testing.assert_array_equal(out.data, a.data)

    def test_hand_product(self):
        a = t32([[1.0, 2.0], [3.0, 4.0]])
        b = t32([[5.0, 6.0], [7.0, 8.0]])
        out = T.matmul(a, b)
        np.testing.assert_array_equal(out.data, [[19.0, 22.0], [43.0, 50.0]])

    def test_shape_mismatch_names_both_shapes(self):
        a = t32(np.zeros((2, 3)))
        b = t32(np.zeros((2, 3)))
        with pytest.raises(T.DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            T.matmul(a, b)

    def test_grad_matches_finite_differences(self, rng):
        a = t64(rng.normal(size=(3, 4)))
        b = t64(rng.normal(size=(4, 2)))

        def f():
            return T.sum_all(T.matmul(a, b)).item()

        T.backward(T.sum_all(T.matmul(a, b)))
        na, nb = numeric_grad(f, [a, b])
        assert rel_err(a.grad, na) < 1e-4
        assert rel_err(b.grad, nb) < 1e-4


class TestSoftmaxRows:
    def test_symmetric_row(self):
        out = T.softmax_rows(t32([[0.0, 0.0]]))
        np.testing.assert_allclose(out.data, [[0.5, 0.5]], atol=1e-7)

    def test_analytic_row(self):
        out = T.softmax_rows(t32([[0.0, math.log(2.0)]]))
        np.testing.assert_allclose(out.data, [[1 / 3, 2 / 3]], atol=1e-6)

    def test_nan_rejected(self):
        with pytest.raises(T.NumericError):
            T.softmax_rows(t32([[0.0, float("nan")]]))

    def test_rows_sum_to_one_large_magnitude(self, rng):
        x = t32(rng.uniform(-1e4, 1e4, size=(6, 9)))
        out = T.softmax_rows(x)
        sums = out.data.sum(axis=1, dtype=np.float64)
        assert np.abs(sums - 1.0).max() < 1e-6
        assert (out.data >= 0).all()

    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 6), st.integers(2, 8), st.floats(0.1, 1e4))
    def test_rows_sum_to_one_property(self, r, c, mag):
        vals = np.linspace(-mag, mag, r * c).reshape(r, c)
        out = T.softmax_rows(t32(vals))
        assert np.abs(out.data.sum(axis=1, dtype=np.float64) - 1.0).max() < 1e-6

    def test_grad_matches_finite_differences(self, rng):
        x = t64(rng.normal(size=(5, 7)))
        w = DiffTensor(rng.normal(size=(5, 7)), dtype=np.float64)  # fixed weights, nontrivial grad

        def f():
            return T.sum_all(T.mul(T.softmax_rows(x), w)).item()

        T.backward(T.sum_all(T.mul(T.softmax_rows(x), w)))
        (nx,) = numeric_grad(f, [x])
        assert rel_err(x.grad, nx) < 1e-4


class TestLayernorm:
    def test_constant_row_is_zeroed(self):
        x = t32(np.full((2, 4), 3.7))
        gain = t32(np.ones(4))
        bias = t32(np.zeros(4))
        out = T.layernorm(x, gain, bias)
        np.testing.assert_allclose(out.data, 0.0, atol=1e-6)

    def test_two_column_row(self):
        out = T.layernorm(t32([[1.0, 3.0]]), t32(np.ones(2)), t32(np.zeros(2)))
        np.testing.assert_allclose(out.data, [[-1.0, 1.0]], atol=1e-4)

    def test_needs_two_columns(self):
        with pytest.raises(T.DimensionError):
            T.layernorm(t32([[1.0]]), t32(np.ones(1)), t32(np.zeros(1)))

    def test_grad_matches_finite_differences(self, rng):
        x = t64(rng.normal(size=(3, 6)))
        gain = t64(rng.normal(size=6))
        bias = t64(rng.normal(size=6))
        w = DiffTensor(rng.normal(size=(3, 6)), dtype=np.float64)

        def f():
            return T.sum_all(T.mul(T.layernorm(x, gain, bias), w)).item()

        T.backward(T.sum_all(T.mul(T.layernorm(x, gain, bias), w)))
        nx, ng, nb = numeric_grad(f, [x, gain, bias])
        assert rel_err(x.grad, nx) < 1e-4
        assert rel_err(gain.grad, ng) < 1e-4
        assert rel_err(bias.grad, nb) < 1e-4


class TestPointwise:
    def test_elu_plus_one_at_zero(self):
        out = T.pointwise(t32([0.0]), "elu_plus_one")
        np.testing.assert_allclose(out.data, [1.0], atol=1e-7)

    @pytest.mark.parametrize("x", [-10.0, -1.0, 0.0, 1.0, 10.0])
    def test_elu_plus_one_positive(self, x):
        out = T.pointwise(t32([x]), "elu_plus_one")
        assert out.data[0] > 0.0

    def test_gelu_grad(self, rng):
        x = t64(rng.normal(size=(4, 3)))

        def f():
            return T.sum_all(T.pointwise(x, "gelu")).item()

        T.backward(T.sum_all(T.pointwise(x, "gelu")))
        (nx,) = numeric_grad(f, [x])
        assert rel_err(x.grad, nx) < 1e-4

    def test_elu_plus_one_grad(self, rng):
        x = t64(rng.normal(size=(4, 3)))

        def f():
            return T.sum_all(T.pointwise(x, "elu_plus_one")).item()

        T.backward(T.sum_all(T.pointwise(x, "elu_plus_one")))
        (nx,) = numeric_grad(f, [x])
        assert rel_err(x.grad, nx) < 1e-4

    def test_add_broadcast_bias(self, rng):
        x = t64(rng.normal(size=(3, 4)))
        b = t64(rng.normal(size=4))

        def f():
            return T.sum_all(T.pointwise(x, "add", other=b)).item()

        T.backward(T.sum_all(T.pointwise(x, "add", other=b)))
        nx, nb = numeric_grad(f, [x, b])
        assert rel_err(x.grad, nx) < 1e-4
        assert rel_err(b.grad, nb) < 1e-4

    def test_broadcast_mismatch(self):
        with pytest.raises(T.DimensionError):
            T.pointwise(t32(np.zeros((2, 3))), "add", other=t32(np.zeros((2, 4))))

    def test_mul_and_scale(self, rng):
        x = t32(rng.normal(size=(2, 2)))
        y = t32(rng.normal(size=(2, 2)))
        np.testing.assert_allclose(T.pointwise(x, "mul", other=y).data, x.data * y.data)
        np.testing.assert_allclose(T.pointwise(x, "scale", value=2.5).data, x.data * 2.5, rtol=1e-6)


class TestBackward:
    def test_sum_gives_ones(self, rng):
        x = t32(rng.normal(size=(3, 5)))
        T.backward(T.sum_all(x))
        np.testing.assert_array_equal(x.grad, np.ones_like(x.data))

    def test_sum_of_squares(self, rng):
        x = t32(rng.normal(size=(4,)))
        T.backward(T.sum_all(T.mul(x, x)))
        np.testing.assert_allclose(x.grad, 2 * x.data, rtol=1e-6)

    def test_non_scalar_root_rejected(self, rng):
        x = t32(rng.normal(size=(3, 2)))
        with pytest.raises(T.ContractError):
            T.backward(x)

    def test_repeated_backward_accumulates(self, rng):
        x = t32(rng.normal(size=(3,)))
        root = T.sum_all(x)
        T.backward(root)
        T.backward(root)
        np.testing.assert_allclose(x.grad, 2 * np.ones(3), rtol=1e-6)

    def test_nonparticipating_grad_stays_zero(self, rng):
        x = t32(rng.normal(size=(3,)))
        bystander = t32(rng.normal(size=(3,)))
        T.backward(T.sum_all(x))
        np.testing.assert_array_equal(bystander.grad, np.zeros(3))

    def test_diamond_graph_sums_paths(self):
        # root = sum(y + y) with y = 2x: both paths contribute, droot/dx = 4
        x = t32([1.0, -2.0])
        y = T.scale(x, 2.0)
        root = T.sum_all(T.add(y, y))
        T.backward(root)
        np.testing.assert_allclose(x.grad, [4.0, 4.0], rtol=1e-6)

    def test_composite_graph_grads_32bit(self, rng):
        w = t32(rng.normal(size=(6, 4)) * 0.5)
        b = t32(rng.normal(size=4) * 0.1)
        gain = t32(np.ones(4))
        bias = t32(np.zeros(4))
        x = DiffTensor(rng.normal(size=(5, 6)).astype(np.float32))
        sel = DiffTensor(rng.normal(size=(5, 4)).astype(np.float32))

        def forward():
            h = T.add(T.matmul(x, w), b)
            h = T.layernorm(h, gain, bias)
            h = T.softmax_rows(h)
            return T.sum_all(T.mul(h, sel))

        T.backward(forward())
        grads = [w.grad.copy(), b.grad.copy(), gain.grad.copy(), bias.grad.copy()]
        numeric = numeric_grad(lambda: forward().item(), [w, b, gain, bias])
        for got, want in zip(grads, numeric):
            assert rel_err(got, want) < 1e-3

    def test_composite_graph_grads_64bit(self, rng):
        w = t64(rng.normal(size=(6, 4)) * 0.5)
        b = t64(rng.normal(size=4) * 0.1)
        gain = t64(np.ones(4))
        bias = t64(np.zeros(4))
        x = DiffTensor(rng.normal(size=(5, 6)), dtype=np.float64)
        sel = DiffTensor(rng.normal(size=(5, 4)), dtype=np.float64)

        def forward():
            h = T.add(T.matmul(x, w), b)
            h = T.layernorm(h, gain, bias)
            h = T.softmax_rows(h)
            return T.sum_all(T.mul(h, sel))

        T.backward(forward())
        grads = [w.grad.copy(), b.grad.copy(), gain.grad.copy(), bias.grad.copy()]
        numeric = numeric_grad(lambda: forward().item(), [w, b, gain, bias])
        for got, want in zip(grads, numeric):
            assert rel_err(got, want) < 1e-4

    def test_take_rows_and_permute_grads(self, rng):
        x = t64(rng.normal(size=(5, 3)))
        idx = np.array([3, 1, 1])
        perm = np.random.default_rng(0).permutation(15)

        def f():
            a = T.sum_all(T.take_rows(x, idx))
            b = T.sum_all(T.permute_flat(x, perm, (3, 5)))
            return T.add(a, b).item()

        a = T.sum_all(T.take_rows(x, idx))
        b = T.sum_all(T.permute_flat(x, perm, (3, 5)))
        T.backward(T.add(a, b))
        (nx,) = numeric_grad(f, [x])
        assert rel_err(x.grad, nx) < 1e-4

    def test_determinism_bit_identical(self, rng):
        vals = rng.normal(size=(8, 8)).astype(np.float32)

        def run():
            x = DiffTensor(vals.copy(), requires_grad=True)
            out = T.softmax_rows(T.matmul(x, T.transpose(x)))
            T.backward(T.sum_all(T.mul(out, out)))
            return out.data.tobytes(), x.grad.tobytes()

        assert run() == run()


def _scalar_adamw_reference(grad, lr, steps, b1=0.9, b2=0.95, wd=0.05, eps=1e-8, w0=0.0):
    # standalone scalar re-implementation used as the oracle
    w, m, v = w0, 0.0, 0.0
    for t in range(1, steps + 1):
        m = b1 * m + (1 - b1) * grad
        v = b2 * v + (1 - b2) * grad * grad
        mh = m / (1 - b1 ** t)
        vh = v / (1 - b2 ** t)
        w -= lr * wd * w
        w -= lr * mh / (math.sqrt(vh) + eps)
    return w


class TestAdamW:
    def test_zero_grad_zero_decay_is_noop(self):
        p = t32([1.0, -2.0, 3.0])
        params = {"p": p}
        state = T.OptimizerState(weight_decay=0.0)
        before = p.data.copy()
        T.adamw_step(params, state, lr_now=0.1)
        np.testing.assert_array_equal(p.data, before)
        assert state.step_count == 1

    def test_first_step_matches_scalar_oracle(self):
        p = t64([0.0])
        p.grad[:] = 1.0
        state = T.OptimizerState()
        T.adamw_step({"p": p}, state, lr_now=0.1)
        want = _scalar_adamw_reference(grad=1.0, lr=0.1, steps=1)
        assert abs(p.data[0] - want) < 1e-12
        assert abs(p.data[0] + 0.1) < 1e-6  # -0.1 * (1 - eps)-ish
        np.testing.assert_array_equal(p.grad, [1.0])  # grads untouched

    def test_converges_on_quadratic(self):
        p = t32([0.0])
        state = T.OptimizerState(weight_decay=0.0)
        for _ in range(100):
            p.zero_grad()
            p.grad[:] = 2.0 * (p.data - 3.0)
            T.adamw_step({"p": p}, state, lr_now=0.1)
        assert abs(p.data[0] - 3.0) < 0.1

    def test_missing_grad_is_contract_error(self):
        p = DiffTensor(np.ones(2))  # requires_grad False -> no grad buffer
        with pytest.raises(T.ContractError):
            T.adamw_step({"p": p}, T.OptimizerState())

    def test_moment_shapes_and_step_counter(self, rng):
        p = t32(rng.normal(size=(3, 2)))
        p.grad[:] = 1.0
        state = T.OptimizerState()
        T.adamw_step({"p": p}, state, lr_now=0.01)
        T.adamw_step({"p": p}, state, lr_now=0.01)
        assert state.step_count == 2
        assert state.first_moment["p"].shape == p.data.shape
        assert state.second_moment["p"].shape == p.data.shape
