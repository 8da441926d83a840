import mpmath
import numpy as np
import pytest

from gmp.autodiff import (ParamSet, Tensor, add, backward, cross_entropy,
                          matmul, relu, scale, softmax_rows, sum_all,
                          tanh_scalar)

mpmath.mp.dps = 40


def fd_grad(f, x, h):
    """Central finite differences of a scalar numpy function, elementwise."""
    g = np.zeros_like(x)
    flat_x, flat_g = x.ravel(), g.ravel()
    for i in range(flat_x.size):
        orig = flat_x[i]
        flat_x[i] = orig + h
        f_plus = f()
        flat_x[i] = orig - h
        f_minus = f()
        flat_x[i] = orig
        flat_g[i] = (f_plus - f_minus) / (2.0 * h)
    return g


def rel_err(a, b):
    scale_ = max(np.abs(a).max(), np.abs(b).max(), 1e-12)
    return np.abs(a - b).max() / scale_


class TestMatmul:
    def test_identity(self):
        out = matmul(Tensor([[1.0, 0.0], [0.0, 1.0]]), Tensor([[3.0], [4.0]]))
        assert np.array_equal(out.data, [[3.0], [4.0]])

    def test_scalar_product(self):
        out = matmul(Tensor([[2.0]]), Tensor([[3.0]]))
        assert np.array_equal(out.data, [[6.0]])

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_backward_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        a = Tensor(rng.uniform(-1, 1, (3, 4)), requires_grad=True)
        b = Tensor(rng.uniform(-1, 1, (4, 2)), requires_grad=True)
        w = rng.uniform(-1, 1, (2, 1))

        loss = sum_all(matmul(matmul(a, b), Tensor(w)))
        params = ParamSet()
        grads = backward(loss, params)  # params empty; read node grads directly
        assert grads == {}

        def f():
            return float((a.data @ b.data @ w).sum())

        h = 1e-6
        assert rel_err(a.grad, fd_grad(f, a.data, h)) < 1e-6
        assert rel_err(b.grad, fd_grad(f, b.data, h)) < 1e-6


class TestSoftmaxRows:
    def test_uniform_logits(self):
        out = softmax_rows(Tensor([[0.0, 0.0, 0.0]]))
        assert np.allclose(out.data, 1.0 / 3.0, atol=1e-15)

    def test_stability_no_overflow(self):
        out = softmax_rows(Tensor([[1000.0, 0.0]]))
        assert np.all(np.isfinite(out.data))
        assert out.data[0, 0] > 1.0 - 1e-12
        assert out.data[0, 1] < 1e-12

    def test_high_precision_values(self):
        out = softmax_rows(Tensor([[1.0, 2.0, 3.0]]))
        exps = [mpmath.e ** k for k in (1, 2, 3)]
        z = sum(exps)
        expected = [float(e / z) for e in exps]
        assert np.abs(out.data[0] - expected).max() < 1e-12

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            x = rng.uniform(-10, 10, (5, 7))
            out = softmax_rows(Tensor(x)).data
            assert np.abs(out.sum(axis=1) - 1.0).max() < 1e-12
            assert out.min() >= 0.0 and out.max() <= 1.0


class TestCrossEntropy:
    def test_huge_margin_loss_near_zero(self):
        logits = Tensor([[100.0, 0.0, 0.0], [0.0, 100.0, 0.0]])
        loss = cross_entropy(logits, [0, 1])
        assert float(loss.data) < 1e-12

    def test_uniform_logits_gives_log_k(self):
        for k, expected in ((3, float(mpmath.log(3))), (4, float(mpmath.log(4)))):
            loss = cross_entropy(Tensor(np.zeros((2, k))), [0, k - 1])
            assert abs(float(loss.data) - expected) < 1e-12

    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(2)
        logits = Tensor(rng.uniform(-1, 1, (4, 3)), requires_grad=True)
        labels = [0, 2, 1, 2]
        loss = cross_entropy(logits, labels)
        backward(loss, ParamSet())

        def f():
            shifted = logits.data - logits.data.max(axis=1, keepdims=True)
            logz = np.log(np.exp(shifted).sum(axis=1))
            return float(-(shifted[np.arange(4), labels] - logz).mean())

        fd = fd_grad(f, logits.data, 1e-6)
        assert rel_err(logits.grad, fd) < 1e-6


class TestTanhScalar:
    def test_zero(self):
        assert tanh_scalar(0.0) == 0.0

    def test_bounded_and_monotone(self):
        values = [tanh_scalar(x) for x in (1.0, 5.0, 20.0, 700.0)]
        assert all(v < 1.0 or v == 1.0 for v in values)  # saturates at 1.0
        assert values == sorted(values)
        assert tanh_scalar(1e6) <= 1.0

    def test_high_precision_value(self):
        assert abs(tanh_scalar(1.0) - float(mpmath.tanh(1))) < 1e-12


class TestBackward:
    def _params(self, shape=(3, 2)):
        ps = ParamSet()
        rng = np.random.default_rng(3)
        theta = ps.add("theta", rng.uniform(-1, 1, shape), "encoder:v")
        return ps, theta

    def test_sum_gives_ones(self):
        ps, theta = self._params()
        grads = backward(sum_all(theta), ps)
        assert np.array_equal(grads["theta"], np.ones_like(theta.data))

    def test_zero_scaled_loss_gives_zeros(self):
        ps, theta = self._params()
        grads = backward(sum_all(scale(theta, 0.0)), ps)
        assert np.array_equal(grads["theta"], np.zeros_like(theta.data))

    def test_non_scalar_loss_rejected(self):
        ps, theta = self._params()
        with pytest.raises(ValueError):
            backward(relu(theta), ps)

    def test_forward_values_unaffected_and_repeatable(self):
        ps, theta = self._params()
        x = Tensor(np.random.default_rng(4).uniform(-1, 1, (5, 3)))
        out1 = matmul(x, theta)
        before = out1.data.copy()
        backward(sum_all(out1), ps)
        assert np.array_equal(out1.data, before)
        out2 = matmul(x, theta)
        assert np.array_equal(out1.data, out2.data)  # bitwise

    def test_repeated_backward_idempotent(self):
        ps, theta = self._params()
        loss = sum_all(relu(theta))
        g1 = backward(loss, ps)
        g2 = backward(loss, ps)
        assert np.array_equal(g1["theta"], g2["theta"])

    def test_unreachable_param_gets_zero_not_stale(self):
        ps = ParamSet()
        a = ps.add("a", np.array([[1.0, 2.0]]), "encoder:v")
        b = ps.add("b", np.array([[3.0, 4.0]]), "head:classifier")
        grads_a = backward(sum_all(a), ps)
        assert np.any(grads_a["a"] != 0.0)
        grads_b = backward(sum_all(b), ps)
        assert np.array_equal(grads_b["a"], np.zeros_like(a.data))

    def test_two_layer_mlp_matches_finite_differences(self):
        rng = np.random.default_rng(5)
        ps = ParamSet()
        w1 = ps.add("w1", rng.uniform(-1, 1, (4, 6)), "encoder:v")
        b1 = ps.add("b1", rng.uniform(-1, 1, 6), "encoder:v")
        w2 = ps.add("w2", rng.uniform(-1, 1, (6, 3)), "encoder:v")
        b2 = ps.add("b2", rng.uniform(-1, 1, 3), "encoder:v")
        x = rng.uniform(-1, 1, (5, 4))
        labels = rng.integers(0, 3, 5)

        def graph_loss():
            h = relu(add(matmul(Tensor(x), w1), b1))
            return cross_entropy(add(matmul(h, w2), b2), labels)

        grads = backward(graph_loss(), ps)

        def f():
            h = np.maximum(x @ w1.data + b1.data, 0.0)
            logits = h @ w2.data + b2.data
            shifted = logits - logits.max(axis=1, keepdims=True)
            logz = np.log(np.exp(shifted).sum(axis=1))
            return float(-(shifted[np.arange(5), labels] - logz).mean())

        for name, p in ps.items():
            fd = fd_grad(f, p.data, 1e-5)
            assert rel_err(grads[name], fd) < 1e-4, name


class TestOpGradientProperty:
    """Every differentiable op agrees with central differences on random
    inputs in [-1, 1]."""

    @pytest.mark.parametrize("op_name", ["relu", "softmax_rows", "scale", "add"])
    def test_op(self, op_name):
        rng = np.random.default_rng(hash(op_name) % 2**32)
        x_data = rng.uniform(-1, 1, (4, 5))
        if op_name == "relu":  # keep away from the kink
            x_data = np.where(np.abs(x_data) < 1e-2, 0.5, x_data)
        x = Tensor(x_data, requires_grad=True)
        w = rng.uniform(-1, 1, (5, 1))
        bias = Tensor(rng.uniform(-1, 1, 5), requires_grad=True)

        def build():
            if op_name == "relu":
                return relu(x)
            if op_name == "softmax_rows":
                return softmax_rows(x)
            if op_name == "scale":
                return scale(x, 1.7)
            return add(x, bias)

        backward(sum_all(matmul(build(), Tensor(w))), ParamSet())

        def f():
            if op_name == "relu":
                y = np.maximum(x.data, 0.0)
            elif op_name == "softmax_rows":
                e = np.exp(x.data - x.data.max(axis=1, keepdims=True))
                y = e / e.sum(axis=1, keepdims=True)
            elif op_name == "scale":
                y = 1.7 * x.data
            else:
                y = x.data + bias.data
            return float((y @ w).sum())

        assert rel_err(x.grad, fd_grad(f, x.data, 1e-6)) < 1e-4
        if op_name == "add":
            assert rel_err(bias.grad, fd_grad(f, bias.data, 1e-6)) < 1e-4


class TestParamSet:
    def test_flatten_empty_partition(self):
        ps = ParamSet()
        ps.add("a", np.ones(3), "encoder:v")
        assert ps.flatten_grads({}, "encoder:a").shape == (0,)

    def test_flatten_sorted_order(self):
        ps = ParamSet()
        ps.add("b", np.zeros(1), "encoder:v")
        ps.add("a", np.zeros(2), "encoder:v")
        grads = {"a": np.array([1.0, 2.0]), "b": np.array([3.0])}
        assert np.array_equal(ps.flatten_grads(grads, "encoder:v"),
                              [1.0, 2.0, 3.0])

    def test_round_trip_bijection(self):
        rng = np.random.default_rng(6)
        ps = ParamSet()
        ps.add("w", rng.uniform(-1, 1, (3, 4)), "encoder:a")
        ps.add("b", rng.uniform(-1, 1, 4), "encoder:a")
        grads = {"w": rng.uniform(-1, 1, (3, 4)), "b": rng.uniform(-1, 1, 4)}
        flat = ps.flatten_grads(grads, "encoder:a")
        assert flat.shape == (16,)
        back = ps.unflatten(flat, "encoder:a")
        for name in grads:
            assert np.array_equal(back[name], grads[name])

    def test_unknown_partition(self):
        ps = ParamSet()
        with pytest.raises(KeyError):
            ps.flatten_grads({}, "heads:all")
        with pytest.raises(KeyError):
            ps.add("x", np.zeros(1), "bogus")

    def test_duplicate_param_rejected(self):
        ps = ParamSet()
        ps.add("x", np.zeros(1), "encoder:v")
        with pytest.raises(ValueError):
            ps.add("x", np.zeros(1), "encoder:a")
