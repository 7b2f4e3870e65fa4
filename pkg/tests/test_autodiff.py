import numpy as np
import pytest

from daspl import autodiff as ad
from daspl.autodiff import Tensor, backward, forward_op, grad_check, no_grad
from daspl.errors import ContractError, DomainError, NonFiniteError, ShapeError


def _param(rng, shape, low=-2.0, high=2.0, name=None):
    return Tensor(rng.uniform(low, high, size=shape), requires_grad=True, name=name)


class TestForwardOps:
    def test_softmax_of_zeros_is_uniform(self):
        np.testing.assert_array_equal(forward_op("softmax", [Tensor([0.0, 0.0])]).data, [0.5, 0.5])

    def test_relu_and_gelu_at_reference_points(self):
        np.testing.assert_array_equal(ad.relu(Tensor([-1.0, 2.0])).data, [0.0, 2.0])
        assert ad.gelu(Tensor(0.0)).item() == 0.0

    def test_matmul_matches_triple_loop(self, rng):
        a = rng.normal(size=(2, 3))
        b = rng.normal(size=(3, 2))
        expected = np.zeros((2, 2))
        for i in range(2):
            for j in range(2):
                for k in range(3):
                    expected[i, j] += a[i, k] * b[k, j]
        np.testing.assert_allclose(ad.matmul(a, b).data, expected, atol=1e-12)

    def test_matmul_inner_mismatch_names_shapes(self):
        with pytest.raises(ShapeError, match=r"matmul.*\(2, 3\).*\(2, 2\)"):
            ad.matmul(np.ones((2, 3)), np.ones((2, 2)))

    def test_concat_mismatch(self):
        with pytest.raises(ShapeError, match="concat"):
            ad.concat([np.ones((2, 3)), np.ones((3, 2))], axis=0)

    def test_log_and_sqrt_domains(self):
        with pytest.raises(DomainError):
            ad.log(Tensor([1.0, -1.0]))
        with pytest.raises(DomainError):
            ad.log(Tensor([0.0]))
        with pytest.raises(DomainError):
            ad.sqrt(Tensor([-0.5]))
        assert ad.sqrt(Tensor([0.0])).item() == 0.0

    def test_unknown_op(self):
        with pytest.raises(ContractError):
            forward_op("conv2d", [Tensor(1.0)])

    def test_softmax_rows_sum_to_one(self, rng):
        for _ in range(20):
            out = ad.softmax(rng.normal(scale=10, size=(4, 7)), axis=-1).data
            assert np.all(out >= 0)
            np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-12)

    def test_softmax_other_axis(self, rng):
        out = ad.softmax(rng.normal(size=(5, 3)), axis=0).data
        np.testing.assert_allclose(out.sum(axis=0), 1.0, atol=1e-12)

    def test_sigmoid_saturates_without_overflow(self):
        out = ad.sigmoid(Tensor([-1000.0, 0.0, 1000.0])).data
        np.testing.assert_allclose(out, [0.0, 0.5, 1.0])
        assert np.all(np.isfinite(ad.log_sigmoid(Tensor([-1000.0, 1000.0])).data))

    def test_cosine_properties(self, rng):
        u = rng.normal(size=6)
        v = rng.normal(size=6)
        assert ad.cosine_similarity(u, u).item() == pytest.approx(1.0, abs=1e-12)
        assert ad.cosine_similarity(u, v).item() == ad.cosine_similarity(v, u).item()
        assert ad.cosine_similarity(np.zeros(6), u).item() == 0.0

    def test_forward_is_pure(self, rng):
        x = rng.normal(size=(3, 4))
        first = ad.gelu(ad.softmax(x)).data
        second = ad.gelu(ad.softmax(x)).data
        assert first.tobytes() == second.tobytes()

    def test_no_grad_skips_recording(self):
        x = Tensor([1.0], requires_grad=True)
        with no_grad():
            y = x * x
        assert y._node is None and not y.requires_grad


class TestBackward:
    def test_square(self):
        x = Tensor(3.0, requires_grad=True)
        backward(x * x)
        assert x.grad == pytest.approx(6.0)

    def test_fan_out_sums(self):
        x = Tensor(1.5, requires_grad=True)
        backward(x + x)
        assert x.grad == pytest.approx(2.0)

    def test_cross_entropy_identity(self, rng):
        z = Tensor(rng.normal(size=5), requires_grad=True)
        k = 2
        p = ad.softmax(z)
        loss = -ad.log(p[k])
        backward(loss)
        expected = ad.softmax(z.data).data - np.eye(5)[k]
        np.testing.assert_allclose(z.grad, expected, atol=1e-12)

    def test_loss_grad_is_one(self):
        x = Tensor(2.0, requires_grad=True)
        loss = x * 3.0
        grads = backward(loss)
        assert grads[loss.uid] == pytest.approx(1.0)

    def test_non_scalar_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ContractError):
            backward(x * 2.0)

    def test_long_chain_does_not_recurse(self):
        x = Tensor(0.5, requires_grad=True)
        y = x
        for _ in range(5000):
            y = y * 1.0
        backward(y)
        assert x.grad == pytest.approx(1.0)

    def test_broadcast_add_unbroadcasts(self):
        a = Tensor(np.ones((3, 4)), requires_grad=True)
        b = Tensor(np.ones(4), requires_grad=True)
        backward(ad.sum_(a + b))
        np.testing.assert_array_equal(b.grad, np.full(4, 3.0))

    def test_slice_gradients(self):
        x = Tensor(np.arange(12.0).reshape(3, 4), requires_grad=True)
        backward(ad.sum_(x[1:, 2]) + ad.sum_(x[:, 0:2]) + ad.sum_(x[-1]))
        expected = np.zeros((3, 4))
        expected[1:, 2] += 1
        expected[:, 0:2] += 1
        expected[-1] += 1
        np.testing.assert_array_equal(x.grad, expected)

    def test_repeated_fancy_index_accumulates(self):
        x = Tensor(np.ones(3), requires_grad=True)
        backward(ad.sum_(x[np.array([0, 0, 2])]))
        np.testing.assert_array_equal(x.grad, [2.0, 0.0, 1.0])


UNARY = ["exp", "sqrt", "log", "abs", "softmax", "sigmoid", "tanh", "relu", "gelu", "log_sigmoid"]


class TestGradCheck:
    def test_linear_map_is_exact(self):
        w = Tensor([0.5, -1.0, 2.0], requires_grad=True)
        x = np.array([2.0, 3.0, -1.0])
        assert grad_check(lambda: ad.sum_(w * x), [w]) < 1e-10

    @pytest.mark.parametrize("kind", UNARY)
    def test_unary_ops(self, kind, rng):
        for _ in range(10):
            low = 0.2 if kind in ("sqrt", "log") else -2.0
            x = _param(rng, (5,), low=low)
            if kind in ("abs", "relu"):
                # keep away from the kink
                x.data = np.where(np.abs(x.data) < 0.05, 0.5, x.data)
            weights = rng.normal(size=5)
            fn = lambda: ad.sum_(ad.mul(forward_op(kind, [x]), weights))
            assert grad_check(fn, [x]) < 1e-4

    def test_binary_and_layout_ops(self, rng):
        for _ in range(10):
            a = _param(rng, (3, 4))
            b = _param(rng, (4, 2))
            c = _param(rng, (4,))
            d = _param(rng, (3, 4))
            table = _param(rng, (5, 2))
            w = rng.normal(size=(3, 4))

            def fn():
                h = ad.concat([ad.matmul(a, b), ad.transpose(ad.matmul(b.transpose(), ad.transpose(a)))], axis=1)
                h = ad.mul(h, ad.reshape(ad.embedding(table, [0, 3, 3]), (3, 2))[:, 0:1])
                s = ad.sub(ad.add(a, c), d) * 0.7
                cos = ad.cosine_similarity(a, d)
                m = ad.mean(ad.clamp_min(s, -1.5), axis=1)
                return ad.sum_(ad.mul(h, w)) + ad.sum_(cos) + ad.sum_(m) + ad.mean(ad.sum_(s, axis=0))

            assert grad_check(fn, [a, b, c, d, table]) < 1e-4

    def test_three_layer_graph(self, rng):
        w1, w2, w3 = _param(rng, (4, 6)), _param(rng, (6, 5)), _param(rng, (5, 3))
        x = rng.uniform(-2, 2, size=(2, 4))

        def fn():
            h = ad.gelu(ad.matmul(x, w1))
            h = ad.tanh(ad.matmul(h, w2))
            return ad.sum_(ad.log(ad.softmax(ad.matmul(h, w3), axis=-1)))

        assert grad_check(fn, [w1, w2, w3]) < 1e-4

    def test_non_finite_names_parameter(self):
        w = Tensor([1e-6], requires_grad=True, name="w")
        with pytest.raises(NonFiniteError, match=r"w\[0\]"):
            grad_check(lambda: ad.sum_(ad.exp(w * 1e3)), [w], step=1.0)

    def test_step_must_be_positive(self):
        w = Tensor([1.0], requires_grad=True)
        with pytest.raises(ContractError):
            grad_check(lambda: ad.sum_(w), [w], step=0.0)
