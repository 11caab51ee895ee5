import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from readie import autodiff as ad
from readie.autodiff import Tensor, finite_difference_check


def _triple_loop_matmul(a, b):
    n, k = a.shape
    k2, m = b.shape
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for t in range(k):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    return out


class TestMatmul:
    def test_identity(self):
        out = ad.matmul(Tensor([[1.0, 0.0], [0.0, 1.0]]), Tensor([[3.0], [4.0]]))
        assert np.allclose(out.data, [[3.0], [4.0]])

    def test_hand_arithmetic(self):
        out = ad.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
        assert np.allclose(out.data, [[11.0]])

    def test_matches_triple_loop_oracle(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(4, 2))
        out = ad.matmul(Tensor(a), Tensor(b))
        assert np.max(np.abs(out.data - _triple_loop_matmul(a, b))) < 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_gradients(self):
        rng = np.random.default_rng(1)
        a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
        probe = Tensor(rng.normal(size=(3, 2)))
        finite_difference_check(lambda: ad.tensor_sum(ad.mul(ad.matmul(a, b), probe)), [a, b])

    def test_batched_gradients(self):
        rng = np.random.default_rng(2)
        a = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
        probe = Tensor(rng.normal(size=(2, 3, 5)))
        finite_difference_check(lambda: ad.tensor_sum(ad.mul(ad.matmul(a, b), probe)), [a, b])


class TestSoftmax:
    def test_uniform_logits(self):
        out = ad.softmax(Tensor([0.0, 0.0]))
        assert np.allclose(out.data, [0.5, 0.5], atol=1e-12)

    def test_closed_form(self):
        out = ad.softmax(Tensor([math.log(1.0), math.log(3.0)]))
        assert np.allclose(out.data, [0.25, 0.75], atol=1e-12)

    def test_no_overflow_on_huge_logits(self):
        out = ad.softmax(Tensor([1000.0, 1000.0]))
        assert np.all(np.isfinite(out.data))
        assert np.allclose(out.data, [0.5, 0.5])

    @given(st.lists(st.floats(min_value=-100, max_value=100), min_size=1, max_size=8))
    @settings(max_examples=200, deadline=None)
    def test_sums_to_one(self, logits):
        out = ad.softmax(Tensor(np.array(logits, dtype=np.float64)))
        assert abs(out.data.sum() - 1.0) < 1e-9
        assert np.all(out.data > 0) and np.all(out.data < 1.0 + 1e-15)

    def test_gradients(self):
        rng = np.random.default_rng(3)
        x = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
        probe = Tensor(rng.normal(size=(3, 5)))
        finite_difference_check(lambda: ad.tensor_sum(ad.mul(ad.softmax(x, axis=-1), probe)), [x])


class TestGelu:
    def test_zero(self):
        assert ad.gelu(Tensor(0.0)).item() == 0.0

    def test_asymptote(self):
        assert abs(ad.gelu(Tensor(20.0)).item() - 20.0) < 1e-12

    def test_matches_high_precision_erf_oracle(self):
        import mpmath

        mpmath.mp.dps = 50
        expected = float(mpmath.mpf("0.5") * 1 * (1 + mpmath.erf(mpmath.mpf(1) / mpmath.sqrt(2))))
        assert abs(ad.gelu(Tensor(1.0)).item() - expected) < 1e-9

    def test_gradients(self):
        rng = np.random.default_rng(4)
        x = Tensor(rng.normal(size=(7,)), requires_grad=True)
        probe = Tensor(rng.normal(size=(7,)))
        finite_difference_check(lambda: ad.tensor_sum(ad.mul(ad.gelu(x), probe)), [x])


class TestHadamard:
    def test_hand_arithmetic(self):
        assert np.allclose(ad.hadamard(Tensor([1.0, 2.0]), Tensor([3.0, 4.0])).data, [3.0, 8.0])

    def test_identity(self):
        x = np.array([2.5, -1.0, 7.0])
        assert np.allclose(ad.hadamard(Tensor(x), Tensor(np.ones(3))).data, x)

    def test_chained(self):
        out = ad.hadamard(ad.hadamard(Tensor([1.0, 2.0]), Tensor([3.0, 4.0])), Tensor([0.5, 0.5]))
        assert np.allclose(out.data, [1.5, 4.0])

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            ad.hadamard(Tensor([1.0, 2.0]), Tensor([1.0, 2.0, 3.0]))


class TestBackward:
    def test_quadratic_closed_form(self):
        w = Tensor([1.0, 2.0], requires_grad=True)
        loss = ad.tensor_sum(ad.mul(w, w))
        loss.backward()
        assert np.allclose(w.grad, [2.0, 4.0])

    def test_unreachable_gets_zero(self):
        from readie.params import ParameterStore

        store = ParameterStore()
        w = store.create("w", np.array([3.0]))
        other = store.create("other", np.array([1.0]))
        loss = ad.tensor_sum(ad.mul(other, other))
        loss.backward()
        store.fill_missing_grads()
        assert np.allclose(w.grad, [0.0])
        assert np.allclose(other.grad, [2.0])

    def test_non_scalar_loss_rejected(self):
        w = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ValueError):
            ad.mul(w, w).backward()

    def test_grad_accumulates_across_reuse(self):
        w = Tensor([2.0], requires_grad=True)
        loss = ad.tensor_sum(ad.add(ad.mul(w, w), ad.mul(w, Tensor([3.0]))))
        loss.backward()
        assert np.allclose(w.grad, [7.0])


class TestPrimitiveGradients:
    """Central finite differences on every primitive the model composes from."""

    def _check(self, fn, shapes, seed):
        rng = np.random.default_rng(seed)
        params = [Tensor(rng.normal(size=s), requires_grad=True) for s in shapes]
        finite_difference_check(lambda: fn(*params), params)

    def test_add_sub_broadcast(self):
        self._check(lambda a, b: ad.tensor_sum(ad.square(ad.add(a, b))), [(3, 4), (4,)], 10)
        self._check(lambda a, b: ad.tensor_sum(ad.square(ad.sub(a, b))), [(2, 3), (2, 1)], 11)

    def test_mul_div(self):
        rng = np.random.default_rng(12)
        a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(4,)) + 3.0, requires_grad=True)
        finite_difference_check(lambda: ad.tensor_sum(ad.square(ad.div(a, b))), [a, b])

    def test_log_exp(self):
        rng = np.random.default_rng(13)
        a = Tensor(rng.uniform(0.5, 2.0, size=(5,)), requires_grad=True)
        finite_difference_check(lambda: ad.tensor_sum(ad.log(a)), [a])
        finite_difference_check(lambda: ad.tensor_sum(ad.exp(a)), [a])

    def test_log_softmax_and_logsumexp(self):
        rng = np.random.default_rng(14)
        x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        probe = Tensor(rng.normal(size=(3, 4)))
        finite_difference_check(lambda: ad.tensor_sum(ad.mul(ad.log_softmax(x, axis=-1), probe)), [x])
        probe2 = Tensor(rng.normal(size=(3,)))
        finite_difference_check(lambda: ad.tensor_sum(ad.mul(ad.logsumexp(x, axis=-1), probe2)), [x])

    def test_softplus(self):
        rng = np.random.default_rng(15)
        x = Tensor(rng.normal(size=(6,)) * 3.0, requires_grad=True)
        finite_difference_check(lambda: ad.tensor_sum(ad.softplus(x)), [x])

    def test_layer_norm(self):
        rng = np.random.default_rng(16)
        x = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
        g = Tensor(rng.normal(size=(5,)) + 1.0, requires_grad=True)
        b = Tensor(rng.normal(size=(5,)), requires_grad=True)
        probe = Tensor(rng.normal(size=(3, 5)))
        finite_difference_check(lambda: ad.tensor_sum(ad.mul(ad.layer_norm(x, g, b), probe)), [x, g, b])

    def test_reshape_transpose_concat_getitem(self):
        rng = np.random.default_rng(17)
        x = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
        y = Tensor(rng.normal(size=(2, 3, 2)), requires_grad=True)
        probe = Tensor(rng.normal(size=(2, 3, 6)))

        def fn():
            cat = ad.concat([x, y], axis=-1)
            t = ad.transpose(cat, (1, 0, 2))
            r = ad.reshape(t, (3, 2, 6))
            back = ad.transpose(r, (1, 0, 2))
            return ad.tensor_sum(ad.mul(back, probe))

        finite_difference_check(fn, [x, y])
        probe2 = Tensor(rng.normal(size=(3, 4)))
        finite_difference_check(lambda: ad.tensor_sum(ad.mul(ad.getitem(x, 1), probe2)), [x])

    def test_take_rows_with_duplicates(self):
        rng = np.random.default_rng(18)
        x = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        idx = np.array([0, 2, 2, 3])
        probe = Tensor(rng.normal(size=(4, 3)))
        finite_difference_check(lambda: ad.tensor_sum(ad.mul(ad.take_rows(x, idx), probe)), [x])

    def test_embedding(self):
        rng = np.random.default_rng(19)
        table = Tensor(rng.normal(size=(6, 3)), requires_grad=True)
        ids = np.array([[0, 5, 5], [2, 1, 0]])
        probe = Tensor(rng.normal(size=(2, 3, 3)))
        finite_difference_check(lambda: ad.tensor_sum(ad.mul(ad.embedding(table, ids), probe)), [table])

    def test_broadcast_to_and_mean(self):
        rng = np.random.default_rng(20)
        x = Tensor(rng.normal(size=(3, 1)), requires_grad=True)
        probe = Tensor(rng.normal(size=(3, 4)))
        finite_difference_check(lambda: ad.tensor_sum(ad.mul(ad.broadcast_to(x, (3, 4)), probe)), [x])
        finite_difference_check(lambda: ad.tensor_mean(ad.square(x)), [x])


class TestNoGrad:
    def test_no_graph_built(self):
        w = Tensor([1.0], requires_grad=True)
        with ad.no_grad():
            out = ad.mul(w, w)
        assert out._parents == ()
        assert out._backward is None

    def test_check_finite(self):
        with pytest.raises(FloatingPointError):
            ad.check_finite(Tensor([np.nan]), "probe")
        ad.check_finite(Tensor([1.0]), "probe")
