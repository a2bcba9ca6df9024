import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cmdskel import autodiff as ad
from cmdskel.autodiff import Tensor
from cmdskel.errors import (
    DegenerateInputError,
    DimensionError,
    InputError,
    NumericDomainError,
    ParameterError,
    UsageError,
)
from cmdskel.verify import numeric_grad, rel_error


def naive_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


class TestMatmul:
    def test_identity(self, rng):
        a = rng.normal(size=(4, 4))
        assert np.array_equal((Tensor(a) @ Tensor(np.eye(4))).data, a)

    def test_zero(self, rng):
        out = Tensor(rng.normal(size=(3, 5))) @ Tensor(np.zeros((5, 2)))
        assert np.array_equal(out.data, np.zeros((3, 2)))

    def test_matches_triple_loop(self, rng):
        a, b = rng.normal(size=(5, 4)), rng.normal(size=(4, 3))
        np.testing.assert_allclose((Tensor(a) @ Tensor(b)).data, naive_matmul(a, b), atol=1e-12, rtol=0)

    def test_shape_mismatch_reports_both(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 5\)"):
            Tensor(np.ones((2, 3))) @ Tensor(np.ones((4, 5)))

    def test_gradients(self, rng):
        a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
        g = rng.normal(size=(3, 2))
        ((a @ b) * Tensor(g)).sum().backward()
        np.testing.assert_allclose(a.grad, g @ b.data.T, atol=1e-12)
        np.testing.assert_allclose(b.grad, a.data.T @ g, atol=1e-12)


class TestSoftmax:
    def test_equal_logits_uniform(self):
        for tau in (0.05, 1.0, 7.0):
            np.testing.assert_allclose(ad.softmax(Tensor(np.full(6, 0.3)), tau).data, np.full(6, 1 / 6), atol=1e-15)

    def test_analytic(self):
        np.testing.assert_allclose(ad.softmax(Tensor([math.log(2), 0.0]), 1.0).data, [2 / 3, 1 / 3], atol=1e-15)

    def test_random_against_extended_precision(self, rng):
        from mpmath import mp, mpf, exp

        mp.dps = 40
        logits = rng.uniform(-1, 1, size=50)
        out = ad.softmax(Tensor(logits), 0.05).data
        e = [exp(mpf(float(v)) / mpf("0.05")) for v in logits]
        total = sum(e)
        ref = np.array([float(x / total) for x in e])
        assert abs(out.sum() - 1) < 1e-9
        np.testing.assert_allclose(out, ref, atol=1e-12, rtol=0)

    def test_large_scaled_logits_do_not_overflow(self):
        out = ad.softmax(Tensor([1000.0, 999.0]), 0.05).data
        assert np.all(np.isfinite(out)) and abs(out.sum() - 1) < 1e-12

    @pytest.mark.parametrize("tau", [0.0, -1.0])
    def test_bad_temperature(self, tau):
        with pytest.raises(ParameterError):
            ad.softmax(Tensor([1.0, 2.0]), tau)

    def test_non_finite_logit(self):
        with pytest.raises(InputError):
            ad.softmax(Tensor([1.0, np.nan]), 1.0)

    @settings(max_examples=60, deadline=None)
    @given(
        arrays(np.float64, st.integers(1, 40), elements=st.floats(-50, 50)),
        st.floats(0.01, 10.0),
    )
    def test_sums_to_one_and_positive(self, logits, tau):
        p = ad.softmax(Tensor(logits), tau).data
        assert abs(p.sum() - 1) <= 1e-6
        assert np.all(p >= 0)
        # strictly positive unless the gap exceeds double range after scaling
        if (logits.max() - logits.min()) / tau < 700:
            assert np.all(p > 0)

    def test_log_softmax_consistent(self, rng):
        x = rng.normal(size=(3, 7))
        np.testing.assert_allclose(np.exp(ad.log_softmax(Tensor(x), 0.1).data), ad.softmax(Tensor(x), 0.1).data, atol=1e-14)


class TestKL:
    def test_self_is_zero(self, rng):
        p = rng.dirichlet(np.ones(9))
        assert ad.kl_div(p, p).item() == 0.0

    def test_analytic(self):
        assert ad.kl_div([1.0, 0.0], [0.5, 0.5]).item() == pytest.approx(math.log(2), abs=1e-15)

    def test_random_against_summation(self, rng):
        p, q = rng.dirichlet(np.ones(16)), rng.dirichlet(np.ones(16))
        ref = 0.0
        for pi, qi in zip(p, q):
            ref += pi * math.log(pi / qi)
        assert ad.kl_div(p, q).item() == pytest.approx(ref, abs=1e-12)

    def test_zero_q_on_support(self):
        with pytest.raises(NumericDomainError):
            ad.kl_div([0.5, 0.5], [1.0, 0.0])

    def test_gradient_only_into_student(self, rng):
        p = Tensor(rng.dirichlet(np.ones(5)))
        q = Tensor(rng.dirichlet(np.ones(5)), requires_grad=True)
        ad.kl_div(p, q).backward()
        np.testing.assert_allclose(q.grad, -p.data / q.data)
        assert p.grad is None

    def test_nonnegative_and_zero_iff_equal(self):
        rng = np.random.default_rng(11)
        for _ in range(200):
            k = int(rng.integers(2, 20))
            p, q = rng.dirichlet(np.ones(k)), rng.dirichlet(np.ones(k))
            assert ad.kl_div(p, q).item() > 1e-9
            assert abs(ad.kl_div(p, p).item()) <= 1e-9


class TestTopK:
    def test_full_sort(self, rng):
        v = rng.normal(size=10)
        vals, idx = ad.topk(v, 10)
        np.testing.assert_array_equal(vals, np.sort(v)[::-1])

    def test_small_example(self):
        vals, idx = ad.topk(np.array([0.1, 0.9, 0.5]), 2)
        np.testing.assert_array_equal(vals, [0.9, 0.5])
        np.testing.assert_array_equal(idx, [1, 2])

    def test_against_sort_oracle(self, rng):
        v = rng.normal(size=1000)
        vals, idx = ad.topk(v, 37)
        ref = sorted(range(1000), key=lambda i: (-v[i], i))[:37]
        np.testing.assert_array_equal(idx, ref)
        np.testing.assert_array_equal(vals, v[ref])

    def test_ties_smaller_index_first(self):
        _, idx = ad.topk(np.array([1.0, 3.0, 3.0, 1.0, 3.0]), 4)
        np.testing.assert_array_equal(idx, [1, 2, 4, 0])

    def test_k_too_large(self):
        with pytest.raises(ParameterError):
            ad.topk(np.ones(3), 4)

    @settings(max_examples=80, deadline=None)
    @given(st.data())
    def test_randomized_sweep_with_duplicates(self, data):
        n = data.draw(st.integers(1, 60))
        v = np.array(data.draw(st.lists(st.integers(-3, 3), min_size=n, max_size=n)), dtype=float)
        k = data.draw(st.integers(1, n))
        vals, idx = ad.topk(v, k)
        ref = sorted(range(n), key=lambda i: (-v[i], i))[:k]
        assert list(idx) == ref


class TestNormalize:
    def test_analytic(self):
        np.testing.assert_allclose(ad.l2_normalize(Tensor([3.0, 4.0])).data, [0.6, 0.8], atol=1e-15)

    def test_unit_fixed_point(self):
        v = np.array([0.0, 1.0, 0.0])
        np.testing.assert_array_equal(ad.l2_normalize(Tensor(v)).data, v)

    def test_random_norm(self, rng):
        for _ in range(50):
            out = ad.l2_normalize(Tensor(rng.normal(size=13) * rng.uniform(1e-3, 1e3))).data
            assert abs(np.linalg.norm(out) - 1) <= 1e-9

    def test_degenerate(self):
        with pytest.raises(DegenerateInputError):
            ad.l2_normalize(Tensor(np.zeros(4)))


class TestBackward:
    def test_sum_of_squares(self, rng):
        v = Tensor(rng.normal(size=6), requires_grad=True)
        (v * v).sum().backward()
        np.testing.assert_allclose(v.grad, 2 * v.data)

    def test_constant_loss(self, rng):
        v = Tensor(rng.normal(size=4), requires_grad=True)
        (v * 0.0).sum().backward()
        np.testing.assert_array_equal(v.grad, np.zeros(4))

    def test_non_scalar(self):
        v = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(UsageError):
            (v * 2.0).backward()

    def test_shared_subexpression_visited_once(self, rng):
        x = Tensor(rng.normal(size=3), requires_grad=True)
        y = x * 2.0
        (y * y + y).sum().backward()
        np.testing.assert_allclose(x.grad, 8 * x.data + 2)

    def test_no_grad_records_nothing(self):
        x = Tensor(np.ones(2), requires_grad=True)
        with ad.no_grad():
            y = x * 3.0
        assert not y.requires_grad

    def test_gradient_shape_matches_value(self, rng):
        x = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=(3,)), requires_grad=True)
        ((x + b) * (x - b)).mean().backward()
        assert x.grad.shape == x.shape and b.grad.shape == b.shape


ELEMENTWISE = {
    "exp": lambda t: ad.exp(t),
    "log": lambda t: ad.log(ad.exp(t) + 1.0),
    "tanh": ad.tanh,
    "sigmoid": ad.sigmoid,
    "sqrt": lambda t: ad.sqrt(t * t + 1.0),
    "div": lambda t: (t + 3.0) / (t * t + 1.0),
    "softmax": lambda t: ad.softmax(t, 0.3) * Tensor(np.arange(1.0, 7.0).reshape(2, 3)),
    "log_softmax": lambda t: ad.log_softmax(t, 0.05, axis=0),
    "normalize": lambda t: ad.l2_normalize(t) * Tensor(np.arange(6.0).reshape(2, 3)),
    "kl_student": lambda t: ad.kl_div(np.array([[0.2, 0.3, 0.5], [0.0, 0.4, 0.6]]), ad.softmax(t, 1.0)),
    "gather": lambda t: ad.gather(t, np.array([[2, 0], [1, 1]]), axis=1) * 3.0,
    "concat": lambda t: ad.concat([t, t * t], axis=0),
    "transpose": lambda t: t.T @ t,
    "getitem": lambda t: t[:, 1:] * t[:, :2],
    "stack": lambda t: ad.stack([t, ad.exp(t)], axis=1),
}


@pytest.mark.parametrize("name", sorted(ELEMENTWISE))
def test_op_gradient_matches_finite_differences(name, rng):
    fn = ELEMENTWISE[name]
    x = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    w = rng.normal(size=fn(Tensor(x.data)).shape)

    def loss():
        return (fn(Tensor(x.data)) * Tensor(w)).sum().item()

    (fn(x) * Tensor(w)).sum().backward()
    assert rel_error(x.grad, numeric_grad(loss, x.data)) < 1e-4
