import math

import numpy as np
import pytest

from bitmatch import diffcore as dc

from oracles import matmul_oracle


def rand_tensor(rng, shape, requires_grad=False):
    return dc.Tensor(rng.standard_normal(shape), requires_grad=requires_grad)


class TestMatmul:
    def test_identity(self):
        a = dc.tensor([[1.0, 2.0], [3.0, 4.0]])
        out = dc.matmul(a, dc.tensor(np.eye(2)))
        np.testing.assert_array_equal(out.data, a.data)

    def test_orthogonal_rows(self):
        out = dc.matmul(dc.tensor([[1.0, 0.0]]), dc.tensor([[0.0], [5.0]]))
        np.testing.assert_array_equal(out.data, [[0.0]])

    def test_against_triple_loop_oracle(self):
        rng = np.random.default_rng(0)
        a = rng.standard_normal((3, 4))
        b = rng.standard_normal((4, 2))
        got = dc.matmul(dc.tensor(a), dc.tensor(b)).data
        want = np.array(matmul_oracle(a.tolist(), b.tolist()))
        np.testing.assert_allclose(got, want, atol=1e-12, rtol=0)

    def test_oracle_agreement_small_extents(self):
        rng = np.random.default_rng(7)
        for _ in range(25):
            m, k, n = rng.integers(1, 9, size=3)
            a = rng.standard_normal((m, k))
            b = rng.standard_normal((k, n))
            got = dc.matmul(dc.tensor(a), dc.tensor(b)).data
            want = np.array(matmul_oracle(a.tolist(), b.tolist())).reshape(m, n)
            np.testing.assert_allclose(got, want, atol=1e-12, rtol=0)

    def test_batched_matches_loop(self):
        rng = np.random.default_rng(3)
        a = rng.standard_normal((5, 3, 4))
        b = rng.standard_normal((4, 2))
        got = dc.matmul(dc.tensor(a), dc.tensor(b)).data
        for i in range(5):
            np.testing.assert_allclose(got[i], a[i] @ b, atol=1e-12)

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(dc.ShapeMismatch) as exc:
            dc.matmul(dc.zeros((2, 3)), dc.zeros((2, 3)))
        assert "(2, 3)" in str(exc.value)
        assert exc.value.lhs == (2, 3) and exc.value.rhs == (2, 3)


class TestSoftmaxRows:
    def test_analytic_exponentials(self):
        out = dc.softmax_rows(dc.tensor([[0.0, math.log(3.0)]]))
        np.testing.assert_allclose(out.data, [[0.25, 0.75]], atol=1e-12)

    def test_equal_values_uniform(self):
        for n in (1, 2, 5, 9):
            out = dc.softmax_rows(dc.tensor([[2.5] * n]))
            np.testing.assert_allclose(out.data, [[1.0 / n] * n], atol=1e-12)

    def test_rows_sum_to_one_and_in_unit_interval(self):
        rng = np.random.default_rng(11)
        x = dc.tensor(rng.standard_normal((6, 7)) * 20)
        y = dc.softmax_rows(x).data
        np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-12, rtol=0)
        assert np.all(y > 0) and np.all(y <= 1)

    def test_gradient_of_row_sums_is_zero(self):
        rng = np.random.default_rng(5)
        x = rand_tensor(rng, (3, 4), requires_grad=True)
        with dc.fresh_tape():
            loss = dc.reduce_sum(dc.softmax_rows(x))
            dc.backward(loss)
        np.testing.assert_allclose(x.grad, np.zeros_like(x.data), atol=1e-12)


class TestLayerNorm:
    def test_two_point_token(self):
        x = dc.tensor([[1.0, 3.0]])
        gamma, beta = dc.ones(2), dc.zeros(2)
        out = dc.layer_norm(x, gamma, beta, eps=1e-12)
        np.testing.assert_allclose(out.data, [[-1.0, 1.0]], atol=1e-5)

    def test_constant_token_collapses_to_beta(self):
        x = dc.tensor([[4.0, 4.0, 4.0]])
        beta = dc.tensor([0.5, -1.0, 2.0])
        out = dc.layer_norm(x, dc.ones(3), beta, eps=1e-6)
        np.testing.assert_allclose(out.data, beta.data[None, :], atol=1e-9)

    def test_output_statistics(self):
        rng = np.random.default_rng(2)
        x = dc.tensor(rng.standard_normal((5, 64)))
        out = dc.layer_norm(x, dc.ones(64), dc.zeros(64), eps=1e-12).data
        assert np.all(np.abs(out.mean(axis=-1)) < 1e-9)
        assert np.all(np.abs(out.var(axis=-1) - 1.0) < 1e-6)


class TestElementwise:
    def test_sigmoid_zero(self):
        assert dc.elementwise("sigmoid", dc.tensor(0.0)).item() == 0.5

    def test_gelu_zero(self):
        assert dc.elementwise("gelu", dc.tensor(0.0)).item() == 0.0

    def test_log_one(self):
        assert dc.elementwise("log", dc.tensor(1.0)).item() == 0.0

    def test_log_domain_error(self):
        with pytest.raises(dc.DomainError):
            dc.log(dc.tensor([-1.0]))
        with pytest.raises(dc.DomainError):
            dc.log(dc.tensor([0.0]))

    def test_scalar_broadcast(self):
        x = dc.tensor([1.0, 2.0])
        np.testing.assert_array_equal(dc.elementwise("add", x, 1.0).data, [2.0, 3.0])
        np.testing.assert_array_equal(dc.elementwise("mul", x, 3.0).data, [3.0, 6.0])

    def test_same_shape_required(self):
        with pytest.raises(dc.ShapeMismatch):
            dc.add(dc.zeros((2,)), dc.zeros((3,)))


class TestReduce:
    def test_mean_pool_rows(self):
        out = dc.reduce("mean_pool_rows", dc.tensor([[0.0, 2.0], [2.0, 0.0]]))
        np.testing.assert_array_equal(out.data, [1.0, 1.0])

    def test_sum_of_zeros(self):
        assert dc.reduce("sum", dc.zeros((4, 3))).item() == 0.0

    def test_mean_pool_gradient_splits_evenly(self):
        rng = np.random.default_rng(9)
        x = rand_tensor(rng, (4, 3), requires_grad=True)
        with dc.fresh_tape():
            dc.backward(dc.reduce_sum(dc.mean_pool_rows(x)))
        np.testing.assert_allclose(x.grad, np.full((4, 3), 1.0 / 4), atol=1e-15)


class TestL2Normalize:
    def test_three_four_five(self):
        out = dc.l2_normalize(dc.tensor([3.0, 4.0]), eps=1e-12)
        np.testing.assert_allclose(out.data, [0.6, 0.8], atol=1e-15)

    def test_zero_vector_guard(self):
        out = dc.l2_normalize(dc.zeros((3,)), eps=1e-12)
        np.testing.assert_array_equal(out.data, np.zeros(3))

    def test_idempotent_on_unit_vectors(self):
        rng = np.random.default_rng(21)
        v = rng.standard_normal(6)
        v /= np.linalg.norm(v)
        once = dc.l2_normalize(dc.tensor(v), eps=1e-12).data
        twice = dc.l2_normalize(dc.tensor(once), eps=1e-12).data
        np.testing.assert_allclose(twice, once, atol=1e-12)

    def test_norms_bounded(self):
        rng = np.random.default_rng(4)
        x = dc.tensor(rng.standard_normal((10, 5)) * 3)
        y = dc.l2_normalize(x, eps=1e-12).data
        norms = np.linalg.norm(y, axis=-1)
        np.testing.assert_allclose(norms, 1.0, atol=1e-12)


class TestBackward:
    def test_sum_gives_ones(self):
        x = dc.Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        with dc.fresh_tape():
            dc.backward(dc.reduce_sum(x))
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_square_gives_two_x(self):
        rng = np.random.default_rng(13)
        x = rand_tensor(rng, (3, 3), requires_grad=True)
        with dc.fresh_tape():
            dc.backward(dc.reduce_sum(dc.mul(x, x)))
        np.testing.assert_allclose(x.grad, 2 * x.data, atol=1e-15)

    def test_non_scalar_loss_rejected(self):
        x = dc.Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(dc.GradientUsageError):
            dc.backward(dc.scale(x, 2.0))

    def test_accumulation_is_linear(self):
        rng = np.random.default_rng(17)
        base = rng.standard_normal((4, 4))

        def loss_a(t):
            return dc.reduce_sum(dc.mul(t, t))

        def loss_b(t):
            return dc.reduce_sum(dc.sigmoid(t))

        x = dc.Tensor(base.copy(), requires_grad=True)
        with dc.fresh_tape():
            dc.backward(dc.add(loss_a(x), loss_b(x)))
        joint = x.grad.copy()

        x.zero_grad()
        with dc.fresh_tape():
            dc.backward(loss_a(x))
        with dc.fresh_tape():
            dc.backward(loss_b(x))
        np.testing.assert_allclose(x.grad, joint, atol=1e-12, rtol=0)

    def test_composite_matmul_softmax_log(self):
        rng = np.random.default_rng(19)
        w = rng.standard_normal((4, 3))

        def f(t):
            z = dc.softmax_rows(dc.matmul(t, dc.tensor(w)))
            return dc.reduce_sum(dc.log(z))

        x = dc.Tensor(rng.standard_normal((2, 4)))
        assert dc.grad_check(f, x, h=1e-5) < 1e-6


class TestGradCheck:
    def test_sigmoid_sum(self):
        rng = np.random.default_rng(23)
        x = dc.Tensor(rng.standard_normal((3, 4)))
        err = dc.grad_check(lambda t: dc.reduce_sum(dc.sigmoid(t)), x, h=1e-5)
        assert err < 1e-6

    def test_step_size_validated(self):
        with pytest.raises(dc.GradientUsageError):
            dc.grad_check(lambda t: dc.reduce_sum(t), dc.zeros((2,)), h=1e-2)


PRIMITIVE_CASES = {
    "matmul": lambda t, aux: dc.reduce_sum(dc.matmul(t, aux)),
    "transpose": lambda t, aux: dc.reduce_sum(dc.mul(dc.transpose(t), dc.transpose(t))),
    "softmax_rows": lambda t, aux: dc.reduce_sum(dc.mul(dc.softmax_rows(t), aux)),
    "layer_norm": lambda t, aux: dc.reduce_sum(
        dc.mul(dc.layer_norm(t, dc.tensor(np.linspace(0.5, 1.5, t.shape[-1])),
                             dc.tensor(np.linspace(-0.2, 0.2, t.shape[-1])), 1e-5), aux)
    ),
    "gelu": lambda t, aux: dc.reduce_sum(dc.mul(dc.gelu(t), aux)),
    "sigmoid": lambda t, aux: dc.reduce_sum(dc.mul(dc.sigmoid(t), aux)),
    "exp": lambda t, aux: dc.reduce_sum(dc.mul(dc.exp(t), aux)),
    "relu": lambda t, aux: dc.reduce_sum(dc.mul(dc.relu(t), aux)),
    "neg": lambda t, aux: dc.reduce_sum(dc.mul(dc.neg(t), aux)),
    "scale": lambda t, aux: dc.reduce_sum(dc.mul(dc.scale(t, 1.7), aux)),
    "add": lambda t, aux: dc.reduce_sum(dc.mul(dc.add(t, aux), aux)),
    "sub": lambda t, aux: dc.reduce_sum(dc.mul(dc.sub(t, aux), aux)),
    "mul": lambda t, aux: dc.reduce_sum(dc.mul(dc.mul(t, aux), aux)),
    "badd": lambda t, aux: dc.reduce_sum(
        dc.mul(dc.badd(t, dc.tensor(aux.data[0])), aux)
    ),
    "add_colvec": lambda t, aux: dc.reduce_sum(
        dc.mul(dc.add_colvec(t, dc.tensor(aux.data[:, 0])), aux)
    ),
    "mean_pool_rows": lambda t, aux: dc.reduce_sum(
        dc.mul(dc.mean_pool_rows(t), dc.tensor(aux.data[0]))
    ),
    "sum_last": lambda t, aux: dc.reduce_sum(
        dc.mul(dc.sum_last(t), dc.tensor(aux.data[:, 0]))
    ),
    "l2_normalize": lambda t, aux: dc.reduce_sum(dc.mul(dc.l2_normalize(t, 1e-9), aux)),
    "take_pairs": lambda t, aux: dc.reduce_sum(
        dc.take_pairs(t, [0, 1, 1], [2, 0, 2])
    ),
    "concat0": lambda t, aux: dc.reduce_sum(dc.mul(dc.concat0([t, t]),
                                                   dc.concat0([aux, aux]))),
    "repeat_interleave0": lambda t, aux: dc.reduce_sum(
        dc.mul(dc.repeat_interleave0(t, 2), dc.concat0([aux, aux]))
    ),
    "tile0": lambda t, aux: dc.reduce_sum(
        dc.mul(dc.tile0(t, 2), dc.concat0([aux, aux]))
    ),
    "slice_last": lambda t, aux: dc.reduce_sum(dc.slice_last(t, 1, 3)),
    "reshape": lambda t, aux: dc.reduce_sum(
        dc.mul(dc.reshape(t, (t.data.size,)), dc.reshape(aux, (aux.data.size,)))
    ),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVE_CASES))
def test_primitive_gradients_match_finite_differences(name):
    """Every primitive passes a central-difference check on 100 seeded inputs."""
    build = PRIMITIVE_CASES[name]
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(1000 + seed)
        x = dc.Tensor(rng.standard_normal((3, 4)))
        aux = dc.tensor(rng.standard_normal((3, 4)))
        if name == "matmul":
            aux = dc.tensor(rng.standard_normal((4, 3)))
        worst = max(worst, dc.grad_check(lambda t: build(t, aux), x, h=1e-5))
    assert worst < 1e-6, f"{name}: max rel error {worst}"


def test_clamp_gradients_outside_interval_are_zero():
    x = dc.Tensor(np.array([-1.0, 0.5, 2.0]), requires_grad=True)
    with dc.fresh_tape():
        dc.backward(dc.reduce_sum(dc.clamp(x, 0.0, 1.0)))
    np.testing.assert_array_equal(x.grad, [0.0, 1.0, 0.0])


def test_tensor_rejects_non_finite():
    with pytest.raises(dc.DomainError):
        dc.tensor([np.nan])
    with pytest.raises(dc.DomainError):
        dc.tensor([np.inf])


def test_no_grad_suppresses_recording():
    x = dc.Tensor(np.ones(3), requires_grad=True)
    with dc.fresh_tape() as tape:
        with dc.no_grad():
            y = dc.scale(x, 2.0)
        assert not y.requires_grad
        assert len(tape) == 0
