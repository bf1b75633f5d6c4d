import numpy as np
import pytest

from bitmatch import diffcore as dc
from bitmatch import nn


def make_params(rng, shapes):
    ps = nn.ParameterSet()
    for i, shape in enumerate(shapes):
        ps.add(f"p{i}", dc.Tensor(rng.standard_normal(shape)))
    return ps


class TestLinear:
    def test_identity_weights(self):
        layer = nn.LinearLayer(weight=dc.tensor(np.eye(3)), bias=dc.zeros(3))
        x = dc.tensor([[1.0, 2.0, 3.0]])
        np.testing.assert_array_equal(nn.linear_forward(layer, x).data, x.data)

    def test_zero_input_broadcasts_bias(self):
        layer = nn.LinearLayer(weight=dc.zeros((3, 2)), bias=dc.tensor([1.0, -2.0]))
        out = nn.linear_forward(layer, dc.zeros((4, 3)))
        np.testing.assert_array_equal(out.data, np.tile([1.0, -2.0], (4, 1)))

    def test_matches_matmul_plus_bias(self):
        rng = np.random.default_rng(0)
        layer = nn.init_linear(rng, 5, 3)
        layer.bias.data[:] = rng.standard_normal(3)
        x = rng.standard_normal((4, 5))
        got = nn.linear_forward(layer, dc.tensor(x)).data
        np.testing.assert_allclose(got, x @ layer.weight.data + layer.bias.data,
                                   atol=1e-12)

    def test_shape_error(self):
        layer = nn.init_linear(np.random.default_rng(0), 5, 3)
        with pytest.raises(dc.ShapeMismatch):
            nn.linear_forward(layer, dc.zeros((2, 4)))

    def test_init_bound_and_reproducibility(self):
        a = nn.init_linear(np.random.default_rng(42), 8, 8)
        b = nn.init_linear(np.random.default_rng(42), 8, 8)
        np.testing.assert_array_equal(a.weight.data, b.weight.data)
        bound = np.sqrt(6.0 / 16.0)
        assert np.all(np.abs(a.weight.data) <= bound)
        np.testing.assert_array_equal(a.bias.data, np.zeros(8))


class TestFeedForward:
    def test_zero_block_is_zero(self):
        rng = np.random.default_rng(1)
        block = nn.init_ffn(rng, 4)
        for layer in (block.lin1, block.lin2):
            layer.weight.data[:] = 0.0
            layer.bias.data[:] = 0.0
        out = nn.ffn_forward(block, dc.tensor(rng.standard_normal((3, 4))))
        np.testing.assert_array_equal(out.data, np.zeros((3, 4)))

    def test_hidden_width_is_4x(self):
        block = nn.init_ffn(np.random.default_rng(2), 6)
        assert block.lin1.weight.shape == (6, 24)
        assert block.lin2.weight.shape == (24, 6)

    def test_large_positive_passthrough(self):
        # lin1 embeds into the first C hidden coords, lin2 reads them back;
        # for large positive inputs gelu is close to identity.
        c = 3
        block = nn.init_ffn(np.random.default_rng(3), c)
        block.lin1.weight.data[:] = 0.0
        block.lin1.weight.data[:, :c] = np.eye(c)
        block.lin1.bias.data[:] = 0.0
        block.lin2.weight.data[:] = 0.0
        block.lin2.weight.data[:c, :] = np.eye(c)
        block.lin2.bias.data[:] = 0.0
        x = np.full((2, c), 40.0)
        out = nn.ffn_forward(block, dc.tensor(x))
        np.testing.assert_allclose(out.data, x, atol=1e-9)

    def test_shape_preserved(self):
        rng = np.random.default_rng(4)
        block = nn.init_ffn(rng, 5)
        for shape in ((2, 5), (3, 7, 5)):
            out = nn.ffn_forward(block, dc.tensor(rng.standard_normal(shape)))
            assert out.shape == shape

    def test_gradient_check(self):
        rng = np.random.default_rng(5)
        block = nn.init_ffn(rng, 3)
        block.lin1.bias.data[:] = rng.standard_normal(12) * 0.1
        x = dc.Tensor(rng.standard_normal((4, 3)))
        err = dc.grad_check(
            lambda t: dc.reduce_sum(dc.sigmoid(nn.ffn_forward(block, t))), x)
        assert err < 1e-6


class TestAdamW:
    def test_first_step_is_signed(self):
        rng = np.random.default_rng(6)
        ps = make_params(rng, [(4,)])
        before = ps["p0"].data.copy()
        g = rng.standard_normal(4)
        ps["p0"].grad = g.copy()
        cfg = nn.OptimizerConfig(lr=0.1, weight_decay=0.0, eps=1e-300).validate()
        nn.adamw_step(ps, cfg, lr_t=0.1)
        np.testing.assert_allclose(ps["p0"].data, before - 0.1 * np.sign(g),
                                   atol=1e-12)

    def test_zero_grad_zero_decay_is_noop(self):
        rng = np.random.default_rng(7)
        ps = make_params(rng, [(3, 3)])
        before = ps["p0"].data.copy()
        ps["p0"].grad = np.zeros((3, 3))
        nn.adamw_step(ps, nn.OptimizerConfig(lr=0.1), lr_t=0.1)
        np.testing.assert_array_equal(ps["p0"].data, before)

    def test_determinism_bit_identical(self):
        def run():
            rng = np.random.default_rng(8)
            ps = make_params(rng, [(5,)])
            cfg = nn.OptimizerConfig(lr=0.05, weight_decay=0.01)
            for step in range(3):
                ps["p0"].grad = np.sin(np.arange(5.0) + step)
                nn.adamw_step(ps, cfg, lr_t=0.05)
                ps.zero_grads()
            return ps["p0"].data.tobytes()

        assert run() == run()

    def test_missing_grad_names_parameter(self):
        ps = make_params(np.random.default_rng(9), [(2,), (2,)])
        ps["p0"].grad = np.zeros(2)
        with pytest.raises(dc.GradientUsageError, match="p1"):
            nn.adamw_step(ps, nn.OptimizerConfig(lr=0.1), lr_t=0.1)

    def test_grads_untouched_and_t_incremented(self):
        ps = make_params(np.random.default_rng(10), [(2,)])
        g = np.array([1.0, -1.0])
        ps["p0"].grad = g.copy()
        nn.adamw_step(ps, nn.OptimizerConfig(lr=0.1), lr_t=0.1)
        np.testing.assert_array_equal(ps["p0"].grad, g)
        assert ps.t == 1


class TestCosineLr:
    CFG = nn.OptimizerConfig(lr=3e-4, min_lr=3e-6, total_steps=100)

    def test_endpoints(self):
        assert nn.cosine_lr(self.CFG, 0) == pytest.approx(3e-4)
        assert nn.cosine_lr(self.CFG, 100) == pytest.approx(3e-6)

    def test_midpoint(self):
        assert nn.cosine_lr(self.CFG, 50) == pytest.approx((3e-4 + 3e-6) / 2)

    def test_monotone_non_increasing(self):
        values = [nn.cosine_lr(self.CFG, s) for s in range(101)]
        assert all(a >= b for a, b in zip(values, values[1:]))

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            nn.cosine_lr(self.CFG, 101)
        with pytest.raises(ValueError):
            nn.cosine_lr(self.CFG, -1)


class TestParameterSet:
    def test_duplicate_name_rejected(self):
        ps = nn.ParameterSet()
        ps.add("w", dc.zeros((2,)))
        with pytest.raises(ValueError):
            ps.add("w", dc.zeros((2,)))

    def test_zero_grads(self):
        ps = make_params(np.random.default_rng(11), [(2,), (3,)])
        for _, p in ps.items():
            p.grad = np.ones_like(p.data)
        ps.zero_grads()
        assert all(p.grad is None for _, p in ps.items())

    def test_registration_order_stable(self):
        ps = nn.ParameterSet()
        layer = nn.init_linear(np.random.default_rng(12), 3, 2)
        nn.register_linear(ps, "enc.proj", layer)
        assert ps.names() == ["enc.proj.weight", "enc.proj.bias"]


class TestAttention:
    def test_single_head_matches_oracle(self):
        from oracles import cross_attention_oracle
        rng = np.random.default_rng(13)
        attn = nn.init_attention(rng, 4)
        q = rng.standard_normal((3, 4))
        kv = rng.standard_normal((3, 4))
        got = nn.attention_forward(attn, dc.tensor(q), dc.tensor(kv)).data
        want = cross_attention_oracle(q.tolist(), kv.tolist(),
                                      attn.wq.data.tolist(),
                                      attn.wk.data.tolist(),
                                      attn.wv.data.tolist())
        np.testing.assert_allclose(got, np.array(want), atol=1e-12)

    def test_heads_must_divide(self):
        with pytest.raises(ValueError):
            nn.init_attention(np.random.default_rng(14), 6, heads=4)

    def test_multi_head_shape_and_gradcheck(self):
        rng = np.random.default_rng(15)
        attn = nn.init_attention(rng, 4, heads=2)
        kv = dc.tensor(rng.standard_normal((3, 4)))
        x = dc.Tensor(rng.standard_normal((3, 4)))
        out = nn.attention_forward(attn, dc.tensor(x.data), kv)
        assert out.shape == (3, 4)
        err = dc.grad_check(
            lambda t: dc.reduce_sum(dc.sigmoid(nn.attention_forward(attn, t, kv))), x)
        assert err < 1e-6
