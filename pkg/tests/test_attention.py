import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import siamtpn.tensor as T
from siamtpn.attention import (
    MhaParams,
    PabParams,
    PosEncoding,
    attention_scale,
    flops_mha,
    flops_pa,
    flops_pab,
    multi_head,
    pab,
    pooling_attention,
    scaled_dot_attention,
)
from siamtpn.errors import ShapeError
from siamtpn.gradcheck import gradcheck
from siamtpn.nn import named_parameters

import oracles


def rand(rng, *shape):
    return T.Tensor(rng.standard_normal(shape))



def randomize(params, rng, scale=0.5):
    for t in named_parameters(params).values():
        t.data = t.data + scale * rng.standard_normal(t.shape)


class TestScaledDot:
    def test_single_token(self):
        rng = np.random.default_rng(0)
        v = rand(rng, 1, 4)
        out = scaled_dot_attention(rand(rng, 1, 4), rand(rng, 1, 4), v)
        assert np.array_equal(out.data, v.data)

    def test_identical_values(self):
        rng = np.random.default_rng(1)
        row = rng.standard_normal(4)
        out = scaled_dot_attention(rand(rng, 3, 4), rand(rng, 6, 4), T.Tensor(np.tile(row, (6, 1))))
        assert np.abs(out.data - row).max() < 1e-12

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(2)
        q, k, v = rng.standard_normal((3, 4)), rng.standard_normal((5, 4)), rng.standard_normal((5, 4))
        got, w = scaled_dot_attention(T.Tensor(q), T.Tensor(k), T.Tensor(v), return_weights=True)
        ref, ref_w = oracles.attention(q, k, v, 0.5)
        assert np.abs(got.data - ref).max() < 1e-12
        assert np.abs(w - ref_w).max() < 1e-12

    def test_positional_encoding_added_to_q_and_k(self):
        rng = np.random.default_rng(3)
        q, k, v, p = (rng.standard_normal((4, 4)) for _ in range(4))
        got = scaled_dot_attention(T.Tensor(q), T.Tensor(k), T.Tensor(v), pos=PosEncoding(T.Tensor(p)))
        ref, _ = oracles.attention(q + p, k + p, v, 0.5)
        assert np.abs(got.data - ref).max() < 1e-12

    def test_width_mismatch(self):
        with pytest.raises(ShapeError):
            scaled_dot_attention(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((2, 4))), T.Tensor(np.ones((2, 4))))


class TestMultiHead:
    def test_single_head_identity_equals_attention(self):
        rng = np.random.default_rng(4)
        eye = np.eye(6)
        p = MhaParams(*(T.Tensor(eye) for _ in range(4)), heads=1)
        q, k, v = rand(rng, 3, 6), rand(rng, 5, 6), rand(rng, 5, 6)
        a = multi_head(q, k, v, p).data
        b = scaled_dot_attention(q, k, v).data
        assert np.abs(a - b).max() < 1e-12

    def test_zero_value_projection(self):
        rng = np.random.default_rng(5)
        p = MhaParams.init(rng, 8, 2)
        p.w_v = T.Tensor(np.zeros((8, 8)))
        out = multi_head(rand(rng, 3, 8), rand(rng, 4, 8), rand(rng, 4, 8), p)
        assert np.array_equal(out.data, np.zeros((3, 8)))

    @pytest.mark.parametrize("seed", range(5))
    def test_two_heads_match_slice_oracle(self, seed):
        rng = np.random.default_rng(seed)
        p = MhaParams.init(rng, 8, 2)
        q, k, v = rng.standard_normal((3, 8)), rng.standard_normal((5, 8)), rng.standard_normal((5, 8))
        got = multi_head(T.Tensor(q), T.Tensor(k), T.Tensor(v), p).data
        ref = oracles.multi_head(q, k, v, p.w_q.data, p.w_k.data, p.w_v.data, p.w_o.data, 2)
        assert np.abs(got - ref).max() < 1e-12

    def test_full_dim_scale_flag(self):
        rng = np.random.default_rng(6)
        p = MhaParams.init(rng, 8, 4)
        q, k, v = rng.standard_normal((3, 8)), rng.standard_normal((5, 8)), rng.standard_normal((5, 8))
        got = multi_head(T.Tensor(q), T.Tensor(k), T.Tensor(v), p, scale_mode="full_dim").data
        ref = oracles.multi_head(q, k, v, p.w_q.data, p.w_k.data, p.w_v.data, p.w_o.data, 4, scale=1 / math.sqrt(8))
        assert np.abs(got - ref).max() < 1e-12
        assert attention_scale(8, 2) == 0.5

    def test_indivisible_heads(self):
        with pytest.raises(ShapeError):
            MhaParams.init(np.random.default_rng(0), 10, 3)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000), st.sampled_from([(4, 1), (4, 2), (8, 4), (6, 3)]), st.integers(1, 9), st.integers(1, 9))
    def test_attention_rows_are_distributions(self, seed, ch, nq, nkv):
        c, n = ch
        rng = np.random.default_rng(seed)
        p = MhaParams.init(rng, c, n)
        _, w = multi_head(rand(rng, nq, c) * 5, rand(rng, nkv, c) * 5, rand(rng, nkv, c), p, return_weights=True)
        assert w.shape == (n, nq, nkv)
        assert np.all(w >= 0)
        assert np.abs(w.sum(axis=-1) - 1).max() < 1e-9


class TestPoolingAttention:
    @pytest.mark.parametrize("seed", range(5))
    def test_ratio_one_is_multi_head(self, seed):
        rng = np.random.default_rng(seed)
        p = MhaParams.init(rng, 8, 2)
        q, kmap, vmap = rand(rng, 6, 8), rand(rng, 3, 4, 8), rand(rng, 3, 4, 8)
        a = pooling_attention(q, kmap, vmap, p, 1).data
        b = multi_head(q, T.flatten(kmap), T.flatten(vmap), p, pos=None).data
        assert np.abs(a - b).max() <= 1e-12

    def test_constant_values(self):
        rng = np.random.default_rng(7)
        p = MhaParams.init(rng, 8, 2)
        v = rng.standard_normal(8)
        out = pooling_attention(rand(rng, 5, 8), rand(rng, 4, 4, 8), T.Tensor(np.tile(v, (4, 4, 1))), p, 2).data
        expect = v @ p.w_v.data @ p.w_o.data
        assert np.abs(out - expect).max() < 1e-12

    def test_pooled_matches_composed_oracle(self):
        rng = np.random.default_rng(8)
        p = MhaParams.init(rng, 8, 2)
        q, km, vm = rng.standard_normal((5, 8)), rng.standard_normal((4, 4, 8)), rng.standard_normal((4, 4, 8))
        got = pooling_attention(T.Tensor(q), T.Tensor(km), T.Tensor(vm), p, 2).data
        kk, vv = oracles.avg_pool(km, 2).reshape(-1, 8), oracles.avg_pool(vm, 2).reshape(-1, 8)
        ref = oracles.multi_head(q, kk, vv, p.w_q.data, p.w_k.data, p.w_v.data, p.w_o.data, 2)
        assert np.abs(got - ref).max() < 1e-12

    def test_map_shape_mismatch(self):
        rng = np.random.default_rng(0)
        p = MhaParams.init(rng, 4, 1)
        with pytest.raises(ShapeError):
            pooling_attention(rand(rng, 2, 4), rand(rng, 4, 4, 4), rand(rng, 2, 2, 4), p, 2)


class TestPab:
    @pytest.mark.parametrize("nq,h,w,r", [(256, 32, 32, 4), (256, 16, 16, 2), (256, 8, 8, 1)])
    def test_output_shape_is_query_shape(self, nq, h, w, r):
        rng = np.random.default_rng(0)
        p = PabParams.init(rng, 8, 2, r)
        kv = rand(rng, h, w, 8)
        assert pab(rand(rng, nq, 8), kv, kv, p).shape == (nq, 8)

    def test_residual_only(self):
        rng = np.random.default_rng(9)
        p = PabParams.init(rng, 8, 2, 2)
        randomize(p.norm1, rng)
        randomize(p.norm2, rng)
        p.attn.w_v = T.Tensor(np.zeros((8, 8)))
        p.mlp.fc2.w = T.Tensor(np.zeros(p.mlp.fc2.w.shape))
        p.mlp.fc2.b = T.Tensor(np.zeros(8))
        q = rand(rng, 5, 8)
        kv = rand(rng, 4, 4, 8)
        got = pab(q, kv, kv, p).data
        n1 = T.layer_norm(q, p.norm1.gamma, p.norm1.beta)
        ref = T.layer_norm(n1, p.norm2.gamma, p.norm2.beta).data
        assert np.abs(got - ref).max() < 1e-12

    @pytest.mark.parametrize("seed", range(3))
    def test_matches_step_oracle(self, seed):
        rng = np.random.default_rng(seed)
        p = PabParams.init(rng, 8, 2, 2)
        randomize(p, rng, 0.2)
        q, km, vm = rng.standard_normal((6, 8)), rng.standard_normal((5, 5, 8)), rng.standard_normal((5, 5, 8))
        got = pab(T.Tensor(q), T.Tensor(km), T.Tensor(vm), p).data
        ref = oracles.pab(q, km, vm, oracles.pab_dict(p), 2, 2)
        assert np.abs(got - ref).max() < 1e-12

    def test_hidden_width_default(self):
        p = PabParams.init(np.random.default_rng(0), 12, 3, 1)
        assert p.mlp.hidden == 24
        assert PabParams.init(np.random.default_rng(0), 12, 3, 1, mlp_ratio=4).mlp.hidden == 48

    def test_init_deterministic(self):
        a = PabParams.init(np.random.default_rng(5), 8, 2, 2)
        b = PabParams.init(np.random.default_rng(5), 8, 2, 2)
        for (na, ta), (nb, tb) in zip(named_parameters(a).items(), named_parameters(b).items()):
            assert na == nb and np.array_equal(ta.data, tb.data)
        bound = math.sqrt(6 / 16)
        assert np.abs(a.attn.w_q.data).max() <= bound


class TestCostModel:
    def test_unit(self):
        assert flops_mha(1, 1, 1) == 4

    def test_reference_points(self):
        assert flops_mha(256, 256, 192) == 44_040_192
        assert flops_mha(256, 64, 192) == 18_087_936

    def test_pa(self):
        assert flops_pa(256, 16, 16, 192, 2) == 18_087_936 + 49_152
        assert flops_pa(10, 4, 6, 8, 1) == flops_mha(10, 24, 8) + 4 * 6 * 8

    @pytest.mark.parametrize("nq,h,c", [(256, 32, 192), (64, 32, 64), (256, 16, 64)])
    def test_pooling_reduces_cost(self, nq, h, c):
        assert h * h > c
        assert flops_pa(nq, h, h, c, 4) / flops_pa(nq, h, h, c, 1) < 1

    @pytest.mark.parametrize("nq,nkv,c", [(16, 9, 8), (7, 25, 12)])
    def test_mha_matches_counter(self, nq, nkv, c):
        rng = np.random.default_rng(0)
        p = MhaParams.init(rng, c, 2)
        with T.OpCounter() as cnt:
            multi_head(rand(rng, nq, c), rand(rng, nkv, c), rand(rng, nkv, c), p)
        assert cnt.by_tag["mha"] == flops_mha(nq, nkv, c)

    @pytest.mark.parametrize("r", [1, 2, 3])
    def test_pab_matches_counter(self, r):
        rng = np.random.default_rng(0)
        p = PabParams.init(rng, 8, 2, r)
        kv = rand(rng, 5, 7, 8)
        with T.OpCounter() as cnt:
            pab(rand(rng, 9, 8), kv, kv, p)
        assert cnt.tagged("mha", "pool") == flops_pa(9, 5, 7, 8, r)
        assert cnt.mul_adds == flops_pab(9, 5, 7, 8, r, p.mlp.hidden)


@pytest.mark.parametrize("seed", range(10))
class TestAttentionGradients:
    def test_multi_head(self, seed):
        rng = np.random.default_rng(seed)
        p = MhaParams.init(rng, 6, 2)
        q = T.Tensor(rng.standard_normal((3, 6)), requires_grad=True)
        k = T.Tensor(rng.standard_normal((4, 6)), requires_grad=True)
        w = rng.standard_normal((3, 6))
        params = list(named_parameters(p).values())
        res = gradcheck(lambda: T.sum(multi_head(q, k, k, p) * w), [q, k] + params)
        assert res.max_rel_error < 1e-4, res.per_input

    def test_pab(self, seed):
        rng = np.random.default_rng(seed)
        p = PabParams.init(rng, 4, 2, 2)
        randomize(p, rng, 0.1)
        q = T.Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        km = T.Tensor(rng.standard_normal((3, 3, 4)), requires_grad=True)
        w = rng.standard_normal((3, 4))
        params = list(named_parameters(p).values())
        res = gradcheck(lambda: T.sum(pab(q, km, km, p) * w), [q, km] + params)
        assert res.max_rel_error < 1e-4, res.per_input
