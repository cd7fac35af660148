import numpy as np
import pytest

import siamtpn.tensor as T
from siamtpn.backbone import FeaturePyramid, synthetic_pyramid
from siamtpn.errors import ShapeError
from siamtpn.gradcheck import gradcheck
from siamtpn.model import ModelConfig, SiamTPN
from siamtpn.nn import named_parameters
from siamtpn.tpn import (
    TpnConfig,
    attention_tokens,
    init_tpn,
    reduce_and_flatten,
    tpn_block,
    tpn_flops,
    tpn_forward,
)

import oracles

SEARCH = [(32, 32), (16, 16), (8, 8)]
TEMPLATE = [(10, 10), (5, 5), (3, 3)]



def perturb(params, rng, scale=0.3):
    for t in named_parameters(params).values():
        t.data = t.data + scale * rng.standard_normal(t.shape)


class TestReduce:
    def test_shuffle_token_counts(self):
        cfg = TpnConfig()
        params = init_tpn(cfg, (116, 232, 464), np.random.default_rng(0))
        pyr = synthetic_pyramid(0, [(32, 32, 116), (16, 16, 232), (8, 8, 464)])
        red = reduce_and_flatten(pyr, params)
        assert [T.flatten(lv).shape for lv in red.levels()] == [(1024, 192), (256, 192), (64, 192)]

    def test_template_token_counts(self):
        cfg = TpnConfig(channels=8, heads=2)
        params = init_tpn(cfg, (4, 4, 4), np.random.default_rng(0))
        red = reduce_and_flatten(synthetic_pyramid(0, [(10, 10, 4), (5, 5, 4), (3, 3, 4)]), params)
        assert [T.flatten(lv).shape[0] for lv in red.levels()] == [100, 25, 9]

    def test_identity_kernel_passes_values(self):
        cfg = TpnConfig(channels=4, heads=2)
        params = init_tpn(cfg, (4, 4, 4), np.random.default_rng(0))
        params.reduce[0].data = np.eye(4).reshape(1, 1, 4, 4)
        pyr = synthetic_pyramid(3, [(4, 4, 4), (2, 2, 4), (1, 1, 4)])
        assert np.array_equal(reduce_and_flatten(pyr, params).p3.data, pyr.p3.data)

    def test_channel_mismatch(self):
        params = init_tpn(TpnConfig(channels=4, heads=2), (4, 4, 4), np.random.default_rng(0))
        with pytest.raises(ShapeError):
            reduce_and_flatten(synthetic_pyramid(0, [(4, 4, 5), (2, 2, 4), (1, 1, 4)]), params)


class TestBlock:
    def _setup(self, seed, c=4, heads=2):
        rng = np.random.default_rng(seed)
        cfg = TpnConfig(channels=c, heads=heads, blocks=1)
        params = init_tpn(cfg, (c, c, c), rng)
        perturb(params, rng)
        p3, p4, p5 = (T.Tensor(rng.standard_normal((n, n, c))) for n in (4, 2, 1))
        return cfg, params.blocks[0], p3, p4, p5

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_oracle(self, seed):
        cfg, block, p3, p4, p5 = self._setup(seed)
        _, out, _ = tpn_block(p3, p4, p5, block, cfg)
        ref = oracles.tpn_block(
            p3.data, p4.data, p5.data,
            [oracles.pab_dict(p) for p in block.cross], [oracles.pab_dict(p) for p in block.refine],
            cfg.r_cross, cfg.r_self, cfg.heads,
        )
        assert np.abs(out.data - ref).max() <= 1e-12

    def test_p3_p5_pass_through(self):
        cfg, block, p3, p4, p5 = self._setup(0)
        before3, before5 = p3.data.copy(), p5.data.copy()
        o3, _, o5 = tpn_block(p3, p4, p5, block, cfg)
        assert o3 is p3 and o5 is p5
        assert np.array_equal(o3.data, before3) and np.array_equal(o5.data, before5)

    @pytest.mark.parametrize("sizes", [(32, 16, 8), (10, 5, 3)])
    def test_query_shape_preserved(self, sizes):
        rng = np.random.default_rng(0)
        cfg = TpnConfig(channels=8, heads=2, blocks=1)
        block = init_tpn(cfg, (8, 8, 8), rng).blocks[0]
        p3, p4, p5 = (T.Tensor(rng.standard_normal((n, n, 8))) for n in sizes)
        assert tpn_block(p3, p4, p5, block, cfg)[1].shape == p4.shape

    def test_width_mismatch(self):
        cfg, block, p3, p4, p5 = self._setup(0)
        with pytest.raises(ShapeError):
            tpn_block(T.Tensor(np.zeros((4, 4, 3))), p4, p5, block, cfg)

    def test_refine_layers_distinct(self):
        _, block, *_ = self._setup(0)
        a, b = block.refine
        assert a.attn.w_q is not b.attn.w_q


class TestForward:
    def test_single_block_equals_tpn_block(self):
        rng = np.random.default_rng(1)
        cfg = TpnConfig(channels=8, heads=2, blocks=1)
        params = init_tpn(cfg, (3, 5, 7), rng)
        pyr = synthetic_pyramid(2, [(8, 8, 3), (4, 4, 5), (2, 2, 7)])
        red = reduce_and_flatten(pyr, params)
        expected = tpn_block(red.p3, red.p4, red.p5, params.blocks[0], cfg)[1]
        assert np.array_equal(tpn_forward(pyr, params, cfg).data, expected.data)

    def test_default_search_output(self):
        cfg = TpnConfig()
        params = init_tpn(cfg, (116, 232, 464), np.random.default_rng(0))
        pyr = synthetic_pyramid(0, [(32, 32, 116), (16, 16, 232), (8, 8, 464)])
        with T.no_grad():
            assert tpn_forward(pyr, params, cfg).shape == (16, 16, 192)

    def test_deterministic(self):
        cfg = TpnConfig(channels=8, heads=2)
        pyr = synthetic_pyramid(0, [(8, 8, 4), (4, 4, 4), (2, 2, 4)])
        outs = [tpn_forward(pyr, init_tpn(cfg, (4, 4, 4), np.random.default_rng(9)), cfg).data.tobytes() for _ in range(2)]
        assert outs[0] == outs[1]

    def test_capture_weights(self):
        cfg = TpnConfig(channels=8, heads=2, blocks=2)
        params = init_tpn(cfg, (4, 4, 4), np.random.default_rng(0))
        cap: dict = {}
        tpn_forward(synthetic_pyramid(0, [(8, 8, 4), (4, 4, 4), (2, 2, 4)]), params, cfg, cap)
        assert sorted(cap) == [0, 1]
        assert [w.shape for w in cap[0]] == [(2, 16, 4), (2, 16, 4), (2, 16, 4)]

    @pytest.mark.parametrize("neck", ["identity", "conv", "fpn", "trans"])
    def test_baseline_necks_shape(self, neck):
        cfg = TpnConfig(channels=8, heads=2, blocks=1, neck=neck)
        params = init_tpn(cfg, (4, 4, 4), np.random.default_rng(0), (16,))
        out = tpn_forward(synthetic_pyramid(0, [(8, 8, 4), (4, 4, 4), (2, 2, 4)]), params, cfg)
        assert out.shape == (4, 4, 8)

    def test_unknown_neck(self):
        with pytest.raises(ValueError):
            TpnConfig(neck="bifpn")

    def test_gradient_through_forward(self):
        rng = np.random.default_rng(0)
        cfg = TpnConfig(channels=4, heads=2, blocks=1)
        params = init_tpn(cfg, (3, 3, 3), rng)
        perturb(params, rng)
        pyr = FeaturePyramid(*(T.Tensor(rng.standard_normal((n, n, 3)), requires_grad=True) for n in (4, 2, 1)))
        weights = rng.standard_normal((2, 2, 4))
        inputs = list(pyr.levels()) + [params.reduce[1], params.blocks[0].cross[0].attn.w_q]
        res = gradcheck(lambda: T.sum(T.mul(tpn_forward(pyr, params, cfg), weights)), inputs)
        assert res.max_rel_error < 1e-4


class TestFlops:
    def _count(self, cfg, shapes, in_ch):
        params = init_tpn(cfg, in_ch, np.random.default_rng(0))
        pyr = synthetic_pyramid(0, [(h, w, c) for (h, w), c in zip(shapes, in_ch)])
        with T.no_grad(), T.OpCounter() as c:
            tpn_forward(pyr, params, cfg)
        return c.mul_adds

    def test_default_config_matches_counter(self):
        cfg = TpnConfig(channels=192, heads=6, blocks=2)
        assert tpn_flops(cfg, SEARCH, (116, 232, 464)) == self._count(cfg, SEARCH, (116, 232, 464))

    @pytest.mark.parametrize("shapes", [SEARCH, TEMPLATE])
    def test_small_config_matches_counter(self, shapes):
        cfg = TpnConfig(channels=16, heads=2, blocks=1)
        assert tpn_flops(cfg, shapes, (8, 8, 8)) == self._count(cfg, shapes, (8, 8, 8))

    def test_linear_in_blocks(self):
        one, two = TpnConfig(blocks=1), TpnConfig(blocks=2)
        assert tpn_flops(two, SEARCH) == 2 * tpn_flops(one, SEARCH)

    def test_pooling_cheaper(self):
        assert tpn_flops(TpnConfig(r_cross=(4, 2, 1)), SEARCH) < tpn_flops(TpnConfig(r_cross=(1, 1, 1)), SEARCH)

    def test_attention_tokens(self):
        assert attention_tokens(TpnConfig(), SEARCH) == [64, 64, 64]
        assert attention_tokens(TpnConfig(), TEMPLATE) == [9, 9, 9]


class TestWeightSharing:
    def test_branches_use_the_same_tensors(self):
        model = SiamTPN(ModelConfig(channels=8, heads=2, blocks=1))
        seen = []
        orig = T.conv2d

        def spy(x, w, *a, **k):
            seen.append(id(w))
            return orig(x, w, *a, **k)

        T.conv2d = spy
        try:
            with T.no_grad():
                model.features(np.zeros((256, 256, 3)))
                search_ids = list(seen)
                seen.clear()
                model.features(np.zeros((80, 80, 3)))
        finally:
            T.conv2d = orig
        assert search_ids and search_ids == seen

    def test_parameters_listed_once(self):
        model = SiamTPN(ModelConfig(channels=8, heads=2, blocks=1))
        names = model.named_parameters()
        assert len({id(t) for t in names.values()}) == len(names)
        assert not any(k.startswith(("template", "search")) for k in names)
