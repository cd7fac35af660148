import numpy as np
import pytest

from siamtpn.errors import NumericError
from siamtpn.model import ModelConfig, SiamTPN
from siamtpn.train import evaluate_pair, make_pair, overfit_pair, train_on_pairs, trainable_parameters

TOY = ModelConfig(channels=16, heads=2, blocks=1, search_size=128, template_size=64)


@pytest.fixture(scope="module")
def pair():
    return make_pair(0, TOY.search_size, TOY.template_size)


class TestPairs:
    def test_shapes_and_gt(self, pair):
        assert pair.template.shape == (64, 64, 3) and pair.search.shape == (128, 128, 3)
        x1, y1, x2, y2 = pair.gt.corners()
        assert 0 <= x1 < x2 <= 128 and 0 <= y1 < y2 <= 128

    def test_deterministic(self):
        a, b = make_pair(5, 128, 64), make_pair(5, 128, 64)
        assert a.gt == b.gt and np.array_equal(a.search, b.search)

    @pytest.mark.parametrize("seed", range(8))
    def test_gt_near_center(self, seed):
        p = make_pair(seed)
        # jitter is at most 8% of the crop side
        assert abs(p.gt.cx - 128) <= 0.08 * 256 * 1.1 + 1e-9 and abs(p.gt.cy - 128) <= 0.08 * 256 * 1.1 + 1e-9


class TestLoops:
    def test_frozen_stem(self):
        model = SiamTPN(TOY)
        trainable = trainable_parameters(model)
        assert 0 < len(trainable) < len(model.named_parameters())
        assert not any(k.startswith("backbone.stem.0") for k in trainable)

    def test_zero_steps(self, pair):
        model = SiamTPN(TOY)
        res = overfit_pair(model, pair, 0)
        assert res.trace == [] and (res.final_loss, res.final_iou) == evaluate_pair(SiamTPN(TOY), pair)

    def test_loss_decreases(self, pair):
        res = overfit_pair(SiamTPN(TOY), pair, 60)
        assert len(res.trace) == 60 and res.final_loss < res.trace[0]
        windows = np.array(res.trace).reshape(6, 10).mean(axis=1)
        assert np.all(np.diff(windows) < 0)

    def test_reproducible(self, pair):
        pairs = [pair, make_pair(1, 128, 64)]
        a = train_on_pairs(SiamTPN(TOY), pairs, 6, seed=3)
        b = train_on_pairs(SiamTPN(TOY), pairs, 6, seed=3)
        assert a == b

    def test_validation(self, pair):
        with pytest.raises(ValueError):
            overfit_pair(SiamTPN(TOY), pair, -1)
        with pytest.raises(ValueError):
            train_on_pairs(SiamTPN(TOY), [], 3)

    def test_non_finite_loss(self, pair):
        model = SiamTPN(TOY)
        next(iter(trainable_parameters(model).values())).data[...] = np.nan
        with pytest.raises(NumericError):
            overfit_pair(model, pair, 1)
