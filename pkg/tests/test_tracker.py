import numpy as np
import pytest

import oracles
from siamtpn.errors import DataError
from siamtpn.geometry import BBox, CropGeometry
from siamtpn.model import ModelConfig, SiamTPN
from siamtpn.tracker import StageTimes, Tracker, crop_and_resize, export_attention, init, search_geometry, template_geometry, update

TINY = ModelConfig(channels=16, heads=2, blocks=1)


@pytest.fixture(scope="module")
def model():
    return SiamTPN(TINY)


@pytest.fixture(scope="module")
def frame():
    return np.random.default_rng(3).uniform(size=(120, 160, 3))


class TestCrop:
    def test_identity_when_side_equals_resolution(self, frame):
        g = CropGeometry(80.0, 60.0, 40.0, 40)
        out = crop_and_resize(frame, g)
        assert np.array_equal(out, frame[40:80, 60:100])

    def test_far_outside_is_mean_colour(self, frame):
        out = crop_and_resize(frame, CropGeometry(5000.0, -4000.0, 50.0, 16))
        assert np.abs(out - frame.mean(axis=(0, 1))).max() < 1e-12

    def test_checkerboard_upsample_matches_oracle(self):
        board = (np.indices((4, 4)).sum(axis=0) % 2).astype(float)[..., None].repeat(3, axis=2)
        g = CropGeometry(2.0, 2.0, 4.0, 8)
        out = crop_and_resize(board, g)
        fill = board.mean(axis=(0, 1))
        for i in range(8):
            for j in range(8):
                x, y = (j + 0.5) * 0.5 - 0.5, (i + 0.5) * 0.5 - 0.5
                assert np.abs(out[i, j] - oracles.bilinear_sample(board, x, y, fill)).max() < 1e-12

    @pytest.mark.parametrize("bad", [np.zeros((0, 5, 3)), np.zeros((5, 5))])
    def test_malformed_frame(self, bad):
        with pytest.raises(DataError):
            crop_and_resize(bad, CropGeometry(2, 2, 4, 4))


class TestLoop:
    def test_template_cache(self, model, frame):
        st = init(model, frame, BBox(80, 60, 30, 24))
        assert st.template_fused.shape == (5, 5, 16)
        assert not st.template_fused.flags.writeable
        before = st.template_fused.copy()
        update(model, st, frame)
        assert np.array_equal(st.template_fused, before)

    def test_init_keeps_box(self, model, frame):
        box = BBox(80, 60, 30, 24)
        assert init(model, frame, box).current == box

    def test_deterministic(self, model, frame):
        box = BBox(70, 55, 30, 24)
        a, b = init(model, frame, box), init(model, frame, box)
        sa, sb = update(model, a, frame), update(model, b, frame)
        assert sa.box == sb.box and sa.confidence == sb.confidence

    def test_state_advances(self, model, frame):
        st = init(model, frame, BBox(80, 60, 30, 24))
        times = StageTimes()
        sel = update(model, st, frame, times=times)
        assert st.frame_index == 1 and st.last_confidence == sel.confidence
        assert 0 <= st.current.cx <= 160 and 0 <= st.current.cy <= 120
        assert sum(times.stages().values()) <= times.total

    def test_zero_model_picks_a_central_cell(self, frame):
        # all-zero weights: uniform scores, so the cosine window decides; on the
        # even 12x12 map the nearest points sit half a stride off the center
        m = SiamTPN(TINY)
        for p in m.named_parameters().values():
            p.data = np.zeros_like(p.data)
        box = BBox(80, 60, 30, 24)
        st = init(m, frame, box)
        half = 8.0 / search_geometry(box, TINY.search_size).scale
        update(m, st, frame)
        assert abs(st.current.cx - box.cx) == pytest.approx(half, abs=1e-9)
        assert abs(st.current.cy - box.cy) == pytest.approx(half, abs=1e-9)

    def test_tracker_object(self, model, frame):
        tr = Tracker(model)
        with pytest.raises(RuntimeError):
            tr.update(frame)
        tr.init(frame, BBox(80, 60, 30, 24))
        box, conf = tr.update(frame)
        assert isinstance(box, BBox) and 0.0 <= conf <= 1.0


class TestOverfitOnInitFrame:
    def test_tracks_its_own_template_frame(self):
        from siamtpn.geometry import iou
        from siamtpn.synthetic import SequenceSpec, synth_sequence
        from siamtpn.train import TrainingPair, overfit_pair

        cfg = ModelConfig(channels=16, heads=2, blocks=1, search_size=128, template_size=64)
        seq = synth_sequence(SequenceSpec(frames=1, seed=11, texture_seed=11))
        frame, box = seq[0], seq.boxes[0]
        geom = search_geometry(box, cfg.search_size)
        pair = TrainingPair(
            crop_and_resize(frame, template_geometry(box, cfg.template_size)),
            crop_and_resize(frame, geom),
            geom.box_to_crop(box),
        )
        model = SiamTPN(cfg)
        overfit_pair(model, pair, 150)
        tracker = Tracker(model)
        tracker.init(frame, box)
        pred, conf = tracker.update(frame)
        assert iou(pred, box) >= 0.9 and 0.0 <= conf <= 1.0


class TestAttentionExport:
    def test_shapes_and_sums(self, model, frame):
        st = init(model, frame, BBox(80, 60, 30, 24))
        out = export_attention(model, st, frame)
        for name, n in (("p3", 32), ("p4", 16), ("p5", 8)):
            raw, norm = out["raw"][name], out["normalized"][name]
            assert raw.shape == (n, n) and norm.shape == (n, n)
            assert raw.sum() == pytest.approx(1.0, abs=1e-9)
            assert norm.min() >= 0.0 and norm.max() <= 1.0

    def test_constant_frame_is_uniform(self, model):
        flat = np.full((120, 160, 3), 0.4)
        st = init(model, flat, BBox(80, 60, 30, 24))
        out = export_attention(model, st, flat)
        for raw in out["raw"].values():
            assert raw.max() - raw.min() < 1e-6
        for norm in out["normalized"].values():
            assert not norm.any()

    def test_missing_block(self, model, frame):
        st = init(model, frame, BBox(80, 60, 30, 24))
        with pytest.raises(ValueError):
            export_attention(model, st, frame, level=5)
