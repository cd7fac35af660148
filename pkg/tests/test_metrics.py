import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from siamtpn.errors import DataError
from siamtpn.geometry import BBox, iou
from siamtpn.metrics import (
    THRESHOLDS,
    OracleTracker,
    StaticTracker,
    build_report,
    one_pass_eval,
    precision_at,
    success_auc,
    success_curve,
)

GT = [BBox.from_xywh(0, 0, 10, 10)] * 5
# frames 1..4: exact, half shifted in x, shifted in x and y, disjoint 30 px away
PRED = [
    BBox.from_xywh(0, 0, 10, 10),
    BBox.from_xywh(5, 0, 10, 10),
    BBox.from_xywh(5, 5, 10, 10),
    BBox.from_xywh(30, 0, 10, 10),
]


class Replay:
    def __init__(self, boxes):
        self.boxes = boxes

    def init(self, frame, box):
        self.t = 0

    def update(self, frame):
        self.t += 1
        return self.boxes[self.t - 1], 1.0


class Exploding(StaticTracker):
    def __init__(self, after):
        self.after, self.t = after, 0

    def update(self, frame):
        self.t += 1
        if self.t > self.after:
            raise FloatingPointError("boom")
        return super().update(frame)


def fixture_report():
    return one_pass_eval(Replay(PRED), [None] * 5, GT)


class TestFixture:
    def test_ious(self):
        assert fixture_report().ious == pytest.approx([1.0, 1 / 3, 1 / 7, 0.0], abs=1e-12)

    def test_curve(self):
        expected = np.array([1.0] + [0.75] * 2 + [0.5] * 4 + [0.25] * 14)
        assert np.abs(fixture_report().success - expected).max() <= 1e-12

    def test_auc(self):
        # trapezoid rule by hand: 0.05 * (sum of values - (first + last) / 2)
        assert abs(fixture_report().auc - 0.05 * (8.0 - 0.625)) <= 1e-12

    def test_precision(self):
        rep = fixture_report()
        assert rep.center_errors == pytest.approx([0.0, 5.0, np.hypot(5, 5), 30.0], abs=1e-12)
        assert rep.precision == 0.75

    def test_mean_iou(self):
        assert fixture_report().mean_iou == pytest.approx((1 + 1 / 3 + 1 / 7) / 4, abs=1e-12)

    def test_exports(self):
        rep = fixture_report()
        d = json.loads(rep.to_json())
        assert d["auc"] == pytest.approx(rep.auc) and len(d["success_curve"]) == 21
        assert rep.to_csv().count("\n") >= 21
        assert "auc" in rep.to_table().lower()


class TestCurve:
    def test_thresholds(self):
        assert len(THRESHOLDS) == 21 and THRESHOLDS[0] == 0.0 and THRESHOLDS[-1] == 1.0

    @given(st.lists(st.floats(0, 1), min_size=1, max_size=50))
    def test_monotone_and_bounded(self, ious):
        c = success_curve(ious)
        assert c[0] == 1.0 and np.all(np.diff(c) <= 0) and 0 <= success_auc(c) <= 1

    def test_threshold_is_inclusive(self):
        assert success_curve([0.5])[10] == 1.0

    def test_perfect(self):
        assert success_auc(success_curve([1.0] * 7)) == 1.0

    @pytest.mark.parametrize("errs,expected", [([0, 20, 20.0001], 2 / 3), ([], 0.0), ([100], 0.0)])
    def test_precision(self, errs, expected):
        assert precision_at(errs) == pytest.approx(expected)


class TestOnePass:
    def test_oracle(self):
        rep = one_pass_eval(OracleTracker(GT), [None] * 5, GT)
        assert rep.auc == 1.0 and rep.precision == 1.0 and len(rep.ious) == 4

    def test_static_tracker_auc(self):
        gt = [BBox.from_xywh(3 * t, t, 12, 10) for t in range(8)]
        rep = one_pass_eval(StaticTracker(), [None] * 8, gt)
        ious = [iou(gt[0], g) for g in gt[1:]]
        assert rep.ious == pytest.approx(ious, abs=1e-15)
        assert rep.auc == pytest.approx(np.trapezoid(success_curve(ious), THRESHOLDS), abs=1e-12)

    @pytest.mark.parametrize("n", [0, 1])
    def test_too_short(self, n):
        with pytest.raises(DataError):
            one_pass_eval(StaticTracker(), [None] * n, GT[:n])

    def test_length_mismatch(self):
        with pytest.raises(DataError):
            one_pass_eval(StaticTracker(), [None] * 3, GT)

    def test_partial_failure(self):
        rep = one_pass_eval(Exploding(2), [None] * 5, GT)
        assert rep.failed and "boom" in rep.error and len(rep.ious) == 2

    def test_fps_reported(self):
        rep = one_pass_eval(StaticTracker(), [None] * 5, GT)
        assert set(rep.fps) == {"fps_mean", "fps_median", "fps_p95"}

    def test_build_report_mismatch(self):
        with pytest.raises(ValueError):
            build_report(PRED, GT)
