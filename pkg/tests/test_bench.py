import pytest

from siamtpn.bench import (
    PUBLISHED_NECKS,
    STAGES,
    benchmark,
    bench_input,
    flops_report,
    format_flops,
    paired_benchmark,
    paired_tpn_timing,
)
from siamtpn.model import ModelConfig

SMALL = ModelConfig(channels=16, heads=2, blocks=1)


@pytest.fixture(scope="module")
def result():
    return benchmark(SMALL, warmup=1, reps=12)


class TestTiming:
    def test_reps_honoured(self, result):
        assert result.reps == 12 and len(result.total) == 12
        assert all(len(result.stages[s]) == 12 for s in STAGES)

    def test_stages_within_total(self, result):
        for k in range(12):
            assert sum(result.stages[s][k] for s in STAGES) <= result.total[k] * 1.05

    def test_report(self, result):
        d = result.to_dict()
        assert d["fps"] == pytest.approx(1 / result.median_total)
        assert set(d["stages_s"]) == set(STAGES)
        assert "FPS" in result.to_table()

    @pytest.mark.parametrize("reps", [0, 9])
    def test_too_few_reps(self, reps):
        with pytest.raises(ValueError):
            benchmark(SMALL, reps=reps)
        with pytest.raises(ValueError):
            paired_tpn_timing(SMALL, SMALL, reps=reps)

    def test_paired(self):
        a, b = paired_benchmark([SMALL, SMALL.replace(r_cross=(1, 1, 1))], warmup=0, reps=10)
        assert len(a.total) == len(b.total) == 10

    def test_paired_tpn_needs_same_backbone(self):
        with pytest.raises(ValueError):
            paired_tpn_timing(SMALL, SMALL.replace(stem_channels=8), reps=10)

    def test_input_is_fixed(self):
        fa, ba = bench_input(0)
        fb, bb = bench_input(0)
        assert (fa == fb).all() and ba == bb


class TestFlopsReport:
    @pytest.mark.parametrize("neck", ["tpn", "identity", "conv", "fpn", "trans"])
    def test_all_rows_match(self, neck):
        cfg = SMALL.replace(neck=neck)
        rows = flops_report(cfg)
        assert all(r.match for r in rows), [(r.stage, r.analytic, r.instrumented) for r in rows if not r.match]

    @pytest.mark.parametrize("kw", [{"channels": 0}, {"search_size": 0}, {"stem_channels": 0}])
    def test_zero_size_config_rejected(self, kw):
        with pytest.raises(ValueError):
            flops_report(SMALL.replace(**kw))

    def test_reference_label_line(self):
        cfg = SMALL
        text = format_flops(flops_report(cfg), cfg)
        assert "not asserted" in text and str(PUBLISHED_NECKS["tpn"]["gflops"]) in text
