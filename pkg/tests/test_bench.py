import numpy as np
import pytest

from learned_isp import bench, losses, models
from learned_isp.bench import BenchReport
from learned_isp.models import build_smallnet
from learned_isp.tensor import ShapeError


@pytest.fixture(scope="module")
def hd_report():
    m = build_smallnet(seed=0)
    before = m.param_hash()
    report = bench.profile(m, runs=5, warmup=2)
    return m, before, report


def test_hd_report_rows_and_sum(hd_report):
    m, _, r = hd_report
    assert [t.name for t in r.layers] == ["conv1", "conv2", "conv3", "shuffle"]
    assert (r.height, r.width) == (1088, 1920)
    assert abs(r.layer_sum_ms - r.total_ms) <= 0.05 * r.total_ms
    assert r.total_ms > 0


def test_hd_convs_dominate(hd_report):
    _, _, r = hd_report
    conv_ms = sum(t.median_ms for t in r.layers if t.name.startswith("conv"))
    assert conv_ms > 0.8 * r.total_ms


def test_profile_never_mutates(hd_report):
    m, before, _ = hd_report
    assert m.param_hash() == before


def test_param_bytes_match_checkpoint_payload(hd_report):
    m, _, r = hd_report
    assert r.param_bytes == 4 * m.num_params() == 18608


def test_report_serializations(hd_report):
    _, _, r = hd_report
    text = r.to_text()
    assert "not mobile APU" in text and "threads:" in text and "total median ms" in text
    rows = r.to_csv().strip().splitlines()
    assert rows[0] == "index,layer,op,median_ms,percent" and len(rows) == 6


def test_profile_stability():
    m = build_smallnet(seed=0)
    a = bench.profile(m, 512, 512, runs=7, warmup=2).total_ms
    b = bench.profile(m, 512, 512, runs=7, warmup=2).total_ms
    assert abs(a - b) <= 0.2 * max(a, b)


def test_profile_preconditions():
    m = build_smallnet()
    with pytest.raises(ValueError):
        bench.profile(m, 64, 64, runs=4)
    with pytest.raises(ShapeError):
        bench.profile(m, 63, 64)
    with pytest.raises(ShapeError):
        bench.profile(models.build_tuned_unet(), 68, 64, runs=5, warmup=2)


def _report(total_ms):
    return BenchReport("smallnet", 64, 64, 5, 2, [], total_ms, 0, "test", "test")


@pytest.mark.parametrize("ms,alpha,clipped", [
    (61.0, 20.0, 0.061),     # fast branch
    (10.0, 20.0, 0.03),      # lower clip saturation
    (1861.0, 0.5, 1.861),    # slow branch
    (7000.0, 0.5, 5.0),      # upper clip saturation
])
def test_score_report_branches(tiny_data, ms, alpha, clipped):
    m = build_smallnet(seed=1)
    r = bench.score_report(m, tiny_data[1], _report(ms))
    assert r.score == pytest.approx(r.psnr + alpha * (0.2 - clipped), abs=1e-12)


def test_score_matches_leaderboard_examples():
    assert losses.mai_score(23.2, 61.0 / 1000) == pytest.approx(25.98, abs=0.005)
    assert losses.mai_score(23.73, 90.8 / 1000) == pytest.approx(25.91, abs=0.005)
    assert losses.mai_score(20.0, 6.0) == pytest.approx(20.0 - 2.4)


def test_score_report_needs_runtime(tiny_data):
    with pytest.raises(ValueError):
        bench.score_report(build_smallnet(), tiny_data[1], _report(0.0))
