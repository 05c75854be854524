import math

import numpy as np
import pytest

from learned_isp import losses
from learned_isp.losses import LossSpec, ScoreInputs, composite_loss, mai_score, psnr
from learned_isp.tensor import ShapeError, Tensor, check_gradients, fill, no_grad, philox

from grad_cases import LOSS_CASES
from oracles import ms_ssim_per_scale, ssim_windows
from table1 import TABLE1


def _pair(shape, seed):
    rng = philox(seed)
    return Tensor(rng.uniform(0, 1, shape)), Tensor(rng.uniform(0, 1, shape))


def test_pointwise_examples():
    x = fill((1, 3, 4, 4), 0.4)
    assert losses.charbonnier(x, x).item() == pytest.approx(1e-3, rel=1e-6)
    assert losses.l1(fill((1, 3, 4, 4), 0.5), x).item() == pytest.approx(0.1, rel=1e-6)
    assert losses.mse(fill((1, 3, 4, 4), 0.5), x).item() == pytest.approx(0.01, rel=1e-5)


def test_pointwise_match_loop_oracle():
    p, t = _pair((2, 3, 5, 4), 1)
    a, b = p.data.reshape(-1).tolist(), t.data.reshape(-1).tolist()
    n = len(a)
    assert losses.l1(p, t).item() == pytest.approx(sum(abs(u - v) for u, v in zip(a, b)) / n, abs=1e-6)
    assert losses.mse(p, t).item() == pytest.approx(sum((u - v) ** 2 for u, v in zip(a, b)) / n, abs=1e-6)
    ref = sum(math.sqrt((u - v) ** 2 + 1e-6) for u, v in zip(a, b)) / n
    assert losses.charbonnier(p, t).item() == pytest.approx(ref, abs=1e-6)


def test_shape_mismatch_rejected():
    with pytest.raises(ShapeError):
        losses.l1(fill((1, 3, 4, 4), 0), fill((1, 3, 4, 5), 0))
    with pytest.raises(ShapeError):
        psnr(np.zeros((2, 2)), np.zeros((2, 3)))


def test_ssim_examples():
    x, _ = _pair((1, 3, 16, 16), 2)
    assert losses.ssim(x, x).item() == 1.0
    value = losses.ssim(fill((1, 1, 16, 16), 0.3), fill((1, 1, 16, 16), 0.7)).item()
    assert value == pytest.approx((0.42 + 1e-4) / (0.58 + 1e-4), abs=1e-6)
    assert value == pytest.approx(0.7242, abs=5e-5)


def test_ssim_matches_direct_window_oracle():
    p, t = _pair((1, 2, 24, 20), 3)
    ref, _ = ssim_windows(p.data.astype(np.float64), t.data.astype(np.float64))
    assert abs(losses.ssim(p, t).item() - ref) < 1e-5


def test_ssim_symmetric_and_bounded():
    a, b = _pair((1, 2, 16, 16), 4)
    assert losses.ssim(a, b).item() == pytest.approx(losses.ssim(b, a).item(), abs=1e-12)
    assert losses.ssim(a, b).item() < 1.0


def test_ssim_too_small():
    with pytest.raises(ShapeError, match="window"):
        losses.ssim(fill((1, 1, 10, 16), 0), fill((1, 1, 10, 16), 0))


def test_ms_ssim_identity_and_fallback():
    x, y = _pair((1, 1, 16, 16), 5)
    assert losses.ms_ssim(x, x).item() == pytest.approx(1.0, abs=1e-12)
    # 16 < 22, so only one scale fits and the weights renormalize to (1.0)
    assert losses.ms_ssim_scales(16, 16) == 1
    assert losses.ms_ssim(x, y).item() == pytest.approx(losses.ssim(x, y).item(), abs=1e-12)
    assert losses.ms_ssim_scales(176, 200) == 5
    with pytest.raises(ShapeError):
        losses.ms_ssim(fill((1, 1, 8, 8), 0), fill((1, 1, 8, 8), 0))


def test_ms_ssim_matches_per_scale_oracle():
    rng = philox(6)
    t = rng.uniform(0.1, 0.9, (1, 1, 192, 192))
    p = np.clip(t + rng.normal(0, 0.05, t.shape), 0, 1)
    # 192 only fits four scales
    ref = ms_ssim_per_scale(p, t, scales=losses.ms_ssim_scales(192, 192))
    assert abs(losses.ms_ssim(Tensor(p), Tensor(t)).item() - ref) < 1e-5


def test_psnr_cases():
    z, o = np.zeros((1, 3, 4, 4)), np.ones((1, 3, 4, 4))
    assert psnr(z, z) == 100.0
    assert psnr(z, o) == pytest.approx(0.0, abs=1e-12)
    assert psnr(np.full((1, 1, 4, 4), 0.6), np.full((1, 1, 4, 4), 0.5)) == pytest.approx(20.0, abs=1e-9)


def test_mai_score_examples():
    assert mai_score(ScoreInputs(23.2, 0.061)) == pytest.approx(25.98, abs=0.005)
    assert mai_score(23.73, 0.0908) == pytest.approx(25.91, abs=0.005)
    assert mai_score(23.23, 1.861) == pytest.approx(22.40, abs=0.005)
    for p in (10.0, 23.5, 40.0):
        assert mai_score(p, 0.2) == p


@pytest.mark.parametrize("team,p,ms,score", TABLE1)
def test_table1_rows(team, p, ms, score):
    assert abs(mai_score(p, ms / 1000) - score) <= 0.01, team


def test_mai_score_properties():
    # flat below 0.03 s and above 5 s
    assert mai_score(22.0, 0.001) == mai_score(22.0, 0.03)
    assert mai_score(22.0, 5.0) == mai_score(22.0, 50.0) == pytest.approx(22.0 - 2.4)
    # continuous across the alpha switch
    assert abs(mai_score(22.0, 0.2 - 1e-9) - mai_score(22.0, 0.2 + 1e-9)) < 1e-6
    runtimes = np.concatenate([np.geomspace(1e-3, 20, 400), [0.2]])
    runtimes.sort()
    scores = [mai_score(22.0, r) for r in runtimes]
    assert all(a >= b for a, b in zip(scores, scores[1:]))
    assert mai_score(22.1, 0.1) > mai_score(22.0, 0.1)


def test_score_inputs_validation():
    with pytest.raises(ValueError):
        ScoreInputs(float("nan"), 0.1)
    with pytest.raises(ValueError):
        ScoreInputs(20.0, 0.0)


def test_loss_spec_parse():
    spec = LossSpec.parse("charbonnier:1.0,ssim:0.5")
    assert spec.terms == (("charbonnier", 1.0), ("ssim", 0.5))
    assert str(spec) == "charbonnier:1,ssim:0.5"
    assert LossSpec.parse("l1").terms == (("l1", 1.0),)
    with pytest.raises(ValueError, match="valid kinds"):
        LossSpec.parse("bogus:1")
    with pytest.raises(ValueError):
        LossSpec.parse("l1:inf")
    with pytest.raises(ValueError):
        LossSpec.parse("")


def test_composite_examples():
    p, t = _pair((1, 3, 16, 16), 7)
    assert composite_loss(LossSpec.parse("l1:1.0"), p, t).item() == pytest.approx(losses.l1(p, t).item(), abs=1e-12)
    assert composite_loss(LossSpec.parse("ssim:1.0"), p, p).item() == 0.0
    spec = LossSpec.parse("charbonnier:1.0,ssim:0.5")
    expected = losses.charbonnier(p, t).item() + 0.5 * (1 - losses.ssim(p, t).item())
    assert composite_loss(spec, p, t).item() == pytest.approx(expected, abs=1e-6)


def test_composite_no_grad_matches():
    p, t = _pair((1, 3, 16, 16), 8)
    spec = LossSpec.parse("mse:1,ms_ssim:0.3")
    with_grad = composite_loss(spec, p, t).item()
    with no_grad():
        assert composite_loss(spec, p, t).item() == with_grad


@pytest.mark.parametrize("name", sorted(LOSS_CASES))
def test_loss_gradients(name):
    for seed in range(2):
        fn, inputs = LOSS_CASES[name](seed)
        assert check_gradients(fn, inputs) < 1e-4, (name, seed)
