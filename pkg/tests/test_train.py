import csv
import math

import numpy as np
import pytest

from learned_isp import losses, models, raw, train
from learned_isp.models import build_smallnet, checkpoint_bytes, save_checkpoint
from learned_isp.tensor import NonFiniteError, Tensor
from learned_isp.train import AdamState, PairSet, TrainConfig, adam_step

from oracles import adam_scalar


def _cfg(**kw):
    base = dict(total_steps=4, batch_size=2, lr_initial=1e-3, lr_final=1e-3)
    base.update(kw)
    return TrainConfig(**base)


def test_adam_zero_gradient():
    p = {"w": Tensor(np.array([1.0, -2.0]).reshape(1, 1, 1, 2))}
    st = AdamState(m={"w": np.full((1, 1, 1, 2), 0.5)}, v={"w": np.full((1, 1, 1, 2), 0.25)}, step=3)
    adam_step(p, {"w": np.zeros((1, 1, 1, 2))}, st, lr=0.0)
    assert p["w"].data.reshape(-1).tolist() == [1.0, -2.0]
    assert np.allclose(st.m["w"], 0.45) and np.allclose(st.v["w"], 0.25 * 0.999)


def test_adam_first_step_is_sign():
    p = {"w": Tensor(np.array([0.0, 0.0, 0.0]).reshape(1, 1, 1, 3))}
    adam_step(p, {"w": np.array([3.0, -0.2, 1e-3]).reshape(1, 1, 1, 3)}, AdamState(), lr=0.01)
    assert np.allclose(p["w"].data.reshape(-1), [-0.01, 0.01, -0.01], rtol=1e-4)


def test_adam_matches_scalar_oracle():
    # f(x) = (x - 3)^2 in float64
    p = {"x": Tensor(np.array([0.5]).reshape(1, 1, 1, 1))}
    st = AdamState()
    ours = []
    for _ in range(10):
        g = 2 * (p["x"].data - 3.0)
        adam_step(p, {"x": g}, st, lr=0.1)
        ours.append(p["x"].item())
    ref = adam_scalar(lambda x: 2 * (x - 3.0), 0.5, 0.1, 10)
    assert max(abs(a - b) for a, b in zip(ours, ref)) < 1e-7


def test_adam_rejects_nonfinite():
    p = {"conv1.weight": Tensor(np.zeros((1, 1, 1, 2)))}
    with pytest.raises(NonFiniteError, match="conv1.weight"):
        adam_step(p, {"conv1.weight": np.array([np.nan, 0.0]).reshape(1, 1, 1, 2)}, AdamState(), 1e-3)


def test_adam_state_roundtrip(tmp_path):
    st = AdamState(m={"a.w": np.ones((1, 1, 2, 2), np.float32)}, v={"a.w": np.zeros((1, 1, 2, 2), np.float32)}, step=7)
    st.save(tmp_path / "s.npz")
    back = AdamState.load(tmp_path / "s.npz")
    assert back.step == 7 and np.array_equal(back.m["a.w"], st.m["a.w"])


def test_schedules():
    c = TrainConfig(lr_initial=1e-3, lr_final=1e-4, lr_schedule="step_halve", halve_every=10, total_steps=100)
    assert [c.lr_at(s) for s in (0, 9, 10, 25)] == [1e-3, 1e-3, 5e-4, 2.5e-4]
    assert c.lr_at(99) == 1e-4  # floored
    lin = TrainConfig(lr_initial=5e-4, lr_final=1e-5, lr_schedule="linear_decay", total_steps=300)
    assert lin.lr_at(0) == 5e-4 and lin.lr_at(300) == 1e-5
    assert lin.lr_at(150) == pytest.approx((5e-4 + 1e-5) / 2)
    for t in range(1, 1000, 37):
        assert TrainConfig(lr_initial=0.3, lr_final=0.1, lr_schedule="linear_decay", total_steps=t).lr_at(t) == 0.1


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr_initial=1e-4, lr_final=1e-3)
    with pytest.raises(ValueError):
        TrainConfig(lr_schedule="cosine")
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)


def test_recipes():
    name, cfg = train.config_from_recipe("aiisp")
    assert name == "csanet"
    assert [k for k, _ in cfg.loss.terms] == ["charbonnier", "ssim"]
    assert (cfg.lr_initial, cfg.lr_final, cfg.lr_schedule, cfg.augment_flip) == (5e-4, 1e-5, "linear_decay", True)
    assert train.config_from_recipe("dhisp")[1].lr_schedule == "step_halve"
    with pytest.raises(ValueError):
        train.config_from_recipe("nope")


def test_batch_indices_cover_epoch():
    seen = np.concatenate([train.batch_indices(10, 5, 3, s) for s in range(2)])
    assert sorted(seen) == list(range(10))
    assert np.array_equal(train.batch_indices(10, 5, 3, 1), train.batch_indices(10, 5, 3, 1))


def test_zero_steps_unchanged(tiny_data):
    m = build_smallnet(seed=1)
    before = checkpoint_bytes(m)
    res = train.train(m, tiny_data[0], _cfg(total_steps=0))
    assert res.log == [] and checkpoint_bytes(res.model) == before


def test_descent_on_fixed_batch(tiny_data):
    man = raw.read_manifest(tiny_data[0]).subset(0, 4)
    res = train.train(build_smallnet(seed=0), PairSet(man), _cfg(total_steps=6, batch_size=4, lr_initial=1e-4, lr_final=1e-4))
    ls = [r.loss for r in res.log]
    assert all(b < a for a, b in zip(ls[:5], ls[1:6]))


def test_training_deterministic(tiny_data):
    cfg = _cfg(augment_flip=True, loss=losses.LossSpec.parse("charbonnier:1,ssim:0.5"))
    a = train.train(build_smallnet(seed=2), tiny_data[0], cfg)
    b = train.train(build_smallnet(seed=2), tiny_data[0], cfg)
    assert checkpoint_bytes(a.model) == checkpoint_bytes(b.model)
    assert [r.loss for r in a.log] == [r.loss for r in b.log]


def test_resume_equivalence(tiny_data, tmp_path):
    cfg = _cfg(total_steps=6, augment_flip=True, lr_schedule="linear_decay", lr_final=1e-4)
    full = train.train(build_smallnet(seed=3), tiny_data[0], cfg)
    part = train.train(build_smallnet(seed=3), tiny_data[0], cfg, until=2)
    save_checkpoint(part.model, tmp_path / "m.ckpt")
    part.state.save(tmp_path / "m.adam.npz")
    model, state = train.resume(tmp_path / "m.ckpt", tmp_path / "m.adam.npz")
    rest = train.train(model, tiny_data[0], cfg, state=state)
    assert len(rest.log) == 4
    assert checkpoint_bytes(rest.model) == checkpoint_bytes(full.model)


def test_periodic_checkpoints_and_validation(tiny_data, tmp_path):
    cfg = _cfg(checkpoint_every=2, validate_every=2)
    res = train.train(build_smallnet(seed=4), tiny_data[0], cfg, val_data=tiny_data[1], checkpoint_dir=tmp_path)
    assert sorted(p.name for p in tmp_path.glob("*.ckpt")) == ["step_0000002.ckpt", "step_0000004.ckpt"]
    assert res.best_val_psnr == pytest.approx(train.evaluate(res.model, tiny_data[1])[0], abs=1e-9)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_aborts_and_keeps_last_good(tiny_data, tmp_path):
    m = build_smallnet(seed=5)
    m.params["conv3.weight"].data[...] = 3e38
    with pytest.raises(NonFiniteError):
        train.train(m, tiny_data[0], _cfg(), checkpoint_dir=tmp_path)
    assert (tmp_path / "last_good.ckpt").exists()


def test_contract_mismatch(tiny_data):
    with pytest.raises(Exception, match="divisible"):
        train.train(models.build_tuned_unet(depth=5), tiny_data[0], _cfg())


def test_step_log(tiny_data, tmp_path):
    res = train.train(build_smallnet(), tiny_data[0], _cfg(total_steps=2))
    train.write_step_log(tmp_path / "log.csv", res.log)
    rows = list(csv.reader(open(tmp_path / "log.csv", encoding="utf-8")))
    assert rows[0] == ["step", "lr", "loss", "seconds"] and len(rows) == 3


def test_evaluate_ground_truth_oracle(tiny_data):
    pairs = PairSet(tiny_data[1])
    lookup = {}
    for i in range(len(pairs)):
        x, y = pairs.batch([i])
        lookup[x.data.tobytes()] = y.data

    def oracle(x):
        return Tensor(np.concatenate([lookup[x.data[k:k + 1].tobytes()] for k in range(x.shape[0])]))

    assert train.evaluate(oracle, pairs, batch_size=3) == (100.0, 1.0)


def test_evaluate_matches_per_pair_oracle(tiny_data):
    pairs = PairSet(tiny_data[1])
    m = build_smallnet(seed=6)
    p_mean, s_mean = train.evaluate(m, pairs)
    ps, ss = [], []
    for i in range(len(pairs)):
        x, y = pairs.batch([i])
        pred = np.clip(m.predict(x).data, 0, 1).astype(np.float64)
        ps.append(losses.psnr(pred, y.data.astype(np.float64)))
        ss.append(losses.ssim(Tensor(pred), Tensor(y.data.astype(np.float64))).item())
    assert p_mean == pytest.approx(sum(ps) / len(ps), abs=1e-9)
    assert s_mean == pytest.approx(sum(ss) / len(ss), abs=1e-9)
    rev = raw.read_manifest(tiny_data[1])
    rev.pairs.reverse()
    assert train.evaluate(m, PairSet(rev)) == (p_mean, s_mean)


def test_bilinear_predictor_matches_baseline(tiny_data):
    man = raw.read_manifest(tiny_data[1])
    b, _ = man.load_pair(0)
    out = train.bilinear_predictor(raw.pack_bayer(b)).data[0].transpose(1, 2, 0)
    assert np.allclose(out, raw.bilinear_baseline(b), atol=1e-6)
