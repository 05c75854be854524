"""Adam training loop, learning-rate schedules and evaluation."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import losses, raw
from .models import ModelGraph, load_checkpoint, save_checkpoint
from .tensor import NonFiniteError, Tensor, philox

log = logging.getLogger(__name__)

SCHEDULES = ("constant", "step_halve", "linear_decay")


@dataclass
class TrainConfig:
    batch_size: int = 4
    lr_initial: float = 1e-4
    lr_final: float = 1e-4
    lr_schedule: str = "constant"
    halve_every: int = 0  # step_halve period K; 0 means total_steps // 4
    total_steps: int = 1000
    loss: losses.LossSpec = field(default_factory=lambda: losses.LossSpec((("charbonnier", 1.0),)))
    augment_flip: bool = False
    seed: int = 0
    validate_every: int = 0
    checkpoint_every: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.total_steps < 0:
            raise ValueError("total_steps must be non-negative")
        if self.batch_size <= 0:
            raise ValueError("batch_size must be positive")
        if self.lr_final > self.lr_initial:
            raise ValueError(f"lr_final {self.lr_final} exceeds lr_initial {self.lr_initial}")
        if self.lr_schedule not in SCHEDULES:
            raise ValueError(f"lr_schedule must be one of {SCHEDULES}, got {self.lr_schedule!r}")

    def lr_at(self, step: int) -> float:
        if self.lr_schedule == "constant":
            return self.lr_initial
        if self.lr_schedule == "step_halve":
            k = self.halve_every or max(self.total_steps // 4, 1)
            return max(self.lr_initial * 2.0 ** -(step // k), self.lr_final)
        if step >= self.total_steps:
            return self.lr_final
        frac = step / self.total_steps
        return self.lr_initial + (self.lr_final - self.lr_initial) * frac

    def describe(self) -> dict[str, str]:
        return {
            "batch_size": str(self.batch_size),
            "lr_initial": f"{self.lr_initial:g}",
            "lr_final": f"{self.lr_final:g}",
            "lr_schedule": self.lr_schedule,
            "halve_every": str(self.halve_every),
            "total_steps": str(self.total_steps),
            "loss": str(self.loss),
            "augment_flip": str(self.augment_flip),
            "seed": str(self.seed),
        }


# batch 100 at 256x256 does not fit desktop memory; scaled to 8
RECIPES = {
    "dhisp": dict(model="smallnet", batch_size=4, lr_initial=1e-4, lr_final=1.25e-5,
                  lr_schedule="step_halve", loss="l1:1.0", augment_flip=False),
    "aiisp": dict(model="csanet", batch_size=8, lr_initial=5e-4, lr_final=1e-5,
                  lr_schedule="linear_decay", loss="charbonnier:1.0,ssim:0.5", augment_flip=True),
    "unet": dict(model="unet", batch_size=8, lr_initial=1e-4, lr_final=1e-4,
                 lr_schedule="constant", loss="mse:1.0,ssim:0.5", augment_flip=False),
}


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def save(self, path: str | Path) -> None:
        arrays = {f"m/{k}": a for k, a in self.m.items()}
        arrays.update({f"v/{k}": a for k, a in self.v.items()})
        with open(path, "wb") as fh:
            np.savez(fh, __step__=np.array(self.step), **arrays)

    @classmethod
    def load(cls, path: str | Path) -> "AdamState":
        with np.load(path) as z:
            st = cls(step=int(z["__step__"]))
            for key in z.files:
                if key.startswith("m/"):
                    st.m[key[2:]] = z[key]
                elif key.startswith("v/"):
                    st.v[key[2:]] = z[key]
        return st


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update, in place; moments share the parameter dtype."""
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * (g * g)
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.data.dtype, copy=False)


class PairSet:
    """All pairs of a manifest held in memory as packed uint16 RAW and uint8 RGB."""

    def __init__(self, manifest: raw.Manifest | str | Path):
        if not isinstance(manifest, raw.Manifest):
            manifest = raw.read_manifest(manifest)
        if len(manifest) == 0:
            raise ValueError("manifest is empty")
        raws, rgbs = [], []
        for i in range(len(manifest)):
            b, rgb = manifest.load_pair(i)
            if rgb.shape[:2] != b.data.shape:
                raise ValueError(f"pair {i}: RAW {b.data.shape} and RGB {rgb.shape[:2]} differ in size")
            raws.append(b.data)
            rgbs.append(rgb)
        shapes = {r.shape for r in raws}
        if len(shapes) != 1:
            raise ValueError(f"all pairs must share one patch size, found {sorted(shapes)}")
        self.manifest = manifest
        self.raw = np.stack(raws)
        self.rgb = np.stack(rgbs)

    def __len__(self) -> int:
        return len(self.raw)

    def batch(self, idx) -> tuple[Tensor, Tensor]:
        mosaic = self.raw[idx].astype(np.float32) / np.float32(raw.WHITE)
        n, H, W = mosaic.shape
        packed = mosaic.reshape(n, H // 2, 2, W // 2, 2).transpose(0, 2, 4, 1, 3).reshape(n, 4, H // 2, W // 2)
        rgb = self.rgb[idx].astype(np.float32).transpose(0, 3, 1, 2) / np.float32(255.0)
        return Tensor(packed), Tensor(rgb)


def batch_indices(n: int, batch_size: int, seed: int, step: int) -> np.ndarray:
    """Sample indices for ``step``: consecutive slices of per-epoch seeded permutations."""
    out = np.empty(batch_size, dtype=np.int64)
    perms: dict[int, np.ndarray] = {}
    for k in range(batch_size):
        pos = step * batch_size + k
        epoch, off = divmod(pos, n)
        if epoch not in perms:
            perms[epoch] = philox([seed, 1, epoch]).permutation(n)
        out[k] = perms[epoch][off]
    return out


def flip_coins(batch_size: int, seed: int, step: int) -> np.ndarray:
    return philox([seed, 2, step]).random(batch_size) < 0.5


@dataclass
class StepRecord:
    step: int
    lr: float
    loss: float
    seconds: float


@dataclass
class TrainResult:
    model: ModelGraph
    log: list[StepRecord]
    state: AdamState
    best_val_psnr: float | None = None


def write_step_log(path: str | Path, records: list[StepRecord]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "lr", "loss", "seconds"])
        for r in records:
            w.writerow([r.step, f"{r.lr:.8g}", f"{r.loss:.8g}", f"{r.seconds:.6f}"])


def _snapshot(model: ModelGraph) -> dict[str, np.ndarray]:
    return {k: t.data.copy() for k, t in model.params.items()}


def _restore(model: ModelGraph, snap: dict[str, np.ndarray]) -> None:
    for k, arr in snap.items():
        model.params[k].data[...] = arr


def train(
    model: ModelGraph,
    data: PairSet | raw.Manifest | str | Path,
    cfg: TrainConfig,
    *,
    state: AdamState | None = None,
    until: int | None = None,
    val_data: PairSet | raw.Manifest | str | Path | None = None,
    checkpoint_dir: str | Path | None = None,
    on_step: Callable[[StepRecord], None] | None = None,
) -> TrainResult:
    """Run Adam from ``state.step`` up to ``until`` (default ``cfg.total_steps``).

    Batches and flips are pure functions of (seed, step), so a run split at
    any step and resumed from a saved model + Adam state matches an unbroken
    run bit for bit.  With validation data the best-PSNR weights are
    restored at the end.
    """
    pairs = data if isinstance(data, PairSet) else PairSet(data)
    val = None
    if val_data is not None:
        val = val_data if isinstance(val_data, PairSet) else PairSet(val_data)
    state = state or AdamState()
    stop = cfg.total_steps if until is None else min(until, cfg.total_steps)
    x0, _ = pairs.batch([0])
    model.check_input(x0)
    if checkpoint_dir is not None:
        checkpoint_dir = Path(checkpoint_dir)
        checkpoint_dir.mkdir(parents=True, exist_ok=True)

    records: list[StepRecord] = []
    best_psnr, best_snap = None, None
    last_good = _snapshot(model)
    t0 = time.perf_counter()
    for step in range(state.step, stop):
        idx = batch_indices(len(pairs), cfg.batch_size, cfg.seed, step)
        x, y = pairs.batch(idx)
        if cfg.augment_flip:
            coins = flip_coins(cfg.batch_size, cfg.seed, step)
            xs, ys = [], []
            for k in range(cfg.batch_size):
                xk, yk = raw.augment_flip(Tensor(x.data[k:k + 1]), Tensor(y.data[k:k + 1]), bool(coins[k]))
                xs.append(xk.data)
                ys.append(yk.data)
            x, y = Tensor(np.concatenate(xs)), Tensor(np.concatenate(ys))
        for p in model.parameters():
            p.grad = None
        lr = cfg.lr_at(step)
        try:
            loss = losses.composite_loss(cfg.loss, model.forward(x), y)
            loss.backward()
            grads = {k: p.grad if p.grad is not None else np.zeros_like(p.data) for k, p in model.params.items()}
            adam_step(model.params, grads, state, lr, cfg.beta1, cfg.beta2, cfg.eps)
        except NonFiniteError:
            _restore(model, last_good)
            if checkpoint_dir is not None:
                save_checkpoint(model, checkpoint_dir / "last_good.ckpt")
            log.error("non-finite value at step %d; restored last good weights", step)
            raise
        rec = StepRecord(step, lr, loss.item(), time.perf_counter() - t0)
        records.append(rec)
        if on_step:
            on_step(rec)
        done = step + 1
        if cfg.checkpoint_every and done % cfg.checkpoint_every == 0:
            last_good = _snapshot(model)
            if checkpoint_dir is not None:
                save_checkpoint(model, checkpoint_dir / f"step_{done:07d}.ckpt")
                state.save(checkpoint_dir / f"step_{done:07d}.adam.npz")
        if val is not None and cfg.validate_every and (done % cfg.validate_every == 0 or done == stop):
            vpsnr, _ = evaluate(model, val)
            log.info("step %d: validation PSNR %.3f dB", done, vpsnr)
            if best_psnr is None or vpsnr > best_psnr:
                best_psnr, best_snap = vpsnr, _snapshot(model)
    if best_snap is not None:
        _restore(model, best_snap)
    return TrainResult(model, records, state, best_psnr)


def evaluate(predictor: ModelGraph | Callable[[Tensor], Tensor], data: PairSet | raw.Manifest | str | Path,
             batch_size: int = 8) -> tuple[float, float]:
    """Mean PSNR and SSIM of clamped predictions over every pair."""
    pairs = data if isinstance(data, PairSet) else PairSet(data)
    predict = predictor.predict if isinstance(predictor, ModelGraph) else predictor
    psnrs, ssims = [], []
    for start in range(0, len(pairs), batch_size):
        idx = np.arange(start, min(start + batch_size, len(pairs)))
        x, y = pairs.batch(idx)
        out = predict(x)
        pred = np.clip(out.data if isinstance(out, Tensor) else np.asarray(out), 0.0, 1.0)
        for k in range(len(idx)):
            p, t = pred[k:k + 1].astype(np.float64), y.data[k:k + 1].astype(np.float64)
            psnrs.append(losses.psnr(p, t))
            ssims.append(losses.ssim(Tensor(p), Tensor(t)).item())
    return math.fsum(psnrs) / len(psnrs), math.fsum(ssims) / len(ssims)


def bilinear_predictor(x: Tensor) -> Tensor:
    """Non-learned baseline on packed input: bilinear demosaic + sRGB encoding."""
    n, _, h, w = x.shape
    mosaic = x.data.reshape(n, 2, 2, h, w).transpose(0, 3, 1, 4, 2).reshape(n, 2 * h, 2 * w)
    out = np.stack([raw.bilinear_baseline(m).transpose(2, 0, 1) for m in mosaic])
    return Tensor(out.astype(np.float32))


def resume(checkpoint: str | Path, adam_path: str | Path) -> tuple[ModelGraph, AdamState]:
    return load_checkpoint(checkpoint), AdamState.load(adam_path)


def config_from_recipe(name: str, **overrides) -> tuple[str, TrainConfig]:
    try:
        r = dict(RECIPES[name])
    except KeyError:
        raise ValueError(f"unknown recipe {name!r}; expected one of {sorted(RECIPES)}") from None
    model = r.pop("model")
    r["loss"] = losses.LossSpec.parse(r["loss"])
    cfg = TrainConfig(**r)
    return model, replace(cfg, **overrides)
