"""Training losses, image-quality metrics and the fidelity/latency score."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, grad_enabled, make_result

CHARBONNIER_EPS = 1e-3
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
PSNR_CAP = 100.0


def _same_shape(pred: Tensor, target: Tensor, what: str) -> None:
    if pred.shape != target.shape:
        raise ShapeError(f"{what}: prediction {pred.shape} and target {target.shape} differ")


def _scalar(value: float, grad: np.ndarray, pred: Tensor, what: str) -> Tensor:
    out = np.asarray(value, dtype=pred.dtype).reshape(1, 1, 1, 1)
    return make_result(out, (pred,), lambda g: (grad * g.reshape(()),), what)


def _l1(p: np.ndarray, t: np.ndarray) -> tuple[float, np.ndarray]:
    d = p - t
    return np.abs(d).sum() / d.size, np.sign(d) / d.size


def _mse(p: np.ndarray, t: np.ndarray) -> tuple[float, np.ndarray]:
    d = p - t
    return (d * d).sum() / d.size, 2 * d / d.size


def _charbonnier(p: np.ndarray, t: np.ndarray, eps: float = CHARBONNIER_EPS) -> tuple[float, np.ndarray]:
    d = p - t
    r = np.sqrt(d * d + eps * eps)
    return r.sum() / d.size, d / r / d.size


def _f64(t: Tensor) -> np.ndarray:
    return t.data.astype(np.float64)


def l1(pred: Tensor, target: Tensor) -> Tensor:
    _same_shape(pred, target, "l1")
    return _scalar(*_l1(_f64(pred), _f64(target)), pred, "l1")


def mse(pred: Tensor, target: Tensor) -> Tensor:
    _same_shape(pred, target, "mse")
    return _scalar(*_mse(_f64(pred), _f64(target)), pred, "mse")


def charbonnier(pred: Tensor, target: Tensor, eps: float = CHARBONNIER_EPS) -> Tensor:
    """mean(sqrt(d^2 + eps^2)), a smooth surrogate of L1."""
    if eps <= 0:
        raise ValueError("charbonnier eps must be positive")
    _same_shape(pred, target, "charbonnier")
    return _scalar(*_charbonnier(_f64(pred), _f64(target), eps), pred, "charbonnier")


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(x * x) / (2 * sigma * sigma))
    return g / g.sum()


def _filt(a: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable valid correlation over the last two axes."""
    k = g.size
    a = sliding_window_view(a, k, axis=2) @ g
    return sliding_window_view(a, k, axis=3) @ g


def _filt_adjoint(a: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = g.size
    pad = ((0, 0), (0, 0), (k - 1, k - 1), (k - 1, k - 1))
    return _filt(np.pad(a, pad), g[::-1])


@dataclass
class _SsimTerms:
    ssim: float
    cs: float
    grad_ssim: np.ndarray
    grad_cs: np.ndarray


def _ssim_terms(x: np.ndarray, y: np.ndarray, L: float = 1.0, need_grad: bool = True) -> _SsimTerms:
    """Mean SSIM and mean contrast-structure over valid windows, with d/dx of each."""
    g = gaussian_window()
    C1 = (0.01 * L) ** 2
    C2 = (0.03 * L) ** 2
    mx, my = _filt(x, g), _filt(y, g)
    exx, eyy, exy = _filt(x * x, g), _filt(y * y, g), _filt(x * y, g)
    sxx = exx - mx * mx
    syy = eyy - my * my
    sxy = exy - mx * my
    a1 = 2 * mx * my + C1
    a2 = 2 * sxy + C2
    b1 = mx * mx + my * my + C1
    b2 = sxx + syy + C2
    cs_map = a2 / b2
    s_map = (a1 / b1) * cs_map
    n = s_map.size
    ssim_v = float(s_map.sum() / n)
    cs_v = float(cs_map.sum() / n)
    if not need_grad:
        return _SsimTerms(ssim_v, cs_v, None, None)

    def to_x(d_mx, d_sxx, d_sxy):
        # chain through sxx = E[x^2] - mx^2 and sxy = E[xy] - mx*my
        d_mx_total = d_mx - 2 * mx * d_sxx - my * d_sxy
        return (
            _filt_adjoint(d_mx_total, g)
            + 2 * x * _filt_adjoint(d_sxx, g)
            + y * _filt_adjoint(d_sxy, g)
        )

    inv = 1.0 / (b1 * b2)
    gs = to_x(
        (2 * my * a2 * inv - s_map * 2 * mx / b1) / n,
        (-s_map / b2) / n,
        (2 * a1 * inv) / n,
    )
    gc = to_x(np.zeros_like(mx), (-cs_map / b2) / n, (2 / b2) / n)
    return _SsimTerms(ssim_v, cs_v, gs, gc)


def _check_ssim_input(pred: Tensor, target: Tensor, what: str) -> None:
    _same_shape(pred, target, what)
    if min(pred.shape[2:]) < SSIM_WINDOW:
        raise ShapeError(f"{what}: image {pred.shape[2:]} smaller than {SSIM_WINDOW}x{SSIM_WINDOW} window")


def ssim(pred: Tensor, target: Tensor, L: float = 1.0) -> Tensor:
    """Gaussian-window SSIM, averaged over valid windows, channels and batch."""
    _check_ssim_input(pred, target, "ssim")
    return _scalar(*_ssim(_f64(pred), _f64(target), L, grad_enabled()), pred, "ssim")


def _ssim(p: np.ndarray, t: np.ndarray, L: float = 1.0, need_grad: bool = True) -> tuple[float, np.ndarray]:
    terms = _ssim_terms(p, t, L, need_grad)
    return terms.ssim, terms.grad_ssim


def _pool2(a: np.ndarray) -> np.ndarray:
    B, C, H, W = a.shape
    h, w = H // 2, W // 2
    return a[:, :, :2 * h, :2 * w].reshape(B, C, h, 2, w, 2).mean(axis=(3, 5))


def _pool2_adjoint(g: np.ndarray, shape) -> np.ndarray:
    out = np.zeros(shape, g.dtype)
    h, w = g.shape[2], g.shape[3]
    out[:, :, :2 * h, :2 * w] = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) / 4
    return out


def ms_ssim_scales(height: int, width: int, max_scales: int = len(MS_SSIM_WEIGHTS)) -> int:
    m = 0
    while m < max_scales and min(height, width) >= SSIM_WINDOW * 2 ** m:
        m += 1
    return m


MS_SSIM_FLOOR = 1e-6


def ms_ssim(pred: Tensor, target: Tensor, L: float = 1.0) -> Tensor:
    """Multi-scale SSIM: prod_j cs_j^w_j over coarse scales times ssim^w at the last.

    The scale count drops (weights renormalized) when the image is too small
    for five scales.  Per-scale terms are floored at a tiny positive value so
    the fractional powers stay real.
    """
    _same_shape(pred, target, "ms_ssim")
    return _scalar(*_ms_ssim(_f64(pred), _f64(target), L, grad_enabled()), pred, "ms_ssim")


def _ms_ssim(x: np.ndarray, y: np.ndarray, L: float = 1.0, need_grad: bool = True) -> tuple[float, np.ndarray]:
    M = ms_ssim_scales(*x.shape[2:])
    if M == 0:
        raise ShapeError(f"ms_ssim: image {x.shape[2:]} too small for a single scale")
    w = np.asarray(MS_SSIM_WEIGHTS[:M])
    w = w / w.sum()
    shapes, vals, grads = [], [], []
    for j in range(M):
        t = _ssim_terms(x, y, L, need_grad)
        last = j == M - 1
        v, gv = (t.ssim, t.grad_ssim) if last else (t.cs, t.grad_cs)
        if v < MS_SSIM_FLOOR:
            v, gv = MS_SSIM_FLOOR, None if gv is None else np.zeros_like(gv)
        shapes.append(x.shape)
        vals.append(v)
        grads.append(gv)
        if not last:
            x, y = _pool2(x), _pool2(y)
    value = float(np.prod([v ** wj for v, wj in zip(vals, w)]))
    if not need_grad:
        return value, None
    # d value / d v_j = value * w_j / v_j; pull each scale back to full resolution
    total = np.zeros(shapes[-1])
    for j in range(M - 1, -1, -1):
        total = total + grads[j] * (value * w[j] / vals[j])
        if j > 0:
            total = _pool2_adjoint(total, shapes[j - 1])
    return value, total


def psnr(pred: Tensor | np.ndarray, target: Tensor | np.ndarray, max_val: float = 1.0, cap: float = PSNR_CAP) -> float:
    p = pred.data if isinstance(pred, Tensor) else np.asarray(pred)
    t = target.data if isinstance(target, Tensor) else np.asarray(target)
    if p.shape != t.shape:
        raise ShapeError(f"psnr: prediction {p.shape} and target {t.shape} differ")
    d = p.astype(np.float64) - t.astype(np.float64)
    err = float(np.mean(d * d))
    if err < max_val ** 2 * 10 ** (-cap / 10):
        return cap
    return 10 * math.log10(max_val ** 2 / err)


@dataclass(frozen=True)
class ScoreInputs:
    psnr: float
    runtime: float  # seconds

    def __post_init__(self):
        if not math.isfinite(self.psnr):
            raise ValueError(f"psnr must be finite, got {self.psnr}")
        if not self.runtime > 0:
            raise ValueError(f"runtime must be positive, got {self.runtime}")


def mai_score(s: ScoreInputs | float, runtime: float | None = None) -> float:
    """Final Score = PSNR + alpha * (0.2 - clip(runtime)), runtime in seconds.

    alpha is 20 when runtime <= 0.2 s and 0.5 otherwise; runtime is clipped
    to [0.03, 5].
    """
    if not isinstance(s, ScoreInputs):
        s = ScoreInputs(float(s), float(runtime))
    alpha = 20.0 if s.runtime <= 0.2 else 0.5
    clipped = min(max(s.runtime, 0.03), 5.0)
    return s.psnr + alpha * (0.2 - clipped)


LOSS_KINDS = ("l1", "mse", "charbonnier", "ssim", "ms_ssim")


@dataclass(frozen=True)
class LossSpec:
    terms: tuple[tuple[str, float], ...]

    def __post_init__(self):
        if not self.terms:
            raise ValueError("LossSpec needs at least one term")
        for kind, weight in self.terms:
            if kind not in LOSS_KINDS:
                raise ValueError(f"unknown loss kind {kind!r}; valid kinds: {', '.join(LOSS_KINDS)}")
            if not math.isfinite(weight):
                raise ValueError(f"loss weight for {kind} must be finite")

    @classmethod
    def parse(cls, text: str) -> "LossSpec":
        """Parse ``kind:weight,kind:weight`` (weight defaults to 1)."""
        terms = []
        for item in filter(None, (s.strip() for s in text.split(","))):
            kind, _, weight = item.partition(":")
            try:
                w = float(weight) if weight else 1.0
            except ValueError:
                raise ValueError(f"bad weight in loss term {item!r}") from None
            terms.append((kind.strip(), w))
        return cls(tuple(terms))

    def __str__(self) -> str:
        return ",".join(f"{k}:{w:g}" for k, w in self.terms)


def composite_loss(spec: LossSpec, pred: Tensor, target: Tensor) -> Tensor:
    """Weighted sum of terms; ssim and ms_ssim enter as (1 - value)."""
    _same_shape(pred, target, "composite_loss")
    if any(k in ("ssim", "ms_ssim") for k, _ in spec.terms):
        _check_ssim_input(pred, target, "composite_loss")
    p, t = _f64(pred), _f64(target)
    need_grad = grad_enabled()
    total = 0.0
    grad = np.zeros(p.shape) if need_grad else None
    for kind, weight in spec.terms:
        if kind in ("ssim", "ms_ssim"):
            value, g = _TERMS[kind](p, t, 1.0, need_grad)
            value, g = 1.0 - value, (None if g is None else -g)
        else:
            value, g = _TERMS[kind](p, t)
        total += weight * value
        if need_grad:
            grad += weight * g
    return _scalar(total, grad, pred, "composite_loss")


_TERMS = {"l1": _l1, "mse": _mse, "charbonnier": _charbonnier, "ssim": _ssim, "ms_ssim": _ms_ssim}
