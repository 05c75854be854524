"""Differentiable layers used by the three ISP networks.

Convolutions are computed with an explicit im2col + matmul; the naive
six-loop convolution in the test suite is the correctness reference.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError, Tensor, make_result, philox


def _pair(v) -> tuple[int, int]:
    if isinstance(v, int):
        return (v, v)
    a, b = v
    return (int(a), int(b))


@dataclass
class Conv2dParams:
    """Hyperparameters and weights of a (possibly grouped/dilated/transposed) conv.

    Regular convs store ``weight`` as (out, in // groups, kh, kw).  Transposed
    convs store it as (in, out, kh, kw): the weight of the stride-2 conv whose
    input gradient the transposed conv computes.
    """

    in_channels: int
    out_channels: int
    kernel: tuple[int, int] = (3, 3)
    stride: tuple[int, int] = (1, 1)
    dilation: tuple[int, int] = (1, 1)
    groups: int = 1
    padding: str = "same"
    transposed: bool = False
    weight: Tensor | None = field(default=None, repr=False)
    bias: Tensor | None = field(default=None, repr=False)

    def __post_init__(self):
        self.kernel = _pair(self.kernel)
        self.stride = _pair(self.stride)
        self.dilation = _pair(self.dilation)
        if self.in_channels <= 0 or self.out_channels <= 0 or self.groups <= 0:
            raise ValueError(f"channel counts and groups must be positive: {self}")
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ValueError(
                f"in_channels={self.in_channels} and out_channels={self.out_channels} "
                f"must be divisible by groups={self.groups}"
            )
        if self.padding not in ("same", "valid"):
            raise ValueError(f"padding must be 'same' or 'valid', got {self.padding!r}")
        if self.transposed:
            if self.stride != (2, 2):
                raise ValueError(f"transposed conv supports stride 2 only, got {self.stride}")
            if self.kernel not in ((2, 2), (4, 4)) or self.groups != 1 or self.dilation != (1, 1):
                raise ValueError("transposed conv supports kernel 2 or 4, groups 1, no dilation")
        if self.weight is not None and self.weight.shape != self.weight_shape:
            raise ShapeError(f"weight shape {self.weight.shape} != expected {self.weight_shape}")
        if self.bias is not None and self.bias.shape != (1, self.out_channels, 1, 1):
            raise ShapeError(f"bias shape {self.bias.shape} != (1, {self.out_channels}, 1, 1)")

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        kh, kw = self.kernel
        if self.transposed:
            return (self.in_channels, self.out_channels, kh, kw)
        return (self.out_channels, self.in_channels // self.groups, kh, kw)

    @property
    def num_params(self) -> int:
        return int(np.prod(self.weight_shape)) + self.out_channels

    def init(self, rng: np.random.Generator) -> "Conv2dParams":
        """Kaiming-uniform (fan-in) weights and zero bias."""
        kh, kw = self.kernel
        if self.transposed:
            fan_in = self.in_channels * kh * kw // 4
        else:
            fan_in = (self.in_channels // self.groups) * kh * kw
        bound = math.sqrt(6.0 / fan_in)
        w = rng.uniform(-bound, bound, size=self.weight_shape).astype(np.float32)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros((1, self.out_channels, 1, 1), np.float32), requires_grad=True)
        return self


def _out_and_pads(size: int, k: int, s: int, d: int, padding: str) -> tuple[int, int, int]:
    eff = (k - 1) * d + 1
    if padding == "same":
        out = -(-size // s)
        total = max((out - 1) * s + eff - size, 0)
        return out, total // 2, total - total // 2
    if size < eff:
        raise ShapeError(f"kernel extent {eff} larger than input extent {size} under valid padding")
    return (size - eff) // s + 1, 0, 0


@dataclass(frozen=True)
class _ConvGeom:
    B: int
    C: int
    H: int
    W: int
    O: int
    G: int
    kh: int
    kw: int
    sh: int
    sw: int
    dh: int
    dw: int
    Ho: int
    Wo: int
    pt: int
    pb: int
    pl: int
    pr: int


def _geometry(x_shape, w_shape, stride, dilation, groups, padding) -> _ConvGeom:
    B, C, H, W = x_shape
    O, _, kh, kw = w_shape
    sh, sw = stride
    dh, dw = dilation
    Ho, pt, pb = _out_and_pads(H, kh, sh, dh, padding)
    Wo, pl, pr = _out_and_pads(W, kw, sw, dw, padding)
    return _ConvGeom(B, C, H, W, O, groups, kh, kw, sh, sw, dh, dw, Ho, Wo, pt, pb, pl, pr)


def _im2col(x: np.ndarray, g: _ConvGeom) -> np.ndarray:
    """(B, C, H, W) -> (B, G, C/G*kh*kw, Ho*Wo)."""
    if g.pt or g.pb or g.pl or g.pr:
        xp = np.zeros((g.B, g.C, g.H + g.pt + g.pb, g.W + g.pl + g.pr), x.dtype)
        xp[:, :, g.pt:g.pt + g.H, g.pl:g.pl + g.W] = x
    else:
        xp = x
    cols = np.empty((g.B, g.C, g.kh, g.kw, g.Ho, g.Wo), x.dtype)
    hspan = g.sh * (g.Ho - 1) + 1
    wspan = g.sw * (g.Wo - 1) + 1
    for i in range(g.kh):
        hi = i * g.dh
        for j in range(g.kw):
            wj = j * g.dw
            cols[:, :, i, j] = xp[:, :, hi:hi + hspan:g.sh, wj:wj + wspan:g.sw]
    return cols.reshape(g.B, g.G, (g.C // g.G) * g.kh * g.kw, g.Ho * g.Wo)


def _col2im(cols: np.ndarray, g: _ConvGeom) -> np.ndarray:
    cols = cols.reshape(g.B, g.C, g.kh, g.kw, g.Ho, g.Wo)
    xp = np.zeros((g.B, g.C, g.H + g.pt + g.pb, g.W + g.pl + g.pr), cols.dtype)
    hspan = g.sh * (g.Ho - 1) + 1
    wspan = g.sw * (g.Wo - 1) + 1
    for i in range(g.kh):
        hi = i * g.dh
        for j in range(g.kw):
            wj = j * g.dw
            xp[:, :, hi:hi + hspan:g.sh, wj:wj + wspan:g.sw] += cols[:, :, i, j]
    return xp[:, :, g.pt:g.pt + g.H, g.pl:g.pl + g.W]


def _conv_fwd(x: np.ndarray, w: np.ndarray, g: _ConvGeom) -> tuple[np.ndarray, np.ndarray]:
    cols = _im2col(x, g)
    wm = w.reshape(g.G, g.O // g.G, -1)
    if g.G == 1:
        out = np.matmul(wm[0], cols[:, 0])
    else:
        out = np.matmul(wm[None], cols)
    return out.reshape(g.B, g.O, g.Ho, g.Wo), cols


def _conv_grad_input(gy: np.ndarray, w: np.ndarray, g: _ConvGeom) -> np.ndarray:
    gm = gy.reshape(g.B, g.G, g.O // g.G, g.Ho * g.Wo)
    wm = w.reshape(g.G, g.O // g.G, -1)
    if g.G == 1:
        dcols = np.matmul(wm[0].T, gm[:, 0])
    else:
        dcols = np.matmul(wm.transpose(0, 2, 1)[None], gm)
    return _col2im(dcols, g)


def _conv_grad_weight(cols: np.ndarray, gy: np.ndarray, g: _ConvGeom, w_shape) -> np.ndarray:
    gm = gy.reshape(g.B, g.G, g.O // g.G, g.Ho * g.Wo)
    if g.G == 1:
        dw = np.matmul(gm[:, 0], cols[:, 0].transpose(0, 2, 1)).sum(axis=0)
    else:
        dw = np.matmul(gm, cols.transpose(0, 1, 3, 2)).sum(axis=0)
    return dw.reshape(w_shape)


def conv2d(x: Tensor, p: Conv2dParams) -> Tensor:
    if p.transposed:
        raise ValueError("use conv2d_transposed for transposed params")
    if x.shape[1] != p.in_channels:
        raise ShapeError(f"conv2d expects {p.in_channels} input channels, got shape {x.shape}")
    w, b = p.weight, p.bias
    g = _geometry(x.shape, w.shape, p.stride, p.dilation, p.groups, p.padding)
    out, cols = _conv_fwd(x.data, w.data, g)
    out += b.data

    def backward(gy):
        return (
            _conv_grad_input(gy, w.data, g) if x.requires_grad else None,
            _conv_grad_weight(cols, gy, g, w.shape),
            gy.sum(axis=(0, 2, 3), keepdims=True),
        )

    return make_result(out, (x, w, b), backward, "conv2d")


def conv2d_transposed(x: Tensor, p: Conv2dParams) -> Tensor:
    """Stride-2 transposed conv: the input gradient of the matching stride-2 conv."""
    if not p.transposed:
        raise ValueError("conv2d_transposed needs params with transposed=True")
    if p.stride != (2, 2):
        raise ValueError(f"unsupported stride {p.stride} for conv2d_transposed")
    if x.shape[1] != p.in_channels:
        raise ShapeError(f"conv2d_transposed expects {p.in_channels} input channels, got {x.shape}")
    w, b = p.weight, p.bias
    B, _, H, W = x.shape
    full_shape = (B, p.out_channels, 2 * H, 2 * W)
    g = _geometry(full_shape, w.shape, p.stride, p.dilation, 1, p.padding)
    out = _conv_grad_input(x.data, w.data, g) + b.data

    def backward(gy):
        dx, cols = _conv_fwd(gy, w.data, g)
        return dx, _conv_grad_weight(cols, x.data, g, w.shape), gy.sum(axis=(0, 2, 3), keepdims=True)

    return make_result(out, (x, w, b), backward, "conv2d_transposed")


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """(B, C*r*r, H, W) -> (B, C, H*r, W*r), out[c, h*r+i, w*r+j] = in[c*r*r + i*r + j, h, w]."""
    B, C, H, W = x.shape
    if C % (r * r):
        raise ShapeError(f"pixel_shuffle: {C} channels not divisible by r^2={r * r}")
    c = C // (r * r)
    out = x.data.reshape(B, c, r, r, H, W).transpose(0, 1, 4, 2, 5, 3).reshape(B, c, H * r, W * r)

    def backward(g):
        return (g.reshape(B, c, H, r, W, r).transpose(0, 1, 3, 5, 2, 4).reshape(B, C, H, W),)

    return make_result(out, (x,), backward, "pixel_shuffle")


def space_to_depth(x: Tensor, r: int) -> Tensor:
    B, C, H, W = x.shape
    if H % r or W % r:
        raise ShapeError(f"space_to_depth: spatial extent {H}x{W} not divisible by {r}")
    h, w = H // r, W // r
    out = x.data.reshape(B, C, h, r, w, r).transpose(0, 1, 3, 5, 2, 4).reshape(B, C * r * r, h, w)

    def backward(g):
        return (g.reshape(B, C, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(B, C, H, W),)

    return make_result(out, (x,), backward, "space_to_depth")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_result(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return make_result(y, (x,), lambda g: (g * (1 - y * y),), "tanh")


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    d = x.data
    e = np.exp(-np.abs(d))
    y = np.where(d >= 0, 1 / (1 + e), e / (1 + e)).astype(d.dtype, copy=False)
    return make_result(y, (x,), lambda g: (g * y * (1 - y),), "sigmoid")


ACTIVATIONS = {"relu": relu, "tanh": tanh, "sigmoid": sigmoid}


def activation(x: Tensor, kind: str) -> Tensor:
    try:
        return ACTIVATIONS[kind](x)
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}; expected one of {sorted(ACTIVATIONS)}") from None


def global_avg_pool(x: Tensor) -> Tensor:
    B, C, H, W = x.shape
    n = H * W
    out = x.data.mean(axis=(2, 3), keepdims=True, dtype=np.float64).astype(x.dtype)
    return make_result(out, (x,), lambda g: (np.broadcast_to(g / n, x.shape).copy(),), "global_avg_pool")


def max_pool2(x: Tensor) -> Tensor:
    """2x2 stride-2 max; ties route the gradient to the first element in (h, w) scan order."""
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ShapeError(f"max_pool2 needs even extents, got {H}x{W}")
    blocks = x.data.reshape(B, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H // 2, W // 2, 4)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros(blocks.shape, g.dtype)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gx = gb.reshape(B, C, H // 2, W // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H, W)
        return (gx,)

    return make_result(out, (x,), backward, "max_pool2")


def _up2_axis(a: np.ndarray, axis: int) -> np.ndarray:
    # half-pixel centres: out[2i] = .25 a[i-1] + .75 a[i], out[2i+1] = .75 a[i] + .25 a[i+1]
    n = a.shape[axis]
    prev = np.take(a, np.r_[0, np.arange(n - 1)], axis=axis)
    nxt = np.take(a, np.r_[np.arange(1, n), n - 1], axis=axis)
    even = 0.25 * prev + 0.75 * a
    odd = 0.75 * a + 0.25 * nxt
    out = np.stack([even, odd], axis=axis + 1)
    shape = list(a.shape)
    shape[axis] = 2 * n
    return out.reshape(shape).astype(a.dtype, copy=False)


def _up2_axis_adjoint(g: np.ndarray, axis: int) -> np.ndarray:
    n = g.shape[axis] // 2
    shape = list(g.shape)
    shape[axis:axis + 1] = [n, 2]
    g2 = g.reshape(shape)
    even = np.take(g2, 0, axis=axis + 1)
    odd = np.take(g2, 1, axis=axis + 1)
    out = 0.75 * even + 0.75 * odd
    sl = [slice(None)] * g.ndim
    # prev contributions: even[i] took .25 * a[i-1] (clamped to a[0] at i=0)
    src = [slice(None)] * g.ndim
    sl[axis] = slice(0, n - 1)
    src[axis] = slice(1, n)
    out[tuple(sl)] += 0.25 * even[tuple(src)]
    first = [slice(None)] * g.ndim
    first[axis] = slice(0, 1)
    out[tuple(first)] += 0.25 * even[tuple(first)]
    # next contributions: odd[i] took .25 * a[i+1] (clamped to a[n-1] at the end)
    sl[axis] = slice(1, n)
    src[axis] = slice(0, n - 1)
    out[tuple(sl)] += 0.25 * odd[tuple(src)]
    last = [slice(None)] * g.ndim
    last[axis] = slice(n - 1, n)
    out[tuple(last)] += 0.25 * odd[tuple(last)]
    return out.astype(g.dtype, copy=False)


def bilinear_up2(x: Tensor) -> Tensor:
    """2x bilinear upsampling, align_corners=False with edge clamping."""
    out = _up2_axis(_up2_axis(x.data, 2), 3)
    return make_result(out, (x,), lambda g: (_up2_axis_adjoint(_up2_axis_adjoint(g, 3), 2),), "bilinear_up2")


def clamp01(x: Tensor) -> Tensor:
    y = np.clip(x.data, 0.0, 1.0)
    mask = (x.data >= 0) & (x.data <= 1)
    return make_result(y, (x,), lambda g: (g * mask,), "clamp01")


def flip_width(x: Tensor) -> Tensor:
    return make_result(x.data[..., ::-1], (x,), lambda g: (g[..., ::-1],), "flip_width")


def permute_channels(x: Tensor, order) -> Tensor:
    order = np.asarray(order)
    inv = np.argsort(order)
    return make_result(x.data[:, order], (x,), lambda g: (g[:, inv],), "permute_channels")


def new_conv(rng: np.random.Generator | int, cin: int, cout: int, k: int = 3, **kw) -> Conv2dParams:
    if isinstance(rng, int):
        rng = philox(rng)
    return Conv2dParams(cin, cout, kernel=k, **kw).init(rng)
