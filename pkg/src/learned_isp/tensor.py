"""Dense rank-4 tensors with a small reverse-mode autograd tape.

Every value in the package is a ``Tensor`` in (batch, channel, height, width)
layout.  Storage is float32; the gradient-check harness re-runs graphs in
float64, so ops preserve whatever floating dtype they receive.

Random numbers come from numpy's Philox generator, a counter-based bit
generator, so ``randn(shape, seed)`` is reproducible on a given platform.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

Shape = tuple[int, int, int, int]

_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference, profiling)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


def philox(seed: int | Sequence[int]) -> np.random.Generator:
    """Counter-based generator used for every seeded draw in the package."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))


def _check_finite(arr: np.ndarray, where: str) -> None:
    # float64 accumulation cannot overflow for finite float32 inputs
    if arr.size and not np.isfinite(arr.sum(dtype=np.float64)):
        raise NonFiniteError(f"{where}: non-finite values in output")


def _as_array(data) -> np.ndarray:
    arr = np.asarray(data)
    if arr.dtype != np.float64:
        arr = arr.astype(np.float32, copy=False)
    return np.ascontiguousarray(arr)


class Tensor:
    """Rank-4 float tensor with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = _as_array(data)
        if arr.ndim != 4:
            raise ShapeError(f"Tensor must be rank 4, got shape {arr.shape}")
        _check_finite(arr, name or "Tensor")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    @property
    def shape(self) -> Shape:
        return self.data.shape  # type: ignore[return-value]

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __float__(self) -> float:
        return self.item()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def astype(self, dtype) -> "Tensor":
        """Copy with a different float dtype; keeps the requires_grad flag."""
        out = Tensor.__new__(Tensor)
        out.data = np.ascontiguousarray(self.data.astype(dtype))
        out.grad = None
        out.requires_grad = self.requires_grad
        out._parents = ()
        out._backward = None
        out.name = self.name
        return out

    def zero_grad(self) -> None:
        self.grad = None

    def __add__(self, other: "Tensor") -> "Tensor":
        return elementwise("add", self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return elementwise("sub", self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return elementwise("mul", self, other)

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate gradients of this tensor into every tensor it depends on."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed gradient needs a single-element tensor")
            grad = np.ones_like(self.data)
        order = _topological(self)
        self.grad = grad.astype(self.dtype) if self.grad is None else self.grad + grad
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            parent_grads = node._backward(node.grad)
            for parent, g in zip(node._parents, parent_grads):
                if g is None or not parent.requires_grad:
                    continue
                g = g.astype(parent.dtype, copy=False)
                parent.grad = g.copy() if parent.grad is None else parent.grad + g
            if node._parents:
                # intermediate buffers are not needed once propagated
                node._backward = None


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def make_result(
    data: np.ndarray,
    parents: Iterable[Tensor],
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]],
    where: str,
) -> Tensor:
    """Wrap an op's output, recording it on the tape when any input needs grads."""
    parents = tuple(parents)
    out = Tensor.__new__(Tensor)
    out.data = np.ascontiguousarray(data)
    _check_finite(out.data, where)
    out.grad = None
    out.name = None
    out.requires_grad = False
    out._parents = ()
    out._backward = None
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def zeros(shape: Shape, dtype=np.float32) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype))


def fill(shape: Shape, value: float, dtype=np.float32) -> Tensor:
    return Tensor(np.full(shape, value, dtype=dtype))


def ones(shape: Shape, dtype=np.float32) -> Tensor:
    return fill(shape, 1.0, dtype)


def randn(shape: Shape, seed: int, requires_grad: bool = False) -> Tensor:
    """Standard-normal float32 tensor; identical bits for identical (shape, seed)."""
    if any(s < 0 for s in shape):
        raise ShapeError(f"negative extent in {shape}")
    n = int(np.prod(shape))
    data = philox(seed).standard_normal(n, dtype=np.float32).reshape(shape)
    return Tensor(data, requires_grad=requires_grad)


def flat_index(shape: Shape, b: int, c: int, h: int, w: int) -> int:
    _, C, H, W = shape
    return ((b * C + c) * H + h) * W + w


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def elementwise(op: str, a: Tensor, b: Tensor) -> Tensor:
    """``a op b`` for op in {add, sub, mul}; ``b`` may broadcast along size-1 axes."""
    if op not in ("add", "sub", "mul"):
        raise ValueError(f"unknown elementwise op {op!r}")
    if any(bs not in (1, as_) for as_, bs in zip(a.shape, b.shape)):
        raise ShapeError(f"cannot broadcast {b.shape} onto {a.shape} for {op}")
    x, y = a.data, b.data
    if op == "add":
        out = x + y
    elif op == "sub":
        out = x - y
    else:
        out = x * y

    def backward(g):
        if op == "add":
            return g, _reduce_to(g, y.shape)
        if op == "sub":
            return g, -_reduce_to(g, y.shape)
        return g * y, _reduce_to(g * x, y.shape)

    return make_result(out, (a, b), backward, op)


def add(a: Tensor, b: Tensor) -> Tensor:
    return elementwise("add", a, b)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return elementwise("sub", a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return elementwise("mul", a, b)


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat_channels needs at least one tensor")
    ref = parts[0].shape
    for p in parts[1:]:
        if (p.shape[0], p.shape[2], p.shape[3]) != (ref[0], ref[2], ref[3]):
            raise ShapeError(f"concat_channels: {p.shape} does not match {ref} outside channels")
    if len(parts) == 1:
        return parts[0]
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])
    out = np.concatenate([p.data for p in parts], axis=1)

    def backward(g):
        return [g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts))]

    return make_result(out, parts, backward, "concat_channels")


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    out = x.data[:, start:stop]

    def backward(g):
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        return (full,)

    return make_result(out, (x,), backward, "slice_channels")


def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(dtype=np.float64), dtype=x.dtype).reshape(1, 1, 1, 1)
    return make_result(out, (x,), lambda g: (np.broadcast_to(g.reshape(()), x.shape),), "sum_all")


def mean_all(x: Tensor) -> Tensor:
    n = x.size
    out = np.asarray(x.data.sum(dtype=np.float64) / n, dtype=x.dtype).reshape(1, 1, 1, 1)
    return make_result(out, (x,), lambda g: (np.broadcast_to(g.reshape(()) / n, x.shape),), "mean_all")


def scale(x: Tensor, k: float) -> Tensor:
    return make_result(x.data * x.dtype.type(k), (x,), lambda g: (g * k,), "scale")


def check_gradients(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-3,
    wrt: Sequence[int] | None = None,
) -> float:
    """Largest relative error between analytic and central-difference gradients.

    ``fn`` maps the inputs to any tensor; the checked scalar is the inner
    product of that output with a fixed random projection, so every output
    element contributes.  Everything runs in float64.  Relative error per
    input is ``|ga - gn| / max(|ga|, |gn|)`` over the flattened gradient.
    """
    xs = [t.astype(np.float64) for t in inputs]
    for t in xs:
        t.requires_grad = True
    out = fn(*xs)
    proj = philox(12345).standard_normal(out.size).reshape(out.shape)

    def objective() -> float:
        with no_grad():
            return float(np.sum(fn(*xs).data * proj))

    loss = sum_all(mul(out, Tensor(proj)))
    loss.backward()
    targets = range(len(xs)) if wrt is None else wrt
    worst = 0.0
    for i in targets:
        t = xs[i]
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        numeric = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        nflat = numeric.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + h
            fp = objective()
            flat[k] = orig - h
            fm = objective()
            flat[k] = orig
            nflat[k] = (fp - fm) / (2 * h)
        denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
        worst = max(worst, float(np.linalg.norm(analytic - numeric) / denom))
    return worst
