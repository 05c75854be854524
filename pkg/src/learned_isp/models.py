"""Smallnet, CSANet and the tuned U-Net as explicit layer graphs, plus checkpoints.

A ``ModelGraph`` is a topologically ordered list of nodes.  Each node names
its inputs by index (``-1`` is the graph input), so skip connections and
attention gates are ordinary nodes.  Models consume packed Bayer tensors
(B, 4, H/2, W/2) and emit RGB (B, 3, H, W).
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import nn
from .tensor import ShapeError, Tensor, add, concat_channels, mul, no_grad, philox

INPUT = -1


@dataclass
class Node:
    name: str
    kind: str
    inputs: tuple[int, ...]
    attrs: dict[str, Any] = field(default_factory=dict)

    @property
    def param_names(self) -> tuple[str, ...]:
        if self.kind in ("conv", "conv_t"):
            return (f"{self.name}.weight", f"{self.name}.bias")
        return ()


def _conv_params(node: Node, params: dict[str, Tensor]) -> nn.Conv2dParams:
    a = node.attrs
    return nn.Conv2dParams(
        a["cin"], a["cout"], kernel=a["k"], stride=2 if node.kind == "conv_t" else a.get("stride", 1),
        dilation=a.get("dilation", 1), groups=a.get("groups", 1),
        transposed=node.kind == "conv_t",
        weight=params[f"{node.name}.weight"], bias=params[f"{node.name}.bias"],
    )


def run_node(node: Node, args: list[Tensor], params: dict[str, Tensor]) -> Tensor:
    kind = node.kind
    if kind == "conv":
        y = nn.conv2d(args[0], _conv_params(node, params))
    elif kind == "conv_t":
        y = nn.conv2d_transposed(args[0], _conv_params(node, params))
    elif kind == "pixel_shuffle":
        y = nn.pixel_shuffle(args[0], node.attrs["r"])
    elif kind == "max_pool2":
        y = nn.max_pool2(args[0])
    elif kind == "bilinear_up2":
        y = nn.bilinear_up2(args[0])
    elif kind == "gap":
        y = nn.global_avg_pool(args[0])
    elif kind == "concat":
        y = concat_channels(args)
    elif kind == "add":
        y = add(args[0], args[1])
    elif kind == "mul":
        y = mul(args[0], args[1])
    else:
        raise ValueError(f"unknown node kind {kind!r}")
    act = node.attrs.get("act")
    return nn.activation(y, act) if act else y


class ModelGraph:
    """Ordered layer graph with named parameters."""

    def __init__(self, name: str, nodes: list[Node], params: dict[str, Tensor],
                 in_channels: int = 4, out_channels: int = 3, scale: int = 2,
                 config: dict[str, int] | None = None):
        self.name = name
        self.nodes = nodes
        self.params = params
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.scale = scale
        self.config = dict(config or {})
        self.validate()

    # -- structure
    def validate(self) -> None:
        """Propagate channel counts and spatial strides; raise on any mismatch."""
        chans: list[int] = []
        # spatial size relative to the input, as (numerator, denominator)
        scales: list[tuple[int, int]] = []

        def src(i):
            return (self.in_channels, (1, 1)) if i == INPUT else (chans[i], scales[i])

        for idx, node in enumerate(self.nodes):
            if any(i != INPUT and not 0 <= i < idx for i in node.inputs):
                raise ValueError(f"node {node.name} references a later or unknown node")
            ins = [src(i) for i in node.inputs]
            a = node.attrs
            k = node.kind
            if k in ("conv", "conv_t"):
                c, s = ins[0]
                if c != a["cin"]:
                    raise ShapeError(f"node {node.name}: expects {a['cin']} channels, producer gives {c}")
                expected = _conv_params_shape(node)
                for pname, shape in zip(node.param_names, expected):
                    if pname not in self.params:
                        raise KeyError(f"missing parameter {pname}")
                    if self.params[pname].shape != shape:
                        raise ShapeError(f"parameter {pname} has shape {self.params[pname].shape}, expected {shape}")
                st = a.get("stride", 1)
                if k == "conv_t":
                    s = (s[0] * 2, s[1])
                elif st != 1:
                    s = (s[0], s[1] * st)
                chans.append(a["cout"])
                scales.append(s)
            elif k == "pixel_shuffle":
                c, s = ins[0]
                r = a["r"]
                if c % (r * r):
                    raise ShapeError(f"node {node.name}: {c} channels not divisible by {r * r}")
                chans.append(c // (r * r))
                scales.append((s[0] * r, s[1]))
            elif k == "max_pool2":
                chans.append(ins[0][0])
                scales.append((ins[0][1][0], ins[0][1][1] * 2))
            elif k == "bilinear_up2":
                chans.append(ins[0][0])
                scales.append((ins[0][1][0] * 2, ins[0][1][1]))
            elif k == "gap":
                chans.append(ins[0][0])
                scales.append((0, 1))
            elif k == "concat":
                if len({_ratio(s) for _, s in ins}) != 1:
                    raise ShapeError(f"node {node.name}: concat inputs at different resolutions")
                chans.append(sum(c for c, _ in ins))
                scales.append(ins[0][1])
            elif k in ("add", "mul"):
                (ca, sa), (cb, sb) = ins
                if ca != cb or (_ratio(sa) != _ratio(sb) and _ratio(sb) != 0):
                    raise ShapeError(f"node {node.name}: cannot combine {ca}ch@{sa} with {cb}ch@{sb}")
                chans.append(ca)
                scales.append(sa)
            else:
                raise ValueError(f"unknown node kind {k!r}")
        if chans[-1] != self.out_channels:
            raise ShapeError(f"graph ends with {chans[-1]} channels, expected {self.out_channels}")
        if _ratio(scales[-1]) != self.scale:
            raise ShapeError(f"graph output scale {scales[-1]} != declared {self.scale}")
        unused = set(self.params) - {p for n in self.nodes for p in n.param_names}
        if unused:
            raise KeyError(f"parameters not used by any node: {sorted(unused)}")

    @property
    def min_multiple(self) -> int:
        """Packed input extents must be divisible by this."""
        return int(self.config.get("multiple", 1))

    def num_params(self) -> int:
        return sum(t.size for t in self.params.values())

    def param_bytes(self) -> int:
        return 4 * self.num_params()

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def param_hash(self) -> str:
        h = hashlib.sha256()
        for name, t in self.params.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
        return h.hexdigest()

    def layer_rows(self) -> list[tuple[int, str, str, int]]:
        rows = []
        for i, node in enumerate(self.nodes):
            n = sum(self.params[p].size for p in node.param_names)
            rows.append((i, node.name, describe_node(node), n))
        return rows

    # -- execution
    def check_input(self, x: Tensor) -> None:
        B, C, H, W = x.shape
        if C != self.in_channels:
            raise ShapeError(f"{self.name} expects {self.in_channels} input channels, got {x.shape}")
        m = self.min_multiple
        if H % m or W % m:
            raise ShapeError(f"{self.name} needs packed extents divisible by {m}, got {H}x{W}")

    def forward(self, x: Tensor, trace=None) -> Tensor:
        """Run the graph; ``trace(index, node, fn)`` may wrap each node call for timing."""
        self.check_input(x)
        values: list[Tensor] = []
        for idx, node in enumerate(self.nodes):
            args = [x if i == INPUT else values[i] for i in node.inputs]
            if trace is None:
                values.append(run_node(node, args, self.params))
            else:
                values.append(trace(idx, node, lambda: run_node(node, args, self.params)))
        return values[-1]

    __call__ = forward

    def predict(self, x: Tensor) -> Tensor:
        """Inference without tape; output clamped to [0, 1]."""
        with no_grad():
            return nn.clamp01(self.forward(x))


def _ratio(s: tuple[int, int]) -> float:
    return s[0] / s[1]


def _conv_params_shape(node: Node):
    a = node.attrs
    k = a["k"]
    if node.kind == "conv_t":
        w = (a["cin"], a["cout"], k, k)
    else:
        w = (a["cout"], a["cin"] // a.get("groups", 1), k, k)
    return w, (1, a["cout"], 1, 1)


def describe_node(node: Node) -> str:
    a = node.attrs
    if node.kind in ("conv", "conv_t"):
        s = f"{node.kind} {a['k']}x{a['k']} {a['cin']}->{a['cout']}"
        if a.get("stride", 1) != 1 or node.kind == "conv_t":
            s += " s2"
        if a.get("dilation", 1) != 1:
            s += f" d{a['dilation']}"
        if a.get("groups", 1) != 1:
            s += f" g{a['groups']}"
        if a.get("act"):
            s += f" +{a['act']}"
        return s
    if node.kind == "pixel_shuffle":
        return f"pixel_shuffle r{a['r']}"
    return node.kind + (f" +{a['act']}" if a.get("act") else "")


class _Builder:
    def __init__(self, seed: int):
        self.rng = philox(seed)
        self.nodes: list[Node] = []
        self.params: dict[str, Tensor] = {}

    def add(self, name, kind, inputs, **attrs) -> int:
        node = Node(name, kind, tuple(inputs), attrs)
        if kind in ("conv", "conv_t"):
            p = nn.Conv2dParams(
                attrs["cin"], attrs["cout"], kernel=attrs["k"],
                stride=2 if kind == "conv_t" else attrs.get("stride", 1),
                dilation=attrs.get("dilation", 1), groups=attrs.get("groups", 1),
                transposed=kind == "conv_t",
            ).init(self.rng)
            self.params[f"{name}.weight"] = p.weight
            self.params[f"{name}.bias"] = p.bias
        self.nodes.append(node)
        return len(self.nodes) - 1

    def conv(self, name, src, cin, cout, k=3, act=None, **kw) -> int:
        return self.add(name, "conv", [src], cin=cin, cout=cout, k=k, act=act, **kw)


def build_smallnet(seed: int = 0) -> ModelGraph:
    """Three 3x3 convs (16, 16, 12 channels; tanh, relu, relu) and a x2 pixel shuffle."""
    b = _Builder(seed)
    x = b.conv("conv1", INPUT, 4, 16, act="tanh")
    x = b.conv("conv2", x, 16, 16, act="relu")
    x = b.conv("conv3", x, 16, 12, act="relu")
    b.add("shuffle", "pixel_shuffle", [x], r=2)
    return ModelGraph("smallnet", b.nodes, b.params, config={"multiple": 1})


def _add_dam(b: _Builder, prefix: str, src: int, c: int, reduction: int) -> int:
    if c % reduction:
        raise ValueError(f"DAM channels {c} not divisible by reduction {reduction}")
    x = b.conv(f"{prefix}.conv1", src, c, c, act="relu")
    f = b.conv(f"{prefix}.conv2", x, c, c, act="relu")
    dw = b.conv(f"{prefix}.sa_dw", f, c, c, k=5, dilation=2, groups=c)
    sa = b.add(f"{prefix}.sa", "mul", [f, dw])
    sq = b.add(f"{prefix}.squeeze", "gap", [f])
    e1 = b.conv(f"{prefix}.ca1", sq, c, c // reduction, k=1, act="relu")
    e2 = b.conv(f"{prefix}.ca2", e1, c // reduction, c, k=1, act="sigmoid")
    ca = b.add(f"{prefix}.ca", "mul", [f, e2])
    cat = b.add(f"{prefix}.concat", "concat", [sa, ca])
    return b.conv(f"{prefix}.fuse", cat, 2 * c, c, k=1)


def build_dam(channels: int = 64, reduction: int = 4, seed: int = 0) -> ModelGraph:
    """A single double-attention module as a standalone graph (C -> C, same size)."""
    b = _Builder(seed)
    _add_dam(b, "dam", INPUT, channels, reduction)
    return ModelGraph("dam", b.nodes, b.params, in_channels=channels, out_channels=channels, scale=1)


def dam_forward(x: Tensor, dam: ModelGraph) -> Tensor:
    return dam.forward(x)


def build_csanet(base: int = 32, blocks: int = 2, reduction: int = 4, seed: int = 0) -> ModelGraph:
    """Two downsizing convs, residual DAM blocks, transposed-conv + depth-to-space upscaling, sigmoid head.

    Each block's final 1x1 fuse conv starts at zero so the residual branch is
    an identity at init; the spatial-attention product is quadratic in the
    features and otherwise inflates activations block over block.
    """
    if base <= 0 or blocks <= 0:
        raise ValueError(f"csanet needs positive base channels and block count, got {base}, {blocks}")
    c = 2 * base
    b = _Builder(seed)
    x = b.conv("head1", INPUT, 4, base, act="relu")
    x = b.conv("head2", x, base, c, stride=2, act="relu")
    for i in range(blocks):
        d = _add_dam(b, f"dam{i}", x, c, reduction)
        b.params[f"dam{i}.fuse.weight"].data[...] = 0
        x = b.add(f"skip{i}", "add", [x, d])
    x = b.add("up", "conv_t", [x], cin=c, cout=base, k=2, act="relu")
    x = b.conv("tail", x, base, 12)
    x = b.add("shuffle", "pixel_shuffle", [x], r=2)
    b.conv("out", x, 3, 3, act="sigmoid")
    cfg = {"base": base, "blocks": blocks, "reduction": reduction, "multiple": 2}
    return ModelGraph("csanet", b.nodes, b.params, config=cfg)


def build_tuned_unet(depth: int = 3, base: int = 16, seed: int = 0) -> ModelGraph:
    """U-Net with bilinear upsampling and concatenated skips, sigmoid RGB head.

    Encoder level i has ``base * 2**i`` channels; the bottleneck runs at
    ``base * 2**depth``.  Each decoder conv pair halves the channel count so
    every skip concat holds twice the channels of its level.
    """
    if depth <= 0 or base <= 0:
        raise ValueError(f"unet needs positive depth and base, got {depth}, {base}")
    b = _Builder(seed)
    widths = [base * 2 ** i for i in range(depth)]
    skips = []
    x, cin = INPUT, 4
    for i, w in enumerate(widths):
        x = b.conv(f"enc{i}.conv1", x, cin, w, act="relu")
        x = b.conv(f"enc{i}.conv2", x, w, w, act="relu")
        skips.append(x)
        x = b.add(f"enc{i}.pool", "max_pool2", [x])
        cin = w
    bott = base * 2 ** depth
    x = b.conv("mid.conv1", x, cin, bott, act="relu")
    x = b.conv("mid.conv2", x, bott, widths[-1], act="relu")
    for i in reversed(range(depth)):
        w = widths[i]
        out = widths[i - 1] if i > 0 else w
        x = b.add(f"dec{i}.up", "bilinear_up2", [x])
        x = b.add(f"dec{i}.concat", "concat", [x, skips[i]])
        x = b.conv(f"dec{i}.conv1", x, 2 * w, w, act="relu")
        x = b.conv(f"dec{i}.conv2", x, w, out, act="relu")
    x = b.conv("head", x, base, 12)
    x = b.add("shuffle", "pixel_shuffle", [x], r=2)
    b.conv("out", x, 3, 3, act="sigmoid")
    cfg = {"depth": depth, "base": base, "multiple": 2 ** depth}
    return ModelGraph("unet", b.nodes, b.params, config=cfg)


BUILDERS = {"smallnet": build_smallnet, "csanet": build_csanet, "unet": build_tuned_unet}


def build_model(name: str, seed: int = 0, **cfg) -> ModelGraph:
    try:
        builder = BUILDERS[name]
    except KeyError:
        raise ValueError(f"unknown model {name!r}; expected one of {sorted(BUILDERS)}") from None
    return builder(seed=seed, **cfg)


# ---------------------------------------------------------------- checkpoints

MAGIC = b"MAII"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class UnknownParameterError(CheckpointError):
    pass


def checkpoint_bytes(m: ModelGraph) -> bytes:
    name = m.name.encode("utf-8")
    out = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(name)), name, struct.pack("<I", len(m.params))]
    for pname, t in m.params.items():
        enc = pname.encode("utf-8")
        out.append(struct.pack("<I", len(enc)))
        out.append(enc)
        out.append(struct.pack("<5I", 4, *t.shape))
        out.append(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    return b"".join(out)


def save_checkpoint(m: ModelGraph, path: str | Path) -> int:
    """Write the checkpoint; returns the number of bytes written."""
    data = checkpoint_bytes(m)
    Path(path).write_bytes(data)
    return len(data)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedCheckpointError(f"checkpoint truncated at byte {len(self.buf)} (needed {self.pos + n})")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self, count: int = 1):
        vals = struct.unpack(f"<{count}I", self.take(4 * count))
        return vals if count > 1 else vals[0]


def _infer_config(name: str, shapes: dict[str, tuple[int, ...]]) -> dict[str, int]:
    if name == "smallnet":
        return {}
    if name == "csanet":
        base = shapes["head1.weight"][0]
        blocks = len({k.split(".")[0] for k in shapes if k.startswith("dam")})
        reduction = (2 * base) // shapes["dam0.ca1.weight"][0]
        return {"base": base, "blocks": blocks, "reduction": reduction}
    if name == "unet":
        depth = len({k.split(".")[0] for k in shapes if k.startswith("enc")})
        return {"depth": depth, "base": shapes["enc0.conv1.weight"][0]}
    raise CheckpointError(f"unknown model name {name!r} in checkpoint")


def parse_checkpoint(buf: bytes) -> ModelGraph:
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise BadMagicError("bad magic: not a MAII checkpoint")
    version = r.u32()
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, this build reads {FORMAT_VERSION}")
    name = r.take(r.u32()).decode("utf-8")
    count = r.u32()
    entries: dict[str, np.ndarray] = {}
    for _ in range(count):
        pname = r.take(r.u32()).decode("utf-8")
        rank, *extents = r.u32(5)
        if rank != 4:
            raise CheckpointError(f"parameter {pname} has rank {rank}, expected 4")
        n = int(np.prod(extents))
        entries[pname] = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(extents).astype(np.float32)
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} trailing bytes after the last entry")
    try:
        cfg = _infer_config(name, {k: v.shape for k, v in entries.items()})
    except KeyError as exc:
        raise CheckpointError(f"checkpoint for {name} lacks parameter {exc}") from None
    model = build_model(name, seed=0, **cfg)
    for pname, arr in entries.items():
        if pname not in model.params:
            raise UnknownParameterError(f"unknown parameter name {pname!r} for model {name}")
        if model.params[pname].shape != arr.shape:
            raise CheckpointError(f"parameter {pname} has shape {arr.shape}, expected {model.params[pname].shape}")
        model.params[pname] = Tensor(arr, requires_grad=True)
    missing = set(model.params) - set(entries)
    if missing:
        raise CheckpointError(f"checkpoint is missing parameters {sorted(missing)}")
    return model


def load_checkpoint(path: str | Path) -> ModelGraph:
    return parse_checkpoint(Path(path).read_bytes())
