"""Per-layer CPU profiling at Full HD geometry and challenge-style reports.

Timings are desktop numbers from numpy kernels.  They are not comparable to
the APU milliseconds of the challenge leaderboard and the report says so.
"""

from __future__ import annotations

import csv
import io
import os
import platform
import statistics
import time
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_info, threadpool_limits

from . import losses
from .models import ModelGraph, describe_node
from .tensor import ShapeError, no_grad, randn
from .train import evaluate

HD_HEIGHT, HD_WIDTH = 1088, 1920


@dataclass
class LayerTiming:
    index: int
    name: str
    op: str
    median_ms: float
    percent: float


@dataclass
class BenchReport:
    model: str
    height: int
    width: int
    runs: int
    warmup: int
    layers: list[LayerTiming]
    total_ms: float
    param_bytes: int
    hardware: str
    threads: str
    psnr: float | None = None
    ssim: float | None = None
    score: float | None = None
    extra: dict[str, str] = field(default_factory=dict)

    @property
    def layer_sum_ms(self) -> float:
        return sum(layer.median_ms for layer in self.layers)

    def to_text(self) -> str:
        lines = [
            f"model: {self.model}",
            f"input: {self.width}x{self.height} RAW (packed 1x4x{self.height // 2}x{self.width // 2})",
            f"hardware: {self.hardware} (desktop timings, not mobile APU)",
            f"threads: {self.threads}",
            f"runs: {self.runs} after {self.warmup} warmup",
            "",
            f"{'idx':>3}  {'layer':<16} {'op':<28} {'median ms':>10} {'share':>7}",
        ]
        for t in self.layers:
            lines.append(f"{t.index:>3}  {t.name:<16} {t.op:<28} {t.median_ms:>10.3f} {t.percent:>6.1f}%")
        lines += [
            "",
            f"total median ms: {self.total_ms:.3f} (layer sum {self.layer_sum_ms:.3f})",
            f"parameter bytes: {self.param_bytes} ({self.param_bytes / 1024:.2f} KB)",
        ]
        if self.psnr is not None:
            lines.append(f"PSNR: {self.psnr:.3f} dB  SSIM: {self.ssim:.4f}")
        if self.score is not None:
            lines.append(f"runtime: {self.total_ms:.1f} ms  Final Score: {self.score:.2f}")
        return "\n".join(lines)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["index", "layer", "op", "median_ms", "percent"])
        for t in self.layers:
            w.writerow([t.index, t.name, t.op, f"{t.median_ms:.6f}", f"{t.percent:.3f}"])
        w.writerow(["total", "", "", f"{self.total_ms:.6f}", "100.000"])
        return buf.getvalue()


def _thread_config() -> str:
    desc = ", ".join(f"{p.get('internal_api')}={p.get('num_threads')}" for p in threadpool_info())
    return f"{desc or 'no native pools'}; cpus={os.cpu_count()}"


def _hardware() -> str:
    return f"{platform.machine()} {platform.processor() or platform.system()}, numpy {np.__version__}"


def profile(model: ModelGraph, height: int = HD_HEIGHT, width: int = HD_WIDTH,
            runs: int = 10, warmup: int = 3, seed: int = 0, threads: int | None = None) -> BenchReport:
    """Median per-layer and end-to-end forward times on a random packed input.

    ``threads`` caps the BLAS/OpenMP pools for the duration of the run; the
    effective pool sizes are recorded in the report either way.
    """
    if runs < 5 or warmup < 2:
        raise ValueError(f"need runs >= 5 and warmup >= 2, got runs={runs}, warmup={warmup}")
    if height % 2 or width % 2:
        raise ShapeError(f"geometry {width}x{height} must be even")
    m = model.min_multiple
    if (height // 2) % m or (width // 2) % m:
        raise ShapeError(f"{model.name} needs RAW extents divisible by {2 * m}, got {width}x{height}")
    x = randn((1, 4, height // 2, width // 2), seed)
    x.data[...] = np.abs(x.data) * 0.25  # plausible normalized RAW range

    per_layer: list[list[float]] = [[] for _ in model.nodes]
    totals: list[float] = []

    def timed(idx, node, fn):
        t0 = time.perf_counter()
        out = fn()
        per_layer[idx].append((time.perf_counter() - t0) * 1e3)
        return out

    with threadpool_limits(limits=threads), no_grad():
        pinned = _thread_config()
        for i in range(warmup + runs):
            t0 = time.perf_counter()
            model.forward(x, trace=timed)
            elapsed = (time.perf_counter() - t0) * 1e3
            if i >= warmup:
                totals.append(elapsed)
    total = statistics.median(totals)
    layers = []
    for idx, node in enumerate(model.nodes):
        med = statistics.median(per_layer[idx][warmup:])
        layers.append(LayerTiming(idx, node.name, describe_node(node), med, 100.0 * med / total))
    return BenchReport(
        model=model.name, height=height, width=width, runs=runs, warmup=warmup,
        layers=layers, total_ms=total, param_bytes=model.param_bytes(),
        hardware=_hardware(), threads=pinned,
    )


def score_report(model: ModelGraph, val_manifest, report: BenchReport) -> BenchReport:
    """Fill PSNR/SSIM from ``val_manifest`` and the MAI score from the report runtime."""
    if not report.total_ms > 0:
        raise ValueError("report has no positive total runtime")
    report.psnr, report.ssim = evaluate(model, val_manifest)
    report.score = losses.mai_score(losses.ScoreInputs(report.psnr, report.total_ms / 1000.0))
    return report
