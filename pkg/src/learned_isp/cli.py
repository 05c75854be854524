"""Command-line entry point: ``learned-isp <command> [flags]``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import bench, losses, models, raw, train

log = logging.getLogger("learned_isp")


class UsageError(Exception):
    pass


def _print_config(command: str, items: dict) -> None:
    print(f"[{command}] " + " ".join(f"{k}={v}" for k, v in items.items()), flush=True)


def _loss_spec(text: str) -> losses.LossSpec:
    try:
        return losses.LossSpec.parse(text)
    except ValueError as exc:
        raise UsageError(f"--loss: {exc}") from None


def cmd_generate(args) -> int:
    if args.synth_scenes:
        raw.write_synthetic_scenes(args.src, args.synth_scenes, (args.scene_size, args.scene_size), seed=args.seed)
    read = (args.noise_read, args.noise_read) if args.noise_read is not None else None
    shot = (args.noise_shot, args.noise_shot) if args.noise_shot is not None else None
    _print_config("generate", {
        "src": args.src, "out": args.out, "count": args.count, "patch": args.patch, "seed": args.seed,
        "noise": not args.no_noise, "noise_read": args.noise_read, "noise_shot": args.noise_shot,
    })
    manifest = raw.make_dataset(args.src, args.out, args.count, patch=args.patch, seed=args.seed,
                                noise=not args.no_noise, read_var_range=read, shot_range=shot)
    print(f"manifest: {manifest}")
    return 0


def cmd_train(args) -> int:
    if args.recipe:
        model_name, cfg = train.config_from_recipe(args.recipe)
        if args.model and args.model != model_name:
            raise UsageError(f"--recipe {args.recipe} trains {model_name}, not {args.model}")
    else:
        if not args.model:
            raise UsageError("train needs --model or --recipe")
        model_name, cfg = args.model, train.TrainConfig()
    overrides = {}
    if args.steps is not None:
        overrides["total_steps"] = args.steps
    if args.batch is not None:
        overrides["batch_size"] = args.batch
    if args.lr is not None:
        overrides["lr_initial"] = args.lr
        if args.lr_final is None and not args.recipe:
            overrides["lr_final"] = args.lr
    if args.lr_final is not None:
        overrides["lr_final"] = args.lr_final
    if args.schedule is not None:
        overrides["lr_schedule"] = args.schedule
    if args.loss is not None:
        overrides["loss"] = _loss_spec(args.loss)
    if args.flip:
        overrides["augment_flip"] = True
    overrides["seed"] = args.seed
    overrides["validate_every"] = args.validate_every
    overrides["checkpoint_every"] = args.checkpoint_every
    try:
        cfg = replace(cfg, **overrides)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    _print_config("train", {"model": model_name, "data": args.data, "out": args.out, **cfg.describe()})

    model = models.build_model(model_name, seed=args.seed)
    state = None
    if args.resume:
        model, state = train.resume(args.resume, Path(args.resume).with_suffix(".adam.npz"))
    result = train.train(model, args.data, cfg, state=state, val_data=args.val,
                         checkpoint_dir=args.checkpoint_dir)
    models.save_checkpoint(result.model, args.out)
    result.state.save(Path(args.out).with_suffix(".adam.npz"))
    if args.log:
        train.write_step_log(args.log, result.log)
    if result.log:
        print(f"final loss: {result.log[-1].loss:.6f} after {len(result.log)} steps")
    print(f"checkpoint: {args.out}")
    return 0


def cmd_eval(args) -> int:
    _print_config("eval", {"model": args.model, "data": args.data})
    predictor = train.bilinear_predictor if args.model == "bilinear" else models.load_checkpoint(args.model)
    p, s = train.evaluate(predictor, args.data)
    print(f"PSNR: {p:.4f} dB  SSIM: {s:.4f}")
    return 0


def _geometry(args) -> tuple[int, int]:
    if args.hd:
        return bench.HD_HEIGHT, bench.HD_WIDTH
    return args.height, args.width


def cmd_bench(args) -> int:
    h, w = _geometry(args)
    _print_config("bench", {"model": args.model, "height": h, "width": w, "runs": args.runs,
                            "warmup": args.warmup, "threads": args.threads})
    model = models.load_checkpoint(args.model)
    before = model.param_hash()
    report = bench.profile(model, h, w, runs=args.runs, warmup=args.warmup, threads=args.threads)
    if model.param_hash() != before:  # pragma: no cover - profiling is read-only
        raise RuntimeError("profiling modified model parameters")
    print(report.to_text())
    if args.csv:
        Path(args.csv).write_text(report.to_csv(), encoding="utf-8")
    return 0


def cmd_score(args) -> int:
    h, w = _geometry(args)
    _print_config("score", {"model": args.model, "data": args.data, "height": h, "width": w,
                            "runs": args.runs, "warmup": args.warmup, "threads": args.threads})
    model = models.load_checkpoint(args.model)
    report = bench.profile(model, h, w, runs=args.runs, warmup=args.warmup, threads=args.threads)
    bench.score_report(model, args.data, report)
    print(f"PSNR: {report.psnr:.4f} dB  SSIM: {report.ssim:.4f}  runtime: {report.total_ms:.1f} ms  "
          f"Final Score: {report.score:.4f}")
    return 0


def cmd_infer(args) -> int:
    _print_config("infer", {"model": args.model, "raw": args.raw, "out": args.out})
    model = models.load_checkpoint(args.model)
    bayer = raw.read_raw_png(args.raw)
    rgb = model.predict(raw.pack_bayer(bayer))
    raw.write_rgb_png(args.out, raw.tensor_to_rgb8(rgb))
    print(f"wrote {args.out} ({bayer.width}x{bayer.height})")
    return 0


def cmd_info(args) -> int:
    _print_config("info", {"model": args.model})
    model = models.load_checkpoint(args.model)
    print(f"model: {model.name}")
    if model.config:
        print("config: " + " ".join(f"{k}={v}" for k, v in model.config.items()))
    print(f"{'idx':>3}  {'layer':<16} {'op':<28} {'params':>8}")
    for idx, name, op, n in model.layer_rows():
        print(f"{idx:>3}  {name:<16} {op:<28} {n:>8}")
    print(f"parameters: {model.num_params()}")
    print(f"parameter bytes: {model.param_bytes()} ({model.param_bytes() / 1024:.2f} KB)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="learned-isp", description="Train, evaluate and benchmark learned RAW-to-RGB ISP networks.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="build a synthetic RAW/RGB patch dataset")
    g.add_argument("--src", required=True, help="directory of source sRGB images")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--patch", type=int, default=256)
    g.add_argument("--noise-read", type=float, help="fixed read-noise variance")
    g.add_argument("--noise-shot", type=float, help="fixed shot-noise coefficient")
    g.add_argument("--no-noise", action="store_true")
    g.add_argument("--synth-scenes", type=int, default=0, metavar="N",
                   help="first render N procedural scenes into --src")
    g.add_argument("--scene-size", type=int, default=512)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--model", choices=sorted(models.BUILDERS))
    t.add_argument("--recipe", choices=sorted(train.RECIPES))
    t.add_argument("--data", required=True, help="training manifest")
    t.add_argument("--val", help="validation manifest (best-PSNR weights are kept)")
    t.add_argument("--steps", type=int)
    t.add_argument("--batch", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--lr-final", type=float)
    t.add_argument("--schedule", choices=train.SCHEDULES)
    t.add_argument("--loss", help="comma list kind:weight, kinds: " + ",".join(losses.LOSS_KINDS))
    t.add_argument("--flip", action="store_true", help="random horizontal flips")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True, help="output checkpoint path")
    t.add_argument("--log", help="step log CSV path")
    t.add_argument("--resume", help="checkpoint to resume from (with its .adam.npz)")
    t.add_argument("--checkpoint-dir")
    t.add_argument("--checkpoint-every", type=int, default=0)
    t.add_argument("--validate-every", type=int, default=0)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="mean PSNR/SSIM on a manifest")
    e.add_argument("--model", required=True, help="checkpoint, or 'bilinear' for the fixed baseline")
    e.add_argument("--data", required=True)
    e.set_defaults(func=cmd_eval)

    for name, func, helptext in (("bench", cmd_bench, "per-layer runtime profile"),
                                 ("score", cmd_score, "runtime + fidelity + challenge score")):
        b = sub.add_parser(name, help=helptext)
        b.add_argument("--model", required=True)
        if name == "score":
            b.add_argument("--data", required=True)
        b.add_argument("--hd", action="store_true", help="Full HD 1920x1088 input")
        b.add_argument("--height", type=int, default=bench.HD_HEIGHT if name == "score" else 256)
        b.add_argument("--width", type=int, default=bench.HD_WIDTH if name == "score" else 256)
        b.add_argument("--runs", type=int, default=10)
        b.add_argument("--warmup", type=int, default=3)
        b.add_argument("--threads", type=int, help="cap BLAS threads")
        if name == "bench":
            b.add_argument("--csv", help="also write the report as CSV")
        b.set_defaults(func=func)

    i = sub.add_parser("infer", help="run a model on one RAW PNG")
    i.add_argument("--model", required=True)
    i.add_argument("--raw", required=True)
    i.add_argument("--out", required=True)
    i.set_defaults(func=cmd_infer)

    n = sub.add_parser("info", help="layer table and parameter count")
    n.add_argument("--model", required=True)
    n.set_defaults(func=cmd_info)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"{parser.prog}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to exit code 1
        log.debug("failure", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
