"""Command-line entry point: ``edgenext <subcommand> [flags]``."""
from __future__ import annotations

import argparse
import statistics
import sys
import time
from pathlib import Path

import numpy as np

from . import analysis, checks
from . import autograd as ag
from . import serialization as io
from .model import ABLATIONS, ConfigError, ModelConfig, ablation, build_model, model_forward, preset, tiny
from .tensor import softmax
from .training import SyntheticDataset, train_loop

DTYPES = {"f32": np.float32, "f64": np.float64}
VARIANTS = ("XXS", "XS", "S", "B", "tiny")


class CLIError(Exception):
    pass


def _resolve_config(args, default: str = "S") -> ModelConfig:
    """Preset (or ``default``) < config file < explicit flags."""
    if args.config:
        cfg = io.load_config(args.config)
        if args.variant:
            raise CLIError("--config and --variant are mutually exclusive")
    else:
        name = args.variant or default
        cfg = tiny() if name.lower() == "tiny" else preset(name)
    if getattr(args, "ablation", None):
        cfg = ablation(args.ablation, cfg)
    changes = {}
    if getattr(args, "res", None):
        changes["resolution"] = args.res
    for flag in ("activation", "norm", "num_classes"):
        value = getattr(args, flag, None)
        if value is not None:
            changes[flag] = value
    return cfg.replace(**changes).validate() if changes else cfg


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_summarize(args) -> int:
    cfg = _resolve_config(args)
    rep = analysis.cost_report(cfg, args.res)
    _emit(rep.to_csv() if args.csv else analysis.summarize(cfg, args.res), args.out)
    return 0


def cmd_infer(args) -> int:
    cfg = _resolve_config(args)
    dtype = DTYPES[args.dtype]
    if args.weights:
        weights = {k: v.astype(dtype) for k, v in io.load_weights(args.weights, cfg).items()}
    else:
        weights = build_model(cfg, args.seed, dtype)
    img = io.preprocess(io.read_image(args.image), cfg.resolution)
    logits = model_forward(cfg, weights, img.astype(dtype))
    probs = softmax(logits.astype(np.float64), axis=-1)[0]
    order = np.argsort(-probs, kind="stable")
    k = len(order) if args.all else min(args.topk, len(order))
    lines = ["rank,class,probability"]
    lines += [f"{r + 1},{int(c)},{probs[c]:.9f}" for r, c in enumerate(order[:k])]
    _emit("\n".join(lines) + "\n", args.out)
    return 0


def cmd_gradcheck(args) -> int:
    scopes = checks.SCOPES if args.scope == "all" else (args.scope,)
    ok = True
    lines = []
    for scope in scopes:
        results = checks.run_suite(scope, args.seed, args.coords)
        ok &= all(r.passed for r in results)
        lines.extend(checks.iter_report(scope, results))
        if scope == "op":
            covered = len(ag.OPS) - len(checks.op_coverage(checks.op_cases(args.seed)))
            lines.append(f"# op coverage: {covered}/{len(ag.OPS)} registered adjoints checked")
    lines.append(f"# tolerance={checks.TOLERANCE:g} result={'PASS' if ok else 'FAIL'}")
    _emit("\n".join(lines) + "\n", args.out)
    return 0 if ok else 1


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def cmd_probe_attention(args) -> int:
    rows = analysis.attention_scaling_probe(
        args.channels, args.heads, args.resolutions, timing=args.timing, repeats=args.repeats, seed=args.seed
    )
    _emit(analysis.format_probe(rows, args.channels, args.heads), args.out)
    return 0


def cmd_train_toy(args) -> int:
    cfg = _resolve_config(args, default="tiny")
    if cfg.num_classes != args.classes:
        cfg = cfg.replace(num_classes=args.classes).validate()
    data = SyntheticDataset(args.seed, args.classes, args.samples, args.image_size)
    log = (lambda msg: print(msg, file=sys.stderr)) if args.verbose else None
    result = train_loop(
        cfg, data, args.steps, args.seed, batch_size=args.batch_size, lr=args.lr,
        eval_every=args.eval_every, target_accuracy=args.target_accuracy, log=log,
    )
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        io.save_weights(result.weights, out / "weights.edgw")
        (out / "curve.csv").write_text(result.curve_csv())
        io.save_config(cfg, out / "config.json")
    if args.csv:
        sys.stdout.write(result.curve_csv())
    else:
        step, loss, acc = result.curve[-1]
        print(f"steps={step} loss={loss:.6f} accuracy={acc:.4f}")
    return 0


def cmd_bench(args) -> int:
    if args.iters < 1:
        raise CLIError("--iters must be >= 1")
    cfg = _resolve_config(args)
    dtype = DTYPES[args.dtype]
    weights = build_model(cfg, args.seed, dtype)
    res = cfg.resolution
    x = np.random.default_rng(args.seed).standard_normal((args.batch, res, res, 3)).astype(dtype)
    for _ in range(args.warmup):
        model_forward(cfg, weights, x)
    samples = []
    for _ in range(args.iters):
        t0 = time.perf_counter()
        model_forward(cfg, weights, x)
        samples.append(time.perf_counter() - t0)
    p95 = float(np.percentile(samples, 95))
    print(f"# model={cfg.name or 'custom'} res={res} batch={args.batch} dtype={args.dtype} "
          f"warmup={args.warmup} samples={len(samples)}")
    print("mean_s,median_s,p95_s,min_s,max_s")
    print(f"{statistics.fmean(samples):.6f},{statistics.median(samples):.6f},{p95:.6f},"
          f"{min(samples):.6f},{max(samples):.6f}")
    return 0


def _add_config_flags(p, res_help="input resolution"):
    p.add_argument("--config", metavar="PATH", help="JSON model config file")
    p.add_argument("--variant", metavar="NAME", help=f"preset: {', '.join(VARIANTS)}")
    p.add_argument("--ablation", choices=sorted(ABLATIONS), help="apply a named ablation layout")
    p.add_argument("--res", type=int, help=res_help)
    p.add_argument("--activation", choices=("gelu", "hard_swish"))
    p.add_argument("--norm", choices=("layer", "batch"))
    p.add_argument("--num-classes", type=int, dest="num_classes")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="edgenext", description="EdgeNeXt reference toolkit")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("summarize", help="per-layer parameter and MAdds table")
    _add_config_flags(p)
    p.add_argument("--csv", action="store_true", help="emit CSV instead of a table")
    p.add_argument("--out", metavar="PATH")
    p.set_defaults(func=cmd_summarize)

    p = sub.add_parser("infer", help="top-k classification of one image")
    _add_config_flags(p)
    p.add_argument("--weights", metavar="PATH", help="weight file (random init from --seed if omitted)")
    p.add_argument("--image", metavar="PATH", required=True, help="PPM (P6) image or tensor file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dtype", choices=DTYPES, default="f32")
    p.add_argument("--topk", type=int, default=5)
    p.add_argument("--all", action="store_true", help="print every class")
    p.add_argument("--out", metavar="PATH")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--scope", choices=(*checks.SCOPES, "all"), default="all")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--coords", type=int, default=100, help="coordinates sampled per case")
    p.add_argument("--out", metavar="PATH")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("probe-attention", help="channel vs spatial attention cost scaling")
    p.add_argument("--channels", type=int, default=128)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--resolutions", type=_int_list, default=[32, 64, 128], help="comma-separated sides")
    p.add_argument("--timing", action="store_true", help="also measure wall-clock time")
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", metavar="PATH")
    p.set_defaults(func=cmd_probe_attention)

    p = sub.add_parser("train-toy", help="train on the synthetic shapes task")
    _add_config_flags(p)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--samples", type=int, default=200)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--image-size", type=int, default=64, dest="image_size")
    p.add_argument("--batch-size", type=int, default=50, dest="batch_size")
    p.add_argument("--lr", type=float, default=6e-3)
    p.add_argument("--eval-every", type=int, default=50, dest="eval_every")
    p.add_argument("--target-accuracy", type=float, default=1.0, dest="target_accuracy",
                   help="stop once train accuracy reaches this (default 1.0)")
    p.add_argument("--out", metavar="DIR", help="write weights.edgw, curve.csv and config.json here")
    p.add_argument("--csv", action="store_true", help="print the curve as CSV")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("bench", help="wall-clock forward-pass timing")
    _add_config_flags(p)
    p.add_argument("--iters", type=int, default=10)
    p.add_argument("--warmup", type=int, default=1)
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dtype", choices=DTYPES, default="f32")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CLIError, ConfigError, ValueError, OSError) as e:
        print(f"edgenext {args.command}: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
