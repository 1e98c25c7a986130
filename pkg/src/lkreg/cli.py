"""Command-line entry point: synth, train, register, evaluate, analyze."""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

import numpy as np

from .errors import ConfigError, DataError, NumericalError, ShapeError, UsageError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("lkreg")


def parse_extents(text: str):
    try:
        ext = tuple(int(p) for p in text.lower().split("x"))
    except ValueError:
        raise ConfigError(f"extents must look like 160x192x224, got {text!r}") from None
    if len(ext) not in (2, 3) or any(e <= 0 for e in ext):
        raise ConfigError(f"extents must be 2 or 3 positive integers, got {text!r}")
    return ext


def _shared(p: argparse.ArgumentParser):
    p.add_argument("--config", help="training config (INI with [train]/[net]/[loss])")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--sequential", action="store_true", help="single-threaded, bit-reproducible mode")
    p.add_argument("--out", default=None, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lkreg", description="Large-kernel U-Net deformable registration")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    _shared(s)
    s.add_argument("--count", type=int, default=4)
    s.add_argument("--extents", default="96x96")
    s.add_argument("--max-disp", type=float, default=4.0)

    t = sub.add_parser("train", help="train a network")
    _shared(t)
    t.add_argument("--data", default=None)
    t.add_argument("--iters", type=int, default=None)
    t.add_argument("--checkpoint-every", type=int, default=None)

    r = sub.add_parser("register", help="register one pair with a checkpoint")
    _shared(r)
    r.add_argument("--fixed", required=True)
    r.add_argument("--moving", required=True)
    r.add_argument("--checkpoint", required=True)

    e = sub.add_parser("evaluate", help="evaluate a checkpoint on a dataset")
    _shared(e)
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--metrics-csv", required=True)
    e.add_argument("--quiver-stride", type=int, default=4)

    a = sub.add_parser("analyze", help="parameter / mult-add / receptive-field report")
    _shared(a)
    a.add_argument("--net-config", required=True)
    a.add_argument("--extents", default="160x192x224")
    return ap


def _cmd_synth(args) -> int:
    from .data import synth_generate

    out = Path(args.out or "synth_data")
    pairs = synth_generate(args.seed or 0, args.count, parse_extents(args.extents), args.max_disp, out=out)
    print(f"wrote {len(pairs)} pairs to {out}")
    return EXIT_OK


def _cmd_train(args) -> int:
    from .train import TrainConfig, load_train_config, train

    cfg = load_train_config(args.config) if args.config else TrainConfig()
    upd = {}
    if args.seed is not None:
        upd["seed"] = args.seed
    if args.iters is not None:
        upd["iterations"] = args.iters
    if args.checkpoint_every is not None:
        upd["checkpoint_interval"] = args.checkpoint_every
    if args.data is not None:
        upd["data"] = args.data
    if args.out is not None:
        upd["out"] = args.out
    cfg = replace(cfg, **upd)
    res = train(cfg, sequential=args.sequential)
    last = res.log[-1]["total"] if res.log else float("nan")
    print(f"trained {len(res.log)} iterations, final loss {last:.6f}, checkpoint {res.checkpoint}")
    return EXIT_OK


def _cmd_register(args) -> int:
    from .train import register, sequential_mode

    with sequential_mode(args.sequential):
        info = register(args.fixed, args.moving, args.checkpoint, args.out or "registered")
    print(f"fold_fraction {info['fold_pct']:.6f} %")
    print(f"runtime {info['runtime_ms']:.1f} ms")
    return EXIT_OK


def _cmd_evaluate(args) -> int:
    from .train import evaluate

    records, means = evaluate(args.data, args.checkpoint, args.metrics_csv, out=args.out,
                              sequential=args.sequential, quiver_stride=args.quiver_stride)
    dm = [r["dice_mean"] for r in records]
    print(f"evaluated {len(records)} pairs, mean Dice {np.nanmean(dm):.4f}")
    print("mean |u| per axis: " + ", ".join(f"{m:.3f}" for m in means))
    return EXIT_OK


def _cmd_analyze(args) -> int:
    from .complexity import analyze
    from .network import load_net_config

    try:
        cfg = load_net_config(args.net_config)
    except OSError as exc:
        raise ConfigError(f"cannot read net config: {exc}") from exc
    ext = parse_extents(args.extents)
    if len(ext) != cfg.dims:
        raise ConfigError(f"extents {ext} do not match dims={cfg.dims}")
    rep = analyze(cfg, ext)
    print(rep.summary())
    print(f"mult-adds (raw): {rep.mult_adds}")
    print(f"receptive field: {'x'.join(str(r) for r in rep.receptive_field)}")
    print(rep.table())
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "complexity.csv"
    csv_path.write_text(rep.to_csv())
    print(f"per-layer table written to {csv_path}")
    return EXIT_OK


_COMMANDS = {"synth": _cmd_synth, "train": _cmd_train, "register": _cmd_register,
             "evaluate": _cmd_evaluate, "analyze": _cmd_analyze}


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, UsageError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ShapeError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
