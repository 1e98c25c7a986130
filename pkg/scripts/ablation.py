"""Ablation harness: train every network config in a directory on the same synthetic pairs.

Each ``*.net`` file (see configs/ablation/ for the A/B/C/D rows) is trained
with identical data, seed and schedule, then scored by mean Dice over the
held-out pairs. Only the comparison structure is reproduced here; absolute
Dice values on real brain data are out of reach at this scale.

    python scripts/ablation.py --configs configs/ablation --rows A1 B6 --iters 300
"""
import argparse
import time
from pathlib import Path

import numpy as np

from lkreg.complexity import count_parameters
from lkreg.data import SYNTH_VOCAB, synth_generate
from lkreg.losses import LossConfig
from lkreg.metrics import dice, infer_displacement
from lkreg.network import load_net_config
from lkreg.train import TrainConfig, train
from lkreg.warp import warp_nearest_array


def score(net, pairs):
    vals = []
    for p in pairs:
        u = infer_displacement(net, p.fixed, p.moving)
        vals.append(dice(warp_nearest_array(p.moving_labels, u), p.fixed_labels, SYNTH_VOCAB)[1])
    return float(np.mean(vals)), float(np.std(vals))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--configs", default="configs/ablation")
    ap.add_argument("--rows", nargs="*", help="subset of config names, e.g. A1 B6")
    ap.add_argument("--iters", type=int, default=300)
    ap.add_argument("--train-pairs", type=int, default=4)
    ap.add_argument("--test-pairs", type=int, default=4)
    ap.add_argument("--extents", type=int, nargs=2, default=[96, 96])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="ablation_runs")
    args = ap.parse_args()

    files = sorted(Path(args.configs).glob("*.net"))
    if args.rows:
        files = [f for f in files if f.stem in args.rows]
    train_pairs = synth_generate(args.seed, args.train_pairs, tuple(args.extents), 4.0)
    test_pairs = synth_generate(args.seed + 1000, args.test_pairs, tuple(args.extents), 4.0)
    base = np.mean([dice(p.moving_labels, p.fixed_labels, SYNTH_VOCAB)[1] for p in test_pairs])
    print(f"unregistered dice {base:.4f}")
    print(f"{'row':<5}{'model':<14}{'k':>4}{'C':>4}{'id':>4}{'1x1':>5}{'params':>10}{'dice':>18}{'time':>8}")
    for f in files:
        cfg = load_net_config(f)
        tc = TrainConfig(net=cfg, loss=LossConfig(lam=1.0), iterations=args.iters, seed=args.seed)
        t0 = time.perf_counter()
        res = train(tc, train_pairs, SYNTH_VOCAB, out=Path(args.out) / f.stem, sequential=True)
        m, s = score(res.network, test_pairs)
        lk = cfg.variant == "lku_net"
        print(f"{f.stem:<5}{cfg.variant:<14}{cfg.k:>4}{cfg.C:>4}{('Y' if cfg.use_identity else 'N') if lk else '-':>4}"
              f"{('Y' if cfg.use_1x1 else 'N') if lk else '-':>5}{count_parameters(cfg):>10}"
              f"{m:>10.4f} ({s:.4f}){time.perf_counter() - t0:>7.0f}s", flush=True)


if __name__ == "__main__":
    main()
