"""Desk-scale experiments shared by scripts/ and the acceptance suite."""
from __future__ import annotations

import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .data import SYNTH_VOCAB, RegistrationPair, synth_generate
from .losses import LossConfig
from .metrics import dice, infer_displacement
from .network import NetConfig
from .train import TrainConfig, train
from .warp import warp_nearest_array

SMOOTH_BLOCK = 100


def smoothed(values: Sequence[float], block: int = SMOOTH_BLOCK) -> np.ndarray:
    """Means over consecutive non-overlapping blocks (a trailing partial block is dropped)."""
    v = np.asarray(values, dtype=np.float64)
    n = len(v) // block
    return v[: n * block].reshape(n, block).mean(axis=1)


def endpoint_error(pred: np.ndarray, truth: np.ndarray) -> float:
    """Mean Euclidean length of pred - truth over voxels."""
    return float(np.sqrt(((pred.astype(np.float64) - truth) ** 2).sum(axis=1)).mean())


@dataclass
class RunSummary:
    variant: str
    seed: int
    losses: List[float]
    epe: float
    epe_baseline: float
    dice: float
    dice_baseline: float
    seconds: float

    @property
    def smoothed_monotone(self) -> bool:
        s = smoothed(self.losses)
        return bool(np.all(np.diff(s) <= 0))

    @property
    def epe_reduction(self) -> float:
        return 1.0 - self.epe / self.epe_baseline


def desk_net(variant: str, C: int = 8) -> NetConfig:
    return NetConfig(dims=2, C=C, variant=variant, k=5 if variant == "lku_net" else 3)


def run_pair(pair: RegistrationPair, net_cfg: NetConfig, seed: int, iterations: int,
             out: Path, lam: float = 1.0, lr: float = 1e-4) -> RunSummary:
    cfg = TrainConfig(net=net_cfg, loss=LossConfig(lam=lam), lr=lr, iterations=iterations, seed=seed)
    t0 = time.perf_counter()
    res = train(cfg, [pair], SYNTH_VOCAB, out=out, sequential=True)
    secs = time.perf_counter() - t0
    disp = infer_displacement(res.network, pair.fixed, pair.moving)
    wl = warp_nearest_array(pair.moving_labels, disp)
    return RunSummary(
        variant=net_cfg.variant, seed=seed, losses=[r["total"] for r in res.log],
        epe=endpoint_error(disp, pair.gt_disp), epe_baseline=endpoint_error(np.zeros_like(pair.gt_disp), pair.gt_disp),
        dice=dice(wl, pair.fixed_labels, SYNTH_VOCAB)[1],
        dice_baseline=dice(pair.moving_labels, pair.fixed_labels, SYNTH_VOCAB)[1],
        seconds=secs,
    )


def desk_scale(seeds: Sequence[int] = range(5), iterations: int = 2000, extents=(96, 96),
               max_disp: float = 4.0, out: Path = Path("desk_runs"), variants=("lku_net", "vanilla_unet"),
               progress=None) -> Dict[int, Dict[str, RunSummary]]:
    """Train each variant on one synthetic pair per seed and score it against the ground truth."""
    results: Dict[int, Dict[str, RunSummary]] = {}
    for s in seeds:
        pair = synth_generate(s, 1, extents, max_disp)[0]
        results[s] = {}
        for v in variants:
            r = run_pair(pair, desk_net(v), s, iterations, Path(out) / f"seed{s}_{v}")
            results[s][v] = r
            if progress:
                progress(r)
    return results
