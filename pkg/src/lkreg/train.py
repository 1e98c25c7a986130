"""Training loop, registration of single pairs, and dataset evaluation."""
from __future__ import annotations

import configparser
import contextlib
import csv
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .data import RegistrationPair, load_dataset, load_volume
from .errors import ConfigError, NumericalError, ShapeError
from .io import checkpoint_digest, config_hash, load_checkpoint, save_checkpoint, write_tns
from .losses import LossConfig, one_hot, total_loss
from .metrics import MetricsWriter, displacement_statistics, evaluate_pair, infer_displacement, write_quiver
from .network import NetConfig, Network, _parse_value
from .optim import Adam
from .tensor import Tensor, backward, no_grad
from .warp import fold_fraction, warp

log = logging.getLogger(__name__)

LOG_HEADER = ["iter", "total", "ncc", "reg", "dice"]


@dataclass(frozen=True)
class TrainConfig:
    net: NetConfig = field(default_factory=NetConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    lr: float = 1e-4
    batch_size: int = 1
    iterations: int = 1000
    seed: int = 0
    checkpoint_interval: int = 0
    data: str = ""
    out: str = "run"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    dtype: str = "float32"

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 1 or self.iterations < 0 or self.checkpoint_interval < 0:
            raise ConfigError("batch_size >= 1, iterations >= 0 and checkpoint_interval >= 0 required")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("Adam betas must lie in [0, 1)")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.seed < 0 or self.seed >= 2 ** 64:
            raise ConfigError("seed must be an unsigned 64-bit integer")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_text(self) -> str:
        lines = ["[train]"]
        for f in fields(self):
            if f.name not in ("net", "loss"):
                lines.append(f"{f.name} = {getattr(self, f.name)}")
        lines.append("\n[net]")
        lines.append(self.net.to_text().replace("=", " = ").rstrip())
        lines.append("\n[loss]")
        for f in fields(self.loss):
            lines.append(f"{f.name} = {getattr(self.loss, f.name)}")
        return "\n".join(lines) + "\n"


def _section_kwargs(section, cls, skip=()) -> dict:
    types = {f.name: f.type for f in fields(cls)}
    kw = {}
    for key, val in section.items():
        if key in skip:
            continue
        if key not in types:
            raise ConfigError(f"unknown key {key!r} in [{section.name}]")
        kw[key] = _parse_value(val, types[key], key)
    return kw


def parse_train_config(text: str) -> TrainConfig:
    """INI text with optional [train], [net] and [loss] sections."""
    cp = configparser.ConfigParser()
    cp.optionxform = str  # keys are case-sensitive (C vs c)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    unknown = set(cp.sections()) - {"train", "net", "loss"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    net = NetConfig()
    if cp.has_section("net"):
        net = NetConfig.from_text("\n".join(f"{k}={v}" for k, v in cp["net"].items()))
    loss = LossConfig(**_section_kwargs(cp["loss"], LossConfig)) if cp.has_section("loss") else LossConfig()
    kw = _section_kwargs(cp["train"], TrainConfig, skip=("net", "loss")) if cp.has_section("train") else {}
    return TrainConfig(net=net, loss=loss, **kw)


def load_train_config(path) -> TrainConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_train_config(text)


@contextlib.contextmanager
def sequential_mode(enabled: bool = True):
    """Pin BLAS pools to one thread so every reduction has a fixed order."""
    if not enabled:
        yield
        return
    with threadpool_limits(limits=1):
        yield


@dataclass
class TrainResult:
    network: Network
    log: List[Dict[str, float]]
    checkpoint: Optional[Path]
    checkpoints: List[Path] = field(default_factory=list)


def _batch(pairs: Sequence[RegistrationPair], idx: Sequence[int], dtype, vocab, need_labels: bool):
    fixed = np.concatenate([pairs[i].fixed for i in idx]).astype(dtype)
    moving = np.concatenate([pairs[i].moving for i in idx]).astype(dtype)
    fo = mo = None
    if need_labels:
        if any(pairs[i].fixed_labels is None or pairs[i].moving_labels is None for i in idx):
            raise ConfigError("dice_weight > 0 but some pairs have no label maps")
        fo = one_hot(np.concatenate([pairs[i].fixed_labels for i in idx]), vocab, dtype)
        mo = one_hot(np.concatenate([pairs[i].moving_labels for i in idx]), vocab, dtype)
    return fixed, moving, fo, mo


def _write_log(path: Path, rows: List[Dict[str, float]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_HEADER)
        for r in rows:
            w.writerow([r["iter"]] + [repr(float(r[k])) for k in LOG_HEADER[1:]])


def train(cfg: TrainConfig, pairs: Optional[Sequence[RegistrationPair]] = None,
          vocabulary: Sequence[int] = (), out: Optional[Path] = None, sequential: bool = True,
          network: Optional[Network] = None) -> TrainResult:
    """Adam on -NCC + lam * diffusion (+ soft Dice), batch of pairs per step.

    Pairs are visited in a seeded per-epoch permutation. A non-finite loss
    aborts with NumericalError after saving the last good parameters to
    ``out/last_good``.
    """
    if pairs is None:
        if not cfg.data:
            raise ConfigError("no training data given")
        pairs, vocabulary = load_dataset(cfg.data)
    pairs = list(pairs)
    if not pairs:
        raise ConfigError("empty training set")
    out = Path(out if out is not None else cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    dtype = cfg.np_dtype
    net = network if network is not None else Network(cfg.net, seed=cfg.seed, dtype=dtype)
    net.check_input((1, 2) + pairs[0].extents)
    names = [n for n, _ in net.named_parameters()]
    opt = Adam(net.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.adam_eps, names=names)
    rng = np.random.default_rng(cfg.seed)
    need_labels = cfg.loss.dice_weight > 0
    (out / "train.cfg").write_text(cfg.to_text())

    rows: List[Dict[str, float]] = []
    saved: List[Path] = []
    order: List[int] = []
    with sequential_mode(sequential):
        for it in range(1, cfg.iterations + 1):
            idx = []
            while len(idx) < cfg.batch_size:
                if not order:
                    order = list(rng.permutation(len(pairs)))
                idx.append(order.pop(0))
            fixed, moving, fo, mo = _batch(pairs, idx, dtype, vocabulary, need_labels)
            x = Tensor(np.concatenate([fixed, moving], axis=1))
            good = [p.data.copy() for p in opt.params]
            net.zero_grad()
            out_field = net(x)
            loss, parts, _ = total_loss(fixed, moving, out_field, cfg.loss, cfg.net.diffeomorphic,
                                        cfg.net.squaring_steps, fo, mo)
            if not np.isfinite(parts["total"]):
                _restore_and_save(net, opt, good, out / "last_good")
                _write_log(out / "loss_log.csv", rows)
                raise NumericalError(f"non-finite loss at iteration {it}; last good parameters in {out / 'last_good'}")
            backward(loss)
            try:
                opt.step()
            except NumericalError:
                _restore_and_save(net, opt, good, out / "last_good")
                _write_log(out / "loss_log.csv", rows)
                raise
            rows.append({"iter": it, **parts})
            if cfg.checkpoint_interval and it % cfg.checkpoint_interval == 0:
                saved.append(save_checkpoint(out / f"ckpt_{it:06d}", net))
                _write_log(out / "loss_log.csv", rows)
    _write_log(out / "loss_log.csv", rows)
    final = save_checkpoint(out / "final", net)
    return TrainResult(net, rows, final, saved)


def _restore_and_save(net, opt, good, path):
    for p, g in zip(opt.params, good):
        p.data[...] = g
    save_checkpoint(path, net)


def read_loss_log(path) -> List[Dict[str, float]]:
    with open(path) as fh:
        return [{k: (int(v) if k == "iter" else float(v)) for k, v in row.items()} for row in csv.DictReader(fh)]


# -- inference --------------------------------------------------------------------
def register(fixed_path, moving_path, checkpoint, out) -> Dict[str, float]:
    """Register one pair of tns volumes; writes disp.tns and warped.tns into ``out``."""
    net = load_checkpoint(checkpoint)
    dims = net.cfg.dims
    fixed = load_volume(fixed_path, dims)
    moving = load_volume(moving_path, dims)
    if fixed.shape != moving.shape or fixed.ndim != dims + 2 or fixed.shape[:2] != (1, 1):
        raise ShapeError(f"fixed {fixed.shape} and moving {moving.shape} must be matching [1, 1, *S] volumes")
    try:
        net.check_input((1, 2) + fixed.shape[2:])
    except ShapeError as exc:
        raise ConfigError(f"checkpoint does not accept these extents: {exc}") from exc
    t0 = time.perf_counter()
    disp = infer_displacement(net, fixed, moving)
    runtime_ms = (time.perf_counter() - t0) * 1000.0
    with no_grad():
        warped = warp(Tensor(moving.astype(disp.dtype)), Tensor(disp)).data
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    write_tns(out / "disp.tns", disp)
    write_tns(out / "warped.tns", warped)
    return {"fold_pct": fold_fraction(disp), "runtime_ms": runtime_ms, "mean_abs_disp": float(np.abs(disp).mean())}


def evaluate(data, checkpoint, metrics_csv, out=None, sequential: bool = True, workers: int = 2,
             quiver_stride: int = 4):
    """Evaluate every pair of a dataset; rows are appended in dataset order."""
    pairs, vocab = load_dataset(data)
    net = load_checkpoint(checkpoint)
    chash = config_hash(net.cfg.to_text())
    ckid = checkpoint_digest(checkpoint)[:12]

    def one(p):
        return evaluate_pair(p.fixed, p.moving, p.fixed_labels, p.moving_labels, net, vocab,
                             pair_id=p.pair_id, config_hash=chash, checkpoint_id=ckid)

    with sequential_mode(sequential):
        if sequential or workers <= 1:
            results = [one(p) for p in pairs]
        else:
            with ThreadPoolExecutor(max_workers=workers) as ex:
                results = list(ex.map(one, pairs))
    records = [r for r, _ in results]
    with MetricsWriter(metrics_csv, vocab) as w:
        for r in records:
            w.write(r)
    means, table = displacement_statistics([o["disp"] for _, o in results], stride=quiver_stride)
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        write_quiver(out / "quiver.txt", table)
        for (rec, o) in results:
            pd = out / rec.pair_id
            pd.mkdir(exist_ok=True)
            for name, arr in o.items():
                write_tns(pd / f"{name}.tns", arr)
    return records, means
