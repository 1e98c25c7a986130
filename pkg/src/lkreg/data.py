"""Registration pairs on disk and the procedural synthetic dataset.

A dataset directory holds ``dataset.txt`` (extents, vocabulary, pair ids)
and one sub-directory per pair with tns files:
``fixed``, ``moving`` ([1, 1, *S]), optional ``fixed_labels``,
``moving_labels`` ([1, 1, *S]) and ``gt_disp`` ([1, D, *S]).
The ground-truth field maps fixed coordinates into the moving image,
i.e. warp(moving, gt_disp) approximates fixed.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .errors import ConfigError, DataError, ShapeError
from .io import read_tns, write_tns
from .tensor import Tensor, no_grad
from .warp import exp_velocity, warp, warp_nearest_array

SYNTH_VOCAB = (1, 2, 3, 4, 5)


@dataclass
class RegistrationPair:
    fixed: np.ndarray
    moving: np.ndarray
    fixed_labels: Optional[np.ndarray] = None
    moving_labels: Optional[np.ndarray] = None
    pair_id: str = ""
    gt_disp: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.fixed.shape != self.moving.shape:
            raise ShapeError(f"pair {self.pair_id}: fixed {self.fixed.shape} vs moving {self.moving.shape}")
        for lab in (self.fixed_labels, self.moving_labels):
            if lab is not None and lab.shape != self.fixed.shape:
                raise ShapeError(f"pair {self.pair_id}: label map {lab.shape} vs image {self.fixed.shape}")

    @property
    def extents(self) -> Tuple[int, ...]:
        return tuple(self.fixed.shape[2:])

    def stacked(self, dtype=np.float32) -> np.ndarray:
        """Network input [1, 2, *S], fixed first."""
        return np.concatenate([self.fixed, self.moving], axis=1).astype(dtype)


def normalize_minmax(img: np.ndarray) -> np.ndarray:
    lo, hi = float(img.min()), float(img.max())
    if hi - lo <= 0:
        return np.zeros_like(img)
    return (img - lo) / (hi - lo)


def _as_volume(arr: np.ndarray, dims: Optional[int] = None) -> np.ndarray:
    """Accept [*S], [1, *S] or [1, 1, *S] and return [1, 1, *S]."""
    arr = np.asarray(arr)
    if dims is not None:
        while arr.ndim < dims + 2:
            arr = arr[None]
    return arr


# -- synthetic generation ---------------------------------------------------------
def _grid(extents):
    axes = [np.linspace(-1.0, 1.0, n) for n in extents]
    return np.meshgrid(*axes, indexing="ij")


def _phantom(rng: np.random.Generator, extents: Sequence[int]):
    """Smoothed intensity image and label map with 5 nested/blob structures."""
    X = _grid(extents)
    D = len(extents)
    labels = np.zeros(tuple(extents), dtype=np.int64)

    def ellipse(center, radii):
        return sum(((x - c) / r) ** 2 for x, c, r in zip(X, center, radii))

    c0 = rng.uniform(-0.08, 0.08, D)
    r0 = rng.uniform(0.72, 0.86, D)
    outer = ellipse(c0, r0)
    labels[outer <= 1.0] = 1
    labels[outer <= 0.55] = 2          # ring boundary
    labels[outer <= 0.30] = 3          # core
    for lab in (4, 5):
        c = c0 + rng.uniform(-0.35, 0.35, D) * r0
        r = rng.uniform(0.13, 0.22, D)
        labels[(ellipse(c, r) <= 1.0) & (outer <= 0.9)] = lab

    levels = np.array([0.05, 0.55, 0.85, 0.35, 1.0, 0.7])
    levels[1:] += rng.uniform(-0.05, 0.05, 5)
    img = levels[labels]
    texture = ndimage.gaussian_filter(rng.standard_normal(tuple(extents)), sigma=2.0)
    texture /= np.abs(texture).max() + 1e-12
    img = img + 0.12 * texture
    img = ndimage.gaussian_filter(img, sigma=1.0)
    return normalize_minmax(img), labels


def random_velocity(rng: np.random.Generator, extents: Sequence[int], max_disp: float,
                    smooth: Optional[float] = None) -> np.ndarray:
    """Smooth random velocity [1, D, *S] whose largest component magnitude is ``max_disp``."""
    D = len(extents)
    sigma = smooth if smooth is not None else min(extents) / 8.0
    v = np.stack([ndimage.gaussian_filter(rng.standard_normal(tuple(extents)), sigma, mode="reflect")
                  for _ in range(D)])
    peak = np.abs(v).max()
    if max_disp == 0 or peak == 0:
        return np.zeros((1, D) + tuple(extents))
    return (v * (max_disp / peak))[None]


def synth_pair(seed: int, extents: Sequence[int], max_disp: float, steps: int = 7,
               pair_id: str = "") -> RegistrationPair:
    rng = np.random.default_rng(seed)
    img, labels = _phantom(rng, extents)
    v = random_velocity(rng, extents, max_disp)
    fixed = img[None, None]
    fixed_labels = labels[None, None].astype(np.float64)
    with no_grad():
        fwd = exp_velocity(Tensor(v), steps).data
        gt = exp_velocity(Tensor(-v), steps).data
        moving = warp(Tensor(fixed), Tensor(fwd)).data
    moving_labels = warp_nearest_array(fixed_labels, fwd)
    return RegistrationPair(fixed.astype(np.float32), moving.astype(np.float32),
                            fixed_labels.astype(np.float32), moving_labels.astype(np.float32),
                            pair_id, gt.astype(np.float32))


def synth_generate(seed: int, count: int, extents: Sequence[int], max_disp: float,
                   out: Optional[Path] = None) -> List[RegistrationPair]:
    """Procedural pairs: moving = fixed warped by Exp(v), with the inverse field as ground truth.

    Pair i uses an independent child seed of ``seed``, so the dataset is a
    pure function of (seed, count, extents, max_disp).
    """
    extents = tuple(int(e) for e in extents)
    if len(extents) not in (2, 3):
        raise ConfigError(f"extents must be 2D or 3D, got {extents}")
    if max_disp < 0 or max_disp > min(extents) / 8:
        raise ConfigError(f"max_disp must be in [0, min(extent)/8 = {min(extents) / 8}], got {max_disp}")
    if count < 1:
        raise ConfigError("count must be >= 1")
    children = np.random.SeedSequence(seed).generate_state(count)
    pairs = []
    from .metrics import dice

    for i, child in enumerate(children):
        p = synth_pair(int(child), extents, max_disp, pair_id=f"pair_{i:04d}")
        if max_disp >= 2:
            _, d = dice(p.moving_labels, p.fixed_labels, SYNTH_VOCAB)
            if not d < 1.0:
                raise RuntimeError(f"{p.pair_id}: generated deformation left labels unchanged")
        pairs.append(p)
    if out is not None:
        save_dataset(out, pairs, SYNTH_VOCAB)
    return pairs


# -- dataset directories ----------------------------------------------------------
_FILES = ("fixed", "moving", "fixed_labels", "moving_labels", "gt_disp")


def save_dataset(directory, pairs: Sequence[RegistrationPair], vocabulary: Sequence[int]) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    ids = []
    for p in pairs:
        pd = d / p.pair_id
        pd.mkdir(exist_ok=True)
        for name in _FILES:
            arr = getattr(p, name)
            if arr is not None:
                write_tns(pd / f"{name}.tns", arr)
        ids.append(p.pair_id)
    meta = [
        "extents=" + "x".join(str(e) for e in pairs[0].extents),
        "vocabulary=" + ",".join(str(v) for v in vocabulary),
        "pairs=" + ",".join(ids),
    ]
    (d / "dataset.txt").write_text("\n".join(meta) + "\n")
    return d


def _read_meta(d: Path) -> dict:
    f = d / "dataset.txt"
    if not f.is_file():
        raise DataError(f"{d}: missing dataset.txt")
    meta = {}
    for line in f.read_text().splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            meta[k.strip()] = v.strip()
    for key in ("vocabulary", "pairs"):
        if key not in meta:
            raise DataError(f"{f}: missing '{key}' entry")
    return meta


def load_dataset(directory) -> Tuple[List[RegistrationPair], List[int]]:
    d = Path(directory)
    meta = _read_meta(d)
    vocab = [int(v) for v in meta["vocabulary"].split(",") if v]
    pairs = []
    for pid in [p for p in meta["pairs"].split(",") if p]:
        pd = d / pid
        arrays = {}
        for name in _FILES:
            f = pd / f"{name}.tns"
            if f.is_file():
                arrays[name] = read_tns(f)
        if "fixed" not in arrays or "moving" not in arrays:
            raise DataError(f"{pd}: pair needs fixed.tns and moving.tns")
        pairs.append(RegistrationPair(pair_id=pid, **arrays))
    if not pairs:
        raise DataError(f"{d}: dataset has no pairs")
    return pairs, vocab


def load_volume(path, dims: Optional[int] = None) -> np.ndarray:
    return _as_volume(read_tns(path), dims)
