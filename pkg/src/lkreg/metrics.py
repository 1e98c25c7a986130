"""Non-differentiable evaluation: Dice, HD95, field statistics, metric records."""
from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import ShapeError
from .tensor import Tensor, no_grad
from .warp import exp_velocity, fold_fraction, sd_log_jacobian, warp, warp_nearest_array


def _as_int_map(labels) -> np.ndarray:
    arr = labels.data if isinstance(labels, Tensor) else np.asarray(labels)
    return np.rint(arr).astype(np.int64)


def _check_vocab(lab: np.ndarray, vocabulary: Sequence[int], which: str):
    present = set(np.unique(lab).tolist()) - {0}
    extra = present - set(int(v) for v in vocabulary)
    if extra:
        raise ShapeError(f"{which} labels contain values outside the vocabulary: {sorted(extra)}")


def dice(warped_labels, fixed_labels, vocabulary: Sequence[int]) -> Tuple[Dict[int, float], float]:
    """Per-label Dice and their mean.

    A label absent from both maps is excluded (reported as NaN); present in
    only one map it scores 0.
    """
    a, b = _as_int_map(warped_labels), _as_int_map(fixed_labels)
    if a.shape != b.shape:
        raise ShapeError(f"label maps differ in shape: {a.shape} vs {b.shape}")
    _check_vocab(a, vocabulary, "warped")
    _check_vocab(b, vocabulary, "fixed")
    per = {}
    for lab in vocabulary:
        ma, mb = a == lab, b == lab
        na, nb = int(ma.sum()), int(mb.sum())
        if na + nb == 0:
            per[int(lab)] = float("nan")
        else:
            per[int(lab)] = 2.0 * int(np.count_nonzero(ma & mb)) / (na + nb)
    valid = [v for v in per.values() if not math.isnan(v)]
    return per, (float(np.mean(valid)) if valid else float("nan"))


def boundary_voxels(mask: np.ndarray) -> np.ndarray:
    """Coordinates of foreground voxels with a background face-neighbour.

    Voxels outside the grid count as background.
    """
    mask = np.asarray(mask, dtype=bool)
    struct = ndimage.generate_binary_structure(mask.ndim, 1)
    interior = ndimage.binary_erosion(mask, structure=struct, border_value=0)
    return np.argwhere(mask & ~interior)


def _squeeze_spatial(x) -> np.ndarray:
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    while arr.ndim > 3 and arr.shape[0] == 1:
        arr = arr[0]
    return arr


def hausdorff95(mask_a, mask_b, label: Optional[int] = None) -> Optional[float]:
    """95th percentile (linear interpolation) of symmetric boundary distances.

    With ``label`` the inputs are label maps; otherwise boolean masks.
    Returns None when either mask is empty.
    """
    a, b = _squeeze_spatial(mask_a), _squeeze_spatial(mask_b)
    if label is not None:
        a, b = _as_int_map(a) == label, _as_int_map(b) == label
    a, b = a.astype(bool), b.astype(bool)
    if a.shape != b.shape:
        raise ShapeError(f"mask shapes differ: {a.shape} vs {b.shape}")
    if not a.any() or not b.any():
        return None
    ba, bb = boundary_voxels(a), boundary_voxels(b)
    d_ab, _ = cKDTree(bb).query(ba)
    d_ba, _ = cKDTree(ba).query(bb)
    return float(np.percentile(np.concatenate([d_ab, d_ba]), 95))


def _field_list(fields) -> List[np.ndarray]:
    out = []
    for f in fields:
        arr = f.data if isinstance(f, Tensor) else np.asarray(f)
        if arr.ndim >= 3 and arr.shape[0] == 1 and arr.shape[1] == arr.ndim - 2:
            arr = arr[0]
        if arr.shape[0] != arr.ndim - 1:
            raise ShapeError(f"expected a [D, *spatial] or [1, D, *spatial] field, got {arr.shape}")
        out.append(arr)
    if not out:
        raise ShapeError("displacement_statistics needs at least one field")
    if any(a.shape != out[0].shape for a in out):
        raise ShapeError("fields have inconsistent shapes")
    return out


def displacement_statistics(fields: Iterable, stride: int = 4) -> Tuple[np.ndarray, np.ndarray]:
    """Per-axis mean |u_d| over all voxels and fields, plus a quiver table.

    The quiver table holds rows (x, y[, z], ux, uy[, uz]) of the
    field-averaged displacement on a grid subsampled by ``stride``.
    """
    fl = _field_list(fields)
    stack = np.stack(fl)  # [F, D, *spatial]
    means = np.abs(stack).mean(axis=tuple(i for i in range(stack.ndim) if i != 1))
    avg = stack.mean(axis=0)
    D = avg.shape[0]
    sub = avg[(slice(None),) + (slice(None, None, stride),) * D]
    grids = np.meshgrid(*[np.arange(0, n, stride) for n in avg.shape[1:]], indexing="ij")
    coords = np.stack([g.ravel() for g in grids], axis=1)
    vecs = sub.reshape(D, -1).T
    return means, np.concatenate([coords, vecs], axis=1)


def write_quiver(path, table: np.ndarray) -> None:
    D = table.shape[1] // 2
    names = ["x", "y", "z"][:D]
    header = " ".join(names + ["u" + n for n in names])
    with open(path, "w") as fh:
        fh.write(header + "\n")
        for row in table:
            coords = " ".join(str(int(c)) for c in row[:D])
            vec = " ".join(repr(float(v)) for v in row[D:])
            fh.write(f"{coords} {vec}\n")


@dataclass
class MetricsRecord:
    values: Dict[str, float]
    pair_id: str = ""
    config_hash: str = ""
    checkpoint_id: str = ""
    per_label_dice: Dict[int, float] = field(default_factory=dict)

    def __post_init__(self):
        d = self.values.get("dice_mean")
        if d is not None and not math.isnan(d) and not 0.0 <= d <= 1.0:
            raise ValueError(f"Dice out of range: {d}")
        if self.values.get("fold_pct", 0.0) < 0 or (self.values.get("hd95_mean") or 0.0) < 0:
            raise ValueError("fold_pct and hd95 must be non-negative")

    def __getitem__(self, key):
        return self.values[key]


def metrics_header(vocabulary: Sequence[int]) -> List[str]:
    return ["pair_id", "dice_mean"] + [f"dice_{v}" for v in vocabulary] + ["fold_pct", "sdlogj", "hd95_mean", "runtime_ms"]


class MetricsWriter:
    """Appends MetricsRecords to a CSV; one writer per file."""

    def __init__(self, path, vocabulary: Sequence[int]):
        self.path = Path(path)
        self.vocabulary = list(vocabulary)
        new = not self.path.exists() or self.path.stat().st_size == 0
        self._fh = open(self.path, "a", newline="")
        self._w = csv.writer(self._fh, lineterminator="\n")
        if new:
            self._w.writerow(metrics_header(self.vocabulary))

    def write(self, rec: MetricsRecord) -> None:
        v = rec.values
        row = [rec.pair_id, v["dice_mean"]] + [rec.per_label_dice.get(l, float("nan")) for l in self.vocabulary]
        row += [v["fold_pct"], v["sdlogj"], v.get("hd95_mean"), v["runtime_ms"]]
        self._w.writerow(["" if x is None else x for x in row])
        self._fh.flush()

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def infer_displacement(network, fixed: np.ndarray, moving: np.ndarray) -> np.ndarray:
    """Run the network on one pair and return the displacement field."""
    from .tensor import concat

    dtype = network.dtype
    with no_grad():
        x = concat([Tensor(fixed.astype(dtype)), Tensor(moving.astype(dtype))], axis=1)
        out = network(x)
        if network.cfg.diffeomorphic:
            out = exp_velocity(out, network.cfg.squaring_steps)
    return out.data


def evaluate_pair(fixed, moving, fixed_labels, moving_labels, network, vocabulary: Sequence[int],
                  pair_id: str = "", config_hash: str = "", checkpoint_id: str = ""):
    """Register one pair and compute its metrics.

    Returns (MetricsRecord, outputs) where outputs holds the displacement,
    the warped image and the warped labels the metrics were computed from.
    """
    fixed = np.asarray(fixed)
    moving = np.asarray(moving)
    network.check_input((1, 2) + fixed.shape[2:])
    if fixed.shape != moving.shape:
        raise ShapeError("fixed and moving images differ in shape")
    t0 = time.perf_counter()
    disp = infer_displacement(network, fixed, moving)
    runtime_ms = (time.perf_counter() - t0) * 1000.0
    with no_grad():
        warped = warp(Tensor(moving.astype(disp.dtype)), Tensor(disp)).data
    values = {"fold_pct": fold_fraction(disp), "sdlogj": sd_log_jacobian(disp), "runtime_ms": runtime_ms}
    outputs = {"disp": disp, "warped": warped}
    per = {}
    if fixed_labels is not None and moving_labels is not None:
        wl = warp_nearest_array(np.asarray(moving_labels, dtype=disp.dtype), disp)
        outputs["warped_labels"] = wl
        per, values["dice_mean"] = dice(wl, fixed_labels, vocabulary)
        hds = [hausdorff95(wl, fixed_labels, lab) for lab in vocabulary]
        hds = [h for h in hds if h is not None]
        values["hd95_mean"] = float(np.mean(hds)) if hds else None
    else:
        values["dice_mean"] = float("nan")
        values["hd95_mean"] = None
    rec = MetricsRecord(values, pair_id=pair_id, config_hash=config_hash, checkpoint_id=checkpoint_id,
                        per_label_dice=per)
    return rec, outputs
