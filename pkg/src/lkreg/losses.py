"""Training objective: local NCC, diffusion regulariser, soft Dice."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import Tensor, add, as_tensor, box_sum, div, getitem, mean, mul, scale, sub, tsum
from .warp import exp_velocity, warp


@dataclass(frozen=True)
class LossConfig:
    lam: float = 1.0
    ncc_window: int = 9
    ncc_epsilon: float = 1e-5
    dice_weight: float = 0.0
    dice_epsilon: float = 1e-5
    regularize_target: str = "displacement"

    def __post_init__(self):
        if self.lam < 0 or self.dice_weight < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.ncc_window < 1 or self.ncc_window % 2 == 0:
            raise ConfigError(f"ncc_window must be a positive odd int, got {self.ncc_window}")
        if self.regularize_target not in ("displacement", "velocity"):
            raise ConfigError("regularize_target must be 'displacement' or 'velocity'")


def ncc(warped: Tensor, fixed: Tensor, window=9, eps: float = 1e-5) -> Tensor:
    """Mean local squared normalised cross-correlation, in [0, 1].

    Window statistics use zero-padded box sums divided by the number of
    in-image voxels under each window, so they are exact sample moments
    even at the border.
    """
    warped, fixed = as_tensor(warped), as_tensor(fixed)
    if warped.shape != fixed.shape:
        raise ShapeError(f"ncc operands differ in shape: {warped.shape} vs {fixed.shape}")
    if warped.shape[1] != 1:
        raise ShapeError("ncc expects single-channel images")
    spatial = warped.shape[2:]
    win = (window,) * len(spatial) if isinstance(window, int) else tuple(window)
    if any(w > n for w, n in zip(win, spatial)):
        raise ShapeError(f"ncc window {win} larger than image {spatial}")
    I, J = warped, fixed
    count = box_sum(Tensor(np.ones(I.shape, dtype=I.dtype)), win).data
    inv_n = Tensor(1.0 / count)

    I_sum, J_sum = box_sum(I, win), box_sum(J, win)
    I2_sum, J2_sum = box_sum(mul(I, I), win), box_sum(mul(J, J), win)
    IJ_sum = box_sum(mul(I, J), win)

    cross = sub(IJ_sum, mul(mul(I_sum, J_sum), inv_n))
    I_var = sub(I2_sum, mul(mul(I_sum, I_sum), inv_n))
    J_var = sub(J2_sum, mul(mul(J_sum, J_sum), inv_n))
    cc = div(mul(cross, cross), add(mul(I_var, J_var), eps))
    return mean(cc)


def diffusion_regularizer(field: Tensor) -> Tensor:
    """Sum over axes of the mean squared forward difference along that axis.

    The difference at the last index of an axis is omitted, so the mean for
    axis a runs over (n_a - 1) positions per channel.
    """
    field = as_tensor(field)
    nsp = field.ndim - 2
    total = None
    for ax in range(2, 2 + nsp):
        if field.shape[ax] < 2:
            continue
        hi = [slice(None)] * field.ndim
        lo = [slice(None)] * field.ndim
        hi[ax] = slice(1, None)
        lo[ax] = slice(None, -1)
        dif = sub(getitem(field, tuple(hi)), getitem(field, tuple(lo)))
        term = mean(mul(dif, dif))
        total = term if total is None else add(total, term)
    if total is None:
        return Tensor(np.zeros((), dtype=field.dtype))
    return total


def soft_dice_loss(warped_onehot: Tensor, fixed_onehot: Tensor, eps: float = 1e-5) -> Tensor:
    """1 - mean over labels of (2 sum(pg) + eps) / (sum(p) + sum(g) + eps)."""
    p, g = as_tensor(warped_onehot), as_tensor(fixed_onehot)
    if p.shape != g.shape:
        raise ShapeError(f"label maps differ: {p.shape} vs {g.shape}")
    axes = tuple(range(2, p.ndim))
    inter = tsum(mul(p, g), axis=axes)
    denom = add(tsum(p, axis=axes), tsum(g, axis=axes))
    dice = div(add(scale(inter, 2.0), eps), add(denom, eps))
    return sub(1.0, mean(dice))


def one_hot(labels: np.ndarray, vocabulary: Sequence[int], dtype=np.float32) -> np.ndarray:
    """[B, 1, *spatial] integer map -> [B, L, *spatial] membership channels."""
    lab = np.asarray(labels)
    if lab.ndim < 3 or lab.shape[1] != 1:
        raise ShapeError(f"label map must be [B, 1, *spatial], got {lab.shape}")
    return np.concatenate([(lab == v) for v in vocabulary], axis=1).astype(dtype)


def total_loss(fixed: Tensor, moving: Tensor, network_output: Tensor, cfg: LossConfig,
               diffeomorphic: bool = False, squaring_steps: int = 7,
               fixed_onehot: Optional[Tensor] = None, moving_onehot: Optional[Tensor] = None
               ) -> Tuple[Tensor, Dict[str, float], Tensor]:
    """-NCC + lam * diffusion + dice_weight * soft Dice.

    Returns (loss, components, displacement). With ``diffeomorphic`` the
    network output is a velocity and the warp uses Exp(v).
    """
    fixed, moving = as_tensor(fixed), as_tensor(moving)
    disp = exp_velocity(network_output, squaring_steps) if diffeomorphic else network_output
    warped = warp(moving, disp)
    sim = ncc(warped, fixed, cfg.ncc_window, cfg.ncc_epsilon)
    reg_field = network_output if (diffeomorphic and cfg.regularize_target == "velocity") else disp
    reg = diffusion_regularizer(reg_field)
    loss = add(scale(sim, -1.0), scale(reg, cfg.lam))
    parts = {"ncc": float(sim.data), "reg": float(reg.data), "dice": 0.0}
    if cfg.dice_weight > 0:
        if fixed_onehot is None or moving_onehot is None:
            raise ConfigError("dice_weight > 0 needs fixed and moving labels")
        dl = soft_dice_loss(warp(as_tensor(moving_onehot), disp), fixed_onehot, cfg.dice_epsilon)
        loss = add(loss, scale(dl, cfg.dice_weight))
        parts["dice"] = float(dl.data)
    parts["total"] = float(loss.data)
    return loss, parts, disp
