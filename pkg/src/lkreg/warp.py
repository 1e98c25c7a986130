"""Spatial warping, scaling-and-squaring, and Jacobian analysis of fields.

Fields are [B, D, *spatial] tensors in voxel units; channel d is the
displacement along spatial axis d. Sampling outside the grid clamps to the
border.
"""
from __future__ import annotations

import itertools
import math
from typing import Union

import numpy as np

from .errors import NumericalError, ShapeError, UsageError
from .tensor import Tensor, add, as_tensor, is_grad_enabled, make_op, scale

JAC_EPS = 1e-6


def _check_field(image_shape, disp_shape):
    d = len(image_shape) - 2
    if len(disp_shape) != d + 2 or disp_shape[1] != d:
        raise ShapeError(f"displacement must be [B, {d}, *spatial], got {tuple(disp_shape)}")
    if tuple(disp_shape[2:]) != tuple(image_shape[2:]) or disp_shape[0] != image_shape[0]:
        raise ShapeError(f"image {tuple(image_shape)} and displacement {tuple(disp_shape)} disagree")
    return d


def _sample_coords(disp: np.ndarray):
    """Absolute clamped sample positions and the in-range masks, per axis."""
    B, D = disp.shape[:2]
    spatial = disp.shape[2:]
    pos, inside = [], []
    for d in range(D):
        shape = [1] * D
        shape[d] = spatial[d]
        base = np.arange(spatial[d], dtype=disp.dtype).reshape(shape)
        p = base + disp[:, d]
        hi = spatial[d] - 1
        inside.append((p >= 0) & (p <= hi))
        pos.append(np.clip(p, 0, hi))
    return pos, inside


def _linear_weights(pos, spatial):
    """Lower corner indices and fractional offsets per axis."""
    i0s, ts = [], []
    for p, n in zip(pos, spatial):
        if n == 1:
            i0 = np.zeros(p.shape, dtype=np.intp)
            t = np.zeros_like(p)
        else:
            # non-finite positions index voxel 0 and carry NaN through t
            safe = np.where(np.isfinite(p), p, 0.0)
            i0 = np.minimum(np.floor(safe).astype(np.intp), n - 2)
            t = p - i0
        i0s.append(i0)
        ts.append(t)
    return i0s, ts


def _flat_index(idx, spatial):
    flat = idx[0]
    for i, n in zip(idx[1:], spatial[1:]):
        flat = flat * n + i
    return flat


def warp(image: Tensor, disp: Tensor, mode: str = "linear") -> Tensor:
    """Resample ``image`` at x + u(x).

    ``linear`` is multilinear and differentiable in both arguments;
    ``nearest`` rounds the sample position and is for label maps only.
    """
    image, disp = as_tensor(image), as_tensor(disp)
    D = _check_field(image.shape, disp.shape)
    if mode == "nearest":
        if is_grad_enabled() and (image.requires_grad or disp.requires_grad):
            raise UsageError("nearest-neighbour warp is not differentiable; use no_grad() or detached inputs")
        return Tensor(warp_nearest_array(image.data, disp.data))
    if mode != "linear":
        raise ValueError(f"unknown warp mode {mode!r}")

    img, u = image.data, disp.data
    B, Cimg = img.shape[:2]
    spatial = img.shape[2:]
    N = math.prod(spatial)
    pos, inside = _sample_coords(u)
    i0s, ts = _linear_weights(pos, spatial)
    img_flat = img.reshape(B, Cimg, N)

    corners = []
    out = np.zeros(img.shape, dtype=np.result_type(img.dtype, u.dtype))
    for corner in itertools.product((0, 1), repeat=D):
        idx = [i0 + c if n > 1 else i0 for i0, c, n in zip(i0s, corner, spatial)]
        flat = _flat_index(idx, spatial).reshape(B, 1, N)
        w = np.ones_like(ts[0])
        for t, c in zip(ts, corner):
            w = w * (t if c else 1 - t)
        vals = np.take_along_axis(img_flat, flat, axis=2).reshape(img.shape)
        out += w[:, None] * vals
        corners.append((corner, flat, w, vals))

    def bw(g):
        gimg = gdisp = None
        if image.requires_grad:
            gimg = np.zeros((B, Cimg, N), dtype=img.dtype)
            gflat = g.reshape(B, Cimg, N)
            for _, flat, w, _ in corners:
                wf = w.reshape(B, N)
                for b in range(B):
                    for c in range(Cimg):
                        gimg[b, c] += np.bincount(flat[b, 0], weights=gflat[b, c] * wf[b], minlength=N)
            gimg = gimg.reshape(img.shape)
        if disp.requires_grad:
            gdisp = np.zeros(u.shape, dtype=u.dtype)
            for corner, flat, _, vals in corners:
                gv = (g * vals).sum(axis=1)
                for d in range(D):
                    dw = np.ones_like(ts[0])
                    for e, (t, c) in enumerate(zip(ts, corner)):
                        if e == d:
                            dw = dw * (1.0 if c else -1.0)
                        else:
                            dw = dw * (t if c else 1 - t)
                    gdisp[:, d] += gv * dw
            for d in range(D):
                gdisp[:, d] *= inside[d]
        return gimg, gdisp

    return make_op(out.astype(img.dtype, copy=False), (image, disp), bw, "warp")


def warp_nearest_array(img: np.ndarray, u: np.ndarray) -> np.ndarray:
    _check_field(img.shape, u.shape)
    B, Cimg = img.shape[:2]
    spatial = img.shape[2:]
    N = math.prod(spatial)
    if not np.all(np.isfinite(u)):
        raise NumericalError("non-finite displacement passed to nearest-neighbour warp")
    pos, _ = _sample_coords(u)
    idx = [np.clip(np.floor(p + 0.5).astype(np.intp), 0, n - 1) for p, n in zip(pos, spatial)]
    flat = _flat_index(idx, spatial).reshape(B, 1, N)
    return np.take_along_axis(img.reshape(B, Cimg, N), flat, axis=2).reshape(img.shape)


def compose(u: Tensor, w: Tensor) -> Tensor:
    """Displacement of (id + u) o (id + w), i.e. w + u(x + w(x))."""
    return add(w, warp(u, w))


def exp_velocity(v: Tensor, steps: int = 7) -> Tensor:
    """Exp(v) - id by scaling and squaring: u = v / 2^steps, then u <- u + u o (id + u)."""
    if steps < 0:
        raise ValueError("steps must be >= 0")
    v = as_tensor(v)
    _check_field(v.shape, v.shape)
    u = scale(v, 1.0 / 2 ** steps)
    for _ in range(steps):
        u = add(u, warp(u, u))
    return u


# -- Jacobian analysis (non-differentiable) ---------------------------------------
def _field_array(disp: Union[Tensor, np.ndarray]) -> np.ndarray:
    arr = disp.data if isinstance(disp, Tensor) else np.asarray(disp)
    if arr.ndim >= 3 and arr.shape[1] == arr.ndim - 2:
        return arr
    raise ShapeError(f"expected a [B, D, *spatial] field, got shape {arr.shape}")


def jacobian_determinant(disp: Union[Tensor, np.ndarray]) -> np.ndarray:
    """Per-voxel det(I + grad u), shape [B, 1, *spatial].

    Central differences inside, one-sided at the borders.
    """
    u = _field_array(disp).astype(np.float64)
    B, D = u.shape[:2]
    if D not in (2, 3):
        raise ShapeError("jacobian_determinant supports 2D and 3D fields")
    spatial = u.shape[2:]
    out = np.empty((B, 1) + spatial)
    for b in range(B):
        J = np.empty(spatial + (D, D))
        for d in range(D):
            grads = np.gradient(u[b, d], axis=tuple(range(D)), edge_order=1)
            if D == 1:
                grads = [grads]
            for e in range(D):
                J[..., d, e] = grads[e] + (1.0 if d == e else 0.0)
        if D == 2:
            det = J[..., 0, 0] * J[..., 1, 1] - J[..., 0, 1] * J[..., 1, 0]
        else:
            det = (
                J[..., 0, 0] * (J[..., 1, 1] * J[..., 2, 2] - J[..., 1, 2] * J[..., 2, 1])
                - J[..., 0, 1] * (J[..., 1, 0] * J[..., 2, 2] - J[..., 1, 2] * J[..., 2, 0])
                + J[..., 0, 2] * (J[..., 1, 0] * J[..., 2, 1] - J[..., 1, 1] * J[..., 2, 0])
            )
        out[b, 0] = det
    return out


def fold_fraction(disp) -> float:
    """Percentage of voxels with a non-positive Jacobian determinant."""
    det = jacobian_determinant(disp)
    return 100.0 * np.count_nonzero(det <= 0) / det.size


def sd_log_jacobian(disp, eps: float = JAC_EPS) -> float:
    det = jacobian_determinant(disp)
    return float(np.std(np.log(np.maximum(det, eps))))
