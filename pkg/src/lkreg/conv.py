"""N-d (2D/3D) convolution and transposed convolution.

Convolution is cross-correlation with zero padding. The fast path lowers the
sliding windows to a patch-row matrix (im2row) and does one GEMM; the adjoint
scatters rows back (row2im). Transposed convolution is literally the
adjoint of convolution, so both directions share the same two kernels.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import ConfigError, ShapeError, UsageError
from .tensor import Tensor, make_op


def _tuple(v, dims: int, name: str) -> Tuple[int, ...]:
    if isinstance(v, int):
        return (v,) * dims
    v = tuple(int(x) for x in v)
    if len(v) != dims:
        raise ConfigError(f"{name} must have {dims} entries, got {v}")
    return v


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: Tuple[int, ...]
    stride: Tuple[int, ...] = None
    padding: Tuple[int, ...] = None
    has_bias: bool = True
    dims: int = None
    transposed: bool = False

    def __post_init__(self):
        kernel = self.kernel if not isinstance(self.kernel, int) else (self.kernel,) * (self.dims or 3)
        dims = self.dims if self.dims is not None else len(kernel)
        if dims not in (1, 2, 3):
            raise ConfigError(f"dims must be 1, 2 or 3, got {dims}")
        kernel = _tuple(kernel, dims, "kernel")
        stride = _tuple(1 if self.stride is None else self.stride, dims, "stride")
        if self.padding is None:
            padding = tuple(0 if self.transposed else (k - 1) // 2 for k in kernel)
        else:
            padding = _tuple(self.padding, dims, "padding")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ConfigError("channel counts must be positive")
        if any(k < 1 for k in kernel) or any(s < 1 for s in stride) or any(p < 0 for p in padding):
            raise ConfigError(f"bad kernel/stride/padding {kernel}/{stride}/{padding}")
        if not self.transposed and any(k % 2 == 0 for k in kernel):
            raise ConfigError(f"convolution kernels must be odd, got {kernel}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "kernel", kernel)
        object.__setattr__(self, "stride", stride)
        object.__setattr__(self, "padding", padding)

    @property
    def weight_shape(self) -> Tuple[int, ...]:
        if self.transposed:
            return (self.in_channels, self.out_channels) + self.kernel
        return (self.out_channels, self.in_channels) + self.kernel

    @property
    def n_params(self) -> int:
        return math.prod(self.weight_shape) + (self.out_channels if self.has_bias else 0)

    def output_spatial(self, spatial: Sequence[int]) -> Tuple[int, ...]:
        """Pure shape function for this layer."""
        if len(spatial) != self.dims:
            raise ShapeError(f"expected {self.dims} spatial dims, got {tuple(spatial)}")
        if self.transposed:
            out = tuple((n - 1) * s - 2 * p + k for n, k, s, p in zip(spatial, self.kernel, self.stride, self.padding))
        else:
            out = tuple((n + 2 * p - k) // s + 1 for n, k, s, p in zip(spatial, self.kernel, self.stride, self.padding))
        if any(o < 1 for o in out):
            raise ConfigError(f"layer {self} yields empty output for input {tuple(spatial)}")
        return out


# -- lowering kernels -----------------------------------------------------------


def _to_last(d: int) -> Tuple[int, ...]:
    """Axis order taking [B, C, *S] (d spatial axes) to [B, *S, C]."""
    return _PERMS_LAST[d]


def _to_first(d: int) -> Tuple[int, ...]:
    """Axis order taking [B, *S, C] back to [B, C, *S]."""
    return _PERMS_FIRST[d]


_PERMS_LAST = {d: (0,) + tuple(range(2, 2 + d)) + (1,) for d in (1, 2, 3)}
_PERMS_FIRST = {d: (0, 1 + d) + tuple(range(1, 1 + d)) for d in (1, 2, 3)}


def im2row(x: np.ndarray, kernel, stride, padding) -> Tuple[np.ndarray, Tuple[int, ...]]:
    """[B, C, *S] -> patch rows [B*prod(O), prod(K)*C] and the output extents O.

    Patches are rows ordered (kernel offset, channel) over a channels-last
    copy, so every copied run is contiguous, and the products below get the
    long spatial axis as BLAS's M dimension, which runs far faster than an
    8-row left operand.
    """
    d = len(kernel)
    B, C = x.shape[:2]
    padded = tuple(n + 2 * p for n, p in zip(x.shape[2:], padding))
    xc = np.zeros((B,) + padded + (C,), dtype=x.dtype)
    xc[(slice(None),) + tuple(slice(p, p + n) for p, n in zip(padding, x.shape[2:]))] = x.transpose(_to_last(d))
    out_sp = tuple((n - k) // s + 1 for n, k, s in zip(padded, kernel, stride))
    st = xc.strides
    # windows as a [B, *O, *K, C] view of the padded copy
    win = as_strided(xc, (B,) + out_sp + tuple(kernel) + (C,),
                     (st[0],) + tuple(st[1 + i] * stride[i] for i in range(d)) + st[1:1 + d] + (st[-1],),
                     writeable=False)
    rows = np.ascontiguousarray(win).reshape(B * math.prod(out_sp), math.prod(kernel) * C)
    return rows, out_sp


def row2im(rows: np.ndarray, in_shape, kernel, stride, padding, out_sp) -> np.ndarray:
    """Adjoint of :func:`im2row`: scatter-add patch rows back into an input-shaped array."""
    d = len(kernel)
    B, C = in_shape[:2]
    padded_sp = tuple(n + 2 * p for n, p in zip(in_shape[2:], padding))
    acc = np.zeros((B,) + padded_sp + (C,), dtype=rows.dtype)
    r = rows.reshape((B,) + tuple(out_sp) + tuple(kernel) + (C,))
    lead = (slice(None),) * (1 + d)
    for off in np.ndindex(*kernel):
        sl = tuple(slice(o, o + s * (n - 1) + 1, s) for o, s, n in zip(off, stride, out_sp))
        acc[(slice(None),) + sl] += r[lead + off]
    if any(padding):
        acc = acc[(slice(None),) + tuple(slice(p, p + n) for p, n in zip(padding, in_shape[2:]))]
    return acc.transpose(_to_first(d))


def _wmat(w: np.ndarray) -> np.ndarray:
    """[A, Bc, *K] -> [A, prod(K)*Bc], matching the (offset, channel) row order."""
    return np.ascontiguousarray(w.transpose(_to_last(w.ndim - 2))).reshape(w.shape[0], -1)


def _wunmat(m: np.ndarray, shape) -> np.ndarray:
    """Inverse of :func:`_wmat` for a weight of the given shape."""
    return np.ascontiguousarray(m.reshape((shape[0],) + tuple(shape[2:]) + (shape[1],)).transpose(_to_first(len(shape) - 2)))


def _to_rows(a: np.ndarray) -> np.ndarray:
    """[B, C, *S] -> contiguous [B*prod(S), C]."""
    return np.ascontiguousarray(a.transpose(_to_last(a.ndim - 2))).reshape(-1, a.shape[1])


def _column_sum(r: np.ndarray) -> np.ndarray:
    """Sum of a [N, C] row matrix over N; a GEMV is far faster than sum(axis=0) for narrow C."""
    return np.ones(r.shape[0], dtype=r.dtype) @ r


def _from_rows(r: np.ndarray, B: int, spatial) -> np.ndarray:
    """[B*prod(S), C] -> [B, C, *S] as a channels-last strided view.

    Downstream elementwise ops keep this layout, so the next im2row reads it
    back without a transpose.
    """
    C = r.shape[1]
    return r.reshape((B,) + tuple(spatial) + (C,)).transpose(_to_first(len(spatial)))


# -- array-level forward / backward ---------------------------------------------------
@dataclass
class ConvContext:
    """Saved forward state needed by :func:`conv_backward`."""

    spec: ConvSpec
    input_shape: Tuple[int, ...]
    cols: Optional[np.ndarray]
    weight: np.ndarray
    out_sp: Tuple[int, ...]
    released: bool = field(default=False)

    def release(self):
        self.cols = None
        self.released = True


def _check_conv_inputs(x: np.ndarray, spec: ConvSpec, weight: np.ndarray, bias: Optional[np.ndarray]):
    if x.ndim != spec.dims + 2:
        raise ShapeError(f"input must be [B, C, {spec.dims} spatial dims], got shape {x.shape}")
    if x.shape[1] != spec.in_channels:
        raise ShapeError(f"input has {x.shape[1]} channels, layer expects {spec.in_channels}")
    if tuple(weight.shape) != spec.weight_shape:
        raise ShapeError(f"weight shape {tuple(weight.shape)} != expected {spec.weight_shape}")
    if spec.has_bias and (bias is None or tuple(bias.shape) != (spec.out_channels,)):
        raise ShapeError(f"bias must have shape ({spec.out_channels},)")
    if not spec.has_bias and bias is not None:
        raise ShapeError("bias supplied for a layer without bias")


def conv_forward(x: np.ndarray, spec: ConvSpec, weight: np.ndarray, bias: Optional[np.ndarray] = None):
    """Cross-correlation. Returns (output, context)."""
    if spec.transposed:
        raise ConfigError("conv_forward called with a transposed ConvSpec")
    _check_conv_inputs(x, spec, weight, bias)
    out_sp = spec.output_spatial(x.shape[2:])
    rows, out_sp2 = im2row(x, spec.kernel, spec.stride, spec.padding)
    assert out_sp == out_sp2
    yr = rows @ _wmat(weight).T
    if bias is not None:
        yr += bias
    y = _from_rows(yr, x.shape[0], out_sp)
    return y, ConvContext(spec, tuple(x.shape), rows, weight, out_sp)


def conv_backward(grad_out: np.ndarray, ctx: Optional[ConvContext], need_input: bool = True):
    """Returns (grad_input, grad_weight, grad_bias) for :func:`conv_forward`."""
    if ctx is None or ctx.released or ctx.cols is None:
        raise UsageError("conv_backward needs the forward context of a live conv_forward call")
    spec = ctx.spec
    gr = _to_rows(grad_out)
    grad_w = _wunmat(gr.T @ ctx.cols, spec.weight_shape)
    grad_x = None
    if need_input:
        B = ctx.input_shape[0]
        same = all(s == 1 for s in spec.stride) and all(2 * p == k - 1 for k, p in zip(spec.kernel, spec.padding))
        if same and spec.out_channels <= spec.in_channels:
            # full correlation with the flipped, channel-swapped kernel
            d = spec.dims
            wf = np.flip(ctx.weight, tuple(range(2, 2 + d))).swapaxes(0, 1)
            grows, _ = im2row(grad_out, spec.kernel, spec.stride, spec.padding)
            gx = grows @ _wmat(wf).T
            grad_x = _from_rows(gx, B, ctx.input_shape[2:])
        else:
            grows = gr @ _wmat(ctx.weight)
            grad_x = row2im(grows, ctx.input_shape, spec.kernel, spec.stride, spec.padding, ctx.out_sp)
    grad_b = _column_sum(gr) if spec.has_bias else None
    return grad_x, grad_w, grad_b


def transposed_conv_forward(x: np.ndarray, spec: ConvSpec, weight: np.ndarray, bias: Optional[np.ndarray] = None):
    """Adjoint of a strided convolution. Weight layout [Cin, Cout, *K]."""
    if not spec.transposed:
        raise ConfigError("transposed_conv_forward needs a ConvSpec with transposed=True")
    _check_conv_inputs(x, spec, weight, bias)
    out_sp = spec.output_spatial(x.shape[2:])
    B = x.shape[0]
    in_sp = tuple(x.shape[2:])
    xr = _to_rows(x)
    rows = xr @ _wmat(weight)
    y = row2im(rows, (B, spec.out_channels) + out_sp, spec.kernel, spec.stride, spec.padding, in_sp)
    if bias is not None:
        y += bias.reshape((1, -1) + (1,) * spec.dims)
    return y, ConvContext(spec, tuple(x.shape), xr, weight, in_sp)


def transposed_conv_backward(grad_out: np.ndarray, ctx: Optional[ConvContext], need_input: bool = True):
    if ctx is None or ctx.released or ctx.cols is None:
        raise UsageError("transposed_conv_backward needs a live forward context")
    spec = ctx.spec
    grows, in_sp = im2row(grad_out, spec.kernel, spec.stride, spec.padding)
    grad_w = _wunmat(ctx.cols.T @ grows, spec.weight_shape)
    grad_x = None
    if need_input:
        gx = grows @ _wmat(ctx.weight).T
        grad_x = _from_rows(gx, ctx.input_shape[0], in_sp)
    grad_b = _column_sum(_to_rows(grad_out)) if spec.has_bias else None
    return grad_x, grad_w, grad_b


# -- Tensor-level ops ---------------------------------------------------------------------
def _conv_op(x: Tensor, spec: ConvSpec, weight: Tensor, bias: Optional[Tensor], fwd, bwd, name: str) -> Tensor:
    if spec.has_bias and bias is None:
        raise ShapeError("layer has a bias but none was supplied")
    y, ctx = fwd(x.data, spec, weight.data, None if bias is None else bias.data)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        gx, gw, gb = bwd(g, ctx, x.requires_grad)
        ctx.release()
        return (gx, gw) if bias is None else (gx, gw, gb)

    out = make_op(y, parents, bw, name)
    if not out.requires_grad:
        ctx.release()
    return out


def conv(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, spec: Optional[ConvSpec] = None,
         stride=1, padding=None) -> Tensor:
    """Differentiable convolution. ``spec`` is inferred from the weight when omitted."""
    if spec is None:
        cout, cin = weight.shape[:2]
        spec = ConvSpec(cin, cout, tuple(weight.shape[2:]), stride=stride, padding=padding, has_bias=bias is not None)
    return _conv_op(x, spec, weight, bias, conv_forward, conv_backward, "conv")


def conv_transpose(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, spec: Optional[ConvSpec] = None,
                   stride=2, padding=0) -> Tensor:
    if spec is None:
        cin, cout = weight.shape[:2]
        spec = ConvSpec(cin, cout, tuple(weight.shape[2:]), stride=stride, padding=padding,
                        has_bias=bias is not None, transposed=True)
    return _conv_op(x, spec, weight, bias, transposed_conv_forward, transposed_conv_backward, "conv_transpose")
