"""Adam with bias correction and a fixed learning rate."""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from .errors import NumericalError, ShapeError


@dataclass
class AdamState:
    m: List[np.ndarray]
    v: List[np.ndarray]
    t: int = 0
    # When all parameters share a dtype, m and v are views into these flat
    # buffers and the moment updates run as a few whole-buffer ops.
    flat_m: Optional[np.ndarray] = None
    flat_v: Optional[np.ndarray] = None

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray]) -> "AdamState":
        dtypes = {np.asarray(p).dtype for p in params}
        if len(dtypes) != 1:
            return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0)
        dt = dtypes.pop()
        total = sum(np.size(p) for p in params)
        fm, fv = np.zeros(total, dt), np.zeros(total, dt)
        m, v, off = [], [], 0
        for p in params:
            n = np.size(p)
            m.append(fm[off:off + n].reshape(np.shape(p)))
            v.append(fv[off:off + n].reshape(np.shape(p)))
            off += n
        return cls(m, v, 0, fm, fv)


def _check_grads(params, grads, state, names):
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("params, grads and state have different lengths")
    for i, g in enumerate(grads):
        if g.shape != params[i].shape:
            raise ShapeError(f"grad {i} has shape {g.shape}, param has {params[i].shape}")


def _non_finite(grads, state, names):
    for i, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            label = names[i] if i < len(names) else f"#{i}"
            return NumericalError(f"non-finite gradient in parameter {label} at step {state.t + 1}")
    return None


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState, lr: float,
              betas=(0.9, 0.999), eps: float = 1e-8, names: Sequence[str] = ()) -> AdamState:
    """In-place Adam update of ``params``; returns the advanced state."""
    _check_grads(params, grads, state, names)
    b1, b2 = betas
    c1 = 1.0 - b1 ** (state.t + 1)
    c2 = 1.0 - b2 ** (state.t + 1)
    step = lr / c1
    rc2 = 1.0 / np.sqrt(c2)

    if state.flat_m is not None:
        g = np.concatenate([np.ravel(x) for x in grads]).astype(state.flat_m.dtype, copy=False)
        if not np.isfinite(g).all():
            raise _non_finite(grads, state, names)
        state.t += 1
        m, v = state.flat_m, state.flat_v
        m *= b1
        m += (1.0 - b1) * g
        g *= g
        v *= b2
        v += (1.0 - b2) * g
        den = np.sqrt(v)
        den *= rc2
        den += eps
        upd = m * step
        upd /= den
        off = 0
        for p in params:
            n = p.size
            p -= upd[off:off + n].reshape(p.shape).astype(p.dtype, copy=False)
            off += n
        return state

    err = _non_finite(grads, state, names)
    if err is not None:
        raise err
    state.t += 1
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        den = np.sqrt(v)
        den *= rc2
        den += eps
        upd = m * step
        upd /= den
        p -= upd.astype(p.dtype, copy=False)
    return state


class Adam:
    """Thin wrapper holding state for a list of Tensor parameters."""

    def __init__(self, params, lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8, names=()):
        self.params = list(params)
        self.names = list(names)
        self.lr, self.betas, self.eps = lr, tuple(betas), eps
        self.state = AdamState.zeros_like([p.data for p in self.params])

    def step(self) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        adam_step([p.data for p in self.params], grads, self.state, self.lr, self.betas, self.eps, self.names)
