import itertools
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from lkreg.tensor import Tensor, backward

settings.register_profile("repo", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")

FD_STEP = 1e-5
# Relative error uses max(|a|, |n|, floor) as denominator. The floor is
# REL_FLOOR or GRAD_SCALE_FLOOR * max|analytic gradient|, whichever is larger:
# central differences at h=1e-5 carry ~eps*|f|/h of round-off, so entries far
# below the gradient's own scale can only be compared in absolute terms.
REL_FLOOR = 1e-4
GRAD_SCALE_FLOOR = 1e-3


def naive_conv(x, w, b=None, stride=1, padding=0):
    """Direct nested-loop cross-correlation, kept as the reference for the im2col path."""
    B, Cin = x.shape[:2]
    Cout = w.shape[0]
    d = x.ndim - 2
    K = w.shape[2:]
    s = (stride,) * d if np.isscalar(stride) else tuple(stride)
    p = (padding,) * d if np.isscalar(padding) else tuple(padding)
    xp = np.zeros((B, Cin) + tuple(n + 2 * q for n, q in zip(x.shape[2:], p)))
    xp[(slice(None), slice(None)) + tuple(slice(q, q + n) for q, n in zip(p, x.shape[2:]))] = x
    out_sp = tuple((n + 2 * q - k) // st + 1 for n, q, k, st in zip(x.shape[2:], p, K, s))
    y = np.zeros((B, Cout) + out_sp)
    for bi in range(B):
        for co in range(Cout):
            for o in itertools.product(*[range(n) for n in out_sp]):
                acc = 0.0 if b is None else float(b[co])
                for ci in range(Cin):
                    for kk in itertools.product(*[range(k) for k in K]):
                        pos = tuple(oi * st + ki for oi, st, ki in zip(o, s, kk))
                        acc += w[(co, ci) + kk] * xp[(bi, ci) + pos]
                y[(bi, co) + o] = acc
    return y


def naive_conv_transpose(x, w, stride=2):
    """Scatter form of the transposed convolution; w is [Cin, Cout, *K]."""
    B, Cin = x.shape[:2]
    Cout = w.shape[1]
    K = w.shape[2:]
    d = x.ndim - 2
    out_sp = tuple((n - 1) * stride + k for n, k in zip(x.shape[2:], K))
    y = np.zeros((B, Cout) + out_sp)
    for bi in range(B):
        for ci in range(Cin):
            for i in itertools.product(*[range(n) for n in x.shape[2:]]):
                for kk in itertools.product(*[range(k) for k in K]):
                    pos = tuple(ii * stride + ki for ii, ki in zip(i, kk))
                    y[(bi, slice(None)) + pos] += x[(bi, ci) + i] * w[(ci, slice(None)) + kk]
    return y


def rel_error(a, n, floor=REL_FLOOR):
    a, n = np.asarray(a, dtype=np.float64), np.asarray(n, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def gradcheck(fn, arrays, rng=None, max_entries=None, h=FD_STEP):
    """Max relative error between backward() and central differences.

    ``fn`` maps a list of Tensors to a scalar Tensor. With ``max_entries``
    only that many randomly chosen entries per input are perturbed.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    backward(fn(leaves))
    floor = max(REL_FLOOR, GRAD_SCALE_FLOOR * max(float(np.abs(t.grad).max()) for t in leaves))
    worst = 0.0
    for i, a in enumerate(arrays):
        analytic = leaves[i].grad
        flat_idx = np.arange(a.size)
        if max_entries is not None and a.size > max_entries:
            flat_idx = (rng or np.random.default_rng(0)).choice(a.size, max_entries, replace=False)
        for fi in flat_idx:
            idx = np.unravel_index(fi, a.shape)
            vals = []
            for sgn in (1, -1):
                pert = [x.copy() for x in arrays]
                pert[i][idx] += sgn * h
                vals.append(float(fn([Tensor(x) for x in pert]).data))
            num = (vals[0] - vals[1]) / (2 * h)
            worst = max(worst, float(rel_error(analytic[idx], num, floor)))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None:
        return
    ran = {r.nodeid for k in ("passed", "failed", "error") for r in terminalreporter.stats.get(k, [])}
    terminalreporter.section("acceptance criteria")
    for n in range(1, 9):
        if n in mod.RESULTS:
            terminalreporter.write_line(mod.RESULTS[n])
        elif any(f"test_criterion_{n}_" in nid for nid in ran):
            terminalreporter.write_line(f"criterion {n}: FAIL - test raised before reporting")
