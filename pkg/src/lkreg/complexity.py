"""Analytic model complexity: parameters, mult-adds, receptive field.

Everything here is pure arithmetic over :func:`lkreg.network.layer_schedule`;
no weights are allocated.

Mult-add convention: one multiply-accumulate per weight application, i.e.
``Cout * Cin * prod(kernel) * prod(output extents)`` per convolution (for a
transposed convolution the output extents are the up-sampled ones). Biases,
activations, additions and concatenations are not counted.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import List, Sequence, Tuple

from .errors import ConfigError
from .network import LayerInfo, NetConfig, layer_schedule


@dataclass
class LayerRow:
    name: str
    kind: str
    in_channels: int
    out_channels: int
    kernel: str
    stride: int
    out_extent: Tuple[int, ...]
    params: int
    mult_adds: int


@dataclass
class ComplexityReport:
    config: NetConfig
    input_extents: Tuple[int, ...]
    parameter_count: int
    mult_adds: int
    receptive_field: Tuple[int, ...]
    layers: List[LayerRow] = field(default_factory=list)

    @property
    def mult_adds_g(self) -> float:
        return self.mult_adds / 1e9

    def summary(self) -> str:
        return f"{self.parameter_count}, {self.mult_adds_g:.2f} G"

    def table(self) -> str:
        head = f"{'layer':<16}{'kind':<6}{'in':>6}{'out':>6}{'kernel':>10}{'s':>3}{'out extent':>18}{'params':>12}{'mult-adds':>16}"
        lines = [head, "-" * len(head)]
        for r in self.layers:
            ext = "x".join(map(str, r.out_extent))
            lines.append(f"{r.name:<16}{r.kind:<6}{r.in_channels:>6}{r.out_channels:>6}{r.kernel:>10}{r.stride:>3}"
                         f"{ext:>18}{r.params:>12}{r.mult_adds:>16}")
        lines.append("-" * len(head))
        lines.append(f"{'total':<16}{'':<6}{'':>6}{'':>6}{'':>10}{'':>3}{'':>18}{self.parameter_count:>12}{self.mult_adds:>16}")
        return "\n".join(lines)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "kind", "in_channels", "out_channels", "kernel", "stride", "out_extent", "params", "mult_adds"])
        for r in self.layers:
            w.writerow([r.name, r.kind, r.in_channels, r.out_channels, r.kernel, r.stride,
                        "x".join(map(str, r.out_extent)), r.params, r.mult_adds])
        w.writerow(["total", "", "", "", "", "", "", self.parameter_count, self.mult_adds])
        return buf.getvalue()


def _layer_params(layer: LayerInfo, dims: int) -> int:
    n = sum(spec.n_params for _, spec in layer.conv_specs(dims))
    return n + (1 if layer.has_activation else 0)


def count_parameters(cfg: NetConfig) -> int:
    """Exact number of learnable scalars (weights, biases, PReLU slopes)."""
    return sum(_layer_params(layer, cfg.dims) for layer in layer_schedule(cfg))


def _walk_extents(cfg: NetConfig, input_extents: Sequence[int]):
    extents = tuple(int(e) for e in input_extents)
    if len(extents) != cfg.dims:
        raise ConfigError(f"need {cfg.dims} input extents, got {extents}")
    f = cfg.downsample_factor
    if any(e % f for e in extents):
        raise ConfigError(f"input extents {extents} must be divisible by {f}")
    cur = extents
    for layer in layer_schedule(cfg):
        spec = layer.conv_specs(cfg.dims)[0][1] if layer.kind != "lk" else None
        if layer.kind == "lk":
            out = cur
        else:
            out = spec.output_spatial(cur)
        yield layer, out
        cur = out


def layer_rows(cfg: NetConfig, input_extents: Sequence[int]) -> List[LayerRow]:
    rows = []
    for layer, out in _walk_extents(cfg, input_extents):
        vox = math.prod(out)
        macs = 0
        for _, spec in layer.conv_specs(cfg.dims):
            macs += spec.in_channels * spec.out_channels * math.prod(spec.kernel) * vox
        if layer.kind == "lk":
            kern = "+".join(str(k) for _, k in layer.lk.branches) + ("+id" if layer.lk.use_identity else "")
        else:
            kern = str(layer.kernel)
        rows.append(LayerRow(layer.name, layer.kind, layer.in_channels, layer.out_channels, kern,
                             layer.stride, out, _layer_params(layer, cfg.dims), macs))
    return rows


def count_mult_adds(cfg: NetConfig, input_extents: Sequence[int]) -> int:
    return sum(r.mult_adds for r in layer_rows(cfg, input_extents))


def kernel_growth_ratio(k_from: int, k_to: int, dims: int = 3) -> Fraction:
    """Weight-count ratio of a k_to^dims kernel to a k_from^dims kernel."""
    if k_from < 1 or k_to < 1 or k_from % 2 == 0 or k_to % 2 == 0:
        raise ConfigError("kernel sizes must be odd and positive")
    return Fraction(k_to ** dims, k_from ** dims)


def receptive_field_of_layers(layers: Sequence[Tuple[int, Fraction]]) -> int:
    """r = 1 + sum_i (k_i - 1) * prod_{j<i} s_j over (kernel, stride) pairs.

    Strides may be fractional (up-sampling).
    """
    r = Fraction(1)
    jump = Fraction(1)
    for k, s in layers:
        r += (k - 1) * jump
        jump *= Fraction(s)
    if r.denominator != 1:
        raise ValueError(f"non-integral receptive field {r}")
    return int(r)


def receptive_field(cfg: NetConfig) -> Tuple[int, ...]:
    """Theoretical receptive field along the longest (non-skip) path.

    A kernel-2 stride-2 transposed conv maps every output voxel to exactly
    one input voxel, so it enters as kernel 1 with stride 1/2.
    """
    path = []
    for layer in layer_schedule(cfg):
        if layer.kind == "up":
            path.append((math.ceil(layer.kernel / layer.stride), Fraction(1, layer.stride)))
        else:
            path.append((layer.kernel, Fraction(layer.stride)))
    r = receptive_field_of_layers(path)
    return (r,) * cfg.dims


def analyze(cfg: NetConfig, input_extents: Sequence[int]) -> ComplexityReport:
    rows = layer_rows(cfg, input_extents)
    return ComplexityReport(
        config=cfg,
        input_extents=tuple(input_extents),
        parameter_count=sum(r.params for r in rows),
        mult_adds=sum(r.mult_adds for r in rows),
        receptive_field=receptive_field(cfg),
        layers=rows,
    )
