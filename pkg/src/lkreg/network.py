"""U-Net and LKU-Net registration networks.

The architecture is described once, as an ordered list of :class:`LayerInfo`
records produced by :func:`layer_schedule`. Both the builder and the analytic
complexity counters walk that list, so the counted parameters always equal the
materialised ones.

Encoder (5 levels): two convs at full resolution, then per level a stride-2
conv followed by one same-resolution block. For ``lku_net`` those four blocks
are LK blocks. Decoder: stride-2 transposed conv, skip concatenation, two
convs per level, three at the top, the last one (no bias, no activation)
emitting ``dims`` channels.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Dict, List, Optional, Tuple

import numpy as np

from .conv import ConvSpec, conv, conv_transpose
from .errors import ConfigError, ShapeError
from .tensor import Tensor, add, concat, leaky_relu, make_op

VARIANTS = ("vanilla_unet", "lku_net")


@dataclass(frozen=True)
class LKBlockConfig:
    in_channels: int
    out_channels: int
    k: int = 5
    use_large: bool = True
    use_3x3: bool = True
    use_1x1: bool = True
    use_identity: bool = True
    dims: int = 3

    def __post_init__(self):
        if self.k < 3 or self.k % 2 == 0:
            raise ConfigError(f"LK kernel size must be odd and >= 3, got {self.k}")
        if self.dims not in (2, 3):
            raise ConfigError(f"dims must be 2 or 3, got {self.dims}")
        if not (self.use_large or self.use_3x3 or self.use_1x1 or self.use_identity):
            raise ConfigError("an LK block needs at least one enabled branch")
        if self.use_identity and self.in_channels != self.out_channels:
            raise ConfigError(
                f"identity branch needs in_channels == out_channels ({self.in_channels} != {self.out_channels})"
            )

    @property
    def branches(self) -> List[Tuple[str, int]]:
        """Enabled convolution branches as (name, kernel size).

        With k == 3 the large branch would duplicate the 3-kernel one and is
        dropped.
        """
        out = []
        if self.use_large and not (self.k == 3 and self.use_3x3):
            out.append(("large", self.k))
        if self.use_3x3:
            out.append(("regular", 3))
        if self.use_1x1:
            out.append(("one", 1))
        return out

    @property
    def fused_kernel(self) -> int:
        ks = [k for _, k in self.branches]
        return max(ks) if ks else 1

    def branch_spec(self, kernel: int) -> ConvSpec:
        return ConvSpec(self.in_channels, self.out_channels, (kernel,) * self.dims, dims=self.dims)


@dataclass(frozen=True)
class NetConfig:
    dims: int = 3
    C: int = 8
    k: Optional[int] = None
    variant: str = "lku_net"
    diffeomorphic: bool = False
    squaring_steps: int = 7
    levels: int = 5
    lk_block_count: int = 4
    use_large: bool = True
    use_3x3: bool = True
    use_1x1: bool = True
    use_identity: bool = True
    bottleneck: Optional[str] = None
    prelu_init: float = 0.2
    head_init: str = "normal"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.dims not in (2, 3):
            raise ConfigError(f"dims must be 2 or 3, got {self.dims}")
        if self.C < 1:
            raise ConfigError("C must be positive")
        k = self.k if self.k is not None else (3 if self.variant == "vanilla_unet" else 5)
        if k % 2 == 0 or k < 1 or (self.variant == "lku_net" and k < 3):
            raise ConfigError(f"kernel size k must be odd (>= 3 for LK blocks), got {k}")
        object.__setattr__(self, "k", k)
        if self.levels < 2:
            raise ConfigError("need at least 2 resolution levels")
        if self.squaring_steps < 0:
            raise ConfigError("squaring_steps must be >= 0")
        bn = self.bottleneck or ("narrow" if self.variant == "lku_net" else "wide")
        if bn not in ("wide", "narrow"):
            raise ConfigError(f"bottleneck must be 'wide' or 'narrow', got {bn!r}")
        object.__setattr__(self, "bottleneck", bn)
        if self.variant == "lku_net":
            if not 0 <= self.lk_block_count <= self.levels - 1:
                raise ConfigError(f"lk_block_count must be in [0, {self.levels - 1}]")
            if not (self.use_large or self.use_3x3 or self.use_1x1 or self.use_identity):
                raise ConfigError("an LK block needs at least one enabled branch")
        if self.head_init not in ("normal", "zeros"):
            raise ConfigError("head_init must be 'normal' or 'zeros'")

    @property
    def downsample_factor(self) -> int:
        return 2 ** (self.levels - 1)

    # -- flat key=value serialisation ---------------------------------------
    _KEYMAP = {"identity": "use_identity", "one_by_one": "use_1x1", "large": "use_large", "three_by_three": "use_3x3"}

    def to_text(self) -> str:
        rev = {v: k for k, v in self._KEYMAP.items()}
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{rev.get(f.name, f.name)}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "NetConfig":
        types = {f.name: f.type for f in fields(cls)}
        kw = {}
        for raw in text.splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"malformed config line: {raw!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            name = cls._KEYMAP.get(key, key)
            if name not in types:
                raise ConfigError(f"unknown config key {key!r}")
            kw[name] = _parse_value(val, types[name], key)
        return cls(**kw)


def _parse_value(val: str, typ, key: str):
    typ = str(typ)
    try:
        if "bool" in typ:
            low = val.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(val)
            return low in ("true", "1", "yes")
        if "int" in typ:
            return None if val.lower() == "none" else int(val)
        if "float" in typ:
            return float(val)
        return None if val.lower() == "none" else val
    except ValueError:
        raise ConfigError(f"bad value for {key}: {val!r}") from None


def load_net_config(path) -> NetConfig:
    with open(path) as fh:
        return NetConfig.from_text(fh.read())


# -- layer schedule ---------------------------------------------------------------
@dataclass(frozen=True)
class LayerInfo:
    """One parameterised layer of the network, in forward order.

    kind: 'conv' (conv + PReLU), 'lk' (LK block + PReLU), 'up' (transposed
    conv + PReLU) or 'head' (conv, no bias, no activation). ``level`` is the
    resolution level of the layer's output (0 = full resolution).
    """

    name: str
    kind: str
    in_channels: int
    out_channels: int
    kernel: int
    stride: int
    level: int
    lk: Optional[LKBlockConfig] = None

    def conv_specs(self, dims: int) -> List[Tuple[str, ConvSpec]]:
        if self.kind == "lk":
            return [(b, self.lk.branch_spec(kk)) for b, kk in self.lk.branches]
        if self.kind == "up":
            return [("", ConvSpec(self.in_channels, self.out_channels, (self.kernel,) * dims, stride=self.stride,
                                  dims=dims, transposed=True))]
        return [("", ConvSpec(self.in_channels, self.out_channels, (self.kernel,) * dims, stride=self.stride,
                              dims=dims, has_bias=self.kind != "head"))]

    @property
    def has_activation(self) -> bool:
        return self.kind != "head"


def layer_schedule(cfg: NetConfig) -> List[LayerInfo]:
    """Ordered layers of the network described by ``cfg``."""
    C, L, d = cfg.C, cfg.levels, cfg.dims
    lku = cfg.variant == "lku_net"
    kc = 3 if lku else cfg.k  # plain conv kernel
    ch = [C * 2 ** i for i in range(L - 1)]  # encoder widths of levels 0..L-2
    layers: List[LayerInfo] = []
    n = 0

    def block(name, cin, cout, level, lk_level):
        if lku and lk_level <= cfg.lk_block_count:
            lkc = LKBlockConfig(cin, cout, cfg.k, cfg.use_large, cfg.use_3x3, cfg.use_1x1, cfg.use_identity, d)
            return LayerInfo(name, "lk", cin, cout, lkc.fused_kernel, 1, level, lkc)
        return LayerInfo(name, "conv", cin, cout, kc, 1, level)

    layers.append(LayerInfo("enc0_in", "conv", 2, ch[0], kc, 1, 0))
    layers.append(LayerInfo("enc0_conv", "conv", ch[0], ch[0], kc, 1, 0))
    for lv in range(1, L - 1):
        layers.append(LayerInfo(f"enc{lv}_down", "conv", ch[lv - 1], ch[lv], kc, 2, lv))
        layers.append(block(f"enc{lv}_block", ch[lv], ch[lv], lv, lv))
    top = ch[L - 2]
    if cfg.bottleneck == "wide":
        layers.append(LayerInfo(f"enc{L - 1}_down", "conv", top, 2 * top, kc, 2, L - 1))
        # channel-reducing block: an identity branch is impossible here
        if cfg.use_identity:
            layers.append(LayerInfo(f"enc{L - 1}_block", "conv", 2 * top, top, kc, 1, L - 1))
        else:
            layers.append(block(f"enc{L - 1}_block", 2 * top, top, L - 1, L - 1))
    else:
        layers.append(LayerInfo(f"enc{L - 1}_down", "conv", top, top, kc, 2, L - 1))
        layers.append(block(f"enc{L - 1}_block", top, top, L - 1, L - 1))

    x = top
    for t in range(L - 2, -1, -1):
        layers.append(LayerInfo(f"dec{t}_up", "up", x, x, 2, 2, t))
        cin = x + ch[t]
        if t >= 2:
            a, b = ch[t], ch[t] // 2
        elif t == 1:
            a, b = 2 * ch[1], ch[1]
        else:
            a = b = 2 * ch[0]
        layers.append(LayerInfo(f"dec{t}_conv1", "conv", cin, a, kc, 1, t))
        layers.append(LayerInfo(f"dec{t}_conv2", "conv", a, b, kc, 1, t))
        x = b
    layers.append(LayerInfo("head", "head", x, d, kc, 1, 0))
    return layers


# -- parameters -------------------------------------------------------------------------
def parameter_shapes(cfg: NetConfig) -> Dict[str, Tuple[int, ...]]:
    """Ordered name -> shape map of every learnable tensor."""
    shapes: Dict[str, Tuple[int, ...]] = {}
    for layer in layer_schedule(cfg):
        for branch, spec in layer.conv_specs(cfg.dims):
            pre = f"{layer.name}.{branch}" if branch else layer.name
            shapes[f"{pre}.weight"] = spec.weight_shape
            if spec.has_bias:
                shapes[f"{pre}.bias"] = (spec.out_channels,)
        if layer.has_activation:
            shapes[f"{layer.name}.prelu"] = (1,)
    return shapes


def init_parameters(cfg: NetConfig, seed: int = 0, dtype=np.float32) -> Dict[str, np.ndarray]:
    """Uniform(+-1/sqrt(fan_in)) for convs, tiny normal (or zeros) for the head."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in parameter_shapes(cfg).items():
        if name.endswith(".prelu"):
            params[name] = np.full(shape, cfg.prelu_init, dtype=dtype)
            continue
        layer, _, kind = name.rpartition(".")
        if layer == "head":
            if cfg.head_init == "zeros":
                params[name] = np.zeros(shape, dtype=dtype)
            else:
                params[name] = (rng.standard_normal(shape) * 1e-5).astype(dtype)
            continue
        wshape = shape if kind == "weight" else parameter_shapes(cfg)[f"{layer}.weight"]
        transposed = layer.endswith("_up")
        fan_in = (wshape[0] if transposed else wshape[1]) * math.prod(wshape[2:])
        bound = 1.0 / math.sqrt(fan_in)
        params[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return params


# -- LK block ------------------------------------------------------------------------------
def _embed_kernel_array(w: np.ndarray, k: int) -> np.ndarray:
    small = w.shape[2]
    off = (k - small) // 2
    out = np.zeros(w.shape[:2] + (k,) * (w.ndim - 2), dtype=w.dtype)
    out[(slice(None), slice(None)) + (slice(off, off + small),) * (w.ndim - 2)] = w
    return out


def _embed_kernel(w: Tensor, k: int) -> Tensor:
    small = w.shape[2]
    if small == k:
        return w
    off = (k - small) // 2
    sl = (slice(None), slice(None)) + (slice(off, off + small),) * (w.ndim - 2)
    return make_op(_embed_kernel_array(w.data, k), (w,), lambda g: (g[sl],), "embed_kernel")


def _identity_kernel(channels: int, k: int, dims: int, dtype) -> np.ndarray:
    w = np.zeros((channels, channels) + (k,) * dims, dtype=dtype)
    c = k // 2
    for i in range(channels):
        w[(i, i) + (c,) * dims] = 1
    return w


def _check_lk_weights(block: LKBlockConfig, weights: Dict[str, object]):
    enabled = {b for b, _ in block.branches}
    for key in weights:
        branch = key.split(".")[0]
        if branch in ("large", "regular", "one") and branch not in enabled:
            raise ConfigError(f"weight supplied for disabled LK branch {branch!r}")
    for b in enabled:
        if f"{b}.weight" not in weights:
            raise ConfigError(f"missing weight for LK branch {b!r}")


def lk_branch_sum(x: Tensor, block: LKBlockConfig, weights: Dict[str, Tensor]) -> Tensor:
    """Pre-activation LK output: sum of enabled conv branches plus identity."""
    _check_lk_weights(block, weights)
    out = None
    for b, kk in block.branches:
        y = conv(x, weights[f"{b}.weight"], weights.get(f"{b}.bias"), spec=block.branch_spec(kk))
        out = y if out is None else add(out, y)
    if block.use_identity:
        out = x if out is None else add(out, x)
    return out


def lk_fused_sum(x: Tensor, block: LKBlockConfig, weights: Dict[str, Tensor]) -> Tensor:
    """Same value as :func:`lk_branch_sum`, computed as one convolution.

    The fused kernel is assembled differentiably from the branch weights, so
    gradients still reach every branch.
    """
    _check_lk_weights(block, weights)
    k = block.fused_kernel
    w = b = None
    for br, _ in block.branches:
        wk = _embed_kernel(weights[f"{br}.weight"], k)
        w = wk if w is None else add(w, wk)
        bb = weights[f"{br}.bias"]
        b = bb if b is None else add(b, bb)
    if block.use_identity:
        ident = Tensor(_identity_kernel(block.out_channels, k, block.dims, x.dtype))
        w = ident if w is None else add(w, ident)
    if b is None:
        b = Tensor(np.zeros(block.out_channels, dtype=x.dtype))
    return conv(x, w, b, spec=ConvSpec(block.in_channels, block.out_channels, (k,) * block.dims, dims=block.dims))


def lk_block_forward(x: Tensor, block: LKBlockConfig, weights: Dict[str, Tensor],
                     slope=0.2, fused: bool = False) -> Tensor:
    """LK block: element-wise sum of the parallel branches, then (P)ReLU."""
    pre = lk_fused_sum(x, block, weights) if fused else lk_branch_sum(x, block, weights)
    return leaky_relu(pre, slope)


def fuse_lk_block(block: LKBlockConfig, weights: Dict[str, np.ndarray]):
    """Collapse an LK block into one convolution: returns (spec, weight, bias).

    Smaller kernels are zero-padded to the largest one, identity becomes a
    centre spike, biases add. Exact by linearity.
    """
    weights = {k: (v.data if isinstance(v, Tensor) else np.asarray(v)) for k, v in weights.items()}
    _check_lk_weights(block, weights)
    k = block.fused_kernel
    dtype = next(iter(weights.values())).dtype if weights else np.float64
    w = np.zeros((block.out_channels, block.in_channels) + (k,) * block.dims, dtype=dtype)
    bias = np.zeros(block.out_channels, dtype=dtype)
    for br, _ in block.branches:
        w += _embed_kernel_array(weights[f"{br}.weight"], k)
        bias += weights[f"{br}.bias"]
    if block.use_identity:
        w += _identity_kernel(block.out_channels, k, block.dims, dtype)
    spec = ConvSpec(block.in_channels, block.out_channels, (k,) * block.dims, dims=block.dims)
    return spec, w, bias


# -- network ---------------------------------------------------------------------------------
class Network:
    """A materialised registration network: config, layer list, parameters.

    Input is the stacked pair [B, 2, *spatial] (fixed first, moving second);
    output is a [B, dims, *spatial] displacement (or velocity) field.
    """

    def __init__(self, cfg: NetConfig, params: Optional[Dict[str, np.ndarray]] = None, seed: int = 0,
                 dtype=np.float32, fused_lk: bool = True):
        self.cfg = cfg
        self.layers = layer_schedule(cfg)
        shapes = parameter_shapes(cfg)
        if params is None:
            params = init_parameters(cfg, seed=seed, dtype=dtype)
        missing = set(shapes) - set(params)
        extra = set(params) - set(shapes)
        if missing or extra:
            raise ConfigError(f"parameter set mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        self.params: Dict[str, Tensor] = {}
        for name, shape in shapes.items():
            arr = np.asarray(params[name])
            if tuple(arr.shape) != tuple(shape):
                raise ShapeError(f"parameter {name} has shape {arr.shape}, expected {shape}")
            self.params[name] = Tensor(arr.astype(dtype, copy=True), requires_grad=True)
        self.fused_lk = fused_lk

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    def named_parameters(self):
        return list(self.params.items())

    def n_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def flat_parameters(self) -> np.ndarray:
        return np.concatenate([p.data.ravel() for p in self.params.values()])

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def _layer_params(self, name: str) -> Dict[str, Tensor]:
        pre = name + "."
        return {k[len(pre):]: v for k, v in self.params.items() if k.startswith(pre)}

    def _apply(self, layer: LayerInfo, x: Tensor) -> Tensor:
        p = self._layer_params(layer.name)
        if layer.kind == "lk":
            w = {k: v for k, v in p.items() if k != "prelu"}
            return lk_block_forward(x, layer.lk, w, p["prelu"], fused=self.fused_lk)
        (_, spec), = layer.conv_specs(self.cfg.dims)
        if layer.kind == "up":
            y = conv_transpose(x, p["weight"], p["bias"], spec=spec)
        else:
            y = conv(x, p["weight"], p.get("bias"), spec=spec)
        return leaky_relu(y, p["prelu"]) if layer.has_activation else y

    def check_input(self, x_shape) -> None:
        d = self.cfg.dims
        if len(x_shape) != d + 2 or x_shape[1] != 2:
            raise ShapeError(f"network input must be [B, 2, {d} spatial dims], got {tuple(x_shape)}")
        f = self.cfg.downsample_factor
        if any(n % f for n in x_shape[2:]):
            raise ShapeError(f"spatial extents {tuple(x_shape[2:])} must be divisible by {f}")

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)

    def forward(self, x: Tensor) -> Tensor:
        self.check_input(x.shape)
        if x.dtype != self.dtype:
            x = Tensor(x.data.astype(self.dtype))
        skips: Dict[int, Tensor] = {}
        for layer in self.layers:
            if layer.kind == "up":
                x = self._apply(layer, x)
                x = concat([x, skips[layer.level]], axis=1)
                continue
            x = self._apply(layer, x)
            if layer.name.startswith("enc") and layer.name.endswith(("_conv", "_block")):
                skips[layer.level] = x
        return x


def build_network(cfg: NetConfig, seed: int = 0, dtype=np.float32, **kw) -> Network:
    return Network(cfg, seed=seed, dtype=dtype, **kw)
