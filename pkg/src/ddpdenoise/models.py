"""U-Net and U-Net++ denoisers.

A :class:`Graph` is an ordered set of named parameters and batch-norm
buffers plus the config that says how to run them. Replicas are made by
rebuilding from ``(cfg, seed)``; initialization draws every parameter from
its own keyed stream, so construction order never affects values.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import nn
from .errors import ConfigError, SizeError
from .rng import keyed_generator
from .tensor import DType, Tensor, add, concat_channels, relu, scale


@dataclass(frozen=True)
class ModelConfig:
    arch: str = "unet"
    base_ch: int = 8
    depth: int = 4
    in_ch: int = 1
    out_ch: int = 1
    deep_supervision: bool = False

    def __post_init__(self):
        if self.arch not in ("unet", "unetpp"):
            raise ConfigError(f"unknown arch {self.arch!r}")
        if self.base_ch < 1 or self.depth < 2:
            raise ConfigError("base_ch must be >= 1 and depth >= 2")
        if self.in_ch != 1 or self.out_ch != 1:
            raise ConfigError("models are single-channel in and out")

    def width(self, level: int) -> int:
        return self.base_ch * 2 ** level

    def to_dict(self) -> dict:
        return asdict(self)


class Graph:
    def __init__(self, cfg: ModelConfig, seed: int, dtype: DType = DType.F32):
        self.cfg = cfg
        self.seed = seed
        self.dtype = dtype
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, Tensor] = {}
        self.bn_momentum = 0.1
        self.bn_eps = 1e-5

    # -- construction ------------------------------------------------------------

    def _param(self, name: str, shape, fan_in: int | None = None, zero: bool = False,
               fill: float | None = None) -> None:
        if name in self.params:
            raise ConfigError(f"duplicate parameter {name}")
        if fill is not None:
            data = np.full(shape, fill)
        elif zero:
            data = np.zeros(shape)
        else:
            # Kaiming-uniform, ReLU gain
            bound = np.sqrt(2.0) * np.sqrt(3.0 / fan_in)
            data = keyed_generator(self.seed, name).uniform(-bound, bound, size=shape)
        self.params[name] = Tensor(data.astype(np.float32), self.dtype, requires_grad=True)

    def add_conv(self, name: str, cin: int, cout: int, k: int) -> None:
        self._param(f"{name}.weight", (cout, cin, k, k), fan_in=cin * k * k)
        self._param(f"{name}.bias", (cout,), zero=True)

    def add_conv_t(self, name: str, cin: int, cout: int) -> None:
        self._param(f"{name}.weight", (cin, cout, 2, 2), fan_in=cin)
        self._param(f"{name}.bias", (cout,), zero=True)

    def add_bn(self, name: str, c: int) -> None:
        self._param(f"{name}.gamma", (c,), fill=1.0)
        self._param(f"{name}.beta", (c,), zero=True)
        self.buffers[f"{name}.running_mean"] = Tensor(np.zeros(c), self.dtype)
        self.buffers[f"{name}.running_var"] = Tensor(np.ones(c), self.dtype)

    def add_double_conv(self, name: str, cin: int, cout: int) -> None:
        self.add_conv(f"{name}.conv1", cin, cout, 3)
        self.add_bn(f"{name}.bn1", cout)
        self.add_conv(f"{name}.conv2", cout, cout, 3)
        self.add_bn(f"{name}.bn2", cout)

    # -- running -----------------------------------------------------------------

    def conv(self, name: str, x: Tensor, padding: int) -> Tensor:
        return nn.conv2d(x, self.params[f"{name}.weight"], self.params[f"{name}.bias"],
                         padding=padding)

    def bn(self, name: str, x: Tensor, mode: str) -> Tensor:
        state = nn.BatchNormState(self.params[f"{name}.gamma"], self.params[f"{name}.beta"],
                                  self.buffers[f"{name}.running_mean"],
                                  self.buffers[f"{name}.running_var"],
                                  self.bn_momentum, self.bn_eps, mode)
        return nn.batchnorm2d(x, state)

    def double_conv(self, name: str, x: Tensor, mode: str) -> Tensor:
        x = relu(self.bn(f"{name}.bn1", self.conv(f"{name}.conv1", x, 1), mode))
        return relu(self.bn(f"{name}.bn2", self.conv(f"{name}.conv2", x, 1), mode))

    def forward(self, batch: Tensor, mode: str = "train") -> list[Tensor]:
        """Run the model; returns one output per head, deepest last."""
        if mode not in ("train", "eval"):
            raise ConfigError(f"mode must be train or eval, got {mode!r}")
        if batch.data.ndim != 4 or batch.shape[1] != self.cfg.in_ch:
            raise SizeError(f"expected [N,{self.cfg.in_ch},H,W], got {batch.shape}")
        check_extent(self.cfg, batch.shape[2], batch.shape[3])
        if batch.dtype is not self.dtype:
            raise SizeError(f"batch dtype {batch.dtype.value} != model dtype {self.dtype.value}")
        if self.cfg.arch == "unet":
            return [_unet_forward(self, batch, mode)]
        return _unetpp_forward(self, batch, mode)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def astype(self, dtype: DType) -> "Graph":
        g = Graph(self.cfg, self.seed, dtype)
        g.params = {k: Tensor(v.data, dtype, requires_grad=True) for k, v in self.params.items()}
        g.buffers = {k: Tensor(v.data, dtype) for k, v in self.buffers.items()}
        return g

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Copies of every parameter and buffer, params first."""
        out = {k: v.data.copy() for k, v in self.params.items()}
        out.update({k: v.data.copy() for k, v in self.buffers.items()})
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for table in (self.params, self.buffers):
            for k, t in table.items():
                src = arrays[k]
                if src.shape != t.shape:
                    raise SizeError(f"{k}: shape {src.shape} != {t.shape}")
                t.data[...] = src


def check_extent(cfg: ModelConfig, h: int, w: int) -> None:
    step = 2 ** (cfg.depth - 1)
    if h % step or w % step:
        raise ConfigError(f"input {h}x{w} is not divisible by {step} for depth {cfg.depth}")


def _unet_forward(g: Graph, x: Tensor, mode: str) -> Tensor:
    skips = []
    for level in range(g.cfg.depth):
        if level:
            x = nn.maxpool2d(x)
        x = g.double_conv(f"enc{level}", x, mode)
        skips.append(x)
    for level in range(g.cfg.depth - 2, -1, -1):
        up = nn.conv_transpose2d(x, g.params[f"up{level}.weight"], g.params[f"up{level}.bias"])
        x = g.double_conv(f"dec{level}", concat_channels(skips[level], up), mode)
    return g.conv("head", x, 0)


def unetpp_nodes(depth: int) -> list[tuple[int, int]]:
    """Grid nodes (level i, column j) in evaluation order."""
    nodes = []
    for s in range(depth):
        for i in range(s, -1, -1):
            nodes.append((i, s - i))
    return nodes


def ablate_intermediate(nodes: list[tuple[int, int]], depth: int) -> list[tuple[int, int]]:
    """Decoder nodes that survive when only the outermost path is kept."""
    return [(i, j) for i, j in nodes if j >= 1 and i + j == depth - 1]


def unetpp_heads(cfg: ModelConfig) -> list[int]:
    if cfg.deep_supervision:
        return list(range(1, cfg.depth))
    return [cfg.depth - 1]


def _unetpp_forward(g: Graph, x: Tensor, mode: str) -> list[Tensor]:
    cfg = g.cfg
    grid: dict[tuple[int, int], Tensor] = {}
    for i, j in unetpp_nodes(cfg.depth):
        if j == 0:
            inp = x if i == 0 else nn.maxpool2d(grid[(i - 1, 0)])
        else:
            inp = grid[(i, 0)]
            for k in range(1, j):
                inp = concat_channels(inp, grid[(i, k)])
            inp = concat_channels(inp, nn.bilinear_upsample2d(grid[(i + 1, j - 1)]))
        grid[(i, j)] = g.double_conv(f"x{i}_{j}", inp, mode)
    return [g.conv(f"head{j}", grid[(0, j)], 0) for j in unetpp_heads(cfg)]


def build_unet(cfg: ModelConfig, seed: int, dtype: DType = DType.F32) -> Graph:
    if cfg.arch != "unet":
        raise ConfigError("build_unet needs arch='unet'")
    g = Graph(cfg, seed, dtype)
    for level in range(cfg.depth):
        cin = cfg.in_ch if level == 0 else cfg.width(level - 1)
        g.add_double_conv(f"enc{level}", cin, cfg.width(level))
    for level in range(cfg.depth - 2, -1, -1):
        g.add_conv_t(f"up{level}", cfg.width(level + 1), cfg.width(level))
        g.add_double_conv(f"dec{level}", 2 * cfg.width(level), cfg.width(level))
    g.add_conv("head", cfg.width(0), cfg.out_ch, 1)
    return g


def build_unetpp(cfg: ModelConfig, seed: int, dtype: DType = DType.F32) -> Graph:
    if cfg.arch != "unetpp":
        raise ConfigError("build_unetpp needs arch='unetpp'")
    g = Graph(cfg, seed, dtype)
    for i, j in unetpp_nodes(cfg.depth):
        if j == 0:
            cin = cfg.in_ch if i == 0 else cfg.width(i - 1)
        else:
            cin = j * cfg.width(i) + cfg.width(i + 1)
        g.add_double_conv(f"x{i}_{j}", cin, cfg.width(i))
    for j in unetpp_heads(cfg):
        g.add_conv(f"head{j}", cfg.width(0), cfg.out_ch, 1)
    return g


def build_model(cfg: ModelConfig, seed: int, dtype: DType = DType.F32) -> Graph:
    return (build_unet if cfg.arch == "unet" else build_unetpp)(cfg, seed, dtype)


def param_count(g: Graph) -> int:
    return sum(p.size for p in g.params.values())


def training_loss(outputs: list[Tensor], target: Tensor) -> Tensor:
    """Unweighted mean of the per-head L1 losses."""
    total = nn.l1_loss(outputs[0], target)
    for out in outputs[1:]:
        total = add(total, nn.l1_loss(out, target))
    return total if len(outputs) == 1 else scale(total, 1.0 / len(outputs))
