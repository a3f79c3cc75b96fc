"""Model family: configurations, graph construction, cost counting and init.

A :class:`ModelConfig` fully determines a :class:`ModelGraph`, a flat list of
nodes annotated with the spatial downsampling factor (relative to the image)
at which each convolution runs.  Weights live separately in a
:class:`WeightStore` (a plain ``dict`` of named arrays) so that graphs can be
built and costed without allocating anything, which the architecture search
relies on.

Four roles are supported:

``outer_encoder``
    image (+ level channels) -> Haar down -> stage -> ... -> y at 1/16,
    then two more Haar-down + 1x1 steps to the hyper-latent z at 1/64.
``outer_decoder``
    y (+ level channels) -> Haar up -> stage -> ... -> RGB at full resolution.
``scale_decoder`` / ``context_decoder``
    z -> two (Haar up + CS-Chain) stages -> 1x1 head producing either the
    scale-index logits (C_y channels) or the context prior (2 C_y channels).
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Iterator, Union

import numpy as np

from .kernels import ConvWeights, conv2d, conv_transpose2d, depth_to_space, relu, space_to_depth
from .layers import (
    Block311Weights,
    BlockSpec,
    ConvScaleParams,
    convscale_collapse,
    convscale_forward,
    group_count,
    haar_collapse_into_conv,
    haar_resample,
)

logger = logging.getLogger(__name__)

ROLES = ("outer_encoder", "outer_decoder", "scale_decoder", "context_decoder")
SCHEDULES = ("none", "channelwise4", "checkerboard", "grid2x2")
RESAMPLING_MODES = ("haar", "shuffle", "strided")
LEARNED_SCALE_MODES = ("both", "convscale", "spatial", "none")

WeightStore = dict  # name -> np.ndarray


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ChainConfig:
    R: int
    E: int = 1
    F: int = 1


@dataclass(frozen=True)
class StageConfig:
    C: int
    chain1: ChainConfig
    chain2: ChainConfig

    @classmethod
    def of(cls, C, r1, e1, f1, r2, e2, f2) -> "StageConfig":
        return cls(C, ChainConfig(r1, e1, f1), ChainConfig(r2, e2, f2))

    def as_tuple(self) -> tuple[int, ...]:
        a, b = self.chain1, self.chain2
        return (self.C, a.R, a.E, a.F, b.R, b.E, b.F)


@dataclass(frozen=True)
class ModelConfig:
    role: str
    stages: tuple[StageConfig, ...]
    latent_channels: int = 192
    hyper_channels: int = 64
    hyper_hidden: int = 128
    context_schedule: str = "grid2x2"
    resampling: str = "haar"
    learned_scale: str = "both"
    learned_qwidth: bool = True
    level_channels: int = 8
    image_channels: int = 3

    @property
    def convscale(self) -> bool:
        return self.learned_scale in ("both", "convscale")

    @property
    def spatial_scales(self) -> bool:
        return self.learned_scale in ("both", "spatial")

    def validate(self) -> "ModelConfig":
        """Raise ``ValueError`` naming the first offending field."""
        if self.role not in ROLES:
            raise ValueError(f"role: unknown role {self.role!r}")
        if not self.stages:
            raise ValueError("stages: at least one stage is required")
        if self.role in ("outer_encoder", "outer_decoder") and len(self.stages) != 3:
            raise ValueError(f"stages: outer networks need exactly 3 stages, got {len(self.stages)}")
        if self.role in ("scale_decoder", "context_decoder") and len(self.stages) != 2:
            raise ValueError(f"stages: {self.role} needs exactly 2 stages, got {len(self.stages)}")
        for i, st in enumerate(self.stages):
            if not isinstance(st.C, int) or st.C < 1:
                raise ValueError(f"stages[{i}].C: must be a positive integer, got {st.C!r}")
            if st.C >= 32 and st.C % 32:
                raise ValueError(f"stages[{i}].C: must be a multiple of 32 when >= 32, got {st.C}")
            for cname in ("chain1", "chain2"):
                ch = getattr(st, cname)
                if not isinstance(ch.R, int) or ch.R < 0:
                    raise ValueError(f"stages[{i}].{cname}.R: must be >= 0, got {ch.R!r}")
                for hp in ("E", "F"):
                    if getattr(ch, hp) not in (1, 2, 3, 4):
                        raise ValueError(
                            f"stages[{i}].{cname}.{hp}: must be in 1..4, got {getattr(ch, hp)!r}"
                        )
        for name in ("latent_channels", "hyper_channels", "hyper_hidden", "level_channels", "image_channels"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < (0 if name == "level_channels" else 1):
                raise ValueError(f"{name}: must be a positive integer, got {v!r}")
        if self.context_schedule not in SCHEDULES:
            raise ValueError(f"context_schedule: unknown schedule {self.context_schedule!r}")
        if self.resampling not in RESAMPLING_MODES:
            raise ValueError(f"resampling: unknown mode {self.resampling!r}")
        if self.learned_scale not in LEARNED_SCALE_MODES:
            raise ValueError(f"learned_scale: unknown mode {self.learned_scale!r}")
        return self

    # key-value text form, used by the weights container
    def to_kv(self) -> dict[str, str]:
        kv = {
            "role": self.role,
            "stages": ";".join(",".join(str(v) for v in st.as_tuple()) for st in self.stages),
        }
        for name in (
            "latent_channels",
            "hyper_channels",
            "hyper_hidden",
            "context_schedule",
            "resampling",
            "learned_scale",
            "level_channels",
            "image_channels",
        ):
            kv[name] = str(getattr(self, name))
        kv["learned_qwidth"] = "1" if self.learned_qwidth else "0"
        return kv

    @classmethod
    def from_kv(cls, kv: dict[str, str]) -> "ModelConfig":
        stages = tuple(
            StageConfig.of(*(int(v) for v in chunk.split(","))) for chunk in kv["stages"].split(";")
        )
        ints = ("latent_channels", "hyper_channels", "hyper_hidden", "level_channels", "image_channels")
        return cls(
            role=kv["role"],
            stages=stages,
            context_schedule=kv["context_schedule"],
            resampling=kv["resampling"],
            learned_scale=kv["learned_scale"],
            learned_qwidth=kv["learned_qwidth"] == "1",
            **{k: int(kv[k]) for k in ints},
        ).validate()


# Final values of the searched outer networks.
FINAL_ENCODER_STAGES = (
    StageConfig.of(64, 1, 1, 2, 1, 4, 2),
    StageConfig.of(96, 2, 1, 1, 3, 4, 1),
    StageConfig.of(96, 2, 1, 1, 4, 1, 1),
)
FINAL_DECODER_STAGES = (
    StageConfig.of(160, 3, 1, 1, 2, 1, 2),
    StageConfig.of(64, 2, 1, 1, 1, 4, 2),
    StageConfig.of(32, 2, 2, 2, 1, 3, 2),
)
HYPER_DECODER_STAGES = (
    StageConfig.of(96, 2, 1, 1, 0, 1, 1),
    StageConfig.of(64, 2, 1, 1, 0, 1, 1),
)


def final_config(role: str, **overrides) -> ModelConfig:
    stages = {
        "outer_encoder": FINAL_ENCODER_STAGES,
        "outer_decoder": FINAL_DECODER_STAGES,
        "scale_decoder": HYPER_DECODER_STAGES,
        "context_decoder": HYPER_DECODER_STAGES,
    }[role]
    return ModelConfig(role=role, stages=stages, **overrides).validate()


def tiny_config(role: str, **overrides) -> ModelConfig:
    """A small member of the family for fast end-to-end runs."""
    if role in ("outer_encoder", "outer_decoder"):
        stages = tuple(StageConfig.of(32, 1, 1, 1, 0, 1, 1) for _ in range(3))
    else:
        stages = (StageConfig.of(32, 1, 1, 1, 0, 1, 1), StageConfig.of(32, 1, 1, 1, 0, 1, 1))
    base = dict(latent_channels=32, hyper_channels=16, hyper_hidden=32)
    base.update(overrides)
    return ModelConfig(role=role, stages=stages, **base).validate()


# ---------------------------------------------------------------------------
# Graph nodes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConvNode:
    """A convolution.  ``scale`` is the downsampling factor of the grid on
    which its MACs are counted (output grid; input grid for transposed)."""

    name: str
    c_in: int
    c_out: int
    kernel: int = 1
    stride: int = 1
    padding: int = 0
    groups: int = 1
    scale: int = 1
    convscale: bool = True
    transposed: bool = False
    gain: float = 1.0
    bias_init: float = 0.0

    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.c_out, self.c_in // self.groups, self.kernel, self.kernel)

    def macs(self) -> int:
        return self.c_out * (self.c_in // self.groups) * self.kernel * self.kernel

    def macs_per_pixel(self) -> float:
        return self.macs() / (self.scale * self.scale)

    def param_count(self) -> int:
        n = self.c_out * (self.c_in // self.groups) * self.kernel ** 2 + self.c_out
        if self.convscale:
            n += self.c_in // self.groups + self.c_out
        return n


@dataclass(frozen=True)
class ResampleNode:
    """A x2 resampling coupled with a channel change.

    ``haar``: Haar transform + 1x1 conv (collapsible); ``shuffle``: plain
    pixel (un)shuffle + 1x1 conv; ``strided``: 3x3 stride-2 conv down,
    4x4 stride-2 transposed conv up.
    """

    name: str
    direction: str
    mode: str
    c_in: int
    c_out: int
    conv: ConvNode


@dataclass(frozen=True)
class BlockNode:
    name: str
    spec: BlockSpec
    convs: tuple[ConvNode, ConvNode, ConvNode]


@dataclass(frozen=True)
class ScaleNode:
    name: str
    channels: int
    scale: int


@dataclass(frozen=True)
class ActNode:
    name: str


@dataclass(frozen=True)
class TapNode:
    name: str


Node = Union[ConvNode, ResampleNode, BlockNode, ScaleNode, ActNode, TapNode]


@dataclass(frozen=True)
class ModelGraph:
    config: ModelConfig
    nodes: tuple
    in_channels: int
    in_scale: int
    out_channels: int
    out_scale: int

    def conv_nodes(self) -> Iterator[ConvNode]:
        for node in self.nodes:
            if isinstance(node, ConvNode):
                yield node
            elif isinstance(node, ResampleNode):
                yield node.conv
            elif isinstance(node, BlockNode):
                yield from node.convs

    def scale_nodes(self) -> Iterator[ScaleNode]:
        return (n for n in self.nodes if isinstance(n, ScaleNode))

    def validate(self) -> "ModelGraph":
        """Check channel/resolution bookkeeping without executing anything."""
        c, d = self.in_channels, self.in_scale
        for node in self.nodes:
            if isinstance(node, ConvNode):
                if node.c_in != c:
                    raise ValueError(f"{node.name}: expects {node.c_in} channels, gets {c}")
                c = node.c_out
            elif isinstance(node, ResampleNode):
                if node.c_in != c:
                    raise ValueError(f"{node.name}: expects {node.c_in} channels, gets {c}")
                c = node.c_out
                d = d * 2 if node.direction == "down" else d // 2
            elif isinstance(node, BlockNode):
                if node.spec.C != c:
                    raise ValueError(f"{node.name}: expects {node.spec.C} channels, gets {c}")
                convs = node.convs
                if convs[0].c_in != c or convs[2].c_out != c:
                    raise ValueError(f"{node.name}: residual branch does not return to {c}")
                if convs[0].c_out != convs[1].c_in or convs[1].c_out != convs[2].c_in:
                    raise ValueError(f"{node.name}: inner convolutions do not chain")
            elif isinstance(node, ScaleNode):
                if node.channels != c:
                    raise ValueError(f"{node.name}: scales {node.channels} channels, gets {c}")
        if c != self.out_channels or d != self.out_scale:
            raise ValueError(
                f"graph ends with {c} channels at 1/{d}, declared {self.out_channels} at 1/{self.out_scale}"
            )
        return self


# ---------------------------------------------------------------------------
# Builders
# ---------------------------------------------------------------------------


def _resample(cfg: ModelConfig, name: str, direction: str, c_in: int, c_out: int, d_in: int) -> ResampleNode:
    cs = cfg.convscale
    if direction == "down":
        d_out = d_in * 2
        if cfg.resampling == "strided":
            conv = ConvNode(f"{name}.conv", c_in, c_out, 3, 2, 1, 1, d_out, cs)
        else:
            conv = ConvNode(f"{name}.conv", 4 * c_in, c_out, 1, 1, 0, 1, d_out, cs)
    else:
        if cfg.resampling == "strided":
            conv = ConvNode(f"{name}.conv", c_in, c_out, 4, 2, 1, 1, d_in, cs, transposed=True)
        else:
            conv = ConvNode(f"{name}.conv", c_in, 4 * c_out, 1, 1, 0, 1, d_in, cs)
    return ResampleNode(name, direction, cfg.resampling, c_in, c_out, conv)


def _chain(cfg: ModelConfig, name: str, C: int, chain: ChainConfig, d: int) -> list[BlockNode]:
    spec = BlockSpec(C, chain.E, chain.F)
    shapes = spec.conv_shapes()
    blocks = []
    for r in range(chain.R):
        prefix = f"{name}.b{r}"
        convs = (
            ConvNode(f"{prefix}.expand", *shapes[0][:2], 3, 1, 1, shapes[0][3], d, cfg.convscale, gain=2.0),
            ConvNode(f"{prefix}.mix", *shapes[1][:2], 1, 1, 0, 1, d, cfg.convscale, gain=2.0),
            ConvNode(f"{prefix}.project", *shapes[2][:2], 1, 1, 0, 1, d, cfg.convscale, gain=0.02),
        )
        blocks.append(BlockNode(prefix, spec, convs))
    return blocks


def _stage(cfg: ModelConfig, i: int, st: StageConfig, d: int) -> list:
    nodes = _chain(cfg, f"s{i}.c1", st.C, st.chain1, d) + _chain(cfg, f"s{i}.c2", st.C, st.chain2, d)
    if cfg.spatial_scales:
        nodes.append(ScaleNode(f"s{i}.gamma", st.C, d))
    return nodes


def build_graph(cfg: ModelConfig) -> ModelGraph:
    """Build the (weightless) layer graph for ``cfg``."""
    cfg.validate()
    nodes: list = []
    if cfg.role == "outer_encoder":
        c_in = cfg.image_channels + cfg.level_channels
        prev, d = c_in, 1
        for i, st in enumerate(cfg.stages):
            nodes.append(_resample(cfg, f"down{i}", "down", prev, st.C, d))
            d *= 2
            nodes += _stage(cfg, i, st, d)
            prev = st.C
        nodes.append(_resample(cfg, "latent", "down", prev, cfg.latent_channels, d))
        d *= 2
        nodes.append(TapNode("y"))
        nodes.append(_resample(cfg, "hyper0", "down", cfg.latent_channels, cfg.hyper_hidden, d))
        d *= 2
        nodes.append(ActNode("hyper0.act"))
        nodes.append(_resample(cfg, "hyper1", "down", cfg.hyper_hidden, cfg.hyper_channels, d))
        d *= 2
        graph = ModelGraph(cfg, tuple(nodes), c_in, 1, cfg.hyper_channels, d)
    elif cfg.role == "outer_decoder":
        c_in = cfg.latent_channels + cfg.level_channels
        prev, d = c_in, 16
        for i, st in enumerate(cfg.stages):
            nodes.append(_resample(cfg, f"up{i}", "up", prev, st.C, d))
            d //= 2
            nodes += _stage(cfg, i, st, d)
            prev = st.C
        nodes.append(_resample(cfg, "image", "up", prev, cfg.image_channels, d))
        d //= 2
        graph = ModelGraph(cfg, tuple(nodes), c_in, 16, cfg.image_channels, d)
    else:
        prev, d = cfg.hyper_channels, 64
        for i, st in enumerate(cfg.stages):
            nodes.append(_resample(cfg, f"up{i}", "up", prev, st.C, d))
            d //= 2
            nodes += _stage(cfg, i, st, d)
            prev = st.C
        if cfg.role == "scale_decoder":
            head = ConvNode("head", prev, cfg.latent_channels, 1, 1, 0, 1, d, cfg.convscale, bias_init=32.0)
        else:
            head = ConvNode("head", prev, 2 * cfg.latent_channels, 1, 1, 0, 1, d, cfg.convscale)
        nodes.append(head)
        graph = ModelGraph(cfg, tuple(nodes), cfg.hyper_channels, 64, head.c_out, d)
    return graph.validate()


# ---------------------------------------------------------------------------
# Cost counting
# ---------------------------------------------------------------------------


def count_macs_per_pixel(graph) -> float:
    """Thousands of MACs per image pixel.  Haar transforms are folded into
    their 1x1 convolutions and elementwise ops are free, so only convolutions
    contribute."""
    graph = getattr(graph, "graph", graph)
    return sum(node.macs_per_pixel() for node in graph.conv_nodes()) / 1000.0


def count_params(graph) -> int:
    graph = getattr(graph, "graph", graph)
    n = sum(node.param_count() for node in graph.conv_nodes())
    n += sum(node.channels for node in graph.scale_nodes())
    return n


_stage_cache: dict = {}


def _cached_macs(key, make_nodes) -> float:
    v = _stage_cache.get(key)
    if v is None:
        nodes = make_nodes()
        total = 0.0
        for node in nodes:
            if isinstance(node, BlockNode):
                total += sum(c.macs_per_pixel() for c in node.convs)
            elif isinstance(node, ResampleNode):
                total += node.conv.macs_per_pixel()
            elif isinstance(node, ConvNode):
                total += node.macs_per_pixel()
        v = _stage_cache[key] = total
    return v


def analytic_kmacs(cfg: ModelConfig) -> float:
    """Same value as ``count_macs_per_pixel(build_graph(cfg))`` without
    building the graph; per-stage sums are memoised so sweeping a search
    space costs a few dictionary lookups per configuration."""
    shared = (cfg.resampling, cfg.convscale, cfg.spatial_scales)
    total = 0.0
    if cfg.role == "outer_encoder":
        prev, d = cfg.image_channels + cfg.level_channels, 1
        for i, st in enumerate(cfg.stages):
            total += _cached_macs(("rs", "down", prev, st.C, d) + shared,
                                  lambda: [_resample(cfg, "r", "down", prev, st.C, d)])
            d *= 2
            total += _cached_macs(("st", i, st, d) + shared, lambda: _stage(cfg, i, st, d))
            prev = st.C
        tail = [(prev, cfg.latent_channels), (cfg.latent_channels, cfg.hyper_hidden),
                (cfg.hyper_hidden, cfg.hyper_channels)]
        for c_in, c_out in tail:
            total += _cached_macs(("rs", "down", c_in, c_out, d) + shared,
                                  lambda: [_resample(cfg, "r", "down", c_in, c_out, d)])
            d *= 2
        return total / 1000.0
    if cfg.role == "outer_decoder":
        prev, d = cfg.latent_channels + cfg.level_channels, 16
        final = cfg.image_channels
    else:
        prev, d = cfg.hyper_channels, 64
        final = None
    for i, st in enumerate(cfg.stages):
        total += _cached_macs(("rs", "up", prev, st.C, d) + shared,
                              lambda: [_resample(cfg, "r", "up", prev, st.C, d)])
        d //= 2
        total += _cached_macs(("st", i, st, d) + shared, lambda: _stage(cfg, i, st, d))
        prev = st.C
    if final is not None:
        total += _cached_macs(("rs", "up", prev, final, d) + shared,
                              lambda: [_resample(cfg, "r", "up", prev, final, d)])
    else:
        k = cfg.latent_channels * (1 if cfg.role == "scale_decoder" else 2)
        total += prev * k / (d * d)
    return total / 1000.0


# ---------------------------------------------------------------------------
# Weights
# ---------------------------------------------------------------------------


def _rng_for(seed: int, name: str) -> np.random.Generator:
    digest = hashlib.blake2b(f"{int(seed)}:{name}".encode(), digest_size=16).digest()
    return np.random.Generator(np.random.PCG64(int.from_bytes(digest, "little")))


def _uniform(seed: int, name: str, shape, bound: float) -> np.ndarray:
    u = _rng_for(seed, name).random(shape)  # float64 built from integer draws
    return ((2.0 * u - 1.0) * bound).astype(np.float32)


def init_weights(graph: ModelGraph, seed: int = 0) -> WeightStore:
    """Fan-in scaled uniform init; every scale starts at 1.

    Each tensor draws from its own PCG64 stream keyed by ``(seed, name)``, so
    stores are byte-identical across runs and platforms.
    """
    store: WeightStore = {}
    for node in graph.conv_nodes():
        if node.transposed:
            shape = (node.c_out, node.c_in, node.kernel, node.kernel)
            fan_in = node.c_in * node.kernel * node.kernel / (node.stride * node.stride)
        else:
            shape = node.weight_shape()
            fan_in = shape[1] * shape[2] * shape[3]
        bound = math.sqrt(3.0 * node.gain / fan_in)
        store[f"{node.name}.weight"] = _uniform(seed, node.name, shape, bound)
        store[f"{node.name}.bias"] = np.full(node.c_out, node.bias_init, dtype=np.float32)
        if node.convscale:
            store[f"{node.name}.s_in"] = np.ones((1, shape[1], 1, 1), dtype=np.float32)
            store[f"{node.name}.s_out"] = np.ones((node.c_out, 1, 1, 1), dtype=np.float32)
    for node in graph.scale_nodes():
        store[f"{node.name}.gamma"] = np.ones((1, node.channels, 1, 1), dtype=np.float32)
    return store


# ---------------------------------------------------------------------------
# Execution
# ---------------------------------------------------------------------------


@dataclass
class Model:
    """A graph together with its weights."""

    graph: ModelGraph
    weights: WeightStore
    _plain: dict = field(default_factory=dict, repr=False)

    @property
    def config(self) -> ModelConfig:
        return self.graph.config

    def params(self, node: ConvNode):
        w = self.weights
        base = ConvWeights(
            w[f"{node.name}.weight"], w[f"{node.name}.bias"], node.stride, node.padding, node.groups
        )
        if node.convscale:
            return ConvScaleParams(base, w[f"{node.name}.s_in"], w[f"{node.name}.s_out"])
        return base

    def plain(self, node: ConvNode) -> ConvWeights:
        """Inference weights with ConvScale scales folded in (cached)."""
        w = self._plain.get(node.name)
        if w is None:
            p = self.params(node)
            w = self._plain[node.name] = convscale_collapse(p) if isinstance(p, ConvScaleParams) else p
        return w

    def plain_resample(self, node: ResampleNode):
        """``(shuffle, weights)`` for a resampling node, Haar folded in."""
        key = node.name + "#resample"
        v = self._plain.get(key)
        if v is None:
            w = self.plain(node.conv)
            if node.mode == "haar":
                v = haar_collapse_into_conv(node.direction, w)
            else:
                v = (None, w)
            self._plain[key] = v
        return v

    def invalidate(self) -> None:
        self._plain.clear()

    def _conv(self, x, node: ConvNode, collapsed: bool):
        if collapsed or not node.convscale:
            w = self.plain(node)
            return conv_transpose2d(x, w) if node.transposed else conv2d(x, w)
        p = self.params(node)
        if node.transposed:
            return conv_transpose2d(x, convscale_collapse(p))
        return convscale_forward(x, p)

    def _resample(self, x, node: ResampleNode, collapsed: bool):
        if node.mode == "strided":
            return self._conv(x, node.conv, collapsed)
        if node.mode == "haar" and collapsed:
            shuffle, w = self.plain_resample(node)
            if node.direction == "down":
                return conv2d(shuffle.apply(x), w)
            return shuffle.apply(conv2d(x, w))
        if node.direction == "down":
            if node.mode == "haar":
                h = haar_resample(x, "down").astype(np.float32)
            else:
                h = space_to_depth(x, 2)
            return self._conv(h, node.conv, collapsed)
        h = self._conv(x, node.conv, collapsed)
        if node.mode == "haar":
            return haar_resample(h, "up").astype(np.float32)
        return depth_to_space(h, 2)

    def forward(self, x, collapsed: bool = True) -> dict[str, np.ndarray]:
        """Run the graph.  Returns ``{"out": ..., <tap name>: ...}``.

        ``collapsed=False`` runs the training form (explicit scales and Haar
        transforms); ``True`` runs the folded inference form.
        """
        x = np.asarray(x, dtype=np.float32)
        if x.ndim != 4 or x.shape[1] != self.graph.in_channels:
            raise ValueError(f"expected (B, {self.graph.in_channels}, H, W) input, got {x.shape}")
        taps = {}
        for node in self.graph.nodes:
            if isinstance(node, ResampleNode):
                x = self._resample(x, node, collapsed)
            elif isinstance(node, BlockNode):
                a, b, c = node.convs
                h = relu(self._conv(x, a, collapsed))
                h = relu(self._conv(h, b, collapsed))
                x = x + self._conv(h, c, collapsed)
            elif isinstance(node, ConvNode):
                x = self._conv(x, node, collapsed)
            elif isinstance(node, ScaleNode):
                x = x * self.weights[f"{node.name}.gamma"]
            elif isinstance(node, ActNode):
                x = relu(x)
            elif isinstance(node, TapNode):
                taps[node.name] = x
        taps["out"] = x
        return taps

    def block_weights(self, node: BlockNode) -> Block311Weights:
        return Block311Weights(*(self.params(c) for c in node.convs))


def build_model(cfg: ModelConfig, seed: int = 0) -> Model:
    """Build the graph for ``cfg`` and initialise its weights from ``seed``."""
    graph = build_graph(cfg)
    return Model(graph, init_weights(graph, seed))


def with_config(cfg: ModelConfig, **changes) -> ModelConfig:
    return replace(cfg, **changes).validate()


__all__ = [
    "ROLES",
    "SCHEDULES",
    "ChainConfig",
    "StageConfig",
    "ModelConfig",
    "ModelGraph",
    "Model",
    "ConvNode",
    "ResampleNode",
    "BlockNode",
    "ScaleNode",
    "ActNode",
    "TapNode",
    "build_graph",
    "build_model",
    "init_weights",
    "count_macs_per_pixel",
    "count_params",
    "analytic_kmacs",
    "final_config",
    "tiny_config",
    "with_config",
    "group_count",
]
