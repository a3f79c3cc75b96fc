"""Architectural building blocks.

* ConvScale: a convolution with learned per-input-channel and per-output-channel
  scales, collapsible into a plain convolution for inference.
* ConvScale311 residual blocks and CS-Chains (``R`` repeated blocks).
* Per-resolution learned spatial scales.
* 2-D Haar / inverse Haar resampling, and the trick of folding the Haar
  matrix into the adjacent 1x1 convolution so resampling costs no MACs.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .kernels import ConvWeights, conv2d, conv_macs, depth_to_space, relu, space_to_depth

logger = logging.getLogger(__name__)

CHANNELS_PER_GROUP = 32

# Rows give LL, LH, HL, HH as combinations of the 2x2 block (TL, TR, BL, BR).
# The matrix is symmetric and orthogonal, so it is its own inverse.
HAAR_MATRIX = 0.5 * np.array(
    [
        [1, 1, 1, 1],
        [1, 1, -1, -1],
        [1, -1, 1, -1],
        [1, -1, -1, 1],
    ],
    dtype=np.float64,
)


@dataclass(frozen=True, eq=False)
class ConvScaleParams:
    """A convolution plus learned input scale ``(1, C//G, 1, 1)`` and output
    scale ``(K, 1, 1, 1)``."""

    base: ConvWeights
    s_in: np.ndarray
    s_out: np.ndarray

    def __post_init__(self):
        k, cg = self.base.weight.shape[:2]
        if np.shape(self.s_in) != (1, cg, 1, 1):
            raise ValueError(f"s_in must have shape (1, {cg}, 1, 1), got {np.shape(self.s_in)}")
        if np.shape(self.s_out) != (k, 1, 1, 1):
            raise ValueError(f"s_out must have shape ({k}, 1, 1, 1), got {np.shape(self.s_out)}")
        for s in (self.s_in, self.s_out):
            if not np.all(np.isfinite(s)) or np.any(s == 0):
                raise ValueError("scales must be finite and nonzero")

    def param_count(self) -> int:
        return self.base.param_count() + int(self.s_in.size + self.s_out.size)


def convscale_forward(x, p: ConvScaleParams) -> np.ndarray:
    """Training-form ConvScale: scale the input channels, convolve, scale the
    output channels.  Numerically this is ``conv(x, s_in * s_out * W) +
    s_out * b``."""
    x = np.asarray(x)
    w = p.base
    g = w.groups
    s_in = np.asarray(p.s_in, dtype=np.float32).reshape(-1)
    # s_in indexes the channel within a group, so it repeats across groups.
    x_scaled = x * np.tile(s_in, g)[None, :, None, None]
    y = conv2d(x_scaled, w)
    return y * np.asarray(p.s_out, dtype=np.float32).reshape(1, -1, 1, 1)


def convscale_collapse(p: ConvScaleParams) -> ConvWeights:
    """Fold both scales into the weight and bias of a plain convolution."""
    w = p.base
    weight = (np.asarray(p.s_in) * np.asarray(p.s_out) * w.weight).astype(w.weight.dtype)
    bias = (np.asarray(p.s_out).reshape(-1) * w.bias).astype(w.bias.dtype)
    return ConvWeights(weight, bias, w.stride, w.padding, w.groups)


def spatial_scale(x, gamma) -> np.ndarray:
    """Per-channel learned scaling of activations, ``gamma`` shaped ``(1, C, 1, 1)``."""
    return np.asarray(x) * np.asarray(gamma, dtype=np.asarray(x).dtype)


# ---------------------------------------------------------------------------
# Haar resampling
# ---------------------------------------------------------------------------


def haar_resample(x, direction: str) -> np.ndarray:
    """Orthonormal 2-D Haar analysis (``"down"``) or synthesis (``"up"``).

    ``down`` maps ``(B, C, H, W) -> (B, 4C, H/2, W/2)`` with channel blocks
    ``[LL, LH, HL, HH]``; ``up`` inverts it.  Arithmetic is done in float64
    and float64 is returned: the coefficients are dyadic (+-1/2) so a float32
    input survives ``up(down(x))`` exactly, which would not hold if the
    coefficients were rounded back to float32.
    """
    x = np.asarray(x, dtype=np.float64)
    if direction == "down":
        b, c, h, w = x.shape
        if h % 2 or w % 2:
            raise ValueError(f"Haar down needs even spatial dims, got {h}x{w}")
        a = x[:, :, 0::2, 0::2]
        bb = x[:, :, 0::2, 1::2]
        cc = x[:, :, 1::2, 0::2]
        d = x[:, :, 1::2, 1::2]
        ll = (a + bb + cc + d) / 2
        lh = (a + bb - cc - d) / 2
        hl = (a - bb + cc - d) / 2
        hh = (a - bb - cc + d) / 2
        return np.concatenate([ll, lh, hl, hh], axis=1)
    if direction == "up":
        b, c4, h, w = x.shape
        if c4 % 4:
            raise ValueError(f"Haar up needs channels divisible by 4, got {c4}")
        c = c4 // 4
        ll, lh, hl, hh = (x[:, i * c:(i + 1) * c] for i in range(4))
        out = np.empty((b, c, 2 * h, 2 * w), dtype=np.float64)
        out[:, :, 0::2, 0::2] = (ll + lh + hl + hh) / 2
        out[:, :, 0::2, 1::2] = (ll + lh - hl - hh) / 2
        out[:, :, 1::2, 0::2] = (ll - lh + hl - hh) / 2
        out[:, :, 1::2, 1::2] = (ll - lh - hl + hh) / 2
        return out
    raise ValueError(f"direction must be 'down' or 'up', got {direction!r}")


@dataclass(frozen=True)
class Reshuffle:
    """The pixel reshuffle that remains after a Haar transform is folded away."""

    op: str  # "space_to_depth" (before the conv) or "depth_to_space" (after)
    factor: int = 2

    def apply(self, x):
        if self.op == "space_to_depth":
            return space_to_depth(x, self.factor)
        return depth_to_space(x, self.factor)


def _haar_kron(c: int) -> np.ndarray:
    return np.kron(HAAR_MATRIX, np.eye(c))


def haar_collapse_into_conv(direction: str, c1x1: ConvWeights) -> tuple[Reshuffle, ConvWeights]:
    """Fold a Haar (or inverse Haar) transform into an adjacent 1x1 conv.

    ``down``: ``haar_resample(x, "down") -> c1x1`` becomes
    ``space_to_depth(x, 2) -> conv(W @ (H kron I))``.

    ``up``: ``c1x1 -> haar_resample(., "up")`` becomes
    ``conv((H kron I) @ W) -> depth_to_space(., 2)``.
    """
    k, cg, ky, kx = c1x1.weight.shape
    if (ky, kx) != (1, 1) or c1x1.stride != 1 or c1x1.padding != 0:
        raise ValueError("Haar collapse needs a 1x1, stride-1, unpadded convolution")
    if c1x1.groups != 1:
        raise ValueError("Haar collapse needs an ungrouped convolution")
    w = c1x1.weight[:, :, 0, 0].astype(np.float64)
    if direction == "down":
        if cg % 4:
            raise ValueError(f"down collapse needs 4*C input channels, got {cg}")
        new_w = w @ _haar_kron(cg // 4)
        new_b = np.asarray(c1x1.bias, dtype=np.float64)
        shuffle = Reshuffle("space_to_depth")
    elif direction == "up":
        if k % 4:
            raise ValueError(f"up collapse needs 4*C output channels, got {k}")
        m = _haar_kron(k // 4)
        new_w = m @ w
        new_b = m @ np.asarray(c1x1.bias, dtype=np.float64)
        shuffle = Reshuffle("depth_to_space")
    else:
        raise ValueError(f"direction must be 'down' or 'up', got {direction!r}")
    dtype = c1x1.weight.dtype
    return shuffle, ConvWeights(new_w[:, :, None, None].astype(dtype), new_b.astype(dtype))


# ---------------------------------------------------------------------------
# ConvScale311 and CS-Chain
# ---------------------------------------------------------------------------


def group_count(channels: int, per_group: int = CHANNELS_PER_GROUP) -> int:
    """Groups for a 3x3 conv: ``channels / 32`` when that divides evenly, else 1."""
    if channels >= per_group and channels % per_group == 0:
        return channels // per_group
    return 1


@dataclass(frozen=True)
class BlockSpec:
    C: int
    E: int = 1
    F: int = 1
    channels_per_group: int = CHANNELS_PER_GROUP

    def __post_init__(self):
        if self.C < 1:
            raise ValueError(f"C must be positive, got {self.C}")
        for name in ("E", "F"):
            v = getattr(self, name)
            if v not in (1, 2, 3, 4):
                raise ValueError(f"{name} must be in {{1, 2, 3, 4}}, got {v}")

    @property
    def groups(self) -> int:
        return group_count(self.C, self.channels_per_group)

    def conv_shapes(self) -> list[tuple[int, int, int, int]]:
        """``(c_in, c_out, kernel, groups)`` of the three convolutions, in order."""
        c, e, f = self.C, self.E, self.F
        return [(c, e * c, 3, self.groups), (e * c, f * c, 1, 1), (f * c, c, 1, 1)]

    def macs_per_pixel(self) -> int:
        return sum(co * (ci // g) * k * k for ci, co, k, g in self.conv_shapes())


@dataclass(frozen=True, eq=False)
class Block311Weights:
    expand: ConvScaleParams  # 3x3 grouped, C -> E*C
    mix: ConvScaleParams  # 1x1, E*C -> F*C
    project: ConvScaleParams  # 1x1, F*C -> C


def _as_plain(p) -> ConvWeights:
    return convscale_collapse(p) if isinstance(p, ConvScaleParams) else p


def _apply(x, p, collapsed: bool):
    if isinstance(p, ConvScaleParams):
        return conv2d(x, convscale_collapse(p)) if collapsed else convscale_forward(x, p)
    return conv2d(x, p)


def convscale311_forward(x, spec: BlockSpec, weights: Block311Weights, collapsed: bool = False):
    """Inverted-residual block: 3x3 grouped expand, ReLU, 1x1, ReLU, 1x1, add."""
    x = np.asarray(x)
    if x.shape[1] != spec.C:
        raise ValueError(f"block expects {spec.C} channels, got {x.shape[1]}")
    h = relu(_apply(x, weights.expand, collapsed))
    h = relu(_apply(h, weights.mix, collapsed))
    h = _apply(h, weights.project, collapsed)
    return x + h


def cs_chain_forward(x, spec: BlockSpec, R: int, weights, collapsed: bool = False):
    """Apply ``R`` ConvScale311 blocks in sequence; ``weights`` holds one entry per block."""
    if R < 0:
        raise ValueError("R must be non-negative")
    if len(weights) != R:
        raise ValueError(f"expected {R} block weights, got {len(weights)}")
    if R == 0:
        logger.debug("CS-Chain with R=0 acts as identity")
    for bw in weights:
        x = convscale311_forward(x, spec, bw, collapsed)
    return x


def chain_macs_per_pixel(spec: BlockSpec, R: int) -> int:
    return R * spec.macs_per_pixel()


def collapsed_block(weights: Block311Weights) -> tuple[ConvWeights, ConvWeights, ConvWeights]:
    return tuple(_as_plain(p) for p in (weights.expand, weights.mix, weights.project))


def plain_conv_macs(w) -> int:
    return conv_macs(_as_plain(w))
