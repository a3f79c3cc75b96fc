"""Dense tensor kernels on NCHW numpy arrays.

Everything here is a pure function of its inputs.  Tensors are rank-4
``(batch, channels, height, width)`` arrays, ``float32`` unless a caller
explicitly passes ``float64``.  Convolutions accumulate in a fixed order
(kernel offset outermost, then a matrix product over input channels) so that
repeated calls give identical results.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "ConvWeights",
    "as_tensor",
    "conv2d",
    "conv_transpose2d",
    "space_to_depth",
    "depth_to_space",
    "avg_pool2d",
    "relu",
    "conv_macs",
]


def as_tensor(x, dtype=np.float32) -> np.ndarray:
    """Coerce ``x`` to a rank-4 array, keeping float64 input as float64."""
    x = np.asarray(x)
    if x.ndim != 4:
        raise ValueError(f"expected a rank-4 NCHW tensor, got shape {x.shape}")
    if x.dtype == np.float64:
        return x
    return x.astype(dtype, copy=False)


@dataclass(frozen=True, eq=False)
class ConvWeights:
    """Weights of a (possibly grouped) 2-D convolution.

    ``weight`` has shape ``(K, C // groups, Y, X)`` and ``bias`` has shape
    ``(K,)``.
    """

    weight: np.ndarray
    bias: np.ndarray
    stride: int = 1
    padding: int = 0
    groups: int = 1

    def __post_init__(self):
        w = np.asarray(self.weight)
        b = np.asarray(self.bias)
        if w.ndim != 4:
            raise ValueError(f"conv weight must be rank 4, got {w.shape}")
        if b.shape != (w.shape[0],):
            raise ValueError(f"bias shape {b.shape} does not match K={w.shape[0]}")
        if self.stride < 1 or self.padding < 0 or self.groups < 1:
            raise ValueError("stride, groups must be positive and padding non-negative")
        if w.shape[0] % self.groups:
            raise ValueError(f"K={w.shape[0]} not divisible by groups={self.groups}")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise ValueError("convolution weights must be finite")

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1] * self.groups

    @property
    def kernel_size(self) -> tuple[int, int]:
        return self.weight.shape[2], self.weight.shape[3]

    def param_count(self) -> int:
        return int(self.weight.size + self.bias.size)


def conv_macs(w: ConvWeights) -> int:
    """Multiply-accumulates per output pixel: ``K * (C // G) * Y * X``."""
    k, cg, ky, kx = w.weight.shape
    return k * cg * ky * kx


def conv2d(x, w: ConvWeights) -> np.ndarray:
    """Grouped 2-D cross-correlation with zero padding."""
    x = as_tensor(x)
    weight = np.asarray(w.weight)
    dtype = np.result_type(x.dtype, np.float32)
    if dtype == np.float64:
        weight = weight.astype(np.float64, copy=False)
    else:
        weight = weight.astype(np.float32, copy=False)
    bias = np.asarray(w.bias, dtype=dtype)

    b, c, h, wd = x.shape
    k, cg, ky, kx = weight.shape
    g = w.groups
    if c != cg * g:
        raise ValueError(f"input has {c} channels, weights expect {cg * g}")
    p, s = w.padding, w.stride
    if h + 2 * p < ky or wd + 2 * p < kx:
        raise ValueError(f"input {h}x{wd} (+padding {p}) smaller than kernel {ky}x{kx}")

    ho = (h + 2 * p - ky) // s + 1
    wo = (wd + 2 * p - kx) // s + 1
    if p:
        x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))

    kg = k // g
    # (Y, X, G, K/G, C/G): contiguous per-offset taps keep matmul on BLAS
    taps = np.ascontiguousarray(weight.reshape(g, kg, cg, ky, kx).transpose(3, 4, 0, 1, 2))
    out = np.zeros((b, g, kg, ho * wo), dtype=dtype)
    for dy in range(ky):
        for dx in range(kx):
            patch = x[:, :, dy:dy + s * (ho - 1) + 1:s, dx:dx + s * (wo - 1) + 1:s]
            patch = patch.reshape(b, g, cg, ho * wo)
            out += np.matmul(taps[dy, dx], patch)
    out = out.reshape(b, k, ho, wo)
    out += bias[None, :, None, None]
    return out


def conv_transpose2d(x, w: ConvWeights) -> np.ndarray:
    """Transposed convolution (ungrouped) with weight shaped ``(K, C, Y, X)``.

    Implemented as zero insertion followed by a stride-1 correlation with the
    spatially flipped kernel, so the output size is
    ``(H - 1) * stride - 2 * padding + Y``.
    """
    x = as_tensor(x)
    if w.groups != 1:
        raise ValueError("grouped transposed convolution is not supported")
    b, c, h, wd = x.shape
    k, cin, ky, kx = np.asarray(w.weight).shape
    if c != cin:
        raise ValueError(f"input has {c} channels, weights expect {cin}")
    s, p = w.stride, w.padding
    if p > ky - 1 or p > kx - 1:
        raise ValueError("padding larger than kernel - 1")
    up = np.zeros((b, c, (h - 1) * s + 1, (wd - 1) * s + 1), dtype=x.dtype)
    up[:, :, ::s, ::s] = x
    py, px = ky - 1 - p, kx - 1 - p
    up = np.pad(up, ((0, 0), (0, 0), (py, py), (px, px)))
    flipped = np.ascontiguousarray(np.asarray(w.weight)[:, :, ::-1, ::-1])
    return conv2d(up, ConvWeights(flipped, np.asarray(w.bias)))


def space_to_depth(x, factor: int) -> np.ndarray:
    """Fold each ``factor x factor`` block into channels.

    Output channel ``(dy * factor + dx) * C + c`` holds input channel ``c`` at
    phase ``(dy, dx)``, i.e. channel groups are ordered row-major by phase.
    """
    x = np.asarray(x)
    if factor < 1:
        raise ValueError("factor must be positive")
    b, c, h, w = x.shape
    if h % factor or w % factor:
        raise ValueError(f"spatial dims {h}x{w} not divisible by {factor}")
    if factor == 1:
        return x
    f = factor
    y = x.reshape(b, c, h // f, f, w // f, f).transpose(0, 3, 5, 1, 2, 4)
    return y.reshape(b, f * f * c, h // f, w // f)


def depth_to_space(x, factor: int) -> np.ndarray:
    """Exact inverse of :func:`space_to_depth`."""
    x = np.asarray(x)
    if factor < 1:
        raise ValueError("factor must be positive")
    b, cf, h, w = x.shape
    f = factor
    if cf % (f * f):
        raise ValueError(f"{cf} channels not divisible by {f * f}")
    if f == 1:
        return x
    c = cf // (f * f)
    y = x.reshape(b, f, f, c, h, w).transpose(0, 3, 4, 1, 5, 2)
    return y.reshape(b, c, h * f, w * f)


def avg_pool2d(x, k: int) -> np.ndarray:
    """Non-overlapping ``k x k`` mean pooling.

    Sizes that are not multiples of ``k`` are first padded by edge
    replication, so the output is ``ceil(H / k) x ceil(W / k)``.
    """
    if k < 1:
        raise ValueError("pooling size must be positive")
    x = np.asarray(x)
    if k == 1:
        return x
    b, c, h, w = x.shape
    ph, pw = (-h) % k, (-w) % k
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="edge")
    h2, w2 = (h + ph) // k, (w + pw) // k
    return x.reshape(b, c, h2, k, w2, k).mean(axis=(3, 5), dtype=np.float64).astype(
        np.result_type(x.dtype, np.float32), copy=False
    )


def relu(x) -> np.ndarray:
    return np.maximum(x, 0)
