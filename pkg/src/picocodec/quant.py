"""Integer-only execution of the scale decoder.

The scale decoder picks the entropy-coding tables, so encoder and decoder
must agree on its output bit for bit.  Here it runs on 8-bit unsigned
activations and weights with every rescaling done in fixed point:

* activations: per-tensor affine ``real = scale * (q - zp)``, ranges from
  calibration min/max (always including 0);
* weights: per-output-channel symmetric, ``q_w = round(W / s_w) + 128`` in
  ``[1, 255]``;
* bias: int32 in units of ``s_in * s_w``;
* requantisation: ``out = zp_out + round_shift(acc * m, s)`` where the real
  multiplier ``s_in * s_w / s_out`` equals ``m * 2**-s`` with
  ``m`` in ``[2**30, 2**31)``; ``round_shift`` rounds half away from zero;
* ReLU is a clamp at ``zp_out``.

Lowering folds ConvScale scales, Haar transforms and spatial scales into the
convolutions, leaving three integer ops: convolution (optionally
transposed), depth-to-space, and a two-input residual add.

Two interpreters are provided: a vectorised numpy one (optionally splitting
output channels across threads) and a scalar pure-Python reference used as
an oracle.  Both are exact integer programs and must agree bit for bit.
"""

from __future__ import annotations

import hashlib
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from . import container
from .kernels import ConvWeights, conv2d, conv_transpose2d, depth_to_space, relu
from .model import ActNode, BlockNode, ConvNode, Model, ResampleNode, ScaleNode

logger = logging.getLogger(__name__)

SCALE_FLOOR = 1e-8
WEIGHT_ZP = 128
HEAD_SCALE = 0.25
NUM_SCALE_INDICES = 64
ADD_FRACTION_BITS = 16
ACC_LIMIT = 1 << 31
BIAS_LIMIT = 1 << 30


# ---------------------------------------------------------------------------
# Fixed-point helpers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class QuantParams:
    scale: float
    zero_point: int

    def __post_init__(self):
        if not (math.isfinite(self.scale) and self.scale > 0):
            raise ValueError(f"scale must be positive and finite, got {self.scale}")
        if not 0 <= self.zero_point <= 255:
            raise ValueError(f"zero point must be in [0, 255], got {self.zero_point}")


@dataclass(frozen=True)
class QuantizedTensor:
    data: np.ndarray  # uint8
    qp: QuantParams

    def dequantize(self) -> np.ndarray:
        return (self.data.astype(np.float64) - self.qp.zero_point) * self.qp.scale


def quantize_tensor(x, qp: QuantParams) -> QuantizedTensor:
    q = _round_half_away(np.asarray(x, dtype=np.float64) / qp.scale) + qp.zero_point
    return QuantizedTensor(np.clip(q, 0, 255).astype(np.uint8), qp)


def _round_half_away(x):
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize_multiplier(ratio: float) -> tuple[int, int]:
    """``(m, s)`` with ``m * 2**-s == ratio`` to 31 significant bits and
    ``2**30 <= m < 2**31``.  The mantissa is rounded half to even."""
    ratio = float(ratio)
    if not (math.isfinite(ratio) and ratio > 0):
        raise ValueError(f"requantisation ratio must be positive and finite, got {ratio}")
    mant, exp = math.frexp(ratio)  # ratio = mant * 2**exp, mant in [0.5, 1)
    m = round(mant * (1 << 31))  # Python round: half to even
    if m == 1 << 31:
        m //= 2
        exp += 1
    s = 31 - exp
    if not 0 <= s < 63:
        raise ValueError(f"requantisation ratio {ratio:g} needs shift {s}, outside [0, 63)")
    return m, s


def rshift_round(v: int, s: int) -> int:
    """``round(v / 2**s)`` with ties away from zero, on Python integers."""
    if s == 0:
        return v
    half = 1 << (s - 1)
    return (abs(v) + half) >> s if v >= 0 else -((abs(v) + half) >> s)


def _rshift_round_np(v: np.ndarray, s: np.ndarray) -> np.ndarray:
    half = np.where(s > 0, np.left_shift(np.int64(1), np.maximum(s - 1, 0)), 0)
    mag = (np.abs(v) + half) >> s
    return np.where(v < 0, -mag, mag)


# ---------------------------------------------------------------------------
# Integer ops and model
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class QConv:
    """Integer convolution.  ``weight`` is uint8 ``(K, C/G, Y, X)`` with zero
    point 128 (for ``transposed``: ``(K, C, Y, X)`` in forward-conv layout,
    i.e. already spatially flipped and applied after zero insertion)."""

    src: str
    dst: str
    weight: np.ndarray
    bias: np.ndarray  # int32 (K,)
    m: np.ndarray  # int64 (K,)
    shift: np.ndarray  # int64 (K,)
    zp_in: int
    zp_out: int
    stride: int = 1
    padding: int = 0
    groups: int = 1
    transposed: bool = False
    relu: bool = False

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]


@dataclass(frozen=True)
class QDepthToSpace:
    src: str
    dst: str
    factor: int = 2


@dataclass(frozen=True)
class QAdd:
    """``zp_out + round(ra * (qa - zp_a) + rb * (qb - zp_b))`` in fixed point."""

    a: str
    b: str
    dst: str
    zp_a: int
    zp_b: int
    m_a: int
    s_a: int
    m_b: int
    s_b: int
    zp_out: int


QOp = Union[QConv, QDepthToSpace, QAdd]


@dataclass(eq=False)
class QuantizedModel:
    ops: tuple
    in_channels: int
    out_channels: int
    input_qp: QuantParams
    output_qp: QuantParams
    buffer_qp: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        tensors = {}
        meta = {f"cfg.{k}": v for k, v in self.meta.items()}
        meta["kind"] = "quantized-scale-decoder"
        meta["ops"] = str(len(self.ops))
        meta["io"] = f"{self.in_channels},{self.out_channels}"
        meta["input_qp"] = f"{self.input_qp.scale!r},{self.input_qp.zero_point}"
        meta["output_qp"] = f"{self.output_qp.scale!r},{self.output_qp.zero_point}"
        for name, qp in self.buffer_qp.items():
            meta[f"buf.{name}"] = f"{qp.scale!r},{qp.zero_point}"
        for i, op in enumerate(self.ops):
            key = f"op{i:03d}"
            if isinstance(op, QConv):
                meta[key] = (
                    f"conv {op.src} {op.dst} {op.zp_in} {op.zp_out} {op.stride} {op.padding} "
                    f"{op.groups} {int(op.transposed)} {int(op.relu)}"
                )
                tensors[f"{key}.weight"] = op.weight.astype(np.uint8)
                tensors[f"{key}.bias"] = op.bias.astype(np.int32)
                tensors[f"{key}.m"] = op.m.astype(np.int64)
                tensors[f"{key}.shift"] = op.shift.astype(np.int64)
            elif isinstance(op, QDepthToSpace):
                meta[key] = f"d2s {op.src} {op.dst} {op.factor}"
            else:
                meta[key] = (
                    f"add {op.a} {op.b} {op.dst} {op.zp_a} {op.zp_b} {op.m_a} {op.s_a} "
                    f"{op.m_b} {op.s_b} {op.zp_out}"
                )
        return container.dumps(tensors, meta)

    @classmethod
    def from_bytes(cls, data: bytes) -> "QuantizedModel":
        tensors, meta = container.loads(data)
        if meta.get("kind") != "quantized-scale-decoder":
            raise ValueError("container does not hold a quantised scale decoder")

        def qp(text):
            s, z = text.split(",")
            return QuantParams(float(s), int(z))

        ops = []
        for i in range(int(meta["ops"])):
            key = f"op{i:03d}"
            parts = meta[key].split(" ")
            if parts[0] == "conv":
                src, dst = parts[1], parts[2]
                zp_in, zp_out, stride, padding, groups, transposed, is_relu = (int(v) for v in parts[3:])
                ops.append(QConv(src, dst, tensors[f"{key}.weight"], tensors[f"{key}.bias"],
                                 tensors[f"{key}.m"], tensors[f"{key}.shift"], zp_in, zp_out,
                                 stride, padding, groups, bool(transposed), bool(is_relu)))
            elif parts[0] == "d2s":
                ops.append(QDepthToSpace(parts[1], parts[2], int(parts[3])))
            elif parts[0] == "add":
                ops.append(QAdd(parts[1], parts[2], parts[3], *(int(v) for v in parts[4:])))
            else:
                raise ValueError(f"unknown op kind {parts[0]!r}")
        c_in, c_out = (int(v) for v in meta["io"].split(","))
        buffers = {k[4:]: qp(v) for k, v in meta.items() if k.startswith("buf.")}
        cfg = {k[4:]: v for k, v in meta.items() if k.startswith("cfg.")}
        qm = cls(tuple(ops), c_in, c_out, qp(meta["input_qp"]), qp(meta["output_qp"]), buffers, cfg)
        check_overflow(qm)
        return qm

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# Lowering to a float op list (the reference the integer path approximates)
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class _FConv:
    src: str
    dst: str
    w: ConvWeights  # float64
    transposed: bool = False
    relu: bool = False


@dataclass(eq=False)
class _FD2S:
    src: str
    dst: str
    factor: int = 2


@dataclass(eq=False)
class _FAdd:
    a: str
    b: str
    dst: str


def _fold_input_scale(w: ConvWeights, gamma: np.ndarray) -> ConvWeights:
    weight = np.asarray(w.weight, dtype=np.float64)
    g = w.groups
    k, cg = weight.shape[:2]
    gam = np.asarray(gamma, dtype=np.float64).reshape(g, 1, cg, 1, 1)
    weight = (weight.reshape(g, k // g, cg, *weight.shape[2:]) * gam).reshape(weight.shape)
    return ConvWeights(weight, np.asarray(w.bias, dtype=np.float64), w.stride, w.padding, w.groups)


def _as64(w: ConvWeights) -> ConvWeights:
    return ConvWeights(np.asarray(w.weight, dtype=np.float64), np.asarray(w.bias, dtype=np.float64),
                       w.stride, w.padding, w.groups)


def lower_graph(model: Model) -> list:
    """Inference op list with every scale and Haar transform folded in."""
    if model.config.role != "scale_decoder":
        raise ValueError(f"integer lowering expects a scale decoder, got {model.config.role}")
    ops: list = []
    cur = "in"
    counter = iter(range(1, 1 << 30))
    gamma: Optional[np.ndarray] = None

    def fresh() -> str:
        return f"t{next(counter)}"

    def conv(src, w, transposed=False, do_relu=False):
        nonlocal gamma
        w = _as64(w)
        if gamma is not None:
            # input channels sit on axis 1 for both forward and transposed weights
            w = _fold_input_scale(w, gamma)
            gamma = None
        dst = fresh()
        ops.append(_FConv(src, dst, w, transposed, do_relu))
        return dst

    for node in model.graph.nodes:
        if isinstance(node, ResampleNode):
            if node.direction != "up":
                raise ValueError(f"{node.name}: scale decoder only upsamples")
            if node.mode == "strided":
                cur = conv(cur, model.plain(node.conv), transposed=True)
            else:
                _, w = model.plain_resample(node)
                t = conv(cur, w)
                cur = fresh()
                ops.append(_FD2S(t, cur))
        elif isinstance(node, BlockNode):
            if gamma is not None:
                raise ValueError(f"{node.name}: spatial scale must precede a plain convolution")
            a, b, c = (model.plain(n) for n in node.convs)
            h = conv(cur, a, do_relu=True)
            h = conv(h, b, do_relu=True)
            h = conv(h, c)
            dst = fresh()
            ops.append(_FAdd(cur, h, dst))
            cur = dst
        elif isinstance(node, ScaleNode):
            g = np.asarray(model.weights[f"{node.name}.gamma"], dtype=np.float64).reshape(-1)
            gamma = g if gamma is None else gamma * g
        elif isinstance(node, ConvNode):
            cur = conv(cur, model.plain(node), transposed=node.transposed)
        elif isinstance(node, ActNode):
            if not ops or not isinstance(ops[-1], _FConv) or ops[-1].dst != cur:
                raise ValueError(f"{node.name}: activation must follow a convolution")
            ops[-1].relu = True
    if gamma is not None:
        raise ValueError("trailing spatial scale has no convolution to fold into")
    return ops


def float_forward(ops: list, x, record: Optional[dict] = None) -> np.ndarray:
    """Run a lowered op list in float64.  ``record`` collects per-buffer ``(min, max)``."""
    env = {"in": np.asarray(x, dtype=np.float64)}

    def note(name, v):
        if record is not None:
            lo, hi = float(v.min()), float(v.max())
            old = record.get(name)
            record[name] = (lo, hi) if old is None else (min(old[0], lo), max(old[1], hi))

    note("in", env["in"])
    for op in ops:
        if isinstance(op, _FConv):
            fn = conv_transpose2d if op.transposed else conv2d
            v = fn(env[op.src], op.w)
            if op.relu:
                v = relu(v)
        elif isinstance(op, _FD2S):
            v = depth_to_space(env[op.src], op.factor)
        else:
            v = env[op.a] + env[op.b]
        env[op.dst] = v
        note(op.dst, v)
    return env[ops[-1].dst]


def float_scale_indices(model: Model, z_hat) -> np.ndarray:
    """Index map from the floating-point path: ``clip(round(head), 0, 63)``."""
    v = float_forward(lower_graph(model), _as_batch(z_hat, model.graph.in_channels))
    return np.clip(_round_half_away(v[0]), 0, NUM_SCALE_INDICES - 1).astype(np.uint8)


# ---------------------------------------------------------------------------
# Quantisation
# ---------------------------------------------------------------------------


def _activation_qp(name: str, lo: float, hi: float) -> QuantParams:
    lo, hi = min(lo, 0.0), max(hi, 0.0)
    scale = (hi - lo) / 255.0
    if scale < SCALE_FLOOR:
        logger.warning("activation %s has a degenerate calibration range; scale floored at %g", name, SCALE_FLOOR)
        scale = SCALE_FLOOR
    scale = float(np.float32(scale))
    zp = int(np.clip(_round_half_away(-lo / scale), 0, 255))
    return QuantParams(scale, zp)


def _quantize_conv(op: _FConv, qp_in: QuantParams, qp_out: QuantParams) -> QConv:
    w = np.asarray(op.w.weight, dtype=np.float64)
    b = np.asarray(op.w.bias, dtype=np.float64)
    stride, padding = op.w.stride, op.w.padding
    if op.transposed:
        # store as the equivalent forward correlation applied after zero insertion
        w = np.ascontiguousarray(w[:, :, ::-1, ::-1])
    k = w.shape[0]
    amax = np.abs(w.reshape(k, -1)).max(axis=1)
    s_w = np.where(amax > 0, amax / 127.0, 1.0 / 127.0)
    # keep the int32 bias within half the accumulator range; only binds when the
    # input scale is tiny (degenerate calibration), where it coarsens the weights
    s_bias = np.abs(b) / (qp_in.scale * BIAS_LIMIT)
    if np.any(s_bias > s_w):
        logger.warning("%s: bias headroom forces coarser weight scales on %d channel(s)",
                       op.dst, int(np.sum(s_bias > s_w)))
        s_w = np.maximum(s_w, s_bias)
    s_w = s_w.astype(np.float32).astype(np.float64)
    qw = np.clip(_round_half_away(w / s_w[:, None, None, None]), -127, 127) + WEIGHT_ZP
    qb = np.clip(_round_half_away(b / (qp_in.scale * s_w)), -BIAS_LIMIT, BIAS_LIMIT)
    ms, ss = zip(*(_multiplier_or_floor(qp_in.scale * s / qp_out.scale, op.dst) for s in s_w))
    return QConv(
        op.src, op.dst, qw.astype(np.uint8), qb.astype(np.int32),
        np.array(ms, dtype=np.int64), np.array(ss, dtype=np.int64),
        qp_in.zero_point, qp_out.zero_point, stride, padding, op.w.groups, op.transposed, op.relu,
    )


def _multiplier_or_floor(ratio: float, name: str) -> tuple[int, int]:
    """Like :func:`quantize_multiplier`, but ratios below ``2**-32`` map to
    ``(2**30, 62)``: with ``|acc| < 2**31`` such a product rounds to at most
    one output unit either way."""
    if ratio < 2.0 ** -32:
        logger.warning("%s: requantisation ratio %.3g underflows; using the smallest multiplier", name, ratio)
        return 1 << 30, 62
    return quantize_multiplier(ratio)


def _as_batch(z, channels: int) -> np.ndarray:
    z = np.asarray(z)
    if z.ndim == 3:
        z = z[None]
    if z.ndim != 4 or z.shape[0] != 1 or z.shape[1] != channels:
        raise ValueError(f"expected a ({channels}, H, W) hyper-latent, got shape {z.shape}")
    return z


def quantize_model(model: Model, calibration) -> QuantizedModel:
    """Quantise a scale decoder using calibration hyper-latents.

    ``calibration`` is an iterable of ``(C_z, h, w)`` integer arrays.
    """
    calibration = list(calibration)
    if not calibration:
        raise ValueError("calibration set must not be empty")
    ops = lower_graph(model)
    ranges: dict = {}
    c_in = model.graph.in_channels
    for z in calibration:
        zq = np.clip(np.asarray(z, dtype=np.float64), -128, 127)
        float_forward(ops, _as_batch(zq, c_in), ranges)
    out_name = ops[-1].dst
    input_qp = QuantParams(1.0, 128)
    output_qp = QuantParams(HEAD_SCALE, 0)
    qps = {"in": input_qp}
    for op in ops:
        if op.dst == out_name:
            qps[op.dst] = output_qp
        elif isinstance(op, _FD2S):
            qps[op.dst] = qps[op.src]
        else:
            lo, hi = ranges[op.dst]
            qps[op.dst] = _activation_qp(op.dst, lo, hi)
    qops: list = []
    for op in ops:
        if isinstance(op, _FConv):
            qops.append(_quantize_conv(op, qps[op.src], qps[op.dst]))
        elif isinstance(op, _FD2S):
            qops.append(QDepthToSpace(op.src, op.dst, op.factor))
        else:
            qa, qb, qo = qps[op.a], qps[op.b], qps[op.dst]
            m_a, s_a = quantize_multiplier(qa.scale / qo.scale)
            m_b, s_b = quantize_multiplier(qb.scale / qo.scale)
            if min(s_a, s_b) < ADD_FRACTION_BITS:
                raise ValueError(f"{op.dst}: residual add scale ratio too large for fixed point")
            qops.append(QAdd(op.a, op.b, op.dst, qa.zero_point, qb.zero_point, m_a, s_a, m_b, s_b, qo.zero_point))
    buffer_qp = {k: v for k, v in qps.items() if k not in ("in", out_name)}
    qm = QuantizedModel(tuple(qops), c_in, model.graph.out_channels, input_qp, output_qp,
                        buffer_qp, dict(model.config.to_kv()))
    check_overflow(qm)
    return qm


def check_overflow(qm: QuantizedModel) -> None:
    """Prove that no accumulator can reach ``2**31`` for any 8-bit input.

    Centred activations lie in ``[-255, 255]``, so ``|acc| <= 255 *
    sum(|q_w - 128|) + |bias|`` per output channel; the 64-bit product with
    ``m < 2**31`` then stays below ``2**62``.
    """
    for op in qm.ops:
        if isinstance(op, QConv):
            w = op.weight.astype(np.int64) - WEIGHT_ZP
            bound = 255 * np.abs(w).reshape(w.shape[0], -1).sum(axis=1) + np.abs(op.bias.astype(np.int64))
            if np.any(bound >= ACC_LIMIT):
                raise ValueError(f"{op.dst}: accumulator bound {int(bound.max())} reaches 2**31")
            if np.any(op.m >= 1 << 31) or np.any(op.m < 1 << 30) or np.any(op.shift < 0) or np.any(op.shift >= 63):
                raise ValueError(f"{op.dst}: multiplier out of range")
        elif isinstance(op, QAdd):
            for m, s in ((op.m_a, op.s_a), (op.m_b, op.s_b)):
                if not (1 << 30 <= m < 1 << 31 and ADD_FRACTION_BITS <= s < 63):
                    raise ValueError(f"{op.dst}: add multiplier out of range")


# ---------------------------------------------------------------------------
# Optimised numpy interpreter
# ---------------------------------------------------------------------------


def _conv_channels(xc: np.ndarray, wc: np.ndarray, groups: int, stride: int, ho: int, wo: int,
                   k0: int, k1: int) -> np.ndarray:
    """Integer accumulators for output channels ``[k0, k1)``; ``xc`` is the
    centred, padded input ``(C, H, W)`` and ``wc`` the centred weights."""
    k, cg, ky, kx = wc.shape
    kg = k // groups
    out = np.zeros((k1 - k0, ho * wo), dtype=np.int64)
    for g in range(k0 // kg, (k1 - 1) // kg + 1):
        a, b = max(k0, g * kg), min(k1, (g + 1) * kg)
        xg = xc[g * cg:(g + 1) * cg]
        for dy in range(ky):
            for dx in range(kx):
                patch = xg[:, dy:dy + stride * (ho - 1) + 1:stride, dx:dx + stride * (wo - 1) + 1:stride]
                out[a - k0:b - k0] += wc[a:b, :, dy, dx] @ patch.reshape(cg, ho * wo)
    return out


def _qconv_forward(x: np.ndarray, op: QConv, threads: int = 1) -> np.ndarray:
    xc = x.astype(np.int64) - op.zp_in
    c, h, w = xc.shape
    wc = op.weight.astype(np.int64) - WEIGHT_ZP
    k, cg, ky, kx = wc.shape
    if c != cg * op.groups:
        raise ValueError(f"{op.dst}: input has {c} channels, weights expect {cg * op.groups}")
    if op.transposed:
        s, p = op.stride, op.padding
        up = np.zeros((c, (h - 1) * s + 1, (w - 1) * s + 1), dtype=np.int64)
        up[:, ::s, ::s] = xc
        pad_y, pad_x = ky - 1 - p, kx - 1 - p
        xc = np.pad(up, ((0, 0), (pad_y, pad_y), (pad_x, pad_x)))
        stride = 1
    else:
        p = op.padding
        xc = np.pad(xc, ((0, 0), (p, p), (p, p))) if p else xc
        stride = op.stride
    hp, wp = xc.shape[1:]
    ho, wo = (hp - ky) // stride + 1, (wp - kx) // stride + 1
    bounds = np.linspace(0, k, max(1, min(threads, k)) + 1).astype(int)
    chunks = list(zip(bounds[:-1], bounds[1:]))
    if len(chunks) == 1:
        acc = _conv_channels(xc, wc, op.groups, stride, ho, wo, 0, k)
    else:
        with ThreadPoolExecutor(len(chunks)) as pool:
            parts = pool.map(lambda ab: _conv_channels(xc, wc, op.groups, stride, ho, wo, *ab), chunks)
            acc = np.concatenate(list(parts), axis=0)
    acc += op.bias.astype(np.int64)[:, None]
    v = _rshift_round_np(acc * op.m[:, None], op.shift[:, None]) + op.zp_out
    lo = op.zp_out if op.relu else 0
    return np.clip(v, lo, 255).reshape(k, ho, wo).astype(np.uint8)


def _qadd_forward(qa: np.ndarray, qb: np.ndarray, op: QAdd) -> np.ndarray:
    f = ADD_FRACTION_BITS
    ta = _rshift_round_np((qa.astype(np.int64) - op.zp_a) * op.m_a, np.int64(op.s_a - f))
    tb = _rshift_round_np((qb.astype(np.int64) - op.zp_b) * op.m_b, np.int64(op.s_b - f))
    v = _rshift_round_np(ta + tb, np.int64(f)) + op.zp_out
    return np.clip(v, 0, 255).astype(np.uint8)


def integer_forward(x: QuantizedTensor, op: QOp, threads: int = 1, other: Optional[QuantizedTensor] = None,
                    out_qp: Optional[QuantParams] = None) -> np.ndarray:
    """Apply one integer op to uint8 data ``(C, H, W)``; returns uint8."""
    data = np.asarray(x.data if isinstance(x, QuantizedTensor) else x)
    if isinstance(op, QConv):
        return _qconv_forward(data, op, threads)
    if isinstance(op, QDepthToSpace):
        return depth_to_space(data[None], op.factor)[0]
    if other is None:
        raise ValueError("residual add needs a second operand")
    return _qadd_forward(data, np.asarray(getattr(other, "data", other)), op)


def quantize_input(z_hat, channels: int) -> np.ndarray:
    z = _as_batch(z_hat, channels)[0]
    if not np.issubdtype(z.dtype, np.integer):
        if not np.all(z == np.round(z)):
            raise ValueError("hyper-latent must hold integers")
        z = z.astype(np.int64)
    return np.clip(z.astype(np.int64) + 128, 0, 255).astype(np.uint8)


def run_integer(qm: QuantizedModel, z_hat, threads: int = 1) -> np.ndarray:
    """Raw uint8 head output ``(C_y, H, W)``."""
    env = {"in": quantize_input(z_hat, qm.in_channels)}
    for op in qm.ops:
        if isinstance(op, QAdd):
            env[op.dst] = _qadd_forward(env[op.a], env[op.b], op)
        else:
            env[op.dst] = integer_forward(env[op.src], op, threads)
    return env[qm.ops[-1].dst]


def head_to_indices(q: np.ndarray) -> np.ndarray:
    """Map head codes (scale 1/4) to table indices: ``min(63, (q + 2) >> 2)``."""
    return np.minimum(NUM_SCALE_INDICES - 1, (q.astype(np.int64) + 2) >> 2).astype(np.uint8)


def run_scale_decoder(qm: QuantizedModel, z_hat, threads: int = 1) -> np.ndarray:
    """Scale-table indices in ``0..63`` for every latent element."""
    return head_to_indices(run_integer(qm, z_hat, threads))


# ---------------------------------------------------------------------------
# Scalar reference interpreter
# ---------------------------------------------------------------------------


def _ref_conv(x: list, op: QConv) -> list:
    c, h, w = len(x), len(x[0]), len(x[0][0])
    weight = op.weight.tolist()
    bias = op.bias.tolist()
    ms, ss = op.m.tolist(), op.shift.tolist()
    k = len(weight)
    cg, ky, kx = len(weight[0]), len(weight[0][0]), len(weight[0][0][0])
    kg = k // op.groups
    s, p = op.stride, op.padding
    if op.transposed:
        # direct transposed form: output (oy, ox) gathers input (iy, ix)
        # with oy = iy * s + ty - (ky - 1 - p) where ty indexes the stored
        # (flipped) kernel
        ho, wo = (h - 1) * s + ky - 2 * p, (w - 1) * s + kx - 2 * p
    else:
        ho, wo = (h + 2 * p - ky) // s + 1, (w + 2 * p - kx) // s + 1
    lo = op.zp_out if op.relu else 0
    out = []
    for oc in range(k):
        g = oc // kg
        plane = []
        for oy in range(ho):
            row = []
            for ox in range(wo):
                acc = bias[oc]
                for j in range(cg):
                    ic = g * cg + j
                    for ty in range(ky):
                        for tx in range(kx):
                            if op.transposed:
                                ny, nx = oy + ty - (ky - 1 - p), ox + tx - (kx - 1 - p)
                                if ny % s or nx % s:
                                    continue
                                iy, ix = ny // s, nx // s
                            else:
                                iy, ix = oy * s + ty - p, ox * s + tx - p
                            if 0 <= iy < h and 0 <= ix < w:
                                acc += (x[ic][iy][ix] - op.zp_in) * (weight[oc][j][ty][tx] - WEIGHT_ZP)
                v = rshift_round(acc * ms[oc], ss[oc]) + op.zp_out
                row.append(min(255, max(lo, v)))
            plane.append(row)
        out.append(plane)
    return out


def _ref_d2s(x: list, f: int) -> list:
    cf, h, w = len(x), len(x[0]), len(x[0][0])
    c = cf // (f * f)
    return [
        [[x[((yy % f) * f + (xx % f)) * c + ch][yy // f][xx // f] for xx in range(w * f)] for yy in range(h * f)]
        for ch in range(c)
    ]


def _ref_add(a: list, b: list, op: QAdd) -> list:
    f = ADD_FRACTION_BITS

    def one(u, v):
        t = rshift_round((u - op.zp_a) * op.m_a, op.s_a - f) + rshift_round((v - op.zp_b) * op.m_b, op.s_b - f)
        return min(255, max(0, rshift_round(t, f) + op.zp_out))

    return [[[one(u, v) for u, v in zip(ra, rb)] for ra, rb in zip(pa, pb)] for pa, pb in zip(a, b)]


def reference_scale_decoder(qm: QuantizedModel, z_hat) -> np.ndarray:
    """Scalar big-integer interpreter; slow, but shares no kernels with
    :func:`run_scale_decoder`."""
    z = _as_batch(z_hat, qm.in_channels)[0].tolist()
    env = {"in": [[[min(255, max(0, int(v) + 128)) for v in row] for row in plane] for plane in z]}
    for op in qm.ops:
        if isinstance(op, QConv):
            env[op.dst] = _ref_conv(env[op.src], op)
        elif isinstance(op, QDepthToSpace):
            env[op.dst] = _ref_d2s(env[op.src], op.factor)
        else:
            env[op.dst] = _ref_add(env[op.a], env[op.b], op)
    head = env[qm.ops[-1].dst]
    return np.array([[[min(63, (v + 2) >> 2) for v in row] for row in plane] for plane in head], dtype=np.uint8)


def dequantized_head(qm: QuantizedModel, z_hat, threads: int = 1) -> np.ndarray:
    q = run_integer(qm, z_hat, threads)
    return (q.astype(np.float64) - qm.output_qp.zero_point) * qm.output_qp.scale
