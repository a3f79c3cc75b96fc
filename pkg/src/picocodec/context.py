"""Latent quantisation with learned bin width and the one-shot context model.

The scale decoder alone decides the entropy-coding tables, so every ``y_hat``
symbol can be entropy-decoded in one pass.  The context model only refines
the reconstruction: the latent is split into phases, and for each phase a
small network predicts the mean ``mu`` and bin width ``q`` from the prior
``p`` and the already reconstructed earlier phases.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .kernels import ConvWeights, conv2d, relu
from .model import SCHEDULES, _uniform

logger = logging.getLogger(__name__)

INT16_MIN, INT16_MAX = -32768, 32767
Q_MIN, Q_MAX = 0.25, 4.0
_LOG_Q_MIN, _LOG_Q_MAX = math.log(Q_MIN), math.log(Q_MAX)
PHASE_COUNTS = {"none": 1, "channelwise4": 4, "checkerboard": 2, "grid2x2": 4}


def round_half_away(x) -> np.ndarray:
    """Round to nearest integer, ties away from zero."""
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def _check_q(q):
    q = np.asarray(q, dtype=np.float64)
    if not np.all(q > 0) or not np.all(np.isfinite(q)):
        raise ValueError("quantisation width q must be positive and finite")
    return q


def quantize_latent(y, mu, q) -> np.ndarray:
    """``y_hat = round((y - mu) / q)`` as int64, clipped to the int16 range."""
    q = _check_q(q)
    r = (np.asarray(y, dtype=np.float64) - np.asarray(mu, dtype=np.float64)) / q
    return np.clip(round_half_away(r), INT16_MIN, INT16_MAX).astype(np.int64)


def dequantize_latent(y_hat, mu, q) -> np.ndarray:
    """``y_tilde = q * y_hat + mu`` in float64."""
    q = _check_q(q)
    return q * np.asarray(y_hat, dtype=np.float64) + np.asarray(mu, dtype=np.float64)


# ---------------------------------------------------------------------------
# Phases
# ---------------------------------------------------------------------------


def context_phases(schedule: str, shape) -> list[np.ndarray]:
    """Boolean masks of shape ``(C, H, W)``, one per phase, in coding order."""
    if schedule not in PHASE_COUNTS:
        raise ValueError(f"unknown context schedule {schedule!r}")
    c, h, w = (int(v) for v in shape)
    if c < 1 or h < 1 or w < 1:
        raise ValueError(f"latent shape must be positive, got {shape}")
    if schedule == "none":
        return [np.ones((c, h, w), dtype=bool)]
    if schedule == "channelwise4":
        size = c // 4
        masks = []
        for i in range(4):
            m = np.zeros((c, h, w), dtype=bool)
            stop = c if i == 3 else (i + 1) * size
            m[i * size:stop] = True
            masks.append(m)
        return masks
    rows = np.arange(h)[:, None]
    cols = np.arange(w)[None, :]
    if schedule == "checkerboard":
        parity = (rows + cols) % 2
        planes = [parity == 0, parity == 1]
    else:
        planes = [(rows % 2 == a) & (cols % 2 == b) for a, b in ((0, 0), (0, 1), (1, 0), (1, 1))]
    return [np.broadcast_to(p, (c, h, w)).copy() for p in planes]


def earlier_mask(masks: list[np.ndarray], phase: int) -> np.ndarray:
    out = np.zeros_like(masks[0])
    for m in masks[:phase]:
        out |= m
    return out


# ---------------------------------------------------------------------------
# Context model
# ---------------------------------------------------------------------------


@dataclass
class ContextModel:
    """Per-phase ``3x3 conv -> ReLU -> 1x1 conv`` mapping
    ``concat(p, masked partial)`` to ``(mu, raw log q)``."""

    latent_channels: int
    schedule: str
    hidden: int
    weights: dict = field(repr=False)
    learned_qwidth: bool = True

    def __post_init__(self):
        if self.schedule not in SCHEDULES:
            raise ValueError(f"unknown context schedule {self.schedule!r}")
        c, hid = self.latent_channels, self.hidden
        for i in range(self.num_phases):
            for key, shape in (
                (f"ctx.p{i}.conv.weight", (hid, 3 * c, 3, 3)),
                (f"ctx.p{i}.conv.bias", (hid,)),
                (f"ctx.p{i}.head.weight", (2 * c, hid, 1, 1)),
                (f"ctx.p{i}.head.bias", (2 * c,)),
            ):
                if key not in self.weights:
                    raise ValueError(f"context weights missing {key}")
                if self.weights[key].shape != shape:
                    raise ValueError(f"{key}: expected shape {shape}, got {self.weights[key].shape}")

    @property
    def num_phases(self) -> int:
        return PHASE_COUNTS[self.schedule]

    @classmethod
    def init(cls, latent_channels: int, schedule: str, seed: int = 0, hidden: Optional[int] = None,
             learned_qwidth: bool = True, head_gain: float = 0.05) -> "ContextModel":
        c = latent_channels
        hid = hidden or min(c, 64)
        w = {}
        for i in range(PHASE_COUNTS[schedule]):
            bound = math.sqrt(6.0 / (3 * c * 9))
            w[f"ctx.p{i}.conv.weight"] = _uniform(seed, f"ctx.p{i}.conv", (hid, 3 * c, 3, 3), bound)
            w[f"ctx.p{i}.conv.bias"] = np.zeros(hid, dtype=np.float32)
            w[f"ctx.p{i}.head.weight"] = _uniform(
                seed, f"ctx.p{i}.head", (2 * c, hid, 1, 1), head_gain * math.sqrt(3.0 / hid)
            )
            w[f"ctx.p{i}.head.bias"] = np.zeros(2 * c, dtype=np.float32)
        return cls(c, schedule, hid, w, learned_qwidth)

    @classmethod
    def zeros(cls, latent_channels: int, schedule: str, hidden: int = 8, learned_qwidth: bool = True):
        m = cls.init(latent_channels, schedule, 0, hidden, learned_qwidth)
        m.weights = {k: np.zeros_like(v) for k, v in m.weights.items()}
        return m

    def predict(self, p, partial, phase: int) -> tuple[np.ndarray, np.ndarray]:
        """``(mu, q)`` over the whole latent grid; only the entries inside
        ``phase`` are meaningful.  ``partial`` is masked to strictly earlier
        phases here, so callers may pass the full running reconstruction."""
        if not 0 <= phase < self.num_phases:
            raise ValueError(f"phase {phase} out of range for {self.schedule} ({self.num_phases} phases)")
        p = np.asarray(p, dtype=np.float32)
        partial = np.asarray(partial, dtype=np.float32)
        c = self.latent_channels
        if p.ndim != 3 or p.shape[0] != 2 * c:
            raise ValueError(f"prior must have shape ({2 * c}, H, W), got {p.shape}")
        if partial.shape != (c,) + p.shape[1:]:
            raise ValueError(f"partial latent must have shape {(c,) + p.shape[1:]}, got {partial.shape}")
        masks = context_phases(self.schedule, partial.shape)
        visible = np.where(earlier_mask(masks, phase), partial, np.float32(0))
        x = np.concatenate([p, visible], axis=0)[None]
        w = self.weights
        h = relu(conv2d(x, ConvWeights(w[f"ctx.p{phase}.conv.weight"], w[f"ctx.p{phase}.conv.bias"], padding=1)))
        out = conv2d(h, ConvWeights(w[f"ctx.p{phase}.head.weight"], w[f"ctx.p{phase}.head.bias"]))[0]
        mu = out[:c].astype(np.float64)
        if self.learned_qwidth:
            q = np.exp(np.clip(out[c:].astype(np.float64), _LOG_Q_MIN, _LOG_Q_MAX))
        else:
            q = np.ones_like(mu)
        return mu, q


def context_predict(model: ContextModel, p, partial, phase: int):
    return model.predict(p, partial, phase)


@dataclass
class LatentBundle:
    """Everything the coder knows about one tile's latents."""

    y: np.ndarray
    z: np.ndarray
    mu: np.ndarray
    q: np.ndarray
    y_hat: np.ndarray
    y_tilde: np.ndarray
    z_hat: Optional[np.ndarray] = None
    sigma_idx: Optional[np.ndarray] = None

    def __post_init__(self):
        if not np.all(self.q > 0):
            raise ValueError("q must be positive everywhere")


def quantize_with_context(model: ContextModel, p, y) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Encoder side: returns ``(y_hat, mu, q, y_tilde)`` phase by phase."""
    y = np.asarray(y, dtype=np.float64)
    masks = context_phases(model.schedule, y.shape)
    y_hat = np.zeros(y.shape, dtype=np.int64)
    mu = np.zeros(y.shape)
    q = np.ones(y.shape)
    partial = np.zeros(y.shape)
    for i, m in enumerate(masks):
        mu_i, q_i = model.predict(p, partial, i)
        yh = quantize_latent(y, mu_i, q_i)
        y_hat[m], mu[m], q[m] = yh[m], mu_i[m], q_i[m]
        partial[m] = dequantize_latent(yh, mu_i, q_i)[m]
    return y_hat, mu, q, partial


def dequantize_with_context(model: ContextModel, p, y_hat) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Decoder side: returns ``(y_tilde, mu, q)``; mirrors :func:`quantize_with_context`."""
    y_hat = np.asarray(y_hat, dtype=np.int64)
    masks = context_phases(model.schedule, y_hat.shape)
    mu = np.zeros(y_hat.shape)
    q = np.ones(y_hat.shape)
    partial = np.zeros(y_hat.shape)
    for i, m in enumerate(masks):
        mu_i, q_i = model.predict(p, partial, i)
        mu[m], q[m] = mu_i[m], q_i[m]
        partial[m] = dequantize_latent(y_hat, mu_i, q_i)[m]
    return partial, mu, q
