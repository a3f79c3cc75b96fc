"""Shared builders for the test suite."""

from __future__ import annotations

import numpy as np

from picocodec.model import ModelConfig, StageConfig, build_model


def scale_decoder_config(c: int = 4, c_z: int = 4, c_y: int = 4, r: int = 1, **kw) -> ModelConfig:
    st = StageConfig.of(c, r, 1, 1, 0, 1, 1)
    return ModelConfig(role="scale_decoder", stages=(st, st), latent_channels=c_y, hyper_channels=c_z,
                       **kw).validate()


def perturb_scales(model, seed: int, lo: float = 0.5, hi: float = 1.5):
    """Replace every learned scale with a random value in ``[lo, hi]``."""
    rng = np.random.default_rng(seed)
    for k in sorted(model.weights):
        if k.endswith((".s_in", ".s_out", ".gamma")):
            v = model.weights[k]
            model.weights[k] = rng.uniform(lo, hi, v.shape).astype(np.float32)
    model.invalidate()
    return model


def scale_decoder(seed: int = 0, perturb: bool = False, **kw):
    m = build_model(scale_decoder_config(**kw), seed)
    return perturb_scales(m, seed + 100) if perturb else m


def random_z(rng, c: int, h: int, w: int, spread: int = 6) -> np.ndarray:
    return rng.integers(-spread, spread + 1, (c, h, w)).astype(np.int64)
