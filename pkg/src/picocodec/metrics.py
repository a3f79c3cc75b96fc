"""Distortion metrics, artifact losses, loss aggregation, BD-rate and Elo.

Images are arrays shaped ``(H, W)`` or ``(H, W, C)`` with values in
``[0, 1]``.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .codec import NUM_COARSE_LEVELS, TileGrid, level_embedding
from .kernels import avg_pool2d

logger = logging.getLogger(__name__)

MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
SSIM_K1, SSIM_K2 = 0.01, 0.03
SSIM_WINDOW, SSIM_SIGMA = 11, 1.5
TILING_LEVELS = 5
BOUNDARY_STRIP = 8
ELO_SCALE = 400.0
ELO_PRIOR_SIGMA = 350.0


def _pair(x, y) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    if x.ndim not in (2, 3):
        raise ValueError(f"expected (H, W) or (H, W, C) images, got {x.shape}")
    return x, y


def _nchw(x: np.ndarray) -> np.ndarray:
    return x[None, None] if x.ndim == 2 else x.transpose(2, 0, 1)[None]


# ---------------------------------------------------------------------------
# Pixel metrics
# ---------------------------------------------------------------------------


def mse(x, y) -> float:
    x, y = _pair(x, y)
    return float(np.mean((x - y) ** 2))


def psnr(x, y) -> float:
    """``-10 log10(mse)`` for unit-range images; ``inf`` when identical."""
    m = mse(x, y)
    return math.inf if m == 0 else -10.0 * math.log10(m)


def _gaussian(size: int, sigma: float) -> np.ndarray:
    t = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(t ** 2) / (2 * sigma * sigma))
    return g / g.sum()


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable 'valid' filtering over the last two axes."""
    k = g.shape[0]
    h, w = x.shape[-2:]
    rows = sum(g[i] * x[..., i:h - k + 1 + i, :] for i in range(k))
    return sum(g[i] * rows[..., :, i:w - k + 1 + i] for i in range(k))


def _ssim_terms(x: np.ndarray, y: np.ndarray, data_range: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean SSIM and contrast-structure for ``(C, H, W)`` inputs."""
    side = min(x.shape[-2:])
    size = SSIM_WINDOW if side >= SSIM_WINDOW else max(1, side - (1 - side % 2))
    g = _gaussian(size, SSIM_SIGMA)
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mx, my = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(y * y, g) - my * my
    sxy = _filter_valid(x * y, g) - mx * my
    cs = (2 * sxy + c2) / (sxx + syy + c2)
    ssim = (2 * mx * my + c1) / (mx * mx + my * my + c1) * cs
    return ssim.mean(axis=(-2, -1)), cs.mean(axis=(-2, -1))


def ms_ssim(x, y, data_range: float = 1.0, weights: Sequence[float] = MS_SSIM_WEIGHTS) -> float:
    """Multi-scale structural similarity.

    Uses 2x2 mean pooling between scales (edge-replicated when a side is
    odd).  Negative contrast-structure terms are clamped to zero before the
    weighted product.  Inputs whose short side is below 160 pixels use as
    many scales as keep an 11-pixel window inside the image, with the
    exponents renormalised, and a warning is logged.
    """
    x, y = _pair(x, y)
    a, b = _nchw(x)[0], _nchw(y)[0]
    side = min(a.shape[-2:])
    n = len(weights)
    if side < 160:
        n = 1
        while n < len(weights) and -(-side // (2 ** n)) >= SSIM_WINDOW:
            n += 1
        logger.warning("ms_ssim: %d-pixel input is below 160, using %d scale(s)", side, n)
    w = np.asarray(weights[:n], dtype=np.float64)
    w = w / w.sum() if n < len(weights) else w
    vals = []
    for level in range(n):
        ssim, cs = _ssim_terms(a, b, data_range)
        vals.append(ssim if level == n - 1 else cs)
        if level < n - 1:
            a = avg_pool2d(a[None], 2)[0]
            b = avg_pool2d(b[None], 2)[0]
    stack = np.maximum(np.stack(vals), 0.0)  # (scales, C)
    per_channel = np.prod(stack ** w[:, None], axis=0)
    return float(per_channel.mean())


# ---------------------------------------------------------------------------
# Artifact losses
# ---------------------------------------------------------------------------


def tiling_artifact_loss(x, y, weights: Sequence[float] = (1.0,) * TILING_LEVELS) -> float:
    """Sum over dyadic pyramid levels of the mean absolute difference."""
    x, y = _pair(x, y)
    a, b = _nchw(x), _nchw(y)
    total = 0.0
    for s, ws in enumerate(weights):
        k = 2 ** s
        total += ws * float(np.mean(np.abs(avg_pool2d(a, k) - avg_pool2d(b, k))))
    return total


def text_fidelity_loss(x, y, mask) -> float:
    """Mean absolute error inside a binary mask, ``sum(m |x - y|) / max(sum(m), 1)``."""
    x, y = _pair(x, y)
    m = np.asarray(mask)
    if not np.all((m == 0) | (m == 1)):
        raise ValueError("text mask must be binary")
    m = m.astype(np.float64)
    if x.ndim == 3 and m.ndim == 2:
        m = m[:, :, None]
    m = np.broadcast_to(m, x.shape)
    return float(np.sum(m * np.abs(x - y)) / max(float(m.sum()), 1.0))


@dataclass
class BoundaryReport:
    value: float
    per_seam: list  # ((orientation, position), mean) pairs
    samples: np.ndarray
    histogram: tuple  # (counts, bin_edges)

    def __float__(self) -> float:
        return self.value


def _seam_steps(img: np.ndarray, pos: int, axis: int, strip: int) -> np.ndarray:
    """Low-pass step across a seam, pooled ``strip``x along it; shape ``(C, n)``."""
    a = np.moveaxis(img, axis, 1)  # (C, across, along)
    left = a[:, max(0, pos - strip):pos].mean(axis=1)
    right = a[:, pos:pos + strip].mean(axis=1)
    return _pool_along(right - left, strip)


def _pool_along(v: np.ndarray, k: int) -> np.ndarray:
    n = v.shape[-1]
    pad = (-n) % k
    if pad:
        v = np.concatenate([v, np.repeat(v[..., -1:], pad, axis=-1)], axis=-1)
    return v.reshape(*v.shape[:-1], -1, k).mean(axis=-1)


def boundary_lowfreq_error(x, y, grid: TileGrid, strip: int = BOUNDARY_STRIP, bins: int = 20) -> BoundaryReport:
    """Mean ``|step(y) - step(x)|`` over internal tile seams.

    For every seam the step is the difference between the mean of the
    ``strip`` pixels on either side, averaged over ``strip``-pixel runs
    along the seam.
    """
    x, y = _pair(x, y)
    if x.shape[:2] != (grid.height, grid.width):
        raise ValueError("grid does not match the image size")
    a, b = _nchw(x)[0], _nchw(y)[0]
    per_seam, samples = [], []
    seams = [("vertical", c * grid.core, 2) for c in range(1, grid.cols)]
    seams += [("horizontal", r * grid.core, 1) for r in range(1, grid.rows)]
    if not seams:
        logger.warning("boundary_lowfreq_error: single-tile image has no internal seams")
        return BoundaryReport(0.0, [], np.zeros(0), np.histogram(np.zeros(0), bins=bins, range=(0, 1)))
    for orient, pos, axis in seams:
        d = np.abs(_seam_steps(b, pos, axis, strip) - _seam_steps(a, pos, axis, strip)).mean(axis=0)
        per_seam.append(((orient, pos), float(d.mean())))
        samples.append(d)
    s = np.concatenate(samples)
    hi = float(s.max()) if s.size and s.max() > 0 else 1.0
    return BoundaryReport(float(s.mean()), per_seam, s, np.histogram(s, bins=bins, range=(0.0, hi)))


# ---------------------------------------------------------------------------
# Loss aggregation
# ---------------------------------------------------------------------------


def default_lambdas() -> np.ndarray:
    """Rate weights per coarse level, geometric from 0.002 to 0.2."""
    return np.geomspace(0.002, 0.2, NUM_COARSE_LEVELS)


def default_alphas() -> np.ndarray:
    return np.ones(NUM_COARSE_LEVELS)


def total_loss(d_terms: Mapping[str, float], rate_bits: float, level: int,
               alphas=None, lambdas=None, term_weights: Optional[Mapping[str, float]] = None) -> float:
    """``alpha_l * D + alpha_l * lambda_l * R`` with ``D = sum_i w_i d_i``.

    Per-level ``alpha`` and ``lambda`` are interpolated between coarse levels
    with the level-embedding weights.  Terms missing from ``d_terms`` are
    simply absent; unlisted weights default to 1.
    """
    emb = level_embedding(level)
    a = float(emb @ np.asarray(default_alphas() if alphas is None else alphas, dtype=np.float64))
    lam = float(emb @ np.asarray(default_lambdas() if lambdas is None else lambdas, dtype=np.float64))
    w = term_weights or {}
    d = sum(float(w.get(k, 1.0)) * float(v) for k, v in d_terms.items())
    return a * d + a * lam * float(rate_bits)


# ---------------------------------------------------------------------------
# BD-rate
# ---------------------------------------------------------------------------


def _curve_arrays(curve) -> tuple[np.ndarray, np.ndarray]:
    pts = curve.points if isinstance(curve, RDCurve) else curve
    arr = np.array([(p.bpp, p.quality) if isinstance(p, RDPoint) else tuple(p)[-2:] for p in pts], dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 4:
        raise ValueError("BD-rate needs at least 4 points per curve")
    if np.any(arr[:, 0] <= 0) or not np.all(np.isfinite(arr)):
        raise ValueError("rates must be positive and all values finite")
    return arr[:, 0], arr[:, 1]


def bd_rate(anchor, test) -> float:
    """Average rate difference (percent) at equal quality.

    Cubic polynomial fits of ``log2(rate)`` against quality are integrated
    over the overlapping quality interval; returns ``100 * (2**mean_diff - 1)``.
    """
    ra, qa = _curve_arrays(anchor)
    rt, qt = _curve_arrays(test)
    lo, hi = max(qa.min(), qt.min()), min(qa.max(), qt.max())
    if not lo < hi:
        raise ValueError("curves have no overlapping quality range")
    pa = np.polyint(np.polyfit(qa, np.log2(ra), 3))
    pt = np.polyint(np.polyfit(qt, np.log2(rt), 3))
    ia = np.polyval(pa, hi) - np.polyval(pa, lo)
    it = np.polyval(pt, hi) - np.polyval(pt, lo)
    return float(100.0 * (2.0 ** ((it - ia) / (hi - lo)) - 1.0))


# ---------------------------------------------------------------------------
# Bayesian Elo
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PairwiseRecord:
    a: str
    b: str
    wins_a: float
    wins_b: float

    def __post_init__(self):
        if self.wins_a < 0 or self.wins_b < 0 or self.wins_a + self.wins_b == 0:
            raise ValueError(f"invalid counts for {self.a} vs {self.b}: {self.wins_a}, {self.wins_b}")
        if self.a == self.b:
            raise ValueError(f"self-comparison of {self.a}")


def _components(names: list[str], records) -> list[list[str]]:
    parent = {n: n for n in names}

    def find(n):
        while parent[n] != n:
            parent[n] = parent[parent[n]]
            n = parent[n]
        return n

    for r in records:
        parent[find(r.a)] = find(r.b)
    groups: dict = {}
    for n in names:
        groups.setdefault(find(n), []).append(n)
    return list(groups.values())


def bayesian_elo(records: Iterable[PairwiseRecord], prior_sigma: float = ELO_PRIOR_SIGMA,
                 tol: float = 1e-9, max_iter: int = 200) -> dict[str, float]:
    """Maximum a-posteriori Bradley-Terry ratings on the Elo scale.

    ``P(A beats B) = 1 / (1 + 10**((R_B - R_A) / 400))`` with independent
    ``N(0, prior_sigma**2)`` priors; Newton's method runs until the gradient
    norm drops below ``tol``.  Ratings are returned centred at zero.
    """
    records = list(records)
    if not records:
        raise ValueError("no comparisons given")
    names = sorted({r.a for r in records} | {r.b for r in records})
    comps = _components(names, records)
    if len(comps) > 1:
        listing = "; ".join("{" + ", ".join(sorted(c)) + "}" for c in comps)
        raise ValueError(f"comparison graph is disconnected: {listing}")
    idx = {n: i for i, n in enumerate(names)}
    ia = np.array([idx[r.a] for r in records])
    ib = np.array([idx[r.b] for r in records])
    wa = np.array([r.wins_a for r in records], dtype=np.float64)
    wb = np.array([r.wins_b for r in records], dtype=np.float64)
    n = len(names)
    k = math.log(10.0) / ELO_SCALE
    inv_var = 0.0 if math.isinf(prior_sigma) else 1.0 / prior_sigma ** 2

    def objective(r):
        d = k * (r[ia] - r[ib])
        return float(np.sum(-wa * np.logaddexp(0, -d) - wb * np.logaddexp(0, d)) - 0.5 * inv_var * r @ r)

    r = np.zeros(n)
    for _ in range(max_iter):
        d = k * (r[ia] - r[ib])
        p = 0.5 * (1.0 + np.tanh(0.5 * d))  # logistic, overflow-free
        g_pair = k * (wa * (1 - p) - wb * p)
        grad = -inv_var * r
        np.add.at(grad, ia, g_pair)
        np.add.at(grad, ib, -g_pair)
        if np.linalg.norm(grad) < tol:
            break
        h_pair = k * k * (wa + wb) * p * (1 - p)
        hess = -inv_var * np.eye(n)
        np.add.at(hess, (ia, ia), -h_pair)
        np.add.at(hess, (ib, ib), -h_pair)
        np.add.at(hess, (ia, ib), h_pair)
        np.add.at(hess, (ib, ia), h_pair)
        step = np.linalg.lstsq(hess, -grad, rcond=None)[0]  # singular under a flat prior
        f0, t = objective(r), 1.0
        while objective(r + t * step) < f0 and t > 1e-8:
            t *= 0.5
        r = r + t * step
    else:
        logger.warning("bayesian_elo: no convergence after %d iterations", max_iter)
    r -= r.mean()
    return {name: float(r[i]) for name, i in idx.items()}


def read_votes_csv(path) -> list[PairwiseRecord]:
    """Columns ``a,b,wins_a,wins_b``."""
    with open(path, newline="") as fh:
        return [PairwiseRecord(row["a"], row["b"], float(row["wins_a"]), float(row["wins_b"]))
                for row in csv.DictReader(fh)]


# ---------------------------------------------------------------------------
# Rate-distortion curves
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RDPoint:
    level: int
    bpp: float
    quality: float

    def __post_init__(self):
        if not (math.isfinite(self.bpp) and self.bpp > 0 and math.isfinite(self.quality)):
            raise ValueError(f"invalid RD point {self}")


@dataclass
class RDCurve:
    codec: str
    metric: str
    points: list = field(default_factory=list)


RD_COLUMNS = ("codec", "metric", "level", "bpp", "quality")


def emit_rd_csv(curves: Iterable[RDCurve], path) -> None:
    """One row per point, columns ``codec,metric,level,bpp,quality``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RD_COLUMNS)
        for c in curves:
            for p in c.points:
                w.writerow([c.codec, c.metric, p.level, repr(float(p.bpp)), repr(float(p.quality))])


def read_rd_csv(path) -> list[RDCurve]:
    curves: dict = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != RD_COLUMNS:
            raise ValueError(f"expected columns {','.join(RD_COLUMNS)}")
        for row in reader:
            key = (row["codec"], row["metric"])
            curve = curves.setdefault(key, RDCurve(*key))
            curve.points.append(RDPoint(int(row["level"]), float(row["bpp"]), float(row["quality"])))
    return list(curves.values())
