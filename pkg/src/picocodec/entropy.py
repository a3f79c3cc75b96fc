"""Probability tables for entropy coding.

Symbols are integers ``k`` in ``[-S, S]`` plus one escape bucket.  Table row
layout (``2S + 3`` cumulative counts) puts ``k`` at column ``k + S`` and the
escape bucket at column ``2S + 1``; the last entry is always ``2**16``.

All table construction is done in exact or arbitrary-precision arithmetic
(``mpmath`` for the Gaussian tails, Python integers for histograms) so the
resulting integer tables do not depend on the platform's libm.
"""

from __future__ import annotations

import functools
import math
from fractions import Fraction

import mpmath
import numpy as np

PRECISION_BITS = 16
TOTAL = 1 << PRECISION_BITS
DEFAULT_SUPPORT = 32
NUM_SCALES = 64
SCALE_MIN = 0.11
SCALE_MAX = 256.0
ESCAPE_RAW_BITS = 16

_DPS = 50


def scale_table(n: int = NUM_SCALES, lo: float = SCALE_MIN, hi: float = SCALE_MAX) -> np.ndarray:
    """``n`` log-spaced standard deviations from ``lo`` to ``hi`` inclusive."""
    if n < 2 or not 0 < lo < hi:
        raise ValueError("need n >= 2 and 0 < lo < hi")
    with mpmath.workdps(_DPS):
        a, b = mpmath.log(lo), mpmath.log(hi)
        vals = [float(mpmath.exp(a + (b - a) * i / (n - 1))) for i in range(n)]
    vals[0], vals[-1] = float(lo), float(hi)
    return np.array(vals, dtype=np.float64)


SCALE_TABLE = scale_table()


def _distribute(weights, tie_keys, groups, zero_index: int, total: int = TOTAL) -> list[int]:
    """Integer frequencies summing to ``total``, each at least 1.

    ``weights`` are non-negative and sum to 1 (exactly, or to working
    precision).  Every symbol gets one count up front; the rest is split
    proportionally, leftovers going by largest remainder.  ``groups`` lists
    index tuples that must receive leftovers together (mirror pairs), ordered
    among equal remainders by ``tie_keys``.  A final odd unit goes to
    ``zero_index``.
    """
    n = len(weights)
    spare = total - n
    if spare < 0:
        raise ValueError(f"{n} symbols do not fit in a total of {total}")
    freqs, rems = [], []
    for w in weights:
        s = w * spare
        f = int(math.floor(s)) if isinstance(s, Fraction) else int(mpmath.floor(s))
        freqs.append(1 + f)
        rems.append(s - f)
    left = total - sum(freqs)
    order = sorted(groups, key=lambda g: (-rems[g[0]], tie_keys[g[0]]))
    for g in order:
        if left <= 0:
            break
        if left >= len(g):
            for i in g:
                freqs[i] += 1
            left -= len(g)
    freqs[zero_index] += left
    if sum(freqs) != total or min(freqs) < 1:
        raise AssertionError("frequency normalisation failed")
    return freqs


def _gaussian_row(sigma: float, support: int) -> list[int]:
    with mpmath.workdps(_DPS):
        s = mpmath.mpf(sigma)
        probs = {k: mpmath.ncdf((k + 0.5) / s) - mpmath.ncdf((k - 0.5) / s) for k in range(0, support + 1)}
        weights = [probs[abs(k)] for k in range(-support, support + 1)]
        weights.append(1 - mpmath.fsum(weights))
        if weights[-1] < 0:
            weights[-1] = mpmath.mpf(0)
        n = 2 * support + 2
        tie_keys = [abs(k) for k in range(-support, support + 1)] + [support + 1]
        groups = [(support,)] + [(support - k, support + k) for k in range(1, support + 1)] + [(n - 1,)]
        freqs = _distribute(weights, tie_keys, groups, zero_index=support)
    return freqs


@functools.lru_cache(maxsize=8)
def _cached_tables(scales: tuple, support: int) -> np.ndarray:
    rows = []
    for sigma in scales:
        freqs = _gaussian_row(sigma, support)
        rows.append(np.concatenate([[0], np.cumsum(freqs)]))
    out = np.array(rows, dtype=np.int32)
    out.setflags(write=False)
    return out


def build_cdf_tables(scales=None, support: int = DEFAULT_SUPPORT) -> np.ndarray:
    """Cumulative frequency tables, one row per scale, shape ``(n, 2S + 3)``.

    Row ``i`` discretises a zero-mean Gaussian with standard deviation
    ``scales[i]``: ``P(k) = Phi((k + 1/2)/sigma) - Phi((k - 1/2)/sigma)`` for
    ``|k| <= S`` and the two tails pooled in the escape bucket.  Frequencies
    are symmetric in ``k``.
    """
    if support < 1:
        raise ValueError("support radius must be >= 1")
    scales = SCALE_TABLE if scales is None else np.asarray(scales, dtype=np.float64)
    if np.any(scales <= 0) or not np.all(np.isfinite(scales)):
        raise ValueError("scales must be positive and finite")
    return _cached_tables(tuple(float(s) for s in scales), int(support))


def histogram_cdf_tables(counts, support: int = DEFAULT_SUPPORT) -> np.ndarray:
    """Tables from per-channel symbol histograms with add-one smoothing.

    ``counts`` has shape ``(channels, 2S + 2)`` in table column order.  Used
    for the factorised hyper-latent prior.
    """
    counts = np.asarray(counts, dtype=np.int64)
    n = 2 * support + 2
    if counts.ndim != 2 or counts.shape[1] != n:
        raise ValueError(f"counts must have shape (channels, {n})")
    if np.any(counts < 0):
        raise ValueError("counts must be non-negative")
    tie_keys = [abs(k) for k in range(-support, support + 1)] + [support + 1]
    groups = [(i,) for i in range(n)]
    rows = []
    for row in counts:
        smoothed = [int(c) + 1 for c in row]
        denom = sum(smoothed)
        weights = [Fraction(c, denom) for c in smoothed]
        freqs = _distribute(weights, tie_keys, groups, zero_index=support)
        rows.append(np.concatenate([[0], np.cumsum(freqs)]))
    return np.array(rows, dtype=np.int32)


def symbol_histogram(symbols, support: int = DEFAULT_SUPPORT) -> np.ndarray:
    """Per-channel counts of ``symbols`` shaped ``(C, ...)`` in table column order."""
    symbols = np.asarray(symbols)
    c = symbols.shape[0]
    flat = symbols.reshape(c, -1).astype(np.int64)
    cols = np.where(np.abs(flat) <= support, flat + support, 2 * support + 1)
    out = np.zeros((c, 2 * support + 2), dtype=np.int64)
    for i in range(c):
        out[i] = np.bincount(cols[i], minlength=2 * support + 2)
    return out


def validate_tables(tables) -> None:
    t = np.asarray(tables)
    if t.ndim != 2 or t.shape[1] < 3:
        raise ValueError("tables must be 2-D with at least one symbol")
    if np.any(t[:, 0] != 0) or np.any(t[:, -1] != TOTAL):
        raise ValueError(f"each table must start at 0 and end at {TOTAL}")
    if np.any(np.diff(t, axis=1) < 1):
        raise ValueError("every symbol needs a frequency of at least 1")


def support_of(tables) -> int:
    return (np.asarray(tables).shape[1] - 3) // 2


def symbol_columns(symbols, support: int) -> np.ndarray:
    s = np.asarray(symbols, dtype=np.int64)
    return np.where(np.abs(s) <= support, s + support, 2 * support + 1)


def estimate_rate_bits(symbols, table_ids, tables) -> float:
    """Ideal code length ``sum(-log2(freq / 2**16))`` in bits.

    Out-of-support symbols cost the escape bucket plus the raw 16-bit value.
    """
    symbols = np.asarray(symbols)
    table_ids = np.asarray(table_ids)
    if symbols.shape != table_ids.shape:
        raise ValueError(f"symbols {symbols.shape} and table ids {table_ids.shape} differ in shape")
    tables = np.asarray(tables)
    if symbols.size == 0:
        return 0.0
    ids = table_ids.reshape(-1).astype(np.int64)
    if ids.min() < 0 or ids.max() >= tables.shape[0]:
        raise ValueError("table id out of range")
    support = support_of(tables)
    cols = symbol_columns(symbols.reshape(-1), support)
    freq = (tables[ids, cols + 1] - tables[ids, cols]).astype(np.float64)
    bits = PRECISION_BITS - np.log2(freq)
    bits += np.where(cols == 2 * support + 1, ESCAPE_RAW_BITS, 0)
    return float(np.sum(bits, dtype=np.float64))
