"""Byte-oriented range coder over 16-bit cumulative frequency tables.

Wire format (so that independent implementations interoperate):

* 32-bit ``range`` starting at ``0xFFFFFFFF`` and a 33-bit ``low`` with a
  one-byte carry cache (the LZMA construction).  The first emitted byte is
  always ``0x00``.
* Coding a symbol with cumulative count ``c`` and frequency ``f`` out of
  ``2**16``: ``r = range >> 16; low += r * c; range = r * f``.
* Renormalisation: while ``range < 2**24`` shift one byte out of ``low`` and
  ``range <<= 8``.
* Symbols outside ``[-S, S]`` are coded as the escape bucket followed by
  their 16-bit two's-complement value coded with ``c = value, f = 1``.
* Flush: five byte shifts.  The decoder primes itself with those first five
  bytes and must consume the stream exactly; leftover or missing bytes are
  reported as corruption.
"""

from __future__ import annotations

import numba
import numpy as np

from .entropy import PRECISION_BITS, support_of

_TOP = np.int64(1 << 24)
_MASK32 = np.int64(0xFFFFFFFF)

OK = 0
ERR_EOF = 1
ERR_BAD_START = 2
ERR_RANGE = 3
ERR_TRAILING = 4
ERR_ESCAPE = 5

_MESSAGES = {
    ERR_EOF: "stream ended early",
    ERR_BAD_START: "stream does not start with a zero byte",
    ERR_RANGE: "decoder state out of range",
    ERR_TRAILING: "unexpected trailing bytes",
    ERR_ESCAPE: "escaped value lies inside the table support",
}


class RangeCoderError(ValueError):
    """Corrupt or truncated entropy-coded stream."""

    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at symbol {position})")
        self.position = position


@numba.njit(cache=True)
def _shift_low(out, pos, low, cache, cache_size):
    if low < 0xFF000000 or low > 0xFFFFFFFF:
        carry = low >> 32
        temp = cache
        while True:
            out[pos] = (temp + carry) & 0xFF
            pos += 1
            temp = 0xFF
            cache_size -= 1
            if cache_size == 0:
                break
        cache = (low >> 24) & 0xFF
    cache_size += 1
    low = (low & 0x00FFFFFF) << 8
    return pos, low, cache, cache_size


@numba.njit(cache=True)
def _encode(symbols, table_ids, tables, support):
    n = symbols.shape[0]
    out = np.empty(16 + 5 * n, dtype=np.uint8)
    pos = 0
    low = np.int64(0)
    rng = np.int64(0xFFFFFFFF)
    cache = np.int64(0)
    cache_size = np.int64(1)
    esc = 2 * support + 1
    for i in range(n):
        s = np.int64(symbols[i])
        t = table_ids[i]
        raw = s < -support or s > support
        col = esc if raw else s + support
        c = np.int64(tables[t, col])
        f = np.int64(tables[t, col + 1]) - c
        for step in range(2 if raw else 1):
            if step == 1:
                c = s & 0xFFFF
                f = np.int64(1)
            r = rng >> PRECISION_BITS
            low += r * c
            rng = r * f
            while rng < _TOP:
                rng <<= 8
                pos, low, cache, cache_size = _shift_low(out, pos, low, cache, cache_size)
    for _ in range(5):
        pos, low, cache, cache_size = _shift_low(out, pos, low, cache, cache_size)
    return out[:pos]


@numba.njit(cache=True)
def _decode(data, table_ids, tables, support, out):
    """Returns ``(status, symbol_index)``."""
    n = table_ids.shape[0]
    m = data.shape[0]
    if m < 5:
        return ERR_EOF, 0
    if data[0] != 0:
        return ERR_BAD_START, 0
    code = np.int64(0)
    for j in range(1, 5):
        code = (code << 8) | np.int64(data[j])
    pos = 5
    rng = np.int64(0xFFFFFFFF)
    esc = 2 * support + 1
    total = np.int64(1) << PRECISION_BITS
    for i in range(n):
        t = table_ids[i]
        r = rng >> PRECISION_BITS
        count = code // r
        if count >= total:
            return ERR_RANGE, i
        # binary search for the last column with tables[t, col] <= count
        lo = 0
        hi = esc + 1
        while hi - lo > 1:
            mid = (lo + hi) >> 1
            if tables[t, mid] <= count:
                lo = mid
            else:
                hi = mid
        col = lo
        c = np.int64(tables[t, col])
        f = np.int64(tables[t, col + 1]) - c
        code -= r * c
        rng = r * f
        while rng < _TOP:
            if pos >= m:
                return ERR_EOF, i
            code = ((code << 8) | np.int64(data[pos])) & _MASK32
            pos += 1
            rng <<= 8
        if col == esc:
            r = rng >> PRECISION_BITS
            v = code // r
            if v >= total:
                return ERR_RANGE, i
            code -= r * v
            rng = r
            while rng < _TOP:
                if pos >= m:
                    return ERR_EOF, i
                code = ((code << 8) | np.int64(data[pos])) & _MASK32
                pos += 1
                rng <<= 8
            if v >= 32768:
                v -= 65536
            if -support <= v <= support:
                return ERR_ESCAPE, i
            out[i] = v
        else:
            out[i] = col - support
    if pos != m:
        return ERR_TRAILING, n
    return OK, n


def _prepare(table_ids, tables, n):
    tables = np.ascontiguousarray(tables, dtype=np.int32)
    ids = np.ascontiguousarray(np.asarray(table_ids).reshape(-1), dtype=np.int32)
    if ids.shape[0] != n:
        raise ValueError(f"got {n} symbols but {ids.shape[0]} table ids")
    if n and (ids.min() < 0 or ids.max() >= tables.shape[0]):
        raise ValueError("table id out of range")
    return ids, tables


def range_encode(symbols, table_ids, tables) -> bytes:
    """Encode integer ``symbols``, each under its own table row."""
    symbols = np.ascontiguousarray(np.asarray(symbols).reshape(-1), dtype=np.int64)
    ids, tables = _prepare(table_ids, tables, symbols.shape[0])
    if symbols.size and (symbols.min() < -32768 or symbols.max() > 32767):
        raise ValueError("symbols must fit in 16-bit two's complement")
    return _encode(symbols, ids, tables, support_of(tables)).tobytes()


def range_decode(data: bytes, table_ids, tables) -> np.ndarray:
    """Inverse of :func:`range_encode`; the number of symbols is ``len(table_ids)``."""
    buf = np.frombuffer(bytes(data), dtype=np.uint8)
    n = int(np.asarray(table_ids).size)
    ids, tables = _prepare(table_ids, tables, n)
    out = np.empty(n, dtype=np.int64)
    status, where = _decode(buf, ids, tables, support_of(tables), out)
    if status != OK:
        raise RangeCoderError(_MESSAGES[status], int(where))
    return out
