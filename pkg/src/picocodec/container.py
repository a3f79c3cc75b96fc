"""Weights container: a UTF-8 manifest followed by raw little-endian tensors.

Layout::

    PICO-CONTAINER 1\\n
    meta <key>=<value>\\n            (zero or more; values are single-line text)
    tensor <name> <dtype> <shape> <offset> <length>\\n   (zero or more)
    end\\n
    <payload bytes>

``dtype`` is a numpy little-endian code such as ``<f4`` or ``<u1``; ``shape``
is comma-separated (``-`` for a scalar); ``offset`` counts from the first
payload byte.  Tensors are written in name order so identical contents give
identical bytes.
"""

from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np

MAGIC = "PICO-CONTAINER 1"
_DTYPES = {"<f4", "<f8", "<i1", "<i2", "<i4", "<i8", "<u1", "<u2", "<u4", "<u8"}


class ContainerError(ValueError):
    pass


def dumps(tensors: dict[str, np.ndarray], meta: dict[str, str] | None = None) -> bytes:
    meta = meta or {}
    lines = [MAGIC]
    for key in sorted(meta):
        value = str(meta[key])
        if "\n" in value or "=" in key or " " in key:
            raise ContainerError(f"unserialisable meta entry {key!r}")
        lines.append(f"meta {key}={value}")
    payload = []
    offset = 0
    for name in sorted(tensors):
        if any(ch.isspace() for ch in name):
            raise ContainerError(f"tensor name {name!r} contains whitespace")
        arr = np.asarray(tensors[name])
        dt = arr.dtype.newbyteorder("<")
        code = dt.str if dt.str != "|u1" else "<u1"
        code = {"|i1": "<i1"}.get(code, code)
        if code not in _DTYPES:
            raise ContainerError(f"unsupported dtype {arr.dtype} for {name}")
        raw = np.ascontiguousarray(arr, dtype=dt).tobytes()
        shape = ",".join(str(s) for s in arr.shape) or "-"
        lines.append(f"tensor {name} {code} {shape} {offset} {len(raw)}")
        payload.append(raw)
        offset += len(raw)
    lines.append("end")
    return ("\n".join(lines) + "\n").encode("utf-8") + b"".join(payload)


def loads(data: bytes) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    marker = b"\nend\n"
    cut = data.find(marker)
    if not data.startswith(MAGIC.encode()) or cut < 0:
        raise ContainerError("not a weights container")
    header = data[:cut].decode("utf-8").split("\n")
    body = memoryview(data)[cut + len(marker):]
    tensors: dict[str, np.ndarray] = {}
    meta: dict[str, str] = {}
    for line in header[1:]:
        kind, _, rest = line.partition(" ")
        if kind == "meta":
            key, _, value = rest.partition("=")
            meta[key] = value
        elif kind == "tensor":
            name, code, shape, offset, length = rest.split(" ")
            if code not in _DTYPES:
                raise ContainerError(f"unsupported dtype {code} for {name}")
            offset, length = int(offset), int(length)
            if offset + length > len(body):
                raise ContainerError(f"tensor {name} runs past end of container")
            dims = () if shape == "-" else tuple(int(s) for s in shape.split(","))
            arr = np.frombuffer(body[offset:offset + length], dtype=np.dtype(code))
            tensors[name] = arr.reshape(dims).astype(np.dtype(code).newbyteorder("="))
        else:
            raise ContainerError(f"unrecognised manifest line {line!r}")
    return tensors, meta


def save(path, tensors, meta=None) -> None:
    Path(path).write_bytes(dumps(tensors, meta))


def load(path):
    return loads(Path(path).read_bytes())


def digest(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()
