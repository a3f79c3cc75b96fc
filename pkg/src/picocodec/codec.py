"""Tiled image encoder/decoder.

An image is cut into 504x504 cores.  Each core is padded to a 512x512 tile
with a 4-pixel margin taken from the neighbouring image content (edge
replication outside the image), and every tile is coded independently:

    encode:  x -> outer encoder -> (y, z); gain(y); z_hat = round(z)
             z_hat -> factorised z tables -> bytes
             z_hat -> integer scale decoder -> sigma indices
             z_hat -> context decoder -> p; per phase (mu, q) -> y_hat
             y_hat -> range coder under sigma -> bytes
    decode:  mirror; y_hat is entropy-decoded in one pass, then the context
             phases reconstruct y_tilde, the inverse gain is applied and the
             outer decoder produces the tile.

Bitstream layout (little-endian)::

    "PICO" | version u8 | level u8 | width u32 | height u32 | cols u16 | rows u16
    | per tile (row-major): z_bytes u32, y_bytes u32 | CRC-32 of the above u32
    | per tile: z payload, y payload
"""

from __future__ import annotations

import logging
import queue
import struct
import threading
import zlib
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import container
from .context import (
    ContextModel,
    LatentBundle,
    dequantize_with_context,
    quantize_with_context,
    round_half_away,
)
from .entropy import (
    DEFAULT_SUPPORT,
    build_cdf_tables,
    estimate_rate_bits,
    histogram_cdf_tables,
    symbol_histogram,
)
from .model import Model, ModelConfig, build_graph, build_model, final_config, tiny_config
from .quant import QuantizedModel, quantize_model, run_scale_decoder
from .rangecoder import RangeCoderError, range_decode, range_encode

logger = logging.getLogger(__name__)

TILE_CORE = 504
TILE_SIZE = 512
TILE_MARGIN = 4
NUM_LEVELS = 71
NUM_COARSE_LEVELS = 8
MAGIC = b"PICO"
VERSION = 1
_FIXED = struct.Struct("<4sBBIIHH")
_TILE = struct.Struct("<II")
_CRC = struct.Struct("<I")


class CodecError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Tiling
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TileGrid:
    width: int
    height: int
    core: int = TILE_CORE
    size: int = TILE_SIZE
    margin: int = TILE_MARGIN

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError(f"image dimensions must be positive, got {self.width}x{self.height}")

    @property
    def cols(self) -> int:
        return -(-self.width // self.core)

    @property
    def rows(self) -> int:
        return -(-self.height // self.core)

    def __len__(self) -> int:
        return self.rows * self.cols

    def core_rect(self, r: int, c: int) -> tuple[int, int, int, int]:
        """``(x0, y0, w, h)`` of the core of tile ``(r, c)``."""
        if not (0 <= r < self.rows and 0 <= c < self.cols):
            raise IndexError(f"tile ({r}, {c}) outside a {self.rows}x{self.cols} grid")
        x0, y0 = c * self.core, r * self.core
        return x0, y0, min(self.core, self.width - x0), min(self.core, self.height - y0)

    def tiles(self):
        for r in range(self.rows):
            for c in range(self.cols):
                yield r, c


def partition_tiles(width: int, height: int) -> TileGrid:
    return TileGrid(int(width), int(height))


def extract_padded_tile(image: np.ndarray, grid: TileGrid, r: int, c: int) -> np.ndarray:
    """``(C, 512, 512)`` tile whose core sits at offset ``(4, 4)``."""
    image = np.asarray(image)
    if image.shape[:2] != (grid.height, grid.width):
        raise ValueError(f"image is {image.shape[1]}x{image.shape[0]}, grid expects {grid.width}x{grid.height}")
    x0, y0, _, _ = grid.core_rect(r, c)
    ys = np.clip(np.arange(grid.size) + y0 - grid.margin, 0, grid.height - 1)
    xs = np.clip(np.arange(grid.size) + x0 - grid.margin, 0, grid.width - 1)
    return np.ascontiguousarray(image[ys[:, None], xs[None, :]].transpose(2, 0, 1))


def place_core(out: np.ndarray, tile: np.ndarray, grid: TileGrid, r: int, c: int) -> None:
    """Write the core of a ``(C, 512, 512)`` tile into an ``(H, W, C)`` image."""
    x0, y0, w, h = grid.core_rect(r, c)
    m = grid.margin
    out[y0:y0 + h, x0:x0 + w] = tile[:, m:m + h, m:m + w].transpose(1, 2, 0)


# ---------------------------------------------------------------------------
# Quality level
# ---------------------------------------------------------------------------


def _level_weights(level: int) -> tuple[int, float]:
    if isinstance(level, bool) or not isinstance(level, (int, np.integer)) or not 0 <= level < NUM_LEVELS:
        raise ValueError(f"quality level must be an integer in [0, {NUM_LEVELS - 1}], got {level!r}")
    i, rem = divmod(int(level), 10)
    return i, rem / 10.0


def level_embedding(level: int) -> np.ndarray:
    """Interpolated one-hot vector over the 8 coarse levels."""
    i, f = _level_weights(level)
    v = np.zeros(NUM_COARSE_LEVELS, dtype=np.float64)
    v[i] = 1.0 - f
    if f:
        v[i + 1] = f
    return v


@dataclass(frozen=True, eq=False)
class GainTable:
    """Channel-wise latent gains per coarse level, shape ``(8, C_y)``."""

    gains: np.ndarray

    def __post_init__(self):
        g = np.asarray(self.gains, dtype=np.float64)
        if g.ndim != 2 or g.shape[0] != NUM_COARSE_LEVELS:
            raise ValueError(f"gain table must have shape ({NUM_COARSE_LEVELS}, C), got {g.shape}")
        if not np.all(np.isfinite(g)) or np.any(g <= 0):
            raise ValueError("gains must be positive and finite")

    def at(self, level: int) -> np.ndarray:
        return level_embedding(level) @ np.asarray(self.gains, dtype=np.float64)

    @classmethod
    def ones(cls, channels: int) -> "GainTable":
        return cls(np.ones((NUM_COARSE_LEVELS, channels)))


def apply_level_gain(y, level: int, gt: GainTable, direction: str = "forward") -> np.ndarray:
    g = gt.at(level)
    y = np.asarray(y, dtype=np.float64)
    if y.shape[-3] != g.shape[0]:
        raise ValueError(f"latent has {y.shape[-3]} channels, gain table {g.shape[0]}")
    g = g[:, None, None]
    if direction == "forward":
        return y * g
    if direction == "inverse":
        return y / g
    raise ValueError(f"direction must be 'forward' or 'inverse', got {direction!r}")


def level_planes(level: int, h: int, w: int) -> np.ndarray:
    return np.broadcast_to(level_embedding(level)[:, None, None], (NUM_COARSE_LEVELS, h, w)).astype(np.float32)


# ---------------------------------------------------------------------------
# Header
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BitstreamHeader:
    level: int
    width: int
    height: int
    cols: int
    rows: int
    tile_sizes: tuple  # ((z_bytes, y_bytes), ...) row-major
    version: int = VERSION

    @property
    def payload_size(self) -> int:
        return sum(z + y for z, y in self.tile_sizes)


def serialize_header(h: BitstreamHeader) -> bytes:
    if len(h.tile_sizes) != h.cols * h.rows:
        raise CodecError(f"header lists {len(h.tile_sizes)} tiles for a {h.rows}x{h.cols} grid")
    try:
        parts = [_FIXED.pack(MAGIC, h.version, h.level, h.width, h.height, h.cols, h.rows)]
        parts += [_TILE.pack(z, y) for z, y in h.tile_sizes]
    except struct.error as exc:
        raise CodecError(f"header field out of range: {exc}") from None
    body = b"".join(parts)
    return body + _CRC.pack(zlib.crc32(body))


def parse_header(data: bytes) -> tuple[BitstreamHeader, int]:
    """``(header, header_length)``."""
    if len(data) < _FIXED.size:
        raise CodecError("stream too short for a header")
    magic, version, level, width, height, cols, rows = _FIXED.unpack_from(data, 0)
    if magic != MAGIC:
        raise CodecError(f"bad magic {magic!r}")
    if version != VERSION:
        raise CodecError(f"unsupported version {version}")
    n = cols * rows
    end = _FIXED.size + n * _TILE.size
    if len(data) < end + _CRC.size:
        raise CodecError(f"header truncated: expected {n} tile entries")
    (crc,) = _CRC.unpack_from(data, end)
    if crc != zlib.crc32(data[:end]):
        raise CodecError("header CRC mismatch")
    sizes = tuple(_TILE.unpack_from(data, _FIXED.size + i * _TILE.size) for i in range(n))
    h = BitstreamHeader(level, width, height, cols, rows, sizes, version)
    if level >= NUM_LEVELS:
        raise CodecError(f"level {level} out of range")
    grid = partition_tiles(width, height) if width and height else None
    if grid is None or (grid.cols, grid.rows) != (cols, rows):
        raise CodecError(f"tile grid {cols}x{rows} inconsistent with image {width}x{height}")
    return h, end + _CRC.size


# ---------------------------------------------------------------------------
# Codec bundle
# ---------------------------------------------------------------------------


PRESETS = {"tiny": tiny_config, "final": final_config}
_PREFIXES = {"encoder": "enc", "decoder": "dec", "scale_decoder": "sdec", "context_decoder": "cdec"}


def _synthetic_image(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """Smooth random RGB content (low-resolution noise, bilinearly enlarged)."""
    small = rng.random((h // 32 + 2, w // 32 + 2, 3))
    ys = np.linspace(0, small.shape[0] - 1.001, h)
    xs = np.linspace(0, small.shape[1] - 1.001, w)
    y0, x0 = ys.astype(int), xs.astype(int)
    fy, fx = (ys - y0)[:, None, None], (xs - x0)[None, :, None]
    img = (small[y0][:, x0] * (1 - fy) * (1 - fx) + small[y0 + 1][:, x0] * fy * (1 - fx)
           + small[y0][:, x0 + 1] * (1 - fy) * fx + small[y0 + 1][:, x0 + 1] * fy * fx)
    img += 0.05 * rng.standard_normal(img.shape)
    return np.clip(np.round(img * 255), 0, 255).astype(np.uint8)


@dataclass(eq=False)
class Codec:
    encoder: Model
    decoder: Model
    scale_decoder: Model
    context_decoder: Model
    context: ContextModel
    gains: GainTable
    scale_q: QuantizedModel
    z_tables: np.ndarray
    support: int = DEFAULT_SUPPORT
    _y_tables: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def y_tables(self) -> np.ndarray:
        if self._y_tables is None:
            self._y_tables = build_cdf_tables(support=self.support)
        return self._y_tables

    @property
    def latent_channels(self) -> int:
        return self.encoder.config.latent_channels

    @property
    def schedule(self) -> str:
        return self.context.schedule

    # -- construction -------------------------------------------------------

    @classmethod
    def synthetic(cls, seed: int = 0, preset: str = "tiny", schedule: str = "grid2x2",
                  calibration_tiles: int = 2, learned_qwidth: bool = True) -> "Codec":
        """Random-weight codec, fully determined by its arguments."""
        if preset not in PRESETS:
            raise ValueError(f"preset must be one of {sorted(PRESETS)}")
        make = PRESETS[preset]
        kw = dict(context_schedule=schedule, learned_qwidth=learned_qwidth)
        enc = build_model(make("outer_encoder", **kw), seed)
        dec = build_model(make("outer_decoder", **kw), seed + 1)
        sdec = build_model(make("scale_decoder", **kw), seed + 2)
        cdec = build_model(make("context_decoder", **kw), seed + 3)
        cy = enc.config.latent_channels
        ctx = ContextModel.init(cy, schedule, seed + 4, learned_qwidth=learned_qwidth)
        rng = np.random.default_rng([seed, 17])
        ramp = 2.0 ** ((np.arange(NUM_COARSE_LEVELS) - 3.5) / 2.0)
        gains = GainTable(ramp[:, None] * np.exp(rng.uniform(-0.2, 0.2, (NUM_COARSE_LEVELS, cy))))
        inputs = []
        for _ in range(max(1, calibration_tiles)):
            tile = _synthetic_image(rng, TILE_SIZE, TILE_SIZE).transpose(2, 0, 1).astype(np.float32) / 255.0
            level = int(rng.integers(0, NUM_LEVELS))
            inputs.append(np.concatenate([tile, level_planes(level, TILE_SIZE, TILE_SIZE)])[None])
        _normalise_synthetic(enc, sdec, inputs[0])
        z_cal = [quantize_hyper(enc.forward(x)["out"][0]) for x in inputs]
        scale_q = quantize_model(sdec, z_cal)
        z_tables = histogram_cdf_tables(sum(symbol_histogram(z) for z in z_cal))
        return cls(enc, dec, sdec, cdec, ctx, gains, scale_q, z_tables)

    # -- persistence ---------------------------------------------------------

    def to_bytes(self) -> bytes:
        tensors, meta = {}, {"kind": "pico-codec", "support": str(self.support)}
        for attr, prefix in _PREFIXES.items():
            model: Model = getattr(self, attr)
            for k, v in model.weights.items():
                tensors[f"{prefix}.{k}"] = v
            for k, v in model.config.to_kv().items():
                meta[f"{prefix}.{k}"] = v
        for k, v in self.context.weights.items():
            tensors[k] = v
        meta["ctx.latent_channels"] = str(self.context.latent_channels)
        meta["ctx.schedule"] = self.context.schedule
        meta["ctx.hidden"] = str(self.context.hidden)
        meta["ctx.learned_qwidth"] = "1" if self.context.learned_qwidth else "0"
        tensors["gains"] = np.asarray(self.gains.gains, dtype=np.float64)
        tensors["z_tables"] = np.asarray(self.z_tables, dtype=np.int32)
        tensors["scale_q"] = np.frombuffer(self.scale_q.to_bytes(), dtype=np.uint8)
        return container.dumps(tensors, meta)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Codec":
        tensors, meta = container.loads(data)
        if meta.get("kind") != "pico-codec":
            raise ValueError("container does not hold codec weights")
        models = {}
        for attr, prefix in _PREFIXES.items():
            kv = {k[len(prefix) + 1:]: v for k, v in meta.items() if k.startswith(prefix + ".")}
            cfg = ModelConfig.from_kv(kv)
            weights = {k[len(prefix) + 1:]: v for k, v in tensors.items() if k.startswith(prefix + ".")}
            models[attr] = Model(build_graph(cfg), weights)
        ctx = ContextModel(
            int(meta["ctx.latent_channels"]), meta["ctx.schedule"], int(meta["ctx.hidden"]),
            {k: v for k, v in tensors.items() if k.startswith("ctx.")}, meta["ctx.learned_qwidth"] == "1",
        )
        scale_q = QuantizedModel.from_bytes(tensors["scale_q"].tobytes())
        return cls(context=ctx, gains=GainTable(tensors["gains"]), scale_q=scale_q,
                   z_tables=tensors["z_tables"], support=int(meta["support"]), **models)

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Codec":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def _rescale_conv(model: Model, name: str, factor: float, bias: bool = True) -> None:
    model.weights[f"{name}.weight"] = (model.weights[f"{name}.weight"] * factor).astype(np.float32)
    if bias:
        model.weights[f"{name}.bias"] = (model.weights[f"{name}.bias"] * factor).astype(np.float32)
    model.invalidate()


def _normalise_synthetic(enc: Model, sdec: Model, x: np.ndarray) -> None:
    """Data-dependent rescaling so random-weight latents have useful spread:
    y std ~4, z std ~3 and a scale-decoder head spanning many table indices."""
    y = enc.forward(x)["y"]
    if y.std() > 0:
        _rescale_conv(enc, "latent.conv", 4.0 / float(y.std()))
    z = enc.forward(x)["out"]
    if z.std() > 0:
        _rescale_conv(enc, "hyper1.conv", 3.0 / float(z.std()))
    z_hat = quantize_hyper(enc.forward(x)["out"][0])
    head = sdec.forward(z_hat[None].astype(np.float32))["out"]
    spread = float((head - sdec.weights["head.bias"][None, :, None, None]).std())
    if spread > 0:
        _rescale_conv(sdec, "head", 8.0 / spread, bias=False)


def quantize_hyper(z) -> np.ndarray:
    """Unit-width rounding of the hyper-latent, clipped to int16."""
    return np.clip(round_half_away(z), -32768, 32767).astype(np.int64)


def _z_ids(shape) -> np.ndarray:
    c = shape[0]
    return np.broadcast_to(np.arange(c)[:, None, None], shape).reshape(-1)


# ---------------------------------------------------------------------------
# Per-tile coding
# ---------------------------------------------------------------------------


def encode_tile(codec: Codec, tile: np.ndarray, level: int) -> tuple[bytes, bytes, LatentBundle]:
    """``tile`` is uint8 ``(3, 512, 512)``."""
    x = tile.astype(np.float32) / 255.0
    _, h, w = x.shape
    taps = codec.encoder.forward(np.concatenate([x, level_planes(level, h, w)])[None])
    y = apply_level_gain(taps["y"][0], level, codec.gains, "forward")
    z = taps["out"][0]
    z_hat = quantize_hyper(z)
    z_bytes = range_encode(z_hat, _z_ids(z_hat.shape), codec.z_tables)
    sigma_idx = run_scale_decoder(codec.scale_q, z_hat)
    if sigma_idx.shape != y.shape:
        raise CodecError(f"scale map {sigma_idx.shape} does not match latent {y.shape}")
    p = codec.context_decoder.forward(z_hat[None].astype(np.float32))["out"][0]
    y_hat, mu, q, y_tilde = quantize_with_context(codec.context, p, y)
    y_bytes = range_encode(y_hat, sigma_idx, codec.y_tables)
    bundle = LatentBundle(y, z, mu, q, y_hat, y_tilde, z_hat, sigma_idx)
    return z_bytes, y_bytes, bundle


def _entropy_decode_tile(codec: Codec, z_bytes: bytes, y_bytes: bytes, level: int):
    c_z = codec.scale_q.in_channels
    side = TILE_SIZE // 64
    shape_z = (c_z, side, side)
    z_hat = range_decode(z_bytes, _z_ids(shape_z), codec.z_tables).reshape(shape_z)
    sigma_idx = run_scale_decoder(codec.scale_q, z_hat)
    y_hat = range_decode(y_bytes, sigma_idx, codec.y_tables).reshape(sigma_idx.shape)
    p = codec.context_decoder.forward(z_hat[None].astype(np.float32))["out"][0]
    y_tilde, mu, q = dequantize_with_context(codec.context, p, y_hat)
    return z_hat, sigma_idx, y_hat, y_tilde, mu, q


def _synthesize_tile(codec: Codec, y_tilde: np.ndarray, level: int) -> np.ndarray:
    y = apply_level_gain(y_tilde, level, codec.gains, "inverse").astype(np.float32)
    _, h, w = y.shape
    x = codec.decoder.forward(np.concatenate([y, level_planes(level, h, w)])[None])["out"][0]
    return np.clip(np.round(x * 255.0), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# Image level
# ---------------------------------------------------------------------------


def _check_image(image) -> np.ndarray:
    image = np.asarray(image)
    if image.dtype != np.uint8 or image.ndim != 3 or image.shape[2] != 3:
        raise CodecError(f"expected an 8-bit RGB image shaped (H, W, 3), got {image.dtype} {image.shape}")
    return image


def encode_image(image, level: int, codec: Codec, return_latents: bool = False):
    image = _check_image(image)
    _level_weights(level)
    grid = partition_tiles(image.shape[1], image.shape[0])
    sizes, payload, bundles = [], [], []
    for r, c in grid.tiles():
        z_bytes, y_bytes, bundle = encode_tile(codec, extract_padded_tile(image, grid, r, c), level)
        sizes.append((len(z_bytes), len(y_bytes)))
        payload += [z_bytes, y_bytes]
        bundles.append(bundle)
    header = BitstreamHeader(level, grid.width, grid.height, grid.cols, grid.rows, tuple(sizes))
    data = serialize_header(header) + b"".join(payload)
    return (data, bundles) if return_latents else data


def estimate_tile_bits(codec: Codec, bundle: LatentBundle) -> float:
    z_bits = estimate_rate_bits(bundle.z_hat, _z_ids(bundle.z_hat.shape).reshape(bundle.z_hat.shape), codec.z_tables)
    return z_bits + estimate_rate_bits(bundle.y_hat, bundle.sigma_idx, codec.y_tables)


def _split_payload(data: bytes, header: BitstreamHeader, offset: int) -> list[tuple[bytes, bytes]]:
    chunks = []
    pos = offset
    for i, (zn, yn) in enumerate(header.tile_sizes):
        if pos + zn + yn > len(data):
            r, c = divmod(i, header.cols)
            raise CodecError(f"stream truncated: tile {i} (row {r}, col {c}) is missing payload bytes")
        chunks.append((data[pos:pos + zn], data[pos + zn:pos + zn + yn]))
        pos += zn + yn
    if pos != len(data):
        raise CodecError(f"{len(data) - pos} unexpected trailing bytes after the last tile")
    return chunks


def decode_image(data: bytes, codec: Codec, pipelined: bool = True, return_latents: bool = False):
    header, offset = parse_header(data)
    grid = partition_tiles(header.width, header.height)
    chunks = _split_payload(data, header, offset)
    level = header.level
    out = np.zeros((grid.height, grid.width, 3), dtype=np.uint8)
    tiles = list(grid.tiles())
    latents: list = [None] * len(tiles)

    def entropy_stage(i):
        try:
            return _entropy_decode_tile(codec, *chunks[i], level)
        except RangeCoderError as exc:
            r, c = tiles[i]
            raise CodecError(f"tile {i} (row {r}, col {c}): {exc}") from exc

    def neural_stage(i, dec):
        latents[i] = dec
        place_core(out, _synthesize_tile(codec, dec[3], level), grid, *tiles[i])

    if not pipelined or len(tiles) == 1:
        for i in range(len(tiles)):
            neural_stage(i, entropy_stage(i))
    else:
        q: queue.Queue = queue.Queue(maxsize=2)
        stop = threading.Event()

        def producer():
            for i in range(len(tiles)):
                if stop.is_set():
                    return
                try:
                    item = (i, entropy_stage(i), None)
                except Exception as exc:
                    item = (i, None, exc)
                q.put(item)
                if item[2] is not None:
                    return

        worker = threading.Thread(target=producer, name="pico-entropy", daemon=True)
        worker.start()
        try:
            for _ in range(len(tiles)):
                i, dec, exc = q.get()
                if exc is not None:
                    raise exc
                neural_stage(i, dec)
        finally:
            stop.set()
            while worker.is_alive():
                try:
                    q.get_nowait()
                except queue.Empty:
                    worker.join(0.01)
    if return_latents:
        keys = ("z_hat", "sigma_idx", "y_hat", "y_tilde", "mu", "q")
        return out, [dict(zip(keys, d)) for d in latents]
    return out
