"""The .rsic container: header, compressed caption, packed map, latent streams.

Byte layout (all integers big-endian):

    offset  size  field
    0       4     magic "RSIC"
    4       1     format version (currently 1)
    5       4     image height, u32
    9       4     image width, u32
    13      1     weight-map levels, u8 in [1, 8]
    14      8     model hash (binds the container to checkpoint versions)
    22      2     compressed caption length, u16, then that many bytes
                  (raw DEFLATE, RFC 1951, no zlib wrapper)
    ...           packed weight map, exactly packed_size(dims, levels) bytes
    ...           4 latent streams, each u32 length followed by payload

The fixed header is 22 bytes. parse(serialize(c)) == c bit-exactly.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

from . import weight_map as wm

MAGIC = b"RSIC"
VERSION = 1
HEADER_SIZE = 22
NUM_STREAMS = 4
MAX_DESCRIPTION_BYTES = 1024


class ContainerError(ValueError):
    """Structured parse/serialize failure; message names the offending field."""


def compress_description(text: str) -> bytes:
    """Losslessly compress a caption with raw DEFLATE."""
    raw = text.encode("utf-8")
    if len(raw) > MAX_DESCRIPTION_BYTES:
        raise ContainerError(
            f"description is {len(raw)} bytes, limit {MAX_DESCRIPTION_BYTES}")
    comp = zlib.compressobj(9, zlib.DEFLATED, -15)
    return comp.compress(raw) + comp.flush()


def decompress_description(data: bytes) -> str:
    try:
        dec = zlib.decompressobj(-15)
        raw = dec.decompress(data)
        if not dec.eof or dec.unused_data:
            raise ContainerError("description: malformed DEFLATE stream")
        return raw.decode("utf-8")
    except (zlib.error, UnicodeDecodeError) as e:
        raise ContainerError(f"description: {e}") from e


@dataclass(frozen=True)
class RsicContainer:
    image_dims: tuple[int, int]  # (H, W)
    levels: int
    model_hash: bytes  # 8 bytes
    description: str
    map_bytes: bytes
    latent_streams: tuple[bytes, bytes, bytes, bytes]

    def __post_init__(self):
        h, w = self.image_dims
        if h <= 0 or w <= 0 or h > 0xFFFFFFFF or w > 0xFFFFFFFF:
            raise ContainerError(f"image_dims: invalid {self.image_dims}")
        if not 1 <= self.levels <= wm.MAX_LEVELS:
            raise ContainerError(f"levels: {self.levels} outside [1, {wm.MAX_LEVELS}]")
        if len(self.model_hash) != 8:
            raise ContainerError(f"model_hash: need 8 bytes, got {len(self.model_hash)}")
        expected = wm.packed_size(self.image_dims, self.levels)
        if len(self.map_bytes) != expected:
            raise ContainerError(
                f"map_bytes: {len(self.map_bytes)} bytes, expected {expected}")
        if len(self.latent_streams) != NUM_STREAMS:
            raise ContainerError(
                f"latent_streams: need {NUM_STREAMS} streams, got {len(self.latent_streams)}")
        object.__setattr__(self, "latent_streams", tuple(self.latent_streams))

    def weight_map(self) -> wm.WeightMap:
        return wm.unpack(self.map_bytes, self.image_dims, self.levels)

    def section_sizes(self) -> dict[str, int]:
        """Byte count per section; length prefixes are charged to their section."""
        sizes = {
            "header": HEADER_SIZE,
            "description": 2 + len(compress_description(self.description)),
            "map": len(self.map_bytes),
        }
        for i, s in enumerate(self.latent_streams):
            sizes[f"scale{i}"] = 4 + len(s)
        return sizes


def pack_container(image_dims, levels, model_hash, description, map_bytes,
                   latent_streams) -> bytes:
    """Serialize the parts; validates consistency via RsicContainer."""
    c = RsicContainer(tuple(image_dims), levels, bytes(model_hash), description,
                      bytes(map_bytes), tuple(bytes(s) for s in latent_streams))
    return serialize(c)


def serialize(c: RsicContainer) -> bytes:
    h, w = c.image_dims
    desc = compress_description(c.description)
    out = bytearray()
    out += MAGIC
    out += struct.pack(">B", VERSION)
    out += struct.pack(">II", h, w)
    out += struct.pack(">B", c.levels)
    out += c.model_hash
    out += struct.pack(">H", len(desc))
    out += desc
    out += c.map_bytes
    for s in c.latent_streams:
        out += struct.pack(">I", len(s))
        out += s
    return bytes(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, field: str) -> bytes:
        if self.pos + n > len(self.data):
            raise ContainerError(
                f"{field}: need {n} bytes at offset {self.pos}, "
                f"only {len(self.data) - self.pos} left")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk


def unpack_container(data: bytes) -> RsicContainer:
    rd = _Reader(data)
    magic = rd.take(4, "magic")
    if magic != MAGIC:
        raise ContainerError(f"magic: expected {MAGIC!r}, found {magic!r}")
    version = rd.take(1, "version")[0]
    if version != VERSION:
        raise ContainerError(f"version: unsupported {version}, expected {VERSION}")
    h, w = struct.unpack(">II", rd.take(8, "image_dims"))
    if h == 0 or w == 0:
        raise ContainerError(f"image_dims: invalid {h}x{w}")
    levels = rd.take(1, "levels")[0]
    if not 1 <= levels <= wm.MAX_LEVELS:
        raise ContainerError(f"levels: {levels} outside [1, {wm.MAX_LEVELS}]")
    model_hash = rd.take(8, "model_hash")
    desc_len, = struct.unpack(">H", rd.take(2, "description length"))
    description = decompress_description(rd.take(desc_len, "description"))
    map_bytes = rd.take(wm.packed_size((h, w), levels), "map")
    streams = []
    for i in range(NUM_STREAMS):
        n, = struct.unpack(">I", rd.take(4, f"scale{i} length"))
        streams.append(rd.take(n, f"scale{i}"))
    if rd.pos != len(data):
        raise ContainerError(
            f"container: {len(data) - rd.pos} trailing bytes after last stream")
    return RsicContainer((h, w), levels, model_hash, description, map_bytes,
                         tuple(streams))


def total_bpp(c: RsicContainer) -> tuple[float, dict[str, float]]:
    """Bits per pixel of the whole container plus a per-section breakdown."""
    h, w = c.image_dims
    pixels = h * w
    sizes = c.section_sizes()
    breakdown = {k: 8.0 * v / pixels for k, v in sizes.items()}
    return 8.0 * sum(sizes.values()) / pixels, breakdown
