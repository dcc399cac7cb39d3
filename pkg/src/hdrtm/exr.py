"""Minimal OpenEXR scanline codec.

Reads single-part scanline files with HALF or FLOAT channels and NONE, ZIP
or ZIPS compression. Writes HALF files (uncompressed by default). This is
enough to exchange linear radiance images with common tooling without a
native OpenEXR dependency.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import CorruptFile, UnsupportedFormat

MAGIC = 20000630
VERSION = 2
# version-field flags we refuse: tiled, deep, multi-part
_UNSUPPORTED_FLAGS = 0x200 | 0x800 | 0x1000

COMPRESSION_NONE = 0
COMPRESSION_ZIPS = 2
COMPRESSION_ZIP = 3
_LINES_PER_BLOCK = {COMPRESSION_NONE: 1, COMPRESSION_ZIPS: 1, COMPRESSION_ZIP: 16}

PIXEL_UINT = 0
PIXEL_HALF = 1
PIXEL_FLOAT = 2
_DTYPES = {PIXEL_HALF: np.dtype("<f2"), PIXEL_FLOAT: np.dtype("<f4")}


def _take(buf: bytes, pos: int, n: int) -> tuple[bytes, int]:
    if pos + n > len(buf):
        raise CorruptFile("unexpected end of file")
    return buf[pos:pos + n], pos + n


def _take_cstring(buf: bytes, pos: int) -> tuple[bytes, int]:
    end = buf.find(b"\0", pos)
    if end < 0:
        raise CorruptFile("unterminated string in header")
    return buf[pos:end], end + 1


def _parse_channels(payload: bytes) -> list[tuple[str, int]]:
    channels = []
    pos = 0
    while pos < len(payload) and payload[pos] != 0:
        name, pos = _take_cstring(payload, pos)
        if pos + 16 > len(payload):
            raise CorruptFile("truncated channel list")
        ptype, = struct.unpack_from("<i", payload, pos)
        xs, ys = struct.unpack_from("<ii", payload, pos + 8)
        pos += 16
        if (xs, ys) != (1, 1):
            raise UnsupportedFormat("subsampled channels are not supported")
        channels.append((name.decode("latin-1"), ptype))
    return channels


def _zip_unpack(data: bytes, unpacked_size: int) -> bytes:
    if len(data) == unpacked_size:
        return data  # writer stored the block raw
    try:
        raw = zlib.decompress(data)
    except zlib.error as exc:
        raise CorruptFile(f"bad zip block: {exc}") from exc
    if len(raw) != unpacked_size:
        raise CorruptFile("zip block has wrong unpacked size")
    arr = np.frombuffer(raw, np.uint8).astype(np.int64)
    dec = ((np.cumsum(arr - 128) + 128) % 256).astype(np.uint8)
    out = np.empty(arr.size, np.uint8)
    half = (arr.size + 1) // 2
    out[0::2] = dec[:half]
    out[1::2] = dec[half:]
    return out.tobytes()


def _zip_pack(raw: bytes) -> bytes:
    arr = np.frombuffer(raw, np.uint8)
    half = (arr.size + 1) // 2
    t = np.empty(arr.size, np.uint8)
    t[:half] = arr[0::2]
    t[half:] = arr[1::2]
    d = t.astype(np.int16)
    d[1:] = d[1:] - t[:-1].astype(np.int16) + 128
    packed = zlib.compress((d % 256).astype(np.uint8).tobytes())
    return packed if len(packed) < len(raw) else raw


def read_exr_channels(path) -> dict[str, np.ndarray]:
    """Decode an EXR file into a dict of float32 planes, one per channel."""
    buf = Path(path).read_bytes()
    pos = 0
    head, pos = _take(buf, pos, 8)
    magic, version = struct.unpack("<ii", head)
    if magic != MAGIC:
        raise UnsupportedFormat("not an EXR file (bad magic)")
    if version & _UNSUPPORTED_FLAGS:
        raise UnsupportedFormat("tiled, deep and multi-part EXR are not supported")
    if version & 0xFF != VERSION:
        raise UnsupportedFormat(f"EXR version {version & 0xFF} not supported")

    attrs: dict[str, bytes] = {}
    while True:
        name, pos = _take_cstring(buf, pos)
        if not name:
            break
        _, pos = _take_cstring(buf, pos)  # attribute type, unused
        size_b, pos = _take(buf, pos, 4)
        size, = struct.unpack("<i", size_b)
        if size < 0:
            raise CorruptFile("negative attribute size")
        payload, pos = _take(buf, pos, size)
        attrs[name.decode("latin-1")] = payload

    for required in ("channels", "compression", "dataWindow"):
        if required not in attrs:
            raise CorruptFile(f"missing required attribute {required!r}")

    channels = _parse_channels(attrs["channels"])
    if not channels:
        raise CorruptFile("empty channel list")
    compression = attrs["compression"][0]
    if compression not in _LINES_PER_BLOCK:
        raise UnsupportedFormat(f"compression code {compression} not supported")
    x_min, y_min, x_max, y_max = struct.unpack("<4i", attrs["dataWindow"])
    width = x_max - x_min + 1
    height = y_max - y_min + 1
    if width <= 0 or height <= 0:
        raise CorruptFile("empty data window")

    dtypes = []
    for name, ptype in channels:
        if ptype not in _DTYPES:
            raise UnsupportedFormat(f"pixel type {ptype} in channel {name!r}")
        dtypes.append(_DTYPES[ptype])
    row_bytes = [width * dt.itemsize for dt in dtypes]
    bytes_per_line = sum(row_bytes)

    lines_per_block = _LINES_PER_BLOCK[compression]
    num_blocks = -(-height // lines_per_block)
    table, pos = _take(buf, pos, 8 * num_blocks)
    offsets = struct.unpack(f"<{num_blocks}Q", table)

    planes = {name: np.empty((height, width), np.float32) for name, _ in channels}
    for offset in offsets:
        hdr, p = _take(buf, offset, 8)
        y, size = struct.unpack("<ii", hdr)
        if size < 0:
            raise CorruptFile("negative block size")
        data, p = _take(buf, p, size)
        row0 = y - y_min
        if not 0 <= row0 < height:
            raise CorruptFile("scanline outside data window")
        n_lines = min(lines_per_block, height - row0)
        unpacked = _zip_unpack(data, bytes_per_line * n_lines) \
            if compression != COMPRESSION_NONE else data
        if len(unpacked) != bytes_per_line * n_lines:
            raise CorruptFile("scanline block has wrong size")
        at = 0
        for line in range(n_lines):
            for (name, _), dt, nb in zip(channels, dtypes, row_bytes):
                row = np.frombuffer(unpacked, dt, count=width, offset=at)
                planes[name][row0 + line] = row.astype(np.float32)
                at += nb
    return planes


def read_exr(path) -> np.ndarray:
    """Read an EXR file as an H x W x 3 float32 RGB array.

    Accepts RGB files (extra channels are ignored) and single-channel
    files, which are replicated across the three outputs.
    """
    planes = read_exr_channels(path)
    if all(k in planes for k in "RGB"):
        return np.stack([planes["R"], planes["G"], planes["B"]], axis=-1)
    if len(planes) == 1:
        plane = next(iter(planes.values()))
        return np.repeat(plane[:, :, None], 3, axis=2)
    raise UnsupportedFormat(f"cannot assemble RGB from channels {sorted(planes)}")


def write_exr(path, rgb: np.ndarray, compression: str = "none") -> None:
    """Write an H x W x 3 array as a scanline EXR with HALF channels."""
    rgb = np.asarray(rgb, np.float32)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"expected H x W x 3 array, got {rgb.shape}")
    comp_code = {"none": COMPRESSION_NONE, "zips": COMPRESSION_ZIPS,
                 "zip": COMPRESSION_ZIP}.get(compression)
    if comp_code is None:
        raise ValueError(f"unknown compression {compression!r}")
    height, width, _ = rgb.shape
    half = rgb.astype("<f2")
    # channel storage is alphabetical: B, G, R
    order = (2, 1, 0)
    names = ("B", "G", "R")

    chlist = b""
    for name in names:
        chlist += name.encode() + b"\0"
        chlist += struct.pack("<i", PIXEL_HALF) + b"\0\0\0\0" + struct.pack("<ii", 1, 1)
    chlist += b"\0"
    box = struct.pack("<4i", 0, 0, width - 1, height - 1)

    def attr(name: str, type_: str, payload: bytes) -> bytes:
        return (name.encode() + b"\0" + type_.encode() + b"\0"
                + struct.pack("<i", len(payload)) + payload)

    header = b"".join([
        attr("channels", "chlist", chlist),
        attr("compression", "compression", bytes([comp_code])),
        attr("dataWindow", "box2i", box),
        attr("displayWindow", "box2i", box),
        attr("lineOrder", "lineOrder", b"\0"),
        attr("pixelAspectRatio", "float", struct.pack("<f", 1.0)),
        attr("screenWindowCenter", "v2f", struct.pack("<2f", 0.0, 0.0)),
        attr("screenWindowWidth", "float", struct.pack("<f", 1.0)),
        b"\0",
    ])

    lines_per_block = _LINES_PER_BLOCK[comp_code]
    blocks = []
    for row0 in range(0, height, lines_per_block):
        n_lines = min(lines_per_block, height - row0)
        raw = b"".join(
            half[row0 + line, :, c].tobytes()
            for line in range(n_lines) for c in order
        )
        payload = raw if comp_code == COMPRESSION_NONE else _zip_pack(raw)
        blocks.append(struct.pack("<ii", row0, len(payload)) + payload)

    prefix = struct.pack("<ii", MAGIC, VERSION) + header
    data_start = len(prefix) + 8 * len(blocks)
    offsets = []
    at = data_start
    for block in blocks:
        offsets.append(at)
        at += len(block)
    with open(path, "wb") as fh:
        fh.write(prefix)
        fh.write(struct.pack(f"<{len(offsets)}Q", *offsets))
        for block in blocks:
            fh.write(block)
