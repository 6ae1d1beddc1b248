"""Minimal PNG reader/writer over zlib.

Writes 8-bit grayscale or RGB PNGs (filter 0 scanlines, single IDAT), which
keeps stored frames lossless and byte-reproducible.  Reads any non-interlaced
8-bit gray/RGB/paletted-free PNG, including alpha variants (alpha is dropped),
so frames produced by other tools still ingest.  JPEG ingestion lives in
`dataset`; this module is PNG only.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

from .imaging import Image

_SIGNATURE = b"\x89PNG\r\n\x1a\n"


class DecodeError(ValueError):
    """Malformed PNG stream; `offset` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


def encode_png(img: Image) -> bytes:
    """Serialize an Image to a PNG byte string (lossless, deterministic)."""
    color_type = 0 if img.channels == 1 else 2
    ihdr = struct.pack(">IIBBBBB", img.width, img.height, 8, color_type, 0, 0, 0)
    # Filter byte 0 prepended to every scanline.
    stride = img.width * img.channels
    raw = np.empty((img.height, 1 + stride), dtype=np.uint8)
    raw[:, 0] = 0
    raw[:, 1:] = np.frombuffer(img.pixels, dtype=np.uint8).reshape(img.height, stride)
    idat = zlib.compress(raw.tobytes(), 6)

    out = bytearray(_SIGNATURE)
    for tag, payload in ((b"IHDR", ihdr), (b"IDAT", idat), (b"IEND", b"")):
        out += struct.pack(">I", len(payload))
        out += tag
        out += payload
        out += struct.pack(">I", zlib.crc32(tag + payload) & 0xFFFFFFFF)
    return bytes(out)


def decode_png(data: bytes) -> Image:
    """Parse a PNG byte string into an Image.

    Raises DecodeError (with byte offset) on truncation, bad CRC, or an
    unsupported encoding (bit depth != 8, palette, interlace).
    """
    if len(data) < len(_SIGNATURE) or data[: len(_SIGNATURE)] != _SIGNATURE:
        raise DecodeError("not a PNG stream", 0)

    pos = len(_SIGNATURE)
    header: tuple[int, int, int] | None = None  # (width, height, channels-in-file)
    idat = bytearray()
    ended = False
    while not ended:
        if pos + 8 > len(data):
            raise DecodeError("truncated chunk header", pos)
        length, tag = struct.unpack(">I4s", data[pos : pos + 8])
        body_start = pos + 8
        body_end = body_start + length
        if body_end + 4 > len(data):
            raise DecodeError(f"truncated {tag.decode('latin1')} chunk", pos)
        body = data[body_start:body_end]
        (crc,) = struct.unpack(">I", data[body_end : body_end + 4])
        if crc != (zlib.crc32(tag + body) & 0xFFFFFFFF):
            raise DecodeError(f"bad CRC in {tag.decode('latin1')} chunk", pos)

        if tag == b"IHDR":
            if length != 13:
                raise DecodeError("IHDR must be 13 bytes", pos)
            w, h, depth, color_type, comp, filt, interlace = struct.unpack(">IIBBBBB", body)
            if depth != 8:
                raise DecodeError(f"unsupported bit depth {depth}", body_start)
            if color_type not in (0, 2, 4, 6):
                raise DecodeError(f"unsupported color type {color_type}", body_start)
            if comp != 0 or filt != 0:
                raise DecodeError("unsupported compression/filter method", body_start)
            if interlace != 0:
                raise DecodeError("interlaced PNG not supported", body_start)
            channels = {0: 1, 2: 3, 4: 2, 6: 4}[color_type]
            header = (w, h, channels)
        elif tag == b"IDAT":
            if header is None:
                raise DecodeError("IDAT before IHDR", pos)
            idat += body
        elif tag == b"IEND":
            ended = True
        # Ancillary chunks are skipped.
        pos = body_end + 4

    if header is None:
        raise DecodeError("missing IHDR", pos)
    if not idat:
        raise DecodeError("missing IDAT", pos)
    w, h, channels = header
    try:
        raw = zlib.decompress(bytes(idat))
    except zlib.error as exc:
        raise DecodeError(f"corrupt IDAT stream: {exc}", pos) from exc

    stride = w * channels
    if len(raw) != h * (1 + stride):
        raise DecodeError(
            f"decompressed size {len(raw)} != expected {h * (1 + stride)}", pos
        )
    pixels = _unfilter(np.frombuffer(raw, dtype=np.uint8).reshape(h, 1 + stride), channels)

    if channels == 2:  # gray+alpha -> gray
        pixels = pixels[:, 0::2]
        channels = 1
    elif channels == 4:  # RGBA -> RGB
        pixels = pixels.reshape(h, w, 4)[:, :, :3].reshape(h, -1)
        channels = 3
    return Image(width=w, height=h, channels=channels, pixels=np.ascontiguousarray(pixels).tobytes())


def _unfilter(rows: np.ndarray, bpp: int) -> np.ndarray:
    """Reverse per-scanline PNG filters; returns (h, stride) uint8."""
    h, _ = rows.shape
    out = np.zeros((h, rows.shape[1] - 1), dtype=np.uint8)
    prev = np.zeros(rows.shape[1] - 1, dtype=np.uint8)
    for y in range(h):
        ftype = int(rows[y, 0])
        line = rows[y, 1:].copy()
        if ftype == 0:
            pass
        elif ftype == 1:  # Sub: per-lane prefix sum, wraps mod 256
            for lane in range(bpp):
                np.cumsum(line[lane::bpp], dtype=np.uint8, out=line[lane::bpp])
        elif ftype == 2:  # Up
            line += prev
        elif ftype == 3:  # Average
            for x in range(line.size):
                left = int(line[x - bpp]) if x >= bpp else 0
                line[x] = (int(line[x]) + (left + int(prev[x])) // 2) & 0xFF
        elif ftype == 4:  # Paeth
            for x in range(line.size):
                a = int(line[x - bpp]) if x >= bpp else 0
                b = int(prev[x])
                c = int(prev[x - bpp]) if x >= bpp else 0
                p = a + b - c
                pa, pb, pc = abs(p - a), abs(p - b), abs(p - c)
                if pa <= pb and pa <= pc:
                    pred = a
                elif pb <= pc:
                    pred = b
                else:
                    pred = c
                line[x] = (int(line[x]) + pred) & 0xFF
        else:
            raise DecodeError(f"unknown scanline filter {ftype}", 0)
        out[y] = line
        prev = line
    return out
