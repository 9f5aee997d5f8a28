"""File formats: the ``.qbs`` frame container, PGM and PFM images.

``.qbs`` layout (little-endian)::

    magic "QBS1" | version u16 | width u16 | height u16 | bit_depth u8 |
    reserved u8 | n_frames u32 | frame_period_ns u64 | seed u64      (32 bytes)
    frame payload, row-major, one frame after another
    metadata length u32 | UTF-8 "key=value" lines

1-bit frames are packed LSB-first, each frame starting on a byte boundary.
Depths up to 8 bits use one byte per pixel, deeper frames two bytes.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .core_model import FrameSequence, SensorSpec

MAGIC = b"QBS1"
VERSION = 1
HEADER = struct.Struct("<4sHHHBBIQQ")
assert HEADER.size == 32


class FormatError(OSError):
    """Malformed or unsupported file contents."""


def _frame_nbytes(h: int, w: int, bit_depth: int) -> int:
    if bit_depth == 1:
        return (h * w + 7) // 8
    return h * w * (1 if bit_depth <= 8 else 2)


def encode_metadata(meta: dict[str, str]) -> bytes:
    lines = []
    for k, v in meta.items():
        k, v = str(k), str(v)
        if "=" in k or "\n" in k or "\n" in v:
            raise ValueError(f"metadata entry {k!r} cannot be encoded")
        lines.append(f"{k}={v}")
    return "\n".join(lines).encode("utf-8")


def decode_metadata(blob: bytes) -> dict[str, str]:
    meta = {}
    for line in blob.decode("utf-8").splitlines():
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"bad metadata line {line!r}")
        k, v = line.split("=", 1)
        meta[k] = v
    return meta


def spec_metadata(spec: SensorSpec) -> dict[str, str]:
    return {f"spec.{k}": v for k, v in spec.to_items()}


def spec_from_metadata(meta: dict[str, str]) -> SensorSpec:
    items = {k[5:]: v for k, v in meta.items() if k.startswith("spec.")}
    if not items:
        raise FormatError("file carries no sensor description")
    return SensorSpec.from_items(items)


def write_qbs(path, seq: FrameSequence, metadata: dict[str, str] | None = None) -> None:
    """Write a frame sequence; the sensor spec is always stored in the metadata."""
    frames = np.asarray(seq.frames)
    bit_depth = seq.spec.bit_depth
    if not np.issubdtype(frames.dtype, np.integer) and frames.dtype != bool:
        raise FormatError("only integer frames can be stored")
    n, h, w = frames.shape
    if h > 0xFFFF or w > 0xFFFF:
        raise FormatError("frame dimensions exceed 65535")
    top = (1 << bit_depth) - 1
    if frames.size and (frames.min() < 0 or frames.max() > top):
        raise FormatError(f"frame values exceed the {bit_depth}-bit range")
    period_ns = int(round(seq.frame_period_s * 1e9))
    meta = spec_metadata(seq.spec)
    meta["frame_period_s"] = repr(float(seq.frame_period_s))
    meta["start_time_s"] = repr(float(seq.start_time_s))
    for k, v in (metadata or {}).items():
        meta[k] = v
    blob = encode_metadata(meta)
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, VERSION, w, h, bit_depth, 0, n, period_ns, int(seq.seed) & (2**64 - 1)))
        if bit_depth == 1:
            flat = frames.reshape(n, h * w).astype(bool)
            fh.write(np.packbits(flat, axis=1, bitorder="little").tobytes())
        elif bit_depth <= 8:
            fh.write(frames.astype(np.uint8).tobytes())
        else:
            fh.write(frames.astype("<u2").tobytes())
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)


def read_qbs(path) -> tuple[FrameSequence, dict[str, str]]:
    """Read a ``.qbs`` file; returns the sequence and the full metadata."""
    data = Path(path).read_bytes()
    if len(data) < HEADER.size:
        raise FormatError("file too short for a header")
    magic, version, w, h, bit_depth, _, n, period_ns, seed = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError("not a QBS1 file")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    if bit_depth < 1 or bit_depth > 16:
        raise FormatError(f"unsupported bit depth {bit_depth}")
    fb = _frame_nbytes(h, w, bit_depth)
    off = HEADER.size
    end = off + n * fb
    if len(data) < end:
        raise FormatError("truncated frame payload")
    payload = np.frombuffer(data, dtype=np.uint8, count=n * fb, offset=off)
    if bit_depth == 1:
        bits = np.unpackbits(payload.reshape(n, fb), axis=1, count=h * w, bitorder="little")
        frames = bits.reshape(n, h, w)
    elif bit_depth <= 8:
        frames = payload.reshape(n, h, w).copy()
    else:
        frames = payload.view("<u2").reshape(n, h, w).astype(np.uint16)
    meta: dict[str, str] = {}
    if len(data) > end:
        if len(data) < end + 4:
            raise FormatError("truncated metadata length")
        (mlen,) = struct.unpack_from("<I", data, end)
        if len(data) < end + 4 + mlen:
            raise FormatError("truncated metadata block")
        meta = decode_metadata(data[end + 4: end + 4 + mlen])
    spec = spec_from_metadata(meta)
    period = period_ns * 1e-9
    exact = meta.get("frame_period_s")
    if exact is not None and int(round(float(exact) * 1e9)) == period_ns:
        period = float(exact)
    start = float(meta.get("start_time_s", "0.0"))
    return FrameSequence(spec, frames, start, period, seed), meta


# ---------------------------------------------------------------------------
# PGM / PFM

def write_pgm(path, img: np.ndarray, maxval: int | None = None) -> None:
    """Binary PGM; 16-bit samples are big-endian."""
    img = np.asarray(img)
    if img.ndim != 2:
        raise FormatError("PGM needs a 2-D image")
    if maxval is None:
        maxval = 255 if img.dtype == np.uint8 else 65535
    dtype = np.uint8 if maxval < 256 else ">u2"
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n{maxval}\n".encode("ascii"))
        fh.write(np.clip(img, 0, maxval).astype(dtype).tobytes())


def _pnm_tokens(data: bytes, count: int):
    """Header tokens of a PNM file and the payload offset (comments skipped)."""
    tokens, i = [], 0
    while len(tokens) < count:
        while i < len(data) and data[i:i + 1].isspace():
            i += 1
        if data[i:i + 1] == b"#":
            while i < len(data) and data[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < len(data) and not data[j:j + 1].isspace():
            j += 1
        if j == i:
            raise FormatError("truncated PNM header")
        tokens.append(data[i:j])
        i = j
    return tokens, i + 1


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens, off = _pnm_tokens(data, 4)
    if tokens[0] != b"P5":
        raise FormatError("only binary PGM (P5) is supported")
    w, h, maxval = (int(t) for t in tokens[1:])
    dtype = np.uint8 if maxval < 256 else ">u2"
    size = h * w * np.dtype(dtype).itemsize
    if len(data) < off + size:
        raise FormatError("truncated PGM payload")
    img = np.frombuffer(data, dtype=dtype, count=h * w, offset=off).reshape(h, w)
    return img.astype(np.uint8 if maxval < 256 else np.uint16)


def write_pfm(path, img: np.ndarray) -> None:
    """Grayscale little-endian PFM (rows stored bottom to top)."""
    img = np.asarray(img, dtype="<f4")
    if img.ndim != 2:
        raise FormatError("PFM needs a 2-D image")
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"Pf\n{w} {h}\n-1.0\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens, off = _pnm_tokens(data, 4)
    if tokens[0] != b"Pf":
        raise FormatError("only grayscale PFM (Pf) is supported")
    w, h = int(tokens[1]), int(tokens[2])
    scale = float(tokens[3])
    dtype = "<f4" if scale < 0 else ">f4"
    if len(data) < off + 4 * h * w:
        raise FormatError("truncated PFM payload")
    img = np.frombuffer(data, dtype=dtype, count=h * w, offset=off).reshape(h, w)
    return img[::-1].astype(np.float64)


def read_image(path) -> np.ndarray:
    """Load a flux image from ``.pfm``, ``.pgm`` or ``.npy``."""
    suffix = Path(path).suffix.lower()
    if suffix == ".pfm":
        return read_pfm(path)
    if suffix == ".pgm":
        return read_pgm(path).astype(np.float64)
    if suffix == ".npy":
        return np.load(path, allow_pickle=False).astype(np.float64)
    raise FormatError(f"unsupported image type {suffix!r}")

