"""Binary tensor files, PPM images, and deterministic JSON/CSV emission.

Tensor file layout (little-endian throughout):

    magic: 8 bytes ("AMGAZOO1" for model weights, "AMGADLT1" for
           exported perturbations)
    format version: u32
    header: u32 byte length + UTF-8 JSON
    tensor count: u32
    per tensor: rank u32, dims u32 x rank, payload float32 LE
    trailing CRC32 (u32) of all preceding bytes
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import BadMagicError, FileFormatError, FormatVersionError, TruncatedFileError

MAGIC_ZOO = b"AMGAZOO1"
MAGIC_DELTA = b"AMGADLT1"
FORMAT_VERSION = 1


def write_tensor_file(path, magic: bytes, header: dict, tensors) -> None:
    parts = [magic, struct.pack("<I", FORMAT_VERSION)]
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    parts.append(struct.pack("<I", len(header_bytes)))
    parts.append(header_bytes)
    parts.append(struct.pack("<I", len(tensors)))
    for t in tensors:
        arr = np.ascontiguousarray(t, dtype="<f4")
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    body += struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)
    Path(path).write_bytes(body)


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf = buf
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedFileError(
                f"{self.path}: truncated payload (wanted {n} bytes at offset {self.pos}, file has {len(self.buf)})")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def read_tensor_file(path, magic: bytes):
    """Returns (header dict, list of float32 arrays). Raises distinct parse errors."""
    buf = Path(path).read_bytes()
    if len(buf) < len(magic):
        raise TruncatedFileError(f"{path}: file shorter than magic")
    if buf[: len(magic)] != magic:
        raise BadMagicError(f"{path}: bad magic {buf[:len(magic)]!r}, expected {magic!r}")
    if len(buf) < len(magic) + 8:
        raise TruncatedFileError(f"{path}: truncated before version")
    stored_crc = struct.unpack("<I", buf[-4:])[0]
    if zlib.crc32(buf[:-4]) & 0xFFFFFFFF != stored_crc:
        raise FileFormatError(f"{path}: CRC32 mismatch")
    r = _Reader(buf[:-4], path)
    r.take(len(magic))
    version = r.u32()
    if version != FORMAT_VERSION:
        raise FormatVersionError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    header_len = r.u32()
    try:
        header = json.loads(r.take(header_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FileFormatError(f"{path}: malformed header JSON: {e}") from e
    count = r.u32()
    tensors = []
    for _ in range(count):
        rank = r.u32()
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank))
        n = int(np.prod(dims)) if rank else 1
        payload = r.take(4 * n)
        tensors.append(np.frombuffer(payload, dtype="<f4").reshape(dims).copy())
    return header, tensors


# ---------------------------------------------------------------------------
# PPM (P6) images; tensors are (3, h, w) float in [0, 1]


def write_ppm(path, image: np.ndarray) -> None:
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"expected (3, h, w) image, got {image.shape}")
    h, w = image.shape[1], image.shape[2]
    pixels = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    body = pixels.transpose(1, 2, 0).tobytes()
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + body)


def read_ppm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if not buf.startswith(b"P6"):
        raise FileFormatError(f"{path}: not a binary PPM")
    fields, pos = [], 2
    while len(fields) < 3:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        fields.append(int(buf[start:pos]))
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    pixels = np.frombuffer(buf, dtype=np.uint8, count=w * h * 3, offset=pos)
    return pixels.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float32) / float(maxval)


# ---------------------------------------------------------------------------
# deterministic JSON / CSV


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"not JSON serializable: {type(o)}")


def sanitize_floats(obj):
    """Replace non-finite floats with strings so emitted JSON stays standard."""
    if isinstance(obj, dict):
        return {k: sanitize_floats(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [sanitize_floats(v) for v in obj]
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        if f != f:
            return "nan"
        if f == float("inf"):
            return "inf"
        if f == float("-inf"):
            return "-inf"
        return f
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def write_json(path, obj) -> None:
    text = json.dumps(sanitize_floats(obj), indent=2, sort_keys=True, default=_json_default)
    Path(path).write_text(text + "\n", encoding="utf-8")


def read_json(path):
    return json.loads(Path(path).read_text(encoding="utf-8"))


def format_value(v) -> str:
    if isinstance(v, float):
        if v != v:
            return "nan"
        if v == float("inf"):
            return "inf"
        if v == float("-inf"):
            return "-inf"
        return repr(v)
    return str(v)


def write_csv(path, headers, rows) -> None:
    lines = [",".join(headers)]
    for row in rows:
        lines.append(",".join(format_value(v) for v in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
