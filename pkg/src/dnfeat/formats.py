"""On-disk formats: the DNFT tensor container, PNG images, JSON documents.

DNFT layout (all integers little-endian)::

    b"DNFT" | version u8 = 1 | dtype u8 (0 = float32) | ndim u8 | ndim x u32 dims | payload

The payload is the row-major float32 data, ``prod(dims) * 4`` bytes.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np
from PIL import Image

from ._validation import FormatError

MAGIC = b"DNFT"
VERSION = 1
DTYPE_F32 = 0
_DTYPES = {DTYPE_F32: np.dtype("<f4")}


def encode_tensor(x) -> bytes:
    arr = np.asarray(x)
    if arr.ndim > 255:
        raise FormatError("too many dimensions for a tensor container")
    if any(d > 0xFFFFFFFF for d in arr.shape):
        raise FormatError("dimension exceeds u32")
    arr = np.asarray(arr, dtype=_DTYPES[DTYPE_F32], order="C")  # keeps 0-d shapes
    header = MAGIC + struct.pack("<BBB", VERSION, DTYPE_F32, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.tobytes(order="C")


def read_tensor_from(stream) -> np.ndarray:
    """Read exactly one container from a binary stream."""
    head = _read_exact(stream, 7)
    if head[:4] != MAGIC:
        raise FormatError(f"bad magic {head[:4]!r}")
    version, dtype, ndim = struct.unpack("<BBB", head[4:])
    if version != VERSION:
        raise FormatError(f"unsupported container version {version}")
    if dtype not in _DTYPES:
        raise FormatError(f"unsupported dtype code {dtype}")
    dims = struct.unpack(f"<{ndim}I", _read_exact(stream, 4 * ndim)) if ndim else ()
    np_dtype = _DTYPES[dtype]
    count = int(np.prod(dims, dtype=np.int64)) if ndim else 1
    payload = _read_exact(stream, count * np_dtype.itemsize)
    return np.frombuffer(payload, dtype=np_dtype).reshape(dims).astype(np.float32)


def decode_tensor(data: bytes) -> np.ndarray:
    stream = io.BytesIO(data)
    arr = read_tensor_from(stream)
    if stream.read(1):
        raise FormatError("trailing bytes after tensor container")
    return arr


def _read_exact(stream, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = stream.read(n - len(buf))
        if not chunk:
            raise FormatError(f"truncated stream: wanted {n} bytes, got {len(buf)}")
        buf += chunk
    return bytes(buf)


def atomic_write_bytes(path, data: bytes) -> None:
    """Write via a temp file in the same directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=path.suffix)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_tensor(path, x) -> None:
    atomic_write_bytes(path, encode_tensor(x))


def read_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def dump_json(obj) -> bytes:
    return (json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n").encode()


def write_json(path, obj) -> None:
    atomic_write_bytes(path, dump_json(obj))


def read_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def config_hash(obj) -> str:
    return sha256_hex(canonical_json(obj).encode())


def encode_png(img: np.ndarray) -> bytes:
    img = np.asarray(img)
    if img.dtype != np.uint8:
        raise FormatError("PNG encoding expects uint8 pixels")
    buf = io.BytesIO()
    Image.fromarray(img).save(buf, format="PNG", optimize=False, compress_level=6)
    return buf.getvalue()


def write_png(path, img: np.ndarray) -> None:
    atomic_write_bytes(path, encode_png(img))


def read_image(path_or_bytes, *, grayscale=True) -> np.ndarray:
    """Decode an image file to uint8, converting to single-channel by default."""
    try:
        if isinstance(path_or_bytes, (bytes, bytearray)):
            im = Image.open(io.BytesIO(path_or_bytes))
        else:
            im = Image.open(path_or_bytes)
        im.load()
    except (OSError, SyntaxError) as exc:
        raise FormatError(f"cannot decode image: {exc}") from exc
    if grayscale:
        im = im.convert("L")
    elif im.mode not in ("L", "RGB"):
        im = im.convert("RGB")
    return np.asarray(im, dtype=np.uint8).copy()
