"""Little-endian named-tensor container shared by checkpoints and corpus files.

Layout::

    magic (8 bytes) | version u32 | header_len u32 | header (utf-8 text)
    count u32
    per tensor: name_len u16 | name | dtype u8 | rank u8 | extents u32*rank | raw data

Tensors are written in the order given, so identical inputs produce identical
bytes.
"""
from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<i8"), 4: np.dtype("<i4"), 5: np.dtype("u1")}
_CODES = {v: k for k, v in _DTYPES.items()}


class FormatError(ValueError):
    pass


def _code(arr: np.ndarray) -> int:
    if arr.dtype == np.bool_:
        return 5
    try:
        return _CODES[arr.dtype.newbyteorder("<")]
    except KeyError:
        raise FormatError(f"unsupported dtype {arr.dtype}") from None


def encode(magic: bytes, version: int, header: str, tensors: dict[str, np.ndarray]) -> bytes:
    if len(magic) != 8:
        raise ValueError("magic must be 8 bytes")
    head = header.encode("utf-8")
    parts = [magic, struct.pack("<II", version, len(head)), head, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        code = _code(arr)
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw_name)) + raw_name)
        parts.append(struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        data = arr.astype(_DTYPES[code], copy=False) if code != 5 else arr.astype(np.uint8)
        parts.append(np.ascontiguousarray(data).tobytes())
    return b"".join(parts)


def decode(blob: bytes, magic: bytes) -> tuple[int, str, dict[str, np.ndarray]]:
    try:
        return _decode(blob, magic)
    except (struct.error, UnicodeDecodeError) as exc:
        raise FormatError(f"truncated or corrupt tensor file: {exc}") from None


def _decode(blob: bytes, magic: bytes) -> tuple[int, str, dict[str, np.ndarray]]:
    if blob[:8] != magic:
        raise FormatError(f"bad magic {blob[:8]!r}, expected {magic!r}")
    pos = 8
    version, hlen = struct.unpack_from("<II", blob, pos)
    pos += 8
    header = blob[pos:pos + hlen].decode("utf-8")
    pos += hlen
    (count,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos:pos + nlen].decode("utf-8")
        pos += nlen
        code, rank = struct.unpack_from("<BB", blob, pos)
        pos += 2
        shape = struct.unpack_from(f"<{rank}I", blob, pos)
        pos += 4 * rank
        if code not in _DTYPES:
            raise FormatError(f"unknown dtype code {code} for {name}")
        dt = _DTYPES[code]
        n = int(np.prod(shape)) if rank else 1
        if pos + n * dt.itemsize > len(blob):
            raise FormatError(f"tensor {name} runs past end of file")
        arr = np.frombuffer(blob, dtype=dt, count=n, offset=pos).reshape(shape).copy()
        pos += n * dt.itemsize
        tensors[name] = arr.astype(bool) if code == 5 else arr
    if pos != len(blob):
        raise FormatError(f"{len(blob) - pos} trailing bytes")
    return version, header, tensors


def atomic_write(path: str | os.PathLike, data: bytes | str) -> None:
    """Write via a temp file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save(path, magic: bytes, version: int, header: str, tensors: dict[str, np.ndarray]) -> None:
    atomic_write(path, encode(magic, version, header, tensors))


def load(path, magic: bytes) -> tuple[int, str, dict[str, np.ndarray]]:
    return decode(Path(path).read_bytes(), magic)
