"""Binary checkpoint codec ("DSVA-CKPT") for named float64 parameter blobs."""

import hashlib
import os
import struct
import zlib
from pathlib import Path
from typing import Dict, Mapping, Union

import numpy as np

from .diffcore import Tensor
from .errors import FormatError

MAGIC = b"DSVA-CKPT"
VERSION = 1

_U32 = struct.Struct("<I")

PathLike = Union[str, Path]
State = Dict[str, np.ndarray]


def encode_checkpoint(state: Mapping[str, np.ndarray]) -> bytes:
    """
    Serialize parameters in sorted name order.

    Layout: magic, u32 version, u32 count, then per parameter u32 name length, UTF-8 name,
    u32 rank, rank x u32 dims, little-endian f64 payload; a trailing u32 CRC32 covers
    every preceding byte.
    """
    parts = [MAGIC, _U32.pack(VERSION), _U32.pack(len(state))]
    for name in sorted(state):
        array = np.require(np.asarray(state[name], dtype="<f8"), requirements="C")
        encoded = name.encode("utf-8")
        parts.append(_U32.pack(len(encoded)))
        parts.append(encoded)
        parts.append(_U32.pack(array.ndim))
        parts.extend(_U32.pack(dim) for dim in array.shape)
        parts.append(array.tobytes())
    body = b"".join(parts)
    return body + _U32.pack(zlib.crc32(body) & 0xFFFFFFFF)


def decode_checkpoint(payload: bytes) -> State:
    """
    Parse checkpoint bytes.

    Raises:
        FormatError: On bad magic, version, CRC, truncation or trailing bytes
    """
    if len(payload) < len(MAGIC) + 3 * _U32.size:
        raise FormatError("checkpoint truncated", offset=len(payload))
    if payload[: len(MAGIC)] != MAGIC:
        raise FormatError("bad checkpoint magic", offset=0)
    body, crc_bytes = payload[:-_U32.size], payload[-_U32.size:]
    (expected,) = _U32.unpack(crc_bytes)
    if zlib.crc32(body) & 0xFFFFFFFF != expected:
        raise FormatError("checkpoint CRC mismatch", offset=len(body))

    offset = len(MAGIC)

    def take(count: int) -> bytes:
        nonlocal offset
        if offset + count > len(body):
            raise FormatError("checkpoint truncated", offset=offset)
        chunk = body[offset: offset + count]
        offset += count
        return chunk

    def u32() -> int:
        return _U32.unpack(take(_U32.size))[0]

    version = u32()
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=len(MAGIC))
    count = u32()
    state: State = {}
    for _ in range(count):
        start = offset
        try:
            name = take(u32()).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("parameter name is not UTF-8", offset=start) from None
        if name in state:
            raise FormatError(f"duplicate parameter {name!r}", offset=start)
        shape = tuple(u32() for _ in range(u32()))
        size = int(np.prod(shape, dtype=np.int64))
        data = np.frombuffer(take(8 * size), dtype="<f8").astype(np.float64)
        state[name] = data.reshape(shape)
    if offset != len(body):
        raise FormatError(f"{len(body) - offset} trailing bytes", offset=offset)
    return state


def save_checkpoint(state: Mapping[str, np.ndarray], path: PathLike) -> Path:
    """Write atomically: temp file, fsync, rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(encode_checkpoint(state))
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)
    return path


def load_checkpoint(path: PathLike) -> State:
    """
    Read and validate a checkpoint file.

    Raises:
        FileNotFoundError: If the path does not exist
        FormatError: If the content does not validate
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        return decode_checkpoint(path.read_bytes())
    except FormatError as e:
        raise FormatError(f"{path}: {e.detail}", offset=e.offset) from None


def parameter_checksum(params: Mapping[str, Union[Tensor, np.ndarray]]) -> str:
    """SHA-256 over sorted names, shapes and float64 bytes."""
    digest = hashlib.sha256()
    for name in sorted(params):
        value = params[name]
        array = np.asarray(value.data if isinstance(value, Tensor) else value, "<f8")
        digest.update(name.encode("utf-8"))
        digest.update(repr(array.shape).encode("ascii"))
        digest.update(array.tobytes())
    return digest.hexdigest()
