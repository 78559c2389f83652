"""Binary dataset file: magic "DSVA", little-endian, scenes with their fused states."""

import os
import struct
from pathlib import Path
from typing import List, Tuple, Union

import numpy as np

from .errors import FormatError
from .synthdata import (
    COLORS,
    MOTIONS,
    SHAPES,
    SIZES,
    Dataset,
    FusedHiddenState,
    Scene,
    SceneObject,
    decode_label,
    encode_label,
)

MAGIC = b"DSVA"
VERSION = 1
_HEADER = struct.Struct("<4sIIIII")
_OBJECT = struct.Struct("<BBBBfff")

PathLike = Union[str, Path]


def encode_dataset(dataset: Dataset) -> bytes:
    """
    Serialize a dataset.

    Layout: magic, version, count, H, W, D; then per scene: u64 seed, f32 image,
    u8 object count, u8 target, objects (kind, color, size, motion, cx, cy, radius),
    u8 gt masks, u8 label mask, u16 token count + u16 ids, u32 mixing id,
    f32 e_text, e_vis, x_fused.
    """
    size = dataset.image_size
    parts: List[bytes] = [
        _HEADER.pack(MAGIC, VERSION, len(dataset), size, size, dataset.latent_dim)
    ]
    for scene, state in zip(dataset.scenes, dataset.states):
        n = len(scene.objects)
        ids = encode_label(scene.label_tokens)
        parts.append(struct.pack("<Q", scene.seed))
        parts.append(np.ascontiguousarray(scene.image, dtype="<f4").tobytes())
        parts.append(struct.pack("<BB", n, scene.target_index))
        for obj in scene.objects:
            parts.append(
                _OBJECT.pack(
                    SHAPES.index(obj.kind),
                    COLORS.index(obj.color),
                    SIZES.index(obj.size),
                    MOTIONS.index(obj.motion),
                    obj.cx,
                    obj.cy,
                    obj.radius,
                )
            )
        parts.append(np.ascontiguousarray(scene.gt_masks, dtype=np.uint8).tobytes())
        parts.append(np.ascontiguousarray(scene.label_mask, dtype=np.uint8).tobytes())
        parts.append(struct.pack("<H", len(ids)))
        parts.append(np.asarray(ids, dtype="<u2").tobytes())
        parts.append(struct.pack("<I", state.mixing_id))
        for vector in (state.e_text, state.e_vis, state.x_fused):
            parts.append(np.ascontiguousarray(vector, dtype="<f4").tobytes())
    return b"".join(parts)


class _Cursor:
    def __init__(self, payload: bytes):
        self.payload = payload
        self.offset = 0

    def take(self, count: int, what: str) -> bytes:
        end = self.offset + count
        if end > len(self.payload):
            raise FormatError(
                f"truncated {what}: need {count} bytes, {len(self.payload) - self.offset} left",
                self.offset,
            )
        chunk = self.payload[self.offset:end]
        self.offset = end
        return chunk

    def unpack(self, fmt: struct.Struct, what: str) -> Tuple:
        return fmt.unpack(self.take(fmt.size, what))

    def array(self, dtype: str, shape: Tuple[int, ...], what: str) -> np.ndarray:
        itemsize = np.dtype(dtype).itemsize
        count = int(np.prod(shape))
        raw = self.take(count * itemsize, what)
        return np.frombuffer(raw, dtype=dtype).reshape(shape).copy()


_U8_PAIR = struct.Struct("<BB")
_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")


def _enum_value(names: Tuple[str, ...], index: int, what: str, offset: int) -> str:
    if index >= len(names):
        raise FormatError(f"{what} id {index} out of range", offset)
    return names[index]


def decode_dataset(payload: bytes) -> Dataset:
    """
    Parse a dataset; never returns partial content.

    Raises:
        FormatError: On bad magic, version, truncation, invalid values or trailing bytes
    """
    cur = _Cursor(payload)
    magic, version, count, height, width, latent_dim = cur.unpack(_HEADER, "header")
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    if count and (height != width or height == 0 or latent_dim == 0):
        raise FormatError(f"bad dimensions {height}x{width}, D={latent_dim}", 12)

    scenes: List[Scene] = []
    states: List[FusedHiddenState] = []
    for index in range(count):
        (seed,) = cur.unpack(_U64, f"scene {index} seed")
        image = cur.array("<f4", (height, width, 3), f"scene {index} image").astype(np.float32)
        n_objects, target = cur.unpack(_U8_PAIR, f"scene {index} object count")
        if not 1 <= n_objects <= 4 or target >= n_objects:
            raise FormatError(
                f"scene {index}: object count {n_objects} / target {target} invalid", cur.offset - 2
            )
        objects = []
        for k in range(n_objects):
            start = cur.offset
            fields = cur.unpack(_OBJECT, f"scene {index} object {k}")
            kind, color, size, motion, cx, cy, radius = fields
            objects.append(
                SceneObject(
                    kind=_enum_value(SHAPES, kind, "shape", start),
                    color=_enum_value(COLORS, color, "color", start + 1),
                    size=_enum_value(SIZES, size, "size", start + 2),
                    motion=_enum_value(MOTIONS, motion, "motion", start + 3),
                    cx=cx,
                    cy=cy,
                    radius=radius,
                )
            )
        start = cur.offset
        gt_masks = cur.array("u1", (n_objects, height, width), f"scene {index} masks")
        label_mask = cur.array("u1", (height, width), f"scene {index} label mask")
        if gt_masks.max(initial=0) > 1 or label_mask.max(initial=0) > 1:
            raise FormatError(f"scene {index}: mask values must be 0/1", start)
        (n_tokens,) = cur.unpack(_U16, f"scene {index} token count")
        start = cur.offset
        ids = cur.array("<u2", (n_tokens,), f"scene {index} tokens")
        try:
            tokens = decode_label([int(i) for i in ids])
        except Exception as e:
            raise FormatError(f"scene {index}: {e}", start) from None
        (mixing_id,) = cur.unpack(_U32, f"scene {index} mixing id")
        e_text = cur.array("<f4", (latent_dim,), f"scene {index} e_text").astype(np.float32)
        e_vis = cur.array("<f4", (latent_dim,), f"scene {index} e_vis").astype(np.float32)
        x_fused = cur.array("<f4", (2 * latent_dim,), f"scene {index} x_fused").astype(np.float32)
        scenes.append(
            Scene(
                image=image,
                objects=objects,
                gt_masks=gt_masks,
                label_tokens=tokens,
                label_mask=label_mask,
                target_index=int(target),
                seed=int(seed),
            )
        )
        states.append(
            FusedHiddenState(x_fused=x_fused, e_text=e_text, e_vis=e_vis, mixing_id=int(mixing_id))
        )

    if cur.offset != len(payload):
        raise FormatError(f"{len(payload) - cur.offset} trailing bytes", cur.offset)
    return Dataset(scenes=scenes, states=states, latent_dim=int(latent_dim))


def write_dataset(dataset: Dataset, path: PathLike) -> Path:
    """Write a dataset file atomically (temp file, then rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    temp_path = path.with_suffix(path.suffix + ".tmp")
    with open(temp_path, "wb") as f:
        f.write(encode_dataset(dataset))
        f.flush()
        os.fsync(f.fileno())
    temp_path.replace(path)
    return path


def read_dataset(path: PathLike) -> Dataset:
    """
    Read a dataset file.

    Raises:
        FileNotFoundError: If the path does not exist
        FormatError: If the content is malformed
    """
    with open(path, "rb") as f:
        payload = f.read()
    return decode_dataset(payload)
