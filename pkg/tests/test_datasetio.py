"""Tests for the binary dataset file format."""

import struct

import numpy as np
import pytest

from dsva.datasetio import MAGIC, decode_dataset, encode_dataset, read_dataset, write_dataset
from dsva.errors import FormatError
from dsva.synthdata import GenerationConfig, build_dataset


@pytest.fixture(scope="module")
def small():
    """Two 32px scenes with D=4."""
    return build_dataset(1, 2, GenerationConfig(image_size=32), latent_dim=4)


def test_write_then_read(tmp_path):
    """A written dataset reads back equal."""
    data = build_dataset(0, 10, latent_dim=8)
    path = write_dataset(data, tmp_path / "train.dsva")
    assert read_dataset(path) == data
    assert not (tmp_path / "train.dsva.tmp").exists()


def test_header_layout(small):
    """Magic, version, count, H, W, D lead the file."""
    payload = encode_dataset(small)
    assert payload[:4] == MAGIC
    assert struct.unpack("<IIIII", payload[4:24]) == (1, 2, 32, 32, 4)


def test_empty_dataset(small):
    """A dataset with no scenes is valid."""
    empty = small.subset([])
    assert len(decode_dataset(encode_dataset(empty))) == 0


def test_bad_magic_names_offset_zero(small):
    """A corrupted magic is reported at offset 0."""
    payload = b"XSVA" + encode_dataset(small)[4:]
    with pytest.raises(FormatError, match="magic") as info:
        decode_dataset(payload)
    assert info.value.offset == 0
    assert "offset 0" in str(info.value)


def test_bad_version(small):
    """Unknown versions are rejected at offset 4."""
    payload = bytearray(encode_dataset(small))
    payload[4:8] = struct.pack("<I", 9)
    with pytest.raises(FormatError, match="version") as info:
        decode_dataset(bytes(payload))
    assert info.value.offset == 4


def test_truncation_never_returns_partial_content(small):
    """Cutting the file at any byte boundary is a format error."""
    payload = encode_dataset(small)
    cuts = sorted(set(range(0, 64)) | set(range(64, len(payload), 37)) | {len(payload) - 1})
    for cut in cuts:
        with pytest.raises(FormatError):
            decode_dataset(payload[:cut])


def test_trailing_bytes_rejected(small):
    """Extra bytes after the last scene are an error naming where they start."""
    payload = encode_dataset(small)
    with pytest.raises(FormatError, match="trailing") as info:
        decode_dataset(payload + b"\x00\x00")
    assert info.value.offset == len(payload)


def test_invalid_mask_value_rejected(small):
    """Mask bytes other than 0/1 are malformed."""
    payload = bytearray(encode_dataset(small))
    # first scene: header, seed, image, counts, objects, then masks
    n_objects = payload[24 + 8 + 32 * 32 * 3 * 4]
    mask_start = 24 + 8 + 32 * 32 * 3 * 4 + 2 + 16 * n_objects
    payload[mask_start] = 7
    with pytest.raises(FormatError, match="mask"):
        decode_dataset(bytes(payload))


def test_read_missing_file(tmp_path):
    """Missing files surface as FileNotFoundError."""
    with pytest.raises(FileNotFoundError):
        read_dataset(tmp_path / "absent.dsva")


def test_floats_survive_exactly(small):
    """Images and vectors are stored as little-endian float32 without loss."""
    back = decode_dataset(encode_dataset(small))
    for a, b in zip(small.states, back.states):
        assert a.x_fused.dtype == b.x_fused.dtype == np.float32
        np.testing.assert_array_equal(a.x_fused, b.x_fused)
