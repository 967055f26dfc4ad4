"""Checkpoint round-trips and header validation."""

import struct

import numpy as np
import pytest

from hexpert.autodiff import Tensor
from hexpert.checkpoint import (
    MAGIC,
    CheckpointError,
    load_checkpoint,
    save_checkpoint,
)


def test_roundtrip_preserves_names_shapes_values(tmp_path):
    path = tmp_path / "model.ckpt"
    arrays = {
        "selector.w": np.linspace(-1, 1, 12).reshape(3, 4),
        "selector.b": np.zeros(4),
        "scalar": np.array(3.5),
        "expert0.w": Tensor(np.eye(2), name="expert0.w"),
    }
    save_checkpoint(path, arrays)
    loaded = load_checkpoint(path)
    assert list(loaded) == list(arrays)
    np.testing.assert_array_equal(loaded["selector.w"], arrays["selector.w"])
    np.testing.assert_array_equal(loaded["expert0.w"], np.eye(2))
    assert loaded["scalar"].shape == ()


def test_magic_and_version_in_header(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, {"a": np.ones(2)})
    raw = path.read_bytes()
    assert raw.startswith(MAGIC)
    assert struct.unpack("<I", raw[8:12])[0] == 1


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOTAHXP1" + b"\x00" * 16)
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)


def test_version_mismatch_reports_both_versions(tmp_path):
    path = tmp_path / "future.ckpt"
    save_checkpoint(path, {"a": np.ones(1)}, version=9)
    with pytest.raises(CheckpointError, match=r"version 9.*version 1"):
        load_checkpoint(path)


def test_truncated_file_rejected(tmp_path):
    path = tmp_path / "t.ckpt"
    save_checkpoint(path, {"a": np.ones(4)})
    raw = path.read_bytes()
    path.write_bytes(raw[:-8])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(path)
