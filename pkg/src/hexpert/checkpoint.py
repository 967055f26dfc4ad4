"""Binary checkpoint files: named float64 arrays behind a versioned header.

Layout: magic "HEXPERT1", u32 format version, then per-parameter records of
(u32 name length, utf-8 name, u32 rank, u32 dims..., raw little-endian
float64 values). Integers are little-endian.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"HEXPERT1"
FORMAT_VERSION = 1


class CheckpointError(IOError):
    """Unreadable, corrupt, or incompatible checkpoint file."""


def save_checkpoint(path, arrays, version=FORMAT_VERSION):
    """Write name -> array mapping; Tensor values are unwrapped."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", version))
        for name, value in arrays.items():
            data = np.asarray(getattr(value, "data", value), dtype=np.float64)
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", data.ndim))
            for dim in data.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(data.astype("<f8").tobytes())


def load_checkpoint(path):
    """Read a checkpoint back as an ordered name -> ndarray dict."""
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}, want {MAGIC!r}")
        version = struct.unpack("<I", _read_exact(fh, 4, path))[0]
        if version != FORMAT_VERSION:
            raise CheckpointError(
                f"{path}: checkpoint format version {version}, "
                f"this build reads version {FORMAT_VERSION}"
            )
        arrays = {}
        while True:
            head = fh.read(4)
            if not head:
                break
            if len(head) != 4:
                raise CheckpointError(f"{path}: truncated record header")
            name_len = struct.unpack("<I", head)[0]
            name = _read_exact(fh, name_len, path).decode("utf-8")
            rank = struct.unpack("<I", _read_exact(fh, 4, path))[0]
            shape = tuple(
                struct.unpack("<I", _read_exact(fh, 4, path))[0]
                for _ in range(rank)
            )
            count = int(np.prod(shape)) if shape else 1
            raw = _read_exact(fh, 8 * count, path)
            arrays[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
        return arrays


def _read_exact(fh, n, path):
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError(f"{path}: truncated checkpoint")
    return buf
