"""Binary checkpoint files.

Layout: an 8-byte magic, a version word, a JSON metadata section, a table of
named arrays (name, dtype, shape, raw little-endian bytes), and a trailing
SHA-256 digest over everything before it.  Array names are written sorted and
JSON keys canonically ordered, so save -> load -> save is byte-identical.
Writes go to a temp file in the target directory followed by an atomic
rename, so a crash never leaves a half-written checkpoint under the final
name.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import CheckpointError

MAGIC = b"MPRNCKPT"
VERSION = 1

_DTYPES = {0: "<f8", 1: "<i8", 2: "|b1", 3: "<f4"}
_DTYPE_CODES = {np.dtype(v): k for k, v in _DTYPES.items()}


def save_checkpoint(path, meta: dict, arrays: dict[str, np.ndarray]) -> Path:
    path = Path(path)
    buf = bytearray()
    buf += MAGIC
    buf += struct.pack("<I", VERSION)
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    buf += struct.pack("<Q", len(meta_bytes))
    buf += meta_bytes
    names = sorted(arrays)
    buf += struct.pack("<I", len(names))
    for name in names:
        arr = np.asarray(arrays[name])
        if not arr.flags["C_CONTIGUOUS"]:
            # NB: np.ascontiguousarray would also promote 0-d arrays to 1-d
            arr = np.ascontiguousarray(arr)
        if arr.dtype not in _DTYPE_CODES:
            # widen only when lossless; anything else is a caller bug
            if arr.dtype.kind in "iu" and np.can_cast(arr.dtype, np.int64, "safe"):
                arr = arr.astype(np.int64)
            elif arr.dtype.kind == "f" and np.can_cast(arr.dtype, np.float64, "safe"):
                arr = arr.astype(np.float64)
            else:
                raise CheckpointError(f"array '{name}' has unsupported dtype {arr.dtype}")
        name_bytes = name.encode("utf-8")
        buf += struct.pack("<H", len(name_bytes))
        buf += name_bytes
        buf += struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim)
        for dim in arr.shape:
            buf += struct.pack("<Q", dim)
        raw = arr.tobytes()
        buf += struct.pack("<Q", len(raw))
        buf += raw
    buf += hashlib.sha256(buf).digest()

    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(buf)
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise
    return path


class _Reader:
    def __init__(self, blob: bytes, path):
        self.blob = blob
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError(f"{self.path}: truncated checkpoint (section overruns file)")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < len(MAGIC) + 4 + 32:
        raise CheckpointError(f"{path}: file too small to be a checkpoint")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: digest mismatch (corrupted or truncated checkpoint)")
    r = _Reader(body, path)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint file")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"{path}: version {version} unsupported (expected {VERSION})")
    (meta_len,) = r.unpack("<Q")
    try:
        meta = json.loads(r.take(meta_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: malformed metadata section: {exc}") from exc
    (n_arrays,) = r.unpack("<I")
    arrays: dict[str, np.ndarray] = {}
    for _ in range(n_arrays):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        code, ndim = r.unpack("<BB")
        if code not in _DTYPES:
            raise CheckpointError(f"{path}: unknown dtype code {code} for array '{name}'")
        shape = tuple(r.unpack("<" + "Q" * ndim)) if ndim else ()
        (nbytes,) = r.unpack("<Q")
        raw = r.take(nbytes)
        arr = np.frombuffer(raw, dtype=_DTYPES[code]).reshape(shape).copy()
        arrays[name] = arr
    if r.pos != len(body):
        raise CheckpointError(f"{path}: {len(body) - r.pos} trailing bytes after array table")
    return meta, arrays
