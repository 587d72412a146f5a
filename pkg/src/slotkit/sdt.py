"""SDT1 binary tensor container and directory checkpoints.

One file holds one tensor: magic `SDT1`, a 1-byte dtype code, a 1-byte
rank, rank little-endian u32 extents, then the raw little-endian row-major
payload. Dtype codes: 1=float32, 2=uint8, 3=int32, and 4=float64 (an
extension so 64-bit runs can round-trip checkpoints without loss).

A checkpoint is a directory of SDT1 entries named by parameter path
("slot_core/base" -> slot_core/base.sdt) plus manifest.txt listing every
entry with shape and dtype and any string metadata.
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

MAGIC = b"SDT1"

_CODE_OF_DTYPE = {
    np.dtype("<f4"): 1,
    np.dtype("uint8"): 2,
    np.dtype("<i4"): 3,
    np.dtype("<f8"): 4,
}
_DTYPE_OF_CODE = {v: k for k, v in _CODE_OF_DTYPE.items()}


class FormatError(ValueError):
    """Malformed SDT1 payload; `offset` is the failing byte position."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


def tensor_bytes(arr: np.ndarray) -> bytes:
    """Serialize an array to SDT1 bytes."""
    arr = np.asarray(arr)
    if not arr.flags.c_contiguous:
        arr = np.ascontiguousarray(arr)
    dt = arr.dtype.newbyteorder("<")
    if np.dtype(dt) not in _CODE_OF_DTYPE:
        # normalize common aliases (int64 indices etc. are stored as i32)
        if arr.dtype.kind == "i":
            arr = arr.astype("<i4")
        elif arr.dtype.kind == "u":
            arr = arr.astype("uint8")
        else:
            raise FormatError(f"unsupported dtype {arr.dtype}")
        dt = arr.dtype
    code = _CODE_OF_DTYPE[np.dtype(dt)]
    if arr.ndim > 255:
        raise FormatError("rank exceeds container limit")
    head = MAGIC + bytes([code, arr.ndim])
    head += b"".join(struct.pack("<I", e) for e in arr.shape)
    return head + arr.astype(dt, copy=False).tobytes(order="C")


def bytes_to_tensor(buf: bytes) -> np.ndarray:
    """Parse SDT1 bytes; raises FormatError with the offending offset."""
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise FormatError("bad magic, expected SDT1", offset=0)
    if len(buf) < 6:
        raise FormatError("truncated header", offset=len(buf))
    code, rank = buf[4], buf[5]
    if code not in _DTYPE_OF_CODE:
        raise FormatError(f"unknown dtype code {code}", offset=4)
    dt = _DTYPE_OF_CODE[code]
    need = 6 + 4 * rank
    if len(buf) < need:
        raise FormatError("truncated extent table", offset=len(buf))
    shape = tuple(struct.unpack_from("<I", buf, 6 + 4 * i)[0] for i in range(rank))
    count = 1
    for e in shape:
        count *= e
    payload = count * dt.itemsize
    if len(buf) != need + payload:
        raise FormatError(
            f"payload length {len(buf) - need} != expected {payload}",
            offset=min(len(buf), need + payload))
    return np.frombuffer(buf, dtype=dt, count=count, offset=need).reshape(shape).copy()


def write_tensor(path, arr) -> None:
    Path(path).write_bytes(tensor_bytes(np.asarray(arr)))


def read_tensor(path) -> np.ndarray:
    return bytes_to_tensor(Path(path).read_bytes())


# -- checkpoints ---------------------------------------------------------------


def save_checkpoint(directory, entries: dict, meta: dict | None = None) -> None:
    """Write named arrays plus a manifest under `directory`.

    `entries` maps slash-separated names to arrays; `meta` maps string keys
    to string values recorded in the manifest.
    """
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    lines = []
    for name in sorted(entries):
        arr = np.asarray(entries[name])
        dest = root / (name + ".sdt")
        dest.parent.mkdir(parents=True, exist_ok=True)
        write_tensor(dest, arr)
        shape = ",".join(str(e) for e in arr.shape)
        lines.append(f"entry {name} {arr.dtype.name} [{shape}]")
    for key in sorted(meta or {}):
        lines.append(f"meta {key} {meta[key]}")
    (root / "manifest.txt").write_text("\n".join(lines) + "\n")


def load_checkpoint(directory):
    """Read a checkpoint directory; returns (entries, meta)."""
    root = Path(directory)
    manifest = root / "manifest.txt"
    if not manifest.is_file():
        raise FormatError(f"no manifest.txt under {root}")
    entries, meta = {}, {}
    for line in manifest.read_text().splitlines():
        if not line.strip():
            continue
        kind, rest = line.split(" ", 1)
        if kind == "entry":
            name = rest.split(" ", 1)[0]
            entries[name] = read_tensor(root / (name + ".sdt"))
        elif kind == "meta":
            key, value = rest.split(" ", 1)
            meta[key] = value
        else:
            raise FormatError(f"unknown manifest line kind {kind!r}")
    return entries, meta


def entries_digest(entries: dict) -> str:
    """Order-independent sha256 over named tensors, for frozen-model checks."""
    h = hashlib.sha256()
    for name in sorted(entries):
        h.update(name.encode())
        h.update(tensor_bytes(np.asarray(entries[name])))
    return h.hexdigest()
