"""Binary tensor/checkpoint container.

Layout (all integers little-endian):

    offset  size  field
    0       4     magic ``b"HVAE"``
    4       1     format version (currently 1)
    5       4     header length in bytes (uint32)
    9       n     header, UTF-8 JSON
    9+n     ...   payload, C-order little-endian arrays

Two header kinds share the layout:

* ``{"kind": "tensor", "shape": [...], "dtype": "float32"|"uint8",
   "fps": ..., "meta": {...}}`` — payload is one array.
* ``{"kind": "checkpoint", "config": {...}, "meta": {...},
   "arrays": [{"name", "shape", "dtype"}, ...]}`` — payload is the listed
  arrays concatenated in order; checkpoint arrays are always float32.

The header is self-contained: it can be parsed without touching the payload.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import ContainerFormatError

MAGIC = b"HVAE"
VERSION = 1

_DTYPES = {
    "float32": np.dtype("<f4"),
    "uint8": np.dtype("u1"),
}


def _dtype_name(arr: np.ndarray) -> str:
    for name, dt in _DTYPES.items():
        if arr.dtype == dt:
            return name
    raise ContainerFormatError(
        f"unsupported dtype {arr.dtype}; supported: {sorted(_DTYPES)}"
    )


def _write(path, header: dict, payload: bytes):
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<B", VERSION))
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(payload)


def _read_prefix(fh) -> dict:
    magic = fh.read(4)
    if magic != MAGIC:
        raise ContainerFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    raw = fh.read(5)
    if len(raw) < 5:
        raise ContainerFormatError("truncated container: missing version/header length")
    version, header_len = struct.unpack("<BI", raw)
    if version != VERSION:
        raise ContainerFormatError(f"unsupported container version {version}")
    header_bytes = fh.read(header_len)
    if len(header_bytes) != header_len:
        raise ContainerFormatError(
            f"truncated header: expected {header_len} bytes, got {len(header_bytes)}"
        )
    try:
        return json.loads(header_bytes.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerFormatError(f"unparseable header: {exc}") from exc


def read_header(path) -> dict:
    """Parse and return the JSON header without loading the payload."""
    with open(path, "rb") as fh:
        return _read_prefix(fh)


def write_container(path, tensor, meta: dict | None = None, fps: float | None = None):
    """Write a single array. Accepts numpy arrays or torch tensors."""
    if hasattr(tensor, "detach"):  # torch
        tensor = tensor.detach().cpu().numpy()
    arr = np.ascontiguousarray(tensor)
    name = _dtype_name(arr)
    arr = arr.astype(_DTYPES[name], copy=False)
    header = {
        "kind": "tensor",
        "shape": list(arr.shape),
        "dtype": name,
        "fps": fps,
        "meta": meta or {},
    }
    _write(path, header, arr.tobytes(order="C"))


def read_container(path) -> tuple[np.ndarray, dict]:
    """Read a tensor container; returns (array, header)."""
    with open(path, "rb") as fh:
        header = _read_prefix(fh)
        if header.get("kind") != "tensor":
            raise ContainerFormatError(f"expected tensor container, got kind={header.get('kind')!r}")
        dtype = _DTYPES.get(header.get("dtype"))
        if dtype is None:
            raise ContainerFormatError(f"unsupported dtype {header.get('dtype')!r}")
        shape = tuple(int(s) for s in header["shape"])
        expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        payload = fh.read()
    if len(payload) != expected:
        raise ContainerFormatError(
            f"payload size mismatch: expected {expected} bytes, got {len(payload)}"
        )
    return np.frombuffer(payload, dtype=dtype).reshape(shape).copy(), header


def save_checkpoint(path, arrays: dict[str, np.ndarray], config: dict, meta: dict | None = None):
    """Write named float32 arrays plus the run config into one file."""
    entries = []
    chunks = []
    for name in sorted(arrays):
        arr = arrays[name]
        if hasattr(arr, "detach"):
            arr = arr.detach().cpu().numpy()
        arr = np.ascontiguousarray(arr, dtype=_DTYPES["float32"])
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "float32"})
        chunks.append(arr.tobytes(order="C"))
    header = {
        "kind": "checkpoint",
        "config": config,
        "meta": meta or {},
        "arrays": entries,
    }
    _write(path, header, b"".join(chunks))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    """Read a checkpoint; returns ({name: float32 array}, header)."""
    with open(path, "rb") as fh:
        header = _read_prefix(fh)
        if header.get("kind") != "checkpoint":
            raise ContainerFormatError(
                f"expected checkpoint container, got kind={header.get('kind')!r}"
            )
        payload = fh.read()
    expected = sum(
        int(np.prod(e["shape"], dtype=np.int64)) * _DTYPES["float32"].itemsize
        for e in header["arrays"]
    )
    if len(payload) != expected:
        raise ContainerFormatError(
            f"payload size mismatch: expected {expected} bytes, got {len(payload)}"
        )
    arrays: dict[str, np.ndarray] = {}
    offset = 0
    for entry in header["arrays"]:
        shape = tuple(int(s) for s in entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        nbytes = count * 4
        arr = np.frombuffer(payload[offset:offset + nbytes], dtype=_DTYPES["float32"])
        arrays[entry["name"]] = arr.reshape(shape).copy()
        offset += nbytes
    return arrays, header
