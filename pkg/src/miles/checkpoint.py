"""Single-file checkpoint container: JSON header plus raw little-endian arrays.

Layout::

    8 bytes   magic  b"MLSCKPT1"
    8 bytes   header length, little-endian uint64
    N bytes   UTF-8 JSON header (sorted keys)
    ...       concatenated raw array payloads

The header carries a ``tensors`` list of (name, shape, dtype, offset,
nbytes) entries plus caller metadata under ``meta``.  Floats are stored
as raw little-endian bytes, so save -> load -> save reproduces the file
bit for bit.  No timestamps or absolute paths go into the header; two
identical runs must produce identical files.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import StateError

MAGIC = b"MLSCKPT1"

_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8"}


def write_archive(path: Path, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    entries = []
    payload = bytearray()
    for name in sorted(arrays):
        arr = arrays[name]
        kind = str(arr.dtype)
        if kind not in _DTYPES:
            raise StateError(f"unsupported dtype {kind} for '{name}'")
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[kind]).tobytes()
        entries.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "dtype": kind,
                "offset": len(payload),
                "nbytes": len(raw),
            }
        )
        payload.extend(raw)
    header = json.dumps({"meta": meta, "tensors": entries}, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        fh.write(bytes(payload))


def read_archive(path: Path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise StateError(f"checkpoint {path} does not exist")
    raw = path.read_bytes()
    if raw[:8] != MAGIC:
        raise StateError(f"{path} is not a checkpoint (bad magic)")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    try:
        header = json.loads(raw[16 : 16 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise StateError(f"corrupt checkpoint header in {path}: {exc}") from exc
    body = raw[16 + hlen :]
    arrays: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        start, n = entry["offset"], entry["nbytes"]
        if start + n > len(body):
            raise StateError(f"checkpoint {path} truncated at tensor '{entry['name']}'")
        buf = np.frombuffer(body, dtype=_DTYPES[entry["dtype"]], offset=start,
                            count=n // np.dtype(_DTYPES[entry["dtype"]]).itemsize)
        arrays[entry["name"]] = buf.reshape(entry["shape"]).astype(entry["dtype"])
    return header["meta"], arrays
