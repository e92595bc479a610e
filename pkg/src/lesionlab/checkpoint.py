"""Single-file checkpoint container: JSON header + raw weight payload.

Arrays round-trip bitwise, which the reload-equivalence contracts rely on.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import IoFailure

MAGIC = b"LLCKPT1\n"
SCHEMA_VERSION = 1


def save_container(path, header: dict, arrays: dict[str, np.ndarray]):
    """Write metadata plus named arrays to one binary file."""
    index = []
    payload = bytearray()
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        index.append(
            {
                "name": name,
                "dtype": arr.dtype.str,
                "shape": list(arr.shape),
                "offset": len(payload),
                "nbytes": arr.nbytes,
            }
        )
        payload.extend(arr.tobytes())
    doc = {"schema_version": SCHEMA_VERSION, "header": header, "arrays": index}
    blob = json.dumps(doc, sort_keys=True).encode("utf-8")
    try:
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack(">I", len(blob)))
            fh.write(blob)
            fh.write(bytes(payload))
    except OSError as exc:
        raise IoFailure(f"cannot write checkpoint {path}: {exc}") from exc


def load_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Read back (header, arrays) from a container file."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read checkpoint {path}: {exc}") from exc
    if not raw.startswith(MAGIC):
        raise IoFailure(f"{path} is not a checkpoint container")
    (blob_len,) = struct.unpack(">I", raw[len(MAGIC) : len(MAGIC) + 4])
    start = len(MAGIC) + 4
    doc = json.loads(raw[start : start + blob_len].decode("utf-8"))
    payload = raw[start + blob_len :]
    arrays = {}
    for entry in doc["arrays"]:
        buf = payload[entry["offset"] : entry["offset"] + entry["nbytes"]]
        arrays[entry["name"]] = np.frombuffer(buf, dtype=np.dtype(entry["dtype"])).reshape(
            entry["shape"]
        ).copy()
    return doc["header"], arrays
