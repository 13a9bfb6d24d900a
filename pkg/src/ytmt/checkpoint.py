"""Self-describing checkpoint container.

Layout::

    b"YTMTCKPT" | u32 format version | u64 header length | JSON header | blobs

The JSON header (sorted keys, UTF-8) carries the metadata, including the
config echo, and a table of ``{name, shape, offset}`` entries.  Blobs are
little-endian float32, concatenated in table order.  The same inputs always
produce the same bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import ContractError, IngestionError

MAGIC = b"YTMTCKPT"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


def save_checkpoint(path, tensors: dict, meta: dict) -> None:
    entries = []
    blobs = []
    offset = 0
    for name, value in tensors.items():
        arr = np.ascontiguousarray(value, dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blob = arr.tobytes()
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"meta": meta, "tensors": entries}, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, FORMAT_VERSION, len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)
    tmp.replace(path)


def load_checkpoint(path) -> tuple:
    """Return ``(meta, tensors)`` where tensors maps names to float32 arrays."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IngestionError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(raw) < _PREFIX.size:
        raise IngestionError(f"{path}: truncated checkpoint")
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise IngestionError(f"{path}: not a checkpoint (magic {magic!r})")
    if version != FORMAT_VERSION:
        raise ContractError(f"{path}: checkpoint format version {version}, this build reads {FORMAT_VERSION}")
    start = _PREFIX.size
    header = json.loads(raw[start : start + hlen].decode("utf-8"))
    base = start + hlen
    tensors = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=base + entry["offset"])
        tensors[entry["name"]] = arr.reshape(shape).astype(np.float32)
    return header["meta"], tensors
