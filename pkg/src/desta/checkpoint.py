"""Flat binary checkpoint container.

Layout::

    b"DESTACKP"            8-byte magic
    uint32 LE              format version
    uint64 LE              header length in bytes
    header                 UTF-8 JSON, keys sorted, no whitespace
    payload                concatenated little-endian float64 arrays

The header maps every parameter path to ``{"shape", "offset", "frozen"}`` and
carries a free-form ``meta`` object. Entries are written in sorted path order,
so saving the same state twice yields identical bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .tensor import Parameter

MAGIC = b"DESTACKP"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_arrays(path: str | Path, arrays: Mapping[str, np.ndarray],
                frozen: Mapping[str, bool] | None = None, meta: Mapping[str, Any] | None = None) -> None:
    frozen = frozen or {}
    entries = {}
    chunks = []
    offset = 0
    for name in sorted(arrays):
        arr = np.asarray(arrays[name], dtype="<f8", order="C")
        entries[name] = {"shape": list(arr.shape), "offset": offset, "frozen": bool(frozen.get(name, False))}
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps({"params": entries, "meta": dict(meta or {})}, sort_keys=True,
                        separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(header)))
        fh.write(header)
        for c in chunks:
            fh.write(c)


def load_arrays(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, bool], dict[str, Any]]:
    """Return ``(arrays, frozen_flags, meta)``."""
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(raw[20:20 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    base = 20 + hlen
    arrays, frozen = {}, {}
    for name, e in header["params"].items():
        n = int(np.prod(e["shape"], dtype=np.int64))
        start = base + e["offset"]
        if start + 8 * n > len(raw):
            raise CheckpointError(f"{path}: truncated payload for {name}")
        arrays[name] = np.frombuffer(raw, dtype="<f8", count=n, offset=start).astype(np.float64).reshape(e["shape"])
        frozen[name] = e["frozen"]
    return arrays, frozen, header.get("meta", {})


def save_parameters(path: str | Path, named: Mapping[str, Parameter] | list[tuple[str, Parameter]],
                    meta: Mapping[str, Any] | None = None, extra: Mapping[str, np.ndarray] | None = None) -> None:
    named = dict(named)
    arrays = {k: p.data for k, p in named.items()}
    frozen = {k: p.frozen for k, p in named.items()}
    for k, v in (extra or {}).items():
        if k in arrays:
            raise CheckpointError(f"extra array {k!r} collides with a parameter path")
        arrays[k] = v
    save_arrays(path, arrays, frozen, meta)
