"""Named-tensor checkpoint container.

Layout (all integers little-endian)::

    magic      8 bytes   b"RMRCKPT\\x00"
    version    u32
    header_len u64
    header     UTF-8 JSON: {"tensors": [{"name", "shape", "offset", "nbytes",
                            "sha256"}], "metadata": {...}}
    payload    raw float32 little-endian tensor bytes, offsets relative to
               the start of the payload

Round trips are bit-exact. Each tensor carries a SHA-256 of its bytes that is
verified on load.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .autodiff import DTYPE, Tensor

MAGIC = b"RMRCKPT\x00"
VERSION = 1
_LE_F32 = np.dtype("<f4")


class CheckpointError(ValueError):
    """A checkpoint file is malformed, truncated or fails its integrity check."""


def _as_array(value) -> np.ndarray:
    arr = value.data if isinstance(value, Tensor) else np.asarray(value)
    return np.ascontiguousarray(arr, dtype=_LE_F32)


def config_hash(config: Mapping) -> str:
    """Stable short hash of a JSON-serialisable config mapping."""
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def state_digest(tensors: Mapping[str, Tensor | np.ndarray]) -> str:
    """SHA-256 over names, shapes and raw bytes, in sorted-name order."""
    h = hashlib.sha256()
    for name in sorted(tensors):
        arr = _as_array(tensors[name])
        h.update(name.encode())
        h.update(repr(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def save_checkpoint(path: str | Path, tensors: Mapping[str, Tensor | np.ndarray], metadata: Mapping | None = None) -> Path:
    """Write ``tensors`` plus a JSON metadata block to ``path``."""
    path = Path(path)
    entries = []
    chunks = []
    offset = 0
    for name in sorted(tensors):
        arr = _as_array(tensors[name])
        raw = arr.tobytes()
        entries.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(raw),
                "sha256": hashlib.sha256(raw).hexdigest(),
            }
        )
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"tensors": entries, "metadata": dict(metadata or {})}, sort_keys=True).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(header)))
        fh.write(header)
        for raw in chunks:
            fh.write(raw)
    return path


def read_header(path: str | Path) -> tuple[dict, int]:
    """Return the parsed header and the payload's absolute byte offset."""
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
        fixed = fh.read(12)
        if len(fixed) != 12:
            raise CheckpointError(f"{path}: truncated header")
        version, hlen = struct.unpack("<IQ", fixed)
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        raw = fh.read(hlen)
        if len(raw) != hlen:
            raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    return header, len(MAGIC) + 12 + hlen


def load_checkpoint(path: str | Path, verify: bool = True) -> tuple[dict[str, np.ndarray], dict]:
    """Read a checkpoint into ``({name: float32 array}, metadata)``.

    Raises:
        CheckpointError: on bad magic, truncation, or a tensor hash mismatch
            when ``verify`` is set.
    """
    header, start = read_header(path)
    payload = Path(path).read_bytes()[start:]
    tensors = {}
    for entry in header["tensors"]:
        lo, n = entry["offset"], entry["nbytes"]
        raw = payload[lo : lo + n]
        if len(raw) != n:
            raise CheckpointError(f"{path}: tensor {entry['name']!r} truncated")
        if verify and hashlib.sha256(raw).hexdigest() != entry["sha256"]:
            raise CheckpointError(f"{path}: tensor {entry['name']!r} fails integrity check")
        arr = np.frombuffer(raw, dtype=_LE_F32).reshape(entry["shape"]).astype(DTYPE)
        tensors[entry["name"]] = arr
    return tensors, header.get("metadata", {})


def load_tensors(path: str | Path, requires_grad: bool = False) -> tuple[dict[str, Tensor], dict]:
    arrays, meta = load_checkpoint(path)
    return {k: Tensor(v, requires_grad=requires_grad, name=k) for k, v in arrays.items()}, meta


def file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def count_parameters(path: str | Path) -> int:
    """Total scalar count of every tensor listed in a checkpoint header."""
    header, _ = read_header(path)
    return int(sum(int(np.prod(e["shape"], dtype=np.int64)) for e in header["tensors"]))
