"""
PAIRINV1 tensor container.

Layout (little-endian):
    8 bytes   magic b"PAIRINV1"
    4 bytes   u32 header length H
    H bytes   UTF-8 JSON header, keys sorted:
              {"meta": {...}, "tensors": [{"dtype", "name", "offset", "shape"}, ...]}
    payload   raw row-major tensor bytes; offsets are relative to the payload start
"""

import json
import struct
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import numpy as np

from pairedinv.config import CONTAINER_MAGIC
from pairedinv.errors import ConfigError, FormatError

SUPPORTED_DTYPES = ("float32", "float64", "int32", "int64", "uint8")
_PREFIX = len(CONTAINER_MAGIC) + 4


def _canonical(obj: Any) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_container(
    path, tensors: Dict[str, np.ndarray], meta: Optional[Dict[str, Any]] = None
) -> None:
    """
    Write named tensors (sorted by name) and optional JSON metadata.

    Raises:
        ConfigError: unsupported dtype
    """
    entries = []
    payloads = []
    offset = 0
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        dtype = arr.dtype.name
        if dtype not in SUPPORTED_DTYPES:
            raise ConfigError(f"tensor {name} has unsupported dtype {dtype}")
        raw = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes()
        entries.append(
            {"name": name, "dtype": dtype, "shape": list(arr.shape), "offset": offset}
        )
        payloads.append(raw)
        offset += len(raw)

    header = _canonical({"meta": meta or {}, "tensors": entries})
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(CONTAINER_MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for raw in payloads:
            f.write(raw)


def read_container(path) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    """
    Read a container file.

    Returns:
        (tensors, meta)

    Raises:
        FormatError: bad magic, malformed header, overlapping or truncated payloads
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"Container file not found: {path}")
    blob = path.read_bytes()

    if len(blob) < _PREFIX:
        raise FormatError(
            f"{path}: truncated file, expected at least {_PREFIX} bytes, got {len(blob)}",
            offset=len(blob),
        )
    if blob[: len(CONTAINER_MAGIC)] != CONTAINER_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:8]!r}", offset=0)

    (header_len,) = struct.unpack("<I", blob[len(CONTAINER_MAGIC) : _PREFIX])
    if _PREFIX + header_len > len(blob):
        raise FormatError(
            f"{path}: truncated header, expected {_PREFIX + header_len} bytes, "
            f"got {len(blob)}",
            offset=_PREFIX,
        )
    try:
        header = json.loads(blob[_PREFIX : _PREFIX + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: header is not valid JSON: {e}", offset=_PREFIX) from e
    if not isinstance(header, dict) or not isinstance(header.get("tensors"), list):
        raise FormatError(f"{path}: header lacks a tensor list", offset=_PREFIX)

    base = _PREFIX + header_len
    payload_len = len(blob) - base
    tensors: Dict[str, np.ndarray] = {}
    spans = []
    for entry in header["tensors"]:
        try:
            name = entry["name"]
            dtype = np.dtype(entry["dtype"]).newbyteorder("<")
            shape = tuple(int(s) for s in entry["shape"])
            offset = int(entry["offset"])
        except (KeyError, TypeError, ValueError) as e:
            raise FormatError(f"{path}: malformed tensor entry {entry!r}", offset=_PREFIX) from e
        if entry["dtype"] not in SUPPORTED_DTYPES:
            raise FormatError(f"{path}: unsupported dtype {entry['dtype']}", offset=_PREFIX)
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        end = offset + nbytes
        if offset < 0 or end > payload_len:
            raise FormatError(
                f"{path}: truncated payload for {name}, expected {base + end} bytes, "
                f"got {len(blob)}",
                offset=base + offset,
            )
        spans.append((offset, end, name))
        arr = np.frombuffer(blob, dtype=dtype, count=nbytes // dtype.itemsize, offset=base + offset)
        tensors[name] = arr.reshape(shape).astype(dtype.newbyteorder("="), copy=True)

    spans.sort()
    for (_, prev_end, prev_name), (start, _, name) in zip(spans, spans[1:]):
        if start < prev_end:
            raise FormatError(
                f"{path}: tensors {prev_name} and {name} overlap", offset=base + start
            )

    meta = header.get("meta", {})
    return tensors, meta if isinstance(meta, dict) else {}


def load_container(path) -> Dict[str, np.ndarray]:
    """Read only the tensors of a container file."""
    tensors, _ = read_container(path)
    return tensors
