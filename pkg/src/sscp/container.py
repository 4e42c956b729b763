"""Self-describing binary container for scenario / precoder / covariance files.

Layout: a magic line, a zero-padded decimal header length, a canonical JSON
header (sorted keys), then the raw array payload.  Complex matrices are stored
row-major as little-endian IEEE-754 float64 pairs (re, im), which is exactly
the byte layout of ``numpy`` ``<c16``.  Writing is deterministic, so
write -> read -> write round-trips bit-exactly.
"""

import json
import hashlib
from pathlib import Path

import numpy as np

from .errors import ConfigurationError

MAGIC = b"SSCPBIN1\n"

_DTYPES = {
    "complex128": "<c16",
    "float64": "<f8",
    "int64": "<i8",
}


def canonical_json(obj) -> str:
    """Deterministic JSON encoding used for headers, summaries and hashes."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def json_hash(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _canonical_dtype(arr: np.ndarray) -> str:
    kind = arr.dtype.kind
    if kind == "c":
        return "complex128"
    if kind == "f":
        return "float64"
    if kind in ("i", "u"):
        return "int64"
    raise ConfigurationError(f"unsupported array dtype {arr.dtype!r}")


def container_bytes(meta: dict, arrays: dict) -> bytes:
    """Serialize ``meta`` plus named arrays to the container byte layout."""
    entries = []
    blobs = []
    offset = 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        dtype = _canonical_dtype(arr)
        blob = arr.astype(_DTYPES[dtype], copy=False).tobytes(order="C")
        entries.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "dtype": dtype,
                "offset": offset,
                "nbytes": len(blob),
            }
        )
        blobs.append(blob)
        offset += len(blob)
    header = canonical_json({"meta": meta, "arrays": entries}).encode("utf-8")
    return b"".join([MAGIC, b"%016d\n" % len(header), header] + blobs)


def container_digest(meta: dict, arrays: dict) -> str:
    return hashlib.sha256(container_bytes(meta, arrays)).hexdigest()


def write_container(path, meta: dict, arrays: dict) -> str:
    """Write ``meta`` plus named arrays to ``path``; returns the file hash."""
    data = container_bytes(meta, arrays)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def read_container(path):
    """Read back (meta, arrays) written by :func:`write_container`."""
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise ConfigurationError(f"{path}: not a container file (bad magic)")
    pos = len(MAGIC)
    header_len = int(raw[pos : pos + 16])
    pos += 17  # length field + newline
    header = json.loads(raw[pos : pos + header_len].decode("utf-8"))
    payload = raw[pos + header_len :]
    arrays = {}
    for entry in header["arrays"]:
        blob = payload[entry["offset"] : entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(blob, dtype=_DTYPES[entry["dtype"]])
        arrays[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return header["meta"], arrays


def write_json(path, obj) -> str:
    """Pretty but deterministic JSON artifact (no timestamps anywhere)."""
    text = json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n"
    Path(path).write_bytes(text.encode("utf-8"))
    return file_hash(path)
