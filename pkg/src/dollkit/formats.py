"""Canonical digests and the named-array checkpoint container.

Checkpoint layout (little-endian)::

    b"DLCK"  u16 version  u16 reserved(0)  u32 header_len  header(JSON, UTF-8)  data

The JSON header is canonical (sorted keys, compact separators) and lists every
array as ``{name, dtype, shape, offset, nbytes}`` with offsets relative to the
start of the data block.  Arrays are stored C-contiguous in declaration order.
"""
from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import FormatError

CHECKPOINT_MAGIC = b"DLCK"
CHECKPOINT_VERSION = 1
ARTIFACT_KINDS = ("corpus", "classifier", "weights", "doll", "segmodel", "report")

_DTYPES = {"f4": np.dtype("<f4"), "f8": np.dtype("<f8"), "i8": np.dtype("<i8"),
           "u1": np.dtype("u1"), "i4": np.dtype("<i4")}


def _check_finite(obj, path="$"):
    if isinstance(obj, float):
        if not math.isfinite(obj):
            raise ValueError(f"non-canonicalizable float {obj!r} at {path}")
    elif isinstance(obj, Mapping):
        for k, v in obj.items():
            if not isinstance(k, str):
                raise ValueError(f"non-string key {k!r} at {path}")
            _check_finite(v, f"{path}.{k}")
    elif isinstance(obj, (list, tuple)):
        for i, v in enumerate(obj):
            _check_finite(v, f"{path}[{i}]")
    elif obj is None or isinstance(obj, (str, int, bool)):
        pass
    else:
        raise ValueError(f"non-canonicalizable value of type {type(obj).__name__} at {path}")


def canonical_json(obj) -> str:
    """Sorted keys, no whitespace, shortest round-trip floats (Python repr)."""
    _check_finite(obj)
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False,
                      allow_nan=False)


def digest(obj) -> str:
    """SHA-256 hex digest of a config-like object or a named-array collection."""
    if isinstance(obj, Mapping) and obj and all(isinstance(v, np.ndarray) for v in obj.values()):
        return digest_arrays(obj)
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()


def digest_arrays(arrays: Mapping[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name])
        h.update(canonical_json({"name": name, "dtype": a.dtype.str,
                                 "shape": list(a.shape)}).encode())
        h.update(a.tobytes())
    return h.hexdigest()


@dataclass
class ArtifactHeader:
    kind: str
    config_digest: str
    magic: str = "DOLLKIT"
    version: int = 1
    created_by: dict = field(default_factory=lambda: {"package": "dollkit", "format": 1})

    def __post_init__(self):
        if self.kind not in ARTIFACT_KINDS:
            raise ValueError(f"unknown artifact kind {self.kind!r}")
        if len(self.config_digest) != 64 or any(c not in "0123456789abcdef" for c in self.config_digest):
            raise ValueError("config_digest must be a 256-bit lowercase hex string")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _dtype_code(a: np.ndarray) -> str:
    for code, dt in _DTYPES.items():
        if a.dtype.kind == dt.kind and a.dtype.itemsize == dt.itemsize:
            return code
    raise TypeError(f"unsupported array dtype {a.dtype}")


def encode_checkpoint(arrays: Mapping[str, np.ndarray], header: Mapping) -> bytes:
    entries, blobs, offset = [], [], 0
    for name, a in arrays.items():
        code = _dtype_code(a)
        raw = np.ascontiguousarray(a, dtype=_DTYPES[code]).tobytes()
        entries.append({"name": name, "dtype": code, "shape": list(a.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    meta = dict(header)
    meta["arrays"] = entries
    head = canonical_json(meta).encode("utf-8")
    return (CHECKPOINT_MAGIC + struct.pack("<HHI", CHECKPOINT_VERSION, 0, len(head))
            + head + b"".join(blobs))


def decode_checkpoint(buf: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if len(buf) < 12:
        raise FormatError("truncated checkpoint preamble", len(buf))
    if buf[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}", 0)
    version, _, hlen = struct.unpack_from("<HHI", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    if 12 + hlen > len(buf):
        raise FormatError("truncated checkpoint header", len(buf))
    try:
        meta = json.loads(buf[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt checkpoint header: {exc}", 12) from None
    base = 12 + hlen
    arrays = {}
    for e in meta.pop("arrays"):
        start = base + e["offset"]
        if start + e["nbytes"] > len(buf):
            raise FormatError(f"truncated array {e['name']!r}", len(buf))
        dt = _DTYPES[e["dtype"]]
        arrays[e["name"]] = np.frombuffer(buf, dtype=dt, count=e["nbytes"] // dt.itemsize,
                                          offset=start).reshape(e["shape"]).copy()
    expected_end = base + sum(a.nbytes for a in arrays.values())
    if len(buf) != expected_end:
        raise FormatError("trailing bytes after checkpoint data", expected_end)
    return arrays, meta


def write_checkpoint(path, arrays, header) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(arrays, header))


def read_checkpoint(path):
    return decode_checkpoint(Path(path).read_bytes())


def write_json(path, obj) -> None:
    """Canonical JSON plus trailing newline, so reports are byte-stable."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(canonical_json(obj) + "\n", encoding="utf-8")


def read_json(path):
    return json.loads(Path(path).read_text(encoding="utf-8"))
