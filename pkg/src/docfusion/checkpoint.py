"""Binary checkpoint container.

Layout (all integers little-endian)::

    offset  size  field
    0       8     magic b"DFCKPT\\x00\\x00"
    8       4     uint32 format version (1)
    12      4     uint32 metadata length M
    16      M     metadata, UTF-8 JSON with sorted keys
    16+M    4     uint32 record count N
    then N records, sorted by name:
            2     uint16 name length K
            K     name, UTF-8
            1     uint8 dtype code (1 float32, 2 float64, 3 int64)
            1     uint8 ndim D
            4*D   uint32 extents
            8     uint64 payload length P
            P     values, little-endian, row-major

The metadata always carries ``step`` and ``score`` (validation BLEU or null);
everything else (stage, chain, seed, provenance) is free-form.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InputError

MAGIC = b"DFCKPT\x00\x00"
VERSION = 1
DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<i8")}
CODES = {np.dtype("float32"): 1, np.dtype("float64"): 2, np.dtype("int64"): 3}


@dataclass
class CheckpointRecord:
    step: int
    params: dict
    score: float | None = None
    metadata: dict = field(default_factory=dict)

    def digest(self) -> str:
        """Short content hash, used as the checkpoint id in reports."""
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name]).tobytes())
        return h.hexdigest()[:16]

    def names(self, prefix: str = "") -> list:
        return sorted(n for n in self.params if n.startswith(prefix))


def snapshot(named_params: dict, step: int, score=None, metadata=None) -> CheckpointRecord:
    return CheckpointRecord(step, {k: v.data.copy() for k, v in named_params.items()}, score,
                            dict(metadata or {}))


def restore(named_params: dict, record: CheckpointRecord, prefixes=None, strict: bool = True) -> list:
    """Copy arrays from ``record`` into the live tensors; returns the names restored."""
    restored = []
    for name, tensor in named_params.items():
        if prefixes is not None and not name.startswith(tuple(prefixes)):
            continue
        if name not in record.params:
            if strict:
                raise InputError(f"checkpoint lacks parameter {name}")
            continue
        arr = record.params[name]
        if arr.shape != tensor.data.shape:
            raise InputError(f"{name}: checkpoint shape {arr.shape} != model {tensor.data.shape}")
        tensor.data = arr.astype(tensor.data.dtype, copy=True)
        restored.append(name)
    return restored


def save_checkpoint(record: CheckpointRecord, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = dict(record.metadata)
    meta["step"] = int(record.step)
    meta["score"] = None if record.score is None else float(record.score)
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(meta_bytes)), meta_bytes,
             struct.pack("<I", len(record.params))]
    for name in sorted(record.params):
        arr = np.asarray(record.params[name])
        code = CODES.get(arr.dtype)
        if code is None:
            raise InputError(f"{name}: unsupported dtype {arr.dtype}")
        raw = np.ascontiguousarray(arr.astype(DTYPES[code], copy=False)).tobytes()
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(struct.pack("<Q", len(raw)))
        parts.append(raw)
    path.write_bytes(b"".join(parts))


def load_checkpoint(path) -> CheckpointRecord:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise InputError(f"{path}: cannot read checkpoint ({exc.strerror})") from None
    if blob[:8] != MAGIC or len(blob) < 16:
        raise InputError(f"{path}: not a checkpoint file")
    version, mlen = struct.unpack_from("<II", blob, 8)
    if version != VERSION:
        raise InputError(f"{path}: unsupported checkpoint version {version}")
    try:
        return _parse(blob, mlen)
    except (struct.error, KeyError, ValueError, UnicodeDecodeError) as exc:
        raise InputError(f"{path}: corrupt checkpoint ({exc})") from None


def _parse(blob: bytes, mlen: int) -> CheckpointRecord:
    pos = 16
    meta = json.loads(blob[pos:pos + mlen].decode("utf-8"))
    pos += mlen
    (count,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    params = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos:pos + nlen].decode("utf-8")
        pos += nlen
        code, ndim = struct.unpack_from("<BB", blob, pos)
        pos += 2
        shape = struct.unpack_from(f"<{ndim}I", blob, pos)
        pos += 4 * ndim
        (plen,) = struct.unpack_from("<Q", blob, pos)
        pos += 8
        dtype = DTYPES[code]
        if pos + plen > len(blob):
            raise ValueError(f"{name}: truncated")
        arr = np.frombuffer(blob, dtype=dtype, count=plen // dtype.itemsize, offset=pos)
        params[name] = arr.reshape(shape).astype(dtype.newbyteorder("="), copy=True)
        pos += plen
    step = meta.pop("step")
    score = meta.pop("score")
    return CheckpointRecord(step, params, score, meta)
