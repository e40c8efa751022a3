"""Binary persistence of prototype stores and raw feature records.

Layout (little-endian)::

    magic      4s   b"EXFC"
    version    u16  1
    flags      u16  bit 0: float width (0 = f64, 1 = f32)
                    bit 1: record type (0 = prototypes, 1 = raw features)
    n_records  u32
    records    ...
    crc32      u32  over every preceding byte

Prototype record: ``u16 domain_id, u32 class_id, u32 dim, u64 count``,
then ``dim`` floats (mean) and ``dim*dim`` floats (m2, row-major).

Feature record: ``u16 domain_id, u32 class_id, u32 dim, u64 sample_index,
u32 task_id, u32 object_id, u16 layer_id, u8 split`` (0 train, 1 test),
then ``dim`` floats.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    StoreDimensionError,
    StoreIntegrityError,
    StoreTruncatedError,
    StoreVersionError,
)
from .linalg import MomentPack
from .prototypes import ClassKey, Prototype, PrototypeStore, StoreConfig

MAGIC = b"EXFC"
VERSION = 1
FLAG_F32 = 0x1
FLAG_FEATURES = 0x2

_HEADER = struct.Struct("<4sHHI")
_PROTO = struct.Struct("<HIIQ")
_FEATURE = struct.Struct("<HIIQIIHB")
_CRC = struct.Struct("<I")


def _dtype(flags: int) -> np.dtype:
    return np.dtype("<f4") if flags & FLAG_F32 else np.dtype("<f8")


def _width(precision: str) -> int:
    if precision in ("float64", "f64", "double"):
        return 0
    if precision in ("float32", "f32", "single"):
        return FLAG_F32
    raise ValueError(f"unknown precision {precision!r}")


def store_nbytes(dims, precision: str = "float64") -> int:
    """Serialized size of a store whose prototypes have the given dims."""
    w = _dtype(_width(precision)).itemsize
    return _HEADER.size + sum(_PROTO.size + (d + d * d) * w for d in dims) + _CRC.size


def save_store(store: PrototypeStore, precision: str = "float64") -> bytes:
    flags = _width(precision)
    dt = _dtype(flags)
    parts = [_HEADER.pack(MAGIC, VERSION, flags, len(store))]
    for key in store.keys():
        m = store.prototypes[key].moments
        parts.append(_PROTO.pack(key.domain_id, key.class_id, m.dim, m.count))
        parts.append(m.mean.astype(dt).tobytes())
        parts.append(m.m2.astype(dt).tobytes())
    body = b"".join(parts)
    return body + _CRC.pack(zlib.crc32(body))


def _read_header(data: bytes) -> tuple[int, int]:
    if len(data) < _HEADER.size:
        raise StoreTruncatedError(f"stream of {len(data)} bytes is shorter than the header")
    magic, version, flags, n = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise StoreVersionError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise StoreVersionError(f"unsupported format version {version}")
    return flags, n


def _check_crc(data: bytes, end: int) -> None:
    if len(data) < end + _CRC.size:
        raise StoreTruncatedError("stream ends before the CRC trailer")
    if len(data) > end + _CRC.size:
        raise StoreIntegrityError(f"{len(data) - end - _CRC.size} unexpected trailing bytes")
    (crc,) = _CRC.unpack_from(data, end)
    if crc != zlib.crc32(data[:end]):
        raise StoreIntegrityError("CRC32 mismatch; the store is corrupted")


def load_store(data: bytes, config: StoreConfig | None = None) -> PrototypeStore:
    """Decode a stream produced by :func:`save_store`.

    Raises a :class:`~exfc.errors.StoreFormatError` subclass on bad magic or
    version, truncation, CRC mismatch, or inconsistent dimensions.
    """
    data = bytes(data)
    flags, n = _read_header(data)
    if flags & FLAG_FEATURES:
        raise StoreVersionError("stream holds raw feature records, not prototypes")
    dt = _dtype(flags)
    off = _HEADER.size
    protos = []
    for i in range(n):
        if len(data) < off + _PROTO.size:
            raise StoreTruncatedError(f"record {i} header truncated at byte {off}")
        dom, cls, dim, count = _PROTO.unpack_from(data, off)
        off += _PROTO.size
        if dim == 0:
            raise StoreDimensionError(f"record {i} ({dom}, {cls}) has dimension 0")
        need = (dim + dim * dim) * dt.itemsize
        if len(data) < off + need:
            raise StoreTruncatedError(f"record {i} ({dom}, {cls}) payload truncated")
        mean = np.frombuffer(data, dt, dim, off).astype(np.float64)
        m2 = np.frombuffer(data, dt, dim * dim, off + dim * dt.itemsize).astype(np.float64)
        off += need
        protos.append(Prototype(ClassKey(dom, cls), MomentPack(count, mean, m2.reshape(dim, dim))))
    _check_crc(data, off)

    store = PrototypeStore(config)
    for p in protos:
        if p.key in store.prototypes:
            raise StoreDimensionError(f"duplicate prototype {tuple(p.key)}")
        known = store.domain_dims.get(p.key.domain_id)
        if known is not None and known != p.moments.dim:
            raise StoreDimensionError(
                f"prototype {tuple(p.key)} has dim {p.moments.dim}, "
                f"domain {p.key.domain_id} uses {known}"
            )
        store.put(p)
    store.generation = 0
    return store


def write_store(store: PrototypeStore, path, precision: str = "float64") -> int:
    data = save_store(store, precision)
    Path(path).write_bytes(data)
    return len(data)


def read_store(path, config: StoreConfig | None = None) -> PrototypeStore:
    return load_store(Path(path).read_bytes(), config)


@dataclass(frozen=True)
class FeatureRecord:
    domain_id: int
    class_id: int
    sample_index: int
    task_id: int
    object_id: int
    layer_id: int
    split: str
    values: np.ndarray


_SPLITS = ("train", "test")


def save_features(records, precision: str = "float64") -> bytes:
    flags = _width(precision) | FLAG_FEATURES
    dt = _dtype(flags)
    records = list(records)
    parts = [_HEADER.pack(MAGIC, VERSION, flags, len(records))]
    for r in records:
        v = np.asarray(r.values, dtype=np.float64)
        parts.append(
            _FEATURE.pack(
                r.domain_id, r.class_id, v.size, r.sample_index,
                r.task_id, r.object_id, r.layer_id, _SPLITS.index(r.split),
            )
        )
        parts.append(v.astype(dt).tobytes())
    body = b"".join(parts)
    return body + _CRC.pack(zlib.crc32(body))


def load_features(data: bytes) -> list[FeatureRecord]:
    data = bytes(data)
    flags, n = _read_header(data)
    if not flags & FLAG_FEATURES:
        raise StoreVersionError("stream holds prototypes, not raw feature records")
    dt = _dtype(flags)
    off = _HEADER.size
    out = []
    for i in range(n):
        if len(data) < off + _FEATURE.size:
            raise StoreTruncatedError(f"feature record {i} header truncated")
        dom, cls, dim, idx, task, obj, layer, split = _FEATURE.unpack_from(data, off)
        off += _FEATURE.size
        if dim == 0 or split >= len(_SPLITS):
            raise StoreDimensionError(f"feature record {i} is malformed")
        need = dim * dt.itemsize
        if len(data) < off + need:
            raise StoreTruncatedError(f"feature record {i} payload truncated")
        vals = np.frombuffer(data, dt, dim, off).astype(np.float64)
        off += need
        out.append(FeatureRecord(dom, cls, idx, task, obj, layer, _SPLITS[split], vals))
    _check_crc(data, off)
    return out
