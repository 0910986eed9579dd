"""On-disk containers.

All integers are little-endian u32; all float payloads are little-endian
f32, row-major. Strings and JSON blobs are UTF-8 with a u32 byte-length
prefix. Writes go to a temp file in the target directory and are renamed
into place, so readers never observe partial files. JSON is serialized
canonically (sorted keys, fixed separators) to keep reruns byte-identical.

    SLQ1  per-patient slice vectors: n_slices, dim, data
    PBK1  prototype book: K, dim, centroid rows
    CKP1  checkpoint: config JSON, then named parameter tensors
"""

import json
import os
import struct
from typing import BinaryIO

import numpy as np

from .errors import DataError

SLQ_MAGIC = b"SLQ1"
PBK_MAGIC = b"PBK1"
CKP_MAGIC = b"CKP1"
SLQ_VERSION = 1
PBK_VERSION = 1
CKP_VERSION = 1

_U32 = struct.Struct("<I")
U32_MAX = 2**32 - 1


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def atomic_write_bytes(path: str, payload: bytes) -> None:
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(payload)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def atomic_write_text(path: str, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def _u32(value: int) -> bytes:
    if not (0 <= value <= U32_MAX):
        raise DataError(f"value {value} does not fit in u32")
    return _U32.pack(value)


def _take(buf: bytes, off: int, n: int, what: str) -> tuple[bytes, int]:
    if off + n > len(buf):
        raise DataError(f"truncated file: expected {n} bytes for {what}")
    return buf[off : off + n], off + n


def _read_u32(buf: bytes, off: int, what: str) -> tuple[int, int]:
    raw, off = _take(buf, off, 4, what)
    return _U32.unpack(raw)[0], off


def _prefixed(data: bytes) -> bytes:
    return _u32(len(data)) + data


def _read_prefixed(buf: bytes, off: int, what: str) -> tuple[bytes, int]:
    n, off = _read_u32(buf, off, f"{what} length")
    return _take(buf, off, n, what)


def _f32_bytes(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f4").tobytes()


def _check_header(buf: bytes, magic: bytes, version: int, path: str) -> int:
    raw, off = _take(buf, 0, 4, "magic")
    if raw != magic:
        raise DataError(f"{path}: bad magic {raw!r}, expected {magic!r}")
    got, off = _read_u32(buf, off, "version")
    if got != version:
        raise DataError(f"{path}: unsupported version {got}, expected {version}")
    return off


def _check_consumed(buf: bytes, off: int, path: str) -> None:
    if off != len(buf):
        raise DataError(f"{path}: {len(buf) - off} trailing bytes after payload")


# ---------------------------------------------------------------------------
# SLQ1: slice-vector stack for one patient
# ---------------------------------------------------------------------------


def write_slq(path: str, slices: np.ndarray) -> None:
    arr = np.asarray(slices, dtype=np.float32)
    if arr.ndim != 2:
        raise DataError(f"slice stack must be 2-D, got shape {arr.shape}")
    n, dim = arr.shape
    payload = SLQ_MAGIC + _u32(SLQ_VERSION) + _u32(n) + _u32(dim) + _f32_bytes(arr)
    atomic_write_bytes(path, payload)


def read_slq(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    off = _check_header(buf, SLQ_MAGIC, SLQ_VERSION, path)
    n, off = _read_u32(buf, off, "n_slices")
    dim, off = _read_u32(buf, off, "dim")
    raw, off = _take(buf, off, 4 * n * dim, "slice data")
    _check_consumed(buf, off, path)
    return np.frombuffer(raw, dtype="<f4").reshape(n, dim).astype(np.float32)


# ---------------------------------------------------------------------------
# PBK1: prototype centroids
# ---------------------------------------------------------------------------


def write_pbk(path: str, centroids: np.ndarray) -> None:
    arr = np.asarray(centroids, dtype=np.float32)
    if arr.ndim != 2:
        raise DataError(f"centroids must be 2-D, got shape {arr.shape}")
    k, dim = arr.shape
    payload = PBK_MAGIC + _u32(PBK_VERSION) + _u32(k) + _u32(dim) + _f32_bytes(arr)
    atomic_write_bytes(path, payload)


def read_pbk(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    off = _check_header(buf, PBK_MAGIC, PBK_VERSION, path)
    k, off = _read_u32(buf, off, "K")
    dim, off = _read_u32(buf, off, "dim")
    raw, off = _take(buf, off, 4 * k * dim, "centroid data")
    _check_consumed(buf, off, path)
    return np.frombuffer(raw, dtype="<f4").reshape(k, dim).astype(np.float32)


# ---------------------------------------------------------------------------
# CKP1: named-parameter checkpoint
# ---------------------------------------------------------------------------


def write_ckp(path: str, config: dict, params: dict[str, np.ndarray]) -> None:
    blob = bytearray()
    blob += CKP_MAGIC
    blob += _u32(CKP_VERSION)
    blob += _prefixed(canonical_json(config).encode("utf-8"))
    blob += _u32(len(params))
    for name, value in params.items():
        arr = np.asarray(value)
        if arr.dtype != np.float32:
            raise DataError(f"parameter {name!r} must be float32 to checkpoint")
        blob += _prefixed(name.encode("utf-8"))
        blob += _u32(arr.ndim)
        for extent in arr.shape:
            blob += _u32(extent)
        blob += _f32_bytes(arr)
    atomic_write_bytes(path, bytes(blob))


def read_ckp(path: str) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        buf = fh.read()
    off = _check_header(buf, CKP_MAGIC, CKP_VERSION, path)
    raw, off = _read_prefixed(buf, off, "config JSON")
    try:
        config = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: config blob is not valid JSON: {exc}") from exc
    n_params, off = _read_u32(buf, off, "parameter count")
    params: dict[str, np.ndarray] = {}
    for _ in range(n_params):
        raw, off = _read_prefixed(buf, off, "parameter name")
        name = raw.decode("utf-8")
        if name in params:
            raise DataError(f"{path}: duplicate parameter name {name!r}")
        rank, off = _read_u32(buf, off, f"{name} rank")
        shape = []
        for axis in range(rank):
            extent, off = _read_u32(buf, off, f"{name} extent {axis}")
            shape.append(extent)
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        raw, off = _take(buf, off, 4 * count, f"{name} data")
        params[name] = (
            np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
        )
    _check_consumed(buf, off, path)
    return config, params


# ---------------------------------------------------------------------------
# JSON manifests
# ---------------------------------------------------------------------------


def write_manifest(path: str, entries: list[dict]) -> None:
    for e in entries:
        if set(e) != {"id", "path", "label"}:
            raise DataError(f"manifest entry keys must be id/path/label, got {sorted(e)}")
        if e["label"] not in (0, 1):
            raise DataError(f"manifest label must be 0 or 1, got {e['label']!r}")
    ids = [e["id"] for e in entries]
    if len(set(ids)) != len(ids):
        raise DataError("duplicate patient ids in manifest")
    atomic_write_text(path, canonical_json(entries))


def read_manifest(path: str) -> list[dict]:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            entries = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid manifest JSON: {exc}") from exc
    if not isinstance(entries, list):
        raise DataError(f"{path}: manifest must be a JSON array")
    for e in entries:
        if not isinstance(e, dict) or not {"id", "path", "label"} <= set(e):
            raise DataError(f"{path}: manifest entries need id/path/label")
    return entries
