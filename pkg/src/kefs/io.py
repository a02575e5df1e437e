"""File formats: JSON documents, JSON-lines records and named-array checkpoints.

Named-array documents hold ``{"format", "version", "meta", "arrays"}`` where
``arrays`` maps each name to ``{"shape": [...], "data": [...]}`` (row-major).
The binary form of the same content is::

    magic    8 bytes  b"KEFSARR\\x00"
    version  u32
    meta     u64 byte length, then UTF-8 JSON
    count    u32
    entries  count x (u32 name length, UTF-8 name, u32 ndim, ndim x u64 dims,
                      prod(dims) x f64)

All integers and floats are little-endian.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .errors import CheckpointError, InputDataError, StorageError

ARRAY_FORMAT = "kefs-arrays"
ARRAY_VERSION = 1
MAGIC = b"KEFSARR\x00"


def atomic_write_bytes(path, payload: bytes) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(payload)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
    except OSError as exc:
        raise StorageError(f"cannot write {path}: {exc}") from exc


def dumps(doc) -> str:
    try:
        return json.dumps(doc, indent=1, allow_nan=False) + "\n"
    except ValueError as exc:
        raise InputDataError(f"refusing to serialize non-finite value: {exc}") from None


def write_json(path, doc) -> None:
    atomic_write_bytes(path, dumps(doc).encode())


def read_json(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise StorageError(f"no such file: {path}") from None
    except json.JSONDecodeError as exc:
        raise InputDataError(f"{path}: malformed JSON ({exc})") from None
    except OSError as exc:
        raise StorageError(f"cannot read {path}: {exc}") from exc


def write_jsonl(path, records: Iterable[Mapping]) -> None:
    lines = [json.dumps(r, allow_nan=False) for r in records]
    atomic_write_bytes(path, ("\n".join(lines) + "\n" if lines else "").encode())


def read_jsonl(path) -> list:
    out = []
    try:
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if line.strip():
                    try:
                        out.append(json.loads(line))
                    except json.JSONDecodeError as exc:
                        raise InputDataError(f"{path}:{lineno}: malformed record ({exc})") from None
    except FileNotFoundError:
        raise StorageError(f"no such file: {path}") from None
    except OSError as exc:
        raise StorageError(f"cannot read {path}: {exc}") from exc
    return out


def arrays_to_doc(arrays: Mapping[str, np.ndarray], meta: Mapping | None = None) -> dict:
    return {
        "format": ARRAY_FORMAT,
        "version": ARRAY_VERSION,
        "meta": dict(meta or {}),
        "arrays": {
            name: {"shape": list(np.shape(a)), "data": np.asarray(a, dtype=np.float64).ravel().tolist()}
            for name, a in arrays.items()
        },
    }


def doc_to_arrays(doc) -> tuple:
    if not isinstance(doc, Mapping) or doc.get("format") != ARRAY_FORMAT:
        raise CheckpointError("not a named-array document")
    if doc.get("version") != ARRAY_VERSION:
        raise CheckpointError(f"unsupported named-array version {doc.get('version')!r}")
    arrays = {}
    try:
        for name, entry in doc["arrays"].items():
            shape = tuple(int(s) for s in entry["shape"])
            data = np.asarray(entry["data"], dtype=np.float64)
            if data.size != int(np.prod(shape)):
                raise CheckpointError(f"array {name!r}: {data.size} values for shape {shape}")
            arrays[name] = data.reshape(shape)
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"malformed array entry: {exc}") from None
    return arrays, dict(doc.get("meta", {}))


def encode_binary(arrays: Mapping[str, np.ndarray], meta: Mapping | None = None) -> bytes:
    meta_bytes = json.dumps(dict(meta or {}), allow_nan=False).encode()
    parts = [MAGIC, struct.pack("<I", ARRAY_VERSION), struct.pack("<Q", len(meta_bytes)), meta_bytes]
    parts.append(struct.pack("<I", len(arrays)))
    for name, a in arrays.items():
        a = np.asarray(a, dtype="<f8")
        raw = name.encode()
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape))
        parts.append(np.ascontiguousarray(a).tobytes())
    return b"".join(parts)


def decode_binary(payload: bytes) -> tuple:
    view = memoryview(payload)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError(f"binary checkpoint truncated at byte {pos} (needed {n} more)")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    if bytes(take(8)) != MAGIC:
        raise CheckpointError("bad magic; not a binary named-array file")
    (version,) = struct.unpack("<I", take(4))
    if version != ARRAY_VERSION:
        raise CheckpointError(f"unsupported binary version {version}")
    (meta_len,) = struct.unpack("<Q", take(8))
    try:
        meta = json.loads(bytes(take(meta_len)).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt metadata block: {exc}") from None
    (count,) = struct.unpack("<I", take(4))
    arrays = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = bytes(take(name_len)).decode()
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        size = int(np.prod(shape))
        arrays[name] = np.frombuffer(bytes(take(8 * size)), dtype="<f8").astype(np.float64).reshape(shape)
    if pos != len(view):
        raise CheckpointError(f"{len(view) - pos} trailing bytes after the last array")
    return arrays, meta


def save_arrays(path, arrays: Mapping[str, np.ndarray], meta: Mapping | None = None, binary: bool | None = None) -> None:
    """Write a named-array file; ``binary`` defaults to True for ``.bin`` paths."""
    if binary is None:
        binary = str(path).endswith(".bin")
    if binary:
        atomic_write_bytes(path, encode_binary(arrays, meta))
    else:
        write_json(path, arrays_to_doc(arrays, meta))


def load_arrays(path) -> tuple:
    try:
        payload = Path(path).read_bytes()
    except FileNotFoundError:
        raise StorageError(f"no such file: {path}") from None
    except OSError as exc:
        raise StorageError(f"cannot read {path}: {exc}") from exc
    if payload.startswith(MAGIC):
        return decode_binary(payload)
    try:
        doc = json.loads(payload.decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: cannot parse checkpoint ({exc})") from None
    return doc_to_arrays(doc)
