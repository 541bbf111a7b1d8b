"""Binary and JSON-lines file formats shared across pipeline stages.

Every binary file starts with a single UTF-8 JSON header line terminated by
``\\n`` followed by a little-endian payload.  Embedding files carry one matrix;
section files (PCA models, checkpoints) carry several named arrays back to back.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

_DTYPES = {"f32": "<f4", "f64": "<f8", "i64": "<i8"}


def _dtype_tag(arr: np.ndarray) -> str:
    if arr.dtype == np.float32:
        return "f32"
    if arr.dtype == np.float64:
        return "f64"
    if np.issubdtype(arr.dtype, np.integer):
        return "i64"
    raise TypeError(f"unsupported dtype {arr.dtype}")


def write_embedding(path: str | Path, matrix: np.ndarray, space: str = "raw", dtype: str = "f32") -> None:
    m = np.asarray(matrix)
    if m.ndim != 2:
        raise ValueError("embedding matrix must be 2-D")
    header = {"rows": int(m.shape[0]), "cols": int(m.shape[1]), "dtype": dtype, "space": space}
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(np.ascontiguousarray(m, dtype=_DTYPES[dtype]).tobytes())


def read_embedding(path: str | Path) -> tuple[np.ndarray, dict]:
    """Return ``(matrix, header)``; the matrix is promoted to float64."""
    with open(path, "rb") as fh:
        header = json.loads(fh.readline())
        payload = fh.read()
    rows, cols = header["rows"], header["cols"]
    arr = np.frombuffer(payload, dtype=_DTYPES[header["dtype"]])
    if arr.size != rows * cols:
        raise ValueError(f"{path}: payload has {arr.size} values, header says {rows}x{cols}")
    return arr.reshape(rows, cols).astype(np.float64), header


def write_sections(path: str | Path, sections: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write named arrays with a JSON manifest header.  Order of ``sections`` is kept."""
    entries = []
    blobs = []
    offset = 0
    for name, arr in sections.items():
        a = np.asarray(arr)
        tag = _dtype_tag(a)
        blob = np.ascontiguousarray(a, dtype=_DTYPES[tag]).tobytes()
        entries.append({"name": name, "shape": list(a.shape), "dtype": tag, "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = {"sections": entries, "meta": meta or {}}
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for blob in blobs:
            fh.write(blob)


def read_sections(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline())
        payload = fh.read()
    out = {}
    for e in header["sections"]:
        raw = payload[e["offset"]: e["offset"] + e["nbytes"]]
        out[e["name"]] = np.frombuffer(raw, dtype=_DTYPES[e["dtype"]]).reshape(e["shape"]).copy()
    return out, header["meta"]


def write_jsonl(path: str | Path, records: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True, ensure_ascii=False) + "\n")


def append_jsonl(path: str | Path, record: dict) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(record, sort_keys=True, ensure_ascii=False) + "\n")


def read_jsonl(path: str | Path) -> Iterator[dict]:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                yield json.loads(line)


def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()
