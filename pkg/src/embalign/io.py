"""Embedding file formats.

CSV (default): UTF-8, header ``user_id,class_label,v0,...,v{D-1}``, one
record per line, class_label left empty when absent, vector components
as decimal floats.

Binary: magic bytes ``EMB1``, little-endian u32 N, u32 D, then N records
of (u16 user-id byte length, the UTF-8 id bytes, i32 class label with -1
meaning absent, D little-endian float32 components). Binary files carry
32-bit floats by design; values are promoted to float64 on load.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .core import EmbeddingSet

MAGIC = b"EMB1"
FORMATS = ("csv", "bin")


def save_embeddings(es: EmbeddingSet, path, fmt: str = "csv") -> None:
    if fmt not in FORMATS:
        raise ValueError(f"unknown embedding format {fmt!r}; expected one of {FORMATS}")
    path = Path(path)
    if fmt == "csv":
        _save_csv(es, path)
    else:
        _save_bin(es, path)


def load_embeddings(path, fmt: str = "auto") -> EmbeddingSet:
    """Load either format; ``auto`` sniffs the binary magic bytes."""
    path = Path(path)
    if fmt == "auto":
        with open(path, "rb") as fh:
            fmt = "bin" if fh.read(4) == MAGIC else "csv"
    if fmt not in FORMATS:
        raise ValueError(f"unknown embedding format {fmt!r}; expected one of {FORMATS}")
    return _load_bin(path) if fmt == "bin" else _load_csv(path)


def _save_csv(es: EmbeddingSet, path: Path) -> None:
    dim = es.dim
    header = "user_id,class_label," + ",".join(f"v{i}" for i in range(dim))
    lines = [header]
    labels = es.class_labels
    for i in range(es.n):
        label = "" if labels is None else str(int(labels[i]))
        coords = ",".join(repr(float(x)) for x in es.vectors[i])
        lines.append(f"{es.user_ids[i]},{label},{coords}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _load_csv(path: Path) -> EmbeddingSet:
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        cols = header.split(",")
        if cols[:2] != ["user_id", "class_label"]:
            raise ValueError(
                f"{path}: expected header 'user_id,class_label,v0,...', got {header!r}"
            )
        dim = len(cols) - 2
        ids: list[str] = []
        labels: list[int] = []
        any_label = False
        rows: list[list[float]] = []
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != dim + 2:
                raise ValueError(
                    f"{path}:{lineno}: expected {dim + 2} fields, got {len(parts)}"
                )
            ids.append(parts[0])
            if parts[1] == "":
                labels.append(-1)
            else:
                labels.append(int(parts[1]))
                any_label = True
            rows.append([float(x) for x in parts[2:]])
    if any_label and min(labels) < 0:
        raise ValueError(f"{path}: class labels must be present on all records or none")
    vectors = np.asarray(rows, dtype=np.float64)
    class_labels = np.asarray(labels, dtype=np.int64) if any_label else None
    return EmbeddingSet(vectors, tuple(ids), class_labels)


def _save_bin(es: EmbeddingSet, path: Path) -> None:
    labels = es.class_labels
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", es.n, es.dim))
        for i in range(es.n):
            raw = es.user_ids[i].encode("utf-8")
            label = -1 if labels is None else int(labels[i])
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<i", label))
            fh.write(es.vectors[i].astype("<f4").tobytes())


def _load_bin(path: Path) -> EmbeddingSet:
    data = path.read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: missing {MAGIC!r} magic bytes")
    n, dim = struct.unpack_from("<II", data, 4)
    offset = 12
    ids: list[str] = []
    labels: list[int] = []
    vectors = np.empty((n, dim), dtype=np.float64)
    for i in range(n):
        (id_len,) = struct.unpack_from("<H", data, offset)
        offset += 2
        ids.append(data[offset : offset + id_len].decode("utf-8"))
        offset += id_len
        (label,) = struct.unpack_from("<i", data, offset)
        offset += 4
        labels.append(label)
        vectors[i] = np.frombuffer(data, dtype="<f4", count=dim, offset=offset)
        offset += 4 * dim
    if offset != len(data):
        raise ValueError(f"{path}: {len(data) - offset} trailing bytes")
    any_label = any(c >= 0 for c in labels)
    if any_label and min(labels) < 0:
        raise ValueError(f"{path}: class labels must be present on all records or none")
    class_labels = np.asarray(labels, dtype=np.int64) if any_label else None
    return EmbeddingSet(vectors, tuple(ids), class_labels)
