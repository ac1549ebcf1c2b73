"""Embedding file formats.

Two on-disk layouts are understood and auto-detected by their leading bytes:

* JSON-lines, one ``{"id": str, "vec": [numbers]}`` record per line.
* Binary: ``b"MISP"``, format version (uint32), row count and dimension
  (uint64 each), then row-major float32 values, all little-endian.

The binary layout has no room for row ids. When ids are known they are kept
in a sidecar ``<path>.ids.json`` (a JSON list); without one, rows are named
by their index.
"""

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from mispdpo.errors import DataError, DimensionError, NumericError

MAGIC = b"MISP"
FORMAT_VERSION = 1
HEADER = struct.Struct("<4sIQQ")
HEADER_SIZE = HEADER.size  # 24 bytes


@dataclass
class EmbeddingTable:
    ids: list
    matrix: np.ndarray
    index: dict = field(init=False, repr=False)

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.ndim != 2:
            raise DimensionError(f"embedding matrix must be 2-D, got {self.matrix.shape}")
        if len(self.ids) != self.matrix.shape[0]:
            raise DataError(f"{len(self.ids)} ids for {self.matrix.shape[0]} rows")
        self.ids = [str(i) for i in self.ids]
        self.index = {k: n for n, k in enumerate(self.ids)}
        if len(self.index) != len(self.ids):
            raise DataError("duplicate ids in embedding table")

    def __len__(self):
        return len(self.ids)

    @property
    def dim(self):
        return self.matrix.shape[1]

    def row(self, key):
        return self.matrix[self.index[str(key)]]


def ids_sidecar(path):
    return f"{os.fspath(path)}.ids.json"


def write_binary(path, matrix, ids=None):
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2:
        raise DimensionError(f"binary matrices must be 2-D, got {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NumericError("refusing to write non-finite values")
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, FORMAT_VERSION, m.shape[0], m.shape[1]))
        fh.write(np.ascontiguousarray(m, dtype="<f4").tobytes())
    if ids is not None:
        with open(ids_sidecar(path), "w") as fh:
            json.dump([str(i) for i in ids], fh)


def read_binary(path) -> EmbeddingTable:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < HEADER_SIZE:
        raise DataError(f"{path}: truncated header")
    magic, version, rows, dim = HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported format version {version}")
    expected = HEADER_SIZE + rows * dim * 4
    if len(raw) != expected:
        raise DataError(f"{path}: expected {expected} bytes, found {len(raw)}")
    matrix = np.frombuffer(raw, dtype="<f4", offset=HEADER_SIZE).reshape(rows, dim)
    sidecar = ids_sidecar(path)
    if os.path.exists(sidecar):
        with open(sidecar) as fh:
            ids = json.load(fh)
    else:
        ids = [str(i) for i in range(rows)]
    return EmbeddingTable(ids, matrix.astype(np.float64))


def write_jsonl(path, ids, matrix):
    m = np.asarray(matrix, dtype=np.float64)
    with open(path, "w") as fh:
        for key, row in zip(ids, m):
            fh.write(json.dumps({"id": str(key), "vec": row.tolist()}) + "\n")


def read_jsonl(path) -> EmbeddingTable:
    ids, rows = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                ids.append(str(rec["id"]))
                rows.append([float(v) for v in rec["vec"]])
            except (KeyError, TypeError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: malformed record ({exc})") from exc
    if not rows:
        return EmbeddingTable([], np.zeros((0, 0)))
    dims = {len(r) for r in rows}
    if len(dims) != 1:
        raise DimensionError(f"{path}: rows have differing dimensions {sorted(dims)}")
    matrix = np.array(rows, dtype=np.float64)
    if not np.all(np.isfinite(matrix)):
        raise NumericError(f"{path}: non-finite values")
    return EmbeddingTable(ids, matrix)


def load_embeddings(path) -> EmbeddingTable:
    """Read either embedding format, chosen by the file's magic bytes."""
    with open(path, "rb") as fh:
        head = fh.read(len(MAGIC))
    if head == MAGIC:
        return read_binary(path)
    return read_jsonl(path)


def save_embeddings(path, table: EmbeddingTable, binary=True):
    if binary:
        write_binary(path, table.matrix, table.ids)
    else:
        write_jsonl(path, table.ids, table.matrix)


def write_jsonl_records(path, records):
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=False) + "\n")


def read_jsonl_records(path):
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                try:
                    out.append(json.loads(line))
                except json.JSONDecodeError as exc:
                    raise DataError(f"{path}:{lineno}: {exc}") from exc
    return out
