"""Keyed float32 embedding matrices and their on-disk binary format.

File layout (all integers little-endian):

    magic   4 bytes  b"CEMB"
    version u32      1
    dim     u32
    count   u64
    flags   u32      bit 0: rows are L2-normalized
    then count records of:
        key_len u32
        key     key_len bytes, UTF-8
        vector  dim * f32

The format is deliberately dumb: fixed header, dense rows, no compression,
so a saved file round-trips bit-exactly and a truncated download is caught
by byte arithmetic rather than a deserializer crash.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DegenerateAverageError,
    EmbeddingFormatError,
    InputError,
    MissingEmbeddingError,
    ZeroVectorError,
)

MAGIC = b"CEMB"
VERSION = 1
FLAG_NORMALIZED = 1
NORM_TOL = 1e-4


@dataclass
class EmbeddingMatrix:
    """An ordered set of unique string keys with one float32 row each."""

    keys: list[str]
    data: np.ndarray  # shape (len(keys), dim), float32
    normalized: bool = False
    _index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 2:
            raise InputError(f"embedding data must be 2-d, got shape {self.data.shape}")
        if len(self.keys) != self.data.shape[0]:
            raise InputError(
                f"{len(self.keys)} keys but {self.data.shape[0]} rows of embedding data"
            )
        self._index = {}
        for i, key in enumerate(self.keys):
            if key in self._index:
                raise InputError(f"duplicate embedding key {key!r}")
            self._index[key] = i
        if not np.all(np.isfinite(self.data)):
            raise EmbeddingFormatError("embedding data contains NaN or Inf")
        if self.normalized and len(self.keys):
            norms = np.linalg.norm(self.data, axis=1)
            worst = float(np.max(np.abs(norms - 1.0)))
            if worst > NORM_TOL:
                raise InputError(
                    f"matrix flagged normalized but a row norm deviates by {worst:.2e}"
                )

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def __len__(self) -> int:
        return len(self.keys)

    def __contains__(self, key: str) -> bool:
        return key in self._index

    def vector(self, key: str) -> np.ndarray:
        """Row for `key`; raises MissingEmbeddingError naming the key."""
        i = self._index.get(key)
        if i is None:
            raise MissingEmbeddingError(key)
        return self.data[i]

    def subset(self, keys: list[str]) -> "EmbeddingMatrix":
        rows = np.stack([self.vector(k) for k in keys]) if keys else np.empty((0, self.dim))
        return EmbeddingMatrix(list(keys), rows, normalized=self.normalized)


def normalize_rows(matrix: EmbeddingMatrix) -> EmbeddingMatrix:
    """Return a copy with each row L2-normalized (zero rows are an error)."""
    norms = np.linalg.norm(matrix.data, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        bad = matrix.keys[int(np.argmin(norms))]
        raise ZeroVectorError(f"cannot normalize zero-vector row {bad!r}")
    return EmbeddingMatrix(list(matrix.keys), matrix.data / norms, normalized=True)


def save_embeddings(matrix: EmbeddingMatrix, path: str) -> None:
    flags = FLAG_NORMALIZED if matrix.normalized else 0
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IIQI", VERSION, matrix.dim, len(matrix), flags))
        for i, key in enumerate(matrix.keys):
            kb = key.encode("utf-8")
            f.write(struct.pack("<I", len(kb)))
            f.write(kb)
            f.write(matrix.data[i].astype("<f4", copy=False).tobytes())


def _take(buf: bytes, pos: int, n: int, what: str) -> tuple[bytes, int]:
    if pos + n > len(buf):
        raise EmbeddingFormatError(
            f"truncated file: expected {n} more bytes for {what} "
            f"at offset {pos}, only {len(buf) - pos} remain"
        )
    return buf[pos : pos + n], pos + n


def load_embeddings(path: str, normalize: bool = False) -> EmbeddingMatrix:
    """Load an embedding file; optionally L2-normalize rows on the way in.

    load_embeddings(save_embeddings(M)) reproduces M bit-exactly.
    """
    with open(path, "rb") as f:
        buf = f.read()
    magic, pos = _take(buf, 0, 4, "magic")
    if magic != MAGIC:
        raise EmbeddingFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    header, pos = _take(buf, pos, struct.calcsize("<IIQI"), "header")
    version, dim, count, flags = struct.unpack("<IIQI", header)
    if version != VERSION:
        raise EmbeddingFormatError(f"unsupported version {version}")
    keys: list[str] = []
    rows = np.empty((count, dim), dtype=np.float32)
    vec_bytes = 4 * dim
    for i in range(count):
        raw_len, pos = _take(buf, pos, 4, f"key length of record {i}")
        (key_len,) = struct.unpack("<I", raw_len)
        raw_key, pos = _take(buf, pos, key_len, f"key of record {i}")
        raw_vec, pos = _take(buf, pos, vec_bytes, f"vector of record {i}")
        keys.append(raw_key.decode("utf-8"))
        rows[i] = np.frombuffer(raw_vec, dtype="<f4")
    if pos != len(buf):
        raise EmbeddingFormatError(
            f"trailing garbage: file has {len(buf)} bytes, records end at {pos}"
        )
    matrix = EmbeddingMatrix(keys, rows, normalized=bool(flags & FLAG_NORMALIZED))
    if normalize and not matrix.normalized:
        matrix = normalize_rows(matrix)
    return matrix


def load_weights_sidecar(path: str) -> dict:
    """Read the JSON sidecar written next to classifier weight files."""
    with open(str(path) + ".json", encoding="utf-8") as f:
        return json.load(f)


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    """Cosine similarity; raises on dimension mismatch or zero vectors."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise InputError(f"dimension mismatch: {u.shape} vs {v.shape}")
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise ZeroVectorError("cosine similarity undefined for a zero vector")
    return float(np.dot(u, v) / (nu * nv))


def average_normalized(vectors: np.ndarray) -> np.ndarray:
    """L2-normalized mean of a stack of vectors (rows).

    The inputs are averaged as given (callers wanting the unit-sphere mean
    normalize rows first); a zero mean — e.g. two antipodal vectors — has
    no direction and raises DegenerateAverageError.
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.ndim == 1:
        vectors = vectors[None, :]
    if vectors.shape[0] == 0:
        raise InputError("cannot average zero vectors")
    mean = vectors.mean(axis=0)
    norm = np.linalg.norm(mean)
    if norm < 1e-12:
        raise DegenerateAverageError(
            f"mean vector norm {norm:.3e} is too small to normalize"
        )
    return mean / norm
