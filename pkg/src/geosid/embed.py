"""POI embedding tables: a seeded feature-hash embedder and a binary
loader for externally computed vectors.

The hash embedder maps each attribute token to a signed coordinate of the
output vector via a keyed 64-bit hash, so POIs sharing tokens land near
each other without any learned encoder. Externally trained embeddings can
be swapped in through the same table type.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import Dataset, featurize_poi

_MAGIC = b"GEMB"
_VERSION = 1


@dataclass(frozen=True, eq=False)
class EmbeddingTable:
    dim: int
    ids: tuple[str, ...]
    matrix: np.ndarray  # (len(ids), dim) float32
    normalized: bool

    def __post_init__(self) -> None:
        if self.matrix.shape != (len(self.ids), self.dim):
            raise ValueError("matrix shape does not match ids/dim")
        object.__setattr__(self, "_index", {pid: i for i, pid in enumerate(self.ids)})

    def row(self, poi_id: str) -> np.ndarray:
        return self.matrix[self._index[poi_id]]

    def index_of(self, poi_id: str) -> int:
        return self._index[poi_id]

    def __contains__(self, poi_id: str) -> bool:
        return poi_id in self._index

    def with_matrix(self, matrix: np.ndarray, normalized: bool) -> "EmbeddingTable":
        return EmbeddingTable(dim=self.dim, ids=self.ids, matrix=matrix, normalized=normalized)


def _token_hash(token: str, seed: int) -> int:
    key = seed.to_bytes(8, "little", signed=True)
    digest = hashlib.blake2b(token.encode("utf-8"), key=key, digest_size=8).digest()
    return int.from_bytes(digest, "little")


def hash_embed(ds: Dataset, dim: int = 64, seed: int = 0) -> EmbeddingTable:
    """Deterministic signed-count feature-hash embedding, L2-normalized.

    Each token hashes to (coordinate = h mod dim, sign from bit 63); the
    signed counts are accumulated and the row normalized to unit length.
    """
    if dim < 8:
        raise ValueError(f"dim must be >= 8, got {dim}")
    ids = tuple(sorted(ds.pois))
    matrix = np.zeros((len(ids), dim), dtype=np.float64)
    for i, poi_id in enumerate(ids):
        for token in featurize_poi(ds.pois[poi_id]):
            h = _token_hash(token, seed)
            sign = 1.0 if (h >> 63) & 1 == 0 else -1.0
            matrix[i, h % dim] += sign
        norm = float(np.linalg.norm(matrix[i]))
        if norm == 0.0:
            matrix[i, 0] = 1.0  # all contributions cancelled; pin a unit direction
        else:
            matrix[i] /= norm
    return EmbeddingTable(dim=dim, ids=ids, matrix=matrix.astype(np.float32), normalized=True)


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dim mismatch: {a.shape} vs {b.shape}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine undefined for zero-norm input")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def save_embeddings(table: EmbeddingTable, path: str | Path) -> None:
    """Write the GEMB binary format (little-endian, float32 rows)."""
    with Path(path).open("wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<IIIB", _VERSION, table.dim, len(table.ids), 1 if table.normalized else 0))
        for i, poi_id in enumerate(table.ids):
            raw = poi_id.encode("utf-8")
            if len(raw) > 0xFFFF:
                raise ValueError(f"poi id too long: {poi_id!r}")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(table.matrix[i].astype("<f4").tobytes())


def load_embeddings(path: str | Path, ds: Dataset) -> EmbeddingTable:
    """Read a GEMB file, requiring a row for every dataset POI."""
    data = Path(path).read_bytes()
    if data[:4] != _MAGIC:
        raise ValueError(f"bad magic {data[:4]!r}, expected {_MAGIC!r}")
    version, dim, count, norm_flag = struct.unpack_from("<IIIB", data, 4)
    if version != _VERSION:
        raise ValueError(f"unsupported embedding file version {version}")
    offset = 4 + 13
    rows: dict[str, np.ndarray] = {}
    for _ in range(count):
        if offset + 2 > len(data):
            raise ValueError("truncated embedding file")
        (id_len,) = struct.unpack_from("<H", data, offset)
        offset += 2
        poi_id = data[offset:offset + id_len].decode("utf-8")
        offset += id_len
        end = offset + 4 * dim
        if end > len(data):
            raise ValueError(f"truncated embedding row for {poi_id!r}")
        rows[poi_id] = np.frombuffer(data[offset:end], dtype="<f4").copy()
        offset += 4 * dim
    missing = sorted(set(ds.pois) - set(rows))
    if missing:
        raise ValueError(f"embedding file missing POIs: {', '.join(missing[:10])}")
    ids = tuple(sorted(ds.pois))
    matrix = np.stack([rows[pid] for pid in ids]).astype(np.float32)
    return EmbeddingTable(dim=dim, ids=ids, matrix=matrix, normalized=bool(norm_flag))
