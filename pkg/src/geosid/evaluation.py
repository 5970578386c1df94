"""Ranking metrics, codebook cohesion, and baseline/export utilities.

Relevance is binary with a single ground-truth POI per prediction, so the
ideal DCG is 1 and NDCG@K reduces to the discounted reciprocal log rank.
Cohesion measures how semantically and geographically tight the POIs
sharing a code prefix are, per level.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import Dataset
from .embed import EmbeddingTable
from .geo import haversine_km
from .rqkmeans import SidAssignment, sid_to_string


@dataclass(frozen=True)
class RankedPrediction:
    target: str
    ranked: tuple[str, ...]

    def __post_init__(self) -> None:
        if isinstance(self.ranked, list):
            object.__setattr__(self, "ranked", tuple(self.ranked))
        if not self.ranked:
            raise ValueError("ranked list must be non-empty")
        if len(set(self.ranked)) != len(self.ranked):
            raise ValueError("ranked list contains duplicates")


@dataclass(frozen=True)
class CohesionLevel:
    similarity: float
    distance_km: float
    n_groups: int


@dataclass(frozen=True)
class CohesionReport:
    levels: tuple[CohesionLevel, ...]


def recall_at_k(preds: list[RankedPrediction], k: int) -> float:
    """Fraction of predictions whose target appears in the first k."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if not preds:
        raise ValueError("no predictions")
    hits = sum(1 for p in preds if p.target in p.ranked[:k])
    return hits / len(preds)


def ndcg_at_k(preds: list[RankedPrediction], k: int) -> float:
    """Mean 1/log2(1+rank) over predictions with the target in the top k."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if not preds:
        raise ValueError("no predictions")
    total = 0.0
    for p in preds:
        for rank, poi in enumerate(p.ranked[:k], start=1):
            if poi == p.target:
                total += 1.0 / math.log2(1.0 + rank)
                break
    return total / len(preds)


def popularity_baseline(ds: Dataset, k: int) -> list[RankedPrediction]:
    """Rank POIs by train-split visit count (ties by id) and predict that
    same list for every test interaction."""
    if ds.split is None:
        raise ValueError("dataset has no split tags")
    counts: dict[str, int] = {}
    for inter in ds.tagged("train"):
        counts[inter.poi_id] = counts.get(inter.poi_id, 0) + 1
    ranked = tuple(sorted(ds.pois, key=lambda pid: (-counts.get(pid, 0), pid))[:k])
    return [RankedPrediction(target=i.poi_id, ranked=ranked) for i in ds.tagged("test")]


def cohesion(sids: SidAssignment, table: EmbeddingTable, ds: Dataset,
             seed: int = 0, pair_cap: int = 200) -> CohesionReport:
    """Per level, the mean pairwise cosine similarity and haversine km
    within each group of POIs sharing a code prefix of that length,
    averaged (unweighted) over groups with at least 2 members.

    Groups with more than `pair_cap` members are subsampled to `pair_cap`
    pairs with a generator keyed to the group's prefix, so input order
    never changes the result.
    """
    report: list[CohesionLevel] = []
    for level in range(1, sids.levels + 1):
        groups: dict[tuple[int, ...], list[str]] = {}
        for poi_id in sorted(sids.sids):
            groups.setdefault(sids.sids[poi_id][:level], []).append(poi_id)
        sims: list[float] = []
        dists: list[float] = []
        for prefix in sorted(groups):
            members = groups[prefix]
            if len(members) < 2:
                continue
            pairs = _group_pairs(prefix, len(members), seed, pair_cap)
            vecs = np.stack([table.row(m) for m in members]).astype(np.float64)
            norms = np.linalg.norm(vecs, axis=1)
            norms[norms == 0.0] = 1.0
            unit = vecs / norms[:, None]
            points = [ds.pois[m].point for m in members]
            sims.append(float(np.mean([float(unit[a] @ unit[b]) for a, b in pairs])))
            dists.append(float(np.mean([haversine_km(points[a], points[b]) for a, b in pairs])))
        if sims:
            report.append(CohesionLevel(
                similarity=float(np.mean(sims)),
                distance_km=float(np.mean(dists)),
                n_groups=len(sims),
            ))
        else:
            report.append(CohesionLevel(similarity=float("nan"), distance_km=float("nan"), n_groups=0))
    return CohesionReport(levels=tuple(report))


def _group_pairs(prefix: tuple[int, ...], n: int, seed: int, pair_cap: int) -> list[tuple[int, int]]:
    n_pairs = n * (n - 1) // 2
    if n <= pair_cap:
        return [(a, b) for a in range(n) for b in range(a + 1, n)]
    digest = hashlib.blake2b(repr(prefix).encode(), key=seed.to_bytes(8, "little", signed=True),
                             digest_size=8).digest()
    rng = np.random.default_rng(int.from_bytes(digest, "little"))
    chosen: set[int] = set()
    while len(chosen) < pair_cap:
        chosen.add(int(rng.integers(0, n_pairs)))
    return [_unrank_pair(c, n) for c in sorted(chosen)]


def _unrank_pair(code: int, n: int) -> tuple[int, int]:
    # pairs (a, b), a < b, ranked lexicographically
    a = 0
    remaining = code
    row = n - 1
    while remaining >= row:
        remaining -= row
        a += 1
        row -= 1
    return a, a + 1 + remaining


def export_embeddings(table: EmbeddingTable, sids: SidAssignment, path: str | Path) -> None:
    """TSV of poi_id, first-level code, full SID string, then the vector
    components at 9 significant digits (for external projection/plots)."""
    with Path(path).open("w", encoding="utf-8") as fh:
        fh.write("poi_id\tcode1\tsid\t" + "\t".join(f"v{i}" for i in range(table.dim)) + "\n")
        for poi_id in table.ids:
            sid = sids.sids[poi_id]
            vals = "\t".join(f"{x:.9g}" for x in table.row(poi_id))
            fh.write(f"{poi_id}\t{sid[0]}\t{sid_to_string(sid, sids.levels)}\t{vals}\n")
