"""Geo-constrained co-visit pair mining.

Pairs of POIs that appear close together in the same user's visit
sequence are counted, scored with Swing similarity (which damps pairs
whose common users share many items, i.e. popularity), and filtered to a
hard geographic radius. The survivors serve as contrastive positives.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .corpus import Dataset
from .geo import haversine_km


@dataclass(frozen=True)
class PairMiningConfig:
    window: int = 5
    min_count: int = 2
    alpha: float = 1.0
    max_km: float = 3.0
    seed: int = 0
    top_k_per_poi: int | None = None

    def __post_init__(self) -> None:
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if self.max_km <= 0:
            raise ValueError("max_km must be positive")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")


@dataclass(frozen=True)
class CoVisitPair:
    i: str
    j: str
    co_count: int
    swing: float
    dist_km: float

    def __post_init__(self) -> None:
        if self.i >= self.j:
            raise ValueError("pair ids must satisfy i < j")


def train_sequences(ds: Dataset) -> dict[str, list[str]]:
    """Per-user POI id sequences restricted to the train split."""
    if ds.split is None:
        raise ValueError("dataset has no split tags; run temporal_split first")
    seqs: dict[str, list[str]] = {}
    for idx, inter in ds.iter_interactions():
        if ds.split[idx] == "train":
            seqs.setdefault(inter.user_id, []).append(inter.poi_id)
    return seqs


def user_item_index(ds: Dataset) -> dict[str, set[str]]:
    """user -> set of train-split POIs visited."""
    return {u: set(seq) for u, seq in train_sequences(ds).items()}


def mine_covisits(ds: Dataset, cfg: PairMiningConfig) -> list[tuple[str, str, int]]:
    """Count unordered POI pairs co-occurring within `window` sequence
    positions of the train-split trajectories; drop counts below min_count.
    """
    seqs = train_sequences(ds)
    if not any(seqs.values()):
        raise ValueError("no train-split interactions to mine")
    counts: dict[tuple[str, str], int] = {}
    for user in sorted(seqs):
        seq = seqs[user]
        for s in range(len(seq)):
            for t in range(s + 1, min(s + cfg.window + 1, len(seq))):
                if seq[s] == seq[t]:
                    continue
                key = (seq[s], seq[t]) if seq[s] < seq[t] else (seq[t], seq[s])
                counts[key] = counts.get(key, 0) + 1
    return sorted((i, j, c) for (i, j), c in counts.items() if c >= cfg.min_count)


def swing_score(i: str, j: str, user_items: dict[str, set[str]], alpha: float = 1.0) -> float:
    """Swing similarity: sum over unordered pairs of common users (u, v)
    of 1 / (alpha + |I_u intersect I_v|). Zero with fewer than 2 common users.
    """
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    common = sorted(u for u, items in user_items.items() if i in items and j in items)
    score = 0.0
    for a in range(len(common)):
        items_a = user_items[common[a]]
        for b in range(a + 1, len(common)):
            overlap = len(items_a & user_items[common[b]])
            score += 1.0 / (alpha + overlap)
    return score


def filter_pairs(
    pairs: list[tuple[str, str, int]], ds: Dataset, cfg: PairMiningConfig
) -> list[CoVisitPair]:
    """Keep pairs within max_km whose swing is positive; sort by swing
    descending (ties by ids). An optional per-POI cap keeps only each
    POI's strongest partners.
    """
    index = user_item_index(ds)
    out: list[CoVisitPair] = []
    for i, j, count in pairs:
        if i not in ds.pois or j not in ds.pois:
            raise KeyError(f"unknown poi id in pair ({i}, {j})")
        dist = haversine_km(ds.pois[i].point, ds.pois[j].point)
        if dist > cfg.max_km:
            continue
        s = swing_score(i, j, index, cfg.alpha)
        if s <= 0.0:
            continue
        out.append(CoVisitPair(i=i, j=j, co_count=count, swing=s, dist_km=dist))
    out.sort(key=lambda p: (-p.swing, p.i, p.j))
    if cfg.top_k_per_poi is not None:
        kept: list[CoVisitPair] = []
        degree: dict[str, int] = {}
        for p in out:
            if degree.get(p.i, 0) < cfg.top_k_per_poi and degree.get(p.j, 0) < cfg.top_k_per_poi:
                kept.append(p)
                degree[p.i] = degree.get(p.i, 0) + 1
                degree[p.j] = degree.get(p.j, 0) + 1
        out = kept
    return out


def mine_pairs(ds: Dataset, cfg: PairMiningConfig) -> list[CoVisitPair]:
    """Full mining pass: co-occurrence counts, swing scoring, geo filter."""
    return filter_pairs(mine_covisits(ds, cfg), ds, cfg)


def save_pairs(pairs: list[CoVisitPair], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        fh.write("i\tj\tco_count\tswing\tdist_km\n")
        for p in pairs:
            fh.write(f"{p.i}\t{p.j}\t{p.co_count}\t{p.swing:.6f}\t{p.dist_km:.3f}\n")


def load_pairs(path: str | Path) -> list[CoVisitPair]:
    out: list[CoVisitPair] = []
    with Path(path).open("r", encoding="utf-8") as fh:
        header = fh.readline()
        if not header.startswith("i\tj\t"):
            raise ValueError(f"unrecognized pairs file header: {header!r}")
        for line in fh:
            i, j, count, swing, dist = line.rstrip("\n").split("\t")
            out.append(CoVisitPair(i=i, j=j, co_count=int(count), swing=float(swing), dist_km=float(dist)))
    return out
