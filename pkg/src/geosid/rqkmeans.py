"""Residual-quantization tokenizer built on Lloyd's k-means.

Each level clusters the residuals left by the previous level; a POI's
hierarchical code is the sequence of nearest-centroid indices, one per
level. POIs that collide on every level optionally receive an appended
ordinal from a reserved vocabulary so that full codes stay unique.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .embed import EmbeddingTable

log = logging.getLogger(__name__)

# "d" is reserved for dedup-ordinal tokens
LEVEL_LETTERS = "abcefghijklmnopqrstuvwxyz"


@dataclass(frozen=True)
class RqConfig:
    levels: int = 3
    sizes: tuple[int, ...] = (32, 64, 256)
    kmeans_iters: int = 50
    tol: float = 1e-6
    seed: int = 0
    dedup: bool = True

    def __post_init__(self) -> None:
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if isinstance(self.sizes, list):
            object.__setattr__(self, "sizes", tuple(self.sizes))
        if len(self.sizes) != self.levels:
            raise ValueError("sizes length must equal levels")
        if any(s < 2 for s in self.sizes):
            raise ValueError("every codebook size must be >= 2")


@dataclass(frozen=True, eq=False)
class Codebook:
    level: int  # 1-based
    centroids: np.ndarray  # (k, dim) float64

    def __post_init__(self) -> None:
        if self.centroids.ndim != 2:
            raise ValueError("centroids must be a 2-D array")

    @property
    def size(self) -> int:
        return self.centroids.shape[0]


@dataclass(frozen=True)
class SidAssignment:
    sids: dict[str, tuple[int, ...]]
    reverse: dict[tuple[int, ...], tuple[str, ...]]
    residual_norms: tuple[float, ...]
    levels: int

    @property
    def n_dedup(self) -> int:
        """Number of ordinal slots needed to cover every collision group."""
        ordinals = [s[self.levels] for s in self.sids.values() if len(s) > self.levels]
        return max(ordinals) + 1 if ordinals else 0

    @staticmethod
    def from_sids(sids: dict[str, tuple[int, ...]], levels: int,
                  residual_norms: tuple[float, ...] = ()) -> "SidAssignment":
        reverse: dict[tuple[int, ...], list[str]] = {}
        for poi_id in sorted(sids):
            reverse.setdefault(tuple(sids[poi_id]), []).append(poi_id)
        return SidAssignment(
            sids={k: tuple(v) for k, v in sids.items()},
            reverse={k: tuple(v) for k, v in reverse.items()},
            residual_norms=tuple(residual_norms),
            levels=levels,
        )


def kmeans(
    points: np.ndarray,
    k: int,
    iters: int = 50,
    tol: float = 1e-6,
    seed: int = 0,
) -> tuple[np.ndarray, np.ndarray, list[float]]:
    """Lloyd's algorithm with k-means++ seeding.

    Ties in the nearest-centroid assignment break toward the lowest
    centroid index; clusters emptied by an update steal the point that is
    currently farthest from its own centroid. Returns (centroids,
    assignments, objective curve); the curve is the sum of squared
    distances after the initial assignment and after each iteration, and
    is non-increasing.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[0] == 0:
        raise ValueError("points must be a non-empty 2-D array")
    if k < 1:
        raise ValueError("k must be >= 1")
    distinct = np.unique(points, axis=0)
    if k > len(distinct):
        log.warning("k=%d exceeds %d distinct points; reducing", k, len(distinct))
        k = len(distinct)

    rng = np.random.default_rng(seed)
    centroids = _kmeanspp_init(points, k, rng)
    assign = _nearest(points, centroids)
    curve = [_sse(points, centroids, assign)]
    for _ in range(iters):
        centroids = _update_centroids(points, centroids, assign, k)
        new_assign = _nearest(points, centroids)
        new_obj = _sse(points, centroids, new_assign)
        curve.append(new_obj)
        converged = bool(np.array_equal(new_assign, assign))
        prev = curve[-2]
        if prev > 0 and (prev - new_obj) / prev < tol:
            converged = True
        assign = new_assign
        if converged or new_obj == 0.0:
            break
    return centroids, assign, curve


def _kmeanspp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    chosen = [int(rng.integers(0, n))]
    d2 = np.sum((points - points[chosen[0]]) ** 2, axis=1)
    while len(chosen) < k:
        total = d2.sum()
        if total <= 0:
            # remaining mass is zero: pick any point distinct from all chosen
            mask = np.ones(n, dtype=bool)
            for c in chosen:
                mask &= np.any(points != points[c], axis=1)
            idx = int(np.nonzero(mask)[0][0])
        else:
            idx = int(rng.choice(n, p=d2 / total))
        chosen.append(idx)
        d2 = np.minimum(d2, np.sum((points - points[idx]) ** 2, axis=1))
    return points[chosen].copy()


def _nearest(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    d2 = _sq_dists(points, centroids)
    return d2.argmin(axis=1)  # argmin returns the lowest index on ties


def _sq_dists(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    # (n, k) squared Euclidean distances, clipped against negative round-off
    d2 = (
        np.sum(points ** 2, axis=1)[:, None]
        - 2.0 * points @ centroids.T
        + np.sum(centroids ** 2, axis=1)[None, :]
    )
    return np.maximum(d2, 0.0)


def _sse(points: np.ndarray, centroids: np.ndarray, assign: np.ndarray) -> float:
    return float(np.sum((points - centroids[assign]) ** 2))


def _update_centroids(points: np.ndarray, centroids: np.ndarray, assign: np.ndarray, k: int) -> np.ndarray:
    new = centroids.copy()
    counts = np.bincount(assign, minlength=k)
    for c in range(k):
        if counts[c] > 0:
            new[c] = points[assign == c].mean(axis=0)
    empties = [c for c in range(k) if counts[c] == 0]
    if empties:
        assign = assign.copy()
        counts = counts.copy()
        for c in empties:
            # steal the point farthest from its (updated) centroid among
            # clusters that can spare one; lowest index wins ties
            dists = np.sum((points - new[assign]) ** 2, axis=1)
            dists[counts[assign] < 2] = -1.0
            victim = int(dists.argmax())
            if dists[victim] < 0:
                continue  # nothing to steal; k <= distinct points makes this unreachable
            counts[assign[victim]] -= 1
            assign[victim] = c
            counts[c] = 1
            new[c] = points[victim]
    return new


def assign_nearest(point: np.ndarray, cb: Codebook) -> int:
    point = np.asarray(point, dtype=np.float64)
    if point.shape != (cb.centroids.shape[1],):
        raise ValueError(f"dim mismatch: point {point.shape} vs codebook dim {cb.centroids.shape[1]}")
    d2 = np.sum((cb.centroids - point) ** 2, axis=1)
    return int(d2.argmin())


def rq_tokenize(table: EmbeddingTable, cfg: RqConfig) -> tuple[list[Codebook], SidAssignment]:
    """Quantize every embedding row level by level.

    Level 1 clusters the embeddings themselves; each subsequent level
    clusters what the previous levels left unexplained. The per-level mean
    residual norm is recorded after each subtraction. With dedup on, POIs
    sharing a full code get ordinals appended in poi_id order.
    """
    residual = table.matrix.astype(np.float64)
    codes = np.zeros((len(table.ids), cfg.levels), dtype=np.int64)
    codebooks: list[Codebook] = []
    norms: list[float] = []
    for level in range(cfg.levels):
        centroids, assign, _ = kmeans(
            residual, cfg.sizes[level], iters=cfg.kmeans_iters, tol=cfg.tol,
            seed=cfg.seed + level,
        )
        codebooks.append(Codebook(level=level + 1, centroids=centroids))
        codes[:, level] = assign
        residual = residual - centroids[assign]
        norms.append(float(np.mean(np.linalg.norm(residual, axis=1))))

    sids: dict[str, tuple[int, ...]] = {
        poi_id: tuple(int(c) for c in codes[i]) for i, poi_id in enumerate(table.ids)
    }
    if cfg.dedup:
        groups: dict[tuple[int, ...], list[str]] = {}
        for poi_id in sorted(sids):
            groups.setdefault(sids[poi_id], []).append(poi_id)
        n_collided = sum(len(g) for g in groups.values() if len(g) > 1)
        log.info("sid collisions: %d of %d POIs (%.2f%%)",
                 n_collided, len(sids), 100.0 * n_collided / max(1, len(sids)))
        for code, members in groups.items():
            if len(members) > 1:
                for ordinal, poi_id in enumerate(members):
                    sids[poi_id] = code + (ordinal,)
    return codebooks, SidAssignment.from_sids(sids, levels=cfg.levels, residual_norms=tuple(norms))


def sid_to_string(sid: tuple[int, ...] | list[int], levels: int = 3) -> str:
    """Render a code list as <a_i><b_j>... with any ordinal as <d_k>."""
    parts = []
    for pos, code in enumerate(sid):
        letter = LEVEL_LETTERS[pos] if pos < levels else "d"
        parts.append(f"<{letter}_{code}>")
    return "".join(parts)


def parse_sid_string(s: str, levels: int = 3) -> tuple[int, ...]:
    tokens = re.findall(r"<([a-z])_(\d+)>", s)
    if not tokens or "".join(f"<{a}_{b}>" for a, b in tokens) != s:
        raise ValueError(f"unparseable SID string: {s!r}")
    out = []
    for pos, (letter, num) in enumerate(tokens):
        expected = LEVEL_LETTERS[pos] if pos < levels else "d"
        if letter != expected:
            raise ValueError(f"unexpected level letter {letter!r} at position {pos} in {s!r}")
        out.append(int(num))
    return tuple(out)


def save_sids(codebooks: list[Codebook], assignment: SidAssignment, cfg: RqConfig, path: str | Path) -> None:
    """Persist sizes, codebooks (9 significant digits) and SID mapping."""
    payload = {
        "sizes": [cb.size for cb in codebooks],
        "residual_norms": [float(f"{x:.9g}") for x in assignment.residual_norms],
        "codebooks": [[[float(f"{v:.9g}") for v in row] for row in cb.centroids] for cb in codebooks],
        "sids": {poi_id: list(assignment.sids[poi_id]) for poi_id in sorted(assignment.sids)},
    }
    Path(path).write_text(json.dumps(payload), encoding="utf-8")


def load_sids(path: str | Path) -> tuple[list[Codebook], SidAssignment]:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    codebooks = [
        Codebook(level=i + 1, centroids=np.asarray(rows, dtype=np.float64))
        for i, rows in enumerate(payload["codebooks"])
    ]
    sids = {poi_id: tuple(codes) for poi_id, codes in payload["sids"].items()}
    assignment = SidAssignment.from_sids(
        sids, levels=len(codebooks), residual_norms=tuple(payload.get("residual_norms", ())),
    )
    return codebooks, assignment
