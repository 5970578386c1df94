"""Contrastive refinement of the embedding table over co-visit pairs.

The loss is the temperature-scaled softmax objective over one positive
and a set of negatives; embedding rows are free parameters optimized by
plain gradient descent, which keeps every update reproducible and the
analytic gradients checkable against finite differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .embed import EmbeddingTable
from .pairs import CoVisitPair


@dataclass(frozen=True)
class P2PTrainConfig:
    tau: float = 0.07
    lr: float = 0.05
    epochs: int = 30
    batch: int = 64
    n_extra: int = 16
    renormalize: bool = True
    seed: int = 0

    def __post_init__(self) -> None:
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.batch < 2:
            raise ValueError("batch must be >= 2")


def nce_loss(anchor: np.ndarray, positive: np.ndarray, negatives: list[np.ndarray], tau: float) -> float:
    """-log softmax probability of the positive among {positive} + negatives,
    with scores dot(anchor, x) / tau. Stabilized by max-shift; exactly 0
    when there are no negatives.
    """
    scores = _scores(anchor, positive, negatives, tau)
    m = float(np.max(scores))
    return float(m + math.log(np.sum(np.exp(scores - m))) - scores[0])


def nce_grad(
    anchor: np.ndarray, positive: np.ndarray, negatives: list[np.ndarray], tau: float
) -> tuple[np.ndarray, np.ndarray, list[np.ndarray]]:
    """Closed-form gradients of nce_loss w.r.t. anchor, positive and each
    negative. With softmax weights w over the candidates:
      d/d anchor   = (sum_k w_k v_k - positive) / tau
      d/d positive = (w_pos - 1) * anchor / tau
      d/d neg_k    = w_k * anchor / tau
    """
    scores = _scores(anchor, positive, negatives, tau)
    anchor = np.asarray(anchor, dtype=np.float64)
    if not negatives:
        zero = np.zeros_like(anchor)
        return zero, zero.copy(), []
    shifted = scores - np.max(scores)
    w = np.exp(shifted)
    w /= w.sum()
    candidates = np.stack([np.asarray(positive, dtype=np.float64)]
                          + [np.asarray(n, dtype=np.float64) for n in negatives])
    g_anchor = (w @ candidates - candidates[0]) / tau
    g_positive = (w[0] - 1.0) * anchor / tau
    g_negatives = [w[k + 1] * anchor / tau for k in range(len(negatives))]
    return g_anchor, g_positive, g_negatives


def _scores(anchor, positive, negatives, tau: float) -> np.ndarray:
    if tau <= 0:
        raise ValueError("tau must be positive")
    anchor = np.asarray(anchor, dtype=np.float64)
    cands = [np.asarray(positive, dtype=np.float64)] + [np.asarray(n, dtype=np.float64) for n in negatives]
    for c in cands:
        if c.shape != anchor.shape:
            raise ValueError(f"dim mismatch: {c.shape} vs {anchor.shape}")
    return np.array([float(anchor @ c) / tau for c in cands])


def train_p2p(
    table: EmbeddingTable, pairs: list[CoVisitPair], cfg: P2PTrainConfig
) -> tuple[EmbeddingTable, list[float]]:
    """Gradient descent on the mean batch contrastive loss over positive
    pairs. Negatives for each anchor are the other positives in the batch
    plus n_extra uniformly sampled rows; rows are re-projected to unit
    norm after every step when renormalize is set.

    Returns the refined table and the per-epoch mean loss curve.
    """
    if not pairs:
        raise ValueError("empty pair list")
    for p in pairs:
        if p.i not in table or p.j not in table:
            raise KeyError(f"pair POI missing from embedding table: ({p.i}, {p.j})")
    mat = table.matrix.astype(np.float64)
    n_rows = mat.shape[0]
    pair_idx = np.array([[table.index_of(p.i), table.index_of(p.j)] for p in pairs], dtype=np.int64)
    rng = np.random.default_rng(cfg.seed)
    curve: list[float] = []
    for _ in range(cfg.epochs):
        order = rng.permutation(len(pairs))
        epoch_losses: list[float] = []
        for start in range(0, len(order), cfg.batch):
            batch = pair_idx[order[start:start + cfg.batch]]
            b = len(batch)
            if b - 1 + cfg.n_extra == 0:
                raise ValueError("empty negative set: batch of one pair and n_extra = 0")
            extra = rng.integers(0, n_rows, size=cfg.n_extra) if cfg.n_extra else np.empty(0, dtype=np.int64)
            anchors = batch[:, 0]
            positives = batch[:, 1]
            grad = np.zeros_like(mat)
            total = 0.0
            for r in range(b):
                pool = np.concatenate([positives[:r], positives[r + 1:], extra])
                # a negative that happens to be the anchor or positive row would
                # contrast the pair against itself; drop those occurrences
                neg_rows = pool[(pool != anchors[r]) & (pool != positives[r])]
                a_vec = mat[anchors[r]]
                p_vec = mat[positives[r]]
                if len(neg_rows) == 0:
                    continue  # loss is identically zero without negatives
                scores = np.concatenate([[a_vec @ p_vec], mat[neg_rows] @ a_vec]) / cfg.tau
                m = scores.max()
                w = np.exp(scores - m)
                w /= w.sum()
                total += float(m + math.log(np.exp(scores - m).sum()) - scores[0])
                cands = np.concatenate([[positives[r]], neg_rows])
                cand_vecs = np.vstack([p_vec[None, :], mat[neg_rows]])
                grad[anchors[r]] += (w @ cand_vecs - p_vec) / cfg.tau
                np.add.at(grad, cands, np.outer(w, a_vec) / cfg.tau)
                grad[positives[r]] -= a_vec / cfg.tau
            mat -= cfg.lr * grad / b
            if cfg.renormalize:
                touched = np.unique(np.concatenate([anchors, positives, extra]))
                norms = np.linalg.norm(mat[touched], axis=1, keepdims=True)
                norms[norms == 0.0] = 1.0
                mat[touched] /= norms
            epoch_losses.append(total / b)
        curve.append(float(np.mean(epoch_losses)))
    normalized = table.normalized and (cfg.renormalize or cfg.epochs == 0)
    refined = table.with_matrix(mat.astype(np.float32), normalized=normalized)
    return refined, curve
