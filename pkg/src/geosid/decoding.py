"""Trie-constrained beam search over hierarchical SID codes.

Decoding only ever follows prefixes of assigned SIDs, so every generated
code sequence resolves to a real POI. The single-prompt `beam_search`
recomputes the full sequence at every step and breaks ties
lexicographically, making it directly comparable against exhaustive
enumeration; `beam_search_many` batches prompts of equal length and
reuses cached attention state for throughput.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .model import TinyDecoder
from .rqkmeans import SidAssignment

log = logging.getLogger(__name__)


@dataclass
class _TrieNode:
    children: dict[int, "_TrieNode"] = field(default_factory=dict)
    poi_ids: tuple[str, ...] = ()

    @property
    def terminal(self) -> bool:
        return bool(self.poi_ids)


class SidTrie:
    """Prefix tree over assigned SID code sequences."""

    def __init__(self, levels: int):
        self.root = _TrieNode()
        self.levels = levels
        self.n_sids = 0

    def insert(self, sid: tuple[int, ...], poi_ids: tuple[str, ...]) -> None:
        node = self.root
        for code in sid:
            if node.terminal:
                raise ValueError(f"SID set is not prefix-free at {sid}")
            node = node.children.setdefault(code, _TrieNode())
        if node.children:
            raise ValueError(f"SID set is not prefix-free at {sid}")
        node.poi_ids = tuple(poi_ids)
        self.n_sids += 1

    def contains(self, sid: tuple[int, ...]) -> bool:
        node = self._walk(sid)
        return node is not None and node.terminal

    def _walk(self, prefix: tuple[int, ...]) -> _TrieNode | None:
        node = self.root
        for code in prefix:
            node = node.children.get(code)
            if node is None:
                return None
        return node

    def children_of(self, prefix: tuple[int, ...]) -> list[int]:
        node = self._walk(prefix)
        return sorted(node.children) if node else []

    @property
    def n_nodes(self) -> int:
        def count(node: _TrieNode) -> int:
            return len(node.children) + sum(count(c) for c in node.children.values())
        return count(self.root)

    def all_sids(self) -> list[tuple[int, ...]]:
        out: list[tuple[int, ...]] = []

        def walk(node: _TrieNode, prefix: tuple[int, ...]) -> None:
            if node.terminal:
                out.append(prefix)
            for code in sorted(node.children):
                walk(node.children[code], prefix + (code,))

        walk(self.root, ())
        return out


def build_sid_trie(sids: SidAssignment) -> SidTrie:
    if not sids.sids:
        raise ValueError("empty SID assignment")
    trie = SidTrie(levels=sids.levels)
    for sid in sorted(sids.reverse):
        trie.insert(sid, sids.reverse[sid])
    return trie


def _code_token_id(model: TinyDecoder, depth: int, code: int, levels: int) -> int:
    if depth < levels:
        return model.vocab.code_id(depth, code)
    return model.vocab.dedup_id(code)


def clip_prompt(prompt: list[int], model: TinyDecoder, levels: int) -> list[int]:
    """Drop the oldest prompt tokens so the generated codes (plus a dedup
    ordinal) still fit within the model's positional range."""
    budget = model.max_seq - levels - 1
    return prompt[-budget:]


def beam_search(model: TinyDecoder, prompt: list[int], beam_width: int, k: int,
                trie: SidTrie) -> list[tuple[tuple[int, ...], float]]:
    """Top-k complete SIDs by summed token log-probability.

    Scores accumulate log p(code token | prefix) for the code positions
    only. Ties break toward lexicographically smaller code sequences. If
    fewer than k SIDs exist, all of them come back (with a warning).
    """
    if not (beam_width >= k >= 1):
        raise ValueError("need beam_width >= k >= 1")
    if trie.n_sids == 0:
        raise ValueError("empty trie")
    beams: list[tuple[tuple[int, ...], float]] = [((), 0.0)]
    finished: list[tuple[tuple[int, ...], float]] = []
    while beams:
        expansions: list[tuple[tuple[int, ...], float]] = []
        for codes, score in beams:
            ids = prompt + [
                _code_token_id(model, d, c, trie.levels) for d, c in enumerate(codes)
            ]
            with torch.no_grad():
                logits, _ = model.forward(torch.tensor([ids], dtype=torch.long))
                logp = F.log_softmax(logits[0, -1].double(), dim=-1)
            for code in trie.children_of(codes):
                tok = _code_token_id(model, len(codes), code, trie.levels)
                expansions.append((codes + (code,), score + float(logp[tok])))
        expansions.sort(key=lambda e: (-e[1], e[0]))
        beams = []
        for codes, score in expansions:
            node = trie._walk(codes)
            if node.terminal:
                finished.append((codes, score))
            elif len(beams) < beam_width:
                beams.append((codes, score))
    finished.sort(key=lambda e: (-e[1], e[0]))
    if k > len(finished):
        log.warning("requested top-%d but only %d SIDs exist", k, len(finished))
    return finished[:k]


def beam_search_many(model: TinyDecoder, prompts: list[list[int]], beam_width: int, k: int,
                     trie: SidTrie, chunk: int = 64) -> list[list[tuple[tuple[int, ...], float]]]:
    """Batched trie-constrained beam search (answers align with prompts).

    Prompts are grouped by length so a group shares one attention-cache
    forward pass; generation then advances one token per step per live
    beam. Scores match `beam_search` up to float accumulation order.
    """
    if not (beam_width >= k >= 1):
        raise ValueError("need beam_width >= k >= 1")
    results: list[list[tuple[tuple[int, ...], float]] | None] = [None] * len(prompts)
    by_len: dict[int, list[int]] = {}
    for idx, p in enumerate(prompts):
        by_len.setdefault(len(p), []).append(idx)
    for length in sorted(by_len):
        group = by_len[length]
        for start in range(0, len(group), chunk):
            sub = group[start:start + chunk]
            decoded = _beam_chunk(model, [prompts[i] for i in sub], beam_width, trie)
            for local, idx in enumerate(sub):
                results[idx] = decoded[local][:k]
    if any(len(r) < k for r in results):
        log.warning("some prompts returned fewer than k=%d SIDs", k)
    return results


def _beam_chunk(model: TinyDecoder, prompts: list[list[int]], beam_width: int,
                trie: SidTrie) -> list[list[tuple[tuple[int, ...], float]]]:
    n = len(prompts)
    with torch.no_grad():
        logits, past = model.forward(torch.tensor(prompts, dtype=torch.long), return_kv=True)
        logp = F.log_softmax(logits[:, -1].double(), dim=-1).numpy()
    # beams[p] = list of (codes, score, cache_row)
    beams: list[list[tuple[tuple[int, ...], float, int]]] = [[((), 0.0, p)] for p in range(n)]
    finished: list[list[tuple[tuple[int, ...], float]]] = [[] for _ in range(n)]
    while any(beams):
        candidates: list[list[tuple[tuple[int, ...], float, int]]] = [[] for _ in range(n)]
        for p in range(n):
            for codes, score, row in beams[p]:
                for code in trie.children_of(codes):
                    tok = _code_token_id(model, len(codes), code, trie.levels)
                    candidates[p].append((codes + (code,), score + float(logp[row][tok]), row))
        next_rows: list[tuple[int, int, int]] = []  # (prompt, parent cache row, new token)
        new_beams: list[list[tuple[tuple[int, ...], float, int]]] = [[] for _ in range(n)]
        for p in range(n):
            candidates[p].sort(key=lambda e: (-e[1], e[0]))
            for codes, score, row in candidates[p]:
                if trie._walk(codes).terminal:
                    finished[p].append((codes, score))
                elif len(new_beams[p]) < beam_width:
                    tok = _code_token_id(model, len(codes) - 1, codes[-1], trie.levels)
                    new_beams[p].append((codes, score, len(next_rows)))
                    next_rows.append((p, row, tok))
        if not next_rows:
            break
        gather = torch.tensor([r for _, r, _ in next_rows], dtype=torch.long)
        step_past = [(kv[0][gather], kv[1][gather]) for kv in past]
        step_tokens = torch.tensor([[t for _, _, t in next_rows]], dtype=torch.long).T
        with torch.no_grad():
            logits, past = model.forward(step_tokens, past=step_past, return_kv=True)
            logp = F.log_softmax(logits[:, -1].double(), dim=-1).numpy()
        beams = new_beams
    for p in range(n):
        finished[p].sort(key=lambda e: (-e[1], e[0]))
    return finished
