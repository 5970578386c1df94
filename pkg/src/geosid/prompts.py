"""Prompt and corpus construction for the decoder.

Grounding (CPT) examples interleave SID codes with the attributes they
stand for, in four shapes: user trajectories, structured alignment, a
description sentence, and question/answer. Task (SFT) examples carry a
next-POI prompt with the loss restricted to the target SID. Histories
render newest-first; storage order stays ascending.
"""

from __future__ import annotations

import logging
import time
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .corpus import Dataset, Interaction
from .model import TrainingExample
from .rqkmeans import SidAssignment
from .vocab import Vocab

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SftConfig:
    history_len: int = 32  # most recent interactions rendered into the prompt
    epochs: int = 3
    lr: float = 0.1
    batch: int = 64
    seed: int = 0

    def __post_init__(self) -> None:
        if self.history_len < 1:
            raise ValueError("history_len must be >= 1")


def hour_token(ts: int) -> str:
    return f"HOUR:{time.gmtime(ts).tm_hour:02d}"


def weekday_token(ts: int) -> str:
    return f"WD:{time.gmtime(ts).tm_wday}"


def profile_tokens(ds: Dataset, user_id: str) -> list[str]:
    """Long-term summary of one user's train-split history: top-3
    categories, top-3 geohash-5 cells, and the modal hour bucket."""
    inters = ds.user_interactions(user_id, tag="train" if ds.split else None)
    if not inters:
        return []
    cats = Counter(ds.pois[i.poi_id].category for i in inters)
    cells = Counter(ds.pois[i.poi_id].geohash[:5] for i in inters)
    hours = Counter(time.gmtime(i.timestamp).tm_hour for i in inters)
    top = lambda c, n: [k for k, _ in sorted(c.items(), key=lambda kv: (-kv[1], kv[0]))[:n]]
    tokens = [f"CAT:{c}" for c in top(cats, 3)]
    tokens += [f"GEO:{g}" for g in top(cells, 3)]
    tokens += [f"HOUR:{h:02d}" for h in top(hours, 1)]
    return tokens


def history_entry_tokens(inter: Interaction, sids: SidAssignment, vocab: Vocab) -> list[int]:
    ids = vocab.encode_many([hour_token(inter.timestamp), weekday_token(inter.timestamp),
                             f"ACT:{inter.action}"])
    ids += vocab.sid_ids(sids.sids[inter.poi_id])
    return ids


def _alignment_attr_tokens(poi) -> list[str]:
    """Template-2 attributes: name, category, then address."""
    return ([f"NAME:{w}" for w in poi.name.split()]
            + ([f"CAT:{poi.category}"] if poi.category else [])
            + [f"ADDR:{w}" for w in poi.address.split()])


def _description_attr_tokens(poi) -> list[str]:
    return ([f"CAT:{poi.category}"] if poi.category else []) \
        + [f"NAME:{w}" for w in poi.name.split()] \
        + [f"{k.upper()}:{v}" for k, v in poi.extras]


def build_cpt_corpus(ds: Dataset, sids: SidAssignment, vocab: Vocab, seed: int = 0,
                     max_len: int | None = None) -> list[TrainingExample]:
    """All four grounding templates, one instance per POI (templates 2-4)
    plus one per trajectory with >= 2 train interactions (template 1),
    shuffled under the seed. Loss applies to every position.
    """
    for poi_id in ds.pois:
        if poi_id not in sids.sids:
            raise KeyError(f"POI missing SID: {poi_id}")
    examples: list[TrainingExample] = []
    bos, eos, sep = vocab.bos_id, vocab.eos_id, vocab.sep_id

    for user in sorted(ds.trajectories):
        inters = ds.user_interactions(user, tag="train" if ds.split else None)
        if len(inters) < 2:
            continue
        ids = [bos] + vocab.encode_many(profile_tokens(ds, user)) + [sep]
        entries = [history_entry_tokens(i, sids, vocab) for i in reversed(inters)]
        budget = None if max_len is None else max_len - len(ids) - 1
        for entry in entries:
            if budget is not None and budget - len(entry) < 0:
                break
            ids += entry
            if budget is not None:
                budget -= len(entry)
        ids.append(eos)
        examples.append(TrainingExample(tuple(ids), tuple([True] * len(ids))))

    for poi_id in sorted(ds.pois):
        poi = ds.pois[poi_id]
        code_ids = vocab.sid_ids(sids.sids[poi_id])
        addr = vocab.encode_many([f"ADDR:{w}" for w in poi.address.split()])
        t2 = [bos] + code_ids + [sep] + vocab.encode_many(_alignment_attr_tokens(poi)) + [eos]
        t3 = ([bos, vocab.encode("POI:")] + code_ids + [vocab.encode("IS")]
              + vocab.encode_many(_description_attr_tokens(poi))
              + [vocab.encode("LOCATED")] + addr + [eos])
        t4 = ([bos, vocab.encode("WHAT"), vocab.encode("IS")] + code_ids + [sep]
              + vocab.encode_many(_description_attr_tokens(poi)) + [eos])
        for ids in (t2, t3, t4):
            if max_len is not None:
                ids = ids[:max_len]
            examples.append(TrainingExample(tuple(ids), tuple([True] * len(ids))))

    rng = np.random.default_rng(seed)
    return [examples[i] for i in rng.permutation(len(examples))]


def sft_prompt_ids(ds: Dataset, sids: SidAssignment, vocab: Vocab, user_id: str,
                   history: list[Interaction], target: Interaction, history_len: int) -> list[int]:
    """Prompt for predicting `target` from the interactions before it."""
    ids = [vocab.bos_id, vocab.encode("TASK:NEXT_POI"), vocab.sep_id]
    ids += vocab.encode_many(profile_tokens(ds, user_id))
    ids.append(vocab.sep_id)
    for inter in reversed(history[-history_len:]):
        ids += history_entry_tokens(inter, sids, vocab)
    ids.append(vocab.sep_id)
    ctx = target.context
    if ctx.query:
        ids += vocab.encode_many([f"Q:{w}" for w in ctx.query.split()])
    else:
        ids.append(vocab.mask_ctx_id)
    if ctx.lat is not None:
        ids += vocab.encode_many([f"LAT:{ctx.lat:.2f}", f"LON:{ctx.lon:.2f}"])
    ids += vocab.encode_many([hour_token(target.timestamp), weekday_token(target.timestamp)])
    if ctx.weather:
        ids.append(vocab.encode(f"WX:{ctx.weather}"))
    ids.append(vocab.sep_id)
    return ids


def build_sft_dataset(ds: Dataset, sids: SidAssignment, vocab: Vocab,
                      cfg: SftConfig) -> list[TrainingExample]:
    """One example per train-split interaction with at least one prior
    interaction; loss restricted to the target SID codes plus EOS."""
    if ds.split is None:
        raise ValueError("dataset has no split tags")
    examples: list[TrainingExample] = []
    skipped = 0
    for user in sorted(ds.trajectories):
        inters = ds.user_interactions(user, tag="train")
        if not inters:
            skipped += 1
            continue
        emitted = False
        for pos in range(1, len(inters)):
            target = inters[pos]
            prompt = sft_prompt_ids(ds, sids, vocab, user, inters[:pos], target, cfg.history_len)
            response = vocab.sid_ids(sids.sids[target.poi_id]) + [vocab.eos_id]
            tokens = tuple(prompt + response)
            mask = tuple([False] * len(prompt) + [True] * len(response))
            examples.append(TrainingExample(tokens, mask))
            emitted = True
        if not emitted:
            skipped += 1
    if skipped:
        log.info("sft dataset: %d users skipped (no usable history)", skipped)
    return examples


def description_prompt_ids(poi, vocab: Vocab) -> list[int]:
    """Attribute prompt for the description-to-SID refinement task."""
    return [vocab.bos_id] + vocab.encode_many(_alignment_attr_tokens(poi)) + [vocab.sep_id]


def build_description_examples(ds: Dataset, sids: SidAssignment, vocab: Vocab) -> list[TrainingExample]:
    examples = []
    for poi_id in sorted(ds.pois):
        prompt = description_prompt_ids(ds.pois[poi_id], vocab)
        response = vocab.sid_ids(sids.sids[poi_id]) + [vocab.eos_id]
        examples.append(TrainingExample(
            tuple(prompt + response),
            tuple([False] * len(prompt) + [True] * len(response)),
        ))
    return examples
