"""Closed token vocabulary over SID codes and POI/context attributes.

Ids are dense: specials first, then task keywords, code tokens level by
level, dedup ordinals, clock and action tokens, then harvested attribute,
weather and query tokens in sorted order. Encoding an unknown attribute
falls back to the reserved <UNK> id.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path

from .corpus import ACTIONS, Dataset, featurize_poi
from .rqkmeans import LEVEL_LETTERS

PAD, BOS, EOS, SEP, MASK_CTX, UNK = "<PAD>", "<BOS>", "<EOS>", "<SEP>", "<MASK_CTX>", "<UNK>"
SPECIALS = (PAD, BOS, EOS, SEP, MASK_CTX, UNK)
KEYWORDS = ("TASK:NEXT_POI", "POI:", "IS", "LOCATED", "WHAT")


@dataclass(frozen=True)
class Vocab:
    id_to_token: tuple[str, ...]
    sizes: tuple[int, ...]
    n_dedup: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "_token_to_id", {t: i for i, t in enumerate(self.id_to_token)})
        if len(self._token_to_id) != len(self.id_to_token):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.id_to_token)

    def encode(self, token: str) -> int:
        return self._token_to_id.get(token, self._token_to_id[UNK])

    def encode_many(self, tokens: list[str]) -> list[int]:
        return [self.encode(t) for t in tokens]

    def decode(self, token_id: int) -> str:
        return self.id_to_token[token_id]

    @property
    def pad_id(self) -> int:
        return self._token_to_id[PAD]

    @property
    def bos_id(self) -> int:
        return self._token_to_id[BOS]

    @property
    def eos_id(self) -> int:
        return self._token_to_id[EOS]

    @property
    def sep_id(self) -> int:
        return self._token_to_id[SEP]

    @property
    def mask_ctx_id(self) -> int:
        return self._token_to_id[MASK_CTX]

    @property
    def unk_id(self) -> int:
        return self._token_to_id[UNK]

    def code_token(self, level: int, index: int) -> str:
        if not (0 <= level < len(self.sizes)) or not (0 <= index < self.sizes[level]):
            raise ValueError(f"code ({level}, {index}) outside configured sizes {self.sizes}")
        return f"<{LEVEL_LETTERS[level]}_{index}>"

    def code_id(self, level: int, index: int) -> int:
        return self._token_to_id[self.code_token(level, index)]

    def dedup_id(self, ordinal: int) -> int:
        if ordinal >= self.n_dedup:
            raise ValueError(f"dedup ordinal {ordinal} exceeds reserved {self.n_dedup}")
        return self._token_to_id[f"<d_{ordinal}>"]

    def sid_ids(self, sid: tuple[int, ...]) -> list[int]:
        """Token ids of a code sequence, final element a dedup ordinal when
        the code runs past the configured levels."""
        ids = []
        for pos, code in enumerate(sid):
            if pos < len(self.sizes):
                ids.append(self.code_id(pos, code))
            else:
                ids.append(self.dedup_id(code))
        return ids


def build_vocab(ds: Dataset, sizes: tuple[int, ...], n_dedup: int = 0) -> Vocab:
    """Assemble the vocabulary for one dataset and codebook geometry."""
    tokens: list[str] = list(SPECIALS) + list(KEYWORDS)
    for level, size in enumerate(sizes):
        tokens.extend(f"<{LEVEL_LETTERS[level]}_{i}>" for i in range(size))
    tokens.extend(f"<d_{k}>" for k in range(n_dedup))
    tokens.extend(f"HOUR:{h:02d}" for h in range(24))
    tokens.extend(f"WD:{d}" for d in range(7))
    tokens.extend(f"ACT:{a}" for a in ACTIONS)

    attrs: set[str] = set()
    weather: set[str] = set()
    queries: set[str] = set()
    for poi in ds.pois.values():
        attrs.update(featurize_poi(poi))
    for _, inter in ds.iter_interactions():
        ctx = inter.context
        if ctx.weather:
            weather.add(f"WX:{ctx.weather}")
        if ctx.query:
            queries.update(f"Q:{w}" for w in ctx.query.split())
        if ctx.lat is not None:
            attrs.add(f"LAT:{ctx.lat:.2f}")
            attrs.add(f"LON:{ctx.lon:.2f}")
    tokens.extend(sorted(weather))
    tokens.extend(sorted(attrs))
    tokens.extend(sorted(queries))
    return Vocab(id_to_token=tuple(tokens), sizes=tuple(sizes), n_dedup=n_dedup)


def save_vocab(vocab: Vocab, path: str | Path) -> None:
    """Write the vocabulary as a flat id -> token JSON object."""
    payload = {str(i): t for i, t in enumerate(vocab.id_to_token)}
    Path(path).write_text(json.dumps(payload, ensure_ascii=False), encoding="utf-8")


def load_vocab(path: str | Path) -> Vocab:
    """Rebuild a Vocab from the id -> token mapping; the code-level sizes
    and dedup count are recovered from the token names."""
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    tokens = tuple(payload[str(i)] for i in range(len(payload)))
    sizes = []
    for letter in LEVEL_LETTERS:
        count = sum(1 for t in tokens if re.fullmatch(rf"<{letter}_\d+>", t))
        if count == 0:
            break
        sizes.append(count)
    n_dedup = sum(1 for t in tokens if re.fullmatch(r"<d_\d+>", t))
    return Vocab(id_to_token=tokens, sizes=tuple(sizes), n_dedup=n_dedup)
