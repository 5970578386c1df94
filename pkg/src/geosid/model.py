"""Small decoder-only transformer over the SID/attribute vocabulary.

Pre-norm causal self-attention blocks with a tied input/output embedding;
everything runs on CPU in float32. Initialization, shuffling and updates
are driven by explicit seeds so that two runs of the same recipe produce
identical parameters. Optimization is plain mini-batch gradient descent
with a global gradient-norm clip, which keeps training reproducible.

Checkpoint layout ("GSLM"): magic, u32 version, u32 vocab size, u32
d_model, u32 n_layers, u32 n_heads, u32 max_seq, u8 stage, then all
parameters as little-endian float32 in the fixed traversal order
token_embedding, position_embedding, per layer [ln1.weight, ln1.bias,
wq, bq, wk, bk, wv, bv, wo, bo, ln2.weight, ln2.bias, ff1.weight,
ff1.bias, ff2.weight, ff2.bias], final_ln.weight, final_ln.bias.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .vocab import Vocab

STAGES = ("base", "cpt", "sft")
_MAGIC = b"GSLM"
_CKPT_VERSION = 1

KVCache = list[tuple[torch.Tensor, torch.Tensor]]


@dataclass(frozen=True)
class TrainingExample:
    tokens: tuple[int, ...]
    loss_mask: tuple[bool, ...]

    def __post_init__(self) -> None:
        if len(self.tokens) != len(self.loss_mask):
            raise ValueError("tokens and loss_mask lengths differ")
        if len(self.tokens) < 2:
            raise ValueError("example must have at least 2 tokens")
        if not any(self.loss_mask):
            raise ValueError("loss_mask must select at least one position")


class _Block(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = d_model // n_heads
        self.ln1 = nn.LayerNorm(d_model)
        self.wq = nn.Linear(d_model, d_model)
        self.wk = nn.Linear(d_model, d_model)
        self.wv = nn.Linear(d_model, d_model)
        self.wo = nn.Linear(d_model, d_model)
        self.ln2 = nn.LayerNorm(d_model)
        self.ff1 = nn.Linear(d_model, 4 * d_model)
        self.ff2 = nn.Linear(4 * d_model, d_model)

    def forward(self, x: torch.Tensor, past: tuple[torch.Tensor, torch.Tensor] | None = None,
                return_kv: bool = False):
        b, t, d = x.shape
        h = self.ln1(x)
        q = self.wq(h).view(b, t, self.n_heads, self.head_dim).transpose(1, 2)
        k = self.wk(h).view(b, t, self.n_heads, self.head_dim).transpose(1, 2)
        v = self.wv(h).view(b, t, self.n_heads, self.head_dim).transpose(1, 2)
        if past is not None:
            k = torch.cat([past[0], k], dim=2)
            v = torch.cat([past[1], v], dim=2)
        past_len = k.shape[2] - t
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        if t > 1:
            causal = torch.triu(torch.ones(t, t, dtype=torch.bool), diagonal=1)
            mask = torch.zeros(t, k.shape[2])
            mask[:, past_len:] = causal.float() * torch.finfo(torch.float32).min
            scores = scores + mask
        attn = F.softmax(scores, dim=-1)
        mixed = (attn @ v).transpose(1, 2).reshape(b, t, d)
        x = x + self.wo(mixed)
        x = x + self.ff2(F.gelu(self.ff1(self.ln2(x))))
        if return_kv:
            return x, (k, v)
        return x, None


class TinyDecoder(nn.Module):
    """Autoregressive token model used for CPT, SFT and SID refinement."""

    def __init__(self, vocab: Vocab, d_model: int = 128, n_layers: int = 4,
                 n_heads: int = 4, max_seq: int = 160, seed: int = 0):
        super().__init__()
        if d_model % n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        self.vocab = vocab
        self.d_model = d_model
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.max_seq = max_seq
        self.seed = seed
        self.stage = "base"
        self.tok_emb = nn.Embedding(len(vocab), d_model)
        self.pos_emb = nn.Embedding(max_seq, d_model)
        self.blocks = nn.ModuleList([_Block(d_model, n_heads) for _ in range(n_layers)])
        self.final_ln = nn.LayerNorm(d_model)
        self._init_params(seed)

    def _init_params(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)
        for p in self.parameters():
            if p.ndim >= 2:
                p.data = torch.empty_like(p).normal_(0.0, 0.02, generator=gen)
            else:
                p.data.zero_()
        for block in self.blocks:
            block.ln1.weight.data.fill_(1.0)
            block.ln2.weight.data.fill_(1.0)
        self.final_ln.weight.data.fill_(1.0)

    @property
    def n_params(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def backbone(self, tokens: torch.Tensor, past: KVCache | None = None,
                 return_kv: bool = False) -> tuple[torch.Tensor, KVCache | None]:
        b, t = tokens.shape
        past_len = past[0][0].shape[2] if past else 0
        if past_len + t > self.max_seq:
            raise ValueError(f"sequence length {past_len + t} exceeds max_seq {self.max_seq}")
        pos = torch.arange(past_len, past_len + t)
        x = self.tok_emb(tokens) + self.pos_emb(pos)[None, :, :]
        new_past: KVCache = []
        for i, block in enumerate(self.blocks):
            x, kv = block(x, past=past[i] if past else None, return_kv=return_kv)
            if return_kv:
                new_past.append(kv)
        x = self.final_ln(x)
        return x, (new_past if return_kv else None)

    def lm_head(self, hidden: torch.Tensor) -> torch.Tensor:
        return hidden @ self.tok_emb.weight.T

    def forward(self, tokens: torch.Tensor, past: KVCache | None = None,
                return_kv: bool = False) -> tuple[torch.Tensor, KVCache | None]:
        hidden, new_past = self.backbone(tokens, past=past, return_kv=return_kv)
        return self.lm_head(hidden), new_past

    def logits_np(self, token_ids: list[int]) -> np.ndarray:
        """Full-sequence logits for one prompt, as (T, V) float32."""
        with torch.no_grad():
            logits, _ = self.forward(torch.tensor([token_ids], dtype=torch.long))
        return logits[0].numpy()


def nll_loss(logits, targets, mask) -> float:
    """Mean negative log-likelihood over masked positions.

    logits: (T, V) scores, targets: (T,) ids, mask: (T,) booleans selecting
    the positions that contribute. Stabilized by max-shift.
    """
    logits_t = torch.as_tensor(np.asarray(logits), dtype=torch.float64)
    targets_t = torch.as_tensor(np.asarray(targets), dtype=torch.long)
    mask_t = torch.as_tensor(np.asarray(mask), dtype=torch.bool)
    if logits_t.ndim != 2 or targets_t.shape != mask_t.shape or logits_t.shape[0] != targets_t.shape[0]:
        raise ValueError("inconsistent shapes for logits/targets/mask")
    if not bool(mask_t.any()):
        raise ValueError("mask selects no positions")
    logp = F.log_softmax(logits_t, dim=-1)
    picked = logp[torch.arange(logits_t.shape[0]), targets_t]
    return float(-picked[mask_t].mean())


def _collate(examples: list[TrainingExample], pad_id: int, max_seq: int) -> tuple[torch.Tensor, torch.Tensor]:
    # overlong sequences lose their oldest tokens; responses sit at the end
    clipped = [(ex.tokens[-max_seq:], ex.loss_mask[-max_seq:]) for ex in examples]
    width = max(len(t) for t, _ in clipped)
    tokens = torch.full((len(clipped), width), pad_id, dtype=torch.long)
    mask = torch.zeros((len(clipped), width), dtype=torch.bool)
    for r, (toks, m) in enumerate(clipped):
        tokens[r, :len(toks)] = torch.tensor(toks, dtype=torch.long)
        mask[r, :len(m)] = torch.tensor(m, dtype=torch.bool)
    return tokens, mask


def batch_loss(model: TinyDecoder, tokens: torch.Tensor, mask: torch.Tensor) -> tuple[torch.Tensor, int]:
    """Masked next-token loss for one padded batch.

    Only hidden states feeding masked targets go through the output
    projection, which keeps the vocab matmul proportional to the number of
    supervised positions.
    """
    hidden, _ = model.backbone(tokens)
    target_mask = mask[:, 1:]
    rows, cols = torch.nonzero(target_mask, as_tuple=True)
    if rows.numel() == 0:
        raise ValueError("batch has no supervised positions")
    picked_hidden = hidden[:, :-1, :][rows, cols]
    logits = model.lm_head(picked_hidden)
    targets = tokens[:, 1:][rows, cols]
    loss = F.cross_entropy(logits, targets)
    return loss, int(rows.numel())


def train(model: TinyDecoder, examples: list[TrainingExample], epochs: int,
          lr: float, batch: int, seed: int) -> tuple[TinyDecoder, list[float]]:
    """Mini-batch gradient descent with gradient-norm clip 1.0.

    All parameters update every step; shuffling comes from a dedicated
    seeded generator. Batches group examples of similar length (random
    tie-breaking, random batch order) so one long sequence cannot pad out
    a whole batch. Returns the model and the per-epoch mean loss
    (weighted by supervised positions).
    """
    if not examples:
        raise ValueError("no training examples")
    if batch < 1 or lr <= 0:
        raise ValueError("batch must be >= 1 and lr positive")
    rng = np.random.default_rng(seed)
    params = [p for p in model.parameters()]
    curve: list[float] = []
    for _ in range(epochs):
        order = rng.permutation(len(examples))
        order = order[np.argsort([len(examples[i].tokens) for i in order], kind="stable")]
        starts = np.arange(0, len(order), batch)
        total, count = 0.0, 0
        for start in starts[rng.permutation(len(starts))]:
            chunk = [examples[i] for i in order[start:start + batch]]
            tokens, mask = _collate(chunk, model.vocab.pad_id, model.max_seq)
            loss, n_pos = batch_loss(model, tokens, mask)
            model.zero_grad(set_to_none=True)
            loss.backward()
            torch.nn.utils.clip_grad_norm_(params, 1.0)
            with torch.no_grad():
                for p in params:
                    if p.grad is not None:
                        p -= lr * p.grad
            total += float(loss.item()) * n_pos
            count += n_pos
        curve.append(total / count)
    model.zero_grad(set_to_none=True)
    return model, curve


def save_checkpoint(model: TinyDecoder, path: str | Path) -> None:
    with Path(path).open("wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<IIIIIIB", _CKPT_VERSION, len(model.vocab), model.d_model,
                             model.n_layers, model.n_heads, model.max_seq,
                             STAGES.index(model.stage)))
        for tensor in _traversal(model):
            fh.write(tensor.detach().numpy().astype("<f4").tobytes())


def load_checkpoint(path: str | Path, vocab: Vocab) -> TinyDecoder:
    data = Path(path).read_bytes()
    if data[:4] != _MAGIC:
        raise ValueError(f"bad checkpoint magic {data[:4]!r}")
    version, v_size, d_model, n_layers, n_heads, max_seq, stage = struct.unpack_from("<IIIIIIB", data, 4)
    if version != _CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    if v_size != len(vocab):
        raise ValueError(f"checkpoint vocab size {v_size} != supplied vocab {len(vocab)}")
    model = TinyDecoder(vocab, d_model=d_model, n_layers=n_layers, n_heads=n_heads, max_seq=max_seq)
    model.stage = STAGES[stage]
    offset = 4 + struct.calcsize("<IIIIIIB")
    with torch.no_grad():
        for tensor in _traversal(model):
            n = tensor.numel()
            arr = np.frombuffer(data, dtype="<f4", count=n, offset=offset).reshape(tensor.shape)
            tensor.copy_(torch.from_numpy(arr.copy()))
            offset += 4 * n
    if offset != len(data):
        raise ValueError("checkpoint has trailing bytes")
    return model


def _traversal(model: TinyDecoder):
    yield model.tok_emb.weight
    yield model.pos_emb.weight
    for block in model.blocks:
        yield block.ln1.weight
        yield block.ln1.bias
        yield block.wq.weight
        yield block.wq.bias
        yield block.wk.weight
        yield block.wk.bias
        yield block.wv.weight
        yield block.wv.bias
        yield block.wo.weight
        yield block.wo.bias
        yield block.ln2.weight
        yield block.ln2.bias
        yield block.ff1.weight
        yield block.ff1.bias
        yield block.ff2.weight
        yield block.ff2.bias
    yield model.final_ln.weight
    yield model.final_ln.bias
