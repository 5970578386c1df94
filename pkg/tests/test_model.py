import math

import numpy as np
import pytest
import torch

from geosid.corpus import SynthSpec, synthesize_dataset
from geosid.model import (
    TinyDecoder,
    TrainingExample,
    batch_loss,
    load_checkpoint,
    nll_loss,
    save_checkpoint,
    train,
)
from geosid.vocab import build_vocab


@pytest.fixture(scope="module")
def vocab():
    ds = synthesize_dataset(SynthSpec(2, 8, 6, 10, 1.0, 31))
    return build_vocab(ds, (4, 4, 4), n_dedup=1)


@pytest.fixture(scope="module")
def model(vocab):
    return TinyDecoder(vocab, d_model=32, n_layers=2, n_heads=2, max_seq=48, seed=0)


def _random_examples(vocab, n, rng, length=(6, 20)):
    out = []
    for _ in range(n):
        ln = int(rng.integers(*length))
        toks = [vocab.bos_id] + [int(rng.integers(6, len(vocab))) for _ in range(ln - 2)] + [vocab.eos_id]
        mask = [False] * (ln // 2) + [True] * (ln - ln // 2)
        out.append(TrainingExample(tuple(toks), tuple(mask)))
    return out


def test_training_example_validation():
    with pytest.raises(ValueError):
        TrainingExample((1,), (True,))
    with pytest.raises(ValueError):
        TrainingExample((1, 2), (False, False))
    with pytest.raises(ValueError):
        TrainingExample((1, 2), (True,))


def test_causal_masking_by_perturbation(model, vocab):
    rng = np.random.default_rng(0)
    toks = [int(rng.integers(0, len(vocab))) for _ in range(20)]
    with torch.no_grad():
        base, _ = model(torch.tensor([toks]))
    for t in (3, 10, 18):
        mutated = list(toks)
        mutated[t] = (mutated[t] + 7) % len(vocab)
        with torch.no_grad():
            out, _ = model(torch.tensor([mutated]))
        assert torch.equal(out[0, :t], base[0, :t])
        assert not torch.equal(out[0, t], base[0, t])


def test_softmax_rows_sum_to_one(model, vocab):
    rng = np.random.default_rng(1)
    toks = torch.tensor([[int(rng.integers(0, len(vocab))) for _ in range(12)]])
    with torch.no_grad():
        logits, _ = model(toks)
    probs = torch.softmax(logits, dim=-1)
    assert torch.allclose(probs.sum(dim=-1), torch.ones(1, 12), atol=1e-6)


def test_kv_cache_matches_full_forward(model, vocab):
    rng = np.random.default_rng(2)
    toks = [int(rng.integers(0, len(vocab))) for _ in range(15)]
    with torch.no_grad():
        full, _ = model(torch.tensor([toks]))
        prefix_logits, past = model(torch.tensor([toks[:10]]), return_kv=True)
        step, _ = model(torch.tensor([toks[10:]]), past=past)
    assert torch.allclose(step[0], full[0, 10:], atol=1e-5)


def test_nll_loss_uniform_logits():
    v = 7
    logits = np.zeros((3, v))
    targets = np.array([1, 2, 3])
    mask = np.array([True, True, True])
    assert nll_loss(logits, targets, mask) == pytest.approx(math.log(v), abs=1e-9)


def test_nll_loss_confident_logit():
    logits = np.zeros((1, 5))
    logits[0, 2] = 100.0
    assert nll_loss(logits, np.array([2]), np.array([True])) < 1e-10


def test_nll_loss_hand_computed_fixture():
    logits = np.array([[1.0, 2.0, 0.5], [0.0, -1.0, 3.0]])
    targets = np.array([1, 2])
    mask = np.array([True, True])
    expected = 0.0
    for row, tgt in zip(logits, targets):
        expected += -(row[tgt] - math.log(np.exp(row).sum()))
    assert nll_loss(logits, targets, mask) == pytest.approx(expected / 2, abs=1e-9)
    # masking drops the second position
    only_first = nll_loss(logits, targets, np.array([True, False]))
    first = -(logits[0, 1] - math.log(np.exp(logits[0]).sum()))
    assert only_first == pytest.approx(first, abs=1e-9)


def test_nll_loss_all_false_mask():
    with pytest.raises(ValueError):
        nll_loss(np.zeros((2, 3)), np.array([0, 1]), np.array([False, False]))


def test_zero_epochs_leaves_parameters(vocab):
    model = TinyDecoder(vocab, d_model=32, n_layers=1, n_heads=2, max_seq=32, seed=3)
    before = [p.detach().clone() for p in model.parameters()]
    rng = np.random.default_rng(5)
    _, curve = train(model, _random_examples(vocab, 8, rng), epochs=0, lr=0.1, batch=4, seed=0)
    assert curve == []
    for p, q in zip(model.parameters(), before):
        assert torch.equal(p, q)


def test_first_epoch_loss_near_log_v(vocab):
    model = TinyDecoder(vocab, d_model=32, n_layers=2, n_heads=2, max_seq=64, seed=4)
    rng = np.random.default_rng(6)
    examples = _random_examples(vocab, 64, rng, length=(8, 30))
    _, curve = train(model, examples, epochs=1, lr=0.01, batch=16, seed=1)
    assert curve[0] == pytest.approx(math.log(len(vocab)), rel=0.2)
    assert np.isfinite(curve).all()


def test_training_deterministic(vocab):
    rng = np.random.default_rng(7)
    examples = _random_examples(vocab, 32, rng)

    def run():
        model = TinyDecoder(vocab, d_model=32, n_layers=1, n_heads=2, max_seq=32, seed=9)
        _, curve = train(model, examples, epochs=2, lr=0.2, batch=8, seed=2)
        return curve, [p.detach().clone() for p in model.parameters()]

    c1, p1 = run()
    c2, p2 = run()
    assert c1 == c2
    for a, b in zip(p1, p2):
        assert torch.equal(a, b)


def test_all_parameters_update(vocab):
    model = TinyDecoder(vocab, d_model=32, n_layers=1, n_heads=2, max_seq=32, seed=11)
    before = [p.detach().clone() for p in model.parameters()]
    rng = np.random.default_rng(8)
    train(model, _random_examples(vocab, 16, rng), epochs=3, lr=0.5, batch=4, seed=3)
    changed = [not torch.equal(p, q) for p, q in zip(model.parameters(), before)]
    assert all(changed)


def test_sequence_length_guard(model, vocab):
    too_long = torch.zeros((1, model.max_seq + 1), dtype=torch.long)
    with pytest.raises(ValueError, match="max_seq"):
        model(too_long)


def test_collate_left_truncates(vocab):
    model = TinyDecoder(vocab, d_model=32, n_layers=1, n_heads=2, max_seq=16, seed=0)
    long_example = TrainingExample(tuple(range(6, 36)), tuple([False] * 26 + [True] * 4))
    loss, n = batch_loss(model, *__import__("geosid.model", fromlist=["_collate"])._collate(
        [long_example], vocab.pad_id, model.max_seq))
    assert n == 4  # response positions survive the clip


def test_checkpoint_roundtrip(tmp_path, vocab):
    model = TinyDecoder(vocab, d_model=32, n_layers=2, n_heads=2, max_seq=40, seed=13)
    model.stage = "cpt"
    path = tmp_path / "model.ckpt"
    save_checkpoint(model, path)
    loaded = load_checkpoint(path, vocab)
    assert loaded.stage == "cpt"
    assert loaded.d_model == 32 and loaded.n_layers == 2 and loaded.max_seq == 40
    for a, b in zip(model.parameters(), loaded.parameters()):
        assert torch.equal(a, b)
    save_checkpoint(loaded, tmp_path / "again.ckpt")
    assert path.read_bytes() == (tmp_path / "again.ckpt").read_bytes()


def test_checkpoint_bad_magic(tmp_path, vocab):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"XXXX" + b"\x00" * 64)
    with pytest.raises(ValueError, match="magic"):
        load_checkpoint(path, vocab)


def test_memorization_small(vocab):
    # a handful of fixed mappings should be memorized quickly
    rng = np.random.default_rng(14)
    examples = []
    for i in range(8):
        prompt = [vocab.bos_id, int(rng.integers(20, len(vocab)))]
        response = [vocab.code_id(0, i % 4), vocab.code_id(1, (i * 2) % 4), vocab.eos_id]
        examples.append(TrainingExample(tuple(prompt + response),
                                        tuple([False] * 2 + [True] * 3)))
    model = TinyDecoder(vocab, d_model=32, n_layers=2, n_heads=2, max_seq=16, seed=15)
    _, curve = train(model, examples, epochs=150, lr=0.5, batch=4, seed=4)
    assert curve[-1] < 0.05
