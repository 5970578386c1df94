import math

import numpy as np
import pytest

from geosid.contrastive import P2PTrainConfig, nce_grad, nce_loss, train_p2p
from geosid.corpus import SynthSpec, synthesize_dataset, temporal_split
from geosid.embed import cosine, hash_embed
from geosid.pairs import PairMiningConfig, mine_pairs


def test_loss_zero_without_negatives():
    rng = np.random.default_rng(0)
    for _ in range(10):
        a, p = rng.normal(size=6), rng.normal(size=6)
        assert nce_loss(a, p, [], tau=0.3) == 0.0


def test_loss_equal_scores_ln2():
    a = np.array([1.0, 0.0])
    same = np.array([0.5, 0.5])
    assert nce_loss(a, same, [same.copy()], tau=1.0) == pytest.approx(math.log(2.0), abs=1e-12)


def test_loss_closed_form_value():
    a = np.array([1.0, 0.0])
    pos = np.array([1.0, 0.0])       # score 1
    neg = np.array([0.0, 1.0])       # score 0
    expected = -math.log(math.e / (math.e + 1.0))
    assert nce_loss(a, pos, [neg], tau=1.0) == pytest.approx(expected, abs=1e-12)


def test_loss_nonnegative_and_monotone_in_negative_score():
    rng = np.random.default_rng(4)
    for _ in range(50):
        dim = int(rng.integers(2, 10))
        a, p = rng.normal(size=dim), rng.normal(size=dim)
        negs = [rng.normal(size=dim) for _ in range(int(rng.integers(1, 5)))]
        tau = float(rng.uniform(0.05, 2.0))
        base = nce_loss(a, p, negs, tau)
        assert base >= 0.0
        # push one negative toward a higher score: loss must strictly rise
        direction = a / np.linalg.norm(a)
        bumped = [n + (direction * 0.5 if k == 0 else 0.0) for k, n in enumerate(negs)]
        assert nce_loss(a, p, bumped, tau) > base


def test_grad_zero_without_negatives():
    a, p = np.ones(4), np.ones(4)
    ga, gp, gn = nce_grad(a, p, [], tau=0.5)
    assert not gn
    assert np.all(ga == 0.0) and np.all(gp == 0.0)


def test_grad_matches_finite_differences():
    # unit-norm vectors and moderate tau keep the softmax away from
    # saturation, where central differences themselves lose accuracy
    rng = np.random.default_rng(123)
    eps = 1e-4

    def unit(v):
        return v / np.linalg.norm(v)

    for _ in range(100):
        a = unit(rng.normal(size=8))
        p = unit(rng.normal(size=8))
        negs = [unit(rng.normal(size=8)) for _ in range(int(rng.integers(1, 6)))]
        tau = float(rng.uniform(0.2, 1.5))
        ga, gp, gn = nce_grad(a, p, negs, tau)

        def num_grad(get, put):
            base = get().copy()
            out = np.zeros_like(base)
            for d in range(base.size):
                hi, lo = base.copy(), base.copy()
                hi[d] += eps
                lo[d] -= eps
                out[d] = (nce_loss(*put(hi), tau) - nce_loss(*put(lo), tau)) / (2 * eps)
            return out

        na = num_grad(lambda: a, lambda v: (v, p, negs))
        np_ = num_grad(lambda: p, lambda v: (a, v, negs))
        for analytic, numeric in ((ga, na), (gp, np_)):
            scale = max(np.max(np.abs(numeric)), 1e-8)
            assert np.max(np.abs(analytic - numeric)) / scale <= 1e-4
        for k in range(len(negs)):
            nk = num_grad(lambda: negs[k],
                          lambda v: (a, p, negs[:k] + [v] + negs[k + 1:]))
            scale = max(np.max(np.abs(nk)), 1e-8)
            assert np.max(np.abs(gn[k] - nk)) / scale <= 1e-4


def test_grad_tau_scaling_at_symmetric_point():
    # equal scores make the softmax uniform; gradients scale as 1/tau
    a = np.array([1.0, 0.0, 0.0])
    v = np.array([0.0, 1.0, 0.0])
    ga1, gp1, gn1 = nce_grad(a, v, [v.copy()], tau=1.0)
    ga2, gp2, gn2 = nce_grad(a, v, [v.copy()], tau=2.0)
    assert np.allclose(ga1, 2.0 * ga2)
    assert np.allclose(gp1, 2.0 * gp2)
    assert np.allclose(gn1[0], 2.0 * gn2[0])


def test_dim_mismatch_raises():
    with pytest.raises(ValueError):
        nce_loss(np.ones(3), np.ones(4), [], tau=1.0)
    with pytest.raises(ValueError):
        nce_grad(np.ones(3), np.ones(3), [np.ones(5)], tau=1.0)


def _planted():
    ds = temporal_split(synthesize_dataset(SynthSpec(4, 50, 100, 80, 2.0, 1)))
    table = hash_embed(ds, 64, 0)
    pairs = mine_pairs(ds, PairMiningConfig(seed=0))
    return ds, table, pairs


def test_zero_epochs_table_unchanged():
    _, table, pairs = _planted()
    out, curve = train_p2p(table, pairs, P2PTrainConfig(epochs=0, seed=0))
    assert curve == []
    assert np.array_equal(out.matrix, table.matrix)


def test_single_pair_without_extras_errors():
    _, table, pairs = _planted()
    with pytest.raises(ValueError, match="empty negative set"):
        train_p2p(table, pairs[:1], P2PTrainConfig(n_extra=0, epochs=1, seed=0))
    # with extra negatives the same call trains fine
    out, curve = train_p2p(table, pairs[:1], P2PTrainConfig(n_extra=4, epochs=1, seed=0))
    assert len(curve) == 1


def test_empty_pair_list_errors():
    _, table, _ = _planted()
    with pytest.raises(ValueError):
        train_p2p(table, [], P2PTrainConfig())


def test_training_is_deterministic():
    _, table, pairs = _planted()
    cfg = P2PTrainConfig(epochs=2, seed=9)
    out1, curve1 = train_p2p(table, pairs, cfg)
    out2, curve2 = train_p2p(table, pairs, cfg)
    assert curve1 == curve2
    assert np.array_equal(out1.matrix, out2.matrix)


def test_separation_increases_on_planted_data():
    ds, table, pairs = _planted()
    rng = np.random.default_rng(17)
    ids = sorted(ds.pois)

    def separation(t):
        pos = float(np.mean([cosine(t.row(p.i), t.row(p.j)) for p in pairs]))
        rand = float(np.mean([
            cosine(t.row(ids[i]), t.row(ids[j]))
            for i, j in zip(rng.integers(0, len(ids), 1000), rng.integers(0, len(ids), 1000))
            if i != j
        ]))
        return pos - rand

    before = separation(table)
    refined, curve = train_p2p(table, pairs, P2PTrainConfig())
    after = separation(refined)
    assert all(np.isfinite(curve))
    assert after - before >= 0.1


def test_loss_curve_finite_and_rows_unit():
    _, table, pairs = _planted()
    refined, curve = train_p2p(table, pairs, P2PTrainConfig(epochs=3, seed=1))
    assert all(np.isfinite(x) for x in curve)
    touched = {p.i for p in pairs} | {p.j for p in pairs}
    for pid in list(touched)[:50]:
        assert np.linalg.norm(refined.row(pid)) == pytest.approx(1.0, abs=1e-5)
