from itertools import combinations

import numpy as np
import pytest

from geosid.corpus import Dataset, Interaction, Poi, SynthSpec, Trajectory, synthesize_dataset, temporal_split
from geosid.geo import haversine_km
from geosid.pairs import (
    CoVisitPair,
    PairMiningConfig,
    filter_pairs,
    load_pairs,
    mine_covisits,
    mine_pairs,
    save_pairs,
    swing_score,
    user_item_index,
)


def _dataset(sequences, coords=None):
    """sequences: user -> list of poi ids visited in order."""
    coords = coords or {}
    pois = {}
    trajectories = {}
    for user, seq in sequences.items():
        inters = []
        for i, pid in enumerate(seq):
            if pid not in pois:
                lat, lon = coords.get(pid, (10.0, 10.0))
                pois[pid] = Poi(id=pid, name=pid, category="C", address="", lat=lat, lon=lon)
            inters.append(Interaction(user_id=user, poi_id=pid, timestamp=100 + i, action="click"))
        trajectories[user] = Trajectory(user, tuple(inters))
    ds = Dataset(pois=pois, trajectories=trajectories)
    return Dataset(pois=pois, trajectories=trajectories,
                   split=tuple(["train"] * ds.n_interactions))


def test_single_pair_window_5():
    ds = _dataset({"u": ["A", "B"]})
    assert mine_covisits(ds, PairMiningConfig(min_count=1)) == [("A", "B", 1)]


def test_adjacent_occurrences_counted():
    # A,B / B,A / A,B adjacency in [A,B,A,B] with window 1
    ds = _dataset({"u": ["A", "B", "A", "B"]})
    assert mine_covisits(ds, PairMiningConfig(window=1, min_count=1)) == [("A", "B", 3)]


def test_window_bound_excludes_distant():
    ds = _dataset({"u": ["A", "C", "B"]})
    pairs = mine_covisits(ds, PairMiningConfig(window=1, min_count=1))
    assert ("A", "B", 1) not in pairs
    assert ("A", "C", 1) in pairs and ("B", "C", 1) in pairs


def test_min_count_filter():
    ds = _dataset({"u": ["A", "B"], "v": ["A", "C"]})
    assert mine_covisits(ds, PairMiningConfig(min_count=2)) == []


def test_swing_reference_values():
    # one common user -> no user pair -> 0
    assert swing_score("i", "j", {"u": {"i", "j"}}, 1.0) == 0.0
    # two common users whose whole overlap is {i, j}: 1/(1+2)
    two = {"u": {"i", "j"}, "v": {"i", "j"}}
    assert swing_score("i", "j", two, 1.0) == pytest.approx(1.0 / 3.0)
    # third user with the same overlap adds the other two pairs
    three = {"u": {"i", "j"}, "v": {"i", "j"}, "w": {"i", "j"}}
    assert swing_score("i", "j", three, 1.0) == pytest.approx(1.0)


def test_swing_symmetry_exact():
    rng = np.random.default_rng(0)
    pois = [f"p{i}" for i in range(8)]
    index = {f"u{k}": set(rng.choice(pois, size=4, replace=False)) for k in range(6)}
    for i, j in combinations(pois, 2):
        assert swing_score(i, j, index, 1.0) == swing_score(j, i, index, 1.0)


def test_popular_item_never_increases_swing():
    rng = np.random.default_rng(1)
    pois = [f"p{i}" for i in range(8)]
    index = {f"u{k}": set(rng.choice(pois, size=4, replace=False)) for k in range(6)}
    boosted = {u: items | {"mega"} for u, items in index.items()}
    for i, j in combinations(pois, 2):
        assert swing_score(i, j, boosted, 1.0) <= swing_score(i, j, index, 1.0)


def _brute_force_mine(ds, window, min_count):
    counts = {}
    for user in ds.trajectories:
        seq = [i.poi_id for i in ds.user_interactions(user, tag="train")]
        for s in range(len(seq)):
            for t in range(s + 1, len(seq)):
                if t - s <= window and seq[s] != seq[t]:
                    key = tuple(sorted((seq[s], seq[t])))
                    counts[key] = counts.get(key, 0) + 1
    return sorted((i, j, c) for (i, j), c in counts.items() if c >= min_count)


def _brute_force_swing(i, j, index, alpha):
    users = [u for u, items in index.items() if i in items and j in items]
    total = 0.0
    for u, v in combinations(sorted(users), 2):
        total += 1.0 / (alpha + len(index[u] & index[v]))
    return total


def test_mining_and_swing_match_brute_force_enumeration():
    rng = np.random.default_rng(42)
    for trial in range(20):
        n_users = int(rng.integers(2, 11))
        n_pois = int(rng.integers(3, 16))
        pois = [f"p{i}" for i in range(n_pois)]
        seqs = {
            f"u{k}": [pois[int(rng.integers(0, n_pois))] for _ in range(int(rng.integers(2, 12)))]
            for k in range(n_users)
        }
        ds = _dataset(seqs)
        window = int(rng.integers(1, 6))
        mined = mine_covisits(ds, PairMiningConfig(window=window, min_count=1))
        assert mined == _brute_force_mine(ds, window, 1)
        index = user_item_index(ds)
        for i, j, _ in mined[:20]:
            assert swing_score(i, j, index, 1.0) == pytest.approx(
                _brute_force_swing(i, j, index, 1.0), abs=1e-12)


def test_filter_distance_and_ordering():
    coords = {"A": (10.0, 10.0), "B": (10.0 + 0.02608, 10.0), "C": (10.0 + 0.03, 10.0), "D": (11.0, 10.0)}
    ds = _dataset({"u": ["A", "B", "A", "B"], "v": ["A", "B", "C", "A", "C", "D"]}, coords)
    cfg = PairMiningConfig(min_count=1)
    mined = mine_covisits(ds, cfg)
    kept = filter_pairs(mined, ds, cfg)
    ids = {(p.i, p.j) for p in kept}
    assert ("A", "B") in ids           # 2.9 km, co-visited by both users
    assert ("A", "D") not in ids       # >3 km away
    swings = [p.swing for p in kept]
    assert swings == sorted(swings, reverse=True)
    for p in kept:
        assert p.dist_km == pytest.approx(
            haversine_km(ds.pois[p.i].point, ds.pois[p.j].point))
        assert p.swing > 0


def test_filter_empty_input():
    ds = _dataset({"u": ["A", "B"]})
    assert filter_pairs([], ds, PairMiningConfig()) == []


def test_filter_unknown_poi():
    ds = _dataset({"u": ["A", "B"]})
    with pytest.raises(KeyError):
        filter_pairs([("A", "Z", 3)], ds, PairMiningConfig())


def test_pair_invariants():
    with pytest.raises(ValueError):
        CoVisitPair(i="b", j="a", co_count=1, swing=0.5, dist_km=1.0)
    with pytest.raises(ValueError):
        PairMiningConfig(window=0)
    with pytest.raises(ValueError):
        PairMiningConfig(max_km=0.0)


def test_pairs_tsv_roundtrip(tmp_path):
    ds = temporal_split(synthesize_dataset(SynthSpec(2, 20, 20, 30, 1.5, 4)))
    pairs = mine_pairs(ds, PairMiningConfig())
    assert pairs, "fixture should produce pairs"
    path = tmp_path / "pairs.tsv"
    save_pairs(pairs, path)
    loaded = load_pairs(path)
    assert [(p.i, p.j, p.co_count) for p in loaded] == [(p.i, p.j, p.co_count) for p in pairs]
    for a, b in zip(loaded, pairs):
        assert a.swing == pytest.approx(b.swing, abs=1e-6)
        assert a.dist_km == pytest.approx(b.dist_km, abs=1e-3)
