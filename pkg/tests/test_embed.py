import numpy as np
import pytest

from geosid.corpus import Dataset, Interaction, Poi, SynthSpec, Trajectory, synthesize_dataset
from geosid.embed import EmbeddingTable, cosine, hash_embed, load_embeddings, save_embeddings


def _ds_with(pois):
    user = Trajectory("u", tuple(
        Interaction(user_id="u", poi_id=p, timestamp=10 + i, action="click")
        for i, p in enumerate(sorted(pois))
    ))
    return Dataset(pois=pois, trajectories={"u": user})


def _poi(pid, name="Same Name", cat="Same Cat", lat=10.0, lon=10.0):
    return Poi(id=pid, name=name, category=cat, address="", lat=lat, lon=lon)


def test_identical_token_lists_identical_rows():
    ds = _ds_with({"a": _poi("a"), "b": _poi("b")})
    table = hash_embed(ds, 16, seed=4)
    assert np.array_equal(table.row("a"), table.row("b"))


def test_rows_unit_norm_and_deterministic():
    ds = synthesize_dataset(SynthSpec(2, 10, 5, 8, 1.0, 6))
    t1 = hash_embed(ds, 32, seed=1)
    t2 = hash_embed(ds, 32, seed=1)
    assert np.array_equal(t1.matrix, t2.matrix)
    norms = np.linalg.norm(t1.matrix, axis=1)
    assert np.allclose(norms, 1.0, atol=1e-6)
    assert hash_embed(ds, 32, seed=2).matrix.tolist() != t1.matrix.tolist()


def test_shared_tokens_raise_cosine():
    # POIs sharing most attribute tokens should be closer than unrelated
    # ones for essentially every hash seed
    wins = 0
    for seed in range(100):
        ds = _ds_with({
            "x": _poi("x", name="Alpha Beta Gamma", cat="Coffee"),
            "y": _poi("y", name="Alpha Beta Gamma", cat="Tea"),
            "z": _poi("z", name="Delta Epsilon Zeta", cat="Fuel", lat=-30.0, lon=120.0),
        })
        t = hash_embed(ds, 64, seed=seed)
        if cosine(t.row("x"), t.row("y")) > cosine(t.row("x"), t.row("z")):
            wins += 1
    assert wins >= 95


def test_dim_validation():
    ds = _ds_with({"a": _poi("a")})
    with pytest.raises(ValueError, match="dim"):
        hash_embed(ds, 4, seed=0)


def test_cosine_reference_values():
    a = np.array([1.0, 2.0, 3.0])
    assert cosine(a, a) == pytest.approx(1.0)
    assert cosine(a, -a) == pytest.approx(-1.0)
    assert cosine(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == pytest.approx(0.0)
    with pytest.raises(ValueError):
        cosine(np.zeros(3), a)
    with pytest.raises(ValueError):
        cosine(np.ones(3), np.ones(4))


def test_save_load_roundtrip_bit_identical(tmp_path):
    ds = synthesize_dataset(SynthSpec(2, 8, 4, 6, 1.0, 2))
    table = hash_embed(ds, 24, seed=9)
    path = tmp_path / "emb.gemb"
    save_embeddings(table, path)
    loaded = load_embeddings(path, ds)
    assert loaded.ids == table.ids
    assert loaded.dim == table.dim
    assert loaded.normalized == table.normalized
    assert np.array_equal(loaded.matrix, table.matrix)
    path2 = tmp_path / "emb2.gemb"
    save_embeddings(loaded, path2)
    assert path.read_bytes() == path2.read_bytes()


def test_load_missing_poi_lists_id(tmp_path):
    ds = _ds_with({"a": _poi("a"), "b": _poi("b")})
    small = _ds_with({"a": _poi("a")})
    table = hash_embed(small, 16, seed=0)
    path = tmp_path / "partial.gemb"
    save_embeddings(table, path)
    with pytest.raises(ValueError, match="b"):
        load_embeddings(path, ds)


def test_load_bad_magic(tmp_path):
    path = tmp_path / "junk.gemb"
    path.write_bytes(b"NOPE" + b"\x00" * 32)
    ds = _ds_with({"a": _poi("a")})
    with pytest.raises(ValueError, match="magic"):
        load_embeddings(path, ds)


def test_normalization_idempotent():
    ds = synthesize_dataset(SynthSpec(1, 5, 2, 4, 1.0, 8))
    table = hash_embed(ds, 16, seed=3)
    norms = np.linalg.norm(table.matrix.astype(np.float64), axis=1, keepdims=True)
    renorm = table.matrix / norms
    assert np.allclose(renorm, table.matrix, atol=1e-6)


def test_table_shape_validation():
    with pytest.raises(ValueError):
        EmbeddingTable(dim=4, ids=("a",), matrix=np.zeros((2, 4), dtype=np.float32), normalized=False)
