import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from daer.errors import DecodeError, ShapeError
from daer.index import (BuildConfig, ItemStore, build_index, decode_embeddings, deserialize_index,
                        encode_embeddings, iter_preorder, kmeans, quantize_unit, serialize_index)


def unit_store(n, d, seed=0, id_offset=0):
    rng = np.random.default_rng(seed)
    e = rng.normal(size=(n, d))
    e /= np.linalg.norm(e, axis=1, keepdims=True)
    return ItemStore(np.arange(n, dtype=np.uint64) + np.uint64(id_offset), e)


def subtree_rows(store, node):
    ids = [i for n in iter_preorder(node) if n.is_leaf for i in n.item_ids]
    return store.emb[store.rows_of(ids)]


def check_invariants(index, store):
    ids = index.leaf_ids()
    assert sorted(ids.tolist()) == sorted(store.ids.tolist())
    assert len(set(ids.tolist())) == len(ids)
    for node in index.nodes:
        assert abs(np.linalg.norm(node.centroid) - 1) < 1e-9
        m = subtree_rows(store, node).sum(axis=0)
        assert np.max(np.abs(node.centroid - m / np.linalg.norm(m))) < 1e-6
        if node.is_leaf:
            assert len(node.item_ids) >= 1
        else:
            assert len(node.children) >= 1
            assert all(c.level == node.level + 1 for c in node.children)


# ---------------------------------------------------------------- k-means


def test_single_cluster_is_normalized_mean():
    s = unit_store(20, 5)
    km = kmeans(s.emb, 1, 10, seed=0)
    m = s.emb.mean(axis=0)
    assert np.allclose(km.centroids[0], m / np.linalg.norm(m), atol=1e-12)
    assert np.all(km.assignments == 0)


def test_four_point_split_matches_enumeration():
    d = 1e-3
    pts = np.array([[1, d], [1, -d], [d, 1], [-d, 1]], dtype=float)
    pts /= np.linalg.norm(pts, axis=1, keepdims=True)
    km = kmeans(pts, 2, 10, seed=3)

    def objective(assign):
        tot = 0.0
        for j in (0, 1):
            g = pts[np.array(assign) == j]
            if len(g) == 0:
                return -np.inf
            c = g.sum(axis=0)
            tot += (g @ (c / np.linalg.norm(c))).sum()
        return tot
    best = max(itertools.product((0, 1), repeat=4), key=objective)
    same = lambda a, b: all((a[i] == a[j]) == (b[i] == b[j]) for i in range(4) for j in range(4))
    assert same(km.assignments.tolist(), best)
    assert np.bincount(km.assignments).tolist() == [2, 2]
    cs = sorted(km.centroids.tolist())
    assert np.allclose(cs, [[0, 1], [1, 0]], atol=1e-5)


def test_kmeans_deterministic():
    s = unit_store(200, 8, seed=1)
    a, b = kmeans(s.emb, 5, 25, seed=9), kmeans(s.emb, 5, 25, seed=9)
    assert a.centroids.tobytes() == b.centroids.tobytes()
    assert np.array_equal(a.assignments, b.assignments)


def test_kmeans_clamps_k():
    s = unit_store(3, 4)
    km = kmeans(s.emb, 10, 5, seed=0)
    assert km.k == 3 and km.clamped


def test_kmeans_rejects_bad_input():
    with pytest.raises(ValueError):
        kmeans(np.zeros((0, 3)), 1)
    with pytest.raises(ValueError):
        kmeans(np.ones((3, 3)) / np.sqrt(3), 0)


def test_kmeans_duplicate_points():
    pts = np.tile([[1.0, 0.0]], (6, 1))
    km = kmeans(pts, 3, 5, seed=0)
    assert km.assignments.shape == (6,)
    assert np.all(np.isfinite(km.centroids))


# ---------------------------------------------------------------- build


def test_small_set_is_single_leaf():
    s = unit_store(10, 4)
    idx = build_index(s, BuildConfig(leaf_capacity=32))
    assert idx.root.is_leaf and sorted(idx.root.item_ids.tolist()) == list(range(10))


def test_thousand_items_partition_and_depth():
    s = unit_store(1000, 16, seed=2)
    idx = build_index(s, BuildConfig(levels=3, branching=8))
    check_invariants(idx, s)
    assert idx.depth <= 3


def test_wide_branching_builds():
    s = unit_store(3000, 8, seed=3)
    idx = build_index(s, BuildConfig(levels=3, branching=100, leaf_capacity=32, kmeans_iters=5))
    check_invariants(idx, s)


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 400), st.integers(2, 12), st.integers(1, 3), st.integers(2, 6), st.integers(1, 40),
       st.integers(0, 2**31))
def test_random_builds_hold_invariants(n, d, levels, branching, cap, seed):
    s = unit_store(n, d, seed=seed)
    idx = build_index(s, BuildConfig(levels, branching, cap, 10, seed))
    check_invariants(idx, s)
    assert idx.depth <= levels


def _containment_violations(store, cfg):
    idx = build_index(store, cfg)
    leaves = np.stack([l.centroid for l in idx.leaves])
    return int(np.sum((store.emb @ leaves.T).max(axis=1) < store.emb @ idx.root.centroid - 1e-12))


def test_nearest_leaf_usually_beats_root_on_clustered_data():
    from daer.bench import clustered_dataset
    for seed in range(5):
        s, _ = clustered_dataset(5000, 16, 32, 1, seed)
        assert _containment_violations(s, BuildConfig()) <= 5


def test_containment_is_not_guaranteed_for_mean_centroids():
    # isotropic data: normalized-mean centroids admit items closer to the root
    rng = np.random.default_rng(4)
    e = rng.normal(size=(500, 8))
    s = ItemStore(np.arange(500), e / np.linalg.norm(e, axis=1, keepdims=True))
    assert _containment_violations(s, BuildConfig(levels=2, branching=4, leaf_capacity=16)) > 0


def test_build_rejects_empty_store():
    with pytest.raises(ValueError):
        build_index(ItemStore(np.zeros(0, dtype=np.uint64), np.zeros((0, 3))))


# ---------------------------------------------------------------- items


def test_item_store_requires_unit_norm_and_unique_ids():
    with pytest.raises(ValueError):
        ItemStore([1, 2], np.array([[1.0, 0.0], [2.0, 0.0]]))
    with pytest.raises(ValueError):
        ItemStore([1, 1], np.eye(2))
    with pytest.raises(ShapeError):
        ItemStore([1], np.eye(2))


def test_embedding_file_round_trip():
    s = unit_store(50, 7, seed=5, id_offset=2**40)
    q = ItemStore(s.ids, quantize_unit(s.emb))
    data = encode_embeddings(q)
    back = decode_embeddings(data)
    assert np.array_equal(back.ids, q.ids)
    assert np.array_equal(back.emb, q.emb)
    assert encode_embeddings(back) == data


def test_embedding_file_errors():
    data = encode_embeddings(unit_store(5, 3))
    for cut in range(len(data)):
        with pytest.raises(DecodeError):
            decode_embeddings(data[:cut])
    with pytest.raises(DecodeError):
        decode_embeddings(b"DAEREMB2" + data[8:])
    bad = bytearray(data)
    bad[28:32] = np.float32(3.0).tobytes()
    with pytest.raises(DecodeError):
        decode_embeddings(bytes(bad))


# ---------------------------------------------------------------- index file


def test_index_round_trip_bitwise():
    s = unit_store(700, 12, seed=6)
    idx = build_index(s, BuildConfig(levels=3, branching=5, leaf_capacity=20))
    data = serialize_index(idx)
    back = deserialize_index(data, s)
    assert serialize_index(back) == data
    for a, b in zip(idx.nodes, back.nodes):
        assert a.centroid.tobytes() == b.centroid.tobytes()
        assert a.is_leaf == b.is_leaf and a.level == b.level
        if a.is_leaf:
            assert np.array_equal(a.item_ids, b.item_ids)
    assert back.n_items == sum(len(l.item_ids) for l in back.leaves) == 700


def test_truncated_index_is_decode_error():
    s = unit_store(120, 4, seed=7)
    data = serialize_index(build_index(s, BuildConfig(levels=2, branching=3, leaf_capacity=10)))
    for cut in list(range(0, 64)) + list(range(64, len(data), 37)):
        with pytest.raises(DecodeError):
            deserialize_index(data[:cut])


def test_index_header_errors():
    s = unit_store(40, 4, seed=8)
    data = serialize_index(build_index(s, BuildConfig(levels=2, branching=3, leaf_capacity=5)))
    with pytest.raises(DecodeError):
        deserialize_index(b"DAERIDX0" + data[8:])
    bad = bytearray(data)
    bad[8:12] = (9).to_bytes(4, "little")
    with pytest.raises(DecodeError):
        deserialize_index(bytes(bad))
    bad = bytearray(data)
    bad[16:24] = (41).to_bytes(8, "little")     # item count field
    with pytest.raises(DecodeError):
        deserialize_index(bytes(bad))
    with pytest.raises(DecodeError):
        deserialize_index(data + b"\0")


@settings(max_examples=200, deadline=None)
@given(st.binary(max_size=300))
def test_random_bytes_never_crash(blob):
    for data in (blob, b"DAERIDX1" + blob):
        try:
            deserialize_index(data)
        except DecodeError:
            pass


def test_attach_dimension_mismatch():
    s = unit_store(10, 4)
    data = serialize_index(build_index(s))
    with pytest.raises(ShapeError):
        deserialize_index(data, unit_store(10, 5))
