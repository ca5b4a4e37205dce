"""k-means, the revocable cluster tree, DBSCAN, PCA."""

import json

import numpy as np
import pytest

from partlat.analysis import (
    ClusterTree,
    check_partition,
    dbscan,
    dbscan_default_eps,
    decode_ranges,
    encode_ranges,
    kmeans,
    pca,
    revoke_split,
    split_node,
    tree_from_payload,
    tree_to_json_bytes,
    tree_to_payload,
)
from partlat.errors import InsufficientDataError, NotLeafError, RevokeOrderError

from oracles import ref_dbscan


def blobs(rng, k=3, per=40, v=4, spread=0.02):
    centers = rng.uniform(-4.0, 4.0, size=(k, v))
    pts = np.concatenate([c + spread * rng.normal(size=(per, v)) for c in centers])
    labels = np.repeat(np.arange(k), per)
    return pts, labels


# ---------------------------------------------------------------------------
# k-means


def test_kmeans_recovers_separated_blobs(rng):
    pts, truth = blobs(rng)
    labels, centroids, inertia = kmeans(pts, 3, seed=2)
    assert centroids.shape == (3, 4)
    # perfect recovery up to label permutation
    for g in range(3):
        got = labels[truth == g]
        assert len(set(got.tolist())) == 1
    assert len(set(labels.tolist())) == 3
    assert inertia < 0.1 * kmeans(pts, 1, seed=2)[2]


def test_kmeans_labels_consistent_with_centroids(rng):
    x = rng.normal(size=(120, 5))
    labels, centroids, inertia = kmeans(x, 7, seed=0)
    d2 = ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(-1)
    assert np.array_equal(labels, d2.argmin(axis=1))
    assert inertia == pytest.approx(d2.min(axis=1).sum(), rel=1e-12)


def test_kmeans_k1_is_global_mean(rng):
    x = rng.normal(size=(50, 3))
    labels, centroids, inertia = kmeans(x, 1, seed=9)
    assert np.array_equal(labels, np.zeros(50, dtype=np.int64))
    assert np.allclose(centroids[0], x.mean(axis=0), atol=1e-12)
    assert inertia == pytest.approx(((x - x.mean(0)) ** 2).sum(), rel=1e-12)


def test_kmeans_k_equals_m(rng):
    x = rng.normal(size=(12, 2))
    labels, centroids, inertia = kmeans(x, 12, seed=4)
    assert sorted(labels.tolist()) == list(range(12))
    assert inertia == pytest.approx(0.0, abs=1e-20)


def test_kmeans_identical_points(rng):
    x = np.ones((10, 3))
    labels, centroids, inertia = kmeans(x, 2, seed=0)
    assert inertia == 0.0
    assert set(labels.tolist()) <= {0, 1}


def test_kmeans_deterministic(rng):
    x = rng.normal(size=(80, 4))
    a = kmeans(x, 5, seed=11)
    b = kmeans(x, 5, seed=11)
    assert np.array_equal(a[0], b[0])
    assert np.array_equal(a[1], b[1])
    assert a[2] == b[2]


def test_kmeans_validation(rng):
    x = rng.normal(size=(10, 2))
    with pytest.raises(ValueError, match="k="):
        kmeans(x, 0)
    with pytest.raises(ValueError, match="k="):
        kmeans(x, 11)
    with pytest.raises(ValueError, match="expected"):
        kmeans(np.zeros(5), 2)


# ---------------------------------------------------------------------------
# cluster tree


def make_tree(rng, n=64, v=3, frame_id=0):
    latents = rng.normal(size=(n, v))
    return ClusterTree.create(frame_id, n, latents=None), latents


def test_tree_create_and_split(rng):
    tree, latents = make_tree(rng)
    tree.latents = latents
    assert tree.nodes[0].members.size == 64
    assert tree.leaf_of(17) == 0
    split_node(tree, 0, k=3, seed=1)
    assert tree.nodes[0].children == [1, 2, 3]
    assert tree.nodes[0].split_k == 3
    check_partition(tree)
    assert len(tree.op_log) == 1
    rec = tree.op_log[0]
    assert rec == {"op": "split", "node": 0, "k": 3, "seed": 1,
                   "children": [1, 2, 3]}
    for cid in (1, 2, 3):
        node = tree.nodes[cid]
        assert node.parent == 0
        assert node.centroid.shape == (3,)
        for p in node.members:
            assert tree.leaf_of(int(p)) == cid


def test_split_validation(rng):
    tree, latents = make_tree(rng)
    with pytest.raises(ValueError, match="no latents"):
        split_node(tree, 0)
    tree.latents = latents
    with pytest.raises(ValueError, match="unknown node"):
        split_node(tree, 99)
    with pytest.raises(ValueError, match="k must"):
        split_node(tree, 0, k=1)
    split_node(tree, 0, k=2, seed=0)
    with pytest.raises(NotLeafError):
        split_node(tree, 0)
    small = tree.nodes[1]
    with pytest.raises(ValueError, match="exceeds"):
        split_node(tree, 1, k=small.members.size + 1)


def test_revoke_restores_bytes(rng):
    tree, latents = make_tree(rng)
    tree.latents = latents
    split_node(tree, 0, k=2, seed=5)
    before = tree_to_json_bytes(tree)
    split_node(tree, 1, k=2, seed=7)
    assert tree_to_json_bytes(tree) != before
    revoke_split(tree, 1)
    assert tree_to_json_bytes(tree) == before
    check_partition(tree)


def test_revoke_order_enforced(rng):
    tree, latents = make_tree(rng)
    tree.latents = latents
    split_node(tree, 0, k=2, seed=0)
    split_node(tree, 1, k=2, seed=0)
    with pytest.raises(RevokeOrderError, match="grandchildren"):
        revoke_split(tree, 0)
    with pytest.raises(ValueError, match="no split"):
        revoke_split(tree, 2)
    revoke_split(tree, 1)
    revoke_split(tree, 0)
    assert list(tree.nodes) == [0]
    assert tree.op_log == []


def test_node_ids_replay_after_revoke(rng):
    tree, latents = make_tree(rng)
    tree.latents = latents
    split_node(tree, 0, k=2, seed=3)
    first = tree_to_json_bytes(tree)
    revoke_split(tree, 0)
    split_node(tree, 0, k=2, seed=3)
    assert tree_to_json_bytes(tree) == first  # same ids, same members


def test_tree_fuzz_against_mirror(rng):
    # random split/revoke sequences mirrored by a plain dict-of-sets model
    for trial in range(25):
        n = int(rng.integers(8, 80))
        latents = rng.normal(size=(n, 3))
        tree = ClusterTree.create(0, n, latents=latents)
        tree.latents = latents
        mirror = {0: set(range(n))}
        children = {0: []}
        parent = {}
        for _ in range(30):
            leaves = [nid for nid, ch in children.items() if not ch]
            splittable = [nid for nid in leaves if len(mirror[nid]) >= 2]
            revocable = [nid for nid, ch in children.items()
                         if ch and all(not children[c] for c in ch)]
            ops = (["split"] if splittable else []) + (["revoke"] if revocable else [])
            if not ops:
                break
            op = ops[int(rng.integers(len(ops)))]
            if op == "split":
                nid = splittable[int(rng.integers(len(splittable)))]
                k = int(rng.integers(2, min(4, len(mirror[nid])) + 1))
                split_node(tree, nid, k=k, seed=int(rng.integers(1000)))
                new_ids = tree.nodes[nid].children
                children[nid] = list(new_ids)
                for cid in new_ids:
                    mirror[cid] = set(tree.nodes[cid].members.tolist())
                    children[cid] = []
                    parent[cid] = nid
                assert set().union(*[mirror[c] for c in new_ids]) == mirror[nid]
                assert sum(len(mirror[c]) for c in new_ids) == len(mirror[nid])
            else:
                nid = revocable[int(rng.integers(len(revocable)))]
                revoke_split(tree, nid)
                for cid in children[nid]:
                    del mirror[cid]
                    del children[cid]
                    del parent[cid]
                children[nid] = []
            assert set(tree.nodes) == set(mirror)
            for nid2, members in mirror.items():
                assert set(tree.nodes[nid2].members.tolist()) == members
            check_partition(tree)
            probe = int(rng.integers(n))
            leaf = tree.leaf_of(probe)
            assert probe in mirror[leaf]
            assert not children[leaf]


# ---------------------------------------------------------------------------
# range codec and payload round trip


def test_range_codec():
    assert encode_ranges(np.array([0, 1, 2, 5])) == [[0, 3], [5, 6]]
    assert encode_ranges(np.array([], dtype=np.int64)) == []
    assert encode_ranges(np.array([7])) == [[7, 8]]
    assert np.array_equal(decode_ranges([[0, 3], [5, 6]]), [0, 1, 2, 5])
    assert decode_ranges([]).size == 0


def test_range_codec_round_trip_random(rng):
    for _ in range(50):
        n = int(rng.integers(1, 200))
        idx = np.sort(rng.choice(500, size=n, replace=False)).astype(np.int64)
        assert np.array_equal(decode_ranges(encode_ranges(idx)), idx)


def test_payload_round_trip(rng):
    tree, latents = make_tree(rng)
    tree.latents = latents
    split_node(tree, 0, k=3, seed=2)
    split_node(tree, 2, k=2, seed=8)
    payload = tree_to_payload(tree)
    back = tree_from_payload(payload, latents=latents)
    assert tree_to_json_bytes(back) == tree_to_json_bytes(tree)
    assert back.latents is latents
    # payloads survive an actual JSON round trip
    back2 = tree_from_payload(json.loads(tree_to_json_bytes(tree)))
    assert tree_to_json_bytes(back2) == tree_to_json_bytes(tree)
    node = payload["nodes"][0]
    assert set(node) == {"id", "parent", "children", "members", "n_members",
                         "centroid", "split_k"}
    assert node["n_members"] == 64


# ---------------------------------------------------------------------------
# DBSCAN


def test_dbscan_matches_reference(rng):
    for _ in range(5):
        pos = rng.uniform(size=(120, 3))
        eps = float(rng.uniform(0.05, 0.2))
        min_pts = int(rng.integers(2, 8))
        assert np.array_equal(dbscan(pos, eps, min_pts),
                              ref_dbscan(pos, eps, min_pts))


def test_dbscan_separates_blobs_and_noise(rng):
    a = 0.3 + 0.01 * rng.normal(size=(40, 3))
    b = 0.7 + 0.01 * rng.normal(size=(40, 3))
    noise = np.array([[0.05, 0.95, 0.5]])
    pos = np.vstack([a, b, noise])
    labels = dbscan(pos, eps=0.05, min_pts=5)
    assert labels[80] == -1
    assert len(set(labels[:40].tolist())) == 1
    assert len(set(labels[40:80].tolist())) == 1
    assert labels[0] != labels[40]


def test_dbscan_validation(rng):
    with pytest.raises(ValueError, match="positions"):
        dbscan(np.zeros((5, 2)), 0.1, 2)
    with pytest.raises(ValueError, match="eps"):
        dbscan(np.zeros((5, 3)), 0.0, 2)
    with pytest.raises(ValueError, match="min_pts"):
        dbscan(np.zeros((5, 3)), 0.1, 0)


def test_dbscan_default_eps(rng):
    side = np.linspace(0.0, 1.0, 4)
    gx, gy, gz = np.meshgrid(side, side, side, indexing="ij")
    grid = np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)
    assert dbscan_default_eps(grid) == pytest.approx(2.0 / 3.0, abs=1e-12)
    with pytest.raises(ValueError, match="at least 2"):
        dbscan_default_eps(grid[:1])


# ---------------------------------------------------------------------------
# PCA


def test_pca_matches_eigendecomposition(rng):
    x = rng.normal(size=(60, 5)) @ np.diag([3.0, 2.0, 1.0, 0.5, 0.1])
    basis, mean, proj = pca(x, 3)
    assert basis.shape == (3, 5)
    assert np.allclose(mean, x.mean(axis=0), atol=1e-12)
    # rows orthonormal
    assert np.allclose(basis @ basis.T, np.eye(3), atol=1e-10)
    # projected variance is decreasing and matches the top eigenvalues
    cov = np.cov(x, rowvar=False)
    eigvals = np.sort(np.linalg.eigvalsh(cov))[::-1]
    var = proj.var(axis=0, ddof=1)
    assert np.all(np.diff(var) <= 1e-12)
    assert np.allclose(var, eigvals[:3], rtol=1e-8)
    # sign rule: largest-magnitude entry of each row is positive
    for row in basis:
        assert row[np.argmax(np.abs(row))] > 0
    # reconstruction from all components is exact
    full_basis, _, full_proj = pca(x, 5)
    recon = full_proj @ full_basis + x.mean(axis=0)
    assert np.allclose(recon, x, atol=1e-9)


def test_pca_validation(rng):
    with pytest.raises(InsufficientDataError):
        pca(np.zeros((1, 3)), 1)
    with pytest.raises(ValueError, match="out_dim"):
        pca(np.zeros((5, 3)), 4)
    with pytest.raises(ValueError, match="2-D"):
        pca(np.zeros(5), 1)
