"""Latent-space analysis: seeded k-means, a revocable hierarchical cluster
tree, and DBSCAN over particle positions.

The cluster tree is the user-steered structure: every split runs k-means on
one leaf's member latents, and a revoke undoes the most recent split of that
node, restoring the exact prior tree (the logged split record is popped, so
a split followed by its revoke serializes byte-identically to the state
before the split).
"""
from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import NotLeafError, RevokeOrderError
from .frames import build_kdtree
from .pca import pca  # noqa: F401  (this module is the analysis-facing home of pca)

KMEANS_SHIFT_TOL = 1e-4
KMEANS_MAX_ITER = 300
DBSCAN_DEFAULT_MIN_PTS = 8


# ---------------------------------------------------------------------------
# k-means


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d2 = (np.einsum("ij,ij->i", x, x)[:, None]
          + np.einsum("ij,ij->i", c, c)[None, :] - 2.0 * (x @ c.T))
    np.maximum(d2, 0.0, out=d2)
    return d2


def _kmeanspp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    m = x.shape[0]
    centroids = np.empty((k, x.shape[1]))
    centroids[0] = x[int(rng.integers(m))]
    closest = np.einsum("ij,ij->i", x - centroids[0], x - centroids[0])
    for j in range(1, k):
        total = float(closest.sum())
        if total > 0.0:
            idx = int(rng.choice(m, p=closest / total))
        else:
            idx = int(rng.integers(m))  # all remaining points coincide with a centroid
        centroids[j] = x[idx]
        d = np.einsum("ij,ij->i", x - x[idx], x - x[idx])
        np.minimum(closest, d, out=closest)
    return centroids


def kmeans(vectors: np.ndarray, k: int, seed: int = 0):
    """Seeded k-means++ with Lloyd iterations.

    Returns (labels, centroids, inertia). Converges when the largest
    centroid shift drops below 1e-4, or after 300 iterations. An emptied
    cluster is re-seeded from the point farthest from its assigned centroid.
    """
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"expected (M,v) array, got shape {x.shape}")
    m = x.shape[0]
    if not 1 <= k <= m:
        raise ValueError(f"k={k} not in [1, {m}]")
    rng = np.random.default_rng(seed)
    centroids = _kmeanspp(x, k, rng)
    labels = np.zeros(m, dtype=np.int64)
    for _ in range(KMEANS_MAX_ITER):
        d2 = _sq_dists(x, centroids)
        labels = d2.argmin(axis=1)
        new = np.empty_like(centroids)
        assigned_d2 = d2[np.arange(m), labels]
        taken: list[int] = []
        for j in range(k):
            mask = labels == j
            if mask.any():
                new[j] = x[mask].mean(axis=0)
            else:
                far = assigned_d2.copy()
                far[taken] = -np.inf
                idx = int(far.argmax())
                taken.append(idx)
                new[j] = x[idx]
        shift = float(np.sqrt(((new - centroids) ** 2).sum(axis=1)).max())
        centroids = new
        if shift < KMEANS_SHIFT_TOL:
            break
    d2 = _sq_dists(x, centroids)
    labels = d2.argmin(axis=1)
    inertia = float(d2[np.arange(m), labels].sum())
    return labels, centroids, inertia


# ---------------------------------------------------------------------------
# hierarchical cluster tree


@dataclass
class ClusterNode:
    id: int
    parent: int | None
    children: list[int]
    members: np.ndarray           # int64 particle indices, ascending
    centroid: np.ndarray | None   # latent centroid from the split that made this node
    split_k: int | None           # k used when THIS node was split (None for leaves)

    @property
    def is_leaf(self) -> bool:
        return not self.children


@dataclass
class ClusterTree:
    frame_id: int
    nodes: dict[int, ClusterNode]
    op_log: list[dict] = field(default_factory=list)
    latents: np.ndarray | None = field(default=None, repr=False, compare=False)

    @classmethod
    def create(cls, frame_id: int, n_particles: int,
               latents: np.ndarray | None = None) -> "ClusterTree":
        if latents is not None and latents.shape[0] != n_particles:
            raise ValueError("latents row count disagrees with n_particles")
        root = ClusterNode(id=0, parent=None, children=[],
                           members=np.arange(n_particles, dtype=np.int64),
                           centroid=None, split_k=None)
        return cls(frame_id=int(frame_id), nodes={0: root}, latents=latents)

    @property
    def next_id(self) -> int:
        return max(self.nodes) + 1

    def node(self, node_id: int) -> ClusterNode:
        if node_id not in self.nodes:
            raise ValueError(f"unknown node {node_id}")
        return self.nodes[node_id]

    def leaves(self) -> list[ClusterNode]:
        return [n for n in self.nodes.values() if n.is_leaf]

    def leaf_of(self, particle: int) -> int:
        """Leaf node id containing the particle (walks down from the root)."""
        cur = self.nodes[0]
        while cur.children:
            for cid in cur.children:
                child = self.nodes[cid]
                at = np.searchsorted(child.members, particle)
                if at < child.members.size and child.members[at] == particle:
                    cur = child
                    break
            else:
                raise RuntimeError("tree partition violated")  # pragma: no cover
        return cur.id


def split_node(tree: ClusterTree, node_id: int, k: int = 2, seed: int = 0) -> ClusterTree:
    """Split a leaf into k children by k-means over its member latents."""
    node = tree.node(node_id)
    if not node.is_leaf:
        raise NotLeafError(f"node {node_id} already has children")
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    if k > node.members.size:
        raise ValueError(f"k={k} exceeds member count {node.members.size}")
    if tree.latents is None:
        raise ValueError("tree has no latents attached; cannot split")
    labels, centroids, _ = kmeans(tree.latents[node.members], k, seed)
    base = tree.next_id
    child_ids = list(range(base, base + k))
    for j, cid in enumerate(child_ids):
        tree.nodes[cid] = ClusterNode(
            id=cid, parent=node_id, children=[],
            members=node.members[labels == j],
            centroid=centroids[j].copy(), split_k=None)
    node.children = child_ids
    node.split_k = k
    tree.op_log.append({"op": "split", "node": int(node_id), "k": int(k),
                        "seed": int(seed), "children": child_ids})
    return tree


def revoke_split(tree: ClusterTree, node_id: int) -> ClusterTree:
    """Undo the split of ``node_id``: children removed, split record popped.

    Only a node whose children are all leaves can be revoked (bottom-up).
    """
    node = tree.node(node_id)
    if node.is_leaf:
        raise ValueError(f"node {node_id} has no split to revoke")
    for cid in node.children:
        if not tree.nodes[cid].is_leaf:
            raise RevokeOrderError(
                f"node {node_id} has grandchildren; revoke child splits first")
    for cid in node.children:
        del tree.nodes[cid]
    node.children = []
    node.split_k = None
    for i in range(len(tree.op_log) - 1, -1, -1):
        rec = tree.op_log[i]
        if rec["op"] == "split" and rec["node"] == node_id:
            tree.op_log.pop(i)
            break
    else:  # pragma: no cover - split always logs
        raise RuntimeError(f"no split record found for node {node_id}")
    return tree


def check_partition(tree: ClusterTree) -> None:
    """Raise if children don't exactly partition their parent, or leaves don't
    exactly partition the root's members."""
    for node in tree.nodes.values():
        if node.children:
            parts = [tree.nodes[c].members for c in node.children]
            merged = np.concatenate(parts) if parts else np.empty(0, dtype=np.int64)
            merged.sort()
            if merged.size != node.members.size or not np.array_equal(merged, node.members):
                raise AssertionError(f"children of node {node.id} do not partition it")
    leaf_members = np.concatenate([n.members for n in tree.leaves()])
    leaf_members.sort()
    root = tree.nodes[0]
    if not np.array_equal(leaf_members, root.members):
        raise AssertionError("leaves do not partition the root")


# -- JSON serialization (member arrays compressed to [start, end) ranges)


def encode_ranges(indices: np.ndarray) -> list[list[int]]:
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size == 0:
        return []
    breaks = np.flatnonzero(np.diff(idx) != 1)
    starts = np.concatenate([[0], breaks + 1])
    ends = np.concatenate([breaks, [idx.size - 1]])
    return [[int(idx[a]), int(idx[b]) + 1] for a, b in zip(starts, ends)]


def decode_ranges(ranges) -> np.ndarray:
    if not ranges:
        return np.empty(0, dtype=np.int64)
    return np.concatenate([np.arange(a, b, dtype=np.int64) for a, b in ranges])


def tree_to_payload(tree: ClusterTree) -> dict:
    nodes = []
    for nid in sorted(tree.nodes):
        n = tree.nodes[nid]
        nodes.append({
            "id": n.id,
            "parent": n.parent,
            "children": list(n.children),
            "members": encode_ranges(n.members),
            "n_members": int(n.members.size),
            "centroid": None if n.centroid is None else [float(c) for c in n.centroid],
            "split_k": n.split_k,
        })
    return {"frame_id": tree.frame_id, "nodes": nodes, "op_log": list(tree.op_log)}


def tree_to_json_bytes(tree: ClusterTree) -> bytes:
    return json.dumps(tree_to_payload(tree), sort_keys=True,
                      separators=(",", ":")).encode("utf-8")


def tree_from_payload(payload: dict, latents: np.ndarray | None = None) -> ClusterTree:
    nodes: dict[int, ClusterNode] = {}
    for rec in payload["nodes"]:
        cent = rec.get("centroid")
        nodes[int(rec["id"])] = ClusterNode(
            id=int(rec["id"]),
            parent=None if rec["parent"] is None else int(rec["parent"]),
            children=[int(c) for c in rec["children"]],
            members=decode_ranges(rec["members"]),
            centroid=None if cent is None else np.asarray(cent, dtype=np.float64),
            split_k=None if rec.get("split_k") is None else int(rec["split_k"]))
    tree = ClusterTree(frame_id=int(payload["frame_id"]), nodes=nodes,
                       op_log=[dict(r) for r in payload.get("op_log", [])],
                       latents=latents)
    return tree


# ---------------------------------------------------------------------------
# DBSCAN


def dbscan(positions: np.ndarray, eps: float, min_pts: int) -> np.ndarray:
    """Standard DBSCAN over Euclidean 3D distance; -1 labels noise.

    A point is core when its eps-ball (itself included) holds at least
    min_pts points. Labels are deterministic for a fixed point order.
    """
    pos = np.asarray(positions, dtype=np.float64)
    if pos.ndim != 2 or pos.shape[1] != 3:
        raise ValueError(f"positions must be (M,3), got {pos.shape}")
    if eps <= 0:
        raise ValueError(f"eps must be > 0, got {eps}")
    if min_pts < 1:
        raise ValueError(f"min_pts must be >= 1, got {min_pts}")
    m = pos.shape[0]
    tree = build_kdtree(pos)
    neighbors = tree.query_ball_point(pos, eps)
    core = np.fromiter((len(nb) >= min_pts for nb in neighbors), dtype=bool, count=m)
    labels = np.full(m, -1, dtype=np.int64)
    cluster = 0
    for i in range(m):
        if labels[i] != -1 or not core[i]:
            continue
        labels[i] = cluster
        queue = deque([i])
        while queue:
            p = queue.popleft()
            for q in neighbors[p]:
                if labels[q] == -1:
                    labels[q] = cluster
                    if core[q]:
                        queue.append(q)
        cluster += 1
    return labels


def dbscan_default_eps(positions: np.ndarray) -> float:
    """2x the mean nearest-neighbor distance of the input subset."""
    pos = np.asarray(positions, dtype=np.float64)
    if pos.shape[0] < 2:
        raise ValueError("need at least 2 points for a default eps")
    tree = build_kdtree(pos)
    d, _ = tree.query(pos, k=2)
    return 2.0 * float(d[:, 1].mean())
