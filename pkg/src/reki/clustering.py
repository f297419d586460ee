"""Streaming hierarchical clustering over pretrained entity embeddings.

Points are inserted one at a time: descend from the root, at every internal
node picking the child whose point set is most similar under a mean-RBF
point-set kernel, then attach to the reached leaf. Leaves that outgrow their
capacity split into two children by seeded 2-means. Clusters are cut from
the tree lazily, so the cluster count can change without rebuilding.

The tree is single-writer: inserts must be serialized by the caller; kernel
queries and cluster extraction may run concurrently with each other but not
with inserts.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import ClusterError


def point_set_kernel(x: np.ndarray, members: np.ndarray, gamma: float) -> float:
    """K(x, S) = mean over s in S of exp(-gamma * ||x - s||^2)."""
    members = np.atleast_2d(np.asarray(members, dtype=np.float64))
    if members.shape[0] == 0:
        raise ClusterError("point-set kernel of an empty set")
    diff = members - np.asarray(x, dtype=np.float64)
    sq = np.einsum("ij,ij->i", diff, diff)
    return float(np.mean(np.exp(-gamma * sq)))


def estimate_gamma(points: np.ndarray, seed: int, sample_size: int = 256) -> float:
    """1 / median^2 of pairwise distances over a seeded point sample."""
    points = np.asarray(points, dtype=np.float64)
    if points.shape[0] < 2:
        return 1.0
    rng = np.random.default_rng(seed)
    take = min(sample_size, points.shape[0])
    idx = rng.choice(points.shape[0], size=take, replace=False)
    s = points[idx]
    sq = np.sum((s[:, None, :] - s[None, :, :]) ** 2, axis=-1)
    upper = sq[np.triu_indices(take, k=1)]
    median = float(np.median(np.sqrt(upper)))
    if median <= 0.0:
        return 1.0
    return 1.0 / (median * median)


@dataclass
class _Node:
    members: list[int] = field(default_factory=list)  # point indices
    children: list[int] = field(default_factory=list)  # node ids; binary after splits


@dataclass(frozen=True)
class Cluster:
    cluster_id: str
    kind: str
    member_ids: tuple[str, ...]
    representation_items: tuple[str, ...] = ()


class ClusterTree:
    """Arena-backed streaming kernel tree over fixed-dimension points."""

    def __init__(self, dim: int, gamma: float, leaf_capacity: int, seed: int):
        if dim < 1:
            raise ClusterError(f"point dimension must be >= 1, got {dim}")
        if leaf_capacity < 1:
            raise ClusterError(f"leaf capacity must be >= 1, got {leaf_capacity}")
        self.dim = dim
        self.gamma = gamma
        self.leaf_capacity = leaf_capacity
        self.nodes: list[_Node] = []
        self.root: int | None = None
        self.insertion_count = 0
        self.last_insert_touched = 0
        self._rng = np.random.default_rng(seed)
        self._matrix = np.zeros((0, dim))
        self._ids: list[str] = []

    # -- storage ------------------------------------------------------

    def _append_point(self, point: np.ndarray, point_id: str) -> int:
        if len(self._ids) == self._matrix.shape[0]:
            grown = np.zeros((max(64, 2 * self._matrix.shape[0]), self.dim))
            grown[: self._matrix.shape[0]] = self._matrix
            self._matrix = grown
        idx = len(self._ids)
        self._matrix[idx] = point
        self._ids.append(point_id)
        return idx

    def points_of(self, node_id: int) -> np.ndarray:
        return self._matrix[np.asarray(self.nodes[node_id].members, dtype=np.intp)]

    def id_of(self, point_index: int) -> str:
        return self._ids[point_index]

    # -- insertion ----------------------------------------------------

    def insert(self, point, point_id: str) -> None:
        point = np.asarray(point, dtype=np.float64).reshape(-1)
        if point.shape[0] != self.dim:
            raise ClusterError(f"point dimension {point.shape[0]} vs tree dimension {self.dim}")
        touched = 0
        idx = self._append_point(point, point_id)
        if self.root is None:
            self.nodes.append(_Node(members=[idx]))
            self.root = 0
            self.insertion_count = 1
            self.last_insert_touched = 1
            return
        node_id = self.root
        path = []
        while self.nodes[node_id].children:
            touched += 1
            best_child, best_k = -1, -np.inf
            for child_id in self.nodes[node_id].children:
                touched += 1
                k = point_set_kernel(point, self.points_of(child_id), self.gamma)
                if k > best_k:
                    best_child, best_k = child_id, k
            path.append(node_id)
            node_id = best_child
        touched += 1
        for ancestor in path:
            self.nodes[ancestor].members.append(idx)
        leaf = self.nodes[node_id]
        leaf.members.append(idx)
        if len(leaf.members) > self.leaf_capacity:
            self._split_leaf(node_id)
        self.insertion_count += 1
        self.last_insert_touched = touched

    def _split_leaf(self, node_id: int) -> None:
        """Binary 2-means split (10 iterations, seeded init) of an overfull leaf."""
        members = self.nodes[node_id].members
        pts = self._matrix[np.asarray(members, dtype=np.intp)]
        n = len(members)
        first = int(self._rng.integers(n))
        dist_to_first = np.sum((pts - pts[first]) ** 2, axis=1)
        second = int(np.argmax(dist_to_first))
        if second == first:  # all points identical; force an arbitrary partner
            second = (first + 1) % n
        centers = np.stack([pts[first], pts[second]])
        assign = np.zeros(n, dtype=np.intp)
        for _ in range(10):
            d0 = np.sum((pts - centers[0]) ** 2, axis=1)
            d1 = np.sum((pts - centers[1]) ** 2, axis=1)
            assign = (d1 < d0).astype(np.intp)
            for side in (0, 1):
                chosen = pts[assign == side]
                if chosen.shape[0]:
                    centers[side] = chosen.mean(axis=0)
        if assign.min() == assign.max():  # degenerate: keep both sides non-empty
            assign[int(np.argmax(np.sum((pts - centers[0]) ** 2, axis=1)))] = 1 - assign[0]
        left = [m for m, a in zip(members, assign) if a == 0]
        right = [m for m, a in zip(members, assign) if a == 1]
        left_id = len(self.nodes)
        self.nodes.append(_Node(members=left))
        right_id = len(self.nodes)
        self.nodes.append(_Node(members=right))
        self.nodes[node_id].children = [left_id, right_id]

    @property
    def height(self) -> int:
        if self.root is None:
            return 0

        def depth(node_id: int) -> int:
            node = self.nodes[node_id]
            if not node.children:
                return 1
            return 1 + max(depth(c) for c in node.children)

        return depth(self.root)

    def leaf_members(self) -> list[list[int]]:
        return [n.members for n in self.nodes if not n.children]


def extract_clusters(tree: ClusterTree, max_cluster_size: int, kind: str = "item") -> list[Cluster]:
    """Top-down cut: a node becomes a cluster when its member count fits and
    its parent's does not (the root included). Undersplit leaves larger than
    the cap are chunked so the result is always a partition within size."""
    if max_cluster_size < 1:
        raise ClusterError(f"max cluster size must be >= 1, got {max_cluster_size}")
    if tree.root is None:
        raise ClusterError("cannot extract clusters from an empty tree")
    clusters: list[Cluster] = []

    def emit(members: Sequence[int]) -> None:
        ids = tuple(tree.id_of(m) for m in members)
        clusters.append(Cluster(f"{kind}_c{len(clusters)}", kind, ids))

    def walk(node_id: int) -> None:
        node = tree.nodes[node_id]
        if len(node.members) <= max_cluster_size:
            emit(node.members)
            return
        if not node.children:
            for start in range(0, len(node.members), max_cluster_size):
                emit(node.members[start:start + max_cluster_size])
            return
        for child in node.children:
            walk(child)

    walk(tree.root)
    return clusters


def embed_users(histories: Mapping[str, Sequence[str]],
                item_embeddings: Mapping[str, np.ndarray],
                profile_embeddings: Mapping[str, np.ndarray] | None = None) -> dict[str, np.ndarray]:
    """User vector = concat(mean of history item embeddings, profile embedding);
    either part is zero-filled when absent, but not both."""
    profile_embeddings = profile_embeddings or {}
    item_dim = len(next(iter(item_embeddings.values()))) if item_embeddings else 0
    profile_dim = len(next(iter(profile_embeddings.values()))) if profile_embeddings else 0
    out: dict[str, np.ndarray] = {}
    for user, history in histories.items():
        vectors = [np.asarray(item_embeddings[i], dtype=np.float64)
                   for i in history if i in item_embeddings]
        profile = profile_embeddings.get(user)
        if not vectors and profile is None:
            raise ClusterError(f"user {user!r} has neither history embeddings nor a profile")
        hist_part = (np.mean(vectors, axis=0) if vectors else np.zeros(item_dim))
        prof_part = (np.asarray(profile, dtype=np.float64) if profile is not None
                     else np.zeros(profile_dim))
        out[user] = np.concatenate([hist_part, prof_part])
    return out


def represent_user_cluster(cluster: Cluster, histories: Mapping[str, Sequence[str]],
                           d: int) -> list[str]:
    """Top-d items by the number of cluster members whose history contains
    them (set membership, not multiplicity); ties break lexicographically."""
    if d < 1:
        raise ClusterError(f"representation size d must be >= 1, got {d}")
    counts: dict[str, int] = {}
    for user in cluster.member_ids:
        for item in set(histories.get(user, ())):
            counts[item] = counts.get(item, 0) + 1
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return [item for item, _ in ranked[:d]]
