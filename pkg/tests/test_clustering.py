"""Streaming kernel-tree clustering: kernel oracle, partition invariants,
cluster extraction, user embedding, and cluster representation counting."""

import numpy as np
import pytest

from reki.clustering import (
    Cluster,
    ClusterTree,
    embed_users,
    estimate_gamma,
    extract_clusters,
    point_set_kernel,
    represent_user_cluster,
)
from reki.errors import ClusterError


def build_tree(points, leaf_capacity=8, seed=0, gamma=None):
    points = np.asarray(points, dtype=float)
    g = estimate_gamma(points, seed=seed) if gamma is None else gamma
    tree = ClusterTree(dim=points.shape[1], gamma=g, leaf_capacity=leaf_capacity, seed=seed)
    for i, p in enumerate(points):
        tree.insert(p, f"p{i}")
    return tree


# ------------------------------------------------------------------
# kernel
# ------------------------------------------------------------------

def test_kernel_exact_match_is_one():
    x = np.array([1.0, 2.0, 3.0])
    assert point_set_kernel(x, x.reshape(1, -1), gamma=0.7) == 1.0


def test_kernel_vanishes_at_distance():
    x = np.full(4, 1e4)
    members = np.zeros((3, 4))
    assert point_set_kernel(x, members, gamma=1.0) == 0.0


def test_kernel_matches_direct_sum_oracle():
    rng = np.random.default_rng(2)
    x = rng.normal(size=6)
    members = rng.normal(size=(5, 6))
    gamma = 0.37
    want = sum(np.exp(-gamma * float(np.sum((x - s) ** 2))) for s in members) / 5
    assert point_set_kernel(x, members, gamma) == pytest.approx(want, abs=1e-15)


def test_kernel_monotone_in_distance_scale():
    rng = np.random.default_rng(3)
    x = rng.normal(size=5)
    members = rng.normal(size=(4, 5)) + 2.0
    gamma = 0.5
    base = point_set_kernel(x, members, gamma)
    stretched = point_set_kernel(x * 2.0, members * 2.0, gamma)
    assert stretched < base


def test_kernel_rejects_empty_set():
    with pytest.raises(ClusterError):
        point_set_kernel(np.zeros(2), np.zeros((0, 2)), 1.0)


# ------------------------------------------------------------------
# insertion
# ------------------------------------------------------------------

def test_first_point_single_leaf():
    tree = ClusterTree(dim=3, gamma=1.0, leaf_capacity=4, seed=0)
    tree.insert([1.0, 0.0, 0.0], "a")
    assert tree.insertion_count == 1
    assert tree.leaf_members() == [[0]]


def test_identical_points_share_a_leaf():
    tree = ClusterTree(dim=2, gamma=1.0, leaf_capacity=10, seed=0)
    rng = np.random.default_rng(4)
    for i in range(6):
        tree.insert(rng.normal(size=2), f"bg{i}")
    tree.insert([5.0, 5.0], "dup0")
    tree.insert([5.0, 5.0], "dup1")
    leaves = tree.leaf_members()
    holding = [leaf for leaf in leaves if 6 in leaf]
    assert holding and 7 in holding[0]


def test_dimension_mismatch():
    tree = ClusterTree(dim=3, gamma=1.0, leaf_capacity=4, seed=0)
    with pytest.raises(ClusterError):
        tree.insert([1.0, 2.0], "bad")


def walk_membership(tree):
    """Tree-walk oracle: every internal node's members equal the union of its
    children's; returns the set of points found in leaves."""
    seen = []

    def walk(node_id):
        node = tree.nodes[node_id]
        if not node.children:
            seen.extend(node.members)
            return set(node.members)
        union = set()
        for c in node.children:
            union |= walk(c)
        assert union == set(node.members)
        return union

    walk(tree.root)
    return seen


def test_thousand_inserts_partition_and_union_invariant():
    rng = np.random.default_rng(5)
    points = rng.normal(size=(1000, 6))
    tree = build_tree(points, leaf_capacity=20, seed=1)
    seen = walk_membership(tree)
    assert sorted(seen) == list(range(1000))  # each point in exactly one leaf


def test_insert_locality_bounded_by_height_times_arity():
    rng = np.random.default_rng(6)
    points = rng.normal(size=(400, 4))
    tree = build_tree(points, leaf_capacity=10, seed=2)
    probe = rng.normal(size=4)
    tree.insert(probe, "probe")
    assert tree.last_insert_touched <= tree.height * 3


def test_tree_deterministic_across_runs():
    rng = np.random.default_rng(7)
    points = rng.normal(size=(300, 5))
    t1 = build_tree(points, leaf_capacity=12, seed=9)
    t2 = build_tree(points, leaf_capacity=12, seed=9)
    assert [n.members for n in t1.nodes] == [n.members for n in t2.nodes]
    assert [n.children for n in t1.nodes] == [n.children for n in t2.nodes]


# ------------------------------------------------------------------
# extraction
# ------------------------------------------------------------------

def test_whole_tree_fits_one_cluster():
    points = np.random.default_rng(8).normal(size=(5, 3))
    tree = build_tree(points, leaf_capacity=8)
    clusters = extract_clusters(tree, 80)
    assert len(clusters) == 1
    assert sorted(clusters[0].member_ids) == sorted(f"p{i}" for i in range(5))


def test_cap_one_gives_singletons():
    points = np.random.default_rng(9).normal(size=(7, 3))
    tree = build_tree(points, leaf_capacity=4)
    clusters = extract_clusters(tree, 1)
    assert len(clusters) == 7
    assert all(len(c.member_ids) == 1 for c in clusters)


def test_extraction_partitions_500_points():
    points = np.random.default_rng(10).normal(size=(500, 8))
    tree = build_tree(points, leaf_capacity=80, seed=3)
    clusters = extract_clusters(tree, 80)
    sizes = [len(c.member_ids) for c in clusters]
    assert all(s <= 80 for s in sizes)
    assert sum(sizes) == 500
    all_ids = [i for c in clusters for i in c.member_ids]
    assert len(set(all_ids)) == 500


def test_extract_validates_inputs():
    points = np.random.default_rng(11).normal(size=(5, 2))
    tree = build_tree(points)
    with pytest.raises(ClusterError):
        extract_clusters(tree, 0)
    empty = ClusterTree(dim=2, gamma=1.0, leaf_capacity=4, seed=0)
    with pytest.raises(ClusterError):
        extract_clusters(empty, 10)


# ------------------------------------------------------------------
# user embedding
# ------------------------------------------------------------------

def test_single_item_history_passthrough():
    e = np.array([1.0, -2.0, 0.5])
    vecs = embed_users({"u": ["a"]}, {"a": e}, {"u": np.array([9.0])})
    np.testing.assert_array_equal(vecs["u"], [1.0, -2.0, 0.5, 9.0])


def test_absent_profile_zero_part():
    e = np.array([2.0, 4.0])
    vecs = embed_users({"u": ["a"]}, {"a": e}, None)
    np.testing.assert_array_equal(vecs["u"], [2.0, 4.0])
    mixed = embed_users({"u": ["a"], "v": ["a"]}, {"a": e}, {"v": np.array([1.0, 1.0])})
    np.testing.assert_array_equal(mixed["u"], [2.0, 4.0, 0.0, 0.0])


def test_history_mean_matches_arithmetic_oracle():
    rng = np.random.default_rng(12)
    embs = {f"i{k}": rng.normal(size=4) for k in range(3)}
    vecs = embed_users({"u": ["i0", "i1", "i2"]}, embs)
    want = (embs["i0"] + embs["i1"] + embs["i2"]) / 3.0
    np.testing.assert_allclose(vecs["u"], want, atol=1e-15)


def test_user_without_any_signal_rejected():
    with pytest.raises(ClusterError):
        embed_users({"u": []}, {"a": np.ones(2)}, None)


# ------------------------------------------------------------------
# cluster representation
# ------------------------------------------------------------------

def test_representation_counts_membership():
    cluster = Cluster("c0", "user", ("u1", "u2", "u3"))
    histories = {"u1": ["a", "b", "c"], "u2": ["b", "c"], "u3": ["c"]}
    assert represent_user_cluster(cluster, histories, 2) == ["c", "b"]


def test_representation_saturates_below_d():
    cluster = Cluster("c0", "user", ("u1",))
    assert represent_user_cluster(cluster, {"u1": ["x", "y"]}, 10) == ["x", "y"]


def test_representation_ignores_multiplicity():
    cluster = Cluster("c0", "user", ("u1", "u2"))
    histories = {"u1": ["a", "a", "a"], "u2": ["b"]}
    # a and b both touch one member; lexicographic tie-break puts a first
    assert represent_user_cluster(cluster, histories, 2) == ["a", "b"]


def test_representation_matches_bruteforce_oracle():
    rng = np.random.default_rng(13)
    for trial in range(20):
        n_users = int(rng.integers(2, 50))
        users = tuple(f"u{k}" for k in range(n_users))
        histories = {
            u: [f"i{rng.integers(0, 100)}" for _ in range(int(rng.integers(1, 30)))]
            for u in users
        }
        cluster = Cluster("c0", "user", users)
        for d in (1, 2, 15):
            got = represent_user_cluster(cluster, histories, d)
            counts = {}
            for u in users:
                for item in set(histories[u]):
                    counts[item] = counts.get(item, 0) + 1
            want = [item for item, _ in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))][:d]
            assert got == want
