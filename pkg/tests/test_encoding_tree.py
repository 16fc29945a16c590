import math

import numpy as np
import pytest

from sihd import (StateGraph, bound_check, compress, flat_tree, hcse_optimize,
                  layer_partition, node_gain, one_dim_entropy,
                  reweighted_entropy, stretch, tree_entropy, tree_from_partition)
from sihd.encoding_tree import (cached_entropy, entropy_identity_gap,
                                gain_table, refresh_caches)

from conftest import (complete_graph, cycle_graph, make_graph, path_graph,
                      random_valid_tree, random_weighted_graph, star_graph,
                      two_cliques_bridge)


# ---------------------------------------------------------------------------
# Independent oracle: literal entropy evaluation from explicit vertex sets
# ---------------------------------------------------------------------------

def literal_entropy(graph, tree):
    """Direct sum of -(g/vol) log2(vol(a)/vol(parent)) using nothing but
    adjacency lookups over explicit vertex sets."""
    n = graph.n_vertices
    volume = float(graph.degrees.sum())

    def vol(vs):
        return float(sum(graph.degrees[v] for v in vs))

    def cut(vs):
        inside = set(int(v) for v in vs)
        total = 0.0
        for i in inside:
            for j in range(n):
                if j not in inside:
                    total += graph.adjacency[i, j]
        return total

    total = 0.0
    for nid, node in tree.nodes.items():
        if node.parent is None:
            continue
        vs = tree.vertex_set(nid)
        g, v, vp = cut(vs), vol(vs), vol(tree.vertex_set(node.parent))
        if g <= 0 or v <= 0 or v >= vp:
            continue
        total -= (g / volume) * math.log2(v / vp)
    return total


def set_partitions(n):
    if n == 1:
        yield [[0]]
        return
    for part in set_partitions(n - 1):
        for i in range(len(part)):
            yield part[:i] + [part[i] + [n - 1]] + part[i + 1:]
        yield part + [[n - 1]]


def exhaustive_two_level_optimum(graph):
    best = math.inf
    for part in set_partitions(graph.n_vertices):
        best = min(best, tree_entropy(graph, tree_from_partition(graph, part)))
    return best


# ---------------------------------------------------------------------------
# Flat trees and basic entropy values
# ---------------------------------------------------------------------------

class TestFlatTree:
    def test_four_cycle_equals_degree_entropy(self):
        graph = cycle_graph(4)
        tree = flat_tree(graph)
        assert tree.height == 1
        assert tree_entropy(graph, tree) == pytest.approx(2.0, abs=1e-12)
        assert tree_entropy(graph, tree) == pytest.approx(one_dim_entropy(graph),
                                                          abs=1e-12)

    def test_single_edge(self):
        graph = make_graph([[0, 1], [1, 0]])
        tree = flat_tree(graph)
        assert tree_entropy(graph, tree) == pytest.approx(1.0, abs=1e-12)

    def test_properties_hold(self, rng):
        graph = random_weighted_graph(rng)
        tree = flat_tree(graph)
        tree.validate(graph)
        assert len(tree.leaf_ids()) == graph.n_vertices


class TestTreeEntropy:
    def test_bridge_triangles_two_community(self):
        graph = two_cliques_bridge(3)
        tree = tree_from_partition(graph, [[0, 1, 2], [3, 4, 5]])
        value = tree_entropy(graph, tree)
        # frozen from the literal evaluation of the closed-form sum
        assert value == pytest.approx(1.6995138513, abs=1e-9)
        assert value == pytest.approx(literal_entropy(graph, tree), abs=1e-12)

    def test_full_width_community_contributes_zero(self):
        graph = cycle_graph(5)
        tree = tree_from_partition(graph, [[0, 1, 2, 3, 4]])
        # the lone community spans everything: zero cut, log(vol/vol) = 0
        assert tree_entropy(graph, tree) == pytest.approx(
            one_dim_entropy(graph), abs=1e-12)

    def test_flat_tree_reduces_to_degree_entropy(self, rng):
        for _ in range(10):
            graph = random_weighted_graph(rng)
            assert tree_entropy(graph, flat_tree(graph)) == pytest.approx(
                one_dim_entropy(graph), abs=1e-9)

    def test_matches_literal_oracle_on_random_instances(self, rng):
        for _ in range(100):
            graph = random_weighted_graph(rng)
            tree = random_valid_tree(graph, rng)
            assert tree_entropy(graph, tree) == pytest.approx(
                literal_entropy(graph, tree), abs=1e-9)

    def test_nonnegative_terms(self, rng):
        for _ in range(20):
            graph = random_weighted_graph(rng)
            tree = random_valid_tree(graph, rng)
            assert tree_entropy(graph, tree) >= -1e-12

    def test_scale_invariance(self, rng):
        graph = random_weighted_graph(rng)
        tree = random_valid_tree(graph, rng)
        scaled = StateGraph(vertices=graph.vertices, adjacency=graph.adjacency * 11.7)
        assert tree_entropy(scaled, tree) == pytest.approx(
            tree_entropy(graph, tree), abs=1e-9)


class TestNodeGain:
    def test_zero_cut_community(self):
        graph = make_graph([[0, 1, 0, 0], [1, 0, 0, 0], [0, 0, 0, 1], [0, 0, 1, 0]])
        tree = tree_from_partition(graph, [[0, 1], [2, 3]])
        for nid in tree.nodes[tree.root].children:
            assert node_gain(graph, tree, nid) == 0.0

    def test_bridge_triangle_value(self):
        graph = two_cliques_bridge(3)
        tree = tree_from_partition(graph, [[0, 1, 2], [3, 4, 5]])
        nid = tree.nodes[tree.root].children[0]
        # g=1, vol=7, vol(root)=14: (1/14) * log2(14/7)
        assert node_gain(graph, tree, nid) == pytest.approx(1 / 14, abs=1e-9)
        assert node_gain(graph, tree, nid) == pytest.approx(0.07143, abs=1e-5)

    def test_root_rejected(self):
        graph = cycle_graph(4)
        tree = flat_tree(graph)
        with pytest.raises(ValueError, match="root"):
            node_gain(graph, tree, tree.root)

    def test_gains_nonnegative_and_match_table(self, rng):
        graph = random_weighted_graph(rng)
        tree = random_valid_tree(graph, rng)
        table = gain_table(graph, tree)
        for nid in tree.nodes:
            if tree.nodes[nid].parent is None:
                continue
            g = node_gain(graph, tree, nid)
            assert g >= 0.0
            assert g == pytest.approx(table[nid], abs=1e-12)

    def test_scale_invariance(self, rng):
        graph = random_weighted_graph(rng)
        tree = random_valid_tree(graph, rng)
        scaled = StateGraph(vertices=graph.vertices, adjacency=graph.adjacency * 3.21)
        for nid in tree.nodes:
            if tree.nodes[nid].parent is not None:
                assert node_gain(scaled, tree, nid) == pytest.approx(
                    node_gain(graph, tree, nid), abs=1e-9)


# ---------------------------------------------------------------------------
# Stretch / compress
# ---------------------------------------------------------------------------

class TestStretchCompress:
    def test_two_children_minimal_case(self):
        graph = make_graph([[0, 1], [1, 0]])
        tree = flat_tree(graph)
        stretched = stretch(graph, tree, tree.root)
        kids = stretched.nodes[stretched.root].children
        assert len(kids) == 1 and not stretched.is_leaf(kids[0])
        compressed = compress(graph, stretched, stretched.root)
        compressed.validate(graph)
        assert compressed.height == 2  # three node layers survive
        assert cached_entropy(compressed) == pytest.approx(
            cached_entropy(tree), abs=1e-12)

    def test_two_cliques_recovered(self):
        graph = two_cliques_bridge(4)
        tree = flat_tree(graph)
        out = compress(graph, stretch(graph, tree, tree.root), tree.root)
        out.validate(graph)
        communities = sorted(sorted(out.vertex_set(c).tolist())
                             for c in out.nodes[out.root].children)
        assert communities == [[0, 1, 2, 3], [4, 5, 6, 7]]
        assert tree_entropy(graph, out) == pytest.approx(
            exhaustive_two_level_optimum(graph), abs=1e-9)

    def test_never_increases_entropy(self, rng):
        for _ in range(50):
            graph = random_weighted_graph(rng)
            tree = flat_tree(graph)
            before = tree_entropy(graph, tree)
            out = compress(graph, stretch(graph, tree, tree.root), tree.root)
            out.validate(graph)
            assert tree_entropy(graph, out) <= before + 1e-9

    def test_stretch_requires_leaf_children(self):
        graph = two_cliques_bridge(3)
        tree = tree_from_partition(graph, [[0, 1, 2], [3, 4, 5]])
        with pytest.raises(ValueError, match="leaves"):
            stretch(graph, tree, tree.root)

    def test_properties_after_random_operation_sequences(self, rng):
        for _ in range(15):
            graph = random_weighted_graph(rng)
            tree = flat_tree(graph)
            for _ in range(3):
                triangles = [nid for nid in tree.nodes
                             if tree.nodes[nid].children
                             and all(tree.is_leaf(c) for c in tree.nodes[nid].children)
                             and len(tree.nodes[nid].children) >= 2]
                if not triangles:
                    break
                nid = triangles[int(rng.integers(len(triangles)))]
                tree = compress(graph, stretch(graph, tree, nid), nid)
                tree.validate(graph)


# ---------------------------------------------------------------------------
# HCSE optimization
# ---------------------------------------------------------------------------

def fixture_graphs():
    """Micro-optimality fixtures (<= 8 vertices). Balanced splits of complete
    graphs beyond K4 are unreachable by greedy pairing, so K6+ stay out."""
    grid = np.zeros((8, 8))
    for r in range(2):
        for c in range(4):
            i = r * 4 + c
            if c < 3:
                grid[i, i + 1] = grid[i + 1, i] = 1
            if r == 0:
                grid[i, i + 4] = grid[i + 4, i] = 1
    bip = np.zeros((6, 6))
    bip[:3, 3:] = bip[3:, :3] = 1
    return {
        "K4": complete_graph(4),
        "C6": cycle_graph(6),
        "C8": cycle_graph(8),
        "P6": path_graph(6),
        "P8": path_graph(8),
        "star6": star_graph(6),
        "two_triangles_bridge": two_cliques_bridge(3),
        "two_4cliques_bridge": two_cliques_bridge(4),
        "K33": make_graph(bip),
        "grid2x4": make_graph(grid),
    }


class TestHcse:
    def test_micro_scale_matches_exhaustive(self):
        for name, graph in fixture_graphs().items():
            tree = hcse_optimize(graph, 2)
            got = tree_entropy(graph, tree)
            want = exhaustive_two_level_optimum(graph)
            assert got == pytest.approx(want, abs=1e-9), name

    def test_complete_graph_follows_exhaustive_oracle(self):
        # Balanced halves do lower the coding cost of K4 (5/3 bits vs 2).
        graph = complete_graph(4)
        tree = hcse_optimize(graph, 2)
        assert tree_entropy(graph, tree) == pytest.approx(5 / 3, abs=1e-9)
        assert tree.height == 2

    def test_two_cliques_bridge_height2(self):
        graph = two_cliques_bridge(4)
        tree = hcse_optimize(graph, 2)
        part = layer_partition(tree, 1)
        labels = part.labels()
        assert len(set(labels[:4])) == 1 and len(set(labels[4:])) == 1
        assert labels[0] != labels[4]

    def test_planted_three_blocks(self):
        r = np.random.default_rng(0)
        sizes = [4, 4, 4]
        labels = np.repeat(np.arange(3), 4)
        a = np.zeros((12, 12))
        for i in range(12):
            for j in range(i + 1, 12):
                if labels[i] == labels[j]:
                    a[i, j] = a[j, i] = 1.0
                elif r.random() < 0.3:
                    a[i, j] = a[j, i] = 0.05
        graph = make_graph(a)
        tree = hcse_optimize(graph, 3)
        assert tree.height == 3
        got = layer_partition(tree, 2).labels()
        # planted labels up to renaming
        mapping = {}
        for g, p in zip(got, labels):
            mapping.setdefault(g, p)
            assert mapping[g] == p
        assert len(mapping) == 3

    def test_height_capped(self, rng):
        for _ in range(5):
            graph = random_weighted_graph(rng)
            k = int(rng.integers(2, 5))
            tree = hcse_optimize(graph, k)
            assert 1 <= tree.height <= k

    def test_entropy_trace_monotone(self, rng):
        for _ in range(50):
            graph = random_weighted_graph(rng)
            tree = hcse_optimize(graph, int(rng.integers(2, 5)))
            trace = tree.entropy_trace
            assert all(trace[i + 1] <= trace[i] + 1e-9 for i in range(len(trace) - 1))
            assert trace[-1] <= one_dim_entropy(graph) + 1e-9

    def test_valid_after_optimization(self, rng):
        for _ in range(50):
            graph = random_weighted_graph(rng)
            hcse_optimize(graph, int(rng.integers(2, 5))).validate(graph)

    def test_deterministic(self, rng):
        graph = random_weighted_graph(rng)
        t1 = hcse_optimize(graph, 3)
        t2 = hcse_optimize(graph, 3)
        assert t1.to_json() == t2.to_json()

    def test_scale_invariant_partition(self, rng):
        graph = random_weighted_graph(rng)
        scaled = StateGraph(vertices=graph.vertices, adjacency=graph.adjacency * 5.5)
        t1 = hcse_optimize(graph, 3)
        t2 = hcse_optimize(scaled, 3)
        assert t1.to_json() == t2.to_json()


# ---------------------------------------------------------------------------
# Layer partitions
# ---------------------------------------------------------------------------

class TestLayerPartition:
    def test_two_level_lookup(self):
        graph = two_cliques_bridge(3)
        tree = tree_from_partition(graph, [[0, 1, 2], [3, 4, 5]])
        part = layer_partition(tree, 1)
        assert len(part.members) == 2
        for v in range(6):
            assert v in tree.vertex_set(part.community_of[v]).tolist()

    def test_every_vertex_mapped_once(self, rng):
        graph = random_weighted_graph(rng)
        tree = random_valid_tree(graph, rng)
        if tree.height < 2:
            return
        for h in range(1, tree.height):
            part = layer_partition(tree, h)
            counted = sorted(v for m in part.members.values() for v in m.tolist())
            assert counted == list(range(graph.n_vertices))

    def test_height_out_of_range(self):
        graph = cycle_graph(4)
        tree = tree_from_partition(graph, [[0, 1], [2, 3]])
        with pytest.raises(ValueError):
            layer_partition(tree, 2)
        with pytest.raises(ValueError):
            layer_partition(tree, 0)

    def test_straggler_uses_deeper_ancestor(self):
        # vertex 4 hangs directly under the root: at h=1 it maps to the root
        graph = cycle_graph(5)
        from sihd.encoding_tree import EncodingTree
        tree = EncodingTree()
        tree.root = tree._add(None)
        mid1 = tree._add(tree.root)
        mid2 = tree._add(tree.root)
        for v in (0, 1):
            tree._add(mid1, vertex=v)
        for v in (2, 3):
            tree._add(mid2, vertex=v)
        tree._add(tree.root, vertex=4)
        refresh_caches(graph, tree)
        part = layer_partition(tree, 1)
        assert part.community_of[4] == tree.root
        assert len(part.members) == 3


# ---------------------------------------------------------------------------
# Reweighted entropy, bounds, identity
# ---------------------------------------------------------------------------

def random_complete_graph(rng, n):
    a = rng.random((n, n)) + 0.05
    a = np.triu(a, 1)
    a = a + a.T
    return StateGraph(vertices=rng.normal(size=(n, 2)), adjacency=a)


class TestReweighted:
    def test_identity_reweighting(self, rng):
        graph = random_weighted_graph(rng)
        tree = random_valid_tree(graph, rng)
        assert reweighted_entropy(graph, tree) == pytest.approx(
            tree_entropy(graph, tree), abs=1e-12)

    def test_mass_inside_one_community(self):
        graph = two_cliques_bridge(3)
        tree = tree_from_partition(graph, [[0, 1, 2], [3, 4, 5]])
        prime = np.zeros((6, 6))
        prime[0, 1] = prime[1, 0] = 1.0  # all mass on one in-community edge
        prime[3, 4] = prime[4, 3] = 1e-9  # keep the other community's volume > 0
        gp = StateGraph(vertices=graph.vertices, adjacency=prime)
        value = reweighted_entropy(gp, tree)
        assert value == pytest.approx(literal_entropy(gp, tree), abs=1e-12)
        # the loaded community has zero cut, so only its two leaves contribute
        assert value == pytest.approx(1.0, abs=1e-6)

    def test_uniform_complete_within_bounds(self, rng):
        graph = random_weighted_graph(rng, n_min=6, n_max=6)
        tree = random_valid_tree(graph, rng)
        ones = np.ones((6, 6)) - np.eye(6)
        gp = StateGraph(vertices=graph.vertices, adjacency=ones)
        check = bound_check(gp, tree)
        assert check.lower - 1e-9 <= check.value <= check.upper + 1e-9
        assert check.value == pytest.approx(literal_entropy(gp, tree), abs=1e-12)

    def test_vertex_set_mismatch(self, rng):
        graph = random_weighted_graph(rng, n_min=6, n_max=6)
        tree = random_valid_tree(graph, rng)
        small = random_complete_graph(rng, 4)
        with pytest.raises(ValueError, match="vertex set"):
            reweighted_entropy(small, tree)


class TestBounds:
    def test_flat_tree_degenerate(self, rng):
        graph = random_weighted_graph(rng)
        tree = flat_tree(graph)
        check = bound_check(graph, tree)
        assert check.lower == pytest.approx(check.upper, abs=1e-12)
        assert check.value == pytest.approx(check.upper, abs=1e-9)

    def test_sandwich_on_100_random_instances(self, rng):
        for _ in range(100):
            n = int(rng.integers(4, 11))
            base = random_weighted_graph(rng, n_min=n, n_max=n)
            tree = random_valid_tree(base, rng)
            prime = random_complete_graph(rng, n)
            check = bound_check(prime, tree)
            assert check.lower - 1e-9 <= check.value <= check.upper + 1e-9
            assert all(eta >= 0 for eta in check.etas.values())

    def test_identity_on_100_random_instances(self, rng):
        for _ in range(100):
            n = int(rng.integers(4, 11))
            base = random_weighted_graph(rng, n_min=n, n_max=n)
            tree = random_valid_tree(base, rng)
            prime = random_complete_graph(rng, n)
            assert entropy_identity_gap(prime, tree) < 1e-9
            assert entropy_identity_gap(base, tree) < 1e-9


class TestSerialization:
    def test_json_round_trip(self, rng):
        from sihd.encoding_tree import EncodingTree
        graph = random_weighted_graph(rng)
        tree = hcse_optimize(graph, 3)
        back = EncodingTree.from_json(tree.to_json(), graph)
        back.validate(graph)
        assert tree_entropy(graph, back) == pytest.approx(
            tree_entropy(graph, tree), abs=1e-12)
        part_a = layer_partition(tree, 1).labels()
        part_b = layer_partition(back, 1).labels()
        np.testing.assert_array_equal(part_a, part_b)
