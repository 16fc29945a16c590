"""Encoding trees over state graphs.

An encoding tree is a hierarchy of nested vertex communities: the root covers
every vertex, leaves are singletons, and the children of any node partition
its vertex set. The tree's structural entropy is the expected code length of
one-step random-walk positions under that hierarchy; minimizing it recovers
community structure at multiple scales.
"""

from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .state_graph import StateGraph, one_dim_entropy
from .validation import require

_EPS = 1e-12


@dataclass
class _Node:
    parent: int | None
    children: list[int] = field(default_factory=list)
    vertex: int | None = None  # set only on leaves
    volume: float = 0.0        # cached degree mass of the node's vertex set
    cut: float = 0.0           # cached boundary weight of the node's vertex set


class EncodingTree:
    """Arena-backed community tree with cached volumes and cut weights.

    Instances are treated as immutable once built; the optimizer works on
    private copies. All traversals are iterative because intermediate trees
    produced during optimization can be deep.
    """

    def __init__(self):
        self.nodes: dict[int, _Node] = {}
        self.root: int | None = None
        self._next_id = 0

    # -- construction --------------------------------------------------------

    def _add(self, parent, vertex=None, volume=0.0, cut=0.0) -> int:
        nid = self._next_id
        self._next_id += 1
        self.nodes[nid] = _Node(parent=parent, vertex=vertex, volume=volume, cut=cut)
        if parent is not None:
            self.nodes[parent].children.append(nid)
        return nid

    def copy(self) -> "EncodingTree":
        other = EncodingTree()
        other._next_id = self._next_id
        other.root = self.root
        for nid, node in self.nodes.items():
            other.nodes[nid] = _Node(parent=node.parent, children=list(node.children),
                                     vertex=node.vertex, volume=node.volume, cut=node.cut)
        return other

    # -- structure queries ---------------------------------------------------

    def is_leaf(self, nid: int) -> bool:
        return not self.nodes[nid].children

    def leaf_ids(self) -> list[int]:
        return [nid for nid, n in self.nodes.items() if not n.children]

    def postorder(self, start: int | None = None) -> list[int]:
        order, stack = [], [(start if start is not None else self.root, False)]
        while stack:
            nid, expanded = stack.pop()
            if expanded:
                order.append(nid)
            else:
                stack.append((nid, True))
                for c in self.nodes[nid].children:
                    stack.append((c, False))
        return order

    def heights(self) -> dict[int, int]:
        """Height of every node: leaves are 0, parents one above their tallest child."""
        out: dict[int, int] = {}
        for nid in self.postorder():
            kids = self.nodes[nid].children
            out[nid] = 1 + max(out[c] for c in kids) if kids else 0
        return out

    def depths(self) -> dict[int, int]:
        out = {self.root: 0}
        stack = [self.root]
        while stack:
            nid = stack.pop()
            for c in self.nodes[nid].children:
                out[c] = out[nid] + 1
                stack.append(c)
        return out

    @property
    def height(self) -> int:
        return self.heights()[self.root]

    def subtree_nodes(self, nid: int) -> list[int]:
        out, stack = [], [nid]
        while stack:
            cur = stack.pop()
            out.append(cur)
            stack.extend(self.nodes[cur].children)
        return out

    def vertex_set(self, nid: int) -> np.ndarray:
        """Sorted vertex indices covered by a node."""
        acc = [self.nodes[n].vertex for n in self.subtree_nodes(nid)
               if self.nodes[n].vertex is not None]
        return np.array(sorted(acc), dtype=np.int64)

    def leaf_lookup(self) -> dict[int, int]:
        """vertex index -> leaf node id."""
        return {n.vertex: nid for nid, n in self.nodes.items() if n.vertex is not None}

    def validate(self, graph: StateGraph | None = None, rtol: float = 1e-9):
        """Check the four encoding-tree properties; optionally recheck caches
        against a graph."""
        require(self.root is not None, "tree has no root")
        seen_vertices: list[int] = []
        for nid, node in self.nodes.items():
            if node.children:
                require(node.vertex is None, f"internal node {nid} carries a vertex")
                kids = [self.vertex_set(c) for c in node.children]
                merged = np.concatenate(kids)
                require(len(np.unique(merged)) == len(merged),
                        f"children of node {nid} overlap")
                require(set(merged.tolist()) == set(self.vertex_set(nid).tolist()),
                        f"children of node {nid} do not cover it")
            else:
                require(node.vertex is not None, f"leaf {nid} has no vertex")
                seen_vertices.append(node.vertex)
        require(len(set(seen_vertices)) == len(seen_vertices), "duplicate leaf vertices")
        if graph is not None:
            require(set(seen_vertices) == set(range(graph.n_vertices)),
                    "root does not cover the full vertex set")
            vols, cuts = node_stats(graph, self)
            scale = max(graph.volume, 1.0)
            for nid in self.nodes:
                require(abs(self.nodes[nid].volume - vols[nid]) <= rtol * scale,
                        f"cached volume of node {nid} is stale")
                require(abs(self.nodes[nid].cut - cuts[nid]) <= rtol * scale,
                        f"cached cut of node {nid} is stale")

    # -- serialization -------------------------------------------------------

    def to_json(self) -> str:
        heights = self.heights()
        payload = []
        for nid in sorted(self.nodes):
            node = self.nodes[nid]
            payload.append({"id": nid, "parent": node.parent,
                            "height": heights[nid], "vertex": node.vertex})
        return json.dumps({"root": self.root, "nodes": payload})

    @classmethod
    def from_json(cls, text: str, graph: StateGraph | None = None) -> "EncodingTree":
        payload = json.loads(text)
        tree = cls()
        tree.root = payload["root"]
        for rec in payload["nodes"]:
            tree.nodes[rec["id"]] = _Node(parent=rec["parent"], vertex=rec["vertex"])
        for nid, node in tree.nodes.items():
            if node.parent is not None:
                tree.nodes[node.parent].children.append(nid)
        for node in tree.nodes.values():
            node.children.sort()
        tree._next_id = max(tree.nodes) + 1
        if graph is not None:
            refresh_caches(graph, tree)
        return tree


def refresh_caches(graph: StateGraph, tree: EncodingTree):
    vols, cuts = node_stats(graph, tree)
    for nid, node in tree.nodes.items():
        node.volume = vols[nid]
        node.cut = cuts[nid]


# ---------------------------------------------------------------------------
# Entropy under a tree
# ---------------------------------------------------------------------------

def node_stats(graph: StateGraph, tree: EncodingTree):
    """Volumes and cut weights of every tree node, recomputed from the graph.

    Computed bottom-up: a parent's interior weight is its children's interior
    weight plus the cross weight between each pair of children.
    """
    vols: dict[int, float] = {}
    interior: dict[int, float] = {}
    vsets: dict[int, np.ndarray] = {}
    adj = graph.adjacency
    deg = graph.degrees

    for nid in tree.postorder():
        node = tree.nodes[nid]
        if not node.children:
            v = node.vertex
            vols[nid] = float(deg[v])
            interior[nid] = 0.0
            vsets[nid] = np.array([v], dtype=np.int64)
        else:
            kids = node.children
            vols[nid] = sum(vols[c] for c in kids)
            inner = sum(interior[c] for c in kids)
            for i in range(len(kids)):
                for j in range(i + 1, len(kids)):
                    a, b = vsets[kids[i]], vsets[kids[j]]
                    inner += float(adj[np.ix_(a, b)].sum())
            interior[nid] = inner
            vsets[nid] = np.concatenate([vsets[c] for c in kids])
            for c in kids:
                del vsets[c]
    cuts = {nid: vols[nid] - 2.0 * interior[nid] for nid in vols}
    return vols, cuts


def _entropy_terms(vols, cuts, tree: EncodingTree, volume: float) -> float:
    total = 0.0
    for nid, node in tree.nodes.items():
        if node.parent is None:
            continue
        g, v, vp = cuts[nid], vols[nid], vols[node.parent]
        if g <= 0 or v <= 0 or v >= vp:
            continue  # zero-cut or full-width communities cost nothing
        total -= (g / volume) * math.log2(v / vp)
    return total


def tree_entropy(graph: StateGraph, tree: EncodingTree) -> float:
    """Structural entropy (bits) of ``graph`` under ``tree``.

    Evaluates every non-root node's term -(g/vol) * log2(vol(a)/vol(parent))
    with volumes and cuts recomputed from the given graph, so the same tree
    can be scored against a reweighted topology.
    """
    vols, cuts = node_stats(graph, tree)
    return _entropy_terms(vols, cuts, tree, graph.volume)


def cached_entropy(tree: EncodingTree) -> float:
    """Entropy from the tree's cached volumes/cuts (optimizer fast path)."""
    vols = {nid: n.volume for nid, n in tree.nodes.items()}
    cuts = {nid: n.cut for nid, n in tree.nodes.items()}
    return _entropy_terms(vols, cuts, tree, tree.nodes[tree.root].volume)


def node_gain(graph: StateGraph, tree: EncodingTree, nid: int) -> float:
    """Structural information gain (bits) of a non-root community node.

    The extra code length needed to pin a random-walk step down to this
    community once its parent community is known.
    """
    node = tree.nodes[nid]
    require(node.parent is not None, "the root node has no gain")
    vols, cuts = node_stats(graph, tree)
    g, v, vp = cuts[nid], vols[nid], vols[node.parent]
    if g <= 0 or v <= 0 or v >= vp:
        return 0.0
    return -(g / graph.volume) * math.log2(v / vp)


def gain_table(graph: StateGraph, tree: EncodingTree) -> dict[int, float]:
    """Gains of all non-root nodes in one pass."""
    vols, cuts = node_stats(graph, tree)
    volume = graph.volume
    out = {}
    for nid, node in tree.nodes.items():
        if node.parent is None:
            continue
        g, v, vp = cuts[nid], vols[nid], vols[node.parent]
        if g <= 0 or v <= 0 or v >= vp:
            out[nid] = 0.0
        else:
            out[nid] = -(g / volume) * math.log2(v / vp)
    return out


# ---------------------------------------------------------------------------
# Construction and optimization
# ---------------------------------------------------------------------------

def flat_tree(graph: StateGraph) -> EncodingTree:
    """Height-1 tree: the root over one singleton leaf per vertex."""
    require(graph.n_vertices > 0, "empty graph")
    tree = EncodingTree()
    tree.root = tree._add(None, volume=graph.volume, cut=0.0)
    for v in range(graph.n_vertices):
        d = float(graph.degrees[v])
        tree._add(tree.root, vertex=v, volume=d, cut=d)
    return tree


def _leaf_pair_cuts(graph: StateGraph, tree: EncodingTree, children: list[int]):
    """Cross weights between sibling leaves, straight from the adjacency."""
    verts = np.array([tree.nodes[c].vertex for c in children], dtype=np.int64)
    sub = graph.adjacency[np.ix_(verts, verts)]
    cuts: dict[int, dict[int, float]] = {c: {} for c in children}
    ii, jj = np.nonzero(np.triu(sub, k=1))
    for i, j in zip(ii, jj):
        a, b = children[i], children[j]
        w = float(sub[i, j])
        cuts[a][b] = w
        cuts[b][a] = w
    return cuts


def _pair_cuts(graph: StateGraph, tree: EncodingTree, children: list[int]):
    if all(tree.is_leaf(c) for c in children):
        return _leaf_pair_cuts(graph, tree, children)
    sets = {c: tree.vertex_set(c) for c in children}
    adj = graph.adjacency
    cuts: dict[int, dict[int, float]] = {c: {} for c in children}
    for i, a in enumerate(children):
        for b in children[i + 1:]:
            w = float(adj[np.ix_(sets[a], sets[b])].sum())
            if w > 0:
                cuts[a][b] = w
                cuts[b][a] = w
    return cuts


def _stretch(graph: StateGraph, tree: EncodingTree, alpha: int):
    """Binarize the subtree under ``alpha``: greedily pair children, largest
    exact entropy reduction first, then fold the zero-gain leftovers in id
    order until one merge root remains. Zero-degree children stay directly
    under ``alpha`` as singleton communities."""
    node = tree.nodes[alpha]
    children = [c for c in node.children if tree.nodes[c].volume > 0]
    if len(children) < 2:
        return
    vol_alpha = node.volume
    cuts = _pair_cuts(graph, tree, children)
    alive = set(children)

    def reduction(a: int, b: int, w: float) -> float:
        vm = tree.nodes[a].volume + tree.nodes[b].volume
        if w <= 0 or vm >= vol_alpha - _EPS:
            return 0.0
        return 2.0 * w * math.log2(vol_alpha / vm)

    def merge(a: int, b: int, w: float) -> int:
        na, nb = tree.nodes[a], tree.nodes[b]
        mid = tree._add(alpha, volume=na.volume + nb.volume,
                        cut=na.cut + nb.cut - 2.0 * w)
        node.children.remove(a)
        node.children.remove(b)
        na.parent = nb.parent = mid
        tree.nodes[mid].children = [a, b]
        alive.discard(a)
        alive.discard(b)
        merged: dict[int, float] = {}
        for src in (a, b):
            for other, cw in cuts.pop(src).items():
                if other in alive:
                    merged[other] = merged.get(other, 0.0) + cw
        cuts[mid] = merged
        for other, cw in merged.items():
            cuts[other].pop(a, None)
            cuts[other].pop(b, None)
            cuts[other][mid] = cw
        alive.add(mid)
        return mid

    heap = []
    for a in children:
        for b, w in cuts[a].items():
            if a < b:
                red = reduction(a, b, w)
                if red > _EPS:
                    heapq.heappush(heap, (-red, a, b, w))

    while heap:
        neg_red, a, b, w = heapq.heappop(heap)
        if a not in alive or b not in alive:
            continue
        if -neg_red <= _EPS:
            break
        mid = merge(a, b, w)
        for other, cw in cuts[mid].items():
            red = reduction(mid, other, cw)
            if red > _EPS:
                heapq.heappush(heap, (-red, min(mid, other), max(mid, other), cw))

    # Every remaining pair has zero exact gain; fold them deterministically.
    while len(alive) > 1:
        rest = sorted(alive)
        a, b = rest[0], rest[1]
        merge(a, b, cuts[a].get(b, 0.0))


def _compress(tree: EncodingTree, alpha: int):
    """Flatten the subtree under ``alpha`` to at most three node layers,
    keeping the antichain of intermediate nodes with minimal entropy.

    Solved exactly by a bottom-up choice at every intermediate node: either
    keep it (all its leaves attach directly beneath it) or splice it out in
    favor of its children's best antichains. Ties prefer keeping the node, so
    a freshly paired two-leaf node survives as a three-layer subtree.
    """
    node = tree.nodes[alpha]
    volume = tree.nodes[tree.root].volume
    vol_alpha = node.volume

    # Bottom-up aggregates over leaves: sum of cut*log2(volume) and sum of cut,
    # restricted to leaves with positive volume and cut.
    order = [nid for nid in tree.postorder(alpha) if nid != alpha]
    agg_a: dict[int, float] = {}
    agg_b: dict[int, float] = {}
    best_cost: dict[int, float] = {}
    keep: dict[int, bool] = {}

    def leaf_cost(leaf: int, parent_vol: float) -> float:
        n = tree.nodes[leaf]
        if n.cut <= 0 or n.volume <= 0 or n.volume >= parent_vol:
            return 0.0
        return -(n.cut / volume) * math.log2(n.volume / parent_vol)

    for nid in order:
        n = tree.nodes[nid]
        if not n.children:
            if n.volume > 0 and n.cut > 0:
                agg_a[nid] = n.cut * math.log2(n.volume)
                agg_b[nid] = n.cut
            else:
                agg_a[nid] = agg_b[nid] = 0.0
            best_cost[nid] = leaf_cost(nid, vol_alpha)
        else:
            agg_a[nid] = sum(agg_a[c] for c in n.children)
            agg_b[nid] = sum(agg_b[c] for c in n.children)
            splice = sum(best_cost[c] for c in n.children)
            kept = 0.0
            if n.volume > 0:
                kept -= (agg_a[nid] - agg_b[nid] * math.log2(n.volume)) / volume
                if n.cut > 0 and n.volume < vol_alpha:
                    kept -= (n.cut / volume) * math.log2(n.volume / vol_alpha)
            keep[nid] = kept <= splice + _EPS
            best_cost[nid] = kept if keep[nid] else splice

    # Realize the chosen antichain (iteratively; subtrees can be deep).
    new_children: list[int] = []
    stack = list(node.children)
    node.children = []
    while stack:
        nid = stack.pop()
        n = tree.nodes[nid]
        if not n.children:
            n.parent = alpha
            new_children.append(nid)
        elif keep[nid]:
            leaves = [x for x in tree.subtree_nodes(nid) if not tree.nodes[x].children]
            for mid in [x for x in tree.subtree_nodes(nid)
                        if x != nid and tree.nodes[x].children]:
                del tree.nodes[mid]
            n.children = leaves
            for leaf in leaves:
                tree.nodes[leaf].parent = nid
            n.parent = alpha
            new_children.append(nid)
        else:
            kids = n.children
            del tree.nodes[nid]
            stack.extend(kids)
    node.children = sorted(new_children)


def _is_triangle(tree: EncodingTree, nid: int) -> bool:
    node = tree.nodes[nid]
    return bool(node.children) and all(tree.is_leaf(c) for c in node.children)


def stretch(graph: StateGraph, tree: EncodingTree, nid: int) -> EncodingTree:
    """Binarize the all-leaf-children subtree at ``nid`` (returns a new tree)."""
    require(_is_triangle(tree, nid), "stretch requires a node whose children are all leaves")
    out = tree.copy()
    _stretch(graph, out, nid)
    return out


def compress(graph: StateGraph, tree: EncodingTree, nid: int) -> EncodingTree:
    """Flatten the subtree at ``nid`` back to at most three node layers."""
    require(tree.nodes[nid].children, "compress requires an internal node")
    out = tree.copy()
    _compress(out, nid)
    return out


def hcse_optimize(graph: StateGraph, max_height: int) -> EncodingTree:
    """Grow an encoding tree of height <= max_height by repeatedly splitting
    the layer of all-leaf-children nodes that yields the largest exact
    entropy reduction; stops when no split helps.

    The returned tree carries ``entropy_trace``, the entropy after each
    accepted split (first entry is the flat tree's entropy).
    """
    require(max_height >= 2, "max_height must be >= 2")
    tree = flat_tree(graph)
    trace = [cached_entropy(tree)]

    while tree.height < max_height:
        depths = tree.depths()
        groups: dict[int, list[int]] = {}
        for nid in tree.nodes:
            if _is_triangle(tree, nid) and len(tree.nodes[nid].children) >= 2:
                groups.setdefault(depths[nid], []).append(nid)
        if not groups:
            break

        before = trace[-1]
        best_delta, best_depth = 0.0, None
        for depth in sorted(groups):
            trial = tree.copy()
            for nid in sorted(groups[depth]):
                _stretch(graph, trial, nid)
                _compress(trial, nid)
            delta = before - cached_entropy(trial)
            if delta > best_delta + _EPS:
                best_delta, best_depth = delta, depth
        if best_depth is None:
            break
        for nid in sorted(groups[best_depth]):
            _stretch(graph, tree, nid)
            _compress(tree, nid)
        trace.append(cached_entropy(tree))

    tree.entropy_trace = trace
    return tree


def tree_from_partition(graph: StateGraph, blocks) -> EncodingTree:
    """Two-level tree from an explicit list of vertex-index blocks."""
    flat = sorted(int(v) for block in blocks for v in block)
    require(flat == list(range(graph.n_vertices)), "blocks must partition the vertex set")
    tree = EncodingTree()
    tree.root = tree._add(None)
    for block in blocks:
        mid = tree._add(tree.root)
        for v in sorted(block):
            tree._add(mid, vertex=int(v))
    refresh_caches(graph, tree)
    return tree


# ---------------------------------------------------------------------------
# Layer partitions, reweighted entropy, bounds
# ---------------------------------------------------------------------------

@dataclass
class LayerPartition:
    """Total vertex -> community assignment at one tree height."""

    height: int
    community_of: np.ndarray            # (n,) node id per vertex
    members: dict[int, np.ndarray]      # node id -> sorted vertex indices

    @property
    def node_ids(self):
        return sorted(self.members)

    def labels(self) -> np.ndarray:
        """Community ids renumbered 0..C-1 in node-id order."""
        remap = {nid: i for i, nid in enumerate(self.node_ids)}
        return np.array([remap[c] for c in self.community_of], dtype=np.int64)


def layer_partition(tree: EncodingTree, h: int) -> LayerPartition:
    """Assign every vertex to its deepest ancestor of height >= h.

    Vertices whose branch is shorter than the tree simply keep a higher
    ancestor, so the lookup is total.
    """
    height = tree.height
    require(1 <= h < height, f"height {h} out of range [1, {height - 1}]")
    heights = tree.heights()
    leaf_for = tree.leaf_lookup()
    n = len(leaf_for)
    community = np.empty(n, dtype=np.int64)
    for v in range(n):
        nid = leaf_for[v]
        while heights[nid] < h:
            nid = tree.nodes[nid].parent
        community[v] = nid
    members = {int(nid): np.flatnonzero(community == nid)
               for nid in np.unique(community)}
    return LayerPartition(height=h, community_of=community, members=members)


def _check_same_vertices(graph: StateGraph, tree: EncodingTree):
    leaves = tree.leaf_lookup()
    require(set(leaves) == set(range(graph.n_vertices)),
            "graph and tree cover different vertex sets")


def reweighted_entropy(graph_prime: StateGraph, tree: EncodingTree) -> float:
    """Structural entropy of a reweighted topology under an existing tree."""
    _check_same_vertices(graph_prime, tree)
    return tree_entropy(graph_prime, tree)


@dataclass
class BoundCheck:
    lower: float
    value: float
    upper: float
    etas: dict[int, float]
    layer_entropies: dict[int, float]


def shannon_entropy(masses) -> float:
    masses = np.asarray(masses, dtype=np.float64)
    total = masses.sum()
    require(total > 0, "cannot normalize zero mass")
    p = masses[masses > 0] / total
    return float(-(p * np.log2(p)).sum())


def bound_check(graph_prime: StateGraph, tree: EncodingTree,
                tol: float = 1e-9) -> BoundCheck:
    """Sandwich the entropy of a (reweighted) graph between its variational
    bounds.

    upper = H(S), the Shannon entropy of the degree (visitation) distribution;
    lower subtracts, per internal layer h, eta_h times the Shannon entropy of
    the layer's community masses, where eta_h is the largest normalized
    child-cut surplus among height-h nodes.
    """
    _check_same_vertices(graph_prime, tree)
    value = tree_entropy(graph_prime, tree)
    upper = one_dim_entropy(graph_prime)

    vols, cuts = node_stats(graph_prime, tree)
    heights = tree.heights()
    etas: dict[int, float] = {}
    layer_ents: dict[int, float] = {}
    lower = upper
    for h in range(1, tree.height):
        level = [nid for nid, hh in heights.items()
                 if hh == h and tree.nodes[nid].parent is not None
                 and tree.nodes[nid].children]
        eta = 0.0
        for nid in level:
            child_cuts = sum(cuts[c] for c in tree.nodes[nid].children)
            if vols[nid] > 0:
                eta = max(eta, (child_cuts - cuts[nid]) / vols[nid])
        part = layer_partition(tree, h)
        masses = np.array([graph_prime.degrees[m].sum() for m in part.members.values()])
        layer_ent = shannon_entropy(masses) if masses.sum() > 0 else 0.0
        etas[h] = eta
        layer_ents[h] = layer_ent
        lower -= eta * layer_ent

    require(lower - tol <= value <= upper + tol,
            f"entropy bounds violated: {lower} <= {value} <= {upper}")
    return BoundCheck(lower=lower, value=value, upper=upper,
                      etas=etas, layer_entropies=layer_ents)


def entropy_identity_gap(graph_prime: StateGraph, tree: EncodingTree) -> float:
    """|direct entropy - telescoped form| under the tree.

    The telescoped form rewrites the entropy as H(S) minus, over internal
    non-root nodes, (g_a - sum_i g_child) / vol * log2(vol(a)/vol); the two
    must agree to float precision on any valid instance.
    """
    _check_same_vertices(graph_prime, tree)
    vols, cuts = node_stats(graph_prime, tree)
    volume = graph_prime.volume
    value = _entropy_terms(vols, cuts, tree, volume)
    recon = one_dim_entropy(graph_prime)
    for nid, node in tree.nodes.items():
        if node.parent is None or not node.children:
            continue
        surplus = cuts[nid] - sum(cuts[c] for c in node.children)
        if vols[nid] > 0:
            recon -= (surplus / volume) * math.log2(vols[nid] / volume)
    return abs(value - recon)
