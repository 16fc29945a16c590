"""Weighted k-nearest-neighbor graph over observed states and its
one-dimensional structural entropy (Shannon entropy of the degree
distribution), used both to pick k and as the substrate for encoding trees.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .dataset import Dataset
from .validation import check_state_array, require


@dataclass
class StateGraph:
    """Undirected weighted graph over state vectors.

    ``adjacency`` is symmetric with a zero diagonal. Degrees default to row
    sums; a reweighted topology (e.g. transition-probability weights) may
    supply its own degree vector as long as it matches the row sums.
    """

    vertices: np.ndarray           # (n, d) state coordinates
    adjacency: np.ndarray          # (n, n) symmetric, zero diagonal
    degrees: np.ndarray = field(default=None)  # (n,), defaults to row sums

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        self.adjacency = np.asarray(self.adjacency, dtype=np.float64)
        n = len(self.vertices)
        require(self.adjacency.shape == (n, n), "adjacency shape mismatch")
        require(np.allclose(self.adjacency, self.adjacency.T, rtol=0, atol=1e-12),
                "adjacency must be symmetric")
        require(np.all(np.diag(self.adjacency) == 0), "self-loops are not allowed")
        require(np.all(self.adjacency >= 0), "edge weights must be non-negative")
        row_sums = self.adjacency.sum(axis=1)
        if self.degrees is None:
            self.degrees = row_sums
        else:
            self.degrees = np.asarray(self.degrees, dtype=np.float64)
            scale = max(row_sums.max(), 1e-12)
            require(np.allclose(self.degrees, row_sums, rtol=1e-9, atol=1e-9 * scale),
                    "explicit degrees must match adjacency row sums")
        require(self.volume > 0, "graph has zero total volume")

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def volume(self) -> float:
        return float(self.degrees.sum())

    def edge_list(self):
        """Upper-triangle edges as (i, j, w) triples with w > 0."""
        ii, jj = np.nonzero(np.triu(self.adjacency, k=1))
        return [(int(i), int(j), float(self.adjacency[i, j])) for i, j in zip(ii, jj)]

    def to_json(self) -> str:
        payload = {
            "vertices": [[float(v) for v in row] for row in self.vertices],
            "edges": [[i, j, w] for i, j, w in self.edge_list()],
        }
        return json.dumps(payload)

    @classmethod
    def from_json(cls, text: str) -> "StateGraph":
        payload = json.loads(text)
        vertices = np.asarray(payload["vertices"], dtype=np.float64)
        n = len(vertices)
        adjacency = np.zeros((n, n))
        for i, j, w in payload["edges"]:
            adjacency[i, j] = adjacency[j, i] = w
        return cls(vertices=vertices, adjacency=adjacency)


def dedupe_states(dataset: Dataset, tol: float = 1e-9):
    """Merge near-duplicate states (L-infinity distance <= tol) to their first
    occurrence.

    Returns (vertices, index_map) where ``index_map[(traj_idx, t)]`` gives the
    vertex index of every timestep in the dataset.
    """
    require(tol >= 0, "tol must be >= 0")
    reps: list[np.ndarray] = []
    rep_arr = None
    exact: dict[bytes, int] = {}
    index_map: dict[tuple[int, int], int] = {}
    for ti, traj in enumerate(dataset.trajectories):
        for t, state in enumerate(traj.states):
            key = state.tobytes()
            idx = exact.get(key)
            if idx is None and tol > 0 and reps:
                hits = np.nonzero(np.abs(rep_arr - state).max(axis=1) <= tol)[0]
                if hits.size:
                    idx = int(hits[0])
            if idx is None:
                idx = len(reps)
                reps.append(state.copy())
                rep_arr = np.asarray(reps)
                exact[key] = idx
            index_map[(ti, t)] = idx
    return np.asarray(reps), index_map


def _similarity_matrix(states: np.ndarray, similarity: str) -> np.ndarray:
    if similarity == "cosine":
        norms = np.linalg.norm(states, axis=1)
        if np.any(norms == 0):
            raise ValueError("cosine similarity is degenerate for zero-norm states")
        unit = states / norms[:, None]
        sim = unit @ unit.T
    elif similarity in ("rbf", "gaussian-rbf"):
        norms = (states * states).sum(axis=1)
        sq = norms[:, None] + norms[None, :] - 2.0 * (states @ states.T)
        np.maximum(sq, 0.0, out=sq)
        off = sq[~np.eye(len(states), dtype=bool)]
        sigma = float(np.sqrt(np.median(off))) if off.size else 0.0
        if sigma <= 0:
            raise ValueError("rbf similarity is degenerate: median pairwise distance is 0")
        sim = np.exp(-sq / (2.0 * sigma**2))
    else:
        raise ValueError(f"unknown similarity '{similarity}'")
    np.fill_diagonal(sim, -np.inf)  # never pick self as a neighbor
    return sim


def _knn_lists(sim: np.ndarray, k: int) -> np.ndarray:
    # Sort by (-similarity, index): ties resolved toward the lower vertex index.
    n = sim.shape[0]
    order = np.lexsort((np.tile(np.arange(n), (n, 1)), -sim), axis=1)
    return order[:, :k]


def build_knn_graph(states, k: int, similarity: str = "rbf",
                    symmetrize: str = "union") -> StateGraph:
    """Connect each state to its k most-similar neighbors.

    Edge weights are the similarity values. The directed k-NN relation is
    symmetrized by union (default) or intersection.
    """
    states = check_state_array(states, "states")
    n = len(states)
    require(0 < k < n, f"k must satisfy 0 < k < {n}")
    require(symmetrize in ("union", "intersection"), "symmetrize must be union|intersection")
    sim = _similarity_matrix(states, similarity)
    neighbors = _knn_lists(sim, k)
    chosen = np.zeros((n, n), dtype=bool)
    rows = np.repeat(np.arange(n), k)
    chosen[rows, neighbors.ravel()] = True
    keep = chosen | chosen.T if symmetrize == "union" else chosen & chosen.T
    adjacency = np.where(keep, sim, 0.0)
    adjacency = np.maximum(adjacency, adjacency.T)
    np.fill_diagonal(adjacency, 0.0)
    return StateGraph(vertices=states, adjacency=adjacency)


def one_dim_entropy(graph: StateGraph) -> float:
    """Shannon entropy (bits) of the degree distribution d_v / vol.

    Upper-bounds the uncertainty of single-step random-walk positions.
    Zero-degree vertices contribute nothing.
    """
    require(graph.n_vertices > 0, "empty graph")
    vol = graph.volume
    p = graph.degrees / vol
    p = p[p > 0]
    return float(-(p * np.log2(p)).sum())


def select_k(states, k_range: tuple[int, int] | None = None,
             similarity: str = "rbf") -> tuple[int, StateGraph]:
    """Pick the smallest k in k_range maximizing the one-dimensional entropy.

    k_range defaults to [2, min(16, n-1)].
    """
    states = check_state_array(states, "states")
    n = len(states)
    if k_range is None:
        k_range = (2, min(16, n - 1))
    k_lo, k_hi = int(k_range[0]), int(k_range[1])
    require(1 <= k_lo <= k_hi <= n - 1, f"k_range must lie within [1, {n - 1}]")

    sim = _similarity_matrix(states, similarity)
    neighbors = _knn_lists(sim, k_hi)
    best_k, best_h, best_graph = None, -np.inf, None
    for k in range(k_lo, k_hi + 1):
        chosen = np.zeros((n, n), dtype=bool)
        rows = np.repeat(np.arange(n), k)
        chosen[rows, neighbors[:, :k].ravel()] = True
        keep = chosen | chosen.T
        adjacency = np.where(keep, sim, 0.0)
        adjacency = np.maximum(adjacency, adjacency.T)
        np.fill_diagonal(adjacency, 0.0)
        graph = StateGraph(vertices=states, adjacency=adjacency)
        h = one_dim_entropy(graph)
        if h > best_h + 1e-12:
            best_k, best_h, best_graph = k, h, graph
    return best_k, best_graph
