"""Transition probabilities inferred from the base-layer diffuser.

Unconditional rollouts are pooled into (s_t, s_{t+1}) samples; a product
Gaussian kernel density over those pairs, evaluated at every vertex pair,
yields a complete weighted topology whose degrees are visitation
probabilities. Its entropy under the encoding tree drives the exploration
regularizer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoding_tree import EncodingTree, bound_check
from .network import Denoiser
from .state_graph import StateGraph
from .validation import require


def scott_bandwidths(samples: np.ndarray) -> np.ndarray:
    """Scott's rule per dimension: std * n^(-1/(D+4)), floored away from 0."""
    n, dim = samples.shape
    factor = n ** (-1.0 / (dim + 4))
    return np.maximum(samples.std(axis=0) * factor, 1e-6)


def gaussian_kde_logpdf(samples: np.ndarray, bandwidths: np.ndarray,
                        points: np.ndarray) -> np.ndarray:
    """Log density of a product Gaussian KDE at the given points."""
    z = (points[:, None, :] - samples[None, :, :]) / bandwidths[None, None, :]
    log_kernel = -0.5 * (z ** 2).sum(axis=2)
    log_norm = np.log(2 * np.pi) * samples.shape[1] / 2 + np.log(bandwidths).sum()
    # logsumexp over samples
    m = log_kernel.max(axis=1)
    return m + np.log(np.exp(log_kernel - m[:, None]).sum(axis=1)) - np.log(len(samples)) - log_norm


def _kernel_factor(samples_block: np.ndarray, bandwidths: np.ndarray,
                   points: np.ndarray) -> np.ndarray:
    """(n_points, n_samples) product-kernel values for one time slice."""
    z = (points[:, None, :] - samples_block[None, :, :]) / bandwidths[None, None, :]
    norm = float(np.prod(np.sqrt(2 * np.pi) * bandwidths))
    return np.exp(-0.5 * (z ** 2).sum(axis=2)) / norm


@dataclass
class TransitionModel:
    """KDE joint over adjacent states plus the induced complete graph."""

    n_samples: int
    bandwidths: np.ndarray        # (2d,) per-dimension kernel widths
    joint: np.ndarray             # (n, n) symmetric pair mass, zero diagonal
    visitation: np.ndarray        # (n,) degree/visitation probability, sums to 1
    graph: StateGraph
    state_samples: np.ndarray     # pooled rollout states, for density queries
    state_bandwidths: np.ndarray

    def visitation_logpdf(self, states: np.ndarray) -> np.ndarray:
        """Log visitation density at arbitrary states (marginal KDE)."""
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        return gaussian_kde_logpdf(self.state_samples, self.state_bandwidths, states)


def rollout_states(denoiser: Denoiser, schedule, n_rollouts: int,
                   rng: np.random.Generator, state_dim: int,
                   normalizer=None) -> np.ndarray:
    """Unconditional reverse rollouts; returns (n_rollouts, seq_len, d) states."""
    from .diffusion import sample_sequence

    outs = []
    for _ in range(n_rollouts):
        seq = sample_sequence(denoiser, schedule, None, 0.0, rng,
                              normalizer=normalizer)
        outs.append(seq[:, :state_dim])
    return np.stack(outs)


def transition_graph_from_pairs(pairs: np.ndarray,
                                vertices: np.ndarray) -> tuple[np.ndarray, StateGraph]:
    """KDE joint over (s_t, s_{t+1}) samples, evaluated at all vertex pairs.

    The joint is symmetrized with the self-transition mass dropped (the
    topology is a proper graph) and normalized so the visitation
    probabilities (weighted degrees) sum to one.
    """
    pairs = np.asarray(pairs, dtype=np.float64)
    vertices = np.asarray(vertices, dtype=np.float64)
    n = len(vertices)
    require(pairs.ndim == 2 and pairs.shape[1] % 2 == 0, "pairs must be (N, 2d)")
    state_dim = pairs.shape[1] // 2
    require(vertices.shape[1] == state_dim, "vertex dimension mismatch")
    bandwidths = scott_bandwidths(pairs)

    first = _kernel_factor(pairs[:, :state_dim], bandwidths[:state_dim], vertices)
    second = _kernel_factor(pairs[:, state_dim:], bandwidths[state_dim:], vertices)
    joint = first @ second.T / len(pairs)

    np.fill_diagonal(joint, 0.0)
    joint = 0.5 * (joint + joint.T)
    total = joint.sum()
    if total <= 0:  # kernels underflowed everywhere; fall back to uniform
        joint = np.ones((n, n)) - np.eye(n)
        total = joint.sum()
    joint = joint / total  # degrees (row sums) now total 1
    return joint, StateGraph(vertices=vertices, adjacency=joint)


def estimate_transitions(denoiser: Denoiser, schedule, n_rollouts: int,
                         rng: np.random.Generator, vertices: np.ndarray,
                         state_dim: int, normalizer=None) -> TransitionModel:
    """Build the diffusion-inferred transition topology over the vertex set
    from adjacent state pairs of unconditional rollouts."""
    if not denoiser.trained:
        raise ValueError("the base-layer denoiser has not been trained")
    require(n_rollouts >= 2, "need at least 2 rollouts")
    vertices = np.asarray(vertices, dtype=np.float64)
    require(len(vertices) >= 2, "need at least 2 vertices")

    states = rollout_states(denoiser, schedule, n_rollouts, rng, state_dim,
                            normalizer=normalizer)
    pairs = np.concatenate([states[:, :-1, :], states[:, 1:, :]], axis=2)
    pairs = pairs.reshape(-1, 2 * state_dim)
    joint, graph = transition_graph_from_pairs(pairs, vertices)

    flat_states = states.reshape(-1, state_dim)
    return TransitionModel(n_samples=len(pairs), bandwidths=scott_bandwidths(pairs),
                           joint=joint, visitation=graph.degrees.copy(),
                           graph=graph, state_samples=flat_states,
                           state_bandwidths=scott_bandwidths(flat_states))


def entropy_terms(model: TransitionModel, tree: EncodingTree):
    """(H(S), per-layer community entropies, per-layer eta weights).

    H(S) is the Shannon entropy of the visitation distribution; the community
    entropies and eta weights are the pieces of the variational bound on the
    reweighted structural entropy, which is asserted to hold.
    """
    require(model.graph.n_vertices == len(tree.leaf_lookup()),
            "transition model and tree cover different vertex sets")
    check = bound_check(model.graph, tree)
    return check.upper, check.layer_entropies, check.etas
