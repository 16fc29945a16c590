"""Adaptive hierarchical trajectory segmentation.

A trajectory is cut wherever consecutive states fall into different
communities of a layer partition; the final state of each piece becomes that
piece's subgoal. Stacking the per-layer cuts (coarser layers contribute their
boundaries to finer ones) yields nested segments whose subgoal sequences feed
the per-layer diffusers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import Trajectory
from .encoding_tree import EncodingTree, LayerPartition, layer_partition
from .validation import require


@dataclass
class Segment:
    """A temporally contiguous same-community slice of one trajectory."""

    layer: int
    index: int
    start: int            # first timestep (inclusive)
    stop: int             # last timestep (inclusive)
    states: np.ndarray    # (length, d)
    actions: np.ndarray   # (length, m)
    community: int        # tree node id at this layer

    @property
    def length(self) -> int:
        return self.stop - self.start + 1

    @property
    def subgoal(self) -> np.ndarray:
        return self.states[-1]


def _resolve_vertices(traj: Trajectory, vertex_ids) -> np.ndarray:
    vertex_ids = np.asarray(vertex_ids, dtype=np.int64)
    require(vertex_ids.shape == (len(traj),),
            f"need one vertex id per timestep, got {vertex_ids.shape}")
    return vertex_ids


def segment_layer(traj: Trajectory, partition: LayerPartition,
                  vertex_ids) -> list[Segment]:
    """Greedy left-to-right split: a new segment starts exactly when the
    community of consecutive states changes.

    ``vertex_ids`` maps each timestep to its state-graph vertex (from the
    dedupe map); a vertex without a community raises.
    """
    vertex_ids = _resolve_vertices(traj, vertex_ids)
    try:
        comms = partition.community_of[vertex_ids]
    except IndexError as exc:
        raise ValueError("trajectory state is not mapped to any graph vertex") from exc
    boundaries = _change_points(comms)
    return _materialize(traj, comms, boundaries, partition.height)


def _change_points(comms: np.ndarray) -> set[int]:
    """Timesteps t where the community differs from t-1."""
    return set((np.flatnonzero(comms[1:] != comms[:-1]) + 1).tolist())


def _materialize(traj, comms, boundaries, layer) -> list[Segment]:
    cuts = sorted(boundaries)
    starts = [0] + cuts
    stops = [c - 1 for c in cuts] + [len(traj) - 1]
    segments = []
    for i, (a, b) in enumerate(zip(starts, stops)):
        segments.append(Segment(layer=layer, index=i, start=a, stop=b,
                                states=traj.states[a:b + 1],
                                actions=traj.actions[a:b + 1],
                                community=int(comms[a])))
    return segments


@dataclass
class SegmentHierarchy:
    """Per-layer segments and subgoal sequences for one trajectory.

    Layers run 1..n_layers where n_layers is the tree height; segment lists
    exist for layers 1..n_layers-1, and the top layer is the single full-
    trajectory segment whose subgoal sequence covers all layer n_layers-1
    subgoals.
    """

    trajectory: Trajectory
    n_layers: int
    segments: dict[int, list[Segment]]

    def subgoal_sequence(self, h: int) -> np.ndarray:
        """tau_g^h: the ordered subgoals of layer h."""
        require(1 <= h < self.n_layers, f"layer {h} has no segment list")
        return np.stack([seg.subgoal for seg in self.segments[h]])

    def child_sequences(self, h: int):
        """tau_g^{h,i} for every segment i of layer h.

        For h == 1 these are the state-action slices themselves; for h >= 2,
        the subgoals of layer h-1 falling inside segment i. For h == n_layers
        there is a single sequence spanning every layer n_layers-1 subgoal.
        Returns a list of (array, community_node_id_or_None).
        """
        require(1 <= h <= self.n_layers, f"layer {h} out of range")
        if h == 1:
            return [(np.concatenate([seg.states, seg.actions], axis=1), seg.community)
                    for seg in self.segments[1]]
        if h == self.n_layers:
            return [(self.subgoal_sequence(self.n_layers - 1), None)]
        lower = self.segments[h - 1]
        out = []
        for seg in self.segments[h]:
            inside = [s.subgoal for s in lower if seg.start <= s.stop <= seg.stop]
            out.append((np.stack(inside), seg.community))
        return out

    def child_scale(self, h: int, i: int) -> int:
        """l_g^{h,i}: how many layer h-1 subgoals segment (h, i) spans."""
        return len(self.child_sequences(h)[i][0])


def build_hierarchy(traj: Trajectory, tree: EncodingTree,
                    vertex_ids) -> SegmentHierarchy:
    """Segment one trajectory at every tree layer with nested boundaries.

    Boundaries of coarser layers are merged into finer ones so that each
    coarse segment is an exact union of fine segments; without this, a
    trajectory re-entering a coarse community could break the nesting that
    the recursive subgoal sequences require.
    """
    n_layers = tree.height
    require(n_layers >= 2, "tree height must be >= 2")
    vertex_ids = _resolve_vertices(traj, vertex_ids)

    segments: dict[int, list[Segment]] = {}
    inherited: set[int] = set()
    for h in range(n_layers - 1, 0, -1):
        part = layer_partition(tree, h)
        try:
            comms = part.community_of[vertex_ids]
        except IndexError as exc:
            raise ValueError("trajectory state is not mapped to any graph vertex") from exc
        inherited |= _change_points(comms)
        segments[h] = _materialize(traj, comms, inherited, h)
    return SegmentHierarchy(trajectory=traj, n_layers=n_layers, segments=segments)


def pad_sequence(seq: np.ndarray, target_len: int):
    """Repeat the terminal element up to ``target_len``.

    Returns (padded, mask) where mask flags real positions. Sequences longer
    than the target are an error; callers split beforehand.
    """
    seq = np.asarray(seq, dtype=np.float64)
    require(seq.ndim == 2, "expected a (length, dim) sequence")
    require(target_len >= 1, "target_len must be positive")
    if len(seq) > target_len:
        raise ValueError(f"sequence of length {len(seq)} exceeds target {target_len}")
    mask = np.zeros(target_len, dtype=bool)
    mask[:len(seq)] = True
    if len(seq) == target_len:
        return seq.copy(), mask
    pad = np.repeat(seq[-1][None, :], target_len - len(seq), axis=0)
    return np.concatenate([seq, pad], axis=0), mask


def unpad_sequence(padded: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return padded[np.asarray(mask, dtype=bool)]


def split_to_length(seq: np.ndarray, target_len: int) -> list[np.ndarray]:
    """Chop a sequence into consecutive chunks of at most ``target_len``."""
    require(target_len >= 1, "target_len must be positive")
    return [seq[i:i + target_len] for i in range(0, len(seq), target_len)]
