"""Receding-horizon hierarchical planning.

Each outer step denoises a fresh state-action window anchored on committed
history, steered by the current layer-2 subgoal's community gain; whenever the
active subgoal is reached, higher layers regenerate their subgoal buffers
recursively, the top layer conditioning on the dataset's best return.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .diffusion import DiffusionStack, sample_sequence
from .encoding_tree import EncodingTree
from .validation import check_vector, require


@dataclass
class SubgoalCriterion:
    """A subgoal counts as reached within a closed Euclidean ball."""

    tolerance: float = 0.5

    def __post_init__(self):
        require(self.tolerance > 0, "tolerance must be positive")


def is_satisfied(state, subgoal, criterion: SubgoalCriterion) -> bool:
    state = check_vector(state, name="state")
    subgoal = check_vector(subgoal, dim=len(state), name="subgoal")
    return float(np.linalg.norm(state - subgoal)) <= criterion.tolerance


@dataclass
class PlanState:
    """Mutable buffers of one planning session."""

    subgoals: dict[int, list[np.ndarray]]   # layer h >= 2 -> generated subgoals
    states: list[np.ndarray]                # layer-1 committed states
    actions: list[np.ndarray]               # layer-1 committed actions
    refresh_log: list[tuple[int, int]] = field(default_factory=list)  # (t, layer)
    conditioning: list[tuple[int, int, float]] = field(default_factory=list)  # (t, layer, y)


@dataclass
class PlanResult:
    actions: np.ndarray            # (H, m)
    states: np.ndarray             # (H+1, d) the planner's internal state roll
    refresh_log: list[tuple[int, int]]
    conditioning: list[tuple[int, int, float]]


def _resolve_condition(stack: DiffusionStack, height: int, target: np.ndarray):
    """(y, node) for the community of the vertex nearest ``target``; falls
    back to unconditional generation when resolution fails."""
    try:
        node, gain = stack.tables.resolve(height, target)
        return gain, node
    except KeyError:
        warnings.warn(f"no community at height {height}; sampling unconditionally")
        return None, -1


def _window(buffer: list[np.ndarray], pad_len: int) -> tuple[np.ndarray, int]:
    """Most recent buffer entries that fit while leaving room for the newly
    generated slot and the terminal (subgoal) slot."""
    ctx_len = max(1, min(len(buffer), pad_len - 2))
    return np.stack(buffer[-ctx_len:]), ctx_len


def _rollout_layer(stack: DiffusionStack, layer: int, context: np.ndarray,
                   ctx_len: int, y, rng, terminal=None,
                   context_actions: np.ndarray | None = None):
    """One guided reverse rollout with the committed window inpainted.

    For the base layer, state columns of all context rows and action columns
    of all but the last context row are pinned; the last context row's action
    slot is the one being decided.
    """
    net = stack.denoisers[layer]
    d = stack.state_dim
    mask = np.zeros((net.seq_len, net.channels), dtype=bool)
    values = np.zeros((net.seq_len, net.channels))
    if layer == 1:
        mask[:ctx_len, :d] = True
        values[:ctx_len, :d] = context
        n_act = min(ctx_len - 1, 0 if context_actions is None else len(context_actions))
        if n_act > 0:
            mask[:n_act, d:] = True
            values[:n_act, d:] = context_actions[-n_act:]
    else:
        mask[:ctx_len, :] = True
        values[:ctx_len, :] = context
    terminal_cols = slice(0, d) if layer == 1 else slice(None)
    return sample_sequence(net, stack.schedule, y, stack.guidance_weight, rng,
                           inpaint_mask=mask, inpaint_values=values,
                           terminal=terminal, terminal_cols=terminal_cols,
                           blend=stack.blend, normalizer=stack.normalizers.get(layer))


def f_su(h: int, stack: DiffusionStack, state: PlanState, r_max: float,
         criterion: SubgoalCriterion, rng: np.random.Generator, t: int = 0):
    """Regenerate the layer-h subgoal buffer (recursing upward first when the
    parent's own target has been reached)."""
    n_layers = stack.n_layers
    require(2 <= h <= n_layers, f"subgoal layer {h} out of range")

    if h < n_layers and is_satisfied(state.subgoals[h][-1],
                                     state.subgoals[h + 1][-1], criterion):
        f_su(h + 1, stack, state, r_max, criterion, rng, t)

    context, ctx_len = _window(state.subgoals[h], stack.pad_lengths[h])
    if h == n_layers:
        # Top of the hierarchy: aim at the best return seen in the data.
        y = 1.0 if r_max > 0 else 0.0
        terminal = None
    else:
        y, _ = _resolve_condition(stack, h, state.subgoals[h + 1][-1])
        terminal = state.subgoals[h + 1][-1]
    state.conditioning.append((t, h, y if y is not None else float("nan")))
    seq = _rollout_layer(stack, h, context, ctx_len, y, rng, terminal=terminal)
    if not np.isfinite(seq).all():
        seq = _rollout_layer(stack, h, context, ctx_len, y, rng, terminal=terminal)
    new_subgoal = seq[ctx_len]
    if not np.isfinite(new_subgoal).all():
        new_subgoal = state.subgoals[h][-1].copy()
    state.subgoals[h].append(new_subgoal)
    state.refresh_log.append((t, h))


def plan(stack: DiffusionStack, tree: EncodingTree, s0, horizon: int,
         r_max: float | None = None, criterion: SubgoalCriterion | None = None,
         rng: np.random.Generator | None = None) -> PlanResult:
    """Generate ``horizon`` actions from ``s0`` with the trained stack.

    Deterministic given the generator. The returned state roll is the
    planner's own denoised trajectory, not an environment rollout.
    """
    if not stack.trained:
        raise ValueError("the diffusion stack has not been trained")
    require(horizon >= 0, "horizon must be >= 0")
    s0 = check_vector(s0, dim=stack.state_dim, name="s0")
    criterion = criterion or SubgoalCriterion()
    rng = rng if rng is not None else np.random.default_rng(0)
    r_max = stack.r_max if r_max is None else r_max
    d, m = stack.state_dim, stack.action_dim
    n_layers = stack.n_layers

    state = PlanState(subgoals={h: [s0.copy()] for h in range(2, n_layers + 1)},
                      states=[s0.copy()], actions=[])
    if horizon == 0:
        return PlanResult(actions=np.zeros((0, m)), states=np.array([s0]),
                          refresh_log=[], conditioning=[])

    for t in range(horizon):
        if is_satisfied(state.states[-1], state.subgoals[2][-1], criterion):
            f_su(2, stack, state, r_max, criterion, rng, t)

        target = state.subgoals[2][-1]
        y, _ = _resolve_condition(stack, 1, target)
        state.conditioning.append((t, 1, y if y is not None else float("nan")))

        context, ctx_len = _window(state.states, stack.pad_lengths[1])
        ctx_actions = (np.stack(state.actions) if state.actions
                       else np.zeros((0, m)))
        seq = _rollout_layer(stack, 1, context, ctx_len, y, rng,
                             terminal=target, context_actions=ctx_actions)
        if not np.isfinite(seq).all():
            seq = _rollout_layer(stack, 1, context, ctx_len, y, rng,
                                 terminal=target, context_actions=ctx_actions)

        next_action = seq[ctx_len - 1, d:]
        next_state = seq[ctx_len, :d]
        if not np.isfinite(next_action).all() or not np.isfinite(next_state).all():
            next_action = (state.actions[-1].copy() if state.actions
                           else np.zeros(m))
            next_state = state.states[-1].copy()
        state.actions.append(next_action.copy())
        state.states.append(next_state.copy())

    return PlanResult(actions=np.stack(state.actions),
                      states=np.stack(state.states),
                      refresh_log=state.refresh_log,
                      conditioning=state.conditioning)
