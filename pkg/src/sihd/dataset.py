"""Trajectory data model, JSON-Lines ingestion, and a toy maze environment
with a scripted behavioral policy for synthesizing desk-scale offline datasets.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .validation import require


@dataclass
class Trajectory:
    """One episode: states, actions and rewards of equal length T+1.

    The final action/reward slot is a terminal placeholder (zeros) so that
    all three arrays stay rectangular.
    """

    states: np.ndarray   # (T+1, d)
    actions: np.ndarray  # (T+1, m)
    rewards: np.ndarray  # (T+1,)

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64)
        self.actions = np.asarray(self.actions, dtype=np.float64)
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        require(self.states.ndim == 2, "states must be a (T+1, d) array")
        require(self.actions.ndim == 2, "actions must be a (T+1, m) array")
        require(self.rewards.ndim == 1, "rewards must be a (T+1,) array")
        n = len(self.states)
        require(n >= 2, "trajectory needs at least 2 timesteps")
        require(len(self.actions) == n and len(self.rewards) == n,
                "states, actions and rewards must have equal length")
        for name, arr in (("states", self.states), ("actions", self.actions),
                          ("rewards", self.rewards)):
            require(np.isfinite(arr).all(), f"{name} contain non-finite values")

    def __len__(self):
        return len(self.states)

    @property
    def state_dim(self):
        return self.states.shape[1]

    @property
    def action_dim(self):
        return self.actions.shape[1]


def cumulative_reward(traj: Trajectory) -> float:
    """Undiscounted sum of rewards over the episode."""
    return float(traj.rewards.sum())


@dataclass
class Dataset:
    """A collection of trajectories with shared state/action dimensions.

    ``r_max`` is always recomputed from the trajectories on construction.
    """

    trajectories: list[Trajectory]
    state_dim: int = field(init=False)
    action_dim: int = field(init=False)
    r_max: float = field(init=False)

    def __post_init__(self):
        require(len(self.trajectories) > 0, "dataset is empty")
        first = self.trajectories[0]
        self.state_dim = first.state_dim
        self.action_dim = first.action_dim
        for i, traj in enumerate(self.trajectories):
            require(traj.state_dim == self.state_dim,
                    f"trajectory {i}: state dim {traj.state_dim} != {self.state_dim}")
            require(traj.action_dim == self.action_dim,
                    f"trajectory {i}: action dim {traj.action_dim} != {self.action_dim}")
        self.r_max = max(cumulative_reward(t) for t in self.trajectories)

    def __len__(self):
        return len(self.trajectories)

    def __iter__(self):
        return iter(self.trajectories)


def _fmt(x: float) -> str:
    # 17 significant digits round-trips any IEEE double exactly.
    return format(float(x), ".17g")


def _traj_to_line(traj: Trajectory) -> str:
    states = ",".join("[" + ",".join(_fmt(v) for v in row) + "]" for row in traj.states)
    actions = ",".join("[" + ",".join(_fmt(v) for v in row) + "]" for row in traj.actions)
    rewards = ",".join(_fmt(v) for v in traj.rewards)
    return ('{"states":[%s],"actions":[%s],"rewards":[%s]}'
            % (states, actions, rewards))


def save_dataset(dataset: Dataset, path) -> None:
    """Write a dataset as canonical JSON-Lines (one trajectory per line)."""
    with open(path, "w", encoding="utf-8") as fh:
        for traj in dataset.trajectories:
            fh.write(_traj_to_line(traj))
            fh.write("\n")


def load_dataset(path) -> Dataset:
    """Load a JSON-Lines dataset file and validate it.

    Raises ValueError with the offending line number on malformed input,
    on dimension mismatches, or when the file holds no trajectories.
    """
    trajectories = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                traj = Trajectory(states=np.array(obj["states"], dtype=np.float64),
                                  actions=np.array(obj["actions"], dtype=np.float64),
                                  rewards=np.array(obj["rewards"], dtype=np.float64))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}: line {lineno}: malformed trajectory: {exc}") from exc
            trajectories.append(traj)
    if not trajectories:
        raise ValueError(f"{path}: empty dataset")
    return Dataset(trajectories)


# ---------------------------------------------------------------------------
# Toy maze environment
# ---------------------------------------------------------------------------

# Fixed scan order for greedy moves keeps the noise-free collector deterministic.
_MOVES = ((0, -1), (1, 0), (0, 1), (-1, 0))  # N, E, S, W in (col, row) deltas


@dataclass
class MazeEnv:
    """Grid maze with continuous 2D observations.

    States are cell centers plus uniform jitter of ``noise_scale`` so that
    similarity metrics and density estimates behave like in continuous
    control. Actions are 2D displacement vectors.
    """

    walls: np.ndarray          # (H, W) bool, True = blocked
    start: tuple[int, int]     # (col, row)
    goal: tuple[int, int]      # (col, row)
    noise_scale: float = 0.1   # state jitter half-width, in cell units
    goal_reward: float = 1.0
    max_action: float = 1.5    # displacement clip per env step, cell units

    def __post_init__(self):
        self.walls = np.asarray(self.walls, dtype=bool)
        require(self.walls.ndim == 2, "walls must be a 2D mask")
        require(self.noise_scale >= 0.0, "noise_scale must be >= 0")
        for name, cell in (("start", self.start), ("goal", self.goal)):
            require(self.in_bounds(cell) and not self.is_wall(cell),
                    f"{name} cell {cell} is blocked or out of bounds")
        require(self.distance_field()[self.start[1], self.start[0]] >= 0,
                "no wall-free path from start to goal")

    @property
    def width(self):
        return self.walls.shape[1]

    @property
    def height(self):
        return self.walls.shape[0]

    def in_bounds(self, cell) -> bool:
        c, r = cell
        return 0 <= c < self.width and 0 <= r < self.height

    def is_wall(self, cell) -> bool:
        c, r = cell
        return bool(self.walls[r, c])

    def cell_center(self, cell) -> np.ndarray:
        return np.array([cell[0] + 0.5, cell[1] + 0.5], dtype=np.float64)

    def cell_of(self, position) -> tuple[int, int]:
        c = int(np.clip(np.floor(position[0]), 0, self.width - 1))
        r = int(np.clip(np.floor(position[1]), 0, self.height - 1))
        return (c, r)

    def distance_field(self) -> np.ndarray:
        """BFS distance (in steps) from every cell to the goal; -1 if unreachable."""
        dist = np.full((self.height, self.width), -1, dtype=np.int64)
        gc, gr = self.goal
        dist[gr, gc] = 0
        queue = deque([(gc, gr)])
        while queue:
            c, r = queue.popleft()
            for dc, dr in _MOVES:
                nc, nr = c + dc, r + dr
                if (0 <= nc < self.width and 0 <= nr < self.height
                        and not self.walls[nr, nc] and dist[nr, nc] < 0):
                    dist[nr, nc] = dist[r, c] + 1
                    queue.append((nc, nr))
        return dist

    def shortest_path_length(self) -> int:
        return int(self.distance_field()[self.start[1], self.start[0]])

    def observe(self, cell, rng: np.random.Generator) -> np.ndarray:
        obs = self.cell_center(cell)
        if self.noise_scale > 0:
            obs = obs + rng.uniform(-self.noise_scale, self.noise_scale, size=2)
        return obs

    def step_position(self, position: np.ndarray, action: np.ndarray) -> np.ndarray:
        """Deterministic continuous transition: move unless the target cell is blocked."""
        action = np.clip(np.asarray(action, dtype=np.float64),
                         -self.max_action, self.max_action)
        target = position + action
        if self.in_bounds(self.cell_of(target)) and not self.is_wall(self.cell_of(target)):
            tc, tr = np.floor(target[0]), np.floor(target[1])
            if 0 <= tc < self.width and 0 <= tr < self.height:
                return target
        return position.copy()

    def at_goal(self, position) -> bool:
        return self.cell_of(position) == self.goal

    def rollout(self, actions: np.ndarray, rng: np.random.Generator | None = None):
        """Replay an action sequence from the start cell.

        Returns (positions, total_reward, reached, steps). The episode stops at
        the first goal hit; remaining actions are ignored.
        """
        rng = rng if rng is not None else np.random.default_rng(0)
        position = self.observe(self.start, rng)
        positions = [position.copy()]
        total = 0.0
        for steps, action in enumerate(np.asarray(actions, dtype=np.float64), start=1):
            position = self.step_position(position, action)
            positions.append(position.copy())
            if self.at_goal(position):
                total += self.goal_reward
                return np.array(positions), total, True, steps
        return np.array(positions), total, False, len(positions) - 1


def open_maze(width: int = 8, height: int = 8, **kwargs) -> MazeEnv:
    """Maze with no interior walls; start top-left, goal bottom-right."""
    walls = np.zeros((height, width), dtype=bool)
    kwargs.setdefault("start", (0, 0))
    kwargs.setdefault("goal", (width - 1, height - 1))
    return MazeEnv(walls=walls, **kwargs)


def default_maze(**kwargs) -> MazeEnv:
    """8x8 maze with a single wall row forcing a detour through a gap."""
    walls = np.zeros((8, 8), dtype=bool)
    walls[4, 0:6] = True
    kwargs.setdefault("start", (0, 0))
    kwargs.setdefault("goal", (0, 7))
    return MazeEnv(walls=walls, **kwargs)


def parse_walls(text: str) -> tuple[np.ndarray, tuple | None, tuple | None]:
    """Parse a text maze: '#' wall, '.' free, optional 'S' start and 'G' goal."""
    rows = [line for line in text.splitlines() if line.strip()]
    require(len(rows) > 0, "empty walls file")
    width = max(len(r) for r in rows)
    walls = np.zeros((len(rows), width), dtype=bool)
    start = goal = None
    for r, row in enumerate(rows):
        for c, ch in enumerate(row):
            if ch == "#":
                walls[r, c] = True
            elif ch == "S":
                start = (c, r)
            elif ch == "G":
                goal = (c, r)
    return walls, start, goal


def synthesize_dataset(env: MazeEnv, n_episodes: int, noise: float,
                       seed: int, max_steps: int | None = None) -> Dataset:
    """Collect episodes from an epsilon-noisy shortest-path walker.

    With probability ``noise`` the walker takes a uniformly random open move,
    otherwise it greedily descends the BFS distance-to-goal field. Rewards are
    sparse: ``env.goal_reward`` on the transition that reaches the goal, zero
    elsewhere. Pure function of (env, n_episodes, noise, seed).
    """
    require(n_episodes > 0, "n_episodes must be positive")
    require(0.0 <= noise <= 1.0, "noise must lie in [0, 1]")
    dist = env.distance_field()
    if dist[env.start[1], env.start[0]] < 0:
        raise ValueError("goal unreachable from start")
    if max_steps is None:
        max_steps = 4 * (env.width + env.height)

    rng = np.random.default_rng(seed)
    trajectories = []
    for _ in range(n_episodes):
        cell = env.start
        obs = env.observe(cell, rng)
        states, actions, rewards = [obs], [], []
        for _ in range(max_steps):
            open_moves = []
            for dc, dr in _MOVES:
                nxt = (cell[0] + dc, cell[1] + dr)
                if env.in_bounds(nxt) and not env.is_wall(nxt) and dist[nxt[1], nxt[0]] >= 0:
                    open_moves.append(nxt)
            # Greedy step: first open move (fixed scan order) that lowers the
            # BFS distance; noisy step: uniform over open moves.
            if noise > 0 and rng.random() < noise:
                cell = open_moves[rng.integers(len(open_moves))]
            else:
                cell = min(open_moves, key=lambda n: dist[n[1], n[0]])
            nxt_obs = env.observe(cell, rng)
            actions.append(nxt_obs - obs)
            rewards.append(env.goal_reward if cell == env.goal else 0.0)
            obs = nxt_obs
            states.append(obs)
            if cell == env.goal:
                break
        # Terminal placeholder keeps the three arrays rectangular.
        actions.append(np.zeros(2))
        rewards.append(0.0)
        trajectories.append(Trajectory(states=np.array(states),
                                       actions=np.array(actions),
                                       rewards=np.array(rewards)))
    return Dataset(trajectories)
