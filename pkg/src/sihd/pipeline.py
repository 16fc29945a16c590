"""End-to-end pipeline: synth -> graph -> partition -> segment -> train ->
plan/eval, with content-addressed artifacts so reruns under an unchanged
config skip completed stages and reproduce byte-identical reports.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import load_stack, save_stack
from .config import Config
from .dataset import (Dataset, MazeEnv, load_dataset, open_maze, parse_walls,
                      save_dataset, synthesize_dataset)
from .diffusion import DiffusionStack, TrainConfig, build_stack, make_schedule, train
from .encoding_tree import EncodingTree, hcse_optimize
from .planner import SubgoalCriterion, plan
from .segmentation import build_hierarchy
from .state_graph import StateGraph, dedupe_states, select_k
from .validation import require


class StageError(RuntimeError):
    """A pipeline stage failed; carries the stage name and artifact path."""

    def __init__(self, stage: str, artifact, cause: Exception):
        super().__init__(f"stage '{stage}' failed writing {artifact}: {cause}")
        self.stage = stage
        self.artifact = str(artifact)


def file_hash(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()[:16]


def env_from_config(cfg: Config) -> MazeEnv:
    if cfg.walls_file:
        walls, start, goal = parse_walls(Path(cfg.walls_file).read_text())
        kwargs = {}
        if start is not None:
            kwargs["start"] = start
        if goal is not None:
            kwargs["goal"] = goal
        return MazeEnv(walls=walls, noise_scale=cfg.state_noise,
                       goal_reward=cfg.goal_reward,
                       start=kwargs.get("start", (0, 0)),
                       goal=kwargs.get("goal", (walls.shape[1] - 1, walls.shape[0] - 1)))
    return open_maze(cfg.grid_width, cfg.grid_height,
                     noise_scale=cfg.state_noise, goal_reward=cfg.goal_reward)


def save_env(env: MazeEnv, path):
    payload = {"walls": env.walls.astype(int).tolist(), "start": list(env.start),
               "goal": list(env.goal), "noise_scale": env.noise_scale,
               "goal_reward": env.goal_reward, "max_action": env.max_action}
    Path(path).write_text(json.dumps(payload, sort_keys=True))


def load_env(path) -> MazeEnv:
    payload = json.loads(Path(path).read_text())
    return MazeEnv(walls=np.asarray(payload["walls"], dtype=bool),
                   start=tuple(payload["start"]), goal=tuple(payload["goal"]),
                   noise_scale=payload["noise_scale"],
                   goal_reward=payload["goal_reward"],
                   max_action=payload["max_action"])


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    episodes: int
    goal_rate: float
    mean_reward: float
    mean_length: float
    normalized_score: float
    random_goal_rate: float
    random_mean_reward: float
    expert_mean_reward: float
    per_seed: dict
    config_hash: str
    zero_episodes: bool = False

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def random_policy_rollout(env: MazeEnv, horizon: int, rng: np.random.Generator):
    actions = rng.uniform(-1.0, 1.0, size=(horizon, 2))
    return env.rollout(actions, rng=np.random.default_rng(0))


def greedy_rollout(env: MazeEnv, horizon: int):
    """Noise-free collector replay: the expert anchor for normalization."""
    data = synthesize_dataset(env, 1, 0.0, seed=0, max_steps=max(horizon, 1))
    traj = data.trajectories[0]
    return env.rollout(traj.actions[:-1], rng=np.random.default_rng(0))


def evaluate(stack: DiffusionStack, tree: EncodingTree, env: MazeEnv,
             episodes: int, seeds: list[int], horizon: int,
             goal_tolerance: float, config_hash: str = "") -> EvalReport:
    """Planner rollouts in the environment, with random-policy and greedy
    collector baselines anchoring the normalized score at 0 and 100."""
    if episodes == 0:
        return EvalReport(episodes=0, goal_rate=0.0, mean_reward=0.0,
                          mean_length=0.0, normalized_score=0.0,
                          random_goal_rate=0.0, random_mean_reward=0.0,
                          expert_mean_reward=0.0, per_seed={},
                          config_hash=config_hash, zero_episodes=True)

    criterion = SubgoalCriterion(tolerance=goal_tolerance)
    s0 = env.cell_center(env.start)
    per_seed = {}
    plan_rewards, plan_goals, plan_lengths = [], [], []
    rand_rewards, rand_goals = [], []
    for seed in seeds:
        seed_rewards, seed_goals, seed_lengths = [], [], []
        for ep in range(episodes):
            rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(ep + 1)[-1])
            result = plan(stack, tree, s0, horizon, criterion=criterion, rng=rng)
            _, reward, reached, steps = env.rollout(result.actions)
            seed_rewards.append(reward)
            seed_goals.append(bool(reached))
            seed_lengths.append(steps)

            rand_rng = np.random.default_rng(
                np.random.SeedSequence(seed + 7919).spawn(ep + 1)[-1])
            _, r_reward, r_reached, _ = random_policy_rollout(env, horizon, rand_rng)
            rand_rewards.append(r_reward)
            rand_goals.append(bool(r_reached))
        per_seed[str(seed)] = {
            "goal_rate": float(np.mean(seed_goals)),
            "mean_reward": float(np.mean(seed_rewards)),
            "mean_length": float(np.mean(seed_lengths)),
        }
        plan_rewards.extend(seed_rewards)
        plan_goals.extend(seed_goals)
        plan_lengths.extend(seed_lengths)

    _, expert_reward, _, _ = greedy_rollout(env, horizon)
    rand_mean = float(np.mean(rand_rewards))
    plan_mean = float(np.mean(plan_rewards))
    denom = expert_reward - rand_mean
    score = 100.0 * (plan_mean - rand_mean) / denom if denom > 0 else 0.0
    return EvalReport(episodes=episodes * len(seeds),
                      goal_rate=float(np.mean(plan_goals)),
                      mean_reward=plan_mean,
                      mean_length=float(np.mean(plan_lengths)),
                      normalized_score=float(score),
                      random_goal_rate=float(np.mean(rand_goals)),
                      random_mean_reward=rand_mean,
                      expert_mean_reward=float(expert_reward),
                      per_seed=per_seed, config_hash=config_hash)


# ---------------------------------------------------------------------------
# Staged pipeline
# ---------------------------------------------------------------------------

def _stage_seed(cfg: Config, stage: str) -> int:
    digest = hashlib.sha256(f"{cfg.seed}:{stage}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


def build_pipeline_objects(cfg: Config, dataset: Dataset):
    """graph, tree and hierarchies for a dataset (shared by pipeline/estimators)."""
    vertices, index_map = dedupe_states(dataset, cfg.dedupe_tol)
    k_hi = min(cfg.k_max, len(vertices) - 1)
    require(k_hi >= cfg.k_min, "not enough distinct states for the requested k range")
    _, graph = select_k(vertices, (cfg.k_min, k_hi), cfg.similarity)
    tree = hcse_optimize(graph, cfg.max_height)
    hierarchies = []
    for ti, traj in enumerate(dataset.trajectories):
        ids = [index_map[(ti, t)] for t in range(len(traj))]
        hierarchies.append(build_hierarchy(traj, tree, ids))
    return graph, tree, hierarchies


def run_pipeline(cfg: Config, workdir) -> EvalReport:
    """Run every stage, persisting artifacts; stages whose outputs already
    match the manifest are skipped."""
    cfg.validate()
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    cfg_hash = cfg.hash()
    manifest_path = workdir / "manifest.json"
    manifest = {"config_hash": cfg_hash, "version": __version__,
                "seed": cfg.seed, "stages": {}}
    old = {}
    if manifest_path.exists():
        try:
            old = json.loads(manifest_path.read_text())
        except json.JSONDecodeError:
            old = {}
    reuse = old.get("config_hash") == cfg_hash
    old_stages = old.get("stages", {}) if reuse else {}

    def fresh(stage: str, artifact: Path) -> bool:
        rec = old_stages.get(stage)
        return bool(rec and artifact.exists() and rec.get("hash") == file_hash(artifact))

    def record(stage: str, artifact: Path):
        manifest["stages"][stage] = {"artifact": artifact.name,
                                     "hash": file_hash(artifact)}

    env = env_from_config(cfg)
    env_path = workdir / "env.json"
    data_path = workdir / "dataset.jsonl"
    graph_path = workdir / "graph.json"
    tree_path = workdir / "tree.json"
    seg_path = workdir / "segments.json"
    model_path = workdir / "model.bin"
    report_path = workdir / "report.json"

    try:
        if not fresh("env", env_path):
            save_env(env, env_path)
        record("env", env_path)

        if not fresh("synth", data_path):
            data = synthesize_dataset(env, cfg.episodes, cfg.collector_noise,
                                      seed=_stage_seed(cfg, "synth"))
            save_dataset(data, data_path)
        record("synth", data_path)
        dataset = load_dataset(data_path)
    except StageError:
        raise
    except Exception as exc:
        raise StageError("synth", data_path, exc) from exc

    try:
        rebuild = not (fresh("graph", graph_path) and fresh("partition", tree_path)
                       and fresh("segment", seg_path))
        vertices, index_map = dedupe_states(dataset, cfg.dedupe_tol)
        if rebuild:
            k_hi = min(cfg.k_max, len(vertices) - 1)
            require(k_hi >= cfg.k_min, "not enough distinct states for the k range")
            _, graph = select_k(vertices, (cfg.k_min, k_hi), cfg.similarity)
            graph_path.write_text(graph.to_json())
            tree = hcse_optimize(graph, cfg.max_height)
            tree_path.write_text(tree.to_json())
        else:
            graph = StateGraph.from_json(graph_path.read_text())
            tree = EncodingTree.from_json(tree_path.read_text(), graph)
        record("graph", graph_path)
        record("partition", tree_path)

        hierarchies = []
        for ti, traj in enumerate(dataset.trajectories):
            ids = [index_map[(ti, t)] for t in range(len(traj))]
            hierarchies.append(build_hierarchy(traj, tree, ids))
        if not fresh("segment", seg_path):
            seg_path.write_text(segments_json(hierarchies))
        record("segment", seg_path)
    except StageError:
        raise
    except Exception as exc:
        raise StageError("graph/partition/segment", tree_path, exc) from exc

    try:
        if not fresh("train", model_path):
            schedule = make_schedule(cfg.schedule, cfg.n_diffusion_steps)
            rng = np.random.default_rng(_stage_seed(cfg, "init"))
            stack = build_stack(dataset, tree, graph, schedule,
                                pad_length=cfg.pad_length,
                                guidance_weight=cfg.guidance_weight,
                                explore_coef=cfg.explore_coef,
                                hidden=cfg.hidden_width, blend=cfg.blend, rng=rng)
            tc = TrainConfig(n_steps=cfg.train_steps, batch_size=cfg.batch_size,
                             learning_rate=cfg.learning_rate, ema_decay=cfg.ema_decay,
                             p_uncond=cfg.p_uncond,
                             guidance_weight=cfg.guidance_weight,
                             explore_coef=cfg.explore_coef,
                             refresh_every=cfg.refresh_every,
                             kde_rollouts=cfg.kde_rollouts,
                             hidden=cfg.hidden_width, blend=cfg.blend)
            stack, _ = train(stack, dataset, tree, hierarchies, tc,
                             seed=_stage_seed(cfg, "train"))
            save_stack(stack, model_path, config_hash=cfg_hash)
        record("train", model_path)
        stack, _ = load_stack(model_path)
        stack.use_ema()
    except StageError:
        raise
    except Exception as exc:
        raise StageError("train", model_path, exc) from exc

    try:
        report = evaluate(stack, tree, env, cfg.eval_episodes, cfg.seed_list(),
                          cfg.horizon, cfg.goal_tolerance, config_hash=cfg_hash)
        report_path.write_text(report.to_json())
        record("eval", report_path)
    except StageError:
        raise
    except Exception as exc:
        raise StageError("eval", report_path, exc) from exc

    manifest_path.write_text(json.dumps(manifest, sort_keys=True))
    return report


def segments_json(hierarchies) -> str:
    """Per-trajectory, per-layer boundary indices and subgoal timesteps."""
    payload = []
    for hier in hierarchies:
        layers = {}
        for h, segs in hier.segments.items():
            layers[str(h)] = {
                "boundaries": [s.start for s in segs[1:]],
                "subgoal_timesteps": [s.stop for s in segs],
            }
        payload.append(layers)
    return json.dumps(payload, sort_keys=True)
