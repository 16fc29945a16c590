"""Command-line interface.

Subcommands mirror the pipeline stages (synth, graph, partition, segment,
train, plan, eval) plus ``pipeline`` to run everything. Exit codes: 0 on
success, 1 on validation errors, 2 on stage failures.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .checkpoint import load_stack, save_stack
from .config import load_config
from .dataset import (MazeEnv, load_dataset, parse_walls, save_dataset,
                      synthesize_dataset)
from .diffusion import TrainConfig, build_stack, make_schedule, train
from .encoding_tree import EncodingTree, hcse_optimize
from .pipeline import (StageError, env_from_config, evaluate, load_env,
                       run_pipeline, save_env, segments_json)
from .planner import SubgoalCriterion, plan
from .segmentation import build_hierarchy
from .state_graph import StateGraph, dedupe_states, select_k
from .validation import require


def _add_config_args(p):
    p.add_argument("--config", default=None, help="key = value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config entry (repeatable)")


def _cfg(args):
    return load_config(args.config, args.set)


def cmd_synth(args):
    if args.walls:
        walls, start, goal = parse_walls(Path(args.walls).read_text())
        env = MazeEnv(walls=walls,
                      start=start if start else (0, 0),
                      goal=goal if goal else (walls.shape[1] - 1, walls.shape[0] - 1),
                      noise_scale=args.state_noise)
    else:
        w, h = args.grid
        walls = np.zeros((h, w), dtype=bool)
        env = MazeEnv(walls=walls, start=(0, 0), goal=(w - 1, h - 1),
                      noise_scale=args.state_noise)
    data = synthesize_dataset(env, args.episodes, args.noise, args.seed)
    save_dataset(data, args.out)
    print(f"wrote {len(data)} episodes to {args.out}")


def cmd_graph(args):
    data = load_dataset(args.data)
    vertices, _ = dedupe_states(data, args.dedupe_tol)
    k_hi = min(args.k_max, len(vertices) - 1)
    require(k_hi >= args.k_min, "not enough distinct states for the k range")
    k, graph = select_k(vertices, (args.k_min, k_hi), args.similarity)
    Path(args.out).write_text(graph.to_json())
    print(f"selected k={k}; wrote {graph.n_vertices} vertices, "
          f"{len(graph.edge_list())} edges to {args.out}")


def cmd_partition(args):
    graph = StateGraph.from_json(Path(args.graph).read_text())
    tree = hcse_optimize(graph, args.height)
    Path(args.out).write_text(tree.to_json())
    print(f"tree height {tree.height}, {len(tree.nodes)} nodes, "
          f"entropy {tree.entropy_trace[-1]:.6f} bits -> {args.out}")


def cmd_segment(args):
    data = load_dataset(args.data)
    graph = StateGraph.from_json(Path(args.graph).read_text())
    tree = EncodingTree.from_json(Path(args.tree).read_text(), graph)
    _, index_map = dedupe_states(data, args.dedupe_tol)
    hierarchies = []
    for ti, traj in enumerate(data.trajectories):
        ids = [index_map[(ti, t)] for t in range(len(traj))]
        hierarchies.append(build_hierarchy(traj, tree, ids))
    Path(args.out).write_text(segments_json(hierarchies))
    print(f"segmented {len(hierarchies)} trajectories -> {args.out}")


def cmd_train(args):
    cfg = _cfg(args)
    data = load_dataset(args.data)
    graph = StateGraph.from_json(Path(args.graph).read_text())
    tree = EncodingTree.from_json(Path(args.tree).read_text(), graph)
    _, index_map = dedupe_states(data, cfg.dedupe_tol)
    hierarchies = []
    for ti, traj in enumerate(data.trajectories):
        ids = [index_map[(ti, t)] for t in range(len(traj))]
        hierarchies.append(build_hierarchy(traj, tree, ids))
    schedule = make_schedule(cfg.schedule, cfg.n_diffusion_steps)
    rng = np.random.default_rng(cfg.seed)
    stack = build_stack(data, tree, graph, schedule, pad_length=cfg.pad_length,
                        guidance_weight=cfg.guidance_weight,
                        explore_coef=cfg.explore_coef,
                        hidden=cfg.hidden_width, blend=cfg.blend, rng=rng)
    tc = TrainConfig(n_steps=cfg.train_steps, batch_size=cfg.batch_size,
                     learning_rate=cfg.learning_rate, ema_decay=cfg.ema_decay,
                     p_uncond=cfg.p_uncond, guidance_weight=cfg.guidance_weight,
                     explore_coef=cfg.explore_coef, refresh_every=cfg.refresh_every,
                     kde_rollouts=cfg.kde_rollouts, hidden=cfg.hidden_width,
                     blend=cfg.blend)
    stack, traces = train(stack, data, tree, hierarchies, tc, seed=cfg.seed)
    save_stack(stack, args.out, config_hash=cfg.hash())
    final = {h: t[-1] for h, t in traces["loss"].items()}
    print(f"trained {stack.n_layers} layers, final losses {final} -> {args.out}")


def cmd_plan(args):
    stack, _ = load_stack(args.model)
    stack.use_ema()
    tree = EncodingTree.from_json(Path(args.tree).read_text())
    env = load_env(args.env)
    rng = np.random.default_rng(args.seed)
    s0 = env.cell_center(env.start)
    result = plan(stack, tree, s0, args.horizon,
                  criterion=SubgoalCriterion(tolerance=args.goal_tolerance), rng=rng)
    payload = {
        "actions": result.actions.tolist(),
        "states": result.states.tolist(),
        "refresh_log": [[int(t), int(h)] for t, h in result.refresh_log],
        "conditioning": [[int(t), int(h), float(y)] for t, h, y in result.conditioning],
    }
    Path(args.out).write_text(json.dumps(payload, sort_keys=True))
    print(f"planned {len(result.actions)} actions -> {args.out}")


def cmd_eval(args):
    cfg = _cfg(args)
    stack, ckpt_hash = load_stack(args.model)
    stack.use_ema()
    tree = EncodingTree.from_json(Path(args.tree).read_text())
    env = load_env(args.env)
    report = evaluate(stack, tree, env, cfg.eval_episodes, cfg.seed_list(),
                      cfg.horizon, cfg.goal_tolerance, config_hash=ckpt_hash)
    Path(args.out).write_text(report.to_json())
    print(f"goal rate {report.goal_rate:.3f} (random {report.random_goal_rate:.3f}), "
          f"normalized score {report.normalized_score:.1f} -> {args.out}")


def cmd_pipeline(args):
    cfg = _cfg(args)
    report = run_pipeline(cfg, args.workdir)
    print(f"pipeline done: goal rate {report.goal_rate:.3f} "
          f"(random {report.random_goal_rate:.3f}), "
          f"normalized score {report.normalized_score:.1f}")


def build_parser():
    parser = argparse.ArgumentParser(prog="sihd",
                                     description="structural-entropy guided "
                                                 "hierarchical diffusion planning")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="synthesize an offline maze dataset")
    p.add_argument("--grid", nargs=2, type=int, default=[8, 8], metavar=("W", "H"))
    p.add_argument("--walls", default=None, help="text maze file (#/./S/G)")
    p.add_argument("--episodes", type=int, required=True)
    p.add_argument("--noise", type=float, default=0.3)
    p.add_argument("--state-noise", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("graph", help="build the k-NN state graph")
    p.add_argument("--data", required=True)
    p.add_argument("--similarity", choices=["cosine", "rbf"], default="rbf")
    p.add_argument("--k-min", type=int, default=2)
    p.add_argument("--k-max", type=int, default=16)
    p.add_argument("--dedupe-tol", type=float, default=1e-9)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_graph)

    p = sub.add_parser("partition", help="optimize the encoding tree")
    p.add_argument("--graph", required=True)
    p.add_argument("--height", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_partition)

    p = sub.add_parser("segment", help="hierarchically segment trajectories")
    p.add_argument("--data", required=True)
    p.add_argument("--graph", required=True)
    p.add_argument("--tree", required=True)
    p.add_argument("--dedupe-tol", type=float, default=1e-9)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("train", help="train the per-layer diffusion stack")
    p.add_argument("--data", required=True)
    p.add_argument("--graph", required=True)
    p.add_argument("--tree", required=True)
    _add_config_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("plan", help="generate an action plan")
    p.add_argument("--model", required=True)
    p.add_argument("--tree", required=True)
    p.add_argument("--env", required=True)
    p.add_argument("--horizon", type=int, required=True)
    p.add_argument("--goal-tolerance", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("eval", help="evaluate the planner in its environment")
    p.add_argument("--model", required=True)
    p.add_argument("--tree", required=True)
    p.add_argument("--env", required=True)
    _add_config_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("pipeline", help="run all stages end to end")
    _add_config_args(p)
    p.add_argument("--workdir", required=True)
    p.set_defaults(func=cmd_pipeline)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
