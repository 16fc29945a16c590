import numpy as np
import pytest

from sihd import StateGraph
from sihd.encoding_tree import EncodingTree, refresh_caches


def make_graph(adjacency, seed=0):
    adjacency = np.asarray(adjacency, dtype=np.float64)
    pts = np.random.default_rng(seed).normal(size=(len(adjacency), 2))
    return StateGraph(vertices=pts, adjacency=adjacency)


def complete_graph(n):
    a = np.ones((n, n))
    np.fill_diagonal(a, 0)
    return make_graph(a)


def cycle_graph(n):
    a = np.zeros((n, n))
    for i in range(n):
        a[i, (i + 1) % n] = a[(i + 1) % n, i] = 1.0
    return make_graph(a)


def path_graph(n):
    a = np.zeros((n, n))
    for i in range(n - 1):
        a[i, i + 1] = a[i + 1, i] = 1.0
    return make_graph(a)


def star_graph(n_leaves):
    n = n_leaves + 1
    a = np.zeros((n, n))
    a[0, 1:] = a[1:, 0] = 1.0
    return make_graph(a)


def two_cliques_bridge(k):
    """Two k-cliques joined by a single unit bridge edge."""
    n = 2 * k
    a = np.zeros((n, n))
    for i in range(k):
        for j in range(i + 1, k):
            a[i, j] = a[j, i] = 1.0
            a[k + i, k + j] = a[k + j, k + i] = 1.0
    a[0, k] = a[k, 0] = 1.0
    return make_graph(a)


def random_weighted_graph(rng, n_min=4, n_max=12):
    """Connected-ish random weighted graph without self-loops."""
    n = int(rng.integers(n_min, n_max + 1))
    mask = rng.random((n, n)) < 0.55
    a = np.triu(rng.random((n, n)) * mask, 1)
    a = a + a.T
    for i in range(n - 1):  # guarantee positive volume everywhere
        if a[i].sum() == 0:
            a[i, i + 1] = a[i + 1, i] = rng.random() + 0.1
    if a[n - 1].sum() == 0:
        a[n - 1, 0] = a[0, n - 1] = rng.random() + 0.1
    return make_graph(a, seed=int(rng.integers(1 << 30)))


def random_valid_tree(graph, rng, max_height=4):
    """A random layered encoding tree: repeatedly group the current top level."""
    tree = EncodingTree()
    tree.root = tree._add(None)
    level = [tree._add(tree.root, vertex=v) for v in range(graph.n_vertices)]
    for _ in range(int(rng.integers(0, max_height - 1))):
        if len(level) <= 2:
            break
        n_groups = int(rng.integers(2, len(level)))
        assign = rng.integers(0, n_groups, size=len(level))
        # regroup under fresh intermediate nodes, skipping empty groups
        new_level = []
        for gidx in range(n_groups):
            members = [level[i] for i in np.flatnonzero(assign == gidx)]
            if not members:
                continue
            mid = tree._add(tree.root)
            for node in members:
                tree.nodes[tree.root].children.remove(node)
                tree.nodes[node].parent = mid
                tree.nodes[mid].children.append(node)
            new_level.append(mid)
        level = new_level
    refresh_caches(graph, tree)
    return tree


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def tiny_config(**overrides):
    from sihd.config import Config
    cfg = Config(grid_width=5, grid_height=5, episodes=12, collector_noise=0.3,
                 k_min=2, k_max=6, max_height=3, n_diffusion_steps=8,
                 train_steps=150, batch_size=16, hidden_width=32, pad_length=6,
                 eval_episodes=2, seeds="0,1", horizon=12, kde_rollouts=4,
                 refresh_every=75)
    for key, value in overrides.items():
        setattr(cfg, key, value)
    return cfg.validate()


@pytest.fixture(scope="session")
def tiny_world():
    """A small maze, dataset, graph, tree and trained stack shared by the
    planner/checkpoint/estimator tests."""
    from sihd import synthesize_dataset
    from sihd.dataset import open_maze
    from sihd.diffusion import TrainConfig, build_stack, make_schedule, train
    from sihd.pipeline import build_pipeline_objects

    cfg = tiny_config()
    env = open_maze(cfg.grid_width, cfg.grid_height,
                    noise_scale=cfg.state_noise, goal_reward=cfg.goal_reward)
    dataset = synthesize_dataset(env, cfg.episodes, cfg.collector_noise, seed=5)
    graph, tree, hierarchies = build_pipeline_objects(cfg, dataset)
    schedule = make_schedule(cfg.schedule, cfg.n_diffusion_steps)
    stack = build_stack(dataset, tree, graph, schedule, pad_length=cfg.pad_length,
                        guidance_weight=cfg.guidance_weight,
                        hidden=cfg.hidden_width,
                        rng=np.random.default_rng(0))
    tc = TrainConfig(n_steps=cfg.train_steps, batch_size=cfg.batch_size,
                     learning_rate=cfg.learning_rate, hidden=cfg.hidden_width)
    stack, traces = train(stack, dataset, tree, hierarchies, tc, seed=3)
    stack.use_ema()
    return {"cfg": cfg, "env": env, "dataset": dataset, "graph": graph,
            "tree": tree, "hierarchies": hierarchies, "stack": stack,
            "traces": traces}
