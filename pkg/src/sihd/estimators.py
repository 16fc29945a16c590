"""Scikit-learn style estimators wrapping the pipeline.

``StructuralPartitioner`` is a clusterer: fit on a state array, read
``labels_`` (or any layer's communities). ``HierarchicalDiffusionPlanner``
fits the whole stack on an offline trajectory dataset and predicts action
sequences from a start state. Both expose get_params/set_params and clone
cleanly, so they compose with pipelines and model selection utilities.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin
from sklearn.exceptions import NotFittedError

from .config import Config
from .dataset import Dataset, Trajectory
from .diffusion import TrainConfig, build_stack, make_schedule, train
from .encoding_tree import hcse_optimize, layer_partition
from .pipeline import build_pipeline_objects
from .planner import SubgoalCriterion, plan
from .state_graph import select_k
from .validation import check_state_array, check_vector, require


class StructuralPartitioner(BaseEstimator, ClusterMixin):
    """Hierarchical community detection by structural-entropy minimization.

    Builds a k-NN similarity graph over the samples (picking k to maximize
    the degree-distribution entropy) and greedily grows an encoding tree of
    height up to ``max_height``.

    Parameters
    ----------
    max_height : int
        Maximum encoding-tree height (>= 2).
    k_range : tuple or None
        Inclusive neighbor-count search range; None means (2, min(16, n-1)).
    similarity : str
        'rbf' (default) or 'cosine'.

    Attributes
    ----------
    graph_ : StateGraph of the selected k.
    tree_ : the optimized EncodingTree.
    k_ : selected neighbor count.
    labels_ : finest-layer community labels (height 1).
    """

    def __init__(self, max_height: int = 2, k_range=None, similarity: str = "rbf"):
        self.max_height = max_height
        self.k_range = k_range
        self.similarity = similarity

    def fit(self, X, y=None):
        X = check_state_array(X)
        require(self.max_height >= 2, "max_height must be >= 2")
        self.k_, self.graph_ = select_k(X, self.k_range, self.similarity)
        self.tree_ = hcse_optimize(self.graph_, self.max_height)
        self.labels_ = self.labels_at(1)
        return self

    def _check_fitted(self):
        if not hasattr(self, "tree_"):
            raise NotFittedError("call fit before using this estimator")

    def labels_at(self, height: int) -> np.ndarray:
        """Community labels at a given tree height (renumbered 0..C-1)."""
        self._check_fitted()
        if self.tree_.height <= 1:
            return np.zeros(self.graph_.n_vertices, dtype=np.int64)
        height = min(height, self.tree_.height - 1)
        return layer_partition(self.tree_, height).labels()

    def fit_predict(self, X, y=None):
        return self.fit(X).labels_


class HierarchicalDiffusionPlanner(BaseEstimator):
    """Offline planner: fit per-layer conditional diffusers on trajectories,
    predict receding-horizon action sequences from a start state.

    Accepts a Dataset or a list of Trajectory objects in ``fit``.
    """

    def __init__(self, max_height: int = 3, n_diffusion_steps: int = 20,
                 schedule: str = "cosine", guidance_weight: float = 0.1,
                 explore_coef: float = 0.0, pad_length: int = 8,
                 train_steps: int = 2000, batch_size: int = 32,
                 learning_rate: float = 2e-3, hidden_width: int = 192,
                 goal_tolerance: float = 0.5, dedupe_tol: float = 1e-9,
                 k_min: int = 2, k_max: int = 16, similarity: str = "rbf",
                 random_state: int = 0):
        self.max_height = max_height
        self.n_diffusion_steps = n_diffusion_steps
        self.schedule = schedule
        self.guidance_weight = guidance_weight
        self.explore_coef = explore_coef
        self.pad_length = pad_length
        self.train_steps = train_steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.hidden_width = hidden_width
        self.goal_tolerance = goal_tolerance
        self.dedupe_tol = dedupe_tol
        self.k_min = k_min
        self.k_max = k_max
        self.similarity = similarity
        self.random_state = random_state

    def _as_dataset(self, data) -> Dataset:
        if isinstance(data, Dataset):
            return data
        require(len(data) > 0 and isinstance(data[0], Trajectory),
                "fit expects a Dataset or a list of Trajectory")
        return Dataset(list(data))

    def fit(self, data, y=None):
        dataset = self._as_dataset(data)
        cfg = Config(max_height=self.max_height, dedupe_tol=self.dedupe_tol,
                     k_min=self.k_min, k_max=self.k_max, similarity=self.similarity)
        graph, tree, hierarchies = build_pipeline_objects(cfg, dataset)
        schedule = make_schedule(self.schedule, self.n_diffusion_steps)
        rng = np.random.default_rng(self.random_state)
        stack = build_stack(dataset, tree, graph, schedule,
                            pad_length=self.pad_length,
                            guidance_weight=self.guidance_weight,
                            explore_coef=self.explore_coef,
                            hidden=self.hidden_width, rng=rng)
        tc = TrainConfig(n_steps=self.train_steps, batch_size=self.batch_size,
                         learning_rate=self.learning_rate,
                         guidance_weight=self.guidance_weight,
                         explore_coef=self.explore_coef, hidden=self.hidden_width)
        stack, traces = train(stack, dataset, tree, hierarchies, tc,
                              seed=self.random_state)
        stack.use_ema()
        self.graph_, self.tree_, self.stack_ = graph, tree, stack
        self.loss_traces_ = traces["loss"]
        return self

    def predict(self, start_state, horizon: int = 32, seed: int = 0) -> np.ndarray:
        """Action sequence of length ``horizon`` from ``start_state``."""
        if not hasattr(self, "stack_"):
            raise NotFittedError("call fit before predict")
        s0 = check_vector(start_state, dim=self.stack_.state_dim, name="start_state")
        result = plan(self.stack_, self.tree_, s0, horizon,
                      criterion=SubgoalCriterion(tolerance=self.goal_tolerance),
                      rng=np.random.default_rng(seed))
        return result.actions

    def score(self, env, episodes: int = 5, horizon: int = 32, seed: int = 0) -> float:
        """Goal-reach rate of planner rollouts in a maze environment."""
        if not hasattr(self, "stack_"):
            raise NotFittedError("call fit before score")
        s0 = env.cell_center(env.start)
        reached = []
        for ep in range(episodes):
            rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(ep + 1)[-1])
            result = plan(self.stack_, self.tree_, s0, horizon,
                          criterion=SubgoalCriterion(tolerance=self.goal_tolerance),
                          rng=rng)
            _, _, hit, _ = env.rollout(result.actions)
            reached.append(bool(hit))
        return float(np.mean(reached))
