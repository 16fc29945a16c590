"""Structural-entropy guided hierarchical diffusion planning."""

__version__ = "0.1.0"

from .dataset import (Dataset, MazeEnv, Trajectory, cumulative_reward,
                      load_dataset, open_maze, save_dataset, synthesize_dataset)
from .state_graph import (StateGraph, build_knn_graph, dedupe_states,
                          one_dim_entropy, select_k)
from .encoding_tree import (EncodingTree, LayerPartition, bound_check, compress,
                            flat_tree, hcse_optimize, layer_partition, node_gain,
                            reweighted_entropy, stretch, tree_entropy,
                            tree_from_partition)
from .segmentation import (Segment, SegmentHierarchy, build_hierarchy,
                           pad_sequence, segment_layer, unpad_sequence)
from .diffusion import (DiffusionStack, VarianceSchedule, build_stack,
                        cfg_predict, condition_value, forward_diffuse,
                        make_schedule, reverse_step, sample_sequence, train,
                        training_loss, TrainConfig)
from .transitions import TransitionModel, entropy_terms, estimate_transitions
from .planner import PlanResult, SubgoalCriterion, f_su, is_satisfied, plan
from .estimators import HierarchicalDiffusionPlanner, StructuralPartitioner
from .config import Config, load_config
from .pipeline import EvalReport, evaluate, run_pipeline

__all__ = [
    "Dataset", "MazeEnv", "Trajectory", "cumulative_reward", "load_dataset",
    "open_maze", "save_dataset", "synthesize_dataset",
    "StateGraph", "build_knn_graph", "dedupe_states", "one_dim_entropy", "select_k",
    "EncodingTree", "LayerPartition", "bound_check", "compress", "flat_tree",
    "hcse_optimize", "layer_partition", "node_gain", "reweighted_entropy",
    "stretch", "tree_entropy", "tree_from_partition",
    "Segment", "SegmentHierarchy", "build_hierarchy", "pad_sequence",
    "segment_layer", "unpad_sequence",
    "DiffusionStack", "VarianceSchedule", "build_stack", "cfg_predict",
    "condition_value", "forward_diffuse", "make_schedule", "reverse_step",
    "sample_sequence", "train", "training_loss", "TrainConfig",
    "TransitionModel", "entropy_terms", "estimate_transitions",
    "PlanResult", "SubgoalCriterion", "f_su", "is_satisfied", "plan",
    "HierarchicalDiffusionPlanner", "StructuralPartitioner",
    "Config", "load_config", "EvalReport", "evaluate", "run_pipeline",
]
