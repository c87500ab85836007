"""Heterogeneous graph-transformer policies for modular voxel robots."""

from .analysis import AttentionTrace, stable_rank, trace_attention
from .checkpoint import CheckpointError, load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint
from .env import EnvConfig, VoxelWalkerEnv, episode_return, random_policy_baseline
from .model import ModelConfig, forward, init_parameters
from .morphology import (EdgeScheme, HeteroGraph, MorphologyError, VoxelGrid, build_graph, load_morphology,
                         load_morphology_set, parse_grid)
from .rl import PPOConfig, TrainRunConfig, evaluate, train, transfer
from .tensor import Tape, Tensor

__version__ = "0.1.0"

__all__ = [
    "AttentionTrace", "CheckpointError", "EdgeScheme", "EnvConfig", "HeteroGraph", "ModelConfig",
    "MorphologyError", "PPOConfig", "Tape", "Tensor", "TrainRunConfig", "VoxelGrid", "VoxelWalkerEnv",
    "build_graph", "episode_return", "evaluate", "forward", "init_parameters", "load_checkpoint",
    "load_morphology", "load_morphology_set", "parse_grid", "random_policy_baseline", "read_checkpoint",
    "save_checkpoint", "stable_rank", "trace_attention", "train", "transfer", "write_checkpoint",
]
