"""Offline pre-training and clipped posterior fine-tuning of flow-matching chunk policies."""
from .config import ConfigError, TrainConfig, load_config, parse_config
from .critic import ChunkCritic, make_critic
from .envs import ENV_NAMES, EnvSpec, collect_demos, make_env
from .flow_policy import FlowDraw, FlowPolicy, FrozenPolicyError, make_policy, sample_chunk
from .replay import DemoParseError, ReplayBuffer, StepRecord, load_demos, save_demos
from .trainer import TrainingDiverged, ablate, evaluate, finetune, pretrain
from .update import PocoHyper, importance_weights

__all__ = [
    "ConfigError", "TrainConfig", "load_config", "parse_config",
    "ChunkCritic", "make_critic",
    "ENV_NAMES", "EnvSpec", "collect_demos", "make_env",
    "FlowDraw", "FlowPolicy", "FrozenPolicyError", "make_policy", "sample_chunk",
    "DemoParseError", "ReplayBuffer", "StepRecord", "load_demos", "save_demos",
    "TrainingDiverged", "ablate", "evaluate", "finetune", "pretrain",
    "PocoHyper", "importance_weights",
]
