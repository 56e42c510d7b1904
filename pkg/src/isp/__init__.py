"""Desk-scale dual-encoder prompt tuning with structural refinement.

A frozen toy image/text encoder pair, learnable multi-modal prompts
refined per layer within each modality (cross-attention over
high-response tokens) and across modalities (graph convolution over
affinity-profile graphs), a difficulty-weighted objective, and a
training/evaluation harness for base-to-new few-shot classification.

The numeric core is a small float64 tensor library with reverse-mode
differentiation verified end to end by finite differences.
"""

from .checkpoint import read_checkpoint, write_checkpoint
from .config import ConfigError, TrainConfig, load_config, parse_config
from .csp import AffinityPair, CspParams, cross_affinities, graph_refine, reduce_visual
from .encoder import (
    EncoderConfig,
    FrozenEncoder,
    FrozenFeatures,
    TokenSequence,
    class_probabilities,
)
from .gradcheck import run_grad_checks
from .objective import LossBreakdown, regularization, sample_weight, total_loss
from .pipeline import PromptSet, PromptedOutput, forward, init_prompts
from .ssp import SspParams, refine_prompts, select_tokens
from .task import FewShotTask, generate_task
from .tensor import GradReport, Tensor, grad_check, no_grad
from .training import (
    Adam,
    EvalReport,
    TrainResult,
    aggregate_reports,
    cosine_lr,
    evaluate,
    harmonic_mean,
    probe_dump,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "AffinityPair", "Adam", "ConfigError", "CspParams", "EncoderConfig",
    "EvalReport", "FewShotTask", "FrozenEncoder", "FrozenFeatures",
    "GradReport", "LossBreakdown", "PromptSet", "PromptedOutput",
    "SspParams", "Tensor", "TokenSequence", "TrainConfig", "TrainResult",
    "aggregate_reports", "class_probabilities", "cosine_lr",
    "cross_affinities", "evaluate", "forward", "generate_task", "grad_check",
    "graph_refine", "harmonic_mean", "init_prompts", "load_config", "no_grad",
    "parse_config", "probe_dump", "read_checkpoint", "reduce_visual",
    "refine_prompts", "regularization", "run_grad_checks", "sample_weight",
    "select_tokens", "total_loss", "train", "write_checkpoint",
]
