"""Prompt-based continual learning at desk scale.

A float64 ViT trained from scratch with prefix prompts drawn from a
task-partitioned pool, two prompt-query paths (one extra frozen forward
pass, or the current layer's [CLS] embedding), a query-pool regularization
loss, a class-incremental benchmark harness, and an analytical FLOPs model
for the pipeline variants.
"""

from .autograd import Tape, Tensor, backward, grad_check, no_grad
from .config import ExperimentConfig, desk_preset, load_config, parse_config
from .costmodel import (CostConfig, CostReport, DESK, VITB16, flops_vit_forward,
                        measured_macs, pipeline_cost, relative_training_complexity)
from .datasets import LabeledImageSet, cifar100_dump, cifar100_load, subset_classes, synth_generate
from .harness import (AccuracyMatrix, ContinualTrainer, RunResult, RunSnapshot, TaskStream,
                      drift_analysis, metric_an, metric_fn, pretrain_backbone, run_experiment,
                      split_tasks)
from .pool import PromptPool, Query, cosine_similarity, query_one_stage, query_two_stage, split_prompt
from .queryreg import QRConfig, qr_loss, reference_query, similarity_profiles, total_loss
from .vit import ForwardRecord, ViTConfig, ViTModel, prefix_mhsa

__all__ = [
    "AccuracyMatrix", "ContinualTrainer", "CostConfig", "CostReport", "DESK",
    "ExperimentConfig", "ForwardRecord", "LabeledImageSet", "PromptPool", "QRConfig",
    "Query", "RunResult", "RunSnapshot", "Tape", "TaskStream", "Tensor", "VITB16",
    "ViTConfig", "ViTModel", "backward", "cifar100_dump", "cifar100_load",
    "cosine_similarity", "desk_preset", "drift_analysis", "flops_vit_forward",
    "grad_check", "load_config", "measured_macs", "metric_an", "metric_fn", "no_grad",
    "parse_config", "pipeline_cost", "pretrain_backbone", "prefix_mhsa", "qr_loss",
    "query_one_stage", "query_two_stage", "reference_query", "relative_training_complexity",
    "run_experiment", "similarity_profiles", "split_prompt", "split_tasks", "subset_classes",
    "synth_generate", "total_loss",
]
