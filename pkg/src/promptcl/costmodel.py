"""Analytical FLOPs model for plain and prefix-prompted ViT pipelines.

MAC counting covers the matmuls that dominate a transformer pass: patch
projection, per-block QKV/output projections (4*n*D^2), attention score and
mix products (2*n*n_kv*D, where prompted blocks see n_kv = n + L_p/2 extra
key/value rows), the MLP (2*mlp_ratio*n*D^2), and the classifier.
Elementwise work (softmax, layernorm, gelu) is excluded.

Reported "GFLOPs" default to one per multiply-accumulate — the convention
under which ViT-B/16 at 224x224 is quoted as 17.6 GFLOPs; set
``flops_per_mac=2`` for the strict two-flops-per-MAC reading. All relative
numbers are invariant to that choice.

Training composition assumes the backward pass costs one forward when only
prompts train and two forwards when the whole network trains.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Callable

from . import autograd as ag


@dataclass(frozen=True)
class CostConfig:
    depth: int
    dim: int
    heads: int
    mlp_ratio: int
    image_size: int
    patch_size: int
    prompt_length: int
    prompted_layers: int
    num_classes: int = 1000
    channels: int = 3
    flops_per_mac: float = 1.0
    include_patch_embed: bool = True
    include_classifier: bool = True
    fw_bw_ratio_full: float = 2.0    # backward/forward for full-network training
    fw_bw_ratio_prompt: float = 1.0  # backward/forward for prompt-only training

    def __post_init__(self):
        for name in ("depth", "dim", "heads", "mlp_ratio", "image_size", "patch_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0 <= self.prompted_layers <= self.depth:
            raise ValueError(f"prompted_layers {self.prompted_layers} outside [0,{self.depth}]")

    @property
    def n_tokens(self) -> int:
        return (self.image_size // self.patch_size) ** 2 + 1


VITB16 = CostConfig(depth=12, dim=768, heads=12, mlp_ratio=4, image_size=224,
                    patch_size=16, prompt_length=8, prompted_layers=5, num_classes=1000)

DESK = CostConfig(depth=6, dim=64, heads=4, mlp_ratio=4, image_size=32,
                  patch_size=4, prompt_length=8, prompted_layers=5, num_classes=20)


@dataclass(frozen=True)
class CostReport:
    mode: str
    phase: str
    stages: dict[str, float] = field(default_factory=dict)
    total_flops: float = 0.0
    two_stage_flops: float = 0.0

    @property
    def percent_of_two_stage(self) -> float:
        return 100.0 * self.total_flops / self.two_stage_flops

    @property
    def gflops(self) -> float:
        return self.total_flops / 1e9

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "phase": self.phase,
            "stages_gflops": {k: v / 1e9 for k, v in self.stages.items()},
            "gflops": self.gflops,
            "two_stage_gflops": self.two_stage_flops / 1e9,
            "percent_of_two_stage": self.percent_of_two_stage,
        }


def vit_forward_macs(config: CostConfig, with_prompts: bool) -> int:
    """Multiply-accumulates of one forward pass."""
    n = config.n_tokens
    d = config.dim
    macs = 0
    if config.include_patch_embed:
        macs += (n - 1) * (config.channels * config.patch_size ** 2) * d
    for layer in range(1, config.depth + 1):
        prompted = with_prompts and layer <= config.prompted_layers and config.prompt_length > 0
        n_kv = n + config.prompt_length // 2 if prompted else n
        macs += 4 * n * d * d
        macs += 2 * n * n_kv * d
        macs += 2 * config.mlp_ratio * n * d * d
    if config.include_classifier:
        macs += d * config.num_classes
    return macs


def flops_vit_forward(config: CostConfig, with_prompts: bool) -> float:
    return vit_forward_macs(config, with_prompts) * config.flops_per_mac


MODES = ("two_stage", "one_stage", "one_stage_pp")
PHASES = ("train", "infer")


def pipeline_cost(config: CostConfig, mode: str, phase: str) -> CostReport:
    """FLOPs of a full pipeline pass for one image.

    Inference: the two-stage pipeline runs a plain query forward plus the
    prompted backbone forward; both one-stage variants run the prompted
    forward only. Training adds a prompt-scaled backward, and the
    regularized one-stage variant adds a plain reference forward.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    if phase not in PHASES:
        raise ValueError(f"unknown phase {phase!r}; expected one of {PHASES}")
    plain = flops_vit_forward(config, with_prompts=False)
    prompted = flops_vit_forward(config, with_prompts=True)
    backward = prompted * config.fw_bw_ratio_prompt

    def stages_for(m: str) -> dict[str, float]:
        stages: dict[str, float] = {}
        if phase == "infer":
            if m == "two_stage":
                stages["query_forward"] = plain
            stages["backbone_forward"] = prompted
        else:
            if m == "two_stage":
                stages["query_forward"] = plain
            elif m == "one_stage_pp":
                stages["reference_forward"] = plain
            stages["backbone_forward"] = prompted
            stages["backbone_backward"] = backward
        return stages

    stages = stages_for(mode)
    baseline = sum(stages_for("two_stage").values())
    return CostReport(mode=mode, phase=phase, stages=stages,
                      total_flops=sum(stages.values()), two_stage_flops=baseline)


_RELATIVE_COST = {
    # unit-cost algebra against plain training = forward(1) + backward(2)
    "er": Fraction(1 + 2, 3),
    "lwf": Fraction(1 + 1 + 2, 3),            # extra frozen-teacher forward
    "pcl_two_stage": Fraction(1 + 1 + 1, 3),  # query fw + backbone fw + prompt bw
    "os": Fraction(1 + 1, 3),                 # backbone fw + prompt bw
    "os_pp": Fraction(1 + 1 + 1, 3),          # reference fw + backbone fw + prompt bw
}

_METHOD_ALIASES = {"two_stage": "pcl_two_stage", "one_stage": "os", "one_stage_pp": "os_pp"}


def relative_training_complexity(method: str) -> Fraction:
    """Exact training-cost ratio of a method against plain replay training."""
    key = method.lower()
    key = _METHOD_ALIASES.get(key, key)
    if key not in _RELATIVE_COST:
        raise ValueError(f"unknown method {method!r}; expected one of {sorted(_RELATIVE_COST)}")
    return _RELATIVE_COST[key]


def measured_macs(run: Callable[[], None]) -> int:
    """Matmul MACs actually executed by ``run`` (instrumentation cross-check)."""
    ag.reset_mac_count()
    run()
    return ag.mac_count()


def sweep_rows(base: CostConfig, prompt_lengths=(0, 2, 4, 8, 16),
               layer_counts=None) -> list[dict]:
    """Design-space sweep: one row per (mode, phase, L_p, prompted layers)."""
    rows = []
    layer_counts = layer_counts if layer_counts is not None else (base.prompted_layers,)
    for lp in prompt_lengths:
        for layers in layer_counts:
            cfg = replace(base, prompt_length=lp, prompted_layers=layers)
            for mode in MODES:
                for phase in PHASES:
                    rep = pipeline_cost(cfg, mode, phase)
                    rows.append({
                        "mode": mode, "phase": phase, "L_p": lp, "layers": layers,
                        "gflops": rep.gflops,
                        "percent_of_two_stage": rep.percent_of_two_stage,
                    })
    return rows
