"""Experiment configuration: strict JSON schema, validation, presets.

Config files are UTF-8 JSON with a required "version" field. Unknown keys
are rejected rather than ignored, and all problems found during parsing are
aggregated into one ConfigError so a bad file is reported in a single pass.
Every run draws its randomness from the single top-level seed through the
named substreams in ``seeding``.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field

from .errors import ConfigError

CONFIG_VERSION = 1

_REQUIRED = object()


class _Section:
    """Pop-based reader over one JSON object; leftovers are unknown keys."""

    def __init__(self, raw: dict, path: str, problems: list[str]):
        self.raw = dict(raw)
        self.path = path
        self.problems = problems

    def take(self, key, default=_REQUIRED, kind=None):
        if key not in self.raw:
            if default is _REQUIRED:
                self.problems.append(f"{self.path}.{key}: missing required field")
                return None
            return default
        val = self.raw.pop(key)
        if kind is not None and not isinstance(val, kind) or isinstance(val, bool) and kind in (int, float):
            if not (kind is float and isinstance(val, int) and not isinstance(val, bool)):
                self.problems.append(f"{self.path}.{key}: expected {kind.__name__}, got {type(val).__name__}")
                return None
        return float(val) if kind is float else val

    def section(self, key, default=_REQUIRED) -> dict | None:
        val = self.take(key, default=default)
        if val is None or val is default and not isinstance(val, dict):
            return None if val is None else val
        if not isinstance(val, dict):
            self.problems.append(f"{self.path}.{key}: expected an object")
            return None
        return val

    def finish(self):
        for key in self.raw:
            self.problems.append(f"{self.path}.{key}: unknown key")


@dataclass(frozen=True)
class DatasetSettings:
    kind: str = "synthetic"
    per_class_train: int = 48
    per_class_test: int = 16
    noise_sigma: float = 0.15
    max_shift: int = 2
    train_path: str | None = None
    test_path: str | None = None


@dataclass(frozen=True)
class VitSettings:
    image_size: int = 32
    patch_size: int = 4
    depth: int = 6
    dim: int = 64
    heads: int = 4
    mlp_ratio: int = 4
    prompted_layers: tuple[int, ...] = (1, 2, 3, 4, 5)


@dataclass(frozen=True)
class PromptSettings:
    components: int = 100
    length: int = 8
    formation: str = "coda"
    topk_n: int = 5
    query: str = "one_stage"
    query_gradient: bool = False  # formation weights backprop into the query when True


@dataclass(frozen=True)
class QRSettings:
    enabled: bool = False
    lam: float = 1e-4
    use_cosine: bool = True
    use_softmax: bool = True
    ref_layer: int | str = "last"


@dataclass(frozen=True)
class OptimSettings:
    lr: float = 1e-3
    epochs: int = 5
    batch: int = 32
    pretrain_epochs: int = 15
    pretrain_lr: float = 1e-3


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    method: str = "prompt"  # prompt | ft | ub
    base_classes: int = 20  # pretraining needs this much class diversity to transfer
    continual_classes: int = 20
    tasks: int = 5
    dataset: DatasetSettings = field(default_factory=DatasetSettings)
    vit: VitSettings = field(default_factory=VitSettings)
    prompt: PromptSettings = field(default_factory=PromptSettings)
    qr: QRSettings = field(default_factory=QRSettings)
    optim: OptimSettings = field(default_factory=OptimSettings)
    output_dir: str | None = None
    backbone_checkpoint: str | None = None

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return dataclasses.replace(self, seed=seed)

    def to_dict(self) -> dict:
        return {
            "version": CONFIG_VERSION,
            "seed": self.seed,
            "method": self.method,
            "base_classes": self.base_classes,
            "continual_classes": self.continual_classes,
            "tasks": self.tasks,
            "dataset": dataclasses.asdict(self.dataset),
            "vit": {**dataclasses.asdict(self.vit),
                    "prompted_layers": list(self.vit.prompted_layers)},
            "prompt": dataclasses.asdict(self.prompt),
            "qr": dataclasses.asdict(self.qr),
            "optim": dataclasses.asdict(self.optim),
            "output_dir": self.output_dir,
            "backbone_checkpoint": self.backbone_checkpoint,
        }

    def snapshot_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def parse_config(raw: dict) -> ExperimentConfig:
    """Build and validate an ExperimentConfig from a parsed JSON object."""
    problems: list[str] = []
    top = _Section(raw, "config", problems)

    version = top.take("version", kind=int)
    if version is not None and version != CONFIG_VERSION:
        problems.append(f"config.version: unsupported version {version} (expected {CONFIG_VERSION})")
    seed = top.take("seed", default=0, kind=int)
    method = top.take("method", default="prompt", kind=str)
    base_classes = top.take("base_classes", default=10, kind=int)
    continual_classes = top.take("continual_classes", default=20, kind=int)
    tasks = top.take("tasks", default=5, kind=int)
    output_dir = top.take("output_dir", default=None)
    backbone_checkpoint = top.take("backbone_checkpoint", default=None)

    def build(section_name, cls, defaults, casts=None):
        raw_sec = top.section(section_name, default={})
        if raw_sec is None:
            return defaults
        sec = _Section(raw_sec, f"config.{section_name}", problems)
        kwargs = {}
        for f in dataclasses.fields(cls):
            fallback = getattr(defaults, f.name)
            val = sec.take(f.name, default=fallback)
            if casts and f.name in casts and val is not None:
                try:
                    val = casts[f.name](val)
                except (TypeError, ValueError):
                    problems.append(f"config.{section_name}.{f.name}: invalid value {val!r}")
                    val = fallback
            elif val is not None and fallback is not None and not isinstance(fallback, tuple):
                want = float if isinstance(fallback, float) else type(fallback)
                good = isinstance(val, want) and not (want is not bool and isinstance(val, bool))
                if want is float and isinstance(val, int) and not isinstance(val, bool):
                    val = float(val)
                elif not good:
                    problems.append(
                        f"config.{section_name}.{f.name}: expected {want.__name__}, got {type(val).__name__}")
                    val = fallback
            kwargs[f.name] = val
        sec.finish()
        try:
            return cls(**kwargs)
        except TypeError:
            return defaults

    dataset = build("dataset", DatasetSettings, DatasetSettings())
    vit = build("vit", VitSettings, VitSettings(),
                casts={"prompted_layers": lambda v: tuple(int(x) for x in v)})
    prompt = build("prompt", PromptSettings, PromptSettings())
    qr = build("qr", QRSettings, QRSettings(),
               casts={"lam": float, "ref_layer": lambda v: v if v == "last" else int(v)})
    optim = build("optim", OptimSettings, OptimSettings(), casts={"lr": float, "pretrain_lr": float})
    top.finish()

    cfg = ExperimentConfig(seed=seed if seed is not None else 0,
                           method=method or "prompt",
                           base_classes=base_classes, continual_classes=continual_classes,
                           tasks=tasks, dataset=dataset, vit=vit, prompt=prompt,
                           qr=qr, optim=optim, output_dir=output_dir,
                           backbone_checkpoint=backbone_checkpoint)
    problems.extend(validate_config(cfg))
    if problems:
        raise ConfigError(problems)
    return cfg


def validate_config(cfg: ExperimentConfig) -> list[str]:
    """All cross-field constraint violations, empty when the config is sound."""
    p: list[str] = []
    if cfg.method not in ("prompt", "ft", "ub"):
        p.append(f"method must be prompt|ft|ub, got {cfg.method!r}")
    if cfg.seed < 0:
        p.append("seed must be nonnegative")
    if cfg.tasks < 1:
        p.append("tasks must be >= 1")
    if cfg.continual_classes < 1:
        p.append("continual_classes must be >= 1")
    elif cfg.tasks >= 1 and cfg.continual_classes % cfg.tasks != 0:
        p.append(f"continual_classes {cfg.continual_classes} not divisible by tasks {cfg.tasks}")
    if cfg.base_classes < 0:
        p.append("base_classes must be >= 0")

    d = cfg.dataset
    if d.kind not in ("synthetic", "cifar100"):
        p.append(f"dataset.kind must be synthetic|cifar100, got {d.kind!r}")
    elif d.kind == "cifar100":
        for name, path in (("train_path", d.train_path), ("test_path", d.test_path)):
            if not path:
                p.append(f"dataset.{name} required for cifar100")
            elif not os.path.exists(path):
                p.append(f"dataset.{name}: file not found: {path}")
        if cfg.base_classes + cfg.continual_classes > 100:
            p.append("base_classes + continual_classes exceeds the 100 CIFAR classes")
    else:
        if d.per_class_train < 1 or d.per_class_test < 1:
            p.append("dataset.per_class_train/test must be >= 1")
        if d.noise_sigma < 0 or d.max_shift < 0:
            p.append("dataset.noise_sigma and max_shift must be >= 0")

    v = cfg.vit
    if v.image_size % v.patch_size != 0:
        p.append(f"vit.image_size {v.image_size} not divisible by patch_size {v.patch_size}")
    if v.dim % v.heads != 0:
        p.append(f"vit.dim {v.dim} not divisible by heads {v.heads}")
    if any(l < 1 or l > v.depth for l in v.prompted_layers):
        p.append(f"vit.prompted_layers {list(v.prompted_layers)} outside [1,{v.depth}]")

    pr = cfg.prompt
    if pr.length % 2 != 0 or pr.length < 2:
        p.append(f"prompt.length must be a positive even number, got {pr.length}")
    if pr.formation not in ("coda", "topk"):
        p.append(f"prompt.formation must be coda|topk, got {pr.formation!r}")
    if pr.query not in ("one_stage", "two_stage"):
        p.append(f"prompt.query must be one_stage|two_stage, got {pr.query!r}")
    if cfg.tasks >= 1 and pr.components % cfg.tasks != 0:
        p.append(f"prompt.components {pr.components} not divisible by tasks {cfg.tasks}")
    if pr.formation == "topk" and not 1 <= pr.topk_n <= pr.components:
        p.append(f"prompt.topk_n {pr.topk_n} outside [1,{pr.components}]")

    q = cfg.qr
    if q.lam < 0:
        p.append(f"qr.lam must be nonnegative, got {q.lam}")
    max_prompted = max(v.prompted_layers) if v.prompted_layers else 0
    if q.ref_layer != "last":
        try:
            ref = int(q.ref_layer)
            if ref <= max_prompted or ref > v.depth:
                p.append(f"qr.ref_layer {ref} must lie in ({max_prompted},{v.depth}]")
        except (TypeError, ValueError):
            p.append(f"qr.ref_layer must be 'last' or an integer, got {q.ref_layer!r}")
    if q.enabled and cfg.prompt.query != "one_stage":
        p.append("qr.enabled requires prompt.query == one_stage")

    o = cfg.optim
    if o.lr <= 0 or o.pretrain_lr <= 0:
        p.append("optim.lr and pretrain_lr must be positive")
    if o.epochs < 0 or o.pretrain_epochs < 0 or o.batch < 1:
        p.append("optim.epochs/pretrain_epochs must be >= 0 and batch >= 1")
    return p


def load_config(path: str) -> ExperimentConfig:
    if not os.path.exists(path):
        raise ConfigError([f"config file not found: {path}"])
    try:
        with open(path, "rb") as fh:
            raw = json.loads(fh.read().decode("utf-8"))
    except (ValueError, UnicodeDecodeError) as exc:
        raise ConfigError([f"{path}: not valid UTF-8 JSON: {exc}"]) from exc
    if not isinstance(raw, dict):
        raise ConfigError([f"{path}: top level must be a JSON object"])
    return parse_config(raw)


def desk_preset() -> ExperimentConfig:
    """Default desk-scale benchmark: synthetic data, 20 continual classes, T=5."""
    return ExperimentConfig()
