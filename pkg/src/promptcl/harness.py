"""Class-incremental continual learning driver.

Splits classes into tasks, pretrains and freezes the backbone on a disjoint
base split, then trains one task at a time. Prompt runs train only the
active prompt partition plus the classifier; training masks logits to the
current task's classes while evaluation classifies over every class seen so
far with no task label. Baselines: naive sequential fine-tuning of the
whole network ("ft") and a joint-training upper bound ("ub", for which
forgetting is undefined and reported as absent).

Every random draw comes from the experiment seed's named substreams, and
accuracies are aggregated as integer correct-counts, so identical
config+seed gives bit-identical results. The stream logs which sample ids
each training task touched; nothing outside the current task is ever read
by training (the no-rehearsal contract).
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tape, Tensor
from .config import ExperimentConfig
from .checkpoint import load_checkpoint, save_checkpoint
from .datasets import LabeledImageSet, subset_classes, synth_generate, cifar100_load
from .errors import CheckpointError, ConfigError, ContractError
from .pool import PromptPool, Query, query_two_stage, split_prompt
from .queryreg import QRConfig, qr_loss, reference_query, similarity_profiles, total_loss
from .seeding import substream
from .vit import ViTConfig, ViTModel


# ---------------------------------------------------------------------------
# task stream
# ---------------------------------------------------------------------------


@dataclass
class TaskData:
    class_ids: tuple[int, ...]      # original dataset class ids, permuted order
    train: LabeledImageSet          # labels are dense global indices
    test: LabeledImageSet
    train_ids: np.ndarray           # global sample ids within the continual pool


class TaskStream:
    """Per-task train/test splits with a training-access log.

    Training code may only touch one task's train split at a time; every
    such read is logged with the global sample ids it returned. Test splits
    and analysis reads are not rehearsal and bypass the log.
    """

    def __init__(self, tasks: list[TaskData], classes_per_task: int):
        self.tasks = tasks
        self.classes_per_task = classes_per_task
        self.access_log: list[tuple[int, tuple[int, ...]]] = []

    @property
    def num_tasks(self) -> int:
        return len(self.tasks)

    def train_size(self, t: int) -> int:
        return len(self.tasks[t].train)

    def train_batch(self, t: int, indices: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        task = self.tasks[t]
        self.access_log.append((t, tuple(int(i) for i in task.train_ids[indices])))
        return task.train.images[indices], task.train.labels[indices]

    def test_set(self, t: int) -> LabeledImageSet:
        return self.tasks[t].test

    def analysis_train_images(self, t: int) -> np.ndarray:
        return self.tasks[t].train.images

    def joint_train_set(self) -> LabeledImageSet:
        images = np.concatenate([task.train.images for task in self.tasks])
        labels = np.concatenate([task.train.labels for task in self.tasks])
        return LabeledImageSet(images=images, labels=labels)


def split_tasks(train_set: LabeledImageSet, test_set: LabeledImageSet, tasks: int,
                permutation_seed: int) -> TaskStream:
    """Permute class ids by seed and chunk them into equal task groups."""
    classes = sorted(int(c) for c in train_set.class_ids)
    if len(classes) % tasks != 0:
        raise ConfigError([f"{len(classes)} classes not divisible into {tasks} tasks"])
    perm = [classes[i] for i in substream(permutation_seed, "class_perm").permutation(len(classes))]
    per_task = len(classes) // tasks

    train_global = subset_classes(train_set, perm, relabel=True)
    test_global = subset_classes(test_set, perm, relabel=True)
    out = []
    for t in range(tasks):
        lo, hi = t * per_task, (t + 1) * per_task
        keep_tr = (train_global.labels >= lo) & (train_global.labels < hi)
        keep_te = (test_global.labels >= lo) & (test_global.labels < hi)
        out.append(TaskData(
            class_ids=tuple(perm[lo:hi]),
            train=LabeledImageSet(images=train_global.images[keep_tr],
                                  labels=train_global.labels[keep_tr]),
            test=LabeledImageSet(images=test_global.images[keep_te],
                                 labels=test_global.labels[keep_te]),
            train_ids=np.nonzero(keep_tr)[0],
        ))
    return TaskStream(out, per_task)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


class AccuracyMatrix:
    """Lower-triangular record: rows[t][j] = accuracy on task j after task t."""

    def __init__(self, rows: list[list[float]] | None = None):
        self.rows: list[list[float]] = [list(r) for r in rows] if rows else []
        for i, row in enumerate(self.rows):
            if len(row) != i + 1:
                raise ContractError(f"row {i + 1} must have {i + 1} entries, got {len(row)}")

    def add_row(self, row: list[float]) -> None:
        if len(row) != len(self.rows) + 1:
            raise ContractError(f"expected row of length {len(self.rows) + 1}, got {len(row)}")
        self.rows.append(list(row))

    def entry(self, after_task: int, eval_task: int) -> float:
        return self.rows[after_task - 1][eval_task - 1]

    def require_complete(self, n: int) -> None:
        if len(self.rows) < n:
            raise ContractError(f"matrix has {len(self.rows)} rows, needs {n}")


def metric_an(matrix: AccuracyMatrix, n: int) -> float:
    """Mean accuracy over all tasks seen so far, measured after task n."""
    matrix.require_complete(n)
    row = matrix.rows[n - 1]
    return float(sum(row) / len(row))


def metric_fn(matrix: AccuracyMatrix, n: int) -> float:
    """Mean drop from each task's best historical accuracy to its final one.

    Per-task drops are clamped at zero; fractions in [0,1] (multiply by 100
    for percentage points).
    """
    matrix.require_complete(n)
    if n == 1:
        return 0.0
    drops = []
    for j in range(1, n):
        best = max(matrix.rows[t - 1][j - 1] for t in range(j, n))
        drops.append(max(0.0, best - matrix.rows[n - 1][j - 1]))
    return float(sum(drops) / len(drops))


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


class Adam:
    def __init__(self, params: list[Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def step(self, lr: float | None = None) -> None:
        self.t += 1
        lr = self.lr if lr is None else lr
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m[:] = self.b1 * m + (1 - self.b1) * g
            v[:] = self.b2 * v + (1 - self.b2) * (g * g)
            mhat = m / (1 - self.b1 ** self.t)
            vhat = v / (1 - self.b2 ** self.t)
            p.data -= lr * mhat / (np.sqrt(vhat) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def cosine_lr(base: float, step: int, total: int) -> float:
    if total <= 1:
        return base
    return base * 0.5 * (1.0 + math.cos(math.pi * step / (total - 1)))


# ---------------------------------------------------------------------------
# pretraining
# ---------------------------------------------------------------------------


def pretrain_backbone(model: ViTModel, base_set: LabeledImageSet, epochs: int, lr: float,
                      batch: int, order_rng: np.random.Generator,
                      forbidden_class_ids=None) -> ViTModel:
    """Supervised training on the base split, then freeze.

    The returned frozen model doubles as backbone, query network, and
    reference network. Zero epochs leaves a random frozen backbone. Base
    classes overlapping the continual classes are a configuration error.
    """
    if forbidden_class_ids is not None:
        overlap = set(int(c) for c in base_set.class_ids) & set(int(c) for c in forbidden_class_ids)
        if overlap:
            raise ConfigError([f"base classes overlap continual classes: {sorted(overlap)}"])
    n = len(base_set)
    if epochs > 0 and n > 0:
        opt = Adam(model.all_params(), lr)
        steps_total = epochs * max(1, (n + batch - 1) // batch)
        step = 0
        for _ in range(epochs):
            order = order_rng.permutation(n)
            for lo in range(0, n, batch):
                idx = order[lo:lo + batch]
                with Tape() as tape:
                    rec = model.forward(base_set.images[idx])
                    loss = ag.cross_entropy(rec.logits, base_set.labels[idx])
                    tape.backward(loss)
                opt.step(cosine_lr(lr, step, steps_total))
                opt.zero_grad()
                step += 1
    model.freeze()
    return model


# ---------------------------------------------------------------------------
# continual trainer
# ---------------------------------------------------------------------------


@dataclass
class RunSnapshot:
    """Frozen copy of the full predictor after some task, for drift analysis."""

    vit_config: ViTConfig
    model: ViTModel
    pool: PromptPool | None
    query: str = "one_stage"
    formation: str = "coda"
    topk_n: int = 5
    prompt_length: int = 8
    task_index: int = 0

    def layer_cls_embeddings(self, images: np.ndarray, batch: int = 64) -> list[np.ndarray]:
        """Per-layer [CLS] embeddings (depth+1 arrays of shape (N,D))."""
        chunks: list[list[np.ndarray]] = []
        with ag.no_grad():
            for lo in range(0, len(images), batch):
                rec = _predict_forward(self.model, self.pool, self.query, self.formation,
                                       self.topk_n, self.prompt_length, images[lo:lo + batch])
                per_layer = [e.data[:, 0, :].copy() for e in rec.embeddings]
                chunks.append(per_layer)
        return [np.concatenate([c[i] for c in chunks]) for i in range(len(chunks[0]))]


def _cls_rows(x: Tensor) -> Tensor:
    return ag.reshape(ag.narrow(x, 1, 0, 1), (x.data.shape[0], x.data.shape[2]))


def _predict_forward(model: ViTModel, pool: PromptPool | None, query: str, formation: str,
                     topk_n: int, prompt_length: int, images: np.ndarray,
                     queries_out: dict | None = None, query_gradient: bool = False):
    """One forward pass with the run's prompt wiring (or plain when pool is None)."""
    if pool is None:
        return model.forward(images)
    two_stage_q = query_two_stage(images, model) if query == "two_stage" else None

    def provider(layer: int, x: Tensor):
        if two_stage_q is not None:
            q = two_stage_q
        else:
            q = Query(vec=_cls_rows(x), provenance=layer)
        if queries_out is not None:
            queries_out[layer] = q
        if formation == "topk":
            phi = pool.form_topk(layer, q, topk_n)
        else:
            phi = pool.form_coda(layer, q, stop_query_grad=not query_gradient)
        return split_prompt(phi, prompt_length)

    return model.forward(images, provider)


class ContinualTrainer:
    """One continual run: owns the model, pool, optimizer streams, and logs."""

    def __init__(self, cfg: ExperimentConfig, backbone: ViTModel, stream: TaskStream):
        if cfg.method not in ("prompt", "ft"):
            raise ContractError(f"ContinualTrainer handles prompt|ft, got {cfg.method}")
        self.cfg = cfg
        self.stream = stream
        self.completed = 0
        self.matrix = AccuracyMatrix()
        self.snapshots: list[RunSnapshot] = []
        head_rng = substream(cfg.seed, "head")
        if cfg.method == "prompt":
            self.model = backbone.with_new_head(cfg.continual_classes, head_rng)
            self.pool = PromptPool(cfg.vit.prompted_layers, cfg.prompt.components,
                                   cfg.tasks, cfg.prompt.length, cfg.vit.dim)
        else:
            self.model = backbone.clone(unfreeze=True).with_new_head(cfg.continual_classes, head_rng)
            self.pool = None
        # zero-started bias-free head: per-task row scales stay comparable when
        # each task trains its rows in isolation
        self.model.params["head.weight"].data[:] = 0.0
        self.model.params["head.bias"].data[:] = 0.0
        self.model.params["head.bias"].requires_grad = False
        self.pool_rng = substream(cfg.seed, "pool")
        self.order_rng = substream(cfg.seed, "order")
        self.qr_cfg = QRConfig(lam=cfg.qr.lam, use_cosine=cfg.qr.use_cosine,
                               use_softmax=cfg.qr.use_softmax, ref_layer=cfg.qr.ref_layer)

    def _forward(self, images, queries_out=None):
        return _predict_forward(self.model, self.pool, self.cfg.prompt.query,
                                self.cfg.prompt.formation, self.cfg.prompt.topk_n,
                                self.cfg.prompt.length, images, queries_out,
                                self.cfg.prompt.query_gradient)

    def train_task(self, t: int) -> None:
        """Minimize the (masked) classification loss over task t's data only."""
        if t != self.completed:
            raise ContractError(f"train_task({t}) out of order; {self.completed} tasks done")
        cfg = self.cfg
        if self.pool is not None:
            self.pool.expand_for_task(t, self.pool_rng)
            params = self.pool.trainable_params() + self.model.head_params()
        else:
            params = self.model.all_params()
        k = self.stream.classes_per_task
        if self.pool is not None:
            mask = np.zeros(cfg.continual_classes, dtype=bool)
            mask[t * k:(t + 1) * k] = True
        else:
            # naive sequential fine-tuning trains the full logit space on the
            # current task's data, which is what makes it forget
            mask = None

        n = self.stream.train_size(t)
        batch = cfg.optim.batch
        opt = Adam(params, cfg.optim.lr)
        steps_total = cfg.optim.epochs * max(1, (n + batch - 1) // batch)
        step = 0
        use_qr = cfg.qr.enabled and self.pool is not None
        for _ in range(cfg.optim.epochs):
            order = self.order_rng.permutation(n)
            for lo in range(0, n, batch):
                idx = order[lo:lo + batch]
                images, labels = self.stream.train_batch(t, idx)
                with Tape() as tape:
                    queries: dict[int, Query] = {}
                    rec = self._forward(images, queries_out=queries if use_qr else None)
                    ce = ag.cross_entropy(rec.logits, labels, mask)
                    if use_qr:
                        ref = reference_query(images, self.model, cfg.qr.ref_layer)
                        profiles = [similarity_profiles(queries[l], ref, self.pool.keys(l), self.qr_cfg)
                                    for l in self.pool.prompted_layers]
                        penalty = ag.scale(qr_loss(profiles), 1.0 / len(labels))
                        loss = total_loss(ce, penalty, cfg.qr.lam)
                    else:
                        loss = ce
                    tape.backward(loss)
                opt.step(cosine_lr(cfg.optim.lr, step, steps_total))
                opt.zero_grad()
                step += 1
        self.completed = t + 1
        self.snapshots.append(self.snapshot())

    def snapshot(self) -> RunSnapshot:
        pool_copy = None
        if self.pool is not None:
            pool_copy = PromptPool.from_state(self.pool.meta(),
                                              {k: v.copy() for k, v in self.pool.state_tensors().items()})
        return RunSnapshot(vit_config=self.model.config, model=self.model.clone(),
                           pool=pool_copy, query=self.cfg.prompt.query,
                           formation=self.cfg.prompt.formation, topk_n=self.cfg.prompt.topk_n,
                           prompt_length=self.cfg.prompt.length, task_index=self.completed)

    def evaluate_row(self, t: int) -> list[float]:
        """Accuracy on each task seen so far, classifying over all seen classes."""
        if self.completed < t + 1:
            raise ContractError(f"evaluate_row({t}) before training task {t}")
        seen = (t + 1) * self.stream.classes_per_task
        row = []
        batch = self.cfg.optim.batch
        with ag.no_grad():
            for j in range(t + 1):
                test = self.stream.test_set(j)
                correct = 0
                for lo in range(0, len(test), batch):
                    images = test.images[lo:lo + batch]
                    labels = test.labels[lo:lo + batch]
                    rec = self._forward(images)
                    pred = rec.logits.data[:, :seen].argmax(axis=1)
                    correct += int((pred == labels).sum())
                row.append(correct / len(test))
        self.matrix.add_row(row)
        return row


# ---------------------------------------------------------------------------
# drift analysis
# ---------------------------------------------------------------------------


def drift_analysis(snap_a: RunSnapshot, snap_b: RunSnapshot, images: np.ndarray,
                   batch: int = 64) -> list[dict]:
    """Per-layer mean of 1 - cos(x_l[CLS]) between two snapshots on the same images.

    Layer 1 is the patch-embed output; layer depth+1 the final embedding.
    Values lie in [0,2]; bit-identical embeddings give an exact zero.
    """
    if snap_a.vit_config != snap_b.vit_config:
        raise ContractError("drift snapshots have different architectures")
    ea = snap_a.layer_cls_embeddings(images, batch)
    eb = snap_b.layer_cls_embeddings(images, batch)
    pair = f"{snap_a.task_index}-{snap_b.task_index}"
    out = []
    for layer, (a, b) in enumerate(zip(ea, eb), start=1):
        if np.array_equal(a, b):
            dist = 0.0
        else:
            num = (a * b).sum(axis=1)
            den = np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1)
            dist = float(np.mean(1.0 - num / den))
            dist = min(2.0, max(0.0, dist))
        out.append({"layer": layer, "task_pair": pair, "distance": dist})
    return out


# ---------------------------------------------------------------------------
# full runs
# ---------------------------------------------------------------------------


@dataclass
class RunResult:
    a_n: float
    f_n: float | None
    accuracy_rows: list[list[float]]
    seed: int
    method: str
    config_snapshot: dict = field(default_factory=dict)
    drift: list[dict] = field(default_factory=list)
    wall_clock_s: float = 0.0

    def result_json(self) -> str:
        """Deterministic JSON; volatile fields (wall clock) live elsewhere."""
        body = {
            "a_n": self.a_n,
            "f_n": self.f_n,
            "accuracy_matrix": self.accuracy_rows,
            "seed": self.seed,
            "method": self.method,
            "config": self.config_snapshot,
            "drift": self.drift,
        }
        return json.dumps(body, indent=2, sort_keys=True)


def build_datasets(cfg: ExperimentConfig) -> tuple[LabeledImageSet, LabeledImageSet,
                                                   LabeledImageSet, LabeledImageSet]:
    """(base_train, base_test, continual_train, continual_test); base labels dense."""
    total = cfg.base_classes + cfg.continual_classes
    d = cfg.dataset
    if d.kind == "synthetic":
        train = synth_generate(total, d.per_class_train, cfg.vit.image_size, cfg.seed,
                               "train", d.noise_sigma, d.max_shift)
        test = synth_generate(total, d.per_class_test, cfg.vit.image_size, cfg.seed,
                              "test", d.noise_sigma, d.max_shift)
    else:
        train = cifar100_load(d.train_path, "train")
        test = cifar100_load(d.test_path, "test")
    base_ids = list(range(cfg.base_classes))
    cont_ids = list(range(cfg.base_classes, total))
    base_train = subset_classes(train, base_ids, relabel=True) if base_ids else \
        LabeledImageSet(images=np.zeros((0,) + train.images.shape[1:]), labels=np.zeros(0, dtype=np.int64))
    base_test = subset_classes(test, base_ids, relabel=True) if base_ids else base_train
    return (base_train, base_test,
            subset_classes(train, cont_ids), subset_classes(test, cont_ids))


def prepare_backbone(cfg: ExperimentConfig, base_train: LabeledImageSet,
                     continual_class_ids) -> ViTModel:
    """Load a frozen backbone from a checkpoint or pretrain one on the base split."""
    vit_cfg = ViTConfig(image_size=cfg.vit.image_size, patch_size=cfg.vit.patch_size,
                        depth=cfg.vit.depth, dim=cfg.vit.dim, heads=cfg.vit.heads,
                        mlp_ratio=cfg.vit.mlp_ratio, num_classes=max(1, cfg.base_classes),
                        prompted_layers=cfg.vit.prompted_layers,
                        prompt_length=cfg.prompt.length)
    if cfg.backbone_checkpoint:
        tensors, meta = load_checkpoint(cfg.backbone_checkpoint)
        saved_cfg = ViTConfig.from_dict(meta["vit_config"])
        if saved_cfg != vit_cfg:
            raise CheckpointError("backbone checkpoint architecture does not match config")
        return ViTModel.from_state(vit_cfg, tensors, frozen=True)
    rng = substream(cfg.seed, "init")
    model = ViTModel(vit_cfg, rng)
    return pretrain_backbone(model, base_train, cfg.optim.pretrain_epochs,
                             cfg.optim.pretrain_lr, cfg.optim.batch,
                             substream(cfg.seed, "order"), continual_class_ids)


def _evaluate_joint(model: ViTModel, pool, cfg: ExperimentConfig, stream: TaskStream) -> list[float]:
    row = []
    with ag.no_grad():
        for j in range(stream.num_tasks):
            test = stream.test_set(j)
            correct = 0
            for lo in range(0, len(test), cfg.optim.batch):
                rec = _predict_forward(model, pool, cfg.prompt.query, cfg.prompt.formation,
                                       cfg.prompt.topk_n, cfg.prompt.length,
                                       test.images[lo:lo + cfg.optim.batch])
                pred = rec.logits.data.argmax(axis=1)
                correct += int((pred == test.labels[lo:lo + cfg.optim.batch]).sum())
            row.append(correct / len(test))
    return row


def run_upper_bound(cfg: ExperimentConfig, backbone: ViTModel, stream: TaskStream) -> RunResult:
    """Joint supervised training on all continual data; forgetting is undefined."""
    start = time.perf_counter()
    model = backbone.clone(unfreeze=True).with_new_head(cfg.continual_classes,
                                                        substream(cfg.seed, "head"))
    joint = stream.joint_train_set()
    order_rng = substream(cfg.seed, "order")
    n = len(joint)
    opt = Adam(model.all_params(), cfg.optim.lr)
    steps_total = cfg.optim.epochs * max(1, (n + cfg.optim.batch - 1) // cfg.optim.batch)
    step = 0
    for _ in range(cfg.optim.epochs):
        order = order_rng.permutation(n)
        for lo in range(0, n, cfg.optim.batch):
            idx = order[lo:lo + cfg.optim.batch]
            with Tape() as tape:
                rec = model.forward(joint.images[idx])
                tape.backward(ag.cross_entropy(rec.logits, joint.labels[idx]))
            opt.step(cosine_lr(cfg.optim.lr, step, steps_total))
            opt.zero_grad()
            step += 1
    row = _evaluate_joint(model, None, cfg, stream)
    return RunResult(a_n=float(sum(row) / len(row)), f_n=None, accuracy_rows=[row],
                     seed=cfg.seed, method="ub", config_snapshot=cfg.to_dict(),
                     wall_clock_s=time.perf_counter() - start)


def run_experiment(cfg: ExperimentConfig, out_dir: str | None = None,
                   keep_trainer: list | None = None) -> RunResult:
    """End-to-end run: data, backbone, per-task training, metrics, drift.

    With ``out_dir`` set, writes the backbone and per-task checkpoints there.
    ``keep_trainer`` (a list) receives the live trainer for inspection.
    """
    start = time.perf_counter()
    base_train, _, cont_train, cont_test = build_datasets(cfg)
    backbone = prepare_backbone(cfg, base_train, cont_train.class_ids)
    stream = split_tasks(cont_train, cont_test, cfg.tasks, cfg.seed)
    if out_dir:
        save_checkpoint(f"{out_dir}/checkpoints/backbone", backbone.state_tensors(),
                        {"vit_config": backbone.config.to_dict(), "frozen": True})
    if cfg.method == "ub":
        return run_upper_bound(cfg, backbone, stream)

    trainer = ContinualTrainer(cfg, backbone, stream)
    if keep_trainer is not None:
        keep_trainer.append(trainer)
    for t in range(cfg.tasks):
        trainer.train_task(t)
        trainer.evaluate_row(t)
        if out_dir:
            save_run_snapshot(f"{out_dir}/checkpoints/task_{t + 1:02d}", trainer.snapshots[-1], cfg)
    drift = []
    if cfg.tasks >= 2:
        drift = drift_analysis(trainer.snapshots[0], trainer.snapshots[-1],
                               stream.analysis_train_images(0), cfg.optim.batch)
    return RunResult(a_n=metric_an(trainer.matrix, cfg.tasks),
                     f_n=metric_fn(trainer.matrix, cfg.tasks),
                     accuracy_rows=trainer.matrix.rows, seed=cfg.seed, method=cfg.method,
                     config_snapshot=cfg.to_dict(), drift=drift,
                     wall_clock_s=time.perf_counter() - start)


# ---------------------------------------------------------------------------
# snapshot persistence (shared checkpoint format)
# ---------------------------------------------------------------------------


def save_run_snapshot(dirpath: str, snap: RunSnapshot, cfg: ExperimentConfig) -> None:
    tensors = dict(snap.model.state_tensors())
    meta = {
        "vit_config": snap.vit_config.to_dict(),
        "frozen": snap.model.frozen,
        "method": cfg.method,
        "query": snap.query,
        "formation": snap.formation,
        "topk_n": snap.topk_n,
        "prompt_length": snap.prompt_length,
        "task_index": snap.task_index,
        "pool_meta": snap.pool.meta() if snap.pool is not None else None,
        "experiment": cfg.to_dict(),
    }
    if snap.pool is not None:
        tensors.update(snap.pool.state_tensors())
    save_checkpoint(dirpath, tensors, meta)


def load_run_snapshot(dirpath: str) -> RunSnapshot:
    tensors, meta = load_checkpoint(dirpath)
    vit_cfg = ViTConfig.from_dict(meta["vit_config"])
    model_tensors = {k: v for k, v in tensors.items() if not k.startswith("pool.")}
    model = ViTModel.from_state(vit_cfg, model_tensors, frozen=meta["frozen"])
    pool = None
    if meta.get("pool_meta"):
        pool = PromptPool.from_state(meta["pool_meta"],
                                     {k: v for k, v in tensors.items() if k.startswith("pool.")})
    return RunSnapshot(vit_config=vit_cfg, model=model, pool=pool, query=meta["query"],
                       formation=meta["formation"], topk_n=meta["topk_n"],
                       prompt_length=meta["prompt_length"], task_index=meta["task_index"])
