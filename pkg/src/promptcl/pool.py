"""Task-partitioned prompt pool with key-based prompt formation.

Each prompted layer owns M (key, component) pairs split into contiguous
per-task ranges. A task's range is initialized when that task is activated
and frozen bit-for-bit once the next task starts; formation only ever sees
the ranges activated so far. Two formation strategies are provided: a
weighted sum of all active components under raw cosine weights (the
default) and hard top-N selection by cosine similarity.

Two query paths feed formation: the one-stage query reads the [CLS] row of
the embedding entering the prompted layer, the two-stage query runs one
extra prompt-free forward pass through the frozen backbone and reuses its
final [CLS] for every layer.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, ContractError
from .vit import ViTModel


def cosine_similarity(a, b) -> float:
    """a.b / (|a||b|) for 1-D vectors; zero vectors are a contract violation."""
    av = np.asarray(a.data if isinstance(a, Tensor) else a, dtype=np.float64).reshape(-1)
    bv = np.asarray(b.data if isinstance(b, Tensor) else b, dtype=np.float64).reshape(-1)
    na, nb = np.linalg.norm(av), np.linalg.norm(bv)
    if na == 0.0 or nb == 0.0:
        raise ContractError("cosine similarity of a zero vector")
    return float(av @ bv / (na * nb))


@dataclass
class Query:
    """Prompt query vector(s) with provenance: a layer index or 'two-stage'."""

    vec: Tensor  # (B, D)
    provenance: int | str

    @property
    def data(self) -> np.ndarray:
        return self.vec.data


def _orthogonalized_rows(rng: np.random.Generator, rows: int, dim: int) -> np.ndarray:
    """Uniform random rows, orthonormalized when rows <= dim, else normalized."""
    a = rng.uniform(-1.0, 1.0, (rows, dim))
    if rows <= dim:
        q, _ = np.linalg.qr(a.T)
        return np.ascontiguousarray(q.T[:rows])
    return a / np.linalg.norm(a, axis=1, keepdims=True)


class _LayerPool:
    def __init__(self):
        self.key_chunks: list[Tensor] = []
        self.comp_chunks: list[Tensor] = []


class PromptPool:
    """Per-layer keys and components partitioned into per-task ranges."""

    def __init__(self, prompted_layers: Sequence[int], components: int, tasks: int,
                 prompt_length: int, dim: int):
        if components % tasks != 0:
            raise ConfigError(f"components {components} not divisible by tasks {tasks}")
        if prompt_length % 2 != 0:
            raise ConfigError(f"prompt_length {prompt_length} must be even")
        self.prompted_layers = tuple(sorted(prompted_layers))
        self.total_components = components
        self.tasks = tasks
        self.chunk = components // tasks
        self.prompt_length = prompt_length
        self.dim = dim
        self.active_tasks = 0
        self.layers = {l: _LayerPool() for l in self.prompted_layers}

    def task_range(self, task: int) -> range:
        return range(task * self.chunk, (task + 1) * self.chunk)

    @property
    def partition(self) -> list[tuple[int, int]]:
        return [(t * self.chunk, (t + 1) * self.chunk) for t in range(self.tasks)]

    def expand_for_task(self, task_index: int, rng: np.random.Generator) -> None:
        """Activate the next task's range: freeze earlier ranges, init the new one.

        Keys and components are orthogonalized uniform draws within the task
        partition. Out-of-order activation is a contract violation.
        """
        if task_index != self.active_tasks:
            raise ContractError(
                f"expand_for_task({task_index}) out of order; {self.active_tasks} tasks completed")
        if task_index >= self.tasks:
            raise ContractError(f"pool holds {self.tasks} tasks")
        for lp in self.layers.values():
            for t in lp.key_chunks + lp.comp_chunks:
                t.requires_grad = False
        for l in self.prompted_layers:
            lp = self.layers[l]
            keys = _orthogonalized_rows(rng, self.chunk, self.dim)
            comps = _orthogonalized_rows(rng, self.chunk, self.prompt_length * self.dim)
            lp.key_chunks.append(Tensor(keys, requires_grad=True))
            lp.comp_chunks.append(Tensor(
                comps.reshape(self.chunk, self.prompt_length, self.dim), requires_grad=True))
        self.active_tasks = task_index + 1

    def _layer(self, layer: int) -> _LayerPool:
        if layer not in self.layers:
            raise ContractError(f"layer {layer} has no prompt pool")
        if self.active_tasks == 0:
            raise ContractError("pool has no activated task ranges")
        return self.layers[layer]

    def keys(self, layer: int) -> Tensor:
        """All activated keys for a layer, (m_active, D); grads reach only the live chunk."""
        lp = self._layer(layer)
        chunks = lp.key_chunks
        return chunks[0] if len(chunks) == 1 else ag.concat(chunks, axis=0)

    def components(self, layer: int) -> Tensor:
        """All activated components for a layer, (m_active, L_p, D)."""
        lp = self._layer(layer)
        chunks = lp.comp_chunks
        return chunks[0] if len(chunks) == 1 else ag.concat(chunks, axis=0)

    def trainable_params(self) -> list[Tensor]:
        out = []
        for l in self.prompted_layers:
            for t in self.layers[l].key_chunks + self.layers[l].comp_chunks:
                if t.requires_grad:
                    out.append(t)
        return out

    def chunk_bytes(self, task: int) -> bytes:
        """Raw bytes of one task's keys+components across layers (freeze checks)."""
        pieces = []
        for l in self.prompted_layers:
            pieces.append(self.layers[l].key_chunks[task].data.tobytes())
            pieces.append(self.layers[l].comp_chunks[task].data.tobytes())
        return b"".join(pieces)

    # -- formation -----------------------------------------------------------

    def form_coda(self, layer: int, query, stop_query_grad: bool = True) -> Tensor:
        """Weighted sum of active components under raw cosine weights, (B, L_p, D).

        Weights are not normalized and may be negative. By default the query
        is treated as a constant for the weights (no gradient back through
        the query path); keys and components always receive gradients.
        """
        q = query.vec if isinstance(query, Query) else query
        if stop_query_grad:
            q = ag.stop_grad(q)
        w = ag.cosine_rows(q, self.keys(layer))
        return ag.weighted_sum(w, self.components(layer))

    def form_topk(self, layer: int, query, n: int) -> Tensor:
        """Concatenate the n most similar components, (B, n*L_p, D).

        Components are ordered by descending cosine similarity with ties
        broken toward the lower component index; selection itself carries no
        gradient, but the chosen components do.
        """
        q = query.vec if isinstance(query, Query) else query
        keys = self.keys(layer)
        if n > keys.data.shape[0]:
            raise ContractError(f"top-{n} requested but only {keys.data.shape[0]} components active")
        with ag.no_grad():
            sims = ag.cosine_rows(ag.stop_grad(q), Tensor(keys.data)).data
        order = np.argsort(-sims, axis=1, kind="stable")[:, :n]
        return ag.gather_components(self.components(layer), order)

    # -- serialization --------------------------------------------------------

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for l in self.prompted_layers:
            lp = self.layers[l]
            for t, (kc, cc) in enumerate(zip(lp.key_chunks, lp.comp_chunks)):
                out[f"pool.layer{l}.task{t}.keys"] = kc.data
                out[f"pool.layer{l}.task{t}.components"] = cc.data
        return out

    def meta(self) -> dict:
        return {
            "prompted_layers": list(self.prompted_layers),
            "components": self.total_components,
            "tasks": self.tasks,
            "prompt_length": self.prompt_length,
            "dim": self.dim,
            "active_tasks": self.active_tasks,
        }

    @staticmethod
    def from_state(meta: dict, tensors: dict[str, np.ndarray]) -> "PromptPool":
        pool = PromptPool(tuple(meta["prompted_layers"]), meta["components"], meta["tasks"],
                          meta["prompt_length"], meta["dim"])
        active = meta["active_tasks"]
        for l in pool.prompted_layers:
            lp = pool.layers[l]
            for t in range(active):
                live = t == active - 1
                lp.key_chunks.append(Tensor(tensors[f"pool.layer{l}.task{t}.keys"].copy(),
                                            requires_grad=live))
                lp.comp_chunks.append(Tensor(tensors[f"pool.layer{l}.task{t}.components"].copy(),
                                             requires_grad=live))
        pool.active_tasks = active
        return pool


def split_prompt(phi: Tensor, unit_length: int) -> tuple[Tensor, Tensor]:
    """Split a prompt into its key and value halves.

    phi (B, R, D) is treated as stacked units of ``unit_length`` rows (one
    unit for weighted-sum formation, n units for top-n); the first half of
    each unit goes to keys, the second to values, preserving unit order.
    """
    rows = phi.data.shape[1]
    if rows % unit_length != 0 or unit_length % 2 != 0:
        raise ContractError(f"prompt rows {rows} not stacked units of even length {unit_length}")
    half = unit_length // 2
    units = rows // unit_length
    if units == 1:
        return ag.narrow(phi, 1, 0, half), ag.narrow(phi, 1, half, unit_length)
    k_parts, v_parts = [], []
    for u in range(units):
        base = u * unit_length
        k_parts.append(ag.narrow(phi, 1, base, base + half))
        v_parts.append(ag.narrow(phi, 1, base + half, base + unit_length))
    return ag.concat(k_parts, axis=1), ag.concat(v_parts, axis=1)


def query_one_stage(layer_embeddings: Sequence[Tensor], layer: int,
                    prompted_layers: Sequence[int]) -> Query:
    """[CLS] row of the embedding entering ``layer`` (1-based).

    ``layer_embeddings[l-1]`` must be the input to layer l, as recorded by
    the backbone forward; for layer 1 this is the patch-embed output.
    """
    if layer not in prompted_layers:
        raise ContractError(f"layer {layer} is not a prompted layer")
    x = layer_embeddings[layer - 1]
    vec = ag.reshape(ag.narrow(x, 1, 0, 1), (x.data.shape[0], x.data.shape[2]))
    return Query(vec=vec, provenance=layer)


def query_two_stage(images: np.ndarray, frozen_model: ViTModel) -> Query:
    """Final [CLS] of one prompt-free pass; reused for every prompted layer."""
    if not frozen_model.frozen:
        raise ContractError("two-stage query requires a frozen model")
    return Query(vec=Tensor(frozen_model.forward_plain_cls(images, "last")),
                 provenance="two-stage")
