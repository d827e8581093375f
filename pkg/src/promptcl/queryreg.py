"""Query-pool regularization: align shallow-query and deep-reference key profiles.

For each prompted layer the similarity profile of the layer's query against
the pool keys is pulled toward the profile of a reference query taken from
a deep layer of the frozen backbone. Both profiles default to softmaxed
row-wise cosines; the cosine and softmax stages can each be toggled off for
ablations, and both sides always use the same toggles. The penalty only
exists at training time — evaluation never builds reference queries.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, ContractError
from .pool import Query
from .vit import ViTModel


@dataclass(frozen=True)
class QRConfig:
    lam: float = 1e-4
    use_cosine: bool = True
    use_softmax: bool = True
    ref_layer: int | str = "last"

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigError(f"lambda must be nonnegative, got {self.lam}")
        if self.ref_layer != "last" and int(self.ref_layer) < 1:
            raise ConfigError(f"invalid ref_layer {self.ref_layer}")


def reference_query(images: np.ndarray, reference_model: ViTModel,
                    ref_layer: int | str = "last") -> Tensor:
    """Prompt-free [CLS] at ref_layer; constant w.r.t. the training graph."""
    return Tensor(reference_model.forward_plain_cls(images, ref_layer))


def _profile(vec: Tensor, keys: Tensor, config: QRConfig) -> Tensor:
    if config.use_cosine:
        sims = ag.cosine_rows(vec, keys)
    else:
        sims = ag.matmul(vec, ag.transpose_last2(keys))
    return ag.softmax(sims, axis=-1) if config.use_softmax else sims


def similarity_profiles(query, ref, keys: Tensor, config: QRConfig) -> tuple[Tensor, Tensor]:
    """Per-key profiles of the layer query and the reference query, (B,M) each.

    Gradients flow into the keys from both profiles and into the query; the
    reference vector is already detached from the frozen reference network.
    """
    q = query.vec if isinstance(query, Query) else query
    r = ref if isinstance(ref, Tensor) else Tensor(np.asarray(ref, dtype=np.float64))
    if q.data.shape[-1] != keys.data.shape[-1] or r.data.shape[-1] != keys.data.shape[-1]:
        raise ContractError(
            f"query/reference width must match keys: {q.data.shape} / {r.data.shape} vs {keys.data.shape}")
    return _profile(q, keys, config), _profile(r, keys, config)


def qr_loss(profiles: Iterable[tuple[Tensor, Tensor]]) -> Tensor:
    """Sum over layers of the squared distance between the two profiles."""
    total = None
    for a_query, a_ref in profiles:
        term = ag.sum_sq_diff(a_query, a_ref)
        total = term if total is None else ag.add(total, term)
    if total is None:
        raise ContractError("qr_loss needs at least one layer profile")
    return total


def total_loss(ce: Tensor, qr: Tensor, lam: float) -> Tensor:
    """ce + lam * qr."""
    if lam < 0:
        raise ContractError(f"lambda must be nonnegative, got {lam}")
    return ag.add(ce, ag.scale(qr, lam))
