"""Small Vision Transformer with optional per-layer key/value prefix prompts.

The same frozen backbone serves three roles: the prompted classification
network, the prompt-query network (full plain forward), and the reference
network for query regularization (plain forward up to a chosen depth). The
forward pass records the input token embedding of every layer so shallow
queries and layer-drift analysis can read them without extra passes.

Blocks are pre-norm: x + MHSA(LN(x)) followed by x + MLP(LN(x)). Prefix
prompts are concatenated in front of the attention key/value inputs before
their projections and emit no output tokens, so the output always has as
many rows as the input.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, ContractError, DimensionError


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 32
    patch_size: int = 4
    depth: int = 6
    dim: int = 64
    heads: int = 4
    mlp_ratio: int = 4
    num_classes: int = 10
    prompted_layers: tuple[int, ...] = (1, 2, 3, 4, 5)
    prompt_length: int = 8
    channels: int = 3

    def __post_init__(self):
        problems = []
        if self.image_size % self.patch_size != 0:
            problems.append(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.dim % self.heads != 0:
            problems.append(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.prompt_length % 2 != 0:
            problems.append(f"prompt_length {self.prompt_length} must be even (prefix halves)")
        if any(l < 1 or l > self.depth for l in self.prompted_layers):
            problems.append(f"prompted_layers {self.prompted_layers} outside [1,{self.depth}]")
        if problems:
            raise ConfigError(problems)

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def n_tokens(self) -> int:
        return self.n_patches + 1

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size ** 2

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    def to_dict(self) -> dict:
        return {
            "image_size": self.image_size, "patch_size": self.patch_size,
            "depth": self.depth, "dim": self.dim, "heads": self.heads,
            "mlp_ratio": self.mlp_ratio, "num_classes": self.num_classes,
            "prompted_layers": list(self.prompted_layers),
            "prompt_length": self.prompt_length, "channels": self.channels,
        }

    @staticmethod
    def from_dict(d: dict) -> "ViTConfig":
        d = dict(d)
        d["prompted_layers"] = tuple(d["prompted_layers"])
        return ViTConfig(**d)


@dataclass
class ForwardRecord:
    """Outputs of one backbone pass: logits plus every layer's input embedding.

    ``embeddings[l-1]`` is the token embedding entering layer l (so index 0
    is the patch-embed output) and ``embeddings[depth]`` is the final output.
    """

    logits: Tensor
    embeddings: list[Tensor] = field(default_factory=list)


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(B,C,H,W) -> (B, n_patches, C*patch*patch), raster order, row-major per patch."""
    b, c, h, w = images.shape
    gh, gw = h // patch, w // patch
    x = images.reshape(b, c, gh, patch, gw, patch)
    return np.ascontiguousarray(x.transpose(0, 2, 4, 1, 3, 5)).reshape(b, gh * gw, c * patch * patch)


def prefix_mhsa(x: Tensor, phi_k: Tensor | None, phi_v: Tensor | None,
                w_q: Tensor, w_k: Tensor, w_v: Tensor, w_o: Tensor, heads: int) -> Tensor:
    """Multi-head self-attention with optional key/value prefix tokens.

    x: (n,D) or (B,n,D). phi_k/phi_v must both be given or both absent and,
    when given, have matching row counts and width D; they are prepended to
    the key/value inputs before projection. Queries come from x only, so the
    output has exactly as many tokens as x.
    """
    if (phi_k is None) != (phi_v is None):
        raise ContractError("phi_k and phi_v must both be present or both absent")
    squeeze = x.data.ndim == 2
    if squeeze:
        x = ag.reshape(x, (1,) + x.data.shape)
        if phi_k is not None and phi_k.data.ndim == 2:
            phi_k = ag.reshape(phi_k, (1,) + phi_k.data.shape)
            phi_v = ag.reshape(phi_v, (1,) + phi_v.data.shape)
    dim = x.data.shape[-1]
    if phi_k is not None:
        if phi_k.data.shape != phi_v.data.shape:
            raise ContractError(
                f"prefix halves disagree: {phi_k.data.shape} vs {phi_v.data.shape}")
        if phi_k.data.shape[-1] != dim:
            raise DimensionError(f"prefix width {phi_k.data.shape[-1]} != model dim {dim}")
        k_in = ag.concat([phi_k, x], axis=1)
        v_in = ag.concat([phi_v, x], axis=1)
    else:
        k_in = x
        v_in = x

    q = ag.matmul(x, w_q)
    k = ag.matmul(k_in, w_k)
    v = ag.matmul(v_in, w_v)
    out = ag.matmul(ag.mhsa_core(q, k, v, heads), w_o)
    return ag.reshape(out, out.data.shape[1:]) if squeeze else out


class ViTModel:
    """Backbone parameters plus a classifier head.

    Backbone tensors (everything except the classifier) can be frozen as a
    unit; ``backbone_checksum`` hashes their bytes so freezing is testable
    bit-for-bit.
    """

    HEAD_NAMES = ("head.weight", "head.bias")

    def __init__(self, config: ViTConfig, rng: np.random.Generator | None = None,
                 head_rng: np.random.Generator | None = None):
        self.config = config
        self.frozen = False
        self.params: dict[str, Tensor] = {}
        if rng is not None:
            self._init_backbone(rng)
            self._init_head(head_rng if head_rng is not None else rng)

    # -- construction -------------------------------------------------------

    def _param(self, name: str, data: np.ndarray) -> None:
        self.params[name] = Tensor(data, requires_grad=True)

    def _init_backbone(self, rng: np.random.Generator) -> None:
        c = self.config
        std = 0.02
        self._param("patch_embed.weight", rng.normal(0.0, std, (c.patch_dim, c.dim)))
        self._param("patch_embed.bias", np.zeros(c.dim))
        self._param("cls_token", rng.normal(0.0, std, (1, c.dim)))
        self._param("pos_embed", rng.normal(0.0, std, (c.n_tokens, c.dim)))
        for l in range(1, c.depth + 1):
            p = f"blocks.{l}."
            self._param(p + "ln1.gain", np.ones(c.dim))
            self._param(p + "ln1.bias", np.zeros(c.dim))
            for w in ("w_q", "w_k", "w_v"):
                self._param(p + w, rng.normal(0.0, std, (c.dim, c.dim)))
            # residual-branch outputs start at zero: the net begins as a
            # near-identity map, which avoids the early plateau that random
            # from-scratch ViT training otherwise hits at this scale
            self._param(p + "w_o", np.zeros((c.dim, c.dim)))
            self._param(p + "ln2.gain", np.ones(c.dim))
            self._param(p + "ln2.bias", np.zeros(c.dim))
            hidden = c.mlp_ratio * c.dim
            self._param(p + "fc1.weight", rng.normal(0.0, std, (c.dim, hidden)))
            self._param(p + "fc1.bias", np.zeros(hidden))
            self._param(p + "fc2.weight", np.zeros((hidden, c.dim)))
            self._param(p + "fc2.bias", np.zeros(c.dim))
        self._param("head_norm.gain", np.ones(c.dim))
        self._param("head_norm.bias", np.zeros(c.dim))

    def _init_head(self, rng: np.random.Generator) -> None:
        c = self.config
        self._param("head.weight", rng.normal(0.0, 0.02, (c.dim, c.num_classes)))
        self._param("head.bias", np.zeros(c.num_classes))

    # -- parameter access ----------------------------------------------------

    def backbone_names(self) -> list[str]:
        return [n for n in self.params if n not in self.HEAD_NAMES]

    def backbone_params(self) -> list[Tensor]:
        return [self.params[n] for n in self.backbone_names()]

    def head_params(self) -> list[Tensor]:
        return [self.params[n] for n in self.HEAD_NAMES]

    def all_params(self) -> list[Tensor]:
        return list(self.params.values())

    def freeze(self) -> None:
        for t in self.backbone_params():
            t.requires_grad = False
        self.frozen = True

    def backbone_checksum(self) -> str:
        h = hashlib.sha256()
        for name in self.backbone_names():
            h.update(name.encode())
            h.update(self.params[name].data.tobytes())
        return h.hexdigest()

    def with_new_head(self, num_classes: int, head_rng: np.random.Generator) -> "ViTModel":
        """Same backbone tensors, fresh classifier of a new width."""
        cfg = ViTConfig(**{**self.config.to_dict(), "num_classes": num_classes,
                           "prompted_layers": self.config.prompted_layers})
        other = ViTModel(cfg)
        other.frozen = self.frozen
        for name in self.backbone_names():
            other.params[name] = self.params[name]
        other._init_head(head_rng)
        return other

    def clone(self, unfreeze: bool = False) -> "ViTModel":
        """Deep copy; optionally re-enable gradients on the backbone."""
        other = ViTModel(self.config)
        other.frozen = self.frozen and not unfreeze
        for name, t in self.params.items():
            other.params[name] = Tensor(t.data.copy(),
                                        requires_grad=True if unfreeze else t.requires_grad)
        return other

    def state_tensors(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.params.items()}

    @staticmethod
    def from_state(config: ViTConfig, tensors: dict[str, np.ndarray], frozen: bool) -> "ViTModel":
        model = ViTModel(config, rng=np.random.default_rng(0))
        expected = set(model.params)
        if expected != set(tensors):
            missing = expected - set(tensors)
            extra = set(tensors) - expected
            raise ContractError(f"state tensors mismatch (missing={sorted(missing)}, extra={sorted(extra)})")
        for name in model.params:
            if model.params[name].data.shape != tensors[name].shape:
                raise ContractError(f"shape mismatch for {name}")
            model.params[name] = Tensor(tensors[name].copy(), requires_grad=True)
        if frozen:
            model.freeze()
        return model

    # -- forward -------------------------------------------------------------

    def patch_embed(self, images: np.ndarray) -> Tensor:
        """(B,C,H,W) images -> (B, n_tokens, D) with [CLS] at index 0."""
        c = self.config
        if images.ndim != 4 or images.shape[1:] != (c.channels, c.image_size, c.image_size):
            raise DimensionError(
                f"expected images (B,{c.channels},{c.image_size},{c.image_size}), got {images.shape}")
        patches = Tensor(patchify(np.asarray(images, dtype=np.float64), c.patch_size))
        tok = ag.add(ag.matmul(patches, self.params["patch_embed.weight"]),
                     self.params["patch_embed.bias"])
        cls = ag.repeat_batch(self.params["cls_token"], images.shape[0])
        x = ag.concat([cls, tok], axis=1)
        return ag.add(x, self.params["pos_embed"])

    def _block(self, l: int, x: Tensor, phi: tuple[Tensor, Tensor] | None) -> Tensor:
        p = f"blocks.{l}."
        a = ag.layernorm(x, self.params[p + "ln1.gain"], self.params[p + "ln1.bias"])
        phi_k, phi_v = phi if phi is not None else (None, None)
        attn = prefix_mhsa(a, phi_k, phi_v, self.params[p + "w_q"], self.params[p + "w_k"],
                           self.params[p + "w_v"], self.params[p + "w_o"], self.config.heads)
        x = ag.add(x, attn)
        m = ag.layernorm(x, self.params[p + "ln2.gain"], self.params[p + "ln2.bias"])
        m = ag.add(ag.matmul(m, self.params[p + "fc1.weight"]), self.params[p + "fc1.bias"])
        m = ag.gelu(m)
        m = ag.add(ag.matmul(m, self.params[p + "fc2.weight"]), self.params[p + "fc2.bias"])
        return ag.add(x, m)

    def forward(self, images: np.ndarray, prompts=None) -> ForwardRecord:
        """Full pass with optional prefix prompts.

        ``prompts`` is None, a dict {layer: (phi_k, phi_v)}, or a callable
        (layer, x_tokens) -> (phi_k, phi_v) | None invoked at each prompted
        layer with that layer's input embedding. Supplying a prompt for a
        layer outside ``prompted_layers`` is a contract violation.
        """
        c = self.config
        prompted = set(c.prompted_layers)
        if isinstance(prompts, dict):
            bad = set(prompts) - prompted
            if bad:
                raise ContractError(f"prompts supplied for non-prompted layers {sorted(bad)}")
        x = self.patch_embed(images)
        embeddings = [x]
        for l in range(1, c.depth + 1):
            phi = None
            if l in prompted:
                if callable(prompts):
                    phi = prompts(l, x)
                elif isinstance(prompts, dict):
                    phi = prompts.get(l)
            x = self._block(l, x, phi)
            embeddings.append(x)
        cls = ag.reshape(ag.narrow(x, 1, 0, 1), (x.data.shape[0], c.dim))
        h = ag.layernorm(cls, self.params["head_norm.gain"], self.params["head_norm.bias"])
        logits = ag.add(ag.matmul(h, self.params["head.weight"]), self.params["head.bias"])
        return ForwardRecord(logits=logits, embeddings=embeddings)

    def forward_plain_cls(self, images: np.ndarray, upto_layer: int | str = "last") -> np.ndarray:
        """Prompt-free [CLS] embedding after ``upto_layer`` (frozen models only).

        The reference depth must exceed the deepest prompted layer; "last"
        means after the final block. Runs without gradient tracking.
        """
        if not self.frozen:
            raise ContractError("forward_plain_cls requires a frozen model")
        c = self.config
        upto = c.depth if upto_layer == "last" else int(upto_layer)
        limit = max(c.prompted_layers) if c.prompted_layers else 0
        if upto <= limit or upto > c.depth:
            raise ContractError(
                f"upto_layer {upto_layer} must lie in ({limit}, {c.depth}]")
        with ag.no_grad():
            x = self.patch_embed(images)
            for l in range(1, upto + 1):
                x = self._block(l, x, None)
        return x.data[:, 0, :].copy()
