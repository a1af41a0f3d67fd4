"""ViT backbone, next-patch pre-training head and attentive classification probe.

All functions are batched: tokens are (B, N, 3P^2), masks (B, N, N).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import BackboneConfig
from .embeddings import absolute_pos_embed, fractional_pos_embed, init_fractional_params
from .tensor import ContractError, ParamTree, Tensor


class NumericalFault(RuntimeError):
    pass


def param_shapes(cfg: BackboneConfig) -> dict[str, tuple[int, ...]]:
    D, Hd, C = cfg.d_model, cfg.d_hidden, cfg.patch_dim
    shapes = {"embed.w": (C, D), "embed.b": (D,)}
    if cfg.pos_embed == "fractional":
        shapes.update({"pos.f.w": (D,), "pos.f.b": (D,), "pos.g.w": (D,), "pos.g.b": (D,)})
    for i in range(cfg.layers):
        p = f"blocks.{i:02d}."
        shapes.update({
            p + "ln1.g": (D,), p + "ln1.b": (D,),
            p + "attn.q.w": (D, D), p + "attn.q.b": (D,),
            p + "attn.k.w": (D, D), p + "attn.k.b": (D,),
            p + "attn.v.w": (D, D), p + "attn.v.b": (D,),
            p + "attn.o.w": (D, D), p + "attn.o.b": (D,),
            p + "ln2.g": (D,), p + "ln2.b": (D,),
            p + "mlp.fc1.w": (D, Hd), p + "mlp.fc1.b": (Hd,),
            p + "mlp.fc2.w": (Hd, D), p + "mlp.fc2.b": (D,),
        })
    shapes.update({"norm.g": (D,), "norm.b": (D,)})
    shapes.update({
        "head.fc1.w": (D, cfg.head_hidden), "head.fc1.b": (cfg.head_hidden,),
        "head.fc2.w": (cfg.head_hidden, C), "head.fc2.b": (C,),
    })
    shapes.update({
        "probe.query": (D,),
        "probe.feat.mean": (D,), "probe.feat.scale": (D,),
        "probe.k.w": (D, D), "probe.k.b": (D,),
        "probe.v.w": (D, D), "probe.v.b": (D,),
    })
    if cfg.probe_hidden:
        shapes.update({
            "probe.fc1.w": (D, cfg.probe_hidden), "probe.fc1.b": (cfg.probe_hidden,),
            "probe.out.w": (cfg.probe_hidden, cfg.num_classes), "probe.out.b": (cfg.num_classes,),
        })
    else:
        shapes.update({"probe.out.w": (D, cfg.num_classes), "probe.out.b": (cfg.num_classes,)})
    return shapes


def count_params(cfg: BackboneConfig, include_heads: bool = False) -> int:
    return sum(math.prod(s) for k, s in param_shapes(cfg).items()
               if include_heads or not k.startswith(("head.", "probe.")))


def init_params(cfg: BackboneConfig, seed: int) -> ParamTree:
    """Xavier-uniform matrices, zero biases, unit norm scales, N(0, 0.02^2) for embedding maps and the probe query."""
    rng = np.random.default_rng(seed)
    params = ParamTree()
    for name, shape in sorted(param_shapes(cfg).items()):
        if name.startswith("pos."):
            continue
        if len(shape) == 2:
            bound = math.sqrt(6.0 / (shape[0] + shape[1]))
            params[name] = Tensor(rng.uniform(-bound, bound, shape))
        elif name.endswith(".g") or name == "probe.feat.scale":
            params[name] = Tensor(np.ones(shape))
        elif name == "probe.query":
            params[name] = Tensor(rng.normal(0.0, 0.02, shape))
        else:
            params[name] = Tensor(np.zeros(shape))
    if cfg.pos_embed == "fractional":
        params.update(init_fractional_params(cfg.d_model, rng))
    return params


FROZEN_PROBE_STATS = ("probe.feat.mean", "probe.feat.scale")


def is_backbone_param(name: str) -> bool:
    return not name.startswith(("head.", "probe."))


def _linear(x: Tensor, params, prefix: str) -> Tensor:
    return T.matmul(x, params[prefix + ".w"]) + params[prefix + ".b"]


def _norm(x: Tensor, params, prefix: str) -> Tensor:
    return T.layer_norm_last_dim(x) * params[prefix + ".g"] + params[prefix + ".b"]


def position_embedding(coords: np.ndarray, params, cfg: BackboneConfig):
    h, w, H, W = (coords[..., i] for i in range(4))
    if cfg.pos_embed == "absolute":
        return Tensor(absolute_pos_embed(h, w, cfg.d_model))
    return fractional_pos_embed(h, w, H, W, params, cfg.frac_activation)


def attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray, heads: int) -> Tensor:
    """Multi-head scaled dot-product attention; ``mask`` true where attending is allowed."""
    d = q.shape[-1] // heads
    scale = 1.0 / math.sqrt(d)
    blocked = ~mask
    outs = []
    for h in range(heads):
        qh = T.slice_(q, h * d, (h + 1) * d)
        kh = T.slice_(k, h * d, (h + 1) * d)
        vh = T.slice_(v, h * d, (h + 1) * d)
        logits = T.matmul(qh, T.transpose_last_two(kh)) * scale
        weights = T.softmax_last_dim(T.masked_fill(logits, blocked, -np.inf))
        outs.append(T.matmul(weights, vh))
    return T.concat_last_dim(outs)


def backbone_forward(tokens: np.ndarray, coords: np.ndarray, mask: np.ndarray,
                     params, cfg: BackboneConfig) -> Tensor:
    """Patch embed + positional embed, pre-norm blocks, final norm -> (B, N, d_model)."""
    x = _linear(Tensor(tokens), params, "embed") + position_embedding(coords, params, cfg)
    for i in range(cfg.layers):
        p = f"blocks.{i:02d}."
        y = _norm(x, params, p + "ln1")
        a = attention(_linear(y, params, p + "attn.q"), _linear(y, params, p + "attn.k"),
                      _linear(y, params, p + "attn.v"), mask, cfg.heads)
        x = x + _linear(a, params, p + "attn.o")
        y = _norm(x, params, p + "ln2")
        x = x + _linear(T.gelu(_linear(y, params, p + "mlp.fc1")), params, p + "mlp.fc2")
        if not np.all(np.isfinite(x.data)):
            raise NumericalFault(f"non-finite activations after block {i}")
    return _norm(x, params, "norm")


def pretrain_head(features: Tensor, params) -> Tensor:
    """Per-position MLP predicting the next patch: (B, N, d_model) -> (B, N, 3P^2)."""
    return _linear(T.gelu(_linear(features, params, "head.fc1")), params, "head.fc2")


def probe_pool(features: Tensor, pad_mask: np.ndarray, params, heads: int) -> Tensor:
    """A learned query cross-attends over real tokens: (B, N, D) -> (B, D).

    Features are first standardized with the fixed statistics ``probe.feat.*``.
    """
    pad_mask = np.asarray(pad_mask, dtype=bool)
    if not pad_mask.any(axis=-1).all():
        raise ContractError("attentive_probe: every sample needs at least one real token")
    if "probe.feat.mean" in params:
        features = (features - params["probe.feat.mean"].detach()) * params["probe.feat.scale"].detach()
    q = T.reshape(params["probe.query"], (1, 1, params["probe.query"].shape[0]))
    k = _linear(features, params, "probe.k")
    v = _linear(features, params, "probe.v")
    pooled = attention(q, k, v, pad_mask[:, None, :], heads)        # (B, 1, D)
    return T.reshape(pooled, (pooled.shape[0], pooled.shape[2]))


def attentive_probe(features: Tensor, pad_mask: np.ndarray, params, heads: int) -> Tensor:
    """Attention pooling, then an optional gelu hidden layer, then class logits (B, classes)."""
    pooled = probe_pool(features, pad_mask, params, heads)
    if "probe.fc1.w" in params:
        pooled = T.gelu(_linear(pooled, params, "probe.fc1"))
    return _linear(pooled, params, "probe.out")


@dataclass
class Model:
    cfg: BackboneConfig
    params: ParamTree

    @classmethod
    def create(cls, cfg: BackboneConfig, seed: int = 0) -> Model:
        return cls(cfg, init_params(cfg, seed))

    def features(self, batch) -> Tensor:
        return backbone_forward(batch.tokens, batch.coords, batch.attn_mask, self.params, self.cfg)

    def predictions(self, batch) -> Tensor:
        return pretrain_head(self.features(batch), self.params)

    def logits(self, batch) -> Tensor:
        feats = self.features(batch).detach()
        return attentive_probe(feats, batch.pad_mask, self.params, self.cfg.heads)
