"""Positional embeddings and attention / loss masks."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import tensor as T
from .tensor import Tensor

PHASES = ("pretrain", "finetune")


class ConfigError(ValueError):
    pass


def sinusoid(pos, d: int) -> np.ndarray:
    """phi(pos, 2i) = sin(pos / 10000^(2i/d)), phi(pos, 2i+1) = cos(...); returns (..., d)."""
    pos = np.asarray(pos, dtype=np.float64)[..., None]
    i = np.arange(d // 2)
    angle = pos / np.power(10000.0, 2 * i / d)
    out = np.empty(pos.shape[:-1] + (d,))
    out[..., 0::2] = np.sin(angle)
    out[..., 1::2] = np.cos(angle)
    return out


def absolute_pos_embed(h, w, d_model: int) -> np.ndarray:
    """Sinusoid of the row index concatenated with sinusoid of the column index.

    Vectorized over ``h`` and ``w``; grid size plays no part.
    """
    if d_model % 4:
        raise ConfigError(f"absolute embeddings need d_model divisible by 4 (two even halves), got {d_model}")
    d = d_model // 2
    return np.concatenate([sinusoid(h, d), sinusoid(w, d)], axis=-1)


def fractional_pos_embed(h, w, H, W, params: Mapping[str, Tensor], activation: str = "none") -> Tensor:
    """f(h/H) + g(w/W) with f, g learned maps from a scalar to d_model.

    ``h``, ``w``, ``H``, ``W`` are arrays of the same shape; the result has one
    extra trailing dim of size d_model.
    """
    rows = np.asarray(h, dtype=np.float64) / np.asarray(H, dtype=np.float64)
    cols = np.asarray(w, dtype=np.float64) / np.asarray(W, dtype=np.float64)
    f = _scalar_map(rows, params["pos.f.w"], params["pos.f.b"], activation)
    g = _scalar_map(cols, params["pos.g.w"], params["pos.g.b"], activation)
    return f + g


def _scalar_map(x: np.ndarray, weight: Tensor, bias: Tensor, activation: str) -> Tensor:
    out = T.mul(Tensor(x[..., None]), weight) + bias
    if activation == "gelu":
        out = T.gelu(out)
    elif activation != "none":
        raise ConfigError(f"unknown fractional embedding activation {activation!r}")
    return out


def init_fractional_params(d_model: int, rng: np.random.Generator, std: float = 0.02) -> dict[str, Tensor]:
    return {
        "pos.f.w": Tensor(rng.normal(0.0, std, d_model)),
        "pos.f.b": Tensor(np.zeros(d_model)),
        "pos.g.w": Tensor(rng.normal(0.0, std, d_model)),
        "pos.g.b": Tensor(np.zeros(d_model)),
    }


def sample_prefix_length(n_real: int, rng: np.random.Generator) -> int:
    """Uniform on {1, ..., n_real - 1}; 0 (pure causal) when fewer than two real tokens."""
    if n_real < 2:
        return 0
    return int(rng.integers(1, n_real))


@dataclass
class AttentionSpec:
    pad_mask: np.ndarray  # (N,) bool
    prefix_n: int = 0     # 0 means pure causal

    @property
    def N(self) -> int:
        return len(self.pad_mask)

    @property
    def num_real(self) -> int:
        return int(np.asarray(self.pad_mask).sum())


def build_mask(spec: AttentionSpec, phase: str) -> np.ndarray:
    """Boolean (N, N) matrix; entry [i, j] is true iff query i may attend to key j."""
    real = np.asarray(spec.pad_mask, dtype=bool)
    both = real[:, None] & real[None, :]
    if phase == "finetune":
        return both
    if phase != "pretrain":
        raise ValueError(f"unknown phase {phase!r}")
    idx = np.arange(spec.N)
    allowed = idx[None, :] <= idx[:, None]
    n = spec.prefix_n
    if n > 0:
        allowed = allowed | ((idx[:, None] < n) & (idx[None, :] < n))
    return allowed & both


def build_loss_mask(spec: AttentionSpec, phase: str) -> np.ndarray:
    """Position i (0-based) is scored iff its target i+1 is real and lies outside the prefix."""
    N = spec.N
    if phase == "finetune":
        return np.zeros(N, dtype=bool)
    if phase != "pretrain":
        raise ValueError(f"unknown phase {phase!r}")
    real = np.asarray(spec.pad_mask, dtype=bool)
    next_real = np.zeros(N, dtype=bool)
    next_real[:-1] = real[1:]
    idx = np.arange(N)
    return next_real & real & (idx + 1 >= spec.prefix_n)
