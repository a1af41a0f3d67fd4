"""Losses, AdamW, schedules, clipping and the pre-train / fine-tune loops."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint
from .config import RunConfig, TrainConfig, as_dict
from .embeddings import AttentionSpec, build_loss_mask, build_mask, sample_prefix_length
from .imaging import AugmentConfig, TokenSequence, patch_normalize_target, preprocess
from .model import FROZEN_PROBE_STATS, Model, attentive_probe, backbone_forward, pretrain_head
from .tensor import ContractError, ParamTree, Tensor

log = logging.getLogger(__name__)

ADAM_EPS = 1e-8


class NonFiniteLoss(RuntimeError):
    def __init__(self, step: int):
        super().__init__(f"non-finite loss at step {step}")
        self.step = step


@dataclass
class Batch:
    tokens: np.ndarray     # (B, N, C)
    pad_mask: np.ndarray   # (B, N)
    coords: np.ndarray     # (B, N, 4)
    attn_mask: np.ndarray  # (B, N, N)
    loss_mask: np.ndarray  # (B, N)
    labels: np.ndarray     # (B,)
    prefix: np.ndarray     # (B,)


def make_batch(seqs: Sequence[TokenSequence], phase: str, prefix: Sequence[int] | None = None,
               labels: Sequence[int] | None = None) -> Batch:
    prefix = np.zeros(len(seqs), dtype=np.int64) if prefix is None else np.asarray(prefix, dtype=np.int64)
    specs = [AttentionSpec(s.pad_mask, int(n)) for s, n in zip(seqs, prefix)]
    return Batch(
        tokens=np.stack([s.tokens for s in seqs]),
        pad_mask=np.stack([s.pad_mask for s in seqs]),
        coords=np.stack([s.coords for s in seqs]),
        attn_mask=np.stack([build_mask(sp, phase) for sp in specs]),
        loss_mask=np.stack([build_loss_mask(sp, phase) for sp in specs]),
        labels=np.zeros(len(seqs), dtype=np.int64) if labels is None else np.asarray(labels, dtype=np.int64),
        prefix=prefix,
    )


# -- losses ------------------------------------------------------------------

def next_patch_targets(tokens: np.ndarray, loss_mode: str) -> np.ndarray:
    """Targets for position i are token i+1 (normalized per patch in ``normalized`` mode)."""
    targets = np.zeros_like(tokens)
    targets[..., :-1, :] = tokens[..., 1:, :]
    if loss_mode == "normalized":
        targets = patch_normalize_target(targets)
    elif loss_mode != "raw":
        raise ValueError(f"unknown loss mode {loss_mode!r}")
    return targets


def per_patch_squared_error(preds: np.ndarray, targets: np.ndarray) -> np.ndarray:
    return ((preds - targets) ** 2).mean(axis=-1)


def next_patch_mse(preds: Tensor, targets: np.ndarray, loss_mask: np.ndarray) -> Tensor:
    """Mean over scored positions of the per-patch mean squared subpixel error."""
    if preds.shape != targets.shape:
        raise T.ShapeError(f"next_patch_mse: dims {preds.dims} and {list(targets.shape)}")
    w = np.asarray(loss_mask, dtype=np.float64)
    count = w.sum()
    if count == 0:
        raise ContractError("next_patch_mse: no scored positions")
    diff = preds - Tensor(targets)
    per_patch = T.mean_last_dim(diff * diff)
    return T.sum_(per_patch * Tensor(w[..., None] / count))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean of -log softmax(logits)[label] over the batch (logits: (B, C) or (C,))."""
    if logits.data.ndim == 1:
        logits = T.reshape(logits, (1, logits.shape[0]))
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    B, C = logits.shape
    if np.any(labels < 0) or np.any(labels >= C):
        raise ContractError(f"cross_entropy: labels must lie in [0, {C})")
    shift = Tensor(logits.data.max(axis=-1, keepdims=True))
    z = logits - shift
    lse = T.log(T.mean_last_dim(T.exp(z)) * float(C))
    onehot = np.zeros((B, C))
    onehot[np.arange(B), labels] = 1.0
    picked = T.mean_last_dim(z * Tensor(onehot)) * float(C)
    return T.sum_(lse - picked) * (1.0 / B)


# -- optimisation ------------------------------------------------------------

@dataclass
class OptimizerState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def decays(name: str, value: Tensor) -> bool:
    """Weight decay applies to weight matrices only."""
    return value.data.ndim >= 2 and not name.startswith("pos.")


def adamw_step(params: Mapping[str, Tensor], grads: Mapping[str, Tensor], state: OptimizerState,
               lr: float, cfg: TrainConfig) -> tuple[ParamTree, OptimizerState]:
    """One bias-corrected Adam step with decoupled weight decay on the tensors in ``grads``.

    Parameters without a gradient entry are passed through untouched.
    """
    b1, b2 = cfg.betas
    t = state.step + 1
    new_params = ParamTree(dict(params.items()))
    new_m, new_v = dict(state.m), dict(state.v)
    for name in sorted(grads):
        p, g = params[name].data, grads[name].data
        if p.shape != g.shape:
            raise T.ShapeError(f"adamw: param {name} dims {list(p.shape)} vs grad {list(g.shape)}")
        m = b1 * new_m.get(name, np.zeros_like(p)) + (1 - b1) * g
        v = b2 * new_v.get(name, np.zeros_like(p)) + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        if cfg.weight_decay and decays(name, params[name]):
            p = p * (1 - lr * cfg.weight_decay)
        new_params[name] = Tensor(p - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS))
        new_m[name], new_v[name] = m, v
    return new_params, OptimizerState(t, new_m, new_v)


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Pretrain: warmup, exponential decay to peak*decay_rate, linear cooldown. Finetune: warmup, cosine."""
    total, warm = cfg.total_iters, cfg.warmup_iters
    if not 0 <= step <= total:
        raise ContractError(f"lr_at: step {step} outside [0, {total}]")
    if step < warm:
        return cfg.peak_lr * step / warm
    if cfg.phase == "pretrain":
        cool_start = total - cfg.cooldown_iters
        if step <= cool_start:
            span = cool_start - warm
            frac = (step - warm) / span if span else 1.0
            return cfg.peak_lr * cfg.decay_rate ** frac
        start_lr = cfg.peak_lr * cfg.decay_rate
        return start_lr + (cfg.min_lr - start_lr) * (step - cool_start) / cfg.cooldown_iters
    span = total - warm
    frac = (step - warm) / span if span else 1.0
    return cfg.min_lr + (cfg.peak_lr - cfg.min_lr) * 0.5 * (1 + math.cos(math.pi * frac))


def global_norm(grads: Mapping[str, Tensor]) -> float:
    return math.sqrt(sum(float(np.sum(g.data * g.data)) for g in grads.values()))


def clip_gradients(grads: Mapping[str, Tensor], max_norm: float) -> ParamTree:
    if max_norm <= 0:
        raise ContractError("clip_gradients: max_norm must be positive")
    norm = global_norm(grads)
    if norm <= max_norm:
        return ParamTree(dict(grads.items()))
    scale = max_norm / norm
    return ParamTree({k: Tensor(g.data * scale) for k, g in grads.items()})


# -- loops -------------------------------------------------------------------

def pretrain_loss(params, batch: Batch, cfg: RunConfig) -> Tensor:
    feats = backbone_forward(batch.tokens, batch.coords, batch.attn_mask, params, cfg.backbone)
    preds = pretrain_head(feats, params)
    targets = next_patch_targets(batch.tokens, cfg.train.loss_mode)
    return next_patch_mse(preds, targets, batch.loss_mask)


def probe_logits(params, batch: Batch, cfg: RunConfig) -> Tensor:
    feats = backbone_forward(batch.tokens, batch.coords, batch.attn_mask, params, cfg.backbone).detach()
    return attentive_probe(feats, batch.pad_mask, params, cfg.backbone.heads)


def epoch_indices(n: int, batch_size: int, step: int, seed: int) -> np.ndarray:
    """Dataset indices for ``step``: consecutive slices of a fresh permutation per epoch."""
    pos = step * batch_size + np.arange(batch_size)
    epochs, offsets = pos // n, pos % n
    out = np.empty(batch_size, dtype=np.int64)
    for e in np.unique(epochs):
        perm = np.random.default_rng([seed, int(e), n]).permutation(n)
        sel = epochs == e
        out[sel] = perm[offsets[sel]]
    return out


def sample_batch(dataset, cfg: RunConfig, step: int) -> Batch:
    """Deterministic in (seed, step): each sample gets its own derived RNG stream."""
    tc = cfg.train
    idx = epoch_indices(len(dataset), tc.batch_size, step, tc.seed)
    augment = tc.phase == "pretrain" or tc.finetune_augment
    aug = AugmentConfig(random_crop=tc.random_crop, flip=tc.flip)
    seqs, prefix, labels = [], [], []
    for j, i in enumerate(idx):
        srng = np.random.default_rng([tc.seed, step, j])
        img, label = dataset[int(i)]
        seq = preprocess(img, cfg.pipeline, tc.policy, train=augment, rng=srng, augment=aug)
        seqs.append(seq)
        labels.append(label)
        prefix.append(sample_prefix_length(seq.num_real, srng) if tc.phase == "pretrain" else 0)
    return make_batch(seqs, tc.phase, prefix, labels)


def trainable(name: str, phase: str) -> bool:
    if phase == "pretrain":
        return not name.startswith("probe.")
    return name.startswith("probe.") and name not in FROZEN_PROBE_STATS


def fit_probe_statistics(params, dataset, cfg: RunConfig, max_images: int = 256, batch_size: int = 32) -> ParamTree:
    """Set ``probe.feat.*`` from frozen-backbone features of up to ``max_images`` evaluation views."""
    n = min(len(dataset), max_images)
    idx = np.linspace(0, len(dataset) - 1, n).round().astype(int)
    total, sq, count = 0.0, 0.0, 0
    for lo in range(0, n, batch_size):
        seqs = [preprocess(dataset[int(i)][0], cfg.pipeline, cfg.train.policy, train=False)
                for i in idx[lo:lo + batch_size]]
        batch = make_batch(seqs, "finetune")
        feats = backbone_forward(batch.tokens, batch.coords, batch.attn_mask, params, cfg.backbone).data
        real = feats[batch.pad_mask]
        total = total + real.sum(axis=0)
        sq = sq + (real * real).sum(axis=0)
        count += len(real)
    mean = total / count
    var = np.maximum(sq / count - mean * mean, 0.0)
    out = ParamTree(dict(params.items()))
    out["probe.feat.mean"] = Tensor(mean)
    out["probe.feat.scale"] = Tensor(1.0 / np.sqrt(var + 1e-6))
    return out


@dataclass
class StepResult:
    step: int
    lr: float
    loss: float
    acc: float | None = None


class Trainer:
    """Stateful wrapper over the functional step; ``step`` counts completed updates."""

    def __init__(self, cfg: RunConfig, dataset, model: Model, resume: Checkpoint | None = None):
        if len(dataset) == 0:
            raise ContractError("run_training: empty dataset")
        self.cfg = cfg
        self.dataset = dataset
        self.model = model
        self.opt = OptimizerState()
        self.step = 0
        # frozen-backbone features per dataset index, used when fine-tuning sees fixed views
        self._features: dict[int, tuple[np.ndarray, np.ndarray, int]] = {}
        if resume is not None:
            self.restore(resume)
        elif cfg.train.phase == "finetune" and "probe.feat.mean" in model.params:
            self.model.params = fit_probe_statistics(model.params, dataset, cfg)

    @property
    def fixed_views(self) -> bool:
        tc = self.cfg.train
        return tc.phase == "finetune" and not tc.finetune_augment

    def _frozen_features(self, idx: np.ndarray):
        """Features, pad masks and labels for ``idx``; each image passes the backbone once."""
        cfg = self.cfg
        missing = [i for i in dict.fromkeys(int(i) for i in idx) if i not in self._features]
        for lo in range(0, len(missing), 32):
            chunk = missing[lo:lo + 32]
            items = [self.dataset[i] for i in chunk]
            seqs = [preprocess(img, cfg.pipeline, cfg.train.policy, train=False) for img, _ in items]
            batch = make_batch(seqs, "finetune")
            feats = backbone_forward(batch.tokens, batch.coords, batch.attn_mask,
                                     self.model.params, cfg.backbone).data
            for j, i in enumerate(chunk):
                self._features[i] = (feats[j], batch.pad_mask[j], items[j][1])
        rows = [self._features[int(i)] for i in idx]
        return (np.stack([r[0] for r in rows]), np.stack([r[1] for r in rows]),
                np.array([r[2] for r in rows], dtype=np.int64))

    def train_step(self) -> StepResult:
        cfg, tc = self.cfg, self.cfg.train
        names = [k for k in self.model.params if trainable(k, tc.phase)]
        wrt = ParamTree({k: self.model.params[k] for k in names})
        acc = None
        if tc.phase == "pretrain":
            batch = sample_batch(self.dataset, cfg, self.step)
            loss = pretrain_loss(self.model.params, batch, cfg)
        else:
            if self.fixed_views:
                feats, pad_mask, labels = self._frozen_features(
                    epoch_indices(len(self.dataset), tc.batch_size, self.step, tc.seed))
                logits = attentive_probe(Tensor(feats), pad_mask, self.model.params, cfg.backbone.heads)
            else:
                batch = sample_batch(self.dataset, cfg, self.step)
                labels = batch.labels
                logits = probe_logits(self.model.params, batch, cfg)
            loss = cross_entropy(logits, labels)
            acc = float(np.mean(logits.data.argmax(axis=-1) == labels))
        value = loss.item()
        if not math.isfinite(value):
            raise NonFiniteLoss(self.step)
        grads = clip_gradients(T.gradient(loss, wrt), tc.grad_clip)
        lr = lr_at(self.step + 1, tc)
        self.model.params, self.opt = adamw_step(self.model.params, grads, self.opt, lr, tc)
        self.step += 1
        return StepResult(self.step, lr, value, acc)

    def checkpoint(self) -> Checkpoint:
        tensors = {k: v.data.copy() for k, v in self.model.params.items()}
        for k in sorted(self.opt.m):
            tensors["opt.m/" + k] = self.opt.m[k].copy()
            tensors["opt.v/" + k] = self.opt.v[k].copy()
        rng_state = {"seed": self.cfg.train.seed, "step": self.step, "opt_step": self.opt.step}
        return Checkpoint(as_dict(self.cfg), self.step, rng_state, tensors)

    def restore(self, ckpt: Checkpoint) -> None:
        params = ParamTree()
        m, v = {}, {}
        for name, arr in ckpt.tensors.items():
            if name.startswith("opt.m/"):
                m[name[6:]] = arr.copy()
            elif name.startswith("opt.v/"):
                v[name[6:]] = arr.copy()
            else:
                params[name] = Tensor(arr.copy())
        missing = set(self.model.params) - set(params)
        if missing:
            raise ContractError(f"checkpoint lacks parameters: {sorted(missing)}")
        self.model.params = params
        self._features.clear()
        self.step = ckpt.step
        self.opt = OptimizerState(int(ckpt.rng_state.get("opt_step", ckpt.step)), m, v)


def append_metrics(path: str | Path, res: StepResult) -> None:
    line = f"{res.step}\t{res.lr:.9g}\t{res.loss:.9g}"
    if res.acc is not None:
        line += f"\t{res.acc:.6g}"
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(line + "\n")


def run_training(cfg: RunConfig, dataset, model: Model, resume: Checkpoint | None = None,
                 metrics_path: str | Path | None = None, stop_at: int | None = None,
                 on_step: Callable[[StepResult], None] | None = None) -> Iterator[Checkpoint]:
    """Run the loop for ``cfg.train.phase``, yielding checkpoints every K steps and at the end.

    A non-finite loss raises :class:`NonFiniteLoss`; checkpoints yielded before
    that remain the last good state.
    """
    trainer = Trainer(cfg, dataset, model, resume)
    tc = cfg.train
    end = tc.total_iters if stop_at is None else min(stop_at, tc.total_iters)
    while trainer.step < end:
        res = trainer.train_step()
        if on_step is not None:
            on_step(res)
        if metrics_path is not None and (res.step % tc.log_every == 0 or res.step == end):
            append_metrics(metrics_path, res)
        if res.step % tc.log_every == 0:
            log.info("step %d lr %.3g loss %.5f", res.step, res.lr, res.loss)
        if res.step % tc.checkpoint_every == 0 or res.step == end:
            yield trainer.checkpoint()
