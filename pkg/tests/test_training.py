import math
from dataclasses import replace

import numpy as np
import pytest

from naraim.checkpoint import decode_checkpoint, encode_checkpoint
from naraim.config import PAPER_FINETUNE, PAPER_PRETRAIN, BackboneConfig, RunConfig, TrainConfig
from naraim.data import SyntheticDataset
from naraim.imaging import PipelineConfig
from naraim.model import Model
from naraim.tensor import ContractError, ParamTree, Tensor, gradient
from naraim.training import (NonFiniteLoss, OptimizerState, Trainer, adamw_step, clip_gradients, cross_entropy,
                             epoch_indices, global_norm, lr_at, next_patch_mse, next_patch_targets,
                             pretrain_loss, probe_logits, run_training, sample_batch)

TINY_BB = BackboneConfig(layers=1, heads=2, d_model=16, d_hidden=32, patch_size=4, head_hidden=16, probe_hidden=8)
TINY_PIPE = PipelineConfig(pixel_budget=16 * 16, patch_size=4)


def tiny_cfg(phase="pretrain", **train):
    base = TrainConfig(phase=phase, batch_size=4, warmup_iters=2, cooldown_iters=2 if phase == "pretrain" else 0,
                       total_iters=10, peak_lr=1e-2, min_lr=1e-5 if phase == "finetune" else 0.0, log_every=5,
                       checkpoint_every=5)
    return RunConfig("desk", backbone=TINY_BB, pipeline=TINY_PIPE, train=replace(base, **train))


def test_mse_hand_example():
    preds = Tensor(np.array([[[1.0, 1.0], [0.0, 0.0], [5.0, 5.0]]]))
    targets = np.array([[[0.0, 0.0], [0.0, 2.0], [9.0, 9.0]]])
    loss = next_patch_mse(preds, targets, np.array([[True, True, False]]))
    assert loss.item() == pytest.approx((1.0 + 2.0) / 2)
    with pytest.raises(ContractError):
        next_patch_mse(preds, targets, np.zeros((1, 3), bool))


def test_targets_shift_and_normalize():
    tokens = np.arange(12, dtype=float).reshape(1, 3, 4)
    raw = next_patch_targets(tokens, "raw")
    assert np.array_equal(raw[0, :2], tokens[0, 1:]) and not raw[0, 2].any()
    norm = next_patch_targets(tokens, "normalized")
    assert np.allclose(norm[0, 0].mean(), 0) and abs(norm[0, 0].std() - 1) < 1e-3


def test_cross_entropy_uniform_and_stable():
    assert cross_entropy(Tensor(np.zeros((1, 2))), [0]).item() == pytest.approx(math.log(2), abs=1e-15)
    assert cross_entropy(Tensor(np.zeros(4)), 3).item() == pytest.approx(math.log(4), abs=1e-15)
    big = cross_entropy(Tensor(np.array([[1000.0, 0.0]])), [1]).item()
    assert big == pytest.approx(1000.0)
    with pytest.raises(ContractError):
        cross_entropy(Tensor(np.zeros((1, 2))), [2])


def test_adamw_first_step_and_decay():
    cfg = replace(PAPER_FINETUNE, weight_decay=0.5)
    params = ParamTree(w=Tensor(np.ones((2, 2))), b=Tensor(np.ones(2)))
    grads = ParamTree(w=Tensor(np.full((2, 2), 0.3)), b=Tensor(np.full(2, -2.0)))
    new, st = adamw_step(params, grads, OptimizerState(), 0.1, cfg)
    # bias-corrected first step moves each entry by lr * sign(g) (up to eps)
    assert np.allclose(new["w"].data, 1 * (1 - 0.1 * 0.5) - 0.1, atol=1e-6)
    assert np.allclose(new["b"].data, 1 + 0.1, atol=1e-6)
    assert st.step == 1
    assert np.array_equal(params["w"].data, np.ones((2, 2)))


def test_adamw_zero_grad_is_decay_only():
    params = ParamTree(w=Tensor(np.full((2, 2), 2.0)))
    new, _ = adamw_step(params, ParamTree(w=Tensor(np.zeros((2, 2)))), OptimizerState(), 0.1,
                        replace(PAPER_FINETUNE, weight_decay=0.1))
    assert np.allclose(new["w"].data, 2.0 * (1 - 0.01))


def test_lr_anchors():
    assert lr_at(0, PAPER_PRETRAIN) == 0.0
    assert abs(lr_at(5000, PAPER_PRETRAIN) - 1e-3) <= 1e-12
    assert abs(lr_at(490000, PAPER_PRETRAIN) - 1e-4) <= 1e-12
    assert lr_at(500000, PAPER_PRETRAIN) == 0.0
    assert lr_at(0, PAPER_FINETUNE) == 0.0
    assert abs(lr_at(500, PAPER_FINETUNE) - 1e-3) <= 1e-12
    assert abs(lr_at(50000, PAPER_FINETUNE) - 1e-5) <= 1e-12
    with pytest.raises(ContractError):
        lr_at(500001, PAPER_PRETRAIN)


def test_lr_monotone_pieces():
    lrs = [lr_at(s, PAPER_PRETRAIN) for s in range(0, 500001, 1000)]
    warm, decay = lrs[:6], lrs[5:491]
    assert all(a <= b for a, b in zip(warm, warm[1:]))
    assert all(a >= b for a, b in zip(decay, decay[1:]))


def test_clip_gradients():
    g = ParamTree(a=Tensor(np.array([3.0, 4.0])))
    clipped = clip_gradients(g, 1.0)
    assert global_norm(clipped) == pytest.approx(1.0)
    assert np.allclose(clipped["a"].data, [0.6, 0.8])
    assert np.array_equal(clip_gradients(g, 10.0)["a"].data, [3.0, 4.0])
    with pytest.raises(ContractError):
        clip_gradients(g, 0.0)


def test_epoch_indices_cover_each_epoch():
    n, bs = 10, 4
    seen = np.concatenate([epoch_indices(n, bs, s, 3) for s in range(5)])
    assert sorted(seen[:10]) == list(range(10)) and sorted(seen[10:20]) == list(range(10))
    assert np.array_equal(epoch_indices(n, bs, 2, 3), epoch_indices(n, bs, 2, 3))
    assert not np.array_equal(seen[:10], seen[10:20])


def test_sample_batch_deterministic():
    ds = SyntheticDataset(8, seed=1)
    cfg = tiny_cfg()
    a, b = sample_batch(ds, cfg, 3), sample_batch(ds, cfg, 3)
    assert np.array_equal(a.tokens, b.tokens) and np.array_equal(a.prefix, b.prefix)
    assert np.all(a.prefix >= 1)


def _run(cfg, ds, stop=None, resume=None):
    model = Model.create(cfg.backbone, 0)
    ckpts = list(run_training(cfg, ds, model, resume=resume, stop_at=stop))
    return model, ckpts


@pytest.mark.parametrize("phase", ["pretrain", "finetune"])
def test_resume_bitwise(phase):
    ds = SyntheticDataset(8, seed=2)
    cfg = tiny_cfg(phase, finetune_augment=False)
    full, _ = _run(cfg, ds)
    _, part = _run(cfg, ds, stop=5)
    ckpt = decode_checkpoint(encode_checkpoint(part[-1]))
    resumed, _ = _run(cfg, ds, resume=ckpt)
    for k in full.params:
        assert np.array_equal(full.params[k].data, resumed.params[k].data), k


def test_feature_cache_matches_direct_path():
    ds = SyntheticDataset(8, seed=3)
    cfg = tiny_cfg("finetune", finetune_augment=False)
    trainer = Trainer(cfg, ds, Model.create(cfg.backbone, 0))
    params = trainer.model.params
    batch = sample_batch(ds, cfg, 0)
    direct = cross_entropy(probe_logits(params, batch, cfg), batch.labels).item()
    res = trainer.train_step()
    assert res.loss == pytest.approx(direct, rel=1e-12)


def test_finetune_updates_only_probe():
    ds = SyntheticDataset(8, seed=4)
    cfg = tiny_cfg("finetune")
    model = Model.create(cfg.backbone, 0)
    before = {k: v.data.copy() for k, v in model.params.items()}
    list(run_training(cfg, ds, model))
    for k, v in model.params.items():
        changed = not np.array_equal(before[k], v.data)
        if k.startswith("probe.feat."):
            continue
        assert changed == k.startswith("probe."), k


def test_non_finite_loss_raises():
    ds = SyntheticDataset(4, seed=5)
    cfg = tiny_cfg()
    model = Model.create(cfg.backbone, 0)
    model.params["head.fc2.b"] = Tensor(np.full(model.params["head.fc2.b"].shape, np.nan))
    with pytest.raises(NonFiniteLoss):
        list(run_training(cfg, ds, model))


def test_gradient_through_pretrain_loss_is_finite():
    ds = SyntheticDataset(4, seed=6)
    cfg = tiny_cfg()
    model = Model.create(cfg.backbone, 0)
    loss = pretrain_loss(model.params, sample_batch(ds, cfg, 0), cfg)
    grads = gradient(loss, model.params)
    assert all(np.all(np.isfinite(g.data)) for g in grads.values())
