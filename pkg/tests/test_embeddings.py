import numpy as np
import pytest
from scipy import stats

from naraim.embeddings import (AttentionSpec, ConfigError, absolute_pos_embed, build_loss_mask, build_mask,
                               fractional_pos_embed, init_fractional_params, sample_prefix_length)


def test_absolute_origin_pattern():
    e = absolute_pos_embed(0, 0, 8)
    assert np.array_equal(e, [0, 1, 0, 1, 0, 1, 0, 1])


def test_absolute_halves_and_frequencies():
    e = absolute_pos_embed(3, 5, 8)
    d = 4
    for i in range(2):
        w = 1.0 / 10000 ** (2 * i / d)
        assert e[2 * i] == pytest.approx(np.sin(3 * w), abs=1e-15)
        assert e[2 * i + 1] == pytest.approx(np.cos(3 * w), abs=1e-15)
        assert e[d + 2 * i] == pytest.approx(np.sin(5 * w), abs=1e-15)
    assert np.array_equal(absolute_pos_embed(3, 5, 8)[:4], absolute_pos_embed(3, 9, 8)[:4])


def test_absolute_rejects_bad_width():
    with pytest.raises(ConfigError):
        absolute_pos_embed(0, 0, 6)


def test_fractional_depends_on_proportions_only():
    params = init_fractional_params(16, np.random.default_rng(0))
    a = fractional_pos_embed(np.array([1]), np.array([2]), np.array([4]), np.array([8]), params).data
    b = fractional_pos_embed(np.array([2]), np.array([4]), np.array([8]), np.array([16]), params).data
    assert np.allclose(a, b, atol=1e-15)
    zero = fractional_pos_embed(np.array([0]), np.array([0]), np.array([3]), np.array([3]), params).data
    assert np.allclose(zero, params["pos.f.b"].data + params["pos.g.b"].data)


def test_fractional_unknown_activation():
    params = init_fractional_params(4, np.random.default_rng(0))
    with pytest.raises(ConfigError):
        fractional_pos_embed(np.array([0]), np.array([0]), np.array([1]), np.array([1]), params, "relu")


def test_prefix_mask_n4_n2():
    m = build_mask(AttentionSpec(np.ones(4, bool), 2), "pretrain")
    expect = np.array([[1, 1, 0, 0], [1, 1, 0, 0], [1, 1, 1, 0], [1, 1, 1, 1]], bool)
    assert np.array_equal(m, expect)


def test_prefix_one_equals_causal():
    pad = np.ones(6, bool)
    assert np.array_equal(build_mask(AttentionSpec(pad, 1), "pretrain"), build_mask(AttentionSpec(pad, 0), "pretrain"))


def test_padding_blocked_and_finetune_bidirectional():
    pad = np.array([True, True, True, False])
    m = build_mask(AttentionSpec(pad, 0), "finetune")
    assert m[:3, :3].all() and not m[3].any() and not m[:, 3].any()
    p = build_mask(AttentionSpec(pad, 2), "pretrain")
    assert not p[:, 3].any()


def test_loss_mask_examples():
    full = np.ones(4, bool)
    # with a 3-token prefix only the fourth token is scored, predicted from position 2
    assert build_loss_mask(AttentionSpec(full, 3), "pretrain").tolist() == [False, False, True, False]
    assert build_loss_mask(AttentionSpec(full, 2), "pretrain").tolist() == [False, True, True, False]
    assert build_loss_mask(AttentionSpec(full, 0), "pretrain").tolist() == [True, True, True, False]
    padded = np.array([True, True, True, False, False])
    assert build_loss_mask(AttentionSpec(padded, 0), "pretrain").tolist() == [True, True, False, False, False]
    assert not build_loss_mask(AttentionSpec(full, 0), "finetune").any()


def test_unknown_phase():
    with pytest.raises(ValueError):
        build_mask(AttentionSpec(np.ones(2, bool)), "eval")


def test_prefix_length_range_and_degenerate():
    rng = np.random.default_rng(0)
    assert sample_prefix_length(1, rng) == 0
    assert sample_prefix_length(0, rng) == 0
    assert all(1 <= sample_prefix_length(5, rng) <= 4 for _ in range(200))


def test_prefix_length_uniform_chi_square():
    rng = np.random.default_rng(1)
    draws = [sample_prefix_length(11, rng) for _ in range(20000)]
    counts = np.bincount(draws, minlength=11)[1:]
    assert stats.chisquare(counts).pvalue > 0.001


def test_random_mask_invariants():
    rng = np.random.default_rng(2)
    for _ in range(100):
        N = int(rng.integers(2, 12))
        real = int(rng.integers(1, N + 1))
        pad = np.arange(N) < real
        n = sample_prefix_length(real, rng)
        m = build_mask(AttentionSpec(pad, n), "pretrain")
        i, j = np.nonzero(m)
        # no future keys beyond the prefix, no padded keys or queries
        assert np.all((j <= i) | ((i < n) & (j < n)))
        assert pad[i].all() and pad[j].all()
        assert np.diag(m)[:real].all()
