"""Pixel-space preprocessing.

Images are float64 arrays of shape (height, width, 3) with values in [0, 1].
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import ContractError


class ImageError(ValueError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    pixel_budget: int = 224 * 224
    patch_size: int = 14

    def __post_init__(self):
        if self.patch_size < 1 or self.pixel_budget < self.patch_size ** 2:
            raise ValueError(f"pixel_budget {self.pixel_budget} must be >= patch_size^2 ({self.patch_size ** 2})")

    @property
    def max_tokens(self) -> int:
        return self.pixel_budget // (self.patch_size ** 2)

    @property
    def patch_dim(self) -> int:
        return 3 * self.patch_size ** 2

    @property
    def square_side(self) -> int:
        return math.isqrt(self.pixel_budget)


@dataclass
class PatchGrid:
    rows: int
    cols: int
    patches: np.ndarray  # (rows * cols, 3 * P * P)


@dataclass
class TokenSequence:
    tokens: np.ndarray    # (N_max, 3 * P * P)
    pad_mask: np.ndarray  # (N_max,) bool, true on real tokens
    coords: np.ndarray    # (N_max, 4) int: row, col, grid rows, grid cols

    @property
    def num_real(self) -> int:
        return int(self.pad_mask.sum())


def check_image(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ImageError(f"expected (height, width, 3) image, got shape {img.shape}")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise ImageError(f"image must be at least 1x1, got {img.shape[0]}x{img.shape[1]}")
    if not (img.min() >= 0.0 and img.max() <= 1.0):
        raise ImageError("subpixel values must lie in [0, 1]")
    return img


def _axis_weights(n_in: int, n_out: int, scale: float):
    # Half-pixel-centre mapping: src = (dst + 0.5) / scale - 0.5, clamped to the edge.
    src = (np.arange(n_out) + 0.5) / scale - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    return lo, hi, frac


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int,
                    scale_h: float | None = None, scale_w: float | None = None) -> np.ndarray:
    """Bilinear resample to ``out_h`` x ``out_w``.

    ``scale_h``/``scale_w`` default to ``out/in``; passing them explicitly lets a
    caller resample at one scale while keeping only a top-left window.
    """
    h, w = img.shape[:2]
    if (out_h, out_w) == (h, w) and scale_h is None and scale_w is None:
        return img.copy()
    lo, hi, fr = _axis_weights(h, out_h, scale_h or out_h / h)
    rows = img[lo] * (1.0 - fr)[:, None, None] + img[hi] * fr[:, None, None]
    lo, hi, fr = _axis_weights(w, out_w, scale_w or out_w / w)
    return rows[:, lo] * (1.0 - fr)[None, :, None] + rows[:, hi] * fr[None, :, None]


def native_resize_dims(h: int, w: int, cfg: PipelineConfig) -> tuple[int, int, int, int]:
    """Return (h', w', h'', w''): pre-crop and patch-aligned dims.

    Uses exact integer arithmetic: floor(sqrt(q)) == isqrt(floor(q)) for q >= 0.
    """
    if h < 1 or w < 1:
        raise ImageError(f"image must be at least 1x1, got {h}x{w}")
    B, P = cfg.pixel_budget, cfg.patch_size
    m = min(h, w)
    if P * P * h * w > B * m * m:
        # min-side clamp: the short side lands exactly on P
        h1, w1 = (h * P) // m, (w * P) // m
    else:
        h1, w1 = math.isqrt((B * h) // w), math.isqrt((B * w) // h)
    rows, cols = h1 // P, w1 // P
    while rows * cols > cfg.max_tokens:
        if rows >= cols:
            rows -= 1
        else:
            cols -= 1
    return h1, w1, rows * P, cols * P


def native_aspect_ratio_resize(img: np.ndarray, cfg: PipelineConfig) -> np.ndarray:
    """Resize to about ``pixel_budget`` pixels keeping aspect ratio, then top-left crop to whole patches."""
    img = check_image(img)
    h, w = img.shape[:2]
    h1, w1, h2, w2 = native_resize_dims(h, w, cfg)
    return bilinear_resize(img, h2, w2, scale_h=h1 / h, scale_w=w1 / w)


def center_crop(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = img.shape[:2]
    top, left = (h - out_h) // 2, (w - out_w) // 2
    return img[top:top + out_h, left:left + out_w]


def aim_eval_resize(img: np.ndarray, cfg: PipelineConfig) -> np.ndarray:
    """Shortest side to floor(side * 8/7) (256 for 224), then a centred square crop."""
    img = check_image(img)
    side = cfg.square_side
    short = (side * 8) // 7
    h, w = img.shape[:2]
    if h <= w:
        nh, nw = short, max(short, (w * short) // h)
    else:
        nh, nw = max(short, (h * short) // w), short
    return center_crop(bilinear_resize(img, nh, nw), side, side)


def aim_train_resize(img: np.ndarray, cfg: PipelineConfig, rng: np.random.Generator,
                     scale=(0.08, 1.0), ratio=(3 / 4, 4 / 3)) -> np.ndarray:
    """Random resized crop to a square of ``square_side`` pixels."""
    img = check_image(img)
    h, w = img.shape[:2]
    side = cfg.square_side
    area = h * w
    log_ratio = (math.log(ratio[0]), math.log(ratio[1]))
    for _ in range(10):
        target = area * rng.uniform(scale[0], scale[1])
        aspect = math.exp(rng.uniform(*log_ratio))
        cw = int(round(math.sqrt(target * aspect)))
        ch = int(round(math.sqrt(target / aspect)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            return bilinear_resize(img[top:top + ch, left:left + cw], side, side)
    # fallback: centre crop with the aspect ratio clamped into range
    in_ratio = w / h
    if in_ratio < ratio[0]:
        cw, ch = w, int(round(w / ratio[0]))
    elif in_ratio > ratio[1]:
        ch, cw = h, int(round(h * ratio[1]))
    else:
        cw, ch = w, h
    return bilinear_resize(center_crop(img, ch, cw), side, side)


def random_native_crop(img: np.ndarray, cfg: PipelineConfig, rng: np.random.Generator) -> np.ndarray:
    """Crop with the input's aspect ratio covering at least ``pixel_budget`` pixels.

    Images smaller than the budget are returned unchanged.
    """
    img = check_image(img)
    h, w = img.shape[:2]
    if h * w < cfg.pixel_budget:
        return img
    k = rng.uniform(math.sqrt(cfg.pixel_budget / (h * w)), 1.0)
    ch = min(h, math.ceil(h * k))
    cw = min(w, math.ceil(w * k))
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    return img[top:top + ch, left:left + cw]


def horizontal_flip(img: np.ndarray, rng: np.random.Generator, p: float = 0.5) -> np.ndarray:
    if p > 0 and rng.uniform() < p:
        return img[:, ::-1]
    return img


def patchify(img: np.ndarray, cfg: PipelineConfig) -> PatchGrid:
    """Split into P x P patches in raster order; each patch flattened row-major, channels interleaved."""
    P = cfg.patch_size
    h, w = img.shape[:2]
    if h % P or w % P or h == 0 or w == 0:
        raise ContractError(f"patchify: image {h}x{w} is not a positive multiple of patch size {P}")
    rows, cols = h // P, w // P
    patches = (np.asarray(img, dtype=np.float64)
               .reshape(rows, P, cols, P, 3)
               .transpose(0, 2, 1, 3, 4)
               .reshape(rows * cols, 3 * P * P))
    return PatchGrid(rows, cols, patches)


def unpatchify(grid: PatchGrid, cfg: PipelineConfig) -> np.ndarray:
    P = cfg.patch_size
    return (grid.patches.reshape(grid.rows, grid.cols, P, P, 3)
            .transpose(0, 2, 1, 3, 4)
            .reshape(grid.rows * P, grid.cols * P, 3))


def pad_to_sequence(grid: PatchGrid, cfg: PipelineConfig) -> TokenSequence:
    n_max = cfg.max_tokens
    n = grid.rows * grid.cols
    if n > n_max:
        raise ContractError(f"pad_to_sequence: {n} patches exceed max_tokens {n_max}")
    tokens = np.zeros((n_max, grid.patches.shape[1]))
    tokens[:n] = grid.patches
    pad_mask = np.zeros(n_max, dtype=bool)
    pad_mask[:n] = True
    coords = np.zeros((n_max, 4), dtype=np.int64)
    k = np.arange(n)
    coords[:n, 0] = k // grid.cols
    coords[:n, 1] = k % grid.cols
    coords[:, 2] = grid.rows
    coords[:, 3] = grid.cols
    return TokenSequence(tokens, pad_mask, coords)


def patch_normalize_target(x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Standardize each patch (last axis) with its own mean and population variance."""
    x = np.asarray(x, dtype=np.float64)
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    # a constant patch has an exactly zero numerator; rounding in the mean must not leak through
    centered[np.broadcast_to(x.max(axis=-1, keepdims=True) == x.min(axis=-1, keepdims=True), x.shape)] = 0.0
    var = (centered ** 2).mean(axis=-1, keepdims=True)
    return centered / np.sqrt(var + eps)


POLICIES = ("naraim", "aim")


@dataclass(frozen=True)
class AugmentConfig:
    random_crop: bool = False
    flip: bool = True


def preprocess(img: np.ndarray, cfg: PipelineConfig, policy: str, train: bool,
               rng: np.random.Generator | None = None,
               augment: AugmentConfig = AugmentConfig()) -> TokenSequence:
    """Full per-image pipeline for a policy, ending in a padded token sequence."""
    img = check_image(img)
    if policy == "naraim":
        if train:
            if augment.random_crop:
                img = random_native_crop(img, cfg, rng)
            if augment.flip:
                img = horizontal_flip(img, rng)
        img = native_aspect_ratio_resize(img, cfg)
    elif policy == "aim":
        if train:
            img = aim_train_resize(img, cfg, rng)
            if augment.flip:
                img = horizontal_flip(img, rng)
        else:
            img = aim_eval_resize(img, cfg)
    else:
        raise ValueError(f"unknown policy {policy!r}; expected one of {POLICIES}")
    return pad_to_sequence(patchify(img, cfg), cfg)
