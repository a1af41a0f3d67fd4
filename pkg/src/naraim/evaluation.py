"""Accuracy, aspect-ratio binned reports, per-patch MSE maps and their file exports."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .imaging import PipelineConfig, TokenSequence, preprocess
from .tensor import ContractError
from .training import make_batch, next_patch_targets, per_patch_squared_error

DEFAULT_EDGES = (0.5, 0.8, 1.25, 2.0)


def eval_sequences(dataset, pipeline: PipelineConfig, policy: str) -> list[TokenSequence]:
    return [preprocess(dataset[i][0], pipeline, policy, train=False) for i in range(len(dataset))]


def predict(model, seqs: Sequence[TokenSequence], batch_size: int = 64) -> np.ndarray:
    """Argmax class per sequence; ``model`` needs a ``logits(batch)`` method."""
    out = []
    for lo in range(0, len(seqs), batch_size):
        batch = make_batch(seqs[lo:lo + batch_size], "finetune")
        out.append(np.asarray(model.logits(batch).data).argmax(axis=-1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def evaluate_accuracy(model, dataset, pipeline: PipelineConfig, policy: str,
                      seqs: Sequence[TokenSequence] | None = None) -> float:
    """Top-1 accuracy under the policy's evaluation preprocessing."""
    if len(dataset) == 0:
        raise ContractError("evaluate_accuracy: empty dataset")
    if seqs is None:
        seqs = eval_sequences(dataset, pipeline, policy)
    labels = np.array([dataset[i][1] for i in range(len(dataset))]) if not hasattr(dataset, "labels") \
        else np.asarray(dataset.labels)
    return float(np.mean(predict(model, seqs) == labels))


@dataclass
class AspectBinReport:
    edges: tuple[float, ...]
    counts: np.ndarray
    correct: np.ndarray

    @property
    def accuracy(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.counts > 0, self.correct / np.maximum(self.counts, 1), np.nan)

    def labels(self) -> list[str]:
        bounds = (0.0,) + tuple(self.edges) + (math.inf,)
        return [f"({_fmt_edge(lo)}, {_fmt_edge(hi)}]" if math.isfinite(hi) else f"({_fmt_edge(lo)}, inf)"
                for lo, hi in zip(bounds[:-1], bounds[1:])]


def _fmt_edge(x: float) -> str:
    return f"{x:g}"


def aspect_bin_index(ratio, edges=DEFAULT_EDGES) -> np.ndarray:
    """Right-closed bins (0, e0], (e0, e1], ..., (e_last, inf) over ratio = width / height."""
    return np.searchsorted(np.asarray(edges), np.asarray(ratio, dtype=np.float64), side="left")


def aspect_bin_accuracy(predictions, labels, dims: Sequence[tuple[int, int]],
                        edges=DEFAULT_EDGES) -> AspectBinReport:
    """``dims`` are the original (height, width) of each image, before any resize."""
    predictions, labels = np.asarray(predictions), np.asarray(labels)
    ratios = np.array([w / h for h, w in dims], dtype=np.float64)
    idx = aspect_bin_index(ratios, edges)
    nb = len(edges) + 1
    counts = np.bincount(idx, minlength=nb)
    correct = np.bincount(idx, weights=(predictions == labels).astype(np.float64), minlength=nb)
    return AspectBinReport(tuple(edges), counts, correct)


@dataclass
class PatchMseMap:
    sums: np.ndarray
    counts: np.ndarray
    overall_mse: float
    total_count: int
    binning: str = "2d"

    @property
    def mean(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.counts > 0, self.sums / np.maximum(self.counts, 1), np.nan)

    def grand_mean(self) -> float:
        return float(self.sums.sum() / self.counts.sum())


def _cells(coords: np.ndarray, policy: str, binning: str, bins: int):
    """Map target-patch coords (K, 4) to flat cell indices and the map shape."""
    h, w, H, W = coords.T
    if policy == "aim":
        Hg, Wg = int(H.max()), int(W.max())
        return h * Wg + w, (Hg, Wg)
    if binning == "2d":
        rb = np.minimum((h * bins) // H, bins - 1)
        cb = np.minimum((w * bins) // W, bins - 1)
        return rb * bins + cb, (bins, bins)
    if binning == "1d":
        k = h * W + w
        return np.minimum((k * bins) // (H * W), bins - 1), (1, bins)
    raise ValueError(f"unknown binning {binning!r}")


def per_patch_mse_map(model, seqs: Sequence[TokenSequence], policy: str, loss_mode: str = "normalized",
                      binning: str = "2d", bins: int = 16, batch_size: int = 32) -> PatchMseMap:
    """Validation next-patch MSE attributed to the predicted (target) patch location.

    Uses the pure causal mask, so every real token after the first is scored.
    """
    sums = counts = shape = None
    total, total_n = 0.0, 0
    for lo in range(0, len(seqs), batch_size):
        batch = make_batch(seqs[lo:lo + batch_size], "pretrain")
        preds = np.asarray(model.predictions(batch).data)
        err = per_patch_squared_error(preds, next_patch_targets(batch.tokens, loss_mode))
        b_idx, pos = np.nonzero(batch.loss_mask)
        target_coords = batch.coords[b_idx, pos + 1]
        cells, shape_b = _cells(target_coords, policy, binning, bins)
        if sums is None:
            shape = shape_b
            sums = np.zeros(shape[0] * shape[1])
            counts = np.zeros(shape[0] * shape[1], dtype=np.int64)
        vals = err[b_idx, pos]
        np.add.at(sums, cells, vals)
        np.add.at(counts, cells, 1)
        total += float(vals.sum())
        total_n += len(vals)
    if sums is None:
        raise ContractError("per_patch_mse_map: no sequences")
    return PatchMseMap(sums.reshape(shape), counts.reshape(shape), total / total_n, total_n, binning)


# -- exports -----------------------------------------------------------------

def _num(x: float) -> str:
    return "nan" if not math.isfinite(x) else f"{x:.9g}"


def bins_csv(report: AspectBinReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["bin", "count", "correct", "accuracy"])
    for label, n, c, a in zip(report.labels(), report.counts, report.correct, report.accuracy):
        writer.writerow([label, int(n), int(c), _num(float(a))])
    return buf.getvalue()


def map_csv(pmap: PatchMseMap) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["row", "col", "mean_mse", "count"])
    mean = pmap.mean
    for r in range(mean.shape[0]):
        for c in range(mean.shape[1]):
            writer.writerow([r, c, _num(float(mean[r, c])), int(pmap.counts[r, c])])
    return buf.getvalue()


def map_pgm(pmap: PatchMseMap) -> bytes:
    """Binary P5 graymap; values min-max scaled to 0-255, empty cells white."""
    mean = pmap.mean
    rows, cols = mean.shape
    valid = np.isfinite(mean)
    pix = np.full(mean.shape, 255, dtype=np.uint8)
    if valid.any():
        lo, hi = mean[valid].min(), mean[valid].max()
        scaled = np.zeros_like(mean) if hi == lo else (mean - lo) / (hi - lo)
        pix[valid] = np.rint(scaled[valid] * 255).astype(np.uint8)
    return f"P5 {cols} {rows} 255\n".encode("ascii") + pix.tobytes()


def read_map_csv(text: str) -> tuple[np.ndarray, np.ndarray]:
    rows = list(csv.DictReader(io.StringIO(text)))
    nr = max(int(r["row"]) for r in rows) + 1
    nc = max(int(r["col"]) for r in rows) + 1
    mean, counts = np.full((nr, nc), np.nan), np.zeros((nr, nc), dtype=np.int64)
    for r in rows:
        mean[int(r["row"]), int(r["col"])] = float(r["mean_mse"])
        counts[int(r["row"]), int(r["col"])] = int(r["count"])
    return mean, counts


@dataclass
class Report:
    accuracy: float | None = None
    bins: AspectBinReport | None = None
    patch_mse: PatchMseMap | None = None
    extra: dict = field(default_factory=dict)


def export_report(report: Report, out_dir: str | Path) -> list[Path]:
    """Write deterministic CSV (and PGM for maps) files; returns the written paths."""
    out = Path(out_dir)
    written = []
    try:
        out.mkdir(parents=True, exist_ok=True)
        if report.accuracy is not None:
            p = out / "accuracy.csv"
            p.write_text(f"metric,value\naccuracy,{_num(report.accuracy)}\n", encoding="utf-8")
            written.append(p)
        if report.bins is not None:
            p = out / "aspect_bins.csv"
            p.write_text(bins_csv(report.bins), encoding="utf-8")
            written.append(p)
        if report.patch_mse is not None:
            p = out / "patch_mse.csv"
            p.write_text(map_csv(report.patch_mse), encoding="utf-8")
            q = out / "patch_mse.pgm"
            q.write_bytes(map_pgm(report.patch_mse))
            written += [p, q]
    except OSError as exc:
        raise OSError(f"cannot write report under {out}: {exc}") from exc
    return written
