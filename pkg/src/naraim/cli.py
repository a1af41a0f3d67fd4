"""Command-line entry point: ``naraim {pretrain,finetune,eval,synth,preprocess,config}``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as C
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import DatasetError, decode_image, generate_synthetic, load_dataset
from .evaluation import (Report, aspect_bin_accuracy, eval_sequences, export_report,
                         per_patch_mse_map, predict)
from .imaging import (ImageError, PipelineConfig, aim_eval_resize, aim_train_resize,
                      native_aspect_ratio_resize, patchify)
from .model import Model, count_params
from .tensor import ContractError, ParamTree, Tensor
from .training import NonFiniteLoss, run_training

log = logging.getLogger("naraim")


def _save_stream(stream, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    for ckpt in stream:
        save_checkpoint(ckpt, out / f"ckpt_{ckpt.step:07d}.nara")
        save_checkpoint(ckpt, out / "last.nara")
        log.info("checkpoint at step %d", ckpt.step)


def _load_run_config(path: str, phase: str) -> C.RunConfig:
    cfg = C.load_config(path)
    if cfg.train.phase != phase:
        raise C.ConfigError(f"config phase is {cfg.train.phase!r}, expected {phase!r}")
    if not cfg.data:
        raise C.ConfigError("config key 'data' (manifest path) is required")
    return cfg


def cmd_pretrain(args) -> int:
    cfg = _load_run_config(args.config, "pretrain")
    dataset = load_dataset(cfg.data)
    model = Model.create(cfg.backbone, cfg.train.seed)
    log.info("backbone parameters: %d", count_params(cfg.backbone))
    resume = load_checkpoint(args.resume) if args.resume else None
    out = Path(cfg.out)
    _save_stream(run_training(cfg, dataset, model, resume, metrics_path=out / "metrics.tsv"), out)
    return 0


def cmd_finetune(args) -> int:
    cfg = _load_run_config(args.config, "finetune")
    dataset = load_dataset(cfg.data)
    init = load_checkpoint(args.init)
    model = Model.create(cfg.backbone, cfg.train.seed)
    for name, arr in init.tensors.items():
        if name in model.params and not name.startswith("probe."):
            if arr.shape != model.params[name].shape:
                raise ContractError(f"init tensor {name} has dims {list(arr.shape)}, "
                                    f"config expects {model.params[name].dims}")
            model.params[name] = Tensor(arr)
    out = Path(cfg.out)
    _save_stream(run_training(cfg, dataset, model, None, metrics_path=out / "metrics.tsv"), out)
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    cfg = C.from_dict(ckpt.config)
    params = ParamTree({k: Tensor(v) for k, v in ckpt.tensors.items() if not k.startswith("opt.")})
    model = Model(cfg.backbone, params)
    dataset = load_dataset(args.data)
    policy = args.policy or cfg.train.policy
    seqs = eval_sequences(dataset, cfg.pipeline, policy)
    preds = predict(model, seqs)
    labels = dataset.labels
    report = Report(accuracy=float(np.mean(preds == labels)))
    print(f"accuracy {report.accuracy:.4f} ({len(labels)} images)")
    if args.bins:
        report.bins = aspect_bin_accuracy(preds, labels, [dataset.dims(i) for i in range(len(dataset))])
        for label, n, acc in zip(report.bins.labels(), report.bins.counts, report.bins.accuracy):
            print(f"  {label:>12}  n={int(n):5d}  acc={acc:.4f}")
    if args.patch_mse:
        report.patch_mse = per_patch_mse_map(model, seqs, policy, cfg.train.loss_mode, args.binning)
        print(f"validation mse {report.patch_mse.overall_mse:.6f}")
    for path in export_report(report, args.out):
        print(f"wrote {path}")
    return 0


def cmd_synth(args) -> int:
    manifest = generate_synthetic(args.out, args.n, args.classes, (args.ratio_min, args.ratio_max), args.seed)
    print(f"wrote {args.n} images, manifest {manifest}")
    return 0


def cmd_preprocess(args) -> int:
    cfg = PipelineConfig(pixel_budget=args.budget, patch_size=args.patch_size)
    img = decode_image(args.image)
    if args.policy == "naraim":
        out = native_aspect_ratio_resize(img, cfg)
    elif args.policy == "aim-train":
        out = aim_train_resize(img, cfg, np.random.default_rng(args.seed))
    else:
        out = aim_eval_resize(img, cfg)
    grid = patchify(out, cfg)
    print(f"{out.shape[0]}x{out.shape[1]}, {grid.rows * grid.cols} patches")
    return 0


def cmd_config(args) -> int:
    sys.stdout.write(C.render_config(C.preset(args.preset, args.phase)))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="naraim", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("pretrain", help="autoregressive next-patch pre-training")
    s.add_argument("--config", required=True)
    s.add_argument("--resume")
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("finetune", help="frozen-backbone attentive probe training")
    s.add_argument("--config", required=True)
    s.add_argument("--init", required=True)
    s.set_defaults(func=cmd_finetune)

    s = sub.add_parser("eval", help="accuracy, aspect-ratio bins and per-patch MSE")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--bins", action="store_true")
    s.add_argument("--patch-mse", action="store_true")
    s.add_argument("--binning", choices=("2d", "1d"), default="2d")
    s.add_argument("--policy", choices=("naraim", "aim"))
    s.add_argument("--out", default="report")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("synth", help="write the synthetic circle/ellipse benchmark")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--classes", type=int, default=2)
    s.add_argument("--ratio-min", type=float, default=0.25)
    s.add_argument("--ratio-max", type=float, default=4.0)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("preprocess", help="print output dims and patch count for one image")
    s.add_argument("--image", required=True)
    s.add_argument("--policy", choices=("naraim", "aim-train", "aim-eval"), default="naraim")
    s.add_argument("--budget", type=int, default=224 * 224)
    s.add_argument("--patch-size", type=int, default=14)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("config", help="print a preset as a config file")
    s.add_argument("--preset", choices=("desk", "paper"), default="desk")
    s.add_argument("--phase", choices=("pretrain", "finetune"), default="pretrain")
    s.set_defaults(func=cmd_config)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except C.ConfigError as exc:
        print(f"naraim: config error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"naraim: {exc}", file=sys.stderr)
        return 1
    except (CheckpointError, DatasetError, ImageError, ContractError, NonFiniteLoss, OSError) as exc:
        print(f"naraim: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
