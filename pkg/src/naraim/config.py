"""Flat ``key = value`` configuration with desk and paper presets."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .embeddings import ConfigError
from .imaging import PipelineConfig

__all__ = ["ConfigError", "BackboneConfig", "TrainConfig", "RunConfig", "preset", "parse_config",
           "render_config", "load_config", "as_dict", "from_dict"]


@dataclass(frozen=True)
class BackboneConfig:
    layers: int = 4
    heads: int = 4
    d_model: int = 64
    d_hidden: int = 256
    patch_size: int = 8
    pos_embed: str = "absolute"       # absolute | fractional
    frac_activation: str = "none"     # none | gelu
    head_hidden: int = 256            # pre-training head width
    probe_hidden: int = 256           # 0 gives an affine probe readout
    num_classes: int = 2

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by heads {self.heads}")
        if self.pos_embed not in ("absolute", "fractional"):
            raise ConfigError(f"pos_embed must be absolute or fractional, got {self.pos_embed!r}")
        if self.pos_embed == "absolute" and self.d_model % 4:
            raise ConfigError(f"absolute embeddings need d_model divisible by 4, got {self.d_model}")

    @property
    def patch_dim(self) -> int:
        return 3 * self.patch_size ** 2


@dataclass(frozen=True)
class TrainConfig:
    phase: str = "pretrain"
    peak_lr: float = 1e-3
    min_lr: float = 0.0
    weight_decay: float = 0.01
    batch_size: int = 512
    grad_clip: float = 1.0
    warmup_iters: int = 5000
    cooldown_iters: int = 10000
    total_iters: int = 500000
    decay_rate: float = 0.1
    betas: tuple[float, float] = (0.9, 0.98)
    seed: int = 0
    loss_mode: str = "normalized"     # normalized | raw
    policy: str = "naraim"            # naraim | aim
    random_crop: bool = False
    flip: bool = True
    finetune_augment: bool = True
    checkpoint_every: int = 1000
    log_every: int = 10

    def __post_init__(self):
        if self.phase not in ("pretrain", "finetune"):
            raise ConfigError(f"phase must be pretrain or finetune, got {self.phase!r}")
        if self.loss_mode not in ("normalized", "raw"):
            raise ConfigError(f"loss_mode must be normalized or raw, got {self.loss_mode!r}")
        if self.policy not in ("naraim", "aim"):
            raise ConfigError(f"policy must be naraim or aim, got {self.policy!r}")
        if self.warmup_iters + (self.cooldown_iters if self.phase == "pretrain" else 0) > self.total_iters:
            raise ConfigError("warmup + cooldown exceed total_iters")


PAPER_PRETRAIN = TrainConfig()
PAPER_FINETUNE = TrainConfig(phase="finetune", betas=(0.9, 0.999), peak_lr=1e-3, min_lr=1e-5,
                             weight_decay=0.1, grad_clip=3.0, warmup_iters=500, cooldown_iters=0,
                             total_iters=50000)
DESK_PRETRAIN = replace(PAPER_PRETRAIN, batch_size=16, warmup_iters=50, cooldown_iters=50,
                        total_iters=500, checkpoint_every=1000)
# fixed evaluation views let the frozen backbone run once per image
DESK_FINETUNE = replace(PAPER_FINETUNE, batch_size=16, peak_lr=1e-2, warmup_iters=20, total_iters=300,
                        finetune_augment=False, checkpoint_every=1000)

PAPER_BACKBONE = BackboneConfig(layers=12, heads=12, d_model=768, d_hidden=3072, patch_size=14,
                                head_hidden=3072, probe_hidden=3072, num_classes=1000)
DESK_BACKBONE = BackboneConfig()

PAPER_PIPELINE = PipelineConfig(pixel_budget=224 * 224, patch_size=14)
DESK_PIPELINE = PipelineConfig(pixel_budget=64 * 64, patch_size=8)


@dataclass(frozen=True)
class RunConfig:
    preset: str = "desk"
    data: str = ""
    out: str = "run"
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    pipeline: PipelineConfig = field(default_factory=lambda: DESK_PIPELINE)
    train: TrainConfig = field(default_factory=lambda: DESK_PRETRAIN)

    def __post_init__(self):
        if self.backbone.patch_size != self.pipeline.patch_size:
            raise ConfigError("backbone and pipeline patch_size differ")


def preset(name: str = "desk", phase: str = "pretrain") -> RunConfig:
    if name == "desk":
        train = DESK_PRETRAIN if phase == "pretrain" else DESK_FINETUNE
        return RunConfig("desk", backbone=DESK_BACKBONE, pipeline=DESK_PIPELINE, train=train)
    if name == "paper":
        train = PAPER_PRETRAIN if phase == "pretrain" else PAPER_FINETUNE
        return RunConfig("paper", backbone=PAPER_BACKBONE, pipeline=PAPER_PIPELINE, train=train)
    raise ConfigError(f"unknown preset {name!r}")


_RUN_KEYS = ("data", "out")
_SECTIONS = ("backbone", "train")


def _all_keys() -> dict[str, str]:
    keys = {k: "run" for k in _RUN_KEYS}
    for sec, cls in (("backbone", BackboneConfig), ("train", TrainConfig)):
        for f in fields(cls):
            keys[f.name] = sec
    keys["pixel_budget"] = "pipeline"
    keys["patch_size"] = "shared"
    return keys


def _coerce(raw: str, current, key: str):
    try:
        if isinstance(current, bool):
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
        if isinstance(current, tuple):
            return tuple(float(x) for x in raw.split(","))
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw


def parse_config(text: str) -> RunConfig:
    pairs: list[tuple[str, str]] = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        pairs.append((key, value))
    settings = dict(pairs)
    cfg = preset(settings.pop("preset", "desk"), settings.get("phase", "pretrain"))
    known = _all_keys()
    run_kw, sec_kw = {}, {"backbone": {}, "train": {}, "pipeline": {}}
    for key, value in settings.items():
        if key not in known:
            raise ConfigError(f"unknown config key: {key}")
        where = known[key]
        if where == "run":
            run_kw[key] = value
        elif where == "shared":
            p = _coerce(value, 0, key)
            sec_kw["backbone"][key] = p
            sec_kw["pipeline"][key] = p
        else:
            current = getattr(getattr(cfg, where), key)
            sec_kw[where][key] = _coerce(value, current, key)
    try:
        return replace(cfg, **run_kw,
                       backbone=replace(cfg.backbone, **sec_kw["backbone"]),
                       pipeline=replace(cfg.pipeline, **sec_kw["pipeline"]),
                       train=replace(cfg.train, **sec_kw["train"]))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ", ".join(repr(v) for v in value)
    return str(value)


def render_config(cfg: RunConfig) -> str:
    lines = [f"preset = {cfg.preset}"]
    lines += [f"{k} = {getattr(cfg, k)}" for k in _RUN_KEYS]
    lines.append(f"pixel_budget = {cfg.pipeline.pixel_budget}")
    for sec in _SECTIONS:
        obj = getattr(cfg, sec)
        for f in fields(obj):
            lines.append(f"{f.name} = {_fmt(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"


def load_config(path: str | Path) -> RunConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))


def as_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


def from_dict(d: dict) -> RunConfig:
    train = dict(d["train"])
    train["betas"] = tuple(train["betas"])
    return RunConfig(preset=d["preset"], data=d["data"], out=d["out"],
                     backbone=BackboneConfig(**d["backbone"]),
                     pipeline=PipelineConfig(**d["pipeline"]),
                     train=TrainConfig(**train))
