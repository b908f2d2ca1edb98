"""Pipeline configuration: INI-style text with environment overrides.

Keys are globally unique across sections, so the override variable for any
key is simply DIFFID_<KEY upper-cased>. Validation reports every violation
at once, never just the first.
"""

import configparser
import io
import os
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigValidationError

ENV_PREFIX = "DIFFID_"


@dataclass(frozen=True)
class PipelineConfig:
    # [pipeline]
    sources: tuple = ()
    out_dir: str = "diffid-out"
    seed: int = 0
    workers: int = 0  # 0 = auto (min(4, identity count))
    # [prompts]
    captioner: str = "stub"
    iir_candidates: str = ""
    # [generation]
    backend: str = "toy"
    reference_set_size: int = 200
    samples_per_identity: int = 200
    timesteps: int = 50
    schedule_kind: str = "cosine"
    sample_steps: int = 10
    image_channels: int = 3
    image_height: int = 32
    image_width: int = 16
    cond_dim: int = 16
    finetune_steps: int = 1000
    finetune_lr: float = 5.0
    finetune_batch: int = 4
    prior_lambda: float = 1.0
    # [filter]
    filter_kind: str = "reid_ctf"
    tau: float | None = None
    calibrate_keep_fraction: float = 0.75
    class_text: str = "a photo of a person"
    # [assembly]
    crop_height: int = 256
    crop_width: int = 128
    # [pretrain]
    pretrain_epochs: int = 10
    pretrain_lr: float = 4e-3
    pretrain_weight_decay: float = 0.05
    pretrain_warmup_epochs: int = 2
    pretrain_batch: int = 64
    pretrain_hidden: int = 64
    pretrain_pool: int = 2
    augmentations: tuple = ()

    @property
    def image_shape(self) -> tuple:
        return (self.image_channels, self.image_height, self.image_width)

    @property
    def crop_size(self) -> tuple:
        return (self.crop_height, self.crop_width)


def _parse_list(raw: str) -> tuple:
    return tuple(p for p in raw.replace(",", " ").split() if p)


def _parse_optional_float(raw: str):
    return None if raw.strip() == "" else float(raw)


_SECTIONS = {
    "pipeline": ("sources", "out_dir", "seed", "workers"),
    "prompts": ("captioner", "iir_candidates"),
    "generation": ("backend", "reference_set_size", "samples_per_identity", "timesteps",
                   "schedule_kind", "sample_steps", "image_channels", "image_height",
                   "image_width", "cond_dim", "finetune_steps", "finetune_lr",
                   "finetune_batch", "prior_lambda"),
    "filter": ("filter_kind", "tau", "calibrate_keep_fraction", "class_text"),
    "assembly": ("crop_height", "crop_width"),
    "pretrain": ("pretrain_epochs", "pretrain_lr", "pretrain_weight_decay",
                 "pretrain_warmup_epochs", "pretrain_batch", "pretrain_hidden",
                 "pretrain_pool", "augmentations"),
}
_KEY_SECTION = {k: s for s, keys in _SECTIONS.items() for k in keys}

_PARSERS = {
    "sources": _parse_list,
    "augmentations": _parse_list,
    "tau": _parse_optional_float,
}


def _parser_for(field):
    # remaining fields are annotated plain int/float/str, all callable
    return _PARSERS.get(field.name, field.type)


def _check(cfg: PipelineConfig, base_dir) -> list:
    bad = []

    def positive(name):
        if getattr(cfg, name) < 1:
            bad.append(f"{name}: must be >= 1, got {getattr(cfg, name)}")

    for name in ("reference_set_size", "samples_per_identity", "timesteps", "sample_steps",
                 "image_channels", "image_height", "image_width", "cond_dim",
                 "finetune_steps", "finetune_batch", "crop_height", "crop_width",
                 "pretrain_epochs", "pretrain_batch", "pretrain_hidden", "pretrain_pool"):
        positive(name)
    if cfg.workers < 0:
        bad.append(f"workers: must be >= 0, got {cfg.workers}")
    for name in ("finetune_lr", "pretrain_lr"):
        if getattr(cfg, name) <= 0:
            bad.append(f"{name}: must be positive, got {getattr(cfg, name)}")
    if cfg.prior_lambda < 0:
        bad.append(f"prior_lambda: must be >= 0, got {cfg.prior_lambda}")
    if cfg.pretrain_weight_decay < 0:
        bad.append(f"pretrain_weight_decay: must be >= 0, got {cfg.pretrain_weight_decay}")
    if not 0 <= cfg.pretrain_warmup_epochs < cfg.pretrain_epochs:
        bad.append("pretrain_warmup_epochs: need 0 <= warmup < pretrain_epochs")
    if cfg.schedule_kind not in ("linear", "cosine"):
        bad.append(f"schedule_kind: must be linear or cosine, got {cfg.schedule_kind!r}")
    if cfg.filter_kind not in ("clip", "cctf", "reid_ctf"):
        bad.append(f"filter_kind: must be clip, cctf or reid_ctf, got {cfg.filter_kind!r}")
    if cfg.tau is not None and not 0.0 <= cfg.tau <= 1.0:
        bad.append(f"tau: must lie in [0, 1], got {cfg.tau}")
    if not 0.0 < cfg.calibrate_keep_fraction <= 1.0:
        bad.append(f"calibrate_keep_fraction: must lie in (0, 1], got "
                   f"{cfg.calibrate_keep_fraction}")
    if not cfg.backend:
        bad.append("backend: must be non-empty")
    if not cfg.captioner:
        bad.append("captioner: must be non-empty")
    unknown_aug = [a for a in cfg.augmentations if a not in ("mixup", "cutmix", "random_erasing")]
    if unknown_aug:
        bad.append(f"augmentations: unknown entries {unknown_aug}")
    for src in cfg.sources:
        if not (Path(base_dir) / src).exists():
            bad.append(f"sources: manifest {src!r} does not exist")
    if cfg.iir_candidates and not (Path(base_dir) / cfg.iir_candidates).exists():
        bad.append(f"iir_candidates: file {cfg.iir_candidates!r} does not exist")
    return bad


def validate_config(text: str, base_dir=".", env=None) -> PipelineConfig:
    """Parse, apply DIFFID_* overrides, default, and validate.

    Raises ConfigValidationError carrying every violation found.
    """
    env = os.environ if env is None else env
    parser = configparser.ConfigParser()
    violations = []
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigValidationError([f"unparseable config: {exc}"]) from exc

    raw = {}
    for section in parser.sections():
        if section not in _SECTIONS:
            violations.append(f"unknown section [{section}]")
            continue
        for key, value in parser.items(section):
            if key not in _SECTIONS[section]:
                violations.append(f"unknown key {key!r} in section [{section}]")
            else:
                raw[key] = value
    for field in fields(PipelineConfig):
        override = env.get(ENV_PREFIX + field.name.upper())
        if override is not None:
            raw[field.name] = override

    values = {}
    for field in fields(PipelineConfig):
        if field.name not in raw:
            continue
        try:
            values[field.name] = _parser_for(field)(raw[field.name])
        except (TypeError, ValueError):
            violations.append(f"{field.name}: cannot parse {raw[field.name]!r}")
    cfg = PipelineConfig(**values)
    violations.extend(_check(cfg, base_dir))
    if violations:
        raise ConfigValidationError(violations)
    return cfg


def validate_config_file(path, env=None) -> PipelineConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigValidationError([f"cannot read {path}: {exc}"]) from exc
    return validate_config(text, base_dir=path.parent, env=env)


def serialize_config(cfg: PipelineConfig) -> str:
    """INI text that validates back to an equal config."""
    parser = configparser.ConfigParser()
    for section, keys in _SECTIONS.items():
        parser[section] = {}
        for key in keys:
            value = getattr(cfg, key)
            if isinstance(value, tuple):
                value = " ".join(value)
            elif value is None:
                value = ""
            parser[section][key] = str(value)
    out = io.StringIO()
    parser.write(out)
    return out.getvalue()
