"""Experiment configuration files.

Line-oriented ``key = value`` text with ``[data]``, ``[model]``, ``[train]``
and ``[continue]`` sections.  Every key has a default, so an empty file is a
valid configuration; unknown keys are rejected to catch typos.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
from dataclasses import dataclass
from pathlib import Path

from .model import ModelConfig
from .trainer import TrainConfig

# continued training on the desk preset. 0.1 and 0.01 push the model far past the
# point where noise of the same size costs it most of its BLEU, 1e-4 and 1e-5 barely
# move in 12 checkpoints; two runs per regime also keep a seed under 15 minutes.
DESK_SWEEP = (0.003, 0.001)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataSection:
    preset: str = "desk"
    seed: int = 0
    bpe_vocab: int = 200


@dataclass(frozen=True)
class ModelSection:
    embed_dim: int = 32
    hidden_dim: int = 32
    dropout: float = 0.1
    label_smoothing: float = 0.1
    decoder_init: str = "last"
    init_scale: float = 0.3


@dataclass(frozen=True)
class TrainSection:
    lr: float = 0.003
    lr_reduce_factor: float = 0.7
    batch_size: int = 32
    checkpoint_interval: int = 0     # 0 = half an epoch
    patience: int = 2
    stop_patience: int = 5
    max_checkpoints: int = 30
    clip_gradient: float = 1.0
    seed: int = 1


@dataclass(frozen=True)
class ContinueSection:
    lrs: tuple[float, ...] = DESK_SWEEP
    lr_reduce_factor: float = 0.5
    batch_size: int = 32
    checkpoint_interval: int = 0
    patience: int = 2
    stop_patience: int = 5
    max_checkpoints: int = 12
    clip_gradient: float = 1.0
    reset_optimizer: bool = True
    seed: int = 2


SECTIONS = {"data": DataSection, "model": ModelSection, "train": TrainSection, "continue": ContinueSection}


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataSection = DataSection()
    model: ModelSection = ModelSection()
    train: TrainSection = TrainSection()
    cont: ContinueSection = ContinueSection()

    def section(self, name: str):
        return self.cont if name == "continue" else getattr(self, name)

    def model_config(self, src_vocab: int, tgt_vocab: int) -> ModelConfig:
        m = self.model
        return ModelConfig(src_vocab, tgt_vocab, embed_dim=m.embed_dim, hidden_dim=m.hidden_dim,
                           dropout_rnn=m.dropout, label_smoothing=m.label_smoothing,
                           decoder_init=m.decoder_init, init_scale=m.init_scale)

    def ood_train_config(self) -> TrainConfig:
        t = self.train
        return TrainConfig(lr=t.lr, lr_reduce_factor=t.lr_reduce_factor, batch_size=t.batch_size,
                           checkpoint_interval=t.checkpoint_interval or None, patience=t.patience,
                           stop_patience=t.stop_patience, max_checkpoints=t.max_checkpoints,
                           clip_gradient=t.clip_gradient or None)

    def continue_config(self, lr: float | None = None) -> TrainConfig:
        c = self.cont
        return TrainConfig(lr=c.lrs[0] if lr is None else lr, lr_reduce_factor=c.lr_reduce_factor,
                           batch_size=c.batch_size, checkpoint_interval=c.checkpoint_interval or None,
                           patience=c.patience, stop_patience=c.stop_patience,
                           max_checkpoints=c.max_checkpoints, clip_gradient=c.clip_gradient or None,
                           reset_optimizer=c.reset_optimizer)

    def with_overrides(self, overrides: dict[str, str]) -> "ExperimentConfig":
        """Apply ``section.key -> text`` overrides, e.g. ``{"train.lr": "0.001"}``."""
        parts = {name: dataclasses.asdict(self.section(name)) for name in SECTIONS}
        for dotted, text in overrides.items():
            name, _, key = dotted.partition(".")
            if name not in SECTIONS or key not in parts[name]:
                raise ConfigError(f"unknown configuration key {dotted!r}")
            parts[name][key] = _convert(SECTIONS[name], key, text)
        return _build(parts)

    def dumps(self) -> str:
        lines = []
        for name in SECTIONS:
            lines.append(f"[{name}]")
            for key, value in dataclasses.asdict(self.section(name)).items():
                lines.append(f"{key} = {_format(value)}")
            lines.append("")
        return "\n".join(lines)

    def digest(self) -> str:
        return hashlib.sha256(self.dumps().encode()).hexdigest()[:16]

    def save(self, path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")


def _format(value) -> str:
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _convert(cls, key: str, text: str):
    default = getattr(cls(), key)
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low not in ("true", "false", "yes", "no", "1", "0"):
                raise ValueError(text)
            return low in ("true", "yes", "1")
        if isinstance(default, tuple):
            vals = tuple(float(v) for v in text.replace(",", " ").split())
            if not vals:
                raise ValueError("empty list")
            return vals
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {text!r}") from exc
    return text


def _build(parts: dict[str, dict]) -> ExperimentConfig:
    try:
        secs = {name: SECTIONS[name](**vals) for name, vals in parts.items()}
        cfg = ExperimentConfig(secs["data"], secs["model"], secs["train"], secs["continue"])
        if cfg.model.hidden_dim % 2:
            raise ValueError("hidden_dim must be even")
        cfg.ood_train_config()
        for lr in cfg.cont.lrs:
            cfg.continue_config(lr)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def loads(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed configuration: {exc}") from exc
    parts = {name: dataclasses.asdict(SECTIONS[name]()) for name in SECTIONS}
    for name in parser.sections():
        if name not in SECTIONS:
            raise ConfigError(f"unknown section [{name}]")
        for key, text in parser.items(name):
            if key not in parts[name]:
                raise ConfigError(f"unknown key {key!r} in [{name}]")
            parts[name][key] = _convert(SECTIONS[name], key, text)
    return _build(parts)


def load(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise ConfigError(f"{path}: not UTF-8") from exc
    return loads(text)


def default() -> ExperimentConfig:
    return ExperimentConfig()
