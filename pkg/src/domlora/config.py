"""Run settings: INI config files with typed, all-at-once validation.

A config is a flat key/value file with sections.  Unknown sections and keys
are rejected (they are almost always typos) and every problem is reported in
one pass with the line it came from, so a bad file never needs more than one
round trip to fix.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path

from .model import ModelConfig, ProjKind, parse_kind
from .tasks import TaskSpec
from .trainer import SCHEDULE_NAME, TrainConfig

PLACEMENTS = ("all", "layer-subset", "kind-subset", "dominant-only", "full-dominant")
SWEEP_KIND_CHOICES = ("down", "up", "gate", "ffn-all", "attn-all")


class ConfigError(Exception):
    """Carries every collected config problem."""

    def __init__(self, errors: list[str]):
        self.errors = errors
        super().__init__("\n".join(errors))


@dataclass
class Settings:
    """Fully resolved run settings; every command consumes a subset."""

    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    task: TaskSpec = field(default_factory=TaskSpec)
    train_size: int = 256
    eval_size: int = 64
    probe_samples: int = 32
    rank: int = 64
    alpha: float | None = None          # defaults to 2 * rank
    steps: int = 200
    batch_size: int = 8
    peak_lr: float = 2e-2
    warmup_ratio: float = 0.03
    weight_decay: float = 0.0
    optimizer: str = "adamw"
    placement: str = "dominant-only"
    layers: tuple[int, ...] = ()
    kinds: tuple[str, ...] = ()
    restrict_kind: str = "down"         # "none" disables the restriction
    pretrain_steps: int = 150
    pretrain_batch_size: int = 8
    pretrain_peak_lr: float = 1e-2
    page_trials: int = 10000
    sweep_ranks: tuple[int, ...] = (16, 32, 64)
    sweep_kinds: tuple[str, ...] = SWEEP_KIND_CHOICES
    sweep_layers: tuple[str, ...] = ("mid", "last")
    checkpoint: str | None = None
    probe_set: str | None = None

    @property
    def lora_alpha(self) -> float:
        return 2.0 * self.rank if self.alpha is None else self.alpha

    @property
    def lora_scale(self) -> float:
        return self.lora_alpha / self.rank

    def restrict(self) -> ProjKind | None:
        return None if self.restrict_kind == "none" else parse_kind(self.restrict_kind)

    def train_config(self) -> TrainConfig:
        return TrainConfig(steps=self.steps, batch_size=self.batch_size,
                           peak_lr=self.peak_lr, warmup_ratio=self.warmup_ratio,
                           schedule=SCHEDULE_NAME, seed=self.seed,
                           weight_decay=self.weight_decay, optimizer=self.optimizer)

    def pretrain_config(self) -> TrainConfig:
        return TrainConfig(steps=self.pretrain_steps, batch_size=self.pretrain_batch_size,
                           peak_lr=self.pretrain_peak_lr, warmup_ratio=self.warmup_ratio,
                           schedule=SCHEDULE_NAME, seed=self.seed,
                           weight_decay=self.weight_decay, optimizer=self.optimizer)


def _parse_int(v: str) -> int:
    return int(v)


def _parse_float(v: str) -> float:
    return float(v)


def _parse_str(v: str) -> str:
    return v.strip()


def _parse_int_list(v: str) -> tuple[int, ...]:
    return tuple(int(p) for p in v.replace(",", " ").split())


def _parse_str_list(v: str) -> tuple[str, ...]:
    return tuple(p.strip().lower() for p in v.replace(",", " ").split())


def _choice(options):
    def parse(v: str) -> str:
        v = v.strip().lower()
        if v not in options:
            raise ValueError(f"must be one of {', '.join(options)}")
        return v
    return parse


def _choice_list(options):
    def parse(v: str) -> tuple[str, ...]:
        items = _parse_str_list(v)
        for item in items:
            if item not in options:
                raise ValueError(f"{item!r} not one of {', '.join(options)}")
        return items
    return parse


# section -> key -> (settings attribute, parser)
_SCHEMA: dict[str, dict[str, tuple[str, object]]] = {
    "run": {"seed": ("seed", _parse_int)},
    "model": {
        "n_layers": ("model.n_layers", _parse_int),
        "d_model": ("model.d_model", _parse_int),
        "n_heads": ("model.n_heads", _parse_int),
        "d_ff": ("model.d_ff", _parse_int),
        "vocab_size": ("model.vocab_size", _parse_int),
        "max_seq_len": ("model.max_seq_len", _parse_int),
    },
    "task": {
        "name": ("task.name", _choice(("copy", "modsum"))),
        "copy_prompt_len": ("task.copy_prompt_len", _parse_int),
        "modsum_terms": ("task.modsum_terms", _parse_int),
        "modsum_modulus": ("task.modsum_modulus", _parse_int),
        "train_size": ("train_size", _parse_int),
        "eval_size": ("eval_size", _parse_int),
    },
    "probe": {"n_samples": ("probe_samples", _parse_int)},
    "lora": {"rank": ("rank", _parse_int), "alpha": ("alpha", _parse_float)},
    "train": {
        "steps": ("steps", _parse_int),
        "batch_size": ("batch_size", _parse_int),
        "peak_lr": ("peak_lr", _parse_float),
        "warmup_ratio": ("warmup_ratio", _parse_float),
        "weight_decay": ("weight_decay", _parse_float),
        "optimizer": ("optimizer", _choice(("adamw", "sgd"))),
        "placement": ("placement", _choice(PLACEMENTS)),
        "layers": ("layers", _parse_int_list),
        "kinds": ("kinds", _parse_str_list),
        "restrict_kind": ("restrict_kind",
                          _choice(("q", "k", "v", "o", "up", "gate", "down", "none"))),
    },
    "pretrain": {
        "steps": ("pretrain_steps", _parse_int),
        "batch_size": ("pretrain_batch_size", _parse_int),
        "peak_lr": ("pretrain_peak_lr", _parse_float),
    },
    "page": {"trials": ("page_trials", _parse_int)},
    "sweep": {
        "ranks": ("sweep_ranks", _parse_int_list),
        "kinds": ("sweep_kinds", _choice_list(SWEEP_KIND_CHOICES)),
        "layers": ("sweep_layers", _parse_str_list),
    },
    "files": {
        "checkpoint": ("checkpoint", _parse_str),
        "probe_set": ("probe_set", _parse_str),
    },
}


def _line_of(text: str, needle: str) -> int:
    for i, line in enumerate(text.splitlines(), start=1):
        if line.strip().lower().startswith(needle.lower()):
            return i
    return 0


def load_settings(path: str | Path | None) -> Settings:
    """Read an INI file into Settings; absent path means all defaults.

    Raises ConfigError listing every unknown section/key and bad value at
    once, each message prefixed with file and line.
    """
    if path is None:
        return Settings()
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError([f"{path}: cannot read config: {exc}"]) from exc

    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text, source=str(path))
    except configparser.Error as exc:
        raise ConfigError([f"{path}: {exc}"]) from exc

    errors: list[str] = []
    values: dict[str, object] = {}
    for section in parser.sections():
        if section not in _SCHEMA:
            line = _line_of(text, f"[{section}]")
            errors.append(f"{path}:{line}: unknown section [{section}]")
            continue
        for key, raw in parser.items(section):
            if key not in _SCHEMA[section]:
                line = _line_of(text, key)
                errors.append(f"{path}:{line}: unknown key {key!r} in [{section}]")
                continue
            attr, parse = _SCHEMA[section][key]
            try:
                values[attr] = parse(raw)
            except ValueError as exc:
                line = _line_of(text, key)
                errors.append(f"{path}:{line}: bad value for [{section}] {key}: {exc}")

    if errors:
        raise ConfigError(errors)
    return _build_settings(values, errors, str(path))


def _build_settings(values: dict[str, object], errors: list[str],
                    source: str) -> Settings:
    model_kwargs = {k.split(".", 1)[1]: v for k, v in values.items()
                    if k.startswith("model.")}
    task_kwargs = {k.split(".", 1)[1]: v for k, v in values.items()
                   if k.startswith("task.")}
    flat = {k: v for k, v in values.items() if "." not in k}
    try:
        model = ModelConfig(**model_kwargs)
    except ValueError as exc:
        errors.append(f"{source}: [model]: {exc}")
        model = ModelConfig()
    try:
        task = TaskSpec(**task_kwargs)
    except ValueError as exc:
        errors.append(f"{source}: [task]: {exc}")
        task = TaskSpec()
    settings = Settings(model=model, task=task, **flat)
    try:
        settings.train_config()
        settings.pretrain_config()
    except ValueError as exc:
        errors.append(f"{source}: [train]: {exc}")
    if settings.task.name == "modsum" and settings.task.modsum_modulus + 1 > model.vocab_size:
        errors.append(f"{source}: [task]: modsum_modulus {settings.task.modsum_modulus} "
                      f"needs vocab_size > {settings.task.modsum_modulus}")
    if errors:
        raise ConfigError(errors)
    return settings


def settings_to_dict(s: Settings) -> dict:
    """Flat, JSON-friendly snapshot; inverse of settings_from_dict."""
    return {
        "seed": s.seed,
        "model": s.model.to_dict(),
        "task": {"name": s.task.name, "copy_prompt_len": s.task.copy_prompt_len,
                 "modsum_terms": s.task.modsum_terms,
                 "modsum_modulus": s.task.modsum_modulus},
        "train_size": s.train_size, "eval_size": s.eval_size,
        "probe_samples": s.probe_samples,
        "rank": s.rank, "alpha": s.alpha,
        "steps": s.steps, "batch_size": s.batch_size, "peak_lr": s.peak_lr,
        "warmup_ratio": s.warmup_ratio, "weight_decay": s.weight_decay,
        "optimizer": s.optimizer, "placement": s.placement,
        "layers": list(s.layers), "kinds": list(s.kinds),
        "restrict_kind": s.restrict_kind,
        "pretrain_steps": s.pretrain_steps,
        "pretrain_batch_size": s.pretrain_batch_size,
        "pretrain_peak_lr": s.pretrain_peak_lr,
        "page_trials": s.page_trials,
        "sweep_ranks": list(s.sweep_ranks), "sweep_kinds": list(s.sweep_kinds),
        "sweep_layers": list(s.sweep_layers),
        "checkpoint": s.checkpoint, "probe_set": s.probe_set,
    }


def settings_from_dict(d: dict) -> Settings:
    return Settings(
        seed=int(d["seed"]),
        model=ModelConfig.from_dict(d["model"]),
        task=TaskSpec(**d["task"]),
        train_size=int(d["train_size"]), eval_size=int(d["eval_size"]),
        probe_samples=int(d["probe_samples"]),
        rank=int(d["rank"]),
        alpha=None if d["alpha"] is None else float(d["alpha"]),
        steps=int(d["steps"]), batch_size=int(d["batch_size"]),
        peak_lr=float(d["peak_lr"]), warmup_ratio=float(d["warmup_ratio"]),
        weight_decay=float(d["weight_decay"]), optimizer=d["optimizer"],
        placement=d["placement"], layers=tuple(d["layers"]),
        kinds=tuple(d["kinds"]), restrict_kind=d["restrict_kind"],
        pretrain_steps=int(d["pretrain_steps"]),
        pretrain_batch_size=int(d["pretrain_batch_size"]),
        pretrain_peak_lr=float(d["pretrain_peak_lr"]),
        page_trials=int(d["page_trials"]),
        sweep_ranks=tuple(d["sweep_ranks"]), sweep_kinds=tuple(d["sweep_kinds"]),
        sweep_layers=tuple(d["sweep_layers"]),
        checkpoint=d["checkpoint"], probe_set=d["probe_set"],
    )
