"""Dataclass configs for models, training runs, and tasks.

A RunConfig is a plain JSON document; `--set key=value` dot-path overrides
resolve against it, with bare field names accepted when unambiguous.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field


class ConfigError(ValueError):
    """Invalid configuration; carries the offending field name."""

    def __init__(self, field_name: str, message: str):
        self.field_name = field_name
        super().__init__(f"config field '{field_name}': {message}")


REGIMES = ("full", "tokentune", "lora", "tokentune+lora")
DTYPES = ("float32", "float64")


@dataclass
class ModelConfig:
    vocab_size: int = 257
    max_positions: int = 256
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 128
    n_layers: int = 2
    causal: bool = False
    n_classes: int | None = 2

    def __post_init__(self):
        for name in ("vocab_size", "max_positions", "d_model", "n_heads",
                     "d_ff", "n_layers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"model.{name}", "must be >= 1")
        if self.d_model % self.n_heads != 0:
            raise ConfigError("model.n_heads",
                              f"d_model={self.d_model} not divisible by "
                              f"n_heads={self.n_heads}")
        if not self.causal and (self.n_classes is None or self.n_classes < 2):
            raise ConfigError("model.n_classes",
                              "classification model needs n_classes >= 2")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


@dataclass
class TrainConfig:
    regime: str = "full"
    k: int | None = None
    selection_ratio: float | None = None
    batch_size: int = 8
    accumulation_steps: int = 1
    epochs: int = 1
    max_steps: int | None = None
    learning_rate: float = 1e-3
    weight_decay: float = 0.0
    seed: int = 0
    dtype: str = "float32"
    lora_targets: tuple[str, ...] = ("w1", "w2")
    lora_r: int = 8
    lora_alpha: float = 16.0

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ConfigError("train.regime", f"must be one of {REGIMES}")
        if self.dtype not in DTYPES:
            raise ConfigError("train.dtype", f"must be one of {DTYPES}")
        if self.selection_ratio is not None and not 0.0 < self.selection_ratio <= 1.0:
            raise ConfigError("train.selection_ratio", "must be in (0, 1]")
        if self.k is not None and self.k < 1:
            raise ConfigError("train.k", "must be >= 1")
        if self.accumulation_steps < 1:
            raise ConfigError("train.accumulation_steps", "must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("train.batch_size", "must be >= 1")
        if self.lora_r < 1:
            raise ConfigError("train.lora_r", "must be >= 1")
        uses_selection = self.regime in ("tokentune", "tokentune+lora")
        if uses_selection and self.k is None and self.selection_ratio is None:
            raise ConfigError("train.k",
                              "tokentune regimes need k or selection_ratio")


@dataclass
class TaskConfig:
    kind: str = "classification"       # classification | lm
    # classification task
    n_train: int = 5000
    n_test: int = 1000
    seq_len: int = 128
    n_classes: int = 2
    difficulty: float = 0.2
    data_seed: int = 1234
    # lm task
    corpus_path: str | None = None
    stride: int | None = None
    eval_windows: int = 128

    def __post_init__(self):
        if self.kind not in ("classification", "lm"):
            raise ConfigError("task.kind", "must be 'classification' or 'lm'")
        if self.seq_len < 2:
            raise ConfigError("task.seq_len", "must be >= 2")
        if self.kind == "lm" and not self.corpus_path:
            raise ConfigError("task.corpus_path", "lm task needs a corpus file")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    task: TaskConfig = field(default_factory=TaskConfig)
    out_dir: str = "runs/latest"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        known = {"model", "train", "task", "out_dir"}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown config section")
        try:
            return cls(
                model=_build(ModelConfig, doc.get("model", {}), "model"),
                train=_build(TrainConfig, doc.get("train", {}), "train"),
                task=_build(TaskConfig, doc.get("task", {}), "task"),
                out_dir=doc.get("out_dir", "runs/latest"),
            )
        except TypeError as exc:
            raise ConfigError("(root)", str(exc)) from exc


def _build(cls, section: dict, section_name: str):
    if not isinstance(section, dict):
        raise ConfigError(section_name, "must be an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(section) - names
    if unknown:
        raise ConfigError(f"{section_name}.{sorted(unknown)[0]}", "unknown field")
    fixed = dict(section)
    for f in dataclasses.fields(cls):
        if f.name in fixed and isinstance(fixed[f.name], list):
            fixed[f.name] = tuple(fixed[f.name])
    return cls(**fixed)


def load_run_config(path: str) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise ConfigError("(file)", f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError("(file)", f"invalid JSON in {path}: {exc}")
    if not isinstance(doc, dict):
        raise ConfigError("(file)", "top-level config must be an object")
    return RunConfig.from_dict(doc)


def _coerce(text: str):
    lowered = text.lower()
    if lowered in ("true", "false"):
        return lowered == "true"
    if lowered in ("null", "none"):
        return None
    for conv in (int, float):
        try:
            return conv(text)
        except ValueError:
            pass
    if "," in text:
        return [_coerce(part) for part in text.split(",")]
    return text


def apply_overrides(doc: dict, overrides: list[str]) -> dict:
    """Apply `key=value` strings to a config dict (dot paths or bare names)."""
    sections = ("model", "train", "task")
    out = json.loads(json.dumps(doc))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(item, "override must look like key=value")
        key, _, raw = item.partition("=")
        value = _coerce(raw)
        if "." in key:
            section, _, fname = key.partition(".")
            if section not in sections + ("out_dir",):
                raise ConfigError(key, "unknown section")
            out.setdefault(section, {})[fname] = value
        elif key == "out_dir":
            out["out_dir"] = value
        else:
            hits = [s for s in sections
                    if key in {f.name for f in dataclasses.fields(
                        {"model": ModelConfig, "train": TrainConfig,
                         "task": TaskConfig}[s])}]
            if not hits:
                raise ConfigError(key, "unknown field")
            if len(hits) > 1:
                raise ConfigError(key, f"ambiguous; qualify as one of "
                                       f"{[h + '.' + key for h in hits]}")
            out.setdefault(hits[0], {})[key] = value
    return out
