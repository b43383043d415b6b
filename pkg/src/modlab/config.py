"""
Flat key=value config files (UTF-8, ``#`` comments) and round-trip codecs.

Keys are namespaced: ``model.*`` builds a ModelConfig, ``train.*`` a
TrainConfig, ``dataset.*`` / ``eval_dataset.*`` DatasetSpecs. Unknown keys
are rejected so typos fail loudly. The same ``model.*`` text form is what
checkpoints embed.
"""

from __future__ import annotations

from .data import DatasetSpec
from .model import ModelConfig
from .tensor import ContractError
from .train import TrainConfig


def parse_kv_text(text: str) -> dict[str, str]:
    entries: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ContractError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        entries[key.strip()] = value.strip()
    return entries


def load_kv_file(path: str) -> dict[str, str]:
    with open(path, "r", encoding="utf-8") as f:
        return parse_kv_text(f.read())


def _pattern(text: str) -> tuple[int, ...]:
    text = text.strip()
    if not text:
        return ()
    return tuple(int(part) for part in text.split(","))


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(part) for part in text.split(","))


_MODEL_FIELDS = {
    "image_size": int,
    "patch_size": int,
    "channels": int,
    "depth": int,
    "dim": int,
    "heads": int,
    "mlp_ratio": float,
    "num_classes": int,
    "mod_pattern": _pattern,
    "capacity": float,
    "router": str,
    "cls_policy": str,
}

_TRAIN_FIELDS = {
    "optimizer": str,
    "base_lr": float,
    "warmup_epochs": int,
    "total_epochs": int,
    "batch_size": int,
    "weight_decay": float,
    "momentum": float,
    "beta1": float,
    "beta2": float,
    "eps": float,
    "grad_clip": float,
    "seed": int,
    "eval_every": int,
    "stop_at_train_acc": float,
}

_DATASET_FIELDS = {
    "kind": str,
    "path": str,
    "num_classes": int,
    "samples": int,
    "image_size": int,
    "seed": int,
    "noise_std": float,
    "mean": _floats,
    "std": _floats,
}


def _collect(entries: dict[str, str], prefix: str, fields: dict) -> dict:
    out = {}
    for key, value in entries.items():
        if not key.startswith(prefix):
            continue
        name = key[len(prefix):]
        if name not in fields:
            raise ContractError(f"unknown config key {key!r}")
        out[name] = fields[name](value)
    return out


def model_config_from_kv(entries: dict[str, str]) -> ModelConfig:
    return ModelConfig(**_collect(entries, "model.", _MODEL_FIELDS))


def dataset_spec_from_kv(entries: dict[str, str], prefix: str = "dataset.") -> DatasetSpec | None:
    kwargs = _collect(entries, prefix, _DATASET_FIELDS)
    return DatasetSpec(**kwargs) if kwargs else None


def train_config_from_kv(entries: dict[str, str]) -> TrainConfig:
    kwargs = _collect(entries, "train.", _TRAIN_FIELDS)
    dataset = dataset_spec_from_kv(entries, "dataset.")
    if dataset is not None:
        kwargs["dataset"] = dataset
    eval_dataset = dataset_spec_from_kv(entries, "eval_dataset.")
    if eval_dataset is not None:
        kwargs["eval_dataset"] = eval_dataset
    return TrainConfig(**kwargs)


def model_config_to_text(config: ModelConfig) -> str:
    """Canonical model.* text; embedded in checkpoints, parseable by this module."""
    lines = []
    for name in sorted(_MODEL_FIELDS):
        value = getattr(config, name)
        if name == "mod_pattern":
            value = ",".join(str(i) for i in value)
        lines.append(f"model.{name}={value}")
    return "\n".join(lines) + "\n"


def model_config_from_text(text: str) -> ModelConfig:
    return model_config_from_kv(parse_kv_text(text))
