"""Flat ``key = value`` experiment configs with [model], [data], [train] sections."""

from __future__ import annotations

import configparser
from dataclasses import dataclass, fields
from pathlib import Path

from .data import SPECIAL_TOKENS, TRANSFORMS, LanguageSpec
from .model import ModelConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


MODEL_KEYS = {
    "vocab_payload": int, "embed_dim": int, "hidden_dim": int, "layers": int,
    "heads": int, "max_seq_len": int, "dropout": float,
}
DATA_KEYS = {"languages": str, "payload_len_min": int, "payload_len_max": int, "seed": int}
TRAIN_KEYS = {f.name: f.type for f in fields(TrainConfig)}
_TRAIN_TYPES = {"int": int, "float": float, "str": str, "bool": bool}

DEFAULT_CONFIG = """\
[model]
vocab_payload = 40
embed_dim = 64
hidden_dim = 128
layers = 2
heads = 4
max_seq_len = 8
dropout = 0.0

[data]
# name:train:dev:test:transform:param
languages = l1:200:100:100:permutation:11, l2:400:100:100:reverse-permutation:12, l3:4000:100:100:permutation:13, l4:8000:100:100:shift:7
payload_len_min = 3
payload_len_max = 6
seed = 1

[train]
mode = baseline
epochs = 40
steps_per_epoch = 100
batch_size = 32
alpha = 2.0
sigma = 2.0
tau = 1.0
label_smoothing = 0.1
smoothed_dev_loss = true
sentence_prob = arith
lr_scale = 1.0
warmup_steps = 200
adam_beta1 = 0.9
adam_beta2 = 0.98
adam_eps = 1e-9
seed = 1
"""


@dataclass
class ExperimentConfig:
    payload_vocab_size: int
    languages: list[LanguageSpec]
    data_seed: int
    model: ModelConfig
    train: TrainConfig
    text: str

    def with_train(self, **overrides) -> "ExperimentConfig":
        from dataclasses import replace

        return replace(self, train=replace(self.train, **overrides))


def _parse_bool(value: str) -> bool:
    v = value.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {value!r}")


def _convert(section: str, key: str, value: str, kind):
    if isinstance(kind, str):
        kind = _TRAIN_TYPES[kind]
    try:
        if kind is bool:
            return _parse_bool(value)
        return kind(value)
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse {value!r}") from None


def parse_languages(text: str, length_range: tuple[int, int]) -> list[LanguageSpec]:
    specs = []
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        parts = item.split(":")
        if len(parts) != 6:
            raise ConfigError(f"language entry {item!r} must be name:train:dev:test:transform:param")
        name, tr, dv, ts, kind, param = parts
        if kind not in TRANSFORMS:
            raise ConfigError(f"language {name}: unknown transform {kind!r}")
        try:
            sizes = int(tr), int(dv), int(ts)
            parsed = param if param == "identity" else int(param)
        except ValueError:
            raise ConfigError(f"language entry {item!r} has a non-integer field") from None
        specs.append(LanguageSpec(name, *sizes, kind, parsed, length_range))
    if not specs:
        raise ConfigError("[data] languages is empty")
    return specs


def parse_config(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",), interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    allowed = {"model": MODEL_KEYS, "data": DATA_KEYS, "train": TRAIN_KEYS}
    values: dict[str, dict] = {name: {} for name in allowed}
    for section in parser.sections():
        if section not in allowed:
            raise ConfigError(f"unknown section [{section}]")
        for key, raw in parser.items(section):
            if key not in allowed[section]:
                raise ConfigError(f"unknown key [{section}] {key}")
            values[section][key] = _convert(section, key, raw, allowed[section][key])

    defaults = parse_default() if text != DEFAULT_CONFIG else None
    m, d = values["model"], values["data"]

    def pick(section, key):
        if key in values[section]:
            return values[section][key]
        if defaults is None:
            raise ConfigError(f"missing [{section}] {key}")
        return defaults[section][key]

    length_range = (pick("data", "payload_len_min"), pick("data", "payload_len_max"))
    languages = parse_languages(pick("data", "languages"), length_range)
    payload = pick("model", "vocab_payload")
    model = ModelConfig(
        vocab_size=len(SPECIAL_TOKENS) + len(languages) + payload,
        embed_dim=pick("model", "embed_dim"),
        hidden_dim=pick("model", "hidden_dim"),
        num_layers=pick("model", "layers"),
        num_heads=pick("model", "heads"),
        max_seq_len=pick("model", "max_seq_len"),
        dropout=pick("model", "dropout"),
    )
    train = TrainConfig(**{k: pick("train", k) for k in TRAIN_KEYS})
    try:
        model.validate()
        train.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if model.max_seq_len < length_range[1] + 2:
        raise ConfigError(f"max_seq_len {model.max_seq_len} cannot hold tag + {length_range[1]} tokens + end marker")
    return ExperimentConfig(payload, languages, pick("data", "seed"), model, train, text)


_DEFAULT_VALUES: dict | None = None


def parse_default() -> dict:
    """Typed default values per section, from :data:`DEFAULT_CONFIG`."""
    global _DEFAULT_VALUES
    if _DEFAULT_VALUES is None:
        parser = configparser.ConfigParser(inline_comment_prefixes=("#",), interpolation=None)
        parser.read_string(DEFAULT_CONFIG)
        allowed = {"model": MODEL_KEYS, "data": DATA_KEYS, "train": TRAIN_KEYS}
        _DEFAULT_VALUES = {
            sec: {k: _convert(sec, k, v, allowed[sec][k]) for k, v in parser.items(sec)} for sec in allowed
        }
    return _DEFAULT_VALUES


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text)


def default_config() -> ExperimentConfig:
    return parse_config(DEFAULT_CONFIG)
