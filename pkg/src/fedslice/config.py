"""Experiment configuration: defaults, INI-file parsing, flag overrides.

Defaults mirror the reference setup at toy scale: 3 clients, 10 rounds,
adapter rank 8, adapter dropout 0.1.
"""

from __future__ import annotations

import configparser
from dataclasses import asdict, dataclass, field, fields

from .errors import ContractError
from .model import RATIO_PRESETS, TransformerConfig, TuningConfig

METHODS = ("method1", "method2", "fl-llm", "swmt")
TUNINGS = ("lora", "ptuningv2")
PRECISIONS = ("exact", "simhalf")


@dataclass
class ExperimentConfig:
    # scheme
    method: str = "method1"
    tuning: str = "lora"
    precision: str = "exact"
    seed: int = 0

    # federation schedule
    k: int = 3
    rounds: int = 10
    steps_per_round: int = 6
    batch_size: int = 4
    lr: float = 0.02

    # method2
    split_layer: int = 2
    qkv_ratio: float = 0.25
    dense_ratio: float = 0.5
    ratio_preset: str = ""
    method2_steps: int = 60

    # adapters
    lora_rank: int = 8
    lora_alpha: float = 16.0
    lora_dropout: float = 0.1
    prefix_len: int = 8
    train_head: bool = True

    # masking / precision plumbing
    mask_scale: float = 0.0  # 0 = match activation magnitude
    quantize_on_transfer: bool = True

    # toy model dims
    n_layers: int = 4
    d_model: int = 16
    n_heads: int = 4
    d_head: int = 4
    d_ff: int = 32
    vocab: int = 24
    n_classes: int = 3
    max_seq: int = 16

    # synthetic task
    seq_len: int = 8
    n_train: int = 90
    n_test: int = 60
    separation: float = 0.95
    data_dir: str = ""

    def __post_init__(self):
        if self.method not in METHODS:
            raise ContractError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.tuning not in TUNINGS:
            raise ContractError(f"tuning must be one of {TUNINGS}, got {self.tuning!r}")
        if self.precision not in PRECISIONS:
            raise ContractError(f"precision must be one of {PRECISIONS}, got {self.precision!r}")
        if self.ratio_preset:
            if self.ratio_preset not in RATIO_PRESETS:
                raise ContractError(f"unknown ratio preset {self.ratio_preset!r}; "
                                    f"choices: {sorted(RATIO_PRESETS)}")
            self.qkv_ratio, self.dense_ratio = RATIO_PRESETS[self.ratio_preset]
        if self.k < 1 or self.rounds < 1:
            raise ContractError("k and rounds must be >= 1")

    # -- derived views --------------------------------------------------------

    def model_config(self) -> TransformerConfig:
        return TransformerConfig(
            n_layers=self.n_layers, d_model=self.d_model, n_heads=self.n_heads,
            d_head=self.d_head, d_ff=self.d_ff, vocab=self.vocab,
            n_classes=self.n_classes, max_seq=self.max_seq)

    def tuning_config(self) -> TuningConfig:
        if self.method == "method2":
            return TuningConfig(
                mode="spf_lora", lora_rank=self.lora_rank, lora_alpha=self.lora_alpha,
                lora_dropout=self.lora_dropout, lora_sites=("fc1", "fc2"),
                qkv_ratio=self.qkv_ratio, dense_ratio=self.dense_ratio,
                train_head=self.train_head,
                layers=tuple(range(self.split_layer, self.n_layers)))
        if self.tuning == "lora":
            return TuningConfig(
                mode="lora", lora_rank=self.lora_rank, lora_alpha=self.lora_alpha,
                lora_dropout=self.lora_dropout, lora_sites=("qkv",),
                train_head=self.train_head)
        return TuningConfig(mode="ptuning_v2", prefix_len=self.prefix_len,
                            train_head=self.train_head)

    def to_dict(self) -> dict:
        return asdict(self)


_SECTIONS = {
    "experiment": ("method", "tuning", "precision", "seed", "k", "rounds",
                   "steps_per_round", "batch_size", "lr", "split_layer", "qkv_ratio",
                   "dense_ratio", "ratio_preset", "method2_steps", "lora_rank",
                   "lora_alpha", "lora_dropout", "prefix_len", "train_head",
                   "mask_scale", "quantize_on_transfer", "data_dir"),
    "model": ("n_layers", "d_model", "n_heads", "d_head", "d_ff", "vocab",
              "n_classes", "max_seq"),
    "task": ("seq_len", "n_train", "n_test", "separation"),
}

_FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _coerce(name: str, raw: str):
    if name not in _FIELD_TYPES:
        raise ContractError(f"unknown config key {name!r}")
    ftype = _FIELD_TYPES[name]
    if ftype == "bool":
        return raw.strip().lower() in ("1", "true", "yes", "on")
    if ftype == "int":
        return int(raw)
    if ftype == "float":
        return float(raw)
    return raw


def load_config(path: str, overrides: dict | None = None) -> ExperimentConfig:
    """Read the sectioned key/value config file; overrides win over file values."""
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise ContractError(f"config file {path} not found")
    values: dict = {}
    for section, keys in _SECTIONS.items():
        if not parser.has_section(section):
            continue
        for key, raw in parser.items(section):
            if key not in keys:
                raise ContractError(f"unknown key {key!r} in [{section}]")
            values[key] = _coerce(key, raw)
    values.update(overrides or {})
    return ExperimentConfig(**values)


def config_from_overrides(overrides: dict) -> ExperimentConfig:
    return ExperimentConfig(**overrides)


def write_config(cfg: ExperimentConfig, path: str) -> None:
    parser = configparser.ConfigParser()
    d = cfg.to_dict()
    for section, keys in _SECTIONS.items():
        parser.add_section(section)
        for key in keys:
            parser.set(section, key, str(d[key]))
    with open(path, "w") as fh:
        parser.write(fh)
