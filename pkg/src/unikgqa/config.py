"""Run configuration: flat key-value files, CLI overrides, fingerprints.

The config file format is deliberately trivial: one ``section.key =
value`` per line, ``#`` comments. Values are coerced to bool, int, or
float when they parse as one. Command-line flags override file values;
the resolved configuration is hashed into a fingerprint that every
artifact carries for provenance.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, fields

from .evaluation import fingerprint
from .training import TrainConfig

ENV_CACHE_DIR = "UNIKGQA_CACHE_DIR"


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # paths
    kg: str = ""
    questions: str = ""
    valid_questions: str = ""
    out_dir: str = "out"
    cache_dir: str = ""
    # model dims
    feat_dim: int = 32
    enc_dim: int = 32
    num_steps: int = 3
    # retrieval
    top_k: int = 10
    max_hops: int = 2
    score_mode: str = "accumulated"
    connect_paths: bool = True
    # encoder
    encoder_backend: str = "toy"
    encoder_file: str = ""
    remote_url: str = ""
    # training
    temperature: float = 0.05
    batch_size: int = 40
    negatives_per_positive: int = 1
    lr_encoder: float = 1e-5
    lr_model: float = 5e-4
    epochs_pretrain: int = 10
    epochs_retrieval: int = 20
    epochs_reasoning: int = 20
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    kl_target_first: bool = True
    # weak supervision
    paths_use_inverse: bool = True
    # evaluation
    f1_threshold: float = 0.05
    # misc
    seed: int = 0
    answer_top_n: int = 10
    figures: bool = True


KEYS = {
    "paths.kg": "kg",
    "paths.questions": "questions",
    "paths.valid_questions": "valid_questions",
    "paths.out_dir": "out_dir",
    "paths.cache": "cache_dir",
    "model.d": "feat_dim",
    "model.h": "enc_dim",
    "model.T": "num_steps",
    "retrieval.K": "top_k",
    "retrieval.max_hops": "max_hops",
    "retrieval.score_mode": "score_mode",
    "retrieval.connect_paths": "connect_paths",
    "encoder.backend": "encoder_backend",
    "encoder.file": "encoder_file",
    "encoder.remote_url": "remote_url",
    "train.temperature": "temperature",
    "train.batch_size": "batch_size",
    "train.negatives_per_positive": "negatives_per_positive",
    "train.lr_encoder": "lr_encoder",
    "train.lr_model": "lr_model",
    "train.epochs_pretrain": "epochs_pretrain",
    "train.epochs_retrieval": "epochs_retrieval",
    "train.epochs_reasoning": "epochs_reasoning",
    "train.beta1": "beta1",
    "train.beta2": "beta2",
    "train.adam_eps": "adam_eps",
    "train.weight_decay": "weight_decay",
    "train.kl_target_first": "kl_target_first",
    "kg.paths_use_inverse": "paths_use_inverse",
    "eval.f1_threshold": "f1_threshold",
    "seed": "seed",
    "answer.top_n": "answer_top_n",
    "report.figures": "figures",
}

_ATTR_TO_KEY = {attr: key for key, attr in KEYS.items()}


def coerce(text: str):
    text = text.strip()
    lowered = text.lower()
    if lowered in ("true", "yes", "on"):
        return True
    if lowered in ("false", "no", "off"):
        return False
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        pass
    return text


def parse_config_file(path: str) -> dict:
    values = {}
    with open(path, encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
            key, _, value = line.partition("=")
            key = key.strip()
            if key not in KEYS:
                raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
            values[key] = coerce(value)
    return values


def load_config(path: str | None = None, overrides: dict | None = None) -> RunConfig:
    """File values, then overrides (CLI flags), then the cache-dir
    environment variable, applied in that order."""
    config = RunConfig()
    merged: dict[str, object] = {}
    if path:
        merged.update(parse_config_file(path))
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key not in KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        merged[key] = value
    for key, value in merged.items():
        attr = KEYS[key]
        current = getattr(config, attr)
        if isinstance(current, bool) and not isinstance(value, bool):
            raise ConfigError(f"{key}: expected a boolean, got {value!r}")
        if isinstance(current, float) and isinstance(value, int):
            value = float(value)
        if type(value) is not type(current) and not isinstance(current, str):
            raise ConfigError(
                f"{key}: expected {type(current).__name__}, got {value!r}"
            )
        setattr(config, attr, value)
    env_cache = os.environ.get(ENV_CACHE_DIR)
    if env_cache:
        config.cache_dir = env_cache
    return config


def resolved_dict(config: RunConfig) -> dict:
    return {
        _ATTR_TO_KEY[f.name]: getattr(config, f.name)
        for f in fields(config)
    }


def config_fingerprint(config: RunConfig) -> str:
    return fingerprint(resolved_dict(config))


def train_config(config: RunConfig) -> TrainConfig:
    return TrainConfig(
        temperature=config.temperature,
        batch_size=config.batch_size,
        negatives_per_positive=config.negatives_per_positive,
        lr_encoder=config.lr_encoder,
        lr_model=config.lr_model,
        epochs_pretrain=config.epochs_pretrain,
        epochs_retrieval=config.epochs_retrieval,
        epochs_reasoning=config.epochs_reasoning,
        seed=config.seed,
        beta1=config.beta1,
        beta2=config.beta2,
        adam_eps=config.adam_eps,
        weight_decay=config.weight_decay,
        kl_target_first=config.kl_target_first,
    )
