"""Run configuration: one flat ``key=value`` namespace shared by every
subcommand. Precedence is flags > config file > defaults; the resolved
config (plus the tool version) is written into each output directory."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Mapping

from . import __version__
from .baselines import BaselineConfig
from .checkpoint import read_key_values, write_key_values
from .evaluation import EvalConfig
from .layers import RankformerConfig
from .training import TrainConfig

CONFIG_FILENAME = "config.txt"
THREADS_ENV = "RANKFORMER_THREADS"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    # data
    data: str = ""
    format: str = "tsv"
    k_core: int = 5
    ratios: tuple[float, ...] = (7.0, 1.0, 2.0)
    split_mode: str = "global"
    split_dir: str = "runs/split"
    out_dir: str = "runs/out"
    seed: int = 0
    # encoder
    encoder: str = "rankformer"  # rankformer | lightgcn | mf
    tau: float = 0.5
    alpha: float = 2.0
    layers: int = 2
    lambda_reg: float = 1.0
    warmup_first_layer: bool = True
    normalize_embeddings: bool = True
    epsilon_div: float = 1e-12
    combine: str = "mean"
    # training
    lr: float = 0.1
    weight_decay: float = 1e-4
    epochs: int = 200
    batch_size: int = 0
    negatives_per_positive: int = 1
    patience: int = 20
    grad_mode: str = "through_layers"
    dim: int = 64
    dtype: str = "float32"
    eval_every: int = 1
    # evaluation
    ks: tuple[int, ...] = (20,)
    mask_train: bool = True
    mask_val_at_test: bool = True
    # sweep
    max_layers: int = 4
    taus: tuple[float, ...] = (0.3, 0.5, 0.7, 1.0)
    # runtime
    threads: int = 0  # 0 = torch default

    def __post_init__(self):
        if self.format not in ("tsv", "csv"):
            raise ConfigError(f"format must be tsv or csv, got {self.format!r}")
        if self.k_core < 1:
            raise ConfigError("k_core must be >= 1")
        if len(self.ratios) != 3 or min(self.ratios) < 0 or sum(self.ratios) <= 0:
            raise ConfigError("ratios must be three non-negative numbers")
        if self.split_mode not in ("global", "per_user"):
            raise ConfigError(f"unknown split_mode {self.split_mode!r}")
        if self.encoder not in ("rankformer", "lightgcn", "mf"):
            raise ConfigError(f"unknown encoder {self.encoder!r}")
        if self.max_layers < 1:
            raise ConfigError("max_layers must be >= 1")
        if self.threads < 0:
            raise ConfigError("threads must be >= 0")
        if any(not 0.0 <= t <= 1.0 for t in self.taus):
            raise ConfigError("taus must lie in [0, 1]")
        # delegate range checks to the module configs
        try:
            self.encoder_config()
            self.train_config()
            self.eval_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def encoder_config(self) -> RankformerConfig | BaselineConfig:
        if self.encoder == "rankformer":
            return RankformerConfig(
                tau=self.tau,
                alpha=self.alpha,
                layers=self.layers,
                lambda_reg=self.lambda_reg,
                warmup_first_layer=self.warmup_first_layer,
                normalize_embeddings=self.normalize_embeddings,
                epsilon_div=self.epsilon_div,
            )
        # rankformer-only keys still have to be valid
        RankformerConfig(tau=self.tau, alpha=self.alpha, layers=self.layers, epsilon_div=self.epsilon_div)
        layers = 0 if self.encoder == "mf" else self.layers
        return BaselineConfig(kind=self.encoder, layers=layers, combine=self.combine)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            lr=self.lr,
            weight_decay=self.weight_decay,
            epochs=self.epochs,
            batch_size=self.batch_size,
            negatives_per_positive=self.negatives_per_positive,
            patience=self.patience,
            seed=self.seed,
            grad_mode=self.grad_mode,
            dim=self.dim,
            dtype=self.dtype,
            eval_every=self.eval_every,
        )

    def eval_config(self) -> EvalConfig:
        return EvalConfig(ks=tuple(self.ks), mask_train=self.mask_train, mask_val_at_test=self.mask_val_at_test)

    def as_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def parse_value(key: str, text: str) -> Any:
    """Convert the string form of ``key`` to its field type."""
    if key not in _FIELDS:
        raise ConfigError(f"unknown config key {key!r}")
    default = _FIELDS[key].default
    try:
        if isinstance(default, bool):
            return _parse_bool(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            elem = type(default[0])
            return tuple(elem(x) for x in text.split(",") if x.strip())
        return text
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {text!r}") from exc


def resolve(
    file_path: str | Path | None = None,
    overrides: Mapping[str, str] | None = None,
    env: Mapping[str, str] | None = None,
) -> RunConfig:
    """Defaults, then the config file, then ``RANKFORMER_THREADS``, then
    flag overrides (string values)."""
    env = os.environ if env is None else env
    values: dict[str, Any] = {}
    if file_path is not None:
        try:
            raw = read_key_values(file_path)
        except OSError as exc:
            raise ConfigError(f"cannot read config file {file_path}: {exc}") from exc
        raw.pop("version", None)
        values.update({k: parse_value(k, v) for k, v in raw.items()})
    if env.get(THREADS_ENV):
        values["threads"] = parse_value("threads", env[THREADS_ENV])
    for k, v in (overrides or {}).items():
        values[k] = parse_value(k, v)
    try:
        return RunConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def write_resolved(cfg: RunConfig, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / CONFIG_FILENAME
    write_key_values(path, {"version": __version__, **cfg.as_dict()})
    return path
