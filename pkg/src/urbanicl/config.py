"""Run configuration shared by the CLI commands.

Values are resolved as: command-line flag, then config file, then the
defaults below. Config files are JSON objects keyed by field name.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional

from .errors import ConfigError
from .model import ModelConfig
from .training import TrainConfig


@dataclass(frozen=True)
class RunConfig:
    # optimisation
    lr: float = 4e-4
    epochs: int = 1000
    batch_size: int = 128
    lambda_mask: float = 0.3
    lambda_align: float = 0.1
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    val_every: int = 10
    val_fraction: float = 0.1
    max_grad_norm: Optional[float] = None
    # model
    n_layers: int = 4
    hidden_dim: int = 128
    n_heads: int = 4
    ref_dim: Optional[int] = None
    # schedule
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    # paths
    data: Optional[str] = None
    ref: Optional[str] = None
    out_dir: Optional[str] = None
    # inference
    rounds: int = 10
    seed: int = 0

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            lr=self.lr, epochs=self.epochs, batch_size=self.batch_size, lambda_mask=self.lambda_mask,
            lambda_align=self.lambda_align if self.ref else 0.0, seed=self.seed, T=self.T,
            beta_start=self.beta_start, beta_end=self.beta_end, adam_beta1=self.adam_beta1,
            adam_beta2=self.adam_beta2, adam_eps=self.adam_eps, val_every=self.val_every,
            val_fraction=self.val_fraction, max_grad_norm=self.max_grad_norm,
        )

    def model_config(self, n_regions: int, ref_width: Optional[int]) -> ModelConfig:
        ref_dim = self.ref_dim if self.ref_dim is not None else (ref_width or 0)
        if ref_width is not None and ref_dim != ref_width:
            raise ConfigError(f"ref_dim={ref_dim} but the reference embeddings have width {ref_width}")
        return ModelConfig(n_regions, self.hidden_dim, self.n_layers, self.n_heads, ref_dim, self.T)

    def to_json(self) -> dict:
        return asdict(self)


FIELD_NAMES = {f.name for f in fields(RunConfig)}
DEFAULTS = RunConfig()


def read_config_file(path) -> dict:
    path = Path(path)
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config file ({exc})") from exc
    except ValueError as exc:
        raise ConfigError(f"{path}: config file is not valid JSON ({exc})") from exc
    if not isinstance(payload, dict):
        raise ConfigError(f"{path}: config file must hold a JSON object")
    unknown = sorted(set(payload) - FIELD_NAMES)
    if unknown:
        raise ConfigError(f"{path}: unknown config keys {unknown}")
    return payload


def resolve(flags: dict, config_path=None):
    """Merge explicit flags over the config file over defaults.

    Returns the config and the set of field names that were set explicitly
    (by flag or file).
    """
    values = read_config_file(config_path) if config_path else {}
    values.update({k: v for k, v in flags.items() if v is not None})
    unknown = sorted(set(values) - FIELD_NAMES)
    if unknown:
        raise ConfigError(f"unknown config fields {unknown}")
    try:
        cfg = RunConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg, set(values)
