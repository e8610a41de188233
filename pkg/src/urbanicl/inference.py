"""Training-free prediction by masked reverse diffusion.

Unknown regions start as standard normal noise and are denoised from step
``T`` to ``1``; observed regions are written back with their given values
after every step. ``K`` independent chains are averaged.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import rng as rngs
from .diffusion import MaskVector, NoiseSchedule, reverse_step
from .errors import ConfigError, DataError
from .model import ModelParameters, predict_noise


@dataclass(frozen=True)
class InferenceRequest:
    observed_values: np.ndarray
    mask: MaskVector
    rounds: int = 10
    seed: int = 0

    def __post_init__(self):
        values = np.array(self.observed_values, dtype=np.float64, copy=True)
        mask = self.mask if isinstance(self.mask, MaskVector) else MaskVector.from_bits(self.mask)
        if values.ndim != 1 or len(values) != len(mask):
            raise DataError(f"observed values ({values.shape}) and mask ({len(mask)}) lengths differ")
        if mask.n_masked == 0:
            raise ConfigError("nothing to predict: the mask has no unknown regions")
        if mask.n_masked == len(mask):
            raise ConfigError("at least one region must be observed")
        if self.rounds < 1:
            raise ConfigError(f"rounds must be >= 1, got {self.rounds}")
        known = mask.bits == 0
        if not np.all(np.isfinite(values[known])):
            raise DataError("observed values contain NaN/Inf")
        values[~known] = 0.0
        values.setflags(write=False)
        object.__setattr__(self, "observed_values", values)
        object.__setattr__(self, "mask", mask)

    @property
    def unknown(self) -> np.ndarray:
        return self.mask.bits == 1


@dataclass(frozen=True)
class PredictionEnsemble:
    samples: np.ndarray
    mean_prediction: np.ndarray
    per_region_std: np.ndarray
    mask: MaskVector

    @property
    def rounds(self) -> int:
        return self.samples.shape[0]


def init_noisy_profile(request: InferenceRequest, rng: np.random.Generator) -> np.ndarray:
    """Observed entries kept; unknown entries drawn from N(0, 1)."""
    noise = rng.standard_normal(len(request.observed_values))
    return np.where(request.unknown, noise, request.observed_values)


def _check(params: ModelParameters, schedule: NoiseSchedule, n: int):
    cfg = params.config
    if cfg.T != schedule.T:
        raise ConfigError(f"checkpoint was trained with T={cfg.T}, schedule has T={schedule.T}")
    if cfg.n_regions != n:
        raise ConfigError(f"checkpoint has {cfg.n_regions} regions, request has {n}")


def _run_chains(observed: np.ndarray, unknown: np.ndarray, params, schedule, chain_rngs) -> np.ndarray:
    """Run one chain per row; ``observed``/``unknown`` are ``(B, N)``."""
    x = np.stack([np.where(u, g.standard_normal(len(o)), o) for o, u, g in zip(observed, unknown, chain_rngs)])
    bits = unknown.astype(np.int8)
    B, N = x.shape
    for t in range(schedule.T, 0, -1):
        tt = np.full(B, t)
        eps_hat = predict_noise(params, observed, x, bits, tt).astype(np.float64)
        if t > 1:
            z = np.stack([g.standard_normal(N) for g in chain_rngs])
        else:
            z = np.zeros((B, N))
        x = np.where(unknown, reverse_step(x, eps_hat, tt, z, schedule), observed)
    if not np.all(np.isfinite(x)):
        raise ArithmeticError("reverse chain produced non-finite values")
    return x


def reverse_chain(request: InferenceRequest, params: ModelParameters, schedule: NoiseSchedule,
                  rng: np.random.Generator) -> np.ndarray:
    """One completed profile; observed entries equal the request bit for bit."""
    _check(params, schedule, len(request.observed_values))
    out = _run_chains(request.observed_values[None], request.unknown[None], params, schedule, [rng])
    return out[0]


def chain_rng(seed: int, k: int) -> np.random.Generator:
    return rngs.stream(seed, "chain", k)


def _summarize(samples: np.ndarray, request: InferenceRequest) -> PredictionEnsemble:
    known = ~request.unknown
    mean = samples.mean(axis=0)
    std = samples.std(axis=0)
    mean[known] = request.observed_values[known]
    std[known] = 0.0
    return PredictionEnsemble(samples, mean, std, request.mask)


def predict_many(requests: Sequence[InferenceRequest], params: ModelParameters,
                 schedule: NoiseSchedule) -> list:
    """Run every chain of every request in one batch; results in request order."""
    observed, unknown, gens, owner = [], [], [], []
    for r_idx, req in enumerate(requests):
        _check(params, schedule, len(req.observed_values))
        for k in range(req.rounds):
            observed.append(req.observed_values)
            unknown.append(req.unknown)
            gens.append(chain_rng(req.seed, k))
            owner.append(r_idx)
    x = _run_chains(np.stack(observed), np.stack(unknown), params, schedule, gens)
    owner = np.array(owner)
    return [_summarize(x[owner == i], req) for i, req in enumerate(requests)]


def predict(request: InferenceRequest, params: ModelParameters, schedule: NoiseSchedule) -> PredictionEnsemble:
    """``K`` chains seeded by ``(seed, k)`` and their pointwise mean and spread."""
    return predict_many([request], params, schedule)[0]


def ensemble_to_json(ens: PredictionEnsemble, norm_mean: Optional[float] = None,
                     norm_std: Optional[float] = None) -> dict:
    return {
        "mask": [int(b) for b in ens.mask.bits],
        "mean": [float(v) for v in ens.mean_prediction],
        "std": [float(v) for v in ens.per_region_std],
        "samples": [[float(v) for v in row] for row in ens.samples],
        "norm_mean": norm_mean,
        "norm_std": norm_std,
    }


def save_prediction(ens: PredictionEnsemble, path, norm_mean=None, norm_std=None) -> None:
    Path(path).write_text(json.dumps(ensemble_to_json(ens, norm_mean, norm_std)) + "\n", encoding="utf-8")


def load_prediction(path) -> dict:
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise DataError(f"{path}: cannot read prediction file ({exc})") from exc
    for key in ("mask", "mean", "std", "samples"):
        if key not in payload:
            raise DataError(f"{path}: prediction file lacks {key!r}")
    return payload
