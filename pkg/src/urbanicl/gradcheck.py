"""Finite-difference check of the analytic model gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .diffusion import build_schedule, make_mask
from .model import ModelConfig, ModelParameters, init_parameters
from .regions import ReferenceEmbeddings
from .training import TrainConfig, compute_loss


@dataclass
class GradcheckReport:
    errors: dict
    tolerance: float

    @property
    def max_error(self) -> float:
        return max(self.errors.values())

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance

    def group_errors(self) -> dict:
        """Worst error per parameter family (``layer*.wq`` -> ``wq``)."""
        out = {}
        for name, err in self.errors.items():
            key = name.split(".", 1)[-1]
            out[key] = max(out.get(key, 0.0), err)
        return out


def random_problem(config: ModelConfig, seed: int = 0, batch: int = 2, spread: float = 0.3):
    """float64 model with every parameter perturbed, plus a fixed corrupted batch."""
    rng = np.random.default_rng(seed)
    params = init_parameters(config, seed, dtype=np.float64)
    for _, arr in params.items():
        arr += rng.normal(0.0, spread, arr.shape)
    schedule = build_schedule(config.T, 1e-4, 0.02)
    profiles = rng.standard_normal((batch, config.n_regions))
    bits = np.stack([make_mask(config.n_regions, 0.5, rng).bits for _ in range(batch)])
    t = rng.integers(1, config.T + 1, size=batch)
    eps = rng.standard_normal((batch, config.n_regions))
    ref = None
    if config.ref_dim:
        ref = ReferenceEmbeddings(rng.standard_normal((config.n_regions, config.ref_dim)), "gradcheck")
    return params, schedule, (profiles, bits, t, eps), ref


def run_gradcheck(config: Optional[ModelConfig] = None, seed: int = 0, step: float = 1e-4,
                  tolerance: float = 1e-4, corrupt: Optional[str] = None) -> GradcheckReport:
    """Compare analytic and central-difference gradients of the full training loss.

    The error of a tensor is ``max|analytic - numeric| / max(|analytic|, |numeric|)``.
    ``corrupt`` names a tensor whose analytic gradient is deliberately
    perturbed (negative control).
    """
    if config is None:
        config = ModelConfig(n_regions=8, hidden_dim=16, n_layers=2, n_heads=2, ref_dim=4, T=10)
    params, schedule, batch, ref = random_problem(config, seed)
    train_cfg = TrainConfig(T=config.T, lambda_align=0.1 if ref is not None else 0.0)

    def loss():
        return compute_loss(params, *batch, schedule, train_cfg, ref, with_grads=False)[0][0]

    _, grads = compute_loss(params, *batch, schedule, train_cfg, ref, with_grads=True)
    if corrupt is not None:
        if corrupt not in grads:
            raise KeyError(f"unknown parameter {corrupt!r}")
        grads[corrupt] = grads[corrupt] * 1.01 + 1e-3
    errors = {}
    for name, arr in params.items():
        numeric = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + step
            up = loss()
            arr[idx] = orig - step
            down = loss()
            arr[idx] = orig
            numeric[idx] = (up - down) / (2 * step)
        if arr.size == 0:
            errors[name] = 0.0
            continue
        scale = max(np.abs(numeric).max(), np.abs(grads[name]).max(), 1e-12)
        errors[name] = float(np.abs(numeric - grads[name]).max() / scale)
    return GradcheckReport(errors, tolerance)
