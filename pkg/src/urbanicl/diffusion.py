"""DDPM noise schedule, forward corruption, reverse step and random masks.

Step indices are 1-based (``1..T``) as in the usual DDPM notation; the
schedule arrays are stored 0-based, so step ``t`` lives at index ``t - 1``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

MASK_RATIO_MEAN = 0.5
MASK_RATIO_STD = 1.0
MASK_RATIO_BOUNDS = (0.01, 0.99)


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray

    @property
    def T(self) -> int:
        return len(self.beta)

    def check_step(self, t) -> None:
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise ConfigError(f"diffusion step out of range 1..{self.T}: {t}")


def build_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linearly spaced betas with ``sigma_t = sqrt(beta_t)``."""
    if int(T) != T or T < 1:
        raise ConfigError(f"T must be a positive integer, got {T}")
    if not 0 < beta_start <= beta_end < 1:
        raise ConfigError(f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    beta = np.linspace(beta_start, beta_end, int(T), dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    sigma = np.sqrt(beta)
    for arr in (beta, alpha, alpha_bar, sigma):
        arr.setflags(write=False)
    return NoiseSchedule(beta, alpha, alpha_bar, sigma)


def forward_diffuse(x, t, eps, schedule: NoiseSchedule) -> np.ndarray:
    """``sqrt(abar_t) * x + sqrt(1 - abar_t) * eps``.

    ``x`` and ``eps`` may be batched ``(B, N)`` with ``t`` of shape ``(B,)``.
    """
    x = np.asarray(x, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x.shape != eps.shape:
        raise ValueError(f"x and eps shapes differ: {x.shape} vs {eps.shape}")
    schedule.check_step(t)
    abar = schedule.alpha_bar[np.asarray(t) - 1]
    if x.ndim > 1:
        abar = np.reshape(abar, (-1,) + (1,) * (x.ndim - 1))
    return np.sqrt(abar) * x + np.sqrt(1.0 - abar) * eps


def reverse_step(x_t, eps_hat, t, z, schedule: NoiseSchedule) -> np.ndarray:
    """One ancestral DDPM step from ``t`` to ``t - 1``.

    ``(x_t - beta_t / sqrt(1 - abar_t) * eps_hat) / sqrt(alpha_t) + sigma_t * z``.
    Callers pass ``z = 0`` at ``t = 1``.
    """
    x_t = np.asarray(x_t, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if x_t.shape != eps_hat.shape or x_t.shape != z.shape:
        raise ValueError(f"shape mismatch: x_t {x_t.shape}, eps_hat {eps_hat.shape}, z {z.shape}")
    schedule.check_step(t)
    i = np.asarray(t) - 1
    beta, alpha, abar, sigma = (a[i] for a in (schedule.beta, schedule.alpha, schedule.alpha_bar, schedule.sigma))
    if x_t.ndim > 1:
        shape = (-1,) + (1,) * (x_t.ndim - 1)
        beta, alpha, abar, sigma = (np.reshape(a, shape) for a in (beta, alpha, abar, sigma))
    return (x_t - beta / np.sqrt(1.0 - abar) * eps_hat) / np.sqrt(alpha) + sigma * z


def sample_mask_ratio(rng: np.random.Generator) -> float:
    """Draw from N(0.5, 1) truncated to [0.01, 0.99] by rejection."""
    lo, hi = MASK_RATIO_BOUNDS
    while True:
        r = rng.normal(MASK_RATIO_MEAN, MASK_RATIO_STD)
        if lo <= r <= hi:
            return float(r)


@dataclass(frozen=True)
class MaskVector:
    bits: np.ndarray
    ratio: float

    def __post_init__(self):
        bits = np.array(self.bits, dtype=np.int8, copy=True)
        if bits.ndim != 1 or not np.all((bits == 0) | (bits == 1)):
            raise ValueError("mask bits must be a 0/1 vector")
        bits.setflags(write=False)
        object.__setattr__(self, "bits", bits)

    def __len__(self):
        return len(self.bits)

    @property
    def n_masked(self) -> int:
        return int(self.bits.sum())

    @classmethod
    def from_bits(cls, bits) -> "MaskVector":
        bits = np.asarray(bits)
        return cls(bits, float(bits.mean()) if len(bits) else 0.0)


def mask_count(n: int, ratio: float) -> int:
    return max(1, min(n - 1, int(round(ratio * n))))


def make_mask(n: int, ratio: float, rng: np.random.Generator) -> MaskVector:
    """Mask ``round(ratio * n)`` positions (clamped to ``[1, n - 1]``) uniformly."""
    if n < 2:
        raise ConfigError(f"need n >= 2 to mask, got {n}")
    if not 0 < ratio < 1:
        raise ConfigError(f"mask ratio must be in (0, 1), got {ratio}")
    k = mask_count(n, ratio)
    bits = np.zeros(n, dtype=np.int8)
    bits[rng.choice(n, size=k, replace=False)] = 1
    return MaskVector(bits, k / n)
