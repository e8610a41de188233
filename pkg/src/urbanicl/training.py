"""Pretraining by masked denoising: losses, Adam and the epoch loop."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import rng as rngs
from .checkpoint import save_checkpoint
from .diffusion import NoiseSchedule, build_schedule, forward_diffuse, make_mask, sample_mask_ratio
from .errors import ConfigError, DataError, NumericalError
from .model import ModelConfig, ModelParameters, backward, forward, init_parameters
from .regions import ProfileMatrix, ReferenceEmbeddings

log = logging.getLogger(__name__)

PROB_CLAMP = 1e-7
NORM_FLOOR = 1e-12
LOSS_CURVE_FIELDS = ("epoch", "step", "total", "noise", "mask", "align")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 4e-4
    epochs: int = 1000
    batch_size: int = 128
    lambda_mask: float = 0.3
    lambda_align: float = 0.1
    seed: int = 0
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    val_every: int = 10
    val_fraction: float = 0.1
    max_grad_norm: Optional[float] = None

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.lambda_mask < 0 or self.lambda_align < 0:
            raise ConfigError("loss weights lambda_mask and lambda_align must be >= 0")
        if self.epochs < 1 or self.batch_size < 1 or self.val_every < 1:
            raise ConfigError("epochs, batch_size and val_every must be >= 1")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError(f"val_fraction must be in [0, 1), got {self.val_fraction}")
        if self.max_grad_norm is not None and not self.max_grad_norm > 0:
            raise ConfigError("max_grad_norm must be > 0 when set")

    def schedule(self) -> NoiseSchedule:
        return build_schedule(self.T, self.beta_start, self.beta_end)


@dataclass(frozen=True)
class LossReport:
    total: float
    noise: float
    mask: float
    align: float
    epoch: int = 0
    step: int = 0

    def row(self):
        return [self.epoch, self.step, repr(self.total), repr(self.noise), repr(self.mask), repr(self.align)]


# losses: each returns (value, gradient w.r.t. the prediction), batch-averaged


def _batch(x):
    x = np.asarray(x, dtype=np.float64)
    return x[None] if x.ndim == 1 else x


def noise_loss(eps_true, eps_hat, mask, return_grad: bool = False):
    """Mean squared noise error over masked positions, averaged over the batch."""
    eps_true, eps_hat = _batch(eps_true), _batch(eps_hat)
    bits = _batch(getattr(mask, "bits", mask))
    counts = bits.sum(axis=1)
    if np.any(counts == 0):
        raise DataError("noise loss needs at least one masked position per example")
    err = eps_hat - eps_true
    per_example = (bits * err * err).sum(axis=1) / counts
    value = float(per_example.mean())
    if not return_grad:
        return value
    grad = 2.0 * bits * err / counts[:, None] / len(counts)
    return value, grad


def mask_loss(mask_logits, mask, return_grad: bool = False):
    """Binary cross-entropy of sigmoid(logits) against the mask, over all positions."""
    z = _batch(mask_logits)
    bits = _batch(getattr(mask, "bits", mask))
    s = 0.5 * (1.0 + np.tanh(0.5 * z))
    q = np.clip(s, PROB_CLAMP, 1.0 - PROB_CLAMP)
    per = -(bits * np.log(q) + (1.0 - bits) * np.log1p(-q))
    value = float(per.mean(axis=1).mean())
    if not return_grad:
        return value
    live = (s > PROB_CLAMP) & (s < 1.0 - PROB_CLAMP)
    grad = np.where(live, s - bits, 0.0) / z.size
    return value, grad


def align_loss(e_hat, e_ref, return_grad: bool = False):
    """Mean ``1 - cos`` between predicted and reference region embeddings.

    Rows of ``e_hat`` with norm below 1e-12 count as cosine 0.
    """
    ref = np.asarray(getattr(e_ref, "matrix", e_ref), dtype=np.float64)
    e = np.asarray(e_hat, dtype=np.float64)
    single = e.ndim == 2
    if single:
        e = e[None]
    if e.shape[1:] != ref.shape:
        raise ValueError(f"embedding shapes differ: {e.shape[1:]} vs reference {ref.shape}")
    ref_norm = np.linalg.norm(ref, axis=1)
    if np.any(ref_norm == 0):
        raise DataError("reference embeddings have zero-norm rows")
    norm = np.linalg.norm(e, axis=-1)
    live = norm >= NORM_FLOOR
    safe = np.where(live, norm, 1.0)
    cos = np.where(live, (e * ref).sum(axis=-1) / (safe * ref_norm), 0.0)
    value = float((1.0 - cos).mean(axis=1).mean())
    if not return_grad:
        return value
    B, N, _ = e.shape
    dcos = ref / (safe[..., None] * ref_norm[:, None]) - cos[..., None] * e / (safe * safe)[..., None]
    grad = np.where(live[..., None], -dcos, 0.0) / (B * N)
    return value, (grad[0] if single else grad)


# optimizer ------------------------------------------------------------------


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_update(params: dict, grads: dict, state: AdamState, lr: float) -> None:
    """One bias-corrected Adam step, in place. Moments are kept in float64."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros(p.shape)
            state.v[name] = np.zeros(p.shape)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        step = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p[...] = (p.astype(np.float64) - step).astype(p.dtype)


def new_optimizer(config: TrainConfig) -> AdamState:
    return AdamState(config.adam_beta1, config.adam_beta2, config.adam_eps)


# training -------------------------------------------------------------------


def _check_ref(ref, params: ModelParameters):
    if ref is None:
        return None
    cfg = params.config
    if ref.shape != (cfg.n_regions, cfg.ref_dim):
        raise ConfigError(f"reference embeddings {ref.shape} do not fit the model (N={cfg.n_regions}, ref_dim={cfg.ref_dim})")
    return ref


def sample_corruption(batch: np.ndarray, schedule: NoiseSchedule, rng: np.random.Generator):
    """Per-example mask ratio, mask, diffusion step and noise, drawn in example order."""
    B, N = batch.shape
    bits = np.zeros((B, N), dtype=np.int8)
    t = np.zeros(B, dtype=np.int64)
    eps = np.zeros((B, N))
    for b in range(B):
        bits[b] = make_mask(N, sample_mask_ratio(rng), rng).bits
        t[b] = rng.integers(1, schedule.T + 1)
        eps[b] = rng.standard_normal(N)
    return bits, t, eps


def compute_loss(params, batch, bits, t, eps, schedule, config: TrainConfig, ref=None, with_grads=True):
    """Forward, three-term loss and (optionally) gradients for one batch."""
    noisy = forward_diffuse(batch, t, eps, schedule)
    trace = forward(params, batch, noisy, bits, t, record=with_grads)
    noise, d_eps = noise_loss(eps, trace.eps_hat, bits, return_grad=True)
    mask, d_logits = mask_loss(trace.mask_logits, bits, return_grad=True)
    lam2 = config.lambda_align if ref is not None else 0.0
    align, d_ehat = 0.0, None
    if lam2 > 0:
        align, d_ehat = align_loss(trace.e_hat, ref, return_grad=True)
        d_ehat = lam2 * d_ehat
    total = noise + config.lambda_mask * mask + lam2 * align
    if not all(math.isfinite(v) for v in (noise, mask, align)):
        raise NumericalError(f"non-finite loss: noise={noise}, mask={mask}, align={align}")
    grads = None
    if with_grads:
        grads = backward(trace, d_eps, config.lambda_mask * d_logits, d_ehat, params)
    return (total, noise, mask, align), grads


def clip_gradients(grads: dict, max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(np.asarray(g, dtype=np.float64) ** 2)) for g in grads.values()))
    if norm > max_norm:
        scale = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * scale
    return norm


def train_step(batch, params: ModelParameters, opt_state: AdamState, config: TrainConfig,
               schedule: NoiseSchedule, ref: Optional[ReferenceEmbeddings], rng,
               epoch: int = 0) -> LossReport:
    """Corrupt one batch, compute the loss and apply one Adam update in place."""
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[0] == 0:
        raise DataError("train_step needs a non-empty (B, N) batch")
    if config.lambda_align == 0:
        ref = None
    ref = _check_ref(ref, params)
    bits, t, eps = sample_corruption(batch, schedule, rng)
    try:
        (total, noise, mask, align), grads = compute_loss(params, batch, bits, t, eps, schedule, config, ref)
    except NumericalError as exc:
        raise NumericalError(f"epoch {epoch}, step {opt_state.step + 1}: {exc}") from exc
    if config.max_grad_norm is not None:
        clip_gradients(grads, config.max_grad_norm)
    adam_update(params.tensors, grads, opt_state, config.lr)
    return LossReport(total, noise, mask, align, epoch=epoch, step=opt_state.step)


def validation_loss(params, profiles: np.ndarray, schedule: NoiseSchedule, seed: int) -> float:
    """Masked noise loss at ratio 0.5 and steps {T/4, T/2, 3T/4}, fixed noise."""
    rng = rngs.stream(seed, "validation")
    M, N = profiles.shape
    steps = sorted({max(1, min(schedule.T, round(schedule.T * f))) for f in (0.25, 0.5, 0.75)})
    losses = []
    for t in steps:
        bits = np.stack([make_mask(N, 0.5, rng).bits for _ in range(M)])
        eps = rng.standard_normal((M, N))
        tt = np.full(M, t)
        noisy = forward_diffuse(profiles, tt, eps, schedule)
        trace = forward(params, profiles, noisy, bits, tt, record=False)
        losses.append(noise_loss(eps, trace.eps_hat, bits))
    return float(np.mean(losses))


@dataclass
class TrainResult:
    params: ModelParameters
    best_params: ModelParameters
    curve: list
    val_history: list
    best_epoch: int


def default_model_config(matrix: ProfileMatrix, config: TrainConfig, ref=None, **overrides) -> ModelConfig:
    kwargs = dict(n_regions=matrix.region_set.count, ref_dim=ref.shape[1] if ref is not None else 0, T=config.T)
    kwargs.update(overrides)
    return ModelConfig(**kwargs)


def train(matrix: ProfileMatrix, config: TrainConfig, ref: Optional[ReferenceEmbeddings] = None,
          out_dir=None, model_config: Optional[ModelConfig] = None, params: Optional[ModelParameters] = None,
          progress: bool = False) -> TrainResult:
    """Pretrain on every profile not tagged ``indicator``.

    A ``val_fraction`` share of the profiles is held out for model
    selection. With ``out_dir`` the final and best-validation checkpoints
    and the per-epoch loss curve are written there.
    """
    data = matrix.exclude(["indicator"]).values()
    if len(data) == 0:
        raise DataError("no pretraining profiles (all profiles are tagged 'indicator')")
    if not np.all(np.isfinite(data)):
        raise DataError("pretraining profiles contain NaN/Inf")
    if model_config is None:
        model_config = params.config if params is not None else default_model_config(matrix, config, ref)
    if model_config.T != config.T:
        raise ConfigError(f"model T={model_config.T} differs from schedule T={config.T}")
    if model_config.n_regions != matrix.region_set.count:
        raise ConfigError("model n_regions does not match the data")
    if params is None:
        params = init_parameters(model_config, rngs.stream(config.seed, "init").integers(2**31))
    if config.lambda_align > 0 and ref is not None:
        _check_ref(ref, params)
    schedule = config.schedule()

    M = len(data)
    n_val = int(round(config.val_fraction * M)) if M >= 2 else 0
    n_val = min(n_val, M - 1)
    order = rngs.stream(config.seed, "holdout").permutation(M)
    val_data, train_data = data[np.sort(order[:n_val])], data[np.sort(order[n_val:])]

    shuffle_rng = rngs.stream(config.seed, "shuffle")
    noise_rng = rngs.stream(config.seed, "corruption")
    opt = new_optimizer(config)
    curve, val_history = [], []
    best_val, best_epoch, best_params = math.inf, 0, params.copy()
    for epoch in range(1, config.epochs + 1):
        perm = shuffle_rng.permutation(len(train_data))
        reports = []
        for start in range(0, len(perm), config.batch_size):
            batch = train_data[perm[start : start + config.batch_size]]
            reports.append((len(batch), train_step(batch, params, opt, config, schedule, ref, noise_rng, epoch)))
        w = np.array([n for n, _ in reports], dtype=np.float64)
        avg = lambda attr: float(np.dot(w, [getattr(r, attr) for _, r in reports]) / w.sum())
        curve.append(LossReport(avg("total"), avg("noise"), avg("mask"), avg("align"), epoch=epoch, step=opt.step))
        if n_val and (epoch % config.val_every == 0 or epoch == config.epochs):
            val = validation_loss(params, val_data, schedule, config.seed)
            val_history.append((epoch, val))
            if val < best_val:
                best_val, best_epoch, best_params = val, epoch, params.copy()
        if progress and (epoch % max(1, config.epochs // 20) == 0 or epoch == 1):
            log.info("epoch %d: total %.4f noise %.4f mask %.4f align %.4f", epoch, *[avg(a) for a in ("total", "noise", "mask", "align")])
    if not n_val:
        best_epoch, best_params = config.epochs, params.copy()

    if out_dir is not None:
        write_outputs(out_dir, params, best_params, curve, val_history, config, best_epoch)
    return TrainResult(params, best_params, curve, val_history, best_epoch)


def write_loss_curve(curve, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOSS_CURVE_FIELDS)
        for report in curve:
            writer.writerow(report.row())


def write_outputs(out_dir, params, best_params, curve, val_history, config, best_epoch) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(params, params.config, out / "final.ckpt")
    save_checkpoint(best_params, best_params.config, out / "best.ckpt")
    write_loss_curve(curve, out / "loss_curve.csv")
    summary = {
        "best_epoch": best_epoch,
        "validation": [{"epoch": e, "noise": v} for e, v in val_history],
        "train_config": asdict(config),
        "n_parameters": params.n_parameters,
    }
    (out / "train_summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
