"""Masked diffusion transformer over city regions, in plain numpy.

Every region is a token. A token starts as its learned region embedding plus
its scalar value times a shared value vector; observed regions contribute
their clean value and masked regions their noisy value. A stack of DiT-style
blocks, conditioned on the diffusion step through ``mod(X, b, g) =
X * tanh(b) + g`` and per-block gates, mixes the regions. Three heads read the
result: predicted noise, mask logits, and (from the middle block) a projection
that is aligned with external region embeddings.

All functions are batched over a leading axis ``B``. The backward pass is
written out by hand over the activations recorded by :func:`forward`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError, NumericalError

TIME_FEATURES = 128
LN_EPS = 1e-5
INIT_STD = 0.02
# bias for the tanh gates in mod(); tanh(0) would silence every branch and
# leave the zero-initialised block gates with exactly zero gradient
MOD_SCALE_BIAS = 1.0


@dataclass(frozen=True)
class ModelConfig:
    n_regions: int
    hidden_dim: int = 128
    n_layers: int = 4
    n_heads: int = 4
    ref_dim: int = 0
    T: int = 1000

    def __post_init__(self):
        if self.n_regions < 2:
            raise ConfigError(f"n_regions must be >= 2, got {self.n_regions}")
        if self.hidden_dim < 1 or self.n_heads < 1 or self.hidden_dim % self.n_heads:
            raise ConfigError(f"hidden_dim {self.hidden_dim} must be a positive multiple of n_heads {self.n_heads}")
        if self.n_layers < 1:
            raise ConfigError(f"n_layers must be >= 1, got {self.n_layers}")
        if self.ref_dim < 0:
            raise ConfigError(f"ref_dim must be >= 0, got {self.ref_dim}")
        if self.ref_dim > 0 and self.tap_layer < 1:
            raise ConfigError("alignment needs n_layers >= 2 so the tap layer floor(L/2) is >= 1")
        if self.T < 1:
            raise ConfigError(f"T must be >= 1, got {self.T}")

    @property
    def tap_layer(self) -> int:
        return self.n_layers // 2

    def as_tuple(self):
        return (self.n_regions, self.hidden_dim, self.n_layers, self.n_heads, self.ref_dim, self.T)


def parameter_shapes(config: ModelConfig):
    """Ordered ``(name, shape)`` list; this order is also the checkpoint order."""
    N, D, R = config.n_regions, config.hidden_dim, config.ref_dim
    shapes = [
        ("region_embed", (N, D)),
        ("value_vec", (D,)),
        ("time_w1", (TIME_FEATURES, D)),
        ("time_b1", (D,)),
        ("time_w2", (D, D)),
        ("time_b2", (D,)),
    ]
    for l in range(config.n_layers):
        shapes += [
            (f"layer{l}.ln1_scale", (D,)),
            (f"layer{l}.ln1_offset", (D,)),
            (f"layer{l}.wq", (D, D)),
            (f"layer{l}.wk", (D, D)),
            (f"layer{l}.wv", (D, D)),
            (f"layer{l}.wo", (D, D)),
            (f"layer{l}.ln2_scale", (D,)),
            (f"layer{l}.ln2_offset", (D,)),
            (f"layer{l}.ffn_w1", (D, 4 * D)),
            (f"layer{l}.ffn_b1", (4 * D,)),
            (f"layer{l}.ffn_w2", (4 * D, D)),
            (f"layer{l}.ffn_b2", (D,)),
            (f"layer{l}.adaln_w", (D, 6 * D)),
            (f"layer{l}.adaln_b", (6 * D,)),
        ]
    shapes += [
        ("out_adaln_w", (D, 2 * D)),
        ("out_adaln_b", (2 * D,)),
        ("out_ln_scale", (D,)),
        ("out_ln_offset", (D,)),
        ("noise_w", (D,)),
        ("noise_b", (1,)),
        ("mask_w", (D,)),
        ("mask_b", (1,)),
        ("align_w1", (D, D)),
        ("align_b1", (D,)),
        ("align_w2", (D, R)),
        ("align_b2", (R,)),
    ]
    return shapes


def count_parameters(config: ModelConfig) -> int:
    return sum(math.prod(shape) for _, shape in parameter_shapes(config))


class ModelParameters:
    """Named parameter tensors of one model, in checkpoint order."""

    def __init__(self, config: ModelConfig, tensors: dict):
        expected = parameter_shapes(config)
        if [k for k, _ in expected] != list(tensors):
            raise ConfigError("parameter names do not match the model configuration")
        for name, shape in expected:
            if tensors[name].shape != shape:
                raise ConfigError(f"parameter {name} has shape {tensors[name].shape}, expected {shape}")
        self.config = config
        self.tensors = tensors

    def __getitem__(self, name):
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    @property
    def dtype(self):
        return self.tensors["region_embed"].dtype

    @property
    def n_parameters(self) -> int:
        return sum(a.size for a in self.tensors.values())

    def copy(self) -> "ModelParameters":
        return ModelParameters(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def astype(self, dtype) -> "ModelParameters":
        return ModelParameters(self.config, {k: v.astype(dtype) for k, v in self.tensors.items()})

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.tensors.values()])


def init_parameters(config: ModelConfig, seed: int, dtype=np.float32) -> ModelParameters:
    """Gaussian(0, 0.02) weights; identity blocks and silent heads at init.

    The adaLN projections have zero weights, zero gate/shift biases and a
    constant scale bias, so every block's gate is 0 (the block is an exact
    identity) while its branch still produces a nonzero signal to learn from.
    LayerNorm scales start at 1, all other biases and both heads at 0.
    """
    rng = np.random.default_rng(seed)
    D = config.hidden_dim
    tensors = {}
    for name, shape in parameter_shapes(config):
        base = name.rsplit(".", 1)[-1]
        if base.endswith("_scale"):
            arr = np.ones(shape)
        elif base in ("adaln_w", "out_adaln_w", "noise_w", "mask_w") or base.endswith(("_b", "_b1", "_b2", "_offset")):
            arr = np.zeros(shape)
        else:
            arr = rng.normal(0.0, INIT_STD, size=shape)
        if base == "adaln_b":
            arr[D : 2 * D] = MOD_SCALE_BIAS
            arr[4 * D : 5 * D] = MOD_SCALE_BIAS
        elif base == "out_adaln_b":
            arr[:D] = MOD_SCALE_BIAS
        tensors[name] = arr.astype(dtype)
    return ModelParameters(config, tensors)


# elementwise pieces ---------------------------------------------------------


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def silu(x):
    return x * sigmoid(x)


def silu_grad(x, s=None):
    if s is None:
        s = sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


def timestep_features(t, dtype=np.float64) -> np.ndarray:
    """Sinusoidal step features, frequencies geometric from 1 down to 1e-4."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = TIME_FEATURES // 2
    freqs = np.exp(-math.log(10_000.0) * np.arange(half) / (half - 1))
    angles = t[:, None] * freqs[None, :]
    return np.concatenate([np.cos(angles), np.sin(angles)], axis=1).astype(dtype)


def modulate(x, beta, gamma):
    """``x * tanh(beta) + gamma`` with ``beta``/``gamma`` broadcast over rows."""
    x = np.asarray(x)
    beta = np.asarray(beta)
    gamma = np.asarray(gamma)
    if beta.shape[-1] != x.shape[-1] or gamma.shape[-1] != x.shape[-1]:
        raise ValueError(f"modulation width mismatch: x {x.shape}, beta {beta.shape}, gamma {gamma.shape}")
    if x.ndim == 3 and beta.ndim == 2:
        beta, gamma = beta[:, None, :], gamma[:, None, :]
    return x * np.tanh(beta) + gamma


def _layernorm(x, scale, offset):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = xc * rstd
    return xhat * scale + offset, (xhat, rstd)


def _layernorm_backward(dy, scale, cache):
    xhat, rstd = cache
    dscale = (dy * xhat).sum(axis=(0, 1))
    doffset = dy.sum(axis=(0, 1))
    dxhat = dy * scale
    dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dscale, doffset


def _wgrad(x, dy):
    """Weight gradient ``sum_b x_b^T dy_b`` for ``y = x @ W``."""
    return x.reshape(-1, x.shape[-1]).T @ dy.reshape(-1, dy.shape[-1])


def _split_heads(x, n_heads):
    B, N, D = x.shape
    return x.reshape(B, N, n_heads, D // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    B, H, N, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, N, H * dh)


def _attention(x, wq, wk, wv, wo, n_heads):
    q = _split_heads(x @ wq, n_heads)
    k = _split_heads(x @ wk, n_heads)
    v = _split_heads(x @ wv, n_heads)
    scale = 1.0 / math.sqrt(q.shape[-1])
    s = (q @ k.transpose(0, 1, 3, 2)) * scale
    s -= s.max(axis=-1, keepdims=True)
    a = np.exp(s)
    a /= a.sum(axis=-1, keepdims=True)
    o = _merge_heads(a @ v)
    return o @ wo, (x, q, k, v, a, o, scale)


def _attention_backward(dout, wq, wk, wv, wo, n_heads, cache):
    x, q, k, v, a, o, scale = cache
    dwo = _wgrad(o, dout)
    do = _split_heads(dout @ wo.T, n_heads)
    da = do @ v.transpose(0, 1, 3, 2)
    dv = a.transpose(0, 1, 3, 2) @ do
    ds = a * (da - (da * a).sum(axis=-1, keepdims=True)) * scale
    dq = ds @ k
    dk = ds.transpose(0, 1, 3, 2) @ q
    dq, dk, dv = _merge_heads(dq), _merge_heads(dk), _merge_heads(dv)
    dx = dq @ wq.T + dk @ wk.T + dv @ wv.T
    return dx, _wgrad(x, dq), _wgrad(x, dk), _wgrad(x, dv), dwo


# forward --------------------------------------------------------------------


@dataclass
class ForwardTrace:
    h0: np.ndarray
    t: np.ndarray
    layers: list = field(default_factory=list)
    h_final: Optional[np.ndarray] = None
    h_mid: Optional[np.ndarray] = None
    h_out: Optional[np.ndarray] = None
    eps_hat: Optional[np.ndarray] = None
    mask_logits: Optional[np.ndarray] = None
    e_hat: Optional[np.ndarray] = None
    attention: list = field(default_factory=list)
    cache: dict = field(default_factory=dict)
    record: bool = True


def _as_batch(x, dtype):
    x = np.asarray(x, dtype=dtype)
    return x[None] if x.ndim == 1 else x


def embed_input(p_obs, p_noisy, mask_bits, params: ModelParameters) -> np.ndarray:
    """Initial tokens: region embedding plus clean or noisy value times the value vector."""
    dt = params.dtype
    p_obs, p_noisy = _as_batch(p_obs, dt), _as_batch(p_noisy, dt)
    bits = _as_batch(getattr(mask_bits, "bits", mask_bits), np.int8)
    N = params.config.n_regions
    if p_obs.shape[-1] != N or p_noisy.shape != p_obs.shape or bits.shape[-1] != N:
        raise ValueError(f"input vectors must have length {N}")
    u = np.where(bits == 1, p_noisy, p_obs)
    return params["region_embed"][None] + u[..., None] * params["value_vec"]


def _time_condition(t, params, cache):
    tf = timestep_features(t, params.dtype)
    z1 = tf @ params["time_w1"] + params["time_b1"]
    a1 = silu(z1)
    c = a1 @ params["time_w2"] + params["time_b2"]
    sc = silu(c)
    cache.update(tf=tf, tz1=z1, ta1=a1, c=c, sc=sc)
    return sc


def encoder_forward(h0, t, params: ModelParameters, record: bool = True) -> ForwardTrace:
    """Run the DiT blocks; records activations for :func:`backward` when asked."""
    cfg = params.config
    h = _as_batch(h0, params.dtype)
    t = np.broadcast_to(np.atleast_1d(np.asarray(t, dtype=np.int64)), (h.shape[0],))
    if np.any(t < 1) or np.any(t > cfg.T):
        raise ConfigError(f"diffusion step out of range 1..{cfg.T}")
    trace = ForwardTrace(h0=h, t=t, record=record)
    sc = _time_condition(t, params, trace.cache)
    D = cfg.hidden_dim
    for l in range(cfg.n_layers):
        p = lambda name: params[f"layer{l}.{name}"]
        m = sc @ p("adaln_w") + p("adaln_b")
        g1, b1, s1, g2, b2, s2 = (m[:, j * D : (j + 1) * D] for j in range(6))
        th1 = np.tanh(b1)
        x1 = h * th1[:, None] + s1[:, None]
        n1, ln1 = _layernorm(x1, p("ln1_scale"), p("ln1_offset"))
        att, attc = _attention(n1, p("wq"), p("wk"), p("wv"), p("wo"), cfg.n_heads)
        hc = h + g1[:, None] * att
        th2 = np.tanh(b2)
        x2 = hc * th2[:, None] + s2[:, None]
        n2, ln2 = _layernorm(x2, p("ln2_scale"), p("ln2_offset"))
        f1 = n2 @ p("ffn_w1") + p("ffn_b1")
        f1s = sigmoid(f1)
        f1a = f1 * f1s
        f = f1a @ p("ffn_w2") + p("ffn_b2")
        h_new = hc + g2[:, None] * f
        if not np.all(np.isfinite(h_new)):
            raise NumericalError(f"non-finite activation in encoder layer {l}")
        trace.attention.append(attc[4])
        if record:
            trace.layers.append(
                dict(h=h, g1=g1, th1=th1, ln1=ln1, att=att, attc=attc, hc=hc, g2=g2, th2=th2, ln2=ln2,
                     n2=n2, f1=f1, f1s=f1s, f1a=f1a, f=f)
            )
        h = h_new
        if l + 1 == cfg.tap_layer:
            trace.h_mid = h
    trace.h_final = h
    return trace


def heads_forward(trace: ForwardTrace, params: ModelParameters):
    """Output modulation + LayerNorm, then the noise, mask and alignment heads."""
    cfg = params.config
    D = cfg.hidden_dim
    sc = trace.cache["sc"]
    mo = sc @ params["out_adaln_w"] + params["out_adaln_b"]
    bo, go = mo[:, :D], mo[:, D:]
    tho = np.tanh(bo)
    xo = trace.h_final * tho[:, None] + go[:, None]
    ho, lno = _layernorm(xo, params["out_ln_scale"], params["out_ln_offset"])
    trace.h_out = ho
    trace.eps_hat = ho @ params["noise_w"] + params["noise_b"][0]
    trace.mask_logits = ho @ params["mask_w"] + params["mask_b"][0]
    if cfg.ref_dim > 0:
        if trace.h_mid is None:
            raise ConfigError("alignment head needs the middle-layer activations")
        za = trace.h_mid @ params["align_w1"] + params["align_b1"]
        aa = silu(za)
        trace.e_hat = aa @ params["align_w2"] + params["align_b2"]
        trace.cache.update(za=za, aa=aa)
    trace.cache.update(tho=tho, lno=lno)
    return trace.eps_hat, trace.mask_logits, trace.e_hat


def forward(params: ModelParameters, p_obs, p_noisy, mask_bits, t, record: bool = True) -> ForwardTrace:
    """Full model: inputs -> tokens -> encoder -> heads."""
    bits = _as_batch(getattr(mask_bits, "bits", mask_bits), np.int8)
    h0 = embed_input(p_obs, p_noisy, bits, params)
    trace = encoder_forward(h0, t, params, record=record)
    trace.cache["u"] = np.where(bits == 1, _as_batch(p_noisy, params.dtype), _as_batch(p_obs, params.dtype))
    trace.cache["bits"] = bits
    heads_forward(trace, params)
    return trace


def predict_noise(params: ModelParameters, p_obs, p_noisy, mask_bits, t) -> np.ndarray:
    return forward(params, p_obs, p_noisy, mask_bits, t, record=False).eps_hat


# backward -------------------------------------------------------------------


def backward(trace: ForwardTrace, d_eps, d_logits, d_ehat, params: ModelParameters, input_grads: bool = False):
    """Reverse-mode gradients of ``sum(d_eps*eps_hat) + sum(d_logits*logits) + sum(d_ehat*e_hat)``.

    Returns a dict keyed like ``params``. With ``input_grads`` also returns
    ``(d_p_obs, d_p_noisy)``.
    """
    if not trace.record or len(trace.layers) != params.config.n_layers:
        raise ConfigError("backward needs a trace recorded with record=True for these parameters")
    cfg = params.config
    D = cfg.hidden_dim
    dt = params.dtype
    B, N = trace.eps_hat.shape
    if trace.h0.shape != (B, cfg.n_regions, D):
        raise ConfigError(f"trace shape {trace.h0.shape} does not match the model configuration")
    c = trace.cache
    grads = {name: np.zeros_like(arr) for name, arr in params.items()}

    d_eps = np.broadcast_to(np.asarray(d_eps, dtype=dt), (B, N)) if d_eps is not None else np.zeros((B, N), dt)
    d_logits = (
        np.broadcast_to(np.asarray(d_logits, dtype=dt), (B, N)) if d_logits is not None else np.zeros((B, N), dt)
    )
    ho = trace.h_out
    grads["noise_w"] = _wgrad(ho, d_eps[..., None]).ravel()
    grads["noise_b"] = np.array([d_eps.sum()], dtype=dt)
    grads["mask_w"] = _wgrad(ho, d_logits[..., None]).ravel()
    grads["mask_b"] = np.array([d_logits.sum()], dtype=dt)
    dho = d_eps[..., None] * params["noise_w"] + d_logits[..., None] * params["mask_w"]

    dxo, grads["out_ln_scale"], grads["out_ln_offset"] = _layernorm_backward(dho, params["out_ln_scale"], c["lno"])
    tho = c["tho"]
    dh = dxo * tho[:, None]
    dbo = (dxo * trace.h_final).sum(axis=1) * (1.0 - tho * tho)
    dgo = dxo.sum(axis=1)
    dmo = np.concatenate([dbo, dgo], axis=1)
    sc = c["sc"]
    grads["out_adaln_w"] = sc.T @ dmo
    grads["out_adaln_b"] = dmo.sum(axis=0)
    dsc = dmo @ params["out_adaln_w"].T

    dh_mid = None
    if cfg.ref_dim > 0 and d_ehat is not None:
        d_ehat = np.asarray(d_ehat, dtype=dt)
        grads["align_w2"] = _wgrad(c["aa"], d_ehat)
        grads["align_b2"] = d_ehat.sum(axis=(0, 1))
        dza = (d_ehat @ params["align_w2"].T) * silu_grad(c["za"])
        grads["align_w1"] = _wgrad(trace.h_mid, dza)
        grads["align_b1"] = dza.sum(axis=(0, 1))
        dh_mid = dza @ params["align_w1"].T

    for l in reversed(range(cfg.n_layers)):
        if dh_mid is not None and l + 1 == cfg.tap_layer:
            dh = dh + dh_mid
        p = lambda name: params[f"layer{l}.{name}"]
        L = trace.layers[l]
        # h_out = hc + g2 * f
        dg2 = (dh * L["f"]).sum(axis=1)
        df = dh * L["g2"][:, None]
        dhc = dh
        grads[f"layer{l}.ffn_w2"] = _wgrad(L["f1a"], df)
        grads[f"layer{l}.ffn_b2"] = df.sum(axis=(0, 1))
        df1 = (df @ p("ffn_w2").T) * silu_grad(L["f1"], L["f1s"])
        grads[f"layer{l}.ffn_w1"] = _wgrad(L["n2"], df1)
        grads[f"layer{l}.ffn_b1"] = df1.sum(axis=(0, 1))
        dn2 = df1 @ p("ffn_w1").T
        dx2, grads[f"layer{l}.ln2_scale"], grads[f"layer{l}.ln2_offset"] = _layernorm_backward(
            dn2, p("ln2_scale"), L["ln2"]
        )
        th2 = L["th2"]
        dhc = dhc + dx2 * th2[:, None]
        db2 = (dx2 * L["hc"]).sum(axis=1) * (1.0 - th2 * th2)
        ds2 = dx2.sum(axis=1)
        # hc = h + g1 * att
        dg1 = (dhc * L["att"]).sum(axis=1)
        datt = dhc * L["g1"][:, None]
        dn1, dwq, dwk, dwv, dwo = _attention_backward(datt, p("wq"), p("wk"), p("wv"), p("wo"), cfg.n_heads, L["attc"])
        grads[f"layer{l}.wq"], grads[f"layer{l}.wk"] = dwq, dwk
        grads[f"layer{l}.wv"], grads[f"layer{l}.wo"] = dwv, dwo
        dx1, grads[f"layer{l}.ln1_scale"], grads[f"layer{l}.ln1_offset"] = _layernorm_backward(
            dn1, p("ln1_scale"), L["ln1"]
        )
        th1 = L["th1"]
        dh = dhc + dx1 * th1[:, None]
        db1 = (dx1 * L["h"]).sum(axis=1) * (1.0 - th1 * th1)
        ds1 = dx1.sum(axis=1)
        dm = np.concatenate([dg1, db1, ds1, dg2, db2, ds2], axis=1)
        grads[f"layer{l}.adaln_w"] = sc.T @ dm
        grads[f"layer{l}.adaln_b"] = dm.sum(axis=0)
        dsc = dsc + dm @ p("adaln_w").T

    dc = dsc * silu_grad(c["c"])
    grads["time_w2"] = c["ta1"].T @ dc
    grads["time_b2"] = dc.sum(axis=0)
    dz1 = (dc @ params["time_w2"].T) * silu_grad(c["tz1"])
    grads["time_w1"] = c["tf"].T @ dz1
    grads["time_b1"] = dz1.sum(axis=0)

    grads["region_embed"] = dh.sum(axis=0)
    u = c["u"]
    grads["value_vec"] = _wgrad(u[..., None], dh).ravel()
    grads = {k: np.asarray(v, dtype=dt) for k, v in grads.items()}
    if not input_grads:
        return grads
    du = dh @ params["value_vec"]
    bits = c["bits"]
    return grads, np.where(bits == 1, 0.0, du), np.where(bits == 1, du, 0.0)
