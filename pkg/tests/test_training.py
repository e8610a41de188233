import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from urbanicl.checkpoint import load_checkpoint, verify_checkpoint
from urbanicl.diffusion import build_schedule
from urbanicl.errors import ConfigError, DataError
from urbanicl.model import ModelConfig, init_parameters
from urbanicl.regions import ReferenceEmbeddings, generate_synthetic_city
from urbanicl.training import (
    AdamState,
    TrainConfig,
    adam_update,
    align_loss,
    clip_gradients,
    compute_loss,
    mask_loss,
    noise_loss,
    sample_corruption,
    train,
    train_step,
    validation_loss,
)


def _fd(f, x, h=1e-6):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + h
        up = f()
        x[idx] = orig - h
        down = f()
        x[idx] = orig
        g[idx] = (up - down) / (2 * h)
    return g


# losses --------------------------------------------------------------------


def test_noise_loss_by_hand():
    eps = np.array([[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]])
    hat = np.array([[1.5, 2.0, 0.0], [1.0, 2.0, 3.0]])
    bits = np.array([[1, 0, 1], [0, 1, 0]])
    # example 0: (0.25 + 9) / 2, example 1: 4 / 1
    assert noise_loss(eps, hat, bits) == pytest.approx((4.625 + 4.0) / 2, abs=1e-15)


def test_noise_loss_needs_a_masked_position():
    with pytest.raises(DataError):
        noise_loss(np.zeros(3), np.zeros(3), np.zeros(3))


def test_mask_loss_at_zero_logits_is_ln2():
    bits = (np.random.default_rng(0).random((4, 9)) < 0.5).astype(int)
    assert abs(mask_loss(np.zeros((4, 9)), bits) - math.log(2)) < 1e-12


def test_mask_loss_clamped_gradient():
    value, grad = mask_loss(np.array([-100.0, 100.0, 0.0]), np.array([1, 0, 1]), return_grad=True)
    assert math.isfinite(value)
    assert value == pytest.approx((-2 * math.log(1e-7) + math.log(2)) / 3, rel=1e-9)
    assert grad[0, 0] == 0 and grad[0, 1] == 0 and grad[0, 2] == pytest.approx(-0.5 / 3)


def test_align_loss_endpoints(rng):
    ref = rng.standard_normal((6, 3))
    assert align_loss(ref, ref) == pytest.approx(0.0, abs=1e-12)
    assert align_loss(-ref, ref) == pytest.approx(2.0, abs=1e-12)
    assert align_loss(3.5 * ref, ref) == pytest.approx(0.0, abs=1e-12)
    assert align_loss(np.zeros((6, 3)), ref) == pytest.approx(1.0)


@settings(max_examples=50)
@given(arrays(np.float64, (2, 5, 3), elements=st.floats(-10, 10)), arrays(np.float64, (5, 3), elements=st.floats(-10, 10)))
def test_align_loss_range(e, ref):
    if np.any(np.linalg.norm(ref, axis=1) == 0):
        return
    v = align_loss(e, ref)
    assert -1e-12 <= v <= 2 + 1e-12


@pytest.mark.parametrize("which", ["noise", "mask", "align"])
def test_loss_gradients(which, rng):
    bits = np.array([[1, 0, 1, 1, 0], [0, 1, 0, 0, 1]])
    if which == "noise":
        eps, hat = rng.standard_normal((2, 5)), rng.standard_normal((2, 5))
        f = lambda: noise_loss(eps, hat, bits)
        _, g = noise_loss(eps, hat, bits, return_grad=True)
        x = hat
    elif which == "mask":
        x = rng.standard_normal((2, 5)) * 3
        f = lambda: mask_loss(x, bits)
        _, g = mask_loss(x, bits, return_grad=True)
    else:
        x, ref = rng.standard_normal((2, 5, 3)), rng.standard_normal((5, 3))
        f = lambda: align_loss(x, ref)
        _, g = align_loss(x, ref, return_grad=True)
    assert np.allclose(g, _fd(f, x), atol=1e-8)


def test_loss_decomposition(rng):
    cfg = ModelConfig(8, 16, 2, 2, 4, 20)
    params = init_parameters(cfg, 0, dtype=np.float64)
    for _, arr in params.items():
        arr += rng.normal(0, 0.1, arr.shape)
    ref = ReferenceEmbeddings(rng.standard_normal((8, 4)))
    schedule = build_schedule(20)
    batch = rng.standard_normal((5, 8))
    bits, t, eps = sample_corruption(batch, schedule, rng)
    (total, noise, mask, align), _ = compute_loss(params, batch, bits, t, eps, schedule, TrainConfig(T=20), ref)
    assert total == noise + 0.3 * mask + 0.1 * align
    assert 0 <= align <= 2


# optimizer -----------------------------------------------------------------


def test_adam_matches_scalar_reference(rng):
    p = {"w": rng.standard_normal(4), "b": rng.standard_normal(1)}
    ref = {k: [float(x) for x in v] for k, v in p.items()}
    m = {k: [0.0] * len(v) for k, v in ref.items()}
    v2 = {k: [0.0] * len(v) for k, v in ref.items()}
    state = AdamState()
    lr, b1, b2, eps = 1e-2, 0.9, 0.999, 1e-8
    for step in range(1, 51):
        grads = {k: rng.standard_normal(a.shape) for k, a in p.items()}
        adam_update(p, grads, state, lr)
        for k in ref:
            for i in range(len(ref[k])):
                g = float(grads[k][i])
                m[k][i] = b1 * m[k][i] + (1 - b1) * g
                v2[k][i] = b2 * v2[k][i] + (1 - b2) * g * g
                mh = m[k][i] / (1 - b1**step)
                vh = v2[k][i] / (1 - b2**step)
                ref[k][i] -= lr * mh / (math.sqrt(vh) + eps)
    for k in p:
        assert np.allclose(p[k], ref[k], rtol=0, atol=1e-12)
    assert state.step == 50


def test_adam_first_step_moves_by_lr():
    p = {"w": np.array([1.0, -1.0, 0.5])}
    adam_update(p, {"w": np.array([3.0, -0.2, 1e-3])}, AdamState(), 0.1)
    assert np.allclose(p["w"], [0.9, -0.9, 0.4], atol=1e-5)


def test_clip_gradients():
    g = {"a": np.array([3.0]), "b": np.array([4.0])}
    assert clip_gradients(g, 1.0) == 5.0
    assert math.isclose(math.hypot(g["a"][0], g["b"][0]), 1.0)
    g = {"a": np.array([0.3])}
    clip_gradients(g, 1.0)
    assert g["a"][0] == 0.3


# training loop -------------------------------------------------------------


def test_train_config_validation():
    for kwargs in ({"lr": 0}, {"epochs": 0}, {"lambda_mask": -1}, {"val_fraction": 1.0}, {"max_grad_norm": 0}):
        with pytest.raises(ConfigError):
            TrainConfig(**kwargs)


def test_sample_corruption_shapes_and_determinism():
    s = build_schedule(30)
    batch = np.zeros((6, 10))
    a = sample_corruption(batch, s, np.random.default_rng(1))
    b = sample_corruption(batch, s, np.random.default_rng(1))
    for x, y in zip(a, b):
        assert np.array_equal(x, y)
    bits, t, eps = a
    assert bits.shape == (6, 10) and np.all((bits.sum(1) >= 1) & (bits.sum(1) <= 9))
    assert np.all((t >= 1) & (t <= 30)) and eps.shape == (6, 10)


def test_train_step_without_ref_ignores_alignment(rng):
    cfg = ModelConfig(8, 8, 2, 2, 4, 10)
    params = init_parameters(cfg, 0)
    state = AdamState()
    before = params["align_w2"].copy()
    report = train_step(rng.standard_normal((4, 8)), params, state, TrainConfig(T=10), build_schedule(10), None, rng)
    assert report.align == 0.0 and report.total == pytest.approx(report.noise + 0.3 * report.mask)
    assert np.array_equal(params["align_w2"], before)


def _city():
    return generate_synthetic_city(12, 24, 3, 0.1, 0, n_indicators=2)


def test_train_writes_outputs_and_is_deterministic(tmp_path):
    mat, ref = _city()
    cfg = TrainConfig(epochs=3, batch_size=8, T=20, val_every=1)
    mc = ModelConfig(12, 8, 2, 2, 3, 20)
    a = train(mat, cfg, ref, out_dir=tmp_path / "a", model_config=mc)
    b = train(mat, cfg, ref, out_dir=tmp_path / "b", model_config=mc)
    for name in ("final.ckpt", "best.ckpt", "loss_curve.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert verify_checkpoint(tmp_path / "a" / "best.ckpt")
    with open(tmp_path / "a" / "loss_curve.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [int(r["epoch"]) for r in rows] == [1, 2, 3]
    assert len(a.val_history) == 3
    best, _ = load_checkpoint(tmp_path / "a" / "best.ckpt")
    assert np.array_equal(best.flat(), a.best_params.flat())
    assert a.curve == b.curve


def test_train_different_seed_differs():
    mat, ref = _city()
    mc = ModelConfig(12, 8, 2, 2, 3, 20)
    a = train(mat, TrainConfig(epochs=1, batch_size=8, T=20, seed=0), ref, model_config=mc)
    b = train(mat, TrainConfig(epochs=1, batch_size=8, T=20, seed=1), ref, model_config=mc)
    assert not np.array_equal(a.params.flat(), b.params.flat())


def test_train_reduces_loss():
    mat, ref = _city()
    res = train(mat, TrainConfig(epochs=40, batch_size=8, T=20, lr=3e-3, val_every=5), ref,
                model_config=ModelConfig(12, 16, 2, 2, 3, 20))
    first = np.mean([r.total for r in res.curve[:5]])
    last = np.mean([r.total for r in res.curve[-5:]])
    assert last < first


def test_train_rejects_bad_inputs():
    mat, ref = _city()
    with pytest.raises(DataError):
        train(mat.select(["indicator"]), TrainConfig(epochs=1, T=20))
    with pytest.raises(ConfigError):
        train(mat, TrainConfig(epochs=1, T=20), model_config=ModelConfig(12, 8, 2, 2, 0, 30))
    with pytest.raises(ConfigError):
        train(mat, TrainConfig(epochs=1, T=20), ref, model_config=ModelConfig(12, 8, 2, 2, 5, 20))


def test_validation_loss_is_fixed(rng):
    cfg = ModelConfig(8, 8, 2, 2, 0, 20)
    params = init_parameters(cfg, 0)
    data = rng.standard_normal((3, 8))
    s = build_schedule(20)
    assert validation_loss(params, data, s, 4) == validation_loss(params, data, s, 4)
