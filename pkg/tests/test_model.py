import math

import numpy as np
import pytest
import torch

from measure import gradcheck
from measure.model import (
    AugmentConfig,
    CheckpointError,
    Encoder,
    EncoderSpec,
    ParamStore,
    StageSpec,
    TrainingDivergence,
    adam_step,
    augment,
    backward,
    forward_multiscale,
    l2_normalize,
    load_encoder,
    param_checksum,
    save_encoder,
)
from measure.numerics import make_rng
from measure.pipeline import OptimConfig, RunConfig, pretrain


@pytest.fixture(scope="module")
def tiny():
    return Encoder(EncoderSpec.tiny(), seed=5).double()


def test_tiny_spec_is_small_and_three_level():
    enc = Encoder(EncoderSpec.tiny())
    assert sum(p.numel() for p in enc.parameters()) <= 2000
    assert enc.spec.taps == (3, 4, 5)


@pytest.mark.parametrize(
    "kwargs",
    [
        {"taps": (6,)},
        {"taps": (3, 3)},
        {"proj_dim": 1},
        {"stages": ()},
        {"input_length": 8},
    ],
)
def test_spec_validation(kwargs):
    with pytest.raises(ValueError):
        EncoderSpec(**kwargs)


def test_outputs_are_unit_norm(tiny):
    x = torch.randn(6, 1, 48, dtype=torch.float64)
    out = forward_multiscale(tiny, x)
    for j in (3, 4, 5):
        np.testing.assert_allclose(out.z[j].detach().norm(dim=1).numpy(), 1.0, atol=1e-12)
        assert out.r[j].shape == (6, tiny.spec.stages[j - 1].channels)


def test_shape_mismatch_and_empty_batch(tiny):
    with pytest.raises(ValueError):
        tiny(torch.zeros(2, 1, 40, dtype=torch.float64))
    with pytest.raises(ValueError):
        forward_multiscale(tiny, torch.zeros(0, 1, 48, dtype=torch.float64))


def test_zero_projection_stays_finite():
    enc = Encoder(EncoderSpec.tiny(), seed=1).double()
    with torch.no_grad():
        for head in enc.heads.values():
            head[2].weight.zero_()
            head[2].bias.zero_()
    out = enc(torch.randn(3, 1, 48, dtype=torch.float64))
    for j in (3, 4, 5):
        assert torch.all(out.u[j] == 0)
        assert torch.all(torch.isfinite(out.z[j]))


def test_duplication_and_per_sample_independence(tiny):
    x = torch.randn(4, 1, 48, dtype=torch.float64)
    both = tiny(torch.cat([x, x])).z
    for j in (3, 4, 5):
        torch.testing.assert_close(both[j][:4], both[j][4:], rtol=0, atol=0)
        singles = torch.cat([tiny(x[i : i + 1]).z[j] for i in range(4)])
        torch.testing.assert_close(both[j][:4], singles, rtol=1e-12, atol=1e-14)


def test_encoder_gradients_match_finite_differences():
    assert gradcheck.suite_encoder().passed


def test_end_to_end_gradients_match_finite_differences():
    r = gradcheck.suite_end_to_end()
    assert r.passed, r.line()


def test_normalization_jacobian_removes_radial_direction():
    assert gradcheck.suite_normalization().passed


def test_linear_case_gradient():
    gen = torch.Generator().manual_seed(0)
    X = torch.randn(7, 3, generator=gen, dtype=torch.float64)
    W = torch.randn(3, 2, generator=gen, dtype=torch.float64, requires_grad=True)
    grads = backward(((X @ W) ** 2).sum(), {"W": W})
    torch.testing.assert_close(grads["W"], 2 * X.T @ (X @ W.detach()), rtol=1e-13, atol=1e-13)


def test_zero_upstream_gives_zero_gradients(tiny):
    params = dict(tiny.named_parameters())
    z = tiny(torch.randn(2, 1, 48, dtype=torch.float64)).z[5]
    grads = backward(z, params, upstream=torch.zeros_like(z))
    assert all(torch.all(g == 0) for g in grads.values())


def _store(value=1.0):
    return ParamStore({"w": torch.full((3,), value, dtype=torch.float64)})


def test_adam_zero_gradient_no_decay_is_a_no_op():
    s = _store()
    for _ in range(5):
        adam_step(s, {"w": torch.zeros(3, dtype=torch.float64)}, lr=0.1)
    assert torch.all(s.params["w"] == 1.0)
    assert s.step == 5


def test_adam_constant_gradient_moves_by_lr():
    s = _store(0.0)
    g = torch.tensor([2.0, -0.5, 1e-3], dtype=torch.float64)
    lr = 1e-2
    prev = s.params["w"].clone()
    for _ in range(200):
        adam_step(s, {"w": g}, lr=lr)
        step = s.params["w"] - prev
        prev = s.params["w"].clone()
    torch.testing.assert_close(step, -torch.sign(g) * lr, rtol=1e-3, atol=1e-7)


def test_adam_weight_decay_only_shrinks_geometrically():
    s = _store(2.0)
    lr, wd = 0.1, 0.01
    for _ in range(10):
        adam_step(s, {"w": torch.zeros(3, dtype=torch.float64)}, lr=lr, weight_decay=wd)
    torch.testing.assert_close(s.params["w"], torch.full((3,), 2.0 * (1 - lr * wd) ** 10, dtype=torch.float64))


def test_adam_rejects_non_finite_and_mismatched_gradients():
    s = _store()
    with pytest.raises(TrainingDivergence):
        adam_step(s, {"w": torch.tensor([0.0, math.nan, 0.0], dtype=torch.float64)}, lr=0.1)
    with pytest.raises(ValueError):
        adam_step(s, {"w": torch.zeros(2, dtype=torch.float64)}, lr=0.1)
    with pytest.raises(KeyError):
        adam_step(s, {"other": torch.zeros(3, dtype=torch.float64)}, lr=0.1)


def test_adam_matches_scalar_reference():
    s = _store(0.5)
    lr, b1, b2, eps = 0.05, 0.9, 0.999, 1e-8
    w, m, v = 0.5, 0.0, 0.0
    for t, g in enumerate([0.3, -0.1, 0.7, 0.2], start=1):
        adam_step(s, {"w": torch.full((3,), g, dtype=torch.float64)}, lr=lr)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w -= lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
    assert s.params["w"][0].item() == pytest.approx(w, rel=1e-13)


# --- augmentation ------------------------------------------------------------------

def test_identity_augmentation(rng):
    x = rng.standard_normal((1, 300)).astype(np.float32)
    np.testing.assert_array_equal(augment(x, AugmentConfig.identity(), make_rng(0)), x)


def test_fixed_scale_augmentation(rng):
    x = rng.standard_normal(300).astype(np.float32)
    cfg = AugmentConfig(scale=(2.0, 2.0), shift_seconds=0.0, snr_db=(math.inf, math.inf), crop=1.0)
    np.testing.assert_array_equal(augment(x, cfg, make_rng(0)), 2 * x)


def test_augmentation_replays_with_seed(rng):
    x = rng.standard_normal((1, 3000)).astype(np.float32)
    a = augment(x, AugmentConfig(), make_rng(42))
    b = augment(x, AugmentConfig(), make_rng(42))
    assert a.tobytes() == b.tobytes()
    assert a.shape == x.shape and a.dtype == x.dtype


def test_augmentation_pads_or_crops_to_length(rng):
    x = rng.standard_normal(250)
    assert augment(x, AugmentConfig.identity(), make_rng(0), length=200).shape == (200,)
    cfg = AugmentConfig(crop=0.5, shift_seconds=0.0, snr_db=(math.inf, math.inf), scale=(1.0, 1.0))
    assert augment(x, cfg, make_rng(0), length=300).shape == (300,)
    with pytest.raises(ValueError):
        augment(rng.standard_normal(100), cfg, make_rng(0), length=400)


@pytest.mark.parametrize(
    "kwargs", [{"scale": (1.2, 0.8)}, {"snr_db": (30.0, 20.0)}, {"crop": 0.0}, {"crop": 1.5}, {"shift_seconds": -1}]
)
def test_augment_config_validation(kwargs):
    with pytest.raises(ValueError):
        AugmentConfig(**kwargs)


# --- determinism and checkpoints ------------------------------------------------------

def test_same_seed_same_initialisation():
    a, b = Encoder(EncoderSpec(), seed=3), Encoder(EncoderSpec(), seed=3)
    assert param_checksum(a) == param_checksum(b)
    assert param_checksum(a) != param_checksum(Encoder(EncoderSpec(), seed=4))


def test_twenty_step_loss_trajectory_is_reproducible(small_dataset):
    cfg = RunConfig(optim=OptimConfig(steps=20, batch_size=32), folds={"k": 4})
    cfg = cfg.model_copy(update={"info": cfg.info.model_copy(update={"every": 0})})
    a = [r["loss"] for r in pretrain(cfg, small_dataset).loss_log]
    b = [r["loss"] for r in pretrain(cfg, small_dataset).loss_log]
    assert a == b and len(a) == 20


def test_checkpoint_round_trip(tmp_path):
    spec = EncoderSpec(input_length=200, stages=(StageSpec(channels=4, width=5, stride=2), StageSpec(channels=6, width=3)),
                       taps=(1, 2), proj_hidden=8, proj_dim=3)
    enc = Encoder(spec, seed=9)
    data = save_encoder(tmp_path / "e.ckpt", enc, seed=9, step=17)
    assert data[:4] == b"MCK1"
    loaded, header = load_encoder(tmp_path / "e.ckpt")
    assert header["step"] == 17 and header["seed"] == 9
    assert loaded.spec == spec
    assert param_checksum(loaded) == param_checksum(enc)
    # re-serialising is byte-identical
    assert save_encoder(tmp_path / "f.ckpt", loaded, seed=9, step=17) == data


def test_checkpoint_errors(tmp_path):
    p = tmp_path / "bad.ckpt"
    p.write_bytes(b"NOPE" + b"\0" * 16)
    with pytest.raises(CheckpointError, match="bad magic"):
        load_encoder(p)
    with pytest.raises(FileNotFoundError):
        load_encoder(tmp_path / "missing.ckpt")
    enc = Encoder(EncoderSpec.tiny())
    data = save_encoder(tmp_path / "t.ckpt", enc, 0, 0)
    (tmp_path / "t.ckpt").write_bytes(data[:-8])
    with pytest.raises(CheckpointError, match="truncated"):
        load_encoder(tmp_path / "t.ckpt")


def test_l2_normalize_guard():
    u = torch.zeros(2, 3, dtype=torch.float64)
    assert torch.all(l2_normalize(u) == 0)
