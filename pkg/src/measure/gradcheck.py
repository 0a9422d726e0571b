"""Finite-difference checks of every differentiable path used in training.

Each suite compares reverse-mode gradients against central differences in
64-bit arithmetic. Stein scores are estimated once at the base point and held
constant, which is exactly how they enter training.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from . import losses, stein
from .losses import BatchEmbeddings, LossConfig
from .model import Encoder, EncoderSpec, StageSpec, l2_normalize
from .numerics import derive_seed
from .staging import StagingConfig, StagingModel


@dataclass
class SuiteResult:
    name: str
    max_rel_error: float
    tolerance: float
    n_checked: int
    seconds: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_error) and self.max_rel_error < self.tolerance)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} {self.name}: max rel err {self.max_rel_error:.2e} "
                f"(tol {self.tolerance:.0e}, {self.n_checked} coords, {self.seconds:.2f}s)")


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-2) -> float:
    """Elementwise relative error with a floor at ``floor`` times the largest gradient.

    The floor keeps coordinates whose gradient is essentially zero from being
    judged on round-off alone.
    """
    a = np.ravel(analytic)
    n = np.ravel(numeric)
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor * scale)
    return float(np.max(np.abs(a - n) / denom))


def central_differences(f: Callable[[], torch.Tensor], tensors: list[torch.Tensor], h: float = 1e-6) -> list[np.ndarray]:
    """Numerical gradient of the scalar ``f()`` w.r.t. each tensor, perturbed in place."""
    out = []
    with torch.no_grad():
        for t in tensors:
            g = np.zeros(t.numel())
            flat = t.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                fp = f().item()
                flat[i] = orig - h
                fm = f().item()
                flat[i] = orig
                g[i] = (fp - fm) / (2 * h)
            out.append(g.reshape(tuple(t.shape)))
    return out


def _compare(name: str, f, tensors: list[torch.Tensor], tol: float, h: float = 1e-6) -> SuiteResult:
    t0 = time.perf_counter()
    grads = torch.autograd.grad(f(), tensors)
    analytic = np.concatenate([g.detach().numpy().ravel() for g in grads])
    numeric = np.concatenate([g.ravel() for g in central_differences(f, tensors, h)])
    return SuiteResult(name, relative_error(analytic, numeric), tol, analytic.size, time.perf_counter() - t0)


def _toy_batch(n_per_domain: int, seed: int) -> tuple[torch.Tensor, torch.Tensor]:
    # two domains, three classes, every class present in each domain
    gen = np.random.default_rng(seed)
    y = np.tile(np.arange(3), 2 * n_per_domain)[: 2 * n_per_domain]
    d = np.repeat([1, 2], n_per_domain)
    gen.shuffle(y)
    return torch.as_tensor(y), torch.as_tensor(d)


def suite_loss_wrt_z(seed: int = 0) -> SuiteResult:
    """Single-level objective w.r.t. the embeddings, entropy term included."""
    y, d = _toy_batch(6, seed)
    gen = torch.Generator().manual_seed(seed)
    z = l2_normalize(torch.randn(12, 4, generator=gen, dtype=torch.float64)).requires_grad_(True)
    cfg = LossConfig(alpha=0.05, tau=0.5)
    kcfg = stein.KernelConfig()
    scores = stein.conditional_entropy_surrogate(z.detach().numpy(), d.numpy(), kcfg).scores

    def f():
        ent = losses.stein_entropy_term(z, scores, d.numpy(), kcfg)
        return losses.supcon_entropy_loss(z, y, cfg, ent).loss

    return _compare("loss wrt embeddings", f, [z], 1e-5)


def suite_stein_toy(seed: int = 0) -> SuiteResult:
    """Two-parameter encoder z = normalize(phi * v) under the frozen-score surrogate.

    Also checks the closed form  d(-S)/dphi = sum_i w_i g_i . dz_i/dphi.
    """
    gen = torch.Generator().manual_seed(seed)
    v = torch.randn(16, 2, generator=gen, dtype=torch.float64)
    d = np.repeat([1, 2], 8)
    phi = torch.tensor([1.3, 0.7], dtype=torch.float64, requires_grad=True)
    kcfg = stein.KernelConfig()
    with torch.no_grad():
        z0 = l2_normalize(phi * v)
    scores = stein.conditional_entropy_surrogate(z0.numpy(), d, kcfg).scores

    def f():
        return -losses.stein_entropy_term(l2_normalize(phi * v), scores, d, kcfg)

    res = _compare("stein surrogate (toy encoder)", f, [phi], 1e-5)
    # closed form via per-sample Jacobians
    w = stein.domain_weights(d, kcfg)
    jac = torch.autograd.functional.jacobian(lambda p: l2_normalize(p * v), phi.detach())  # (N, 2, 2)
    closed = np.einsum("i,ik,ikp->p", w, scores, jac.numpy())
    (auto,) = torch.autograd.grad(f(), [phi])
    res.max_rel_error = max(res.max_rel_error, relative_error(auto.numpy(), closed))
    return res


def suite_normalization(seed: int = 0) -> SuiteResult:
    """Jacobian of z = u/|u| against differences, plus u . (J^T g) = 0."""
    gen = torch.Generator().manual_seed(seed)
    u = torch.randn(5, 6, generator=gen, dtype=torch.float64, requires_grad=True)
    c = torch.randn(5, 6, generator=gen, dtype=torch.float64)

    def f():
        return (l2_normalize(u) * c).sum()

    res = _compare("normalization", f, [u], 1e-5)
    (jt_g,) = torch.autograd.grad(f(), [u])
    radial = (jt_g * u).sum(dim=1).abs() / (jt_g.norm(dim=1) * u.norm(dim=1))
    res.max_rel_error = max(res.max_rel_error, float(radial.detach().max()))
    return res


def suite_encoder(seed: int = 0) -> SuiteResult:
    """Random two-stage encoder, 4 samples, fixed linear test loss on z."""
    spec = EncoderSpec(
        input_length=24,
        stages=(StageSpec(channels=3, width=5, stride=2), StageSpec(channels=4, width=3, pool=2)),
        taps=(1, 2),
        proj_hidden=6,
        proj_dim=3,
    )
    enc = Encoder(spec, seed=derive_seed(seed, "gradcheck-encoder")).double()
    _randomize_biases(enc, seed)
    gen = torch.Generator().manual_seed(seed)
    x = torch.randn(4, 1, 24, generator=gen, dtype=torch.float64)
    coef = {t: torch.randn(4, 3, generator=gen, dtype=torch.float64) for t in spec.taps}

    def f():
        out = enc(x)
        return sum((out.z[t] * coef[t]).sum() for t in spec.taps)

    return _compare("encoder", f, list(enc.parameters()), 1e-5)


def _randomize_biases(module: torch.nn.Module, seed: int) -> None:
    # zero biases would hide bias-gradient bugs
    gen = torch.Generator().manual_seed(derive_seed(seed, "bias"))
    with torch.no_grad():
        for name, p in module.named_parameters():
            if name.endswith("bias"):
                p.copy_(0.1 * torch.randn(p.shape, generator=gen, dtype=p.dtype))


def suite_end_to_end(seed: int = 0, alpha: float = 0.05) -> SuiteResult:
    """Multi-scale objective w.r.t. every parameter of a 3-level encoder (< 2k parameters)."""
    spec = EncoderSpec.tiny()
    enc = Encoder(spec, seed=derive_seed(seed, "gradcheck-e2e")).double()
    _randomize_biases(enc, seed)
    n_params = sum(p.numel() for p in enc.parameters())
    if n_params > 2000:
        raise AssertionError(f"gradient-check encoder has {n_params} parameters")
    y, d = _toy_batch(5, seed)
    gen = torch.Generator().manual_seed(seed + 1)
    x = torch.randn(10, 1, spec.input_length, generator=gen, dtype=torch.float64)
    cfg = LossConfig(alpha=alpha, tau=0.5, levels=spec.taps)
    kcfg = stein.KernelConfig()
    with torch.no_grad():
        z0 = enc(x).z
    scores = {j: stein.conditional_entropy_surrogate(z0[j].numpy(), d.numpy(), kcfg).scores for j in spec.taps}

    def f():
        batch = BatchEmbeddings(enc(x).z, y, d)
        surr = {j: losses.stein_entropy_term(batch.z[j], scores[j], d.numpy(), kcfg) for j in spec.taps}
        return losses.multiscale_loss(batch, cfg, surr).loss

    return _compare("end-to-end multi-scale loss", f, list(enc.parameters()), 1e-4)


def suite_staging(seed: int = 0) -> SuiteResult:
    """Cross-entropy of the full staging head on 2-step sequences."""
    cfg = StagingConfig(seq_len=1, d_model=4, n_heads=2, ff_hidden=6)
    torch.manual_seed(derive_seed(seed, "gradcheck-staging") % (1 << 63))
    model = StagingModel({3: 3, 4: 2}, cfg).double()
    _randomize_biases(model, seed)
    gen = torch.Generator().manual_seed(seed)
    H = {3: torch.randn(3, 2, 3, generator=gen, dtype=torch.float64),
         4: torch.randn(3, 2, 2, generator=gen, dtype=torch.float64)}
    y = torch.tensor([0, 2, 4])

    def f():
        return F.cross_entropy(model(H).aggregate, y)

    return _compare("staging head", f, list(model.parameters()), 1e-5)


SUITES: dict[str, Callable[[int], SuiteResult]] = {
    "loss_z": suite_loss_wrt_z,
    "stein_toy": suite_stein_toy,
    "normalization": suite_normalization,
    "encoder": suite_encoder,
    "end_to_end": suite_end_to_end,
    "staging": suite_staging,
}


def run_all(seed: int = 0) -> list[SuiteResult]:
    torch.set_default_dtype(torch.float64)
    try:
        return [fn(seed) for fn in SUITES.values()]
    finally:
        torch.set_default_dtype(torch.float32)
