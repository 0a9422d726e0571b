"""von Mises-Fisher utilities on the unit hypersphere S^{n-1}.

The modified Bessel function is evaluated in log space so that the
normalizer stays finite for concentrations up to ~1e3 and ambient
dimensions up to a few hundred.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln, logsumexp

from .numerics import make_rng

_DEBYE_MIN_ORDER = 50.0
_UNIT_TOL = 1e-6


class VmfError(ValueError):
    pass


@dataclass(frozen=True)
class VmfParams:
    mu: np.ndarray
    kappa: float

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=np.float64)
        if mu.ndim != 1 or mu.size < 2:
            raise VmfError("mu must be a vector with dim >= 2")
        if abs(np.linalg.norm(mu) - 1.0) > 1e-10:
            raise VmfError("mu must be a unit vector")
        if not self.kappa >= 0:
            raise VmfError("kappa must be non-negative")
        object.__setattr__(self, "mu", mu)

    @property
    def dim(self) -> int:
        return self.mu.size


def _log_iv_series(nu: float, x: float) -> float:
    # all terms positive, so log-sum-exp is stable for any x
    k_peak = 0.5 * (np.sqrt(nu * nu + x * x) - nu)
    n_terms = int(k_peak + 12.0 * np.sqrt(k_peak + 1.0) + 40)
    k = np.arange(n_terms, dtype=np.float64)
    terms = (2 * k + nu) * (np.log(x) - np.log(2.0)) - gammaln(k + 1) - gammaln(k + nu + 1)
    return float(logsumexp(terms))


def _log_iv_debye(nu: float, x: float) -> float:
    z = x / nu
    s = np.sqrt(1.0 + z * z)
    t = 1.0 / s
    eta = s + np.log(x) - np.log(nu) - np.log1p(s)
    t2 = t * t
    u1 = t * (3 - 5 * t2) / 24
    u2 = t2 * (81 - 462 * t2 + 385 * t2**2) / 1152
    u3 = t**3 * (30375 - 369603 * t2 + 765765 * t2**2 - 425425 * t2**3) / 414720
    u4 = t2**2 * (
        4465125 - 94121676 * t2 + 349922430 * t2**2 - 446185740 * t2**3 + 185910725 * t2**4
    ) / 39813120
    corr = 1 + u1 / nu + u2 / nu**2 + u3 / nu**3 + u4 / nu**4
    return float(nu * eta - 0.5 * np.log(2 * np.pi * nu) - 0.5 * np.log(s) + np.log(corr))


def log_bessel_iv(nu: float, x: float) -> float:
    """log I_nu(x) for nu >= 0, x >= 0 (returns -inf at x = 0 for nu > 0)."""
    if nu < 0 or x < 0:
        raise VmfError("log_bessel_iv needs nu >= 0 and x >= 0")
    if x == 0:
        return 0.0 if nu == 0 else -np.inf
    if nu >= _DEBYE_MIN_ORDER:
        return _log_iv_debye(nu, x)
    return _log_iv_series(nu, x)


def _check_args(dim: int, kappa: float) -> None:
    if dim < 2:
        raise VmfError(f"dimension must be >= 2, got {dim}")
    if not kappa >= 0:
        raise VmfError(f"kappa must be non-negative, got {kappa}")


def log_sphere_area(dim: int) -> float:
    """log surface area of S^{dim-1}."""
    return float(np.log(2.0) + 0.5 * dim * np.log(np.pi) - gammaln(0.5 * dim))


def log_normalizer(dim: int, kappa: float) -> float:
    """log C_n(kappa), so that C_n(kappa) exp(kappa mu.x) integrates to 1 on S^{n-1}."""
    _check_args(dim, kappa)
    if kappa == 0:
        return -log_sphere_area(dim)
    nu = 0.5 * dim - 1.0
    return float(
        nu * np.log(kappa) - 0.5 * dim * np.log(2 * np.pi) - log_bessel_iv(nu, kappa)
    )


def mean_resultant_length(dim: int, kappa: float) -> float:
    """A_n(kappa) = I_{n/2}(kappa) / I_{n/2-1}(kappa), the expected mu.x."""
    _check_args(dim, kappa)
    if kappa == 0:
        return 0.0
    return float(np.exp(log_bessel_iv(0.5 * dim, kappa) - log_bessel_iv(0.5 * dim - 1, kappa)))


def entropy(dim: int, kappa: float) -> float:
    """Differential entropy with respect to the surface measure."""
    _check_args(dim, kappa)
    return -log_normalizer(dim, kappa) - kappa * mean_resultant_length(dim, kappa)


def log_pdf(x, params: VmfParams) -> np.ndarray | float:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.dim:
        raise VmfError(f"expected dimension {params.dim}, got {x.shape[-1]}")
    if np.any(np.abs(np.linalg.norm(x, axis=-1) - 1.0) > _UNIT_TOL):
        raise VmfError("log_pdf requires unit-norm inputs")
    out = log_normalizer(params.dim, params.kappa) + params.kappa * (x @ params.mu)
    return float(out) if np.ndim(out) == 0 else out


def _sample_cosines(dim: int, kappa: float, count: int, rng: np.random.Generator) -> np.ndarray:
    # Wood (1994) rejection sampler for w = mu.x
    m = dim - 1
    b = m / (np.sqrt(4.0 * kappa**2 + m**2) + 2.0 * kappa)
    x0 = (1.0 - b) / (1.0 + b)
    c = kappa * x0 + m * np.log(1.0 - x0**2)
    out = np.empty(count)
    filled = 0
    while filled < count:
        need = count - filled
        n_try = max(16, int(need * 1.3))
        z = rng.beta(0.5 * m, 0.5 * m, size=n_try)
        w = (1.0 - (1.0 + b) * z) / (1.0 - (1.0 - b) * z)
        u = rng.uniform(size=n_try)
        ok = kappa * w + m * np.log(1.0 - x0 * w) - c >= np.log(u)
        acc = w[ok][:need]
        out[filled : filled + acc.size] = acc
        filled += acc.size
    return out


def sample(params: VmfParams, count: int, rng: np.random.Generator | int) -> np.ndarray:
    """Draw ``count`` unit vectors from vMF(mu, kappa); returns shape (count, dim)."""
    if count < 1:
        raise VmfError("count must be >= 1")
    if not isinstance(rng, np.random.Generator):
        rng = make_rng(rng)
    n = params.dim
    w = _sample_cosines(n, params.kappa, count, rng)
    v = rng.standard_normal((count, n - 1))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    x = np.concatenate([w[:, None], np.sqrt(np.clip(1.0 - w**2, 0.0, None))[:, None] * v], axis=1)
    # Householder reflection taking e1 onto mu
    u = -params.mu.copy()
    u[0] += 1.0
    un = u @ u
    if un > 1e-24:
        x = x - np.outer(x @ u, u) * (2.0 / un)
    return x / np.linalg.norm(x, axis=1, keepdims=True)
