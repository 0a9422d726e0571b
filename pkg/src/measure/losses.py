"""Training objectives and the information-theoretic identity checks behind them.

The contrastive term follows the printed negatives-only form: for anchor i the
denominator runs over N(i) (different-class samples) only. Setting
``denominator="all-others"`` gives the usual SupCon denominator instead.
"""
from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass
from fractions import Fraction
from typing import Literal, Mapping, Sequence

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, field_validator

from . import stein, vmf


class DegenerateBatchError(ValueError):
    pass


class LossConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    tau: float = 0.07
    alpha: float = 1e-3
    levels: tuple[int, ...] = (3, 4, 5)
    denominator: Literal["negatives-only", "all-others"] = "negatives-only"
    # "sum": the entropy term sits inside the sum over anchors, so it enters once
    # per batch sample; "mean": it enters once per batch
    entropy_reduction: Literal["sum", "mean"] = "sum"
    # only used by the identity checks; training uses the alpha form
    beta: float = 1.0
    lambda1: float = 1.0
    lambda2: float = 1.0

    @field_validator("tau")
    @classmethod
    def _tau(cls, v):
        if not v > 0:
            raise ValueError("tau must be positive")
        return v

    @field_validator("alpha")
    @classmethod
    def _alpha(cls, v):
        if not v >= 0:
            raise ValueError("alpha must be non-negative")
        return v

    @field_validator("levels")
    @classmethod
    def _levels(cls, v):
        if len(v) == 0:
            raise ValueError("at least one level is required")
        if len(set(v)) != len(v):
            raise ValueError("levels must be distinct")
        return tuple(v)


@dataclass
class BatchEmbeddings:
    """Unit embeddings per level for one batch, with class and domain labels."""

    z: dict[int, torch.Tensor]
    y: torch.Tensor
    d: torch.Tensor

    def __post_init__(self):
        n = self.y.shape[0]
        if self.d.shape[0] != n:
            raise ValueError("class and domain labels differ in length")
        for j, zj in self.z.items():
            if zj.shape[0] != n:
                raise ValueError(f"level {j} has {zj.shape[0]} rows, expected {n}")

    def positive_mask(self) -> torch.Tensor:
        same = self.y[:, None] == self.y[None, :]
        return same & ~torch.eye(self.y.shape[0], dtype=torch.bool, device=self.y.device)

    def negative_mask(self) -> torch.Tensor:
        return self.y[:, None] != self.y[None, :]


@dataclass
class LossTerms:
    loss: torch.Tensor
    contrastive: torch.Tensor
    entropy: torch.Tensor
    skipped: int


def _as_tensor(value, like: torch.Tensor) -> torch.Tensor:
    if isinstance(value, torch.Tensor):
        return value
    return torch.as_tensor(0.0 if value is None else value, dtype=like.dtype, device=like.device)


def contrastive_term(
    z: torch.Tensor,
    y: torch.Tensor,
    tau: float,
    denominator: str = "negatives-only",
) -> tuple[torch.Tensor, int]:
    """Sum over anchors of the supervised contrastive term; returns (value, skipped anchors)."""
    n = z.shape[0]
    eye = torch.eye(n, dtype=torch.bool, device=z.device)
    same = y[:, None] == y[None, :]
    pos = same & ~eye
    if denominator == "negatives-only":
        denom_mask = ~same
    elif denominator == "all-others":
        denom_mask = ~eye
    else:
        raise ValueError(f"unknown denominator {denominator!r}")
    n_pos = pos.sum(dim=1)
    valid = (n_pos > 0) & denom_mask.any(dim=1)
    skipped = int((~valid).sum())
    if skipped == n:
        raise DegenerateBatchError("degenerate batch: no anchor has both positives and negatives")

    logits = z @ z.T / tau
    # finite fill keeps gradients clean for skipped rows
    log_denom = torch.logsumexp(logits.masked_fill(~denom_mask, -1e30), dim=1)
    log_ratio = (logits - log_denom[:, None]) * pos
    per_anchor = -log_ratio.sum(dim=1) / n_pos.clamp(min=1)
    return torch.where(valid, per_anchor, torch.zeros_like(per_anchor)).sum(), skipped


def stein_entropy_term(z: torch.Tensor, scores, domains, cfg: stein.KernelConfig | None = None) -> torch.Tensor:
    """Differentiable surrogate -sum_i w_i (g_i . z_i) with the scores held constant."""
    cfg = cfg or stein.KernelConfig()
    g = torch.as_tensor(np.asarray(scores), dtype=z.dtype, device=z.device)
    w = torch.as_tensor(stein.domain_weights(np.asarray(domains), cfg), dtype=z.dtype, device=z.device)
    return -(w * (g * z).sum(dim=1)).sum()


def entropy_surrogates(
    batch: BatchEmbeddings, cfg: stein.KernelConfig | None = None, levels: Sequence[int] | None = None
) -> dict[int, torch.Tensor]:
    """Per-level H(z_j | d) surrogates; Stein scores are estimated on detached embeddings."""
    cfg = cfg or stein.KernelConfig()
    d = batch.d.cpu().numpy()
    out = {}
    for j in levels if levels is not None else sorted(batch.z):
        zj = batch.z[j]
        est = stein.conditional_entropy_surrogate(zj.detach().cpu().double().numpy(), d, cfg)
        out[j] = stein_entropy_term(zj, est.scores, d, cfg)
    return out


def supcon_entropy_loss(
    z: torch.Tensor,
    y: torch.Tensor,
    cfg: LossConfig,
    surrogate=None,
) -> LossTerms:
    """Single-level loss: contrastive sum minus alpha times the entropy surrogate."""
    con, skipped = contrastive_term(z, y, cfg.tau, cfg.denominator)
    ent = _as_tensor(surrogate, con)
    if cfg.entropy_reduction == "sum":
        ent = ent * y.shape[0]
    loss = con - cfg.alpha * ent if cfg.alpha != 0 else con
    return LossTerms(loss=loss, contrastive=con, entropy=ent, skipped=skipped)


def multiscale_loss(
    batch: BatchEmbeddings,
    cfg: LossConfig,
    surrogates: Mapping[int, torch.Tensor] | None = None,
) -> LossTerms:
    missing = [j for j in cfg.levels if j not in batch.z]
    if missing:
        raise KeyError(f"levels {missing} missing from batch")
    surrogates = surrogates or {}
    parts = [supcon_entropy_loss(batch.z[j], batch.y, cfg, surrogates.get(j)) for j in cfg.levels]
    # fixed summation order over cfg.levels
    loss, con, ent = parts[0].loss, parts[0].contrastive, parts[0].entropy
    for p in parts[1:]:
        loss, con, ent = loss + p.loss, con + p.contrastive, ent + p.entropy
    return LossTerms(loss=loss, contrastive=con, entropy=ent, skipped=sum(p.skipped for p in parts))


def vmf_alignment_bound(z_i, z_p, kappa: float) -> float:
    """Upper bound on H(z_i | v_p) under a vMF variational family centred on z_p."""
    z_i = np.asarray(z_i, dtype=np.float64)
    z_p = np.asarray(z_p, dtype=np.float64)
    if z_i.shape != z_p.shape:
        raise ValueError(f"paired embeddings differ in shape: {z_i.shape} vs {z_p.shape}")
    if not kappa > 0:
        raise ValueError("kappa must be positive")
    cos = np.sum(z_i * z_p, axis=-1)
    return float(-kappa * np.mean(cos) - vmf.log_normalizer(z_i.shape[-1], kappa))


def lagrangian_identity_check(H_z_given_vp, H_z, H_z_given_d, lambda1, lambda2) -> tuple[float, float]:
    """(general entropy form, simplified form with lambda = lambda1); equal when lambda2 == 1."""
    general = (lambda1 + 1) * H_z_given_vp + (lambda2 - 1) * H_z - lambda2 * H_z_given_d
    simplified = (lambda1 + 1) * H_z_given_vp - H_z_given_d
    return general, simplified


class _LogCombination:
    """Exact linear combination sum_r c_r log(r) with rational r and c_r."""

    def __init__(self):
        self.terms: dict[Fraction, Fraction] = defaultdict(Fraction)

    def add(self, coef: Fraction, arg: Fraction) -> None:
        if coef != 0 and arg != 1:
            self.terms[arg] += coef

    def __sub__(self, other: "_LogCombination") -> "_LogCombination":
        out = _LogCombination()
        for r, c in self.terms.items():
            out.add(c, r)
        for r, c in other.terms.items():
            out.add(-c, r)
        return out

    def is_zero(self) -> bool:
        return all(c == 0 for c in self.terms.values())

    def value(self) -> float:
        return math.fsum(float(c) * math.log(r) for r, c in self.terms.items() if c != 0)


@dataclass
class MIDecompositionReport:
    I_z_v_given_vp: float
    H_z_given_vp: float
    H_z_given_v_vp: float
    H_z: float
    difference: float
    exact_zero: bool


def _as_fraction_table(a, name: str) -> list[list[Fraction]]:
    rows = a.tolist() if isinstance(a, np.ndarray) else [list(r) for r in a]
    if not rows or any(len(r) != len(rows[0]) for r in rows):
        raise ValueError(f"{name} must be a non-empty rectangular table")
    if len(rows) * len(rows[0]) > 1 << 16:
        raise ValueError(f"{name} is too large to enumerate")
    out = []
    for r in rows:
        fr = []
        for x in r:
            if isinstance(x, float) and not math.isfinite(x):
                raise ValueError(f"{name} has non-finite entries")
            fr.append(Fraction(x))
        out.append(fr)
    return out


def mutual_information_decomposition_check(joint_v_vp, encoder) -> MIDecompositionReport:
    """Enumerate I(z; v | v_p) and H(z | v_p) exactly on a finite toy space.

    ``joint_v_vp[a][b]`` is p(v=a, v_p=b); ``encoder[a][c]`` is p(z=c | v=a).
    Both quantities are accumulated as exact rational combinations of logs, so
    for a deterministic encoder the difference cancels to exactly zero.
    """
    P = _as_fraction_table(joint_v_vp, "joint_v_vp")
    E = _as_fraction_table(encoder, "encoder")
    nv, nvp = len(P), len(P[0])
    if len(E) != nv:
        raise ValueError("encoder needs one row per value of v")
    nz = len(E[0])
    total = sum(sum(r) for r in P)
    if abs(total - 1) > 1e-12 or any(x < 0 for r in P for x in r):
        raise ValueError("joint_v_vp must be a probability table")
    P = [[x / total for x in r] for r in P]
    if any(abs(sum(r) - 1) > 1e-12 or any(x < 0 for x in r) for r in E):
        raise ValueError("encoder rows must be probability vectors")
    E = [[x / sum(r) for x in r] for r in E]

    p_vp = [sum(P[a][b] for a in range(nv)) for b in range(nvp)]
    p_z_vp = [[sum(P[a][b] * E[a][c] for a in range(nv)) for b in range(nvp)] for c in range(nz)]
    p_z = [sum(row) for row in p_z_vp]

    mi = _LogCombination()       # sum p(v,vp,z) [log p(z|v,vp) - log p(z|vp)]
    h_z_vp = _LogCombination()   # -sum p(z,vp) log p(z|vp)
    h_z_v_vp = _LogCombination()  # -sum p(v,vp,z) log p(z|v,vp)
    h_z = _LogCombination()
    for a in range(nv):
        for b in range(nvp):
            for c in range(nz):
                p = P[a][b] * E[a][c]
                if p == 0:
                    continue
                mi.add(p, E[a][c])
                mi.add(-p, p_z_vp[c][b] / p_vp[b])
                h_z_v_vp.add(-p, E[a][c])
    for c in range(nz):
        for b in range(nvp):
            if p_z_vp[c][b] > 0:
                h_z_vp.add(-p_z_vp[c][b], p_z_vp[c][b] / p_vp[b])
        if p_z[c] > 0:
            h_z.add(-p_z[c], p_z[c])
    # H(z|v_p) - I(z;v|v_p) = H(z|v,v_p), zero for a deterministic encoder
    diff = h_z_vp - mi
    exact = diff.is_zero()
    return MIDecompositionReport(
        I_z_v_given_vp=mi.value(),
        H_z_given_vp=h_z_vp.value(),
        H_z_given_v_vp=h_z_v_vp.value(),
        H_z=h_z.value(),
        difference=0.0 if exact else diff.value(),
        exact_zero=exact,
    )
