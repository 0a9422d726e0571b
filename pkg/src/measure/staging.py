"""Sequence classifier trained on top of the frozen multi-scale encoder.

Each level j gets its own head: input projection, sinusoidal positions, one
self-attention block, temporal-attention pooling and a linear layer producing
five logits. Training applies softmax cross-entropy to the sum of the level
logits; prediction takes the argmax of that sum.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict

from . import metrics
from .data import N_CLASSES, Dataset, sequence_windows
from .model import (
    CheckpointError,
    Encoder,
    ParamStore,
    TrainingDivergence,
    _pack_checkpoint,
    _unpack_checkpoint,
    adam_step,
    backward,
)
from .numerics import derive_seed, make_rng


class StagingConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    seq_len: int = 10
    d_model: int = 32
    n_heads: int = 2
    ff_hidden: int = 64
    steps: int = 300
    batch_size: int = 64
    lr: float = 1e-3
    weight_decay: float = 1e-4
    eval_every: int = 50
    class_weights: bool = False


@dataclass
class SeqFeatures:
    H: dict[int, torch.Tensor]                  # level -> (L+1, C_j)
    pooled: dict[int, torch.Tensor] = field(default_factory=dict)


@dataclass
class StageOutputs:
    level_logits: dict[int, torch.Tensor]       # level -> (B, 5)
    aggregate: torch.Tensor                     # (B, 5)
    prediction: torch.Tensor                    # (B,)


def sinusoidal_positions(length: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float64)[:, None]
    i = torch.arange(0, dim, 2, dtype=torch.float64)
    angle = pos / torch.pow(10000.0, i / dim)
    pe = torch.zeros(length, dim, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(angle)
    pe[:, 1::2] = torch.cos(angle[:, : dim // 2])
    return pe.to(dtype)


class TemporalBlock(nn.Module):
    """Pre-norm self-attention followed by a pointwise feed-forward, both residual."""

    def __init__(self, d_model: int, n_heads: int = 2, ff_hidden: int = 64):
        super().__init__()
        if d_model % n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        self.n_heads = n_heads
        self.norm1 = nn.LayerNorm(d_model)
        self.q = nn.Linear(d_model, d_model)
        self.k = nn.Linear(d_model, d_model)
        self.v = nn.Linear(d_model, d_model)
        self.o = nn.Linear(d_model, d_model)
        self.norm2 = nn.LayerNorm(d_model)
        self.ff1 = nn.Linear(d_model, ff_hidden)
        self.ff2 = nn.Linear(ff_hidden, d_model)
        self.last_attention: torch.Tensor | None = None

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        if h.dim() != 3 or h.shape[1] == 0:
            raise ValueError(f"expected a non-empty (B, S, D) sequence, got {tuple(h.shape)}")
        B, S, D = h.shape
        nh, hd = self.n_heads, D // self.n_heads
        x = self.norm1(h)
        q = self.q(x).view(B, S, nh, hd).transpose(1, 2)
        k = self.k(x).view(B, S, nh, hd).transpose(1, 2)
        v = self.v(x).view(B, S, nh, hd).transpose(1, 2)
        attn = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(hd), dim=-1)
        self.last_attention = attn.detach()
        h = h + self.o((attn @ v).transpose(1, 2).reshape(B, S, D))
        return h + self.ff2(F.gelu(self.ff1(self.norm2(h))))


def attention_pool(states: torch.Tensor, scores: torch.Tensor) -> torch.Tensor:
    """Convex combination of (B, S, D) states with softmax(scores) over S."""
    w = torch.softmax(scores, dim=-1)
    return (w.unsqueeze(-1) * states).sum(dim=-2)


class TemporalAttentionPool(nn.Module):
    def __init__(self, d_model: int):
        super().__init__()
        self.proj = nn.Linear(d_model, d_model)
        self.score = nn.Linear(d_model, 1, bias=False)

    def forward(self, states: torch.Tensor) -> torch.Tensor:
        scores = self.score(torch.tanh(self.proj(states))).squeeze(-1)
        return attention_pool(states, scores)


class LevelHead(nn.Module):
    def __init__(self, in_dim: int, cfg: StagingConfig):
        super().__init__()
        self.register_buffer("feat_mean", torch.zeros(in_dim))
        self.register_buffer("feat_std", torch.ones(in_dim))
        self.inp = nn.Linear(in_dim, cfg.d_model)
        self.block = TemporalBlock(cfg.d_model, cfg.n_heads, cfg.ff_hidden)
        self.pool = TemporalAttentionPool(cfg.d_model)
        self.fc = nn.Linear(cfg.d_model, N_CLASSES)

    def forward(self, H: torch.Tensor) -> torch.Tensor:
        x = self.inp((H - self.feat_mean) / self.feat_std)
        x = x + sinusoidal_positions(x.shape[1], x.shape[2], x.dtype)
        return self.fc(self.pool(self.block(x)))


def aggregate_predict(level_logits) -> torch.Tensor:
    """argmax of the summed level logits; ties go to the lowest class index."""
    logits = list(level_logits.values()) if isinstance(level_logits, dict) else list(level_logits)
    if not logits:
        raise ValueError("at least one level is required")
    total = torch.as_tensor(logits[0]).clone()
    for o in logits[1:]:
        total = total + torch.as_tensor(o)
    # torch.argmax returns the first maximal index
    return torch.argmax(total, dim=-1)


class StagingModel(nn.Module):
    def __init__(self, level_dims: dict[int, int], cfg: StagingConfig):
        super().__init__()
        self.cfg = cfg
        self.levels = tuple(sorted(level_dims))
        self.heads = nn.ModuleDict({str(j): LevelHead(level_dims[j], cfg) for j in self.levels})

    def forward(self, H: dict[int, torch.Tensor]) -> StageOutputs:
        level_logits = {j: self.heads[str(j)](H[j]) for j in self.levels}
        agg = level_logits[self.levels[0]]
        for j in self.levels[1:]:
            agg = agg + level_logits[j]
        return StageOutputs(level_logits, agg, torch.argmax(agg, dim=-1))


# --- frozen feature extraction --------------------------------------------------

def encode_epochs(encoder: Encoder, signals: np.ndarray, chunk: int = 256) -> dict[int, np.ndarray]:
    """Per-epoch pooled level features r_j from the frozen encoder."""
    dtype = next(encoder.parameters()).dtype
    out: dict[int, list[np.ndarray]] = {t: [] for t in encoder.spec.taps}
    with torch.no_grad():
        for s in range(0, signals.shape[0], chunk):
            x = torch.as_tensor(np.asarray(signals[s : s + chunk]), dtype=dtype)
            for t, r in encoder.features(x).items():
                out[t].append(r.cpu().numpy())
    return {t: np.concatenate(v) for t, v in out.items()}


def encode_sequence(encoder: Encoder, X: np.ndarray, L: int = 10) -> SeqFeatures:
    X = np.asarray(X)
    if encoder is None:
        raise CheckpointError("missing encoder checkpoint")
    if X.shape[0] != L + 1:
        raise ValueError(f"sequence has {X.shape[0]} epochs, expected L+1 = {L + 1}")
    feats = encode_epochs(encoder, X)
    return SeqFeatures(H={t: torch.from_numpy(f) for t, f in feats.items()})


def gather_sequences(features: dict[int, np.ndarray], windows: np.ndarray, dtype=torch.float32) -> dict[int, torch.Tensor]:
    return {t: torch.as_tensor(f[windows], dtype=dtype) for t, f in features.items()}


# --- training -------------------------------------------------------------------

@dataclass
class StagingResult:
    model: StagingModel
    best_val_kappa: float
    best_step: int
    history: list[dict]


def staging_loss(model: StagingModel, H: dict[int, torch.Tensor], y: torch.Tensor, weight=None) -> torch.Tensor:
    return F.cross_entropy(model(H).aggregate, y, weight=weight)


def predict(model: StagingModel, features: dict[int, np.ndarray], windows: np.ndarray, chunk: int = 512) -> np.ndarray:
    preds = []
    with torch.no_grad():
        for s in range(0, windows.shape[0], chunk):
            H = gather_sequences(features, windows[s : s + chunk])
            preds.append(model(H).prediction.numpy())
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def train_staging(
    features: dict[int, np.ndarray],
    ds: Dataset,
    train_domains,
    val_domains,
    cfg: StagingConfig,
    seed: int = 0,
    levels=None,
) -> StagingResult:
    levels = tuple(sorted(levels or features))
    feats = {j: features[j] for j in levels}
    torch.manual_seed(derive_seed(seed, "staging-init") % (1 << 63))
    model = StagingModel({j: f.shape[1] for j, f in feats.items()}, cfg)
    tr_win = sequence_windows(ds, cfg.seq_len, train_domains)
    va_win = sequence_windows(ds, cfg.seq_len, val_domains) if len(val_domains) else tr_win
    if tr_win.shape[0] == 0:
        raise ValueError("no training sequences; recordings shorter than L+1 epochs")
    tr_rows = np.unique(tr_win)
    with torch.no_grad():
        for j in levels:
            head = model.heads[str(j)]
            head.feat_mean.copy_(torch.as_tensor(feats[j][tr_rows].mean(axis=0)))
            head.feat_std.copy_(torch.as_tensor(feats[j][tr_rows].std(axis=0) + 1e-6))
    y_all = torch.as_tensor(ds.y.astype(np.int64))
    weight = None
    if cfg.class_weights:
        counts = np.bincount(ds.y[tr_win[:, -1]], minlength=N_CLASSES).astype(np.float64)
        w = np.where(counts > 0, counts.sum() / (N_CLASSES * np.maximum(counts, 1)), 0.0)
        weight = torch.as_tensor(w, dtype=torch.float32)

    store = ParamStore.from_module(model)
    rng = make_rng(derive_seed(seed, "staging-batches"))
    best = (-math.inf, 0, {k: v.clone() for k, v in model.state_dict().items()})
    history = []
    for step in range(1, cfg.steps + 1):
        pick = tr_win[rng.integers(0, tr_win.shape[0], cfg.batch_size)]
        loss = staging_loss(model, gather_sequences(feats, pick), y_all[pick[:, -1]], weight)
        if not torch.isfinite(loss):
            raise TrainingDivergence(f"non-finite staging loss at step {step}")
        adam_step(store, backward(loss, store.params), cfg.lr, cfg.weight_decay)
        if step % cfg.eval_every == 0 or step == cfg.steps:
            pred = predict(model, feats, va_win)
            kappa = metrics.cohens_kappa(metrics.confusion_matrix(ds.y[va_win[:, -1]], pred))
            history.append({"step": step, "loss": loss.item(), "val_kappa": kappa})
            if kappa > best[0]:
                best = (kappa, step, {k: v.clone() for k, v in model.state_dict().items()})
    model.load_state_dict(best[2])
    return StagingResult(model, best[0], best[1], history)


def save_staging(path, result_model: StagingModel, encoder_sha256: str, seed: int, step: int) -> bytes:
    header = {
        "staging": result_model.cfg.model_dump(mode="json"),
        "levels": list(result_model.levels),
        "level_dims": {str(j): int(result_model.heads[str(j)].inp.in_features) for j in result_model.levels},
        "encoder_sha256": encoder_sha256,
        "seed": seed,
        "step": step,
    }
    data = _pack_checkpoint("staging", header, result_model)
    Path(path).write_bytes(data)
    return data


def load_staging(path) -> tuple[StagingModel, dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing staging checkpoint {path}")
    header, tensors = _unpack_checkpoint(path.read_bytes())
    if header.get("kind") != "staging":
        raise CheckpointError(f"expected a staging checkpoint, got {header.get('kind')!r}")
    cfg = StagingConfig.model_validate(header["staging"])
    model = StagingModel({int(j): d for j, d in header["level_dims"].items()}, cfg)
    model.load_state_dict(tensors)
    return model, header
