"""Multi-tap 1-D conv encoder with per-level projection heads, Adam, augmentation
and the binary encoder checkpoint format."""
from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, model_validator

from .numerics import derive_seed

NORM_EPS = 1e-12
CHECKPOINT_MAGIC = b"MCK1"
CHECKPOINT_VERSION = 1


class TrainingDivergence(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


class StageSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    channels: int
    width: int
    stride: int = 1
    pool: int = 1


class EncoderSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    in_channels: int = 1
    input_length: int = 3000
    stages: tuple[StageSpec, ...] = (
        StageSpec(channels=16, width=31, stride=4, pool=2),
        StageSpec(channels=16, width=9, pool=2),
        StageSpec(channels=32, width=9, pool=2),
        StageSpec(channels=32, width=7, pool=2),
        StageSpec(channels=48, width=5, pool=2),
    )
    nonlinearity: Literal["gelu", "relu", "tanh", "elu"] = "gelu"
    pooling: Literal["avg", "max"] = "avg"
    taps: tuple[int, ...] = (3, 4, 5)
    proj_hidden: int = 64
    proj_dim: int = 16

    @model_validator(mode="after")
    def _check(self):
        if not self.stages:
            raise ValueError("at least one stage is required")
        for t in self.taps:
            if not 1 <= t <= len(self.stages):
                raise ValueError(f"tap {t} does not reference a stage (1..{len(self.stages)})")
        if len(set(self.taps)) != len(self.taps):
            raise ValueError("taps must be distinct")
        if self.proj_dim < 2:
            raise ValueError("projection output dim must be >= 2")
        length = self.input_length
        for i, s in enumerate(self.stages, 1):
            length = (length + 2 * (s.width // 2) - s.width) // s.stride + 1
            length //= s.pool
            if length < 1:
                raise ValueError(f"stage {i} reduces the signal to zero length")
        return self

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))

    @classmethod
    def tiny(cls, input_length: int = 48, proj_dim: int = 4) -> "EncoderSpec":
        """Small three-level spec (< 2k parameters) for gradient checks."""
        return cls(
            input_length=input_length,
            stages=(
                StageSpec(channels=3, width=5, stride=2),
                StageSpec(channels=4, width=3, pool=2),
                StageSpec(channels=4, width=3),
                StageSpec(channels=5, width=3, pool=2),
                StageSpec(channels=5, width=3),
            ),
            taps=(3, 4, 5),
            proj_hidden=8,
            proj_dim=proj_dim,
        )


def l2_normalize(u: torch.Tensor) -> torch.Tensor:
    return u / torch.sqrt((u * u).sum(dim=-1, keepdim=True) + NORM_EPS)


_ACTS = {"gelu": F.gelu, "relu": F.relu, "tanh": torch.tanh, "elu": F.elu}


def _kaiming_uniform(t: torch.Tensor, fan_in: int, gen: torch.Generator) -> None:
    bound = math.sqrt(6.0 / fan_in)
    with torch.no_grad():
        t.copy_(torch.rand(t.shape, generator=gen, dtype=torch.float64).mul(2 * bound).sub(bound))


@dataclass
class MultiScaleOutput:
    r: dict[int, torch.Tensor]      # pooled stage features, (B, C_j)
    u: dict[int, torch.Tensor]      # projections before normalization
    z: dict[int, torch.Tensor]      # unit-norm projections


class Encoder(nn.Module):
    """f_phi with one projection head per tap."""

    def __init__(self, spec: EncoderSpec, seed: int = 0):
        super().__init__()
        self.spec = spec
        self.convs = nn.ModuleList()
        c_in = spec.in_channels
        for s in spec.stages:
            self.convs.append(nn.Conv1d(c_in, s.channels, s.width, stride=s.stride, padding=s.width // 2))
            c_in = s.channels
        self.heads = nn.ModuleDict()
        for t in spec.taps:
            c = spec.stages[t - 1].channels
            self.heads[str(t)] = nn.Sequential(
                nn.Linear(c, spec.proj_hidden), nn.GELU(), nn.Linear(spec.proj_hidden, spec.proj_dim)
            )
        self.reset_parameters(seed)

    def reset_parameters(self, seed: int) -> None:
        for i, (name, p) in enumerate(self.named_parameters()):
            gen = torch.Generator().manual_seed(derive_seed(seed, "init", name) % (1 << 63))
            if name.endswith("bias"):
                with torch.no_grad():
                    p.zero_()
            else:
                fan_in = int(np.prod(p.shape[1:]))
                _kaiming_uniform(p, fan_in, gen)

    def stage_maps(self, x: torch.Tensor) -> list[torch.Tensor]:
        if x.dim() == 2:
            x = x[:, None, :]
        if x.shape[1:] != (self.spec.in_channels, self.spec.input_length):
            raise ValueError(
                f"expected input (B, {self.spec.in_channels}, {self.spec.input_length}), got {tuple(x.shape)}"
            )
        act = _ACTS[self.spec.nonlinearity]
        pool = F.avg_pool1d if self.spec.pooling == "avg" else F.max_pool1d
        maps = []
        h = x
        for conv, s in zip(self.convs, self.spec.stages):
            h = act(conv(h))
            if s.pool > 1:
                h = pool(h, s.pool)
            maps.append(h)
        return maps

    def features(self, x: torch.Tensor, taps=None) -> dict[int, torch.Tensor]:
        """Time-averaged stage outputs r_j at the requested taps."""
        maps = self.stage_maps(x)
        return {t: maps[t - 1].mean(dim=-1) for t in (taps or self.spec.taps)}

    def forward(self, x: torch.Tensor, taps=None) -> MultiScaleOutput:
        taps = tuple(taps or self.spec.taps)
        r = self.features(x, taps)
        u = {t: self.heads[str(t)](r[t]) for t in taps}
        return MultiScaleOutput(r=r, u=u, z={t: l2_normalize(u[t]) for t in taps})


def forward_multiscale(encoder: Encoder, x: torch.Tensor, taps=None) -> MultiScaleOutput:
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    return encoder(x, taps)


def backward(loss: torch.Tensor, params: dict[str, torch.Tensor], upstream=None) -> dict[str, torch.Tensor]:
    """Reverse-mode gradients of ``loss`` w.r.t. the named parameters."""
    names = list(params)
    grads = torch.autograd.grad(
        loss, [params[n] for n in names], grad_outputs=upstream, allow_unused=True
    )
    return {n: (torch.zeros_like(params[n]) if g is None else g) for n, g in zip(names, grads)}


@dataclass
class ParamStore:
    params: dict[str, torch.Tensor]
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)
    step: int = 0

    def __post_init__(self):
        for n, p in self.params.items():
            self.m.setdefault(n, torch.zeros_like(p))
            self.v.setdefault(n, torch.zeros_like(p))

    @classmethod
    def from_module(cls, module: nn.Module) -> "ParamStore":
        return cls(dict(module.named_parameters()))


def adam_step(
    store: ParamStore,
    grads: dict[str, torch.Tensor],
    lr: float,
    weight_decay: float = 0.0,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> ParamStore:
    """One in-place Adam update with decoupled weight decay."""
    for n, g in grads.items():
        if n not in store.params:
            raise KeyError(f"gradient for unknown parameter {n}")
        if g.shape != store.params[n].shape:
            raise ValueError(f"gradient shape mismatch for {n}")
        if not torch.isfinite(g).all():
            raise TrainingDivergence(f"non-finite gradient for {n}")
    store.step += 1
    b1, b2 = betas
    c1 = 1 - b1**store.step
    c2 = 1 - b2**store.step
    with torch.no_grad():
        for n, p in store.params.items():
            g = grads.get(n)
            if weight_decay:
                p.mul_(1 - lr * weight_decay)
            if g is None:
                continue
            m, v = store.m[n], store.v[n]
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            p.sub_(lr * (m / c1) / (torch.sqrt(v / c2) + eps))
    return store


class AugmentConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    scale: tuple[float, float] = (0.8, 1.2)
    shift_seconds: float = 1.0
    snr_db: tuple[float, float] = (20.0, 40.0)
    crop: float = 0.9
    sample_rate: float = 100.0

    @model_validator(mode="after")
    def _check(self):
        if self.scale[0] > self.scale[1] or self.snr_db[0] > self.snr_db[1]:
            raise ValueError("ranges must be non-empty (low <= high)")
        if not 0 < self.crop <= 1:
            raise ValueError("crop fraction must lie in (0, 1]")
        if self.shift_seconds < 0:
            raise ValueError("shift must be non-negative")
        return self

    @classmethod
    def identity(cls) -> "AugmentConfig":
        return cls(scale=(1.0, 1.0), shift_seconds=0.0, snr_db=(math.inf, math.inf), crop=1.0)


def augment(x: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator, length: int | None = None) -> np.ndarray:
    """One random label-preserving view of an epoch of shape (C, T) or (T,)."""
    x = np.asarray(x)
    one_d = x.ndim == 1
    v = x[None, :] if one_d else x
    T = v.shape[-1]
    length = length or T
    crop_len = max(1, int(round(cfg.crop * length)))
    if T < crop_len:
        raise ValueError(f"signal of length {T} shorter than crop length {crop_len}")
    if T != length:
        start = (T - length) // 2 if T > length else 0
        v = v[:, start : start + length] if T > length else np.pad(v, ((0, 0), (0, length - T)))
    v = v.astype(np.float64, copy=True)

    scale = rng.uniform(*cfg.scale) if cfg.scale[0] != cfg.scale[1] else cfg.scale[0]
    if scale != 1.0:
        v *= scale
    max_shift = int(round(cfg.shift_seconds * cfg.sample_rate))
    if max_shift > 0:
        s = int(rng.integers(-max_shift, max_shift + 1))
        if s:
            out = np.zeros_like(v)
            if s > 0:
                out[:, s:] = v[:, :-s]
            else:
                out[:, :s] = v[:, -s:]
            v = out
    if math.isfinite(cfg.snr_db[1]) or math.isfinite(cfg.snr_db[0]):
        snr = rng.uniform(*cfg.snr_db) if cfg.snr_db[0] != cfg.snr_db[1] else cfg.snr_db[0]
        if math.isfinite(snr):
            power = float(np.mean(v * v))
            v += rng.standard_normal(v.shape) * math.sqrt(power / 10 ** (snr / 10))
    if crop_len < length:
        start = int(rng.integers(0, length - crop_len + 1))
        v[:, :start] = 0.0
        v[:, start + crop_len :] = 0.0
    v = v.astype(x.dtype, copy=False)
    return v[0] if one_d else v


def augment_batch(X: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    return np.stack([augment(x, cfg, rng) for x in X])


def param_checksum(module: nn.Module) -> str:
    import hashlib

    h = hashlib.sha256()
    for name, p in module.state_dict().items():
        h.update(name.encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def _pack_checkpoint(kind: str, header_extra: dict, module: nn.Module) -> bytes:
    tensors = [(n, p.detach().cpu()) for n, p in module.state_dict().items()]
    header = {
        "format_version": CHECKPOINT_VERSION,
        "kind": kind,
        "tensors": [[n, list(t.shape)] for n, t in tensors],
        **header_extra,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", len(hbytes)))
    buf.write(hbytes)
    for _, t in tensors:
        buf.write(t.numpy().astype("<f4").tobytes())
    return buf.getvalue()


def _unpack_checkpoint(data: bytes) -> tuple[dict, dict[str, torch.Tensor]]:
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("bad magic: not a checkpoint file")
    (hlen,) = struct.unpack("<I", data[4:8])
    header = json.loads(data[8 : 8 + hlen])
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('format_version')}")
    off = 8 + hlen
    tensors = {}
    for name, shape in header["tensors"]:
        n = int(np.prod(shape))
        if off + 4 * n > len(data):
            raise CheckpointError("truncated checkpoint payload")
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=off).reshape(shape)
        tensors[name] = torch.from_numpy(arr.astype(np.float32))
        off += 4 * n
    return header, tensors


def save_encoder(path, encoder: Encoder, seed: int, step: int) -> bytes:
    data = _pack_checkpoint(
        "encoder", {"encoder": json.loads(encoder.spec.canonical_json()), "seed": seed, "step": step}, encoder
    )
    Path(path).write_bytes(data)
    return data


def load_encoder(path) -> tuple[Encoder, dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing checkpoint {path}")
    header, tensors = _unpack_checkpoint(path.read_bytes())
    if header.get("kind") != "encoder":
        raise CheckpointError(f"expected an encoder checkpoint, got {header.get('kind')!r}")
    enc = Encoder(EncoderSpec.model_validate(header["encoder"]))
    enc.load_state_dict(tensors)
    enc.requires_grad_(False)
    return enc, header
