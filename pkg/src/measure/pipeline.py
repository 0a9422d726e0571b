"""End-to-end runs: pre-training, staging, evaluation and information diagnostics."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import dataclass
import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field

from . import losses, metrics, stein
from .data import CLASS_NAMES, Dataset, FoldSplit, SynthConfig, kfold_split, two_domain_batch_sampler
from .losses import BatchEmbeddings, LossConfig
from .model import (
    AugmentConfig,
    Encoder,
    EncoderSpec,
    ParamStore,
    TrainingDivergence,
    adam_step,
    augment_batch,
    backward,
)
from .numerics import derive_seed, make_rng
from .staging import StagingConfig, encode_epochs, predict, sequence_windows, train_staging

log = logging.getLogger(__name__)

METRICS_COLUMNS = ["fold", "kappa", "acc", "f1_macro"] + [f"f1_{c}" for c in CLASS_NAMES]
INFO_COLUMNS = ["step", "superfluous_proxy", "I_zd", "H_z", "H_z_given_d"]


class OptimConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    lr: float = 3e-4
    weight_decay: float = 1e-4
    batch_size: int = 256
    steps: int = 200


class FoldPlan(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    k: int = 8
    fold_index: int = 0
    val_fraction: float = 4 / 19


class InfoConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    kappa: float = 1.0
    knn_k: int = 5
    per_domain: int = 150
    every: int = 50


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    synth: SynthConfig = Field(default_factory=SynthConfig)
    encoder: EncoderSpec = Field(default_factory=EncoderSpec)
    loss: LossConfig = Field(default_factory=LossConfig)
    augment: AugmentConfig = Field(default_factory=AugmentConfig)
    kernel: stein.KernelConfig = Field(default_factory=stein.KernelConfig)
    optim: OptimConfig = Field(default_factory=OptimConfig)
    staging: StagingConfig = Field(default_factory=StagingConfig)
    folds: FoldPlan = Field(default_factory=FoldPlan)
    info: InfoConfig = Field(default_factory=InfoConfig)
    seed: int = 0
    out_dir: str | None = None

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def git_blob_hash(path) -> str:
    """Content hash as computed by ``git hash-object``."""
    with open(path, "rb") as fh:
        data = fh.read()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def fold_split(cfg: RunConfig, ds: Dataset) -> FoldSplit:
    return kfold_split(ds.domain_ids, cfg.folds.k, cfg.folds.fold_index, cfg.seed, cfg.folds.val_fraction)


def write_csv(path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({c: (repr(float(r[c])) if isinstance(r[c], float) else r[c]) for c in columns})


# --- pre-training ---------------------------------------------------------------

@dataclass
class PretrainResult:
    encoder: Encoder
    loss_log: list[dict]
    info_log: list[dict]
    steps: int


def _info_probe(ds: Dataset, domains, per_domain: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Fixed evaluation rows plus, for each, a same-class partner from another domain."""
    rng = make_rng(derive_seed(seed, "info-probe"))
    rows = []
    for m in domains:
        pool = np.flatnonzero(ds.d == m)
        rows.append(np.sort(rng.choice(pool, min(per_domain, pool.size), replace=False)))
    rows = np.concatenate(rows)
    partners = np.empty_like(rows)
    for i, r in enumerate(rows):
        cand = rows[(ds.y[rows] == ds.y[r]) & (ds.d[rows] != ds.d[r])]
        if cand.size == 0:
            cand = rows[(ds.y[rows] == ds.y[r]) & (rows != r)]
        partners[i] = rng.choice(cand) if cand.size else r
    return rows, partners


def embed(encoder: Encoder, signals: np.ndarray, level: int, chunk: int = 256) -> np.ndarray:
    out = []
    with torch.no_grad():
        for s in range(0, signals.shape[0], chunk):
            x = torch.as_tensor(signals[s : s + chunk], dtype=next(encoder.parameters()).dtype)
            out.append(encoder(x, (level,)).z[level].double().numpy())
    return np.concatenate(out)


def information_diagnostics(encoder: Encoder, ds: Dataset, domains, cfg: RunConfig, level: int | None = None) -> metrics.InfoReport:
    level = level or max(encoder.spec.taps)
    rows, partners = _info_probe(ds, domains, cfg.info.per_domain, cfg.seed)
    z_all = embed(encoder, ds.signals[np.union1d(rows, partners)], level)
    lookup = {r: i for i, r in enumerate(np.union1d(rows, partners))}
    z = z_all[[lookup[r] for r in rows]]
    z_p = z_all[[lookup[r] for r in partners]]
    return metrics.info_report(z, z_p, ds.d[rows], cfg.info.kappa, cfg.info.knn_k, seed=cfg.seed)


def pretrain(cfg: RunConfig, ds: Dataset, split: FoldSplit | None = None, progress=None) -> PretrainResult:
    split = split or fold_split(cfg, ds)
    train_domains = list(split.train)
    if len(train_domains) < 2:
        raise ValueError("need >= 2 training domains for two-domain batches")
    torch.manual_seed(derive_seed(cfg.seed, "torch") % (1 << 63))
    encoder = Encoder(cfg.encoder, seed=derive_seed(cfg.seed, "encoder"))
    store = ParamStore.from_module(encoder)
    sampler = two_domain_batch_sampler(ds, cfg.optim.batch_size, derive_seed(cfg.seed, "sampler"), train_domains)
    aug_rng = make_rng(derive_seed(cfg.seed, "augment"))
    y_all = torch.as_tensor(ds.y.astype(np.int64))
    d_all = torch.as_tensor(ds.d.astype(np.int64))
    levels = tuple(cfg.loss.levels)
    loss_log, info_log = [], []

    def probe(step):
        rep = information_diagnostics(encoder, ds, train_domains, cfg)
        info_log.append(rep.as_row(step))

    for step in range(1, cfg.optim.steps + 1):
        idx = next(sampler)
        v = torch.from_numpy(augment_batch(ds.signals[idx], cfg.augment, aug_rng))
        out = encoder(v, levels)
        if not all(torch.isfinite(z).all() for z in out.z.values()):
            raise TrainingDivergence(f"non-finite embeddings at step {step}")
        batch = BatchEmbeddings(out.z, y_all[idx], d_all[idx])
        surr = losses.entropy_surrogates(batch, cfg.kernel, levels) if cfg.loss.alpha > 0 else None
        terms = losses.multiscale_loss(batch, cfg.loss, surr)
        if not torch.isfinite(terms.loss):
            raise TrainingDivergence(f"non-finite pre-training loss at step {step}")
        adam_step(store, backward(terms.loss, store.params), cfg.optim.lr, cfg.optim.weight_decay)
        row = {"step": step, "loss": terms.loss.item(), "contrastive": terms.contrastive.item(),
               "entropy": terms.entropy.item(), "skipped": terms.skipped}
        loss_log.append(row)
        if progress:
            progress(row)
        if cfg.info.every and (step % cfg.info.every == 0 or step == cfg.optim.steps):
            probe(step)
    encoder.requires_grad_(False)
    return PretrainResult(encoder, loss_log, info_log, cfg.optim.steps)


# --- staging and evaluation -------------------------------------------------------

@dataclass
class EvalResult:
    report: metrics.ClassificationReport
    windows: np.ndarray
    y_true: np.ndarray
    y_pred: np.ndarray

    def metrics_row(self, fold: int) -> dict:
        r = self.report
        row = {"fold": fold, "kappa": r.kappa, "acc": r.acc, "f1_macro": r.f1_macro}
        row.update({f"f1_{c}": f for c, f in zip(CLASS_NAMES, r.f1_per_class)})
        return row


def stage(cfg: RunConfig, ds: Dataset, encoder: Encoder, split: FoldSplit | None = None, features=None):
    split = split or fold_split(cfg, ds)
    features = features if features is not None else encode_epochs(encoder, ds.signals)
    return train_staging(features, ds, split.train, split.val, cfg.staging, seed=cfg.seed)


def evaluate(model, ds: Dataset, features, domains, L: int) -> EvalResult:
    win = sequence_windows(ds, L, domains)
    pred = predict(model, features, win)
    y = ds.y[win[:, -1]].astype(np.int64)
    return EvalResult(metrics.classification_report(y, pred), win, y, pred)


@dataclass
class RunSummary:
    test_kappa: float
    test_acc: float
    test_f1: float
    val_kappa: float
    info: metrics.InfoReport
    final_loss: float


def run_experiment(cfg: RunConfig, ds: Dataset) -> RunSummary:
    """Pre-train, stage and evaluate one configuration on one fold (no files written)."""
    split = fold_split(cfg, ds)
    pre = pretrain(cfg.model_copy(update={"info": cfg.info.model_copy(update={"every": 0})}), ds, split)
    feats = encode_epochs(pre.encoder, ds.signals)
    res = stage(cfg, ds, pre.encoder, split, feats)
    ev = evaluate(res.model, ds, feats, split.test, cfg.staging.seq_len)
    info = information_diagnostics(pre.encoder, ds, split.train, cfg)
    return RunSummary(ev.report.kappa, ev.report.acc, ev.report.f1_macro, res.best_val_kappa, info,
                      pre.loss_log[-1]["loss"])


# --- ablations ----------------------------------------------------------------------

ABLATION_COLUMNS = ["name", "seed", "alpha", "levels", "fold", "kappa", "acc", "f1_macro", "val_kappa",
                    "I_zd", "superfluous_proxy"]


def ablation_configs(cfg: RunConfig, alphas=(0.0, 1e-4, 1e-3, 1e-2, 1e-1), minimal_alpha: float = 1e-3) -> dict:
    """{minimal off/on} x {multi-scale off/on} plus an alpha sweep with all levels."""
    top = (max(cfg.loss.levels),)
    full = tuple(cfg.loss.levels)
    cells = {
        "contrastive": (0.0, top),
        "multi": (0.0, full),
        "minimal": (minimal_alpha, top),
        "full": (minimal_alpha, full),
    }
    for a in alphas:
        cells.setdefault(f"alpha={a:g}", (float(a), full))
    return {name: cfg.model_copy(update={"loss": cfg.loss.model_copy(update={"alpha": a, "levels": lv})})
            for name, (a, lv) in cells.items()}


def run_ablation(cfg: RunConfig, ds: Dataset, seeds=(0,), alphas=(0.0, 1e-4, 1e-3, 1e-2, 1e-1),
                 progress=None) -> list[dict]:
    """One row per (cell, seed); cells sharing alpha and levels are trained once."""
    if len(ds.domain_ids) < 2:
        raise ValueError("need ≥ 2 domains")
    rows, done = [], {}
    for seed in seeds:
        for name, c in ablation_configs(cfg.model_copy(update={"seed": seed}), alphas).items():
            key = (seed, c.loss.alpha, c.loss.levels)
            if key not in done:
                done[key] = run_experiment(c, ds)
            r = done[key]
            row = {"name": name, "seed": seed, "alpha": c.loss.alpha, "levels": "+".join(map(str, c.loss.levels)),
                   "fold": c.folds.fold_index, "kappa": r.test_kappa, "acc": r.test_acc, "f1_macro": r.test_f1,
                   "val_kappa": r.val_kappa, "I_zd": r.info.I_zd, "superfluous_proxy": r.info.superfluous_proxy}
            rows.append(row)
            if progress:
                progress(row)
    return rows
