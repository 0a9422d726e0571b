"""Synthetic multi-domain sleep-epoch benchmark, the MSD1 container format,
fold splitting, the two-domain batch sampler and sequence windows."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from .numerics import derive_seed, make_rng

CLASS_NAMES = ("W", "N1", "N2", "N3", "REM")
N_CLASSES = len(CLASS_NAMES)
# SleepEDF-20 stage distribution
DEFAULT_PROPORTIONS = (0.196, 0.066, 0.421, 0.135, 0.182)
MSD_MAGIC = b"MSD1"
MSD_VERSION = 1


class DatasetFormatError(ValueError):
    pass


class SynthConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    n_domains: int = 8
    epochs_per_domain: int = 1000
    proportions: tuple[float, ...] = DEFAULT_PROPORTIONS
    sample_rate: float = 100.0
    epoch_seconds: float = 30.0
    channels: int = 1
    # mean run length (epochs) per stage; shapes the hypnogram, not the proportions
    mean_dwell: tuple[float, ...] = (6.0, 2.0, 10.0, 6.0, 8.0)
    gain_range: tuple[float, float] = (0.5, 2.0)
    tilt_range: tuple[float, float] = (-0.3, 0.3)
    snr_db_range: tuple[float, float] = (10.0, 30.0)
    seed: int = 0

    @model_validator(mode="after")
    def _check(self):
        if self.n_domains < 2:
            raise ValueError("need >= 2 domains")
        if len(self.proportions) != N_CLASSES or len(self.mean_dwell) != N_CLASSES:
            raise ValueError(f"proportions and mean_dwell need {N_CLASSES} entries")
        if abs(sum(self.proportions) - 1.0) > 1e-9 or min(self.proportions) < 0:
            raise ValueError("class proportions must be non-negative and sum to 1")
        if self.epochs_per_domain < 1:
            raise ValueError("epochs_per_domain must be positive")
        return self

    @property
    def epoch_length(self) -> int:
        return int(round(self.sample_rate * self.epoch_seconds))


@dataclass
class Dataset:
    """Epoch arrays sorted by (domain, k); signals are float32 of shape (N, C, T)."""

    signals: np.ndarray
    y: np.ndarray
    d: np.ndarray
    k: np.ndarray
    sample_rate: float = 100.0
    class_names: tuple[str, ...] = CLASS_NAMES
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = self.signals.shape[0]
        if self.signals.ndim != 3:
            raise ValueError("signals must have shape (N, C, T)")
        if not (self.y.shape == self.d.shape == self.k.shape == (n,)):
            raise ValueError("label arrays must have one entry per epoch")
        if n and (self.y.max() >= len(self.class_names) or self.y.min() < 0):
            raise DatasetFormatError("label out of range")

    def __len__(self) -> int:
        return self.signals.shape[0]

    @property
    def domain_ids(self) -> list[int]:
        return sorted(int(x) for x in np.unique(self.d))

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.signals[idx], self.y[idx], self.d[idx], self.k[idx],
                       self.sample_rate, self.class_names, dict(self.meta))

    def select_domains(self, domains: Sequence[int]) -> np.ndarray:
        return np.flatnonzero(np.isin(self.d, np.asarray(list(domains))))


# --- synthetic generator ----------------------------------------------------

def _exact_counts(n: int, proportions: Sequence[float]) -> np.ndarray:
    raw = np.asarray(proportions) * n
    counts = np.floor(raw).astype(int)
    rest = n - counts.sum()
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[:rest]] += 1
    return counts


def _hypnogram(n: int, cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    """Label sequence with exact class counts, built from shuffled stage runs."""
    counts = _exact_counts(n, cfg.proportions)
    runs = []
    for c, total in enumerate(counts):
        left = int(total)
        while left > 0:
            length = min(left, int(rng.geometric(1.0 / cfg.mean_dwell[c])))
            runs.append((c, length))
            left -= length
    order = rng.permutation(len(runs))
    return np.concatenate([np.full(runs[i][1], runs[i][0], dtype=np.uint8) for i in order])


def _band_noise(rng, n: int, fs: float, lo: float, hi: float, rms: float) -> np.ndarray:
    freqs = np.fft.rfftfreq(n, 1 / fs)
    spec = np.zeros(freqs.size, dtype=np.complex128)
    band = (freqs >= lo) & (freqs <= hi)
    spec[band] = rng.standard_normal(band.sum()) + 1j * rng.standard_normal(band.sum())
    x = np.fft.irfft(spec, n)
    return x * (rms / (np.sqrt(np.mean(x * x)) + 1e-30))


def _pink_noise(rng, n: int, fs: float, rms: float) -> np.ndarray:
    freqs = np.fft.rfftfreq(n, 1 / fs)
    spec = (rng.standard_normal(freqs.size) + 1j * rng.standard_normal(freqs.size))
    spec[1:] /= np.sqrt(freqs[1:])
    spec[0] = 0
    x = np.fft.irfft(spec, n)
    return x * (rms / (np.sqrt(np.mean(x * x)) + 1e-30))


# Mean band amplitudes per stage: delta 0.5-2, theta 4-7, alpha 8-12, beta 15-30 Hz,
# plus 12-14 Hz spindle bursts. Each epoch jitters every band log-normally so the
# stages overlap the way real recordings do.
BANDS = ((0.5, 2.0), (4.0, 7.0), (8.0, 12.0), (15.0, 30.0))
STAGE_BAND_RMS = np.array([
    # delta theta alpha beta
    [0.30, 0.35, 0.90, 0.90],   # W: 8-30 Hz broadband
    [0.40, 0.90, 0.35, 0.30],   # N1: 4-7 Hz
    [0.60, 0.45, 0.60, 0.20],   # N2: ~10 Hz background (+ spindles)
    [2.00, 0.45, 0.20, 0.10],   # N3: 0.5-2 Hz, high amplitude
    [0.30, 0.60, 0.25, 0.35],   # REM: 4-8 Hz mixed, low amplitude
])
SPINDLE_AMP = (0.0, 0.0, 1.2, 0.2, 0.0)
BAND_JITTER = 0.45


def class_template(label: int, n: int, fs: float, rng: np.random.Generator) -> np.ndarray:
    """One epoch of the class-conditional signal, before any domain transform."""
    if not 0 <= label < N_CLASSES:
        raise ValueError(f"unknown class {label}")
    amps = STAGE_BAND_RMS[label] * np.exp(BAND_JITTER * rng.standard_normal(len(BANDS)))
    x = _pink_noise(rng, n, fs, 0.3)
    for (lo, hi), a in zip(BANDS, amps):
        x = x + _band_noise(rng, n, fs, lo, hi, a)
    if SPINDLE_AMP[label] > 0:
        t = np.arange(n) / fs
        dur = n / fs
        for _ in range(int(rng.integers(1, 5))):
            centre = rng.uniform(min(1.0, dur / 2), max(dur - 1.0, dur / 2))
            width = rng.uniform(0.25, 0.6)
            f = rng.uniform(12.0, 14.0)
            env = np.exp(-0.5 * ((t - centre) / width) ** 2)
            x = x + SPINDLE_AMP[label] * env * np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
    return x


@dataclass(frozen=True)
class DomainTransform:
    gain: float
    tilt: float
    snr_db: float

    def apply(self, x: np.ndarray, fs: float, rng: np.random.Generator) -> np.ndarray:
        n = x.shape[-1]
        freqs = np.fft.rfftfreq(n, 1 / fs)
        f = np.maximum(freqs, freqs[1])
        spec = np.fft.rfft(x) * (f / 10.0) ** (-self.tilt)
        y = np.fft.irfft(spec, n) * self.gain
        power = float(np.mean(y * y))
        return y + rng.standard_normal(n) * np.sqrt(power / 10 ** (self.snr_db / 10))


def domain_transform(cfg: SynthConfig, domain: int) -> DomainTransform:
    rng = make_rng(derive_seed(cfg.seed, "domain-transform", domain))
    log_gain = rng.uniform(np.log(cfg.gain_range[0]), np.log(cfg.gain_range[1]))
    return DomainTransform(
        gain=float(np.exp(log_gain)),
        tilt=float(rng.uniform(*cfg.tilt_range)),
        snr_db=float(rng.uniform(*cfg.snr_db_range)),
    )


def synth_generate(cfg: SynthConfig) -> Dataset:
    fs, n = cfg.sample_rate, cfg.epoch_length
    E = cfg.epochs_per_domain
    total = cfg.n_domains * E
    signals = np.empty((total, cfg.channels, n), dtype=np.float32)
    y = np.empty(total, dtype=np.uint8)
    d = np.empty(total, dtype=np.uint16)
    k = np.empty(total, dtype=np.uint32)
    for m in range(cfg.n_domains):
        rng = make_rng(derive_seed(cfg.seed, "domain", m))
        tf = domain_transform(cfg, m)
        labels = _hypnogram(E, cfg, rng)
        sl = slice(m * E, (m + 1) * E)
        y[sl] = labels
        d[sl] = m + 1
        k[sl] = np.arange(E, dtype=np.uint32)
        for i, lab in enumerate(labels):
            for c in range(cfg.channels):
                signals[m * E + i, c] = tf.apply(class_template(int(lab), n, fs, rng), fs, rng)
    meta = {"generator": "synthetic", "config": cfg.model_dump(mode="json")}
    return Dataset(signals, y, d, k, fs, CLASS_NAMES, meta)


# --- MSD1 container -----------------------------------------------------------

def _record_dtype(n_values: int) -> np.dtype:
    return np.dtype([("d", "<u2"), ("y", "u1"), ("k", "<u4"), ("signal", "<f4", (n_values,))])


def write_dataset(ds: Dataset, path) -> None:
    n, C, T = ds.signals.shape
    header = {
        "format_version": MSD_VERSION,
        "count": int(n),
        "channels": int(C),
        "samples": int(T),
        "sample_rate": float(ds.sample_rate),
        "class_names": list(ds.class_names),
        "domain_ids": ds.domain_ids,
        "meta": ds.meta,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    rec = np.empty(n, dtype=_record_dtype(C * T))
    rec["d"], rec["y"], rec["k"] = ds.d, ds.y, ds.k
    rec["signal"] = ds.signals.reshape(n, C * T)
    with open(path, "wb") as fh:
        fh.write(MSD_MAGIC)
        fh.write(struct.pack("<I", len(hbytes)))
        fh.write(hbytes)
        fh.write(rec.tobytes())


def read_header(fh) -> dict:
    magic = fh.read(4)
    if magic != MSD_MAGIC:
        raise DatasetFormatError(f"bad magic {magic!r}: not an MSD1 dataset")
    raw = fh.read(4)
    if len(raw) < 4:
        raise DatasetFormatError("truncated header")
    (hlen,) = struct.unpack("<I", raw)
    hb = fh.read(hlen)
    if len(hb) < hlen:
        raise DatasetFormatError("truncated header")
    header = json.loads(hb)
    if header.get("format_version") != MSD_VERSION:
        raise DatasetFormatError(f"unsupported version {header.get('format_version')}")
    return header


def iter_records(path, shard_size: int = 1024) -> Iterator[tuple[dict, np.ndarray]]:
    """Yield (header, structured record array) shards without loading the whole file."""
    with open(path, "rb") as fh:
        header = read_header(fh)
        dt = _record_dtype(header["channels"] * header["samples"])
        remaining = header["count"]
        n_classes = len(header["class_names"])
        while remaining > 0:
            take = min(shard_size, remaining)
            buf = fh.read(take * dt.itemsize)
            if len(buf) < take * dt.itemsize:
                raise DatasetFormatError("truncated payload")
            shard = np.frombuffer(buf, dtype=dt)
            if shard["y"].max() >= n_classes:
                raise DatasetFormatError("label out of range")
            yield header, shard
            remaining -= take


def read_dataset(path, shard_size: int = 1024) -> Dataset:
    with open(path, "rb") as fh:
        header = read_header(fh)
    n, C, T = header["count"], header["channels"], header["samples"]
    signals = np.empty((n, C, T), dtype=np.float32)
    y = np.empty(n, dtype=np.uint8)
    d = np.empty(n, dtype=np.uint16)
    k = np.empty(n, dtype=np.uint32)
    pos = 0
    for _, shard in iter_records(path, shard_size):
        m = shard.shape[0]
        signals[pos : pos + m] = shard["signal"].reshape(m, C, T)
        y[pos : pos + m], d[pos : pos + m], k[pos : pos + m] = shard["y"], shard["d"], shard["k"]
        pos += m
    return Dataset(signals, y, d, k, header["sample_rate"], tuple(header["class_names"]), header.get("meta", {}))


# --- splitting, sampling, sequences -------------------------------------------

@dataclass(frozen=True)
class FoldSplit:
    train: tuple[int, ...]
    val: tuple[int, ...]
    test: tuple[int, ...]


def kfold_split(domain_ids: Sequence[int], k: int, fold_index: int, seed: int = 0,
                val_fraction: float = 4 / 19) -> FoldSplit:
    """Subject-wise split: fold ``fold_index`` is the test group, a fraction of the rest validates."""
    ids = sorted(int(x) for x in domain_ids)
    M = len(ids)
    if k > M:
        raise ValueError(f"k={k} exceeds the number of domains ({M})")
    if not 0 <= fold_index < k:
        raise ValueError(f"fold_index must lie in [0, {k})")
    perm = [ids[i] for i in make_rng(derive_seed(seed, "kfold")).permutation(M)]
    groups = [list(g) for g in np.array_split(np.asarray(perm), k)]
    test = groups[fold_index]
    rest = [x for g in groups[fold_index + 1:] + groups[:fold_index] for x in g]
    n_val = int(round(len(rest) * val_fraction))
    n_val = min(max(n_val, 0), len(rest) - 1)
    return FoldSplit(train=tuple(sorted(int(x) for x in rest[n_val:])),
                     val=tuple(sorted(int(x) for x in rest[:n_val])),
                     test=tuple(sorted(int(x) for x in test)))


class TwoDomainBatchSampler:
    """Endless stream of index batches drawn from exactly two distinct domains."""

    def __init__(self, domains: np.ndarray, batch_size: int, rng: np.random.Generator,
                 allowed: Sequence[int] | None = None):
        if batch_size < 4:
            raise ValueError("batch_size must be >= 4")
        domains = np.asarray(domains)
        ids = sorted(int(x) for x in np.unique(domains)) if allowed is None else sorted(allowed)
        self.pools = {m: np.flatnonzero(domains == m) for m in ids}
        self.ids = [m for m in ids if self.pools[m].size >= 2]
        if len(self.ids) < 2:
            raise ValueError("need >= 2 domains with at least 2 samples each")
        self.batch_size = batch_size
        self.rng = rng

    def __iter__(self):
        return self

    def __next__(self) -> np.ndarray:
        a, b = self.rng.choice(len(self.ids), size=2, replace=False)
        halves = (self.batch_size // 2, self.batch_size - self.batch_size // 2)
        parts = []
        for m, size in zip((self.ids[a], self.ids[b]), halves):
            pool = self.pools[m]
            parts.append(self.rng.choice(pool, size=min(size, pool.size), replace=False))
        return np.concatenate(parts)


def two_domain_batch_sampler(dataset_or_domains, batch_size: int, rng, allowed=None) -> TwoDomainBatchSampler:
    domains = dataset_or_domains.d if isinstance(dataset_or_domains, Dataset) else dataset_or_domains
    if not isinstance(rng, np.random.Generator):
        rng = make_rng(rng)
    return TwoDomainBatchSampler(domains, batch_size, rng, allowed)


@dataclass(frozen=True)
class SequenceView:
    indices: np.ndarray   # L+1 dataset rows, oldest first
    target: int


def sequence_windows(ds: Dataset, L: int, domains: Sequence[int] | None = None) -> np.ndarray:
    """Row-index windows (n, L+1) ending at each epoch with L contiguous predecessors."""
    idx = np.arange(len(ds)) if domains is None else ds.select_domains(domains)
    out = []
    for m in np.unique(ds.d[idx]):
        rows = idx[ds.d[idx] == m]
        rows = rows[np.argsort(ds.k[rows], kind="stable")]
        ks = ds.k[rows].astype(np.int64)
        for end in range(L, rows.size):
            if ks[end] - ks[end - L] == L:
                out.append(rows[end - L : end + 1])
    return np.asarray(out, dtype=np.int64).reshape(-1, L + 1)


def sequence_view(ds: Dataset, window: np.ndarray) -> SequenceView:
    return SequenceView(indices=np.asarray(window), target=int(ds.y[window[-1]]))
