"""Classification metrics and the information diagnostics on learned embeddings."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import digamma, gammaln

from . import losses, vmf
from .data import N_CLASSES
from .numerics import derive_seed, make_rng


class MetricsError(ValueError):
    pass


def confusion_matrix(y_true, y_pred, n_classes: int = N_CLASSES) -> np.ndarray:
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise MetricsError("truth and prediction lengths differ")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


def _check_cm(cm) -> np.ndarray:
    cm = np.asarray(cm)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise MetricsError("confusion matrix must be square")
    if cm.sum() <= 0:
        raise MetricsError("empty confusion matrix")
    return cm.astype(np.float64)


def accuracy(cm) -> float:
    cm = _check_cm(cm)
    return float(np.trace(cm) / cm.sum())


def cohens_kappa(cm) -> float:
    """Chance-corrected agreement; 0 when chance agreement is already 1."""
    cm = _check_cm(cm)
    n = cm.sum()
    p_o = np.trace(cm) / n
    p_e = float(np.dot(cm.sum(axis=1), cm.sum(axis=0))) / n**2
    if p_e == 1.0:
        return 0.0
    return float((p_o - p_e) / (1.0 - p_e))


def per_class_f1(cm) -> np.ndarray:
    cm = _check_cm(cm)
    tp = np.diag(cm)
    pred = cm.sum(axis=0)
    true = cm.sum(axis=1)
    out = np.zeros(cm.shape[0])
    for c in range(cm.shape[0]):
        p = tp[c] / pred[c] if pred[c] else 0.0
        r = tp[c] / true[c] if true[c] else 0.0
        out[c] = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return out


def absent_classes(cm) -> list[int]:
    """Classes never true and never predicted (their F1 is 0 by convention)."""
    cm = _check_cm(cm)
    return [c for c in range(cm.shape[0]) if cm[c].sum() == 0 and cm[:, c].sum() == 0]


def macro_f1(cm) -> float:
    return float(np.mean(per_class_f1(cm)))


@dataclass
class ClassificationReport:
    kappa: float
    acc: float
    f1_macro: float
    f1_per_class: list[float]
    absent: list[int]


def classification_report(y_true, y_pred, n_classes: int = N_CLASSES) -> ClassificationReport:
    cm = confusion_matrix(y_true, y_pred, n_classes)
    return ClassificationReport(cohens_kappa(cm), accuracy(cm), macro_f1(cm),
                                per_class_f1(cm).tolist(), absent_classes(cm))


def knn_entropy(samples, k: int = 5, intrinsic_dim: int | None = None) -> float:
    """Kozachenko-Leonenko differential entropy estimate in nats.

    Distances are Euclidean in the ambient space. ``intrinsic_dim`` replaces the
    ambient dimension in the volume term: for unit vectors in R^n pass n-1 to
    estimate entropy with respect to the sphere's surface measure.
    """
    X = np.asarray(samples, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    N, D = X.shape
    if not N > k >= 1:
        raise MetricsError(f"need more samples ({N}) than neighbours (k={k}) and k >= 1")
    dim = D if intrinsic_dim is None else intrinsic_dim
    dist, _ = cKDTree(X).query(X, k=k + 1)
    eps = dist[:, -1]
    if np.any(eps <= 0):
        raise MetricsError("zero nearest-neighbour distance (duplicate samples)")
    log_vol = 0.5 * dim * np.log(np.pi) - gammaln(0.5 * dim + 1)
    return float(digamma(N) - digamma(k) + log_vol + dim * np.mean(np.log(eps)))


def _vmf_kappa_estimate(Z: np.ndarray) -> float:
    # closed-form approximation from the mean resultant length
    n = Z.shape[1]
    r = min(float(np.linalg.norm(Z.mean(axis=0))), 1 - 1e-9)
    return r * (n - r * r) / (1 - r * r)


@dataclass
class InfoReport:
    superfluous_proxy: float
    I_zd: float
    H_z: float
    H_z_given_d: float
    I_zd_vmf: float
    kappa: float
    k: int
    n_samples: int

    def as_row(self, step: int) -> dict:
        return {"step": step, "superfluous_proxy": self.superfluous_proxy, "I_zd": self.I_zd,
                "H_z": self.H_z, "H_z_given_d": self.H_z_given_d}

    def to_dict(self) -> dict:
        return asdict(self)


def info_report(z, z_p, domains, kappa: float = 1.0, k: int = 5, repeats: int = 8, seed: int = 0) -> InfoReport:
    """Superfluous-information proxy and kNN estimate of I(z; d) for unit embeddings.

    H(z) is estimated on pooled subsamples of the same size as the smallest
    domain so that the kNN bias cancels in I(z; d) = H(z) - mean_d H(z | d).
    """
    z = np.asarray(z, dtype=np.float64)
    domains = np.asarray(domains)
    ids, counts = np.unique(domains, return_counts=True)
    if counts.min() < 2:
        raise MetricsError("info_report needs >= 2 samples per domain")
    n_dim = z.shape[1]
    intrinsic = n_dim - 1
    superfluous = losses.vmf_alignment_bound(z, z_p, kappa)
    h_cond = [knn_entropy(z[domains == m], k, intrinsic) for m in ids]
    size = int(counts.min())
    rng = make_rng(derive_seed(seed, "info-subsample"))
    h_pool = [knn_entropy(z[rng.choice(z.shape[0], size, replace=False)], k, intrinsic) for _ in range(repeats)]
    H_z, H_zd = float(np.mean(h_pool)), float(np.mean(h_cond))
    vmf_pooled = vmf.entropy(n_dim, _vmf_kappa_estimate(z))
    vmf_cond = np.mean([vmf.entropy(n_dim, _vmf_kappa_estimate(z[domains == m])) for m in ids])
    return InfoReport(
        superfluous_proxy=superfluous,
        I_zd=H_z - H_zd,
        H_z=H_z,
        H_z_given_d=H_zd,
        I_zd_vmf=float(vmf_pooled - vmf_cond),
        kappa=kappa,
        k=k,
        n_samples=int(z.shape[0]),
    )
