import json
import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from measure import stein, vmf
from measure.numerics import make_rng
from measure.stein import KernelConfig, SteinError

CALIBRATION = json.loads((Path(__file__).parent / "fixtures" / "stein_calibration.json").read_text())
THRESH = CALIBRATION["thresholds"]


def naive_scores(Z, h, ridge):
    """Loop-level re-implementation of the kernel Stein estimator."""
    N = Z.shape[0]
    K = np.empty((N, N))
    for i in range(N):
        for j in range(N):
            K[i, j] = math.exp(-np.sum((Z[i] - Z[j]) ** 2) / (2 * h * h))
    div = np.zeros_like(Z)
    for i in range(N):
        for j in range(N):
            # gradient of k(z_i, z_j) with respect to z_j
            div[i] += K[i, j] * (Z[i] - Z[j]) / (h * h)
    eta = ridge * np.mean(np.diag(K))
    return -np.linalg.solve(K + eta * np.eye(N), div)


def score_quality(Z, truth):
    G = stein.stein_score(Z)
    cos = np.sum(G * truth, 1) / (np.linalg.norm(G, axis=1) * np.linalg.norm(truth, axis=1))
    err = np.linalg.norm(G - truth, axis=1)
    return cos.mean(), (err / np.linalg.norm(truth, axis=1)).mean(), err.mean()


def test_rbf_kernel_examples(rng):
    np.testing.assert_array_equal(stein.rbf_kernel(np.ones((4, 3)), 0.7), np.ones((4, 4)))
    h = 1.3
    K = stein.rbf_kernel(np.array([[0.0, 0.0], [h * math.sqrt(2), 0.0]]), h)
    assert K[0, 1] == pytest.approx(math.exp(-1), abs=1e-15)
    Z = rng.standard_normal((16, 8))
    K = stein.rbf_kernel(Z, 2.0)
    assert np.max(np.abs(K - K.T)) < 1e-14
    np.testing.assert_array_equal(np.diag(K), 1.0)
    direct = np.exp(-((Z[:, None, :] - Z[None, :, :]) ** 2).sum(-1) / 8.0)
    np.testing.assert_allclose(K, direct, rtol=1e-13)


def test_rbf_rejects_bad_bandwidth():
    with pytest.raises(SteinError):
        stein.rbf_kernel(np.zeros((2, 2)), 0.0)


def test_median_heuristic_examples(rng):
    assert stein.median_heuristic(np.array([[0.0, 0.0], [3.0, 0.0]])) == pytest.approx(3.0)
    pts = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 2.0], [3.0, 3.0]])
    base = stein.median_heuristic(pts)
    assert stein.median_heuristic(np.vstack([pts, pts])) == pytest.approx(base)
    assert stein.median_heuristic(np.zeros((5, 3))) == 1.0
    with pytest.raises(SteinError):
        stein.median_heuristic(np.zeros((1, 3)))


def test_median_heuristic_gaussian_scale():
    # median chi distance between two N(0, I_8) points is close to sqrt(2 * 8)
    h = stein.median_heuristic(make_rng(5).standard_normal((100, 8)))
    assert abs(h / math.sqrt(16) - 1) < 0.15


def test_scores_match_loop_implementation(rng):
    Z = rng.standard_normal((20, 3))
    cfg = KernelConfig()
    h = stein.median_heuristic(Z)
    np.testing.assert_allclose(stein.stein_score(Z, cfg), naive_scores(Z, h, cfg.ridge), rtol=1e-9, atol=1e-12)


def test_gaussian_score_oracle_at_512():
    Z = make_rng(0).standard_normal((512, 8))
    cos, rel, _ = score_quality(Z, -Z)
    assert cos > THRESH["cosine_512"]
    assert rel < THRESH["relative_l2_512"]


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_error_shrinks_with_sample_size(seed):
    errs = {}
    for n in (256, 1024):
        Z = make_rng(seed).standard_normal((n, 8))
        errs[n] = score_quality(Z, -Z)[2]
    assert errs[1024] < errs[256]


def test_scaled_gaussian_scores():
    mu, sigma = 1.5, 2.0
    Z = mu + sigma * make_rng(11).standard_normal((512, 8))
    cos, _, _ = score_quality(Z, -(Z - mu) / sigma**2)
    assert cos > THRESH["cosine_sigma2"]


def test_identical_samples_give_finite_bounded_scores():
    Z = np.tile([0.3, -0.2, 0.9], (6, 1))
    g = stein.stein_score(Z)
    assert np.all(np.isfinite(g))
    K = stein.rbf_kernel(Z, stein.median_heuristic(Z))
    div = stein.kernel_divergence(Z, K, 1.0)
    eta = KernelConfig().ridge * np.mean(np.diag(K))
    assert np.linalg.norm(g) <= np.linalg.norm(div) / eta + 1e-12


def test_kernel_config_validation():
    with pytest.raises(SteinError):
        KernelConfig(ridge=0.0)
    with pytest.raises(SteinError):
        KernelConfig(bandwidth=-1.0)
    with pytest.raises(SteinError):
        KernelConfig(domain_weighting="other")


def test_single_domain_equals_unconditional(rng):
    Z = rng.standard_normal((30, 4))
    cond = stein.conditional_entropy_surrogate(Z, np.full(30, 7))
    plain = stein.entropy_surrogate(Z)
    assert cond.surrogate == pytest.approx(plain.surrogate, abs=1e-12)
    np.testing.assert_allclose(cond.scores, plain.scores)
    assert cond.detached


def test_duplicated_domains_equal_single_domain(rng):
    Z = rng.standard_normal((25, 4))
    doubled = stein.conditional_entropy_surrogate(np.vstack([Z, Z]), np.repeat([1, 2], 25))
    assert doubled.surrogate == pytest.approx(stein.entropy_surrogate(Z).surrogate, abs=1e-12)


def test_two_vmf_clusters_match_two_pass_recomputation():
    a = vmf.sample(vmf.VmfParams(np.eye(5)[0], 20.0), 40, 1)
    b = vmf.sample(vmf.VmfParams(-np.eye(5)[0], 20.0), 60, 2)
    Z = np.vstack([a, b])
    d = np.repeat([4, 9], [40, 60])
    est = stein.conditional_entropy_surrogate(Z, d)
    cfg = KernelConfig()
    parts = []
    for X in (a, b):
        g = naive_scores(X, stein.median_heuristic(X), cfg.ridge)
        parts.append(-np.mean(np.sum(g * X, axis=1)))
    assert est.surrogate == pytest.approx(np.mean(parts), rel=1e-9)
    w = stein.domain_weights(d)
    assert -np.sum(w * np.sum(est.scores * Z, axis=1)) == pytest.approx(est.surrogate, rel=1e-12)


def test_sample_weighting_option(rng):
    Z = rng.standard_normal((30, 3))
    d = np.repeat([1, 2], [10, 20])
    cfg = KernelConfig(domain_weighting="sample")
    est = stein.conditional_entropy_surrogate(Z, d, cfg)
    assert -np.mean(np.sum(est.scores * Z, axis=1)) == pytest.approx(est.surrogate, rel=1e-12)


def test_small_domain_is_named():
    Z = np.random.default_rng(0).standard_normal((5, 2))
    with pytest.raises(SteinError, match="domain 3"):
        stein.conditional_entropy_surrogate(Z, [1, 1, 1, 1, 3])


@given(st.integers(0, 2**32 - 1))
def test_surrogate_invariant_to_permutation_and_relabeling(seed):
    gen = np.random.default_rng(seed)
    Z = gen.standard_normal((18, 3))
    d = np.repeat([1, 2, 3], 6)
    base = stein.conditional_entropy_surrogate(Z, d).surrogate
    perm = gen.permutation(18)
    assert stein.conditional_entropy_surrogate(Z[perm], d[perm]).surrogate == pytest.approx(base, rel=1e-9, abs=1e-12)
    relabel = np.array([0, 30, 10, 20])[d]
    assert stein.conditional_entropy_surrogate(Z, relabel).surrogate == pytest.approx(base, rel=1e-9, abs=1e-12)
