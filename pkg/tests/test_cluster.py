import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.linalg import block_diag
from sklearn.metrics import silhouette_samples

from robustcov.cluster import choose_k, correlation_distance, kmeans, nco_allocate, quality_z, silhouette
from robustcov.errors import SingleCluster
from robustcov.estimators import CovEstimate, EstimatorKind
from robustcov.solver import minvar_closed_form

from conftest import random_spd


def est(m):
    return CovEstimate(m, [f"A{k}" for k in range(len(m))], EstimatorKind.SAMPLE)


def block_corr(sizes, within, rng=None, jitter=0.0):
    blocks = []
    for n, rho in zip(sizes, within):
        b = np.full((n, n), rho)
        np.fill_diagonal(b, 1.0)
        blocks.append(b)
    c = block_diag(*blocks)
    if jitter and rng is not None:
        e = rng.normal(0, jitter, c.shape)
        c = c + (e + e.T) / 2
        np.fill_diagonal(c, 1.0)
    return c


def block_cov(rng, sizes):
    """Independent blocks, each a one-factor correlation with unequal loadings
    and unequal volatilities."""
    blocks = []
    for n in sizes:
        beta = rng.uniform(0.6, 0.9, n)
        c = np.outer(beta, beta)
        np.fill_diagonal(c, 1.0)
        sd = rng.uniform(0.02, 0.05, n)
        blocks.append(c * np.outer(sd, sd))
    return block_diag(*blocks)


def test_correlation_distance_examples():
    d = correlation_distance(np.array([[1.0, -1.0, 0.5], [-1.0, 1.0, 0.0], [0.5, 0.0, 1.0]]))
    assert d[0, 0] == 0 and d[0, 1] == 1 and d[0, 2] == pytest.approx(0.5)


def wcss(x, labels):
    return sum(((x[labels == k] - x[labels == k].mean(axis=0)) ** 2).sum() for k in np.unique(labels))


def test_kmeans_brute_force_1d():
    x = np.array([0.0, 0.1, 10.0, 10.1])
    c = kmeans(x, 2, seed=0)
    best = min((wcss(x, np.array(p)), p) for p in itertools.product([0, 1], repeat=4) if len(set(p)) == 2)
    assert c.wcss == pytest.approx(best[0])
    assert c.labels[0] == c.labels[1] != c.labels[2] == c.labels[3]


def test_kmeans_k_equals_n():
    x = np.array([[0.0], [1.0], [3.0]])
    c = kmeans(x, 3, seed=0)
    assert c.wcss == 0 and len(set(c.labels)) == 3


def test_kmeans_duplicated_dataset():
    x = np.array([0.0, 0.1, 10.0, 10.1])
    a = kmeans(x, 2, seed=3).labels
    b = kmeans(np.r_[x, x], 2, seed=3).labels
    assert np.array_equal(b[:4], a) and np.array_equal(b[4:], a)


def test_kmeans_deterministic(rng):
    x = rng.normal(size=(30, 4))
    a, b = kmeans(x, 3, seed=9), kmeans(x, 3, seed=9)
    assert np.array_equal(a.labels, b.labels) and a.wcss == b.wcss


def test_silhouette_examples():
    x = np.array([0.0, 0.1, 10.0, 10.1])
    s = silhouette(x, [0, 0, 1, 1])
    assert s[0] == pytest.approx(1 - 0.1 / 10.05, abs=1e-12)
    assert silhouette(np.array([0.0, 0.0, 5.0]), [0, 0, 1])[0] == 1.0
    tri = np.array([[0.0, 0.0], [1.0, 0.0], [0.5, np.sqrt(3) / 2]])
    assert np.all(silhouette(tri, [0, 1, 2]) == 0)
    with pytest.raises(SingleCluster):
        silhouette(x, [0, 0, 0, 0])


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.integers(5, 25), st.integers(2, 4))
def test_silhouette_matches_sklearn(seed, n, k):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 3))
    labels = np.r_[np.arange(k), rng.integers(0, k, n - k)]
    ours = silhouette(x, labels)
    ref = silhouette_samples(x, labels)
    assert np.allclose(ours, ref, atol=1e-12)
    assert np.all(np.abs(ours) <= 1)


def test_quality_z():
    s = np.array([0.5, 0.7, 0.6])
    assert quality_z(s) == pytest.approx(0.6 / (0.1 / np.sqrt(3)))


@pytest.mark.parametrize("sizes", [(5, 5), (4, 4, 4), (3, 6, 3)])
def test_choose_k_recovers_blocks(sizes, rng):
    c = block_corr(sizes, [0.7] * len(sizes), rng, jitter=0.02)
    cl = choose_k(c, k_max=4, seed=0)
    assert cl.K == len(sizes)
    assert cl.quality_z > 2
    truth = np.repeat(np.arange(len(sizes)), sizes)
    # same partition up to relabeling
    assert len({(a, b) for a, b in zip(truth, cl.labels)}) == len(sizes)
    assert set(cl.scores) == {2, 3, 4}


@pytest.mark.parametrize("sizes", [(5, 7), (4, 3, 5)])
def test_nco_exact_on_blocks(sizes, rng):
    v = block_cov(rng, sizes)
    # exact on the raw matrix
    raw = nco_allocate(est(v), q=10.0, denoise=False, seed=1)
    assert np.abs(raw.final - minvar_closed_form(v)).max() <= 1e-6
    # and on the de-noised matrix, which stays block diagonal
    den = nco_allocate(est(v), q=10.0, seed=1)
    assert raw.clustering.K == den.clustering.K == len(sizes)
    vh = den.covariance.matrix
    mask = block_diag(*[np.ones((n, n)) for n in sizes]) == 0
    assert np.abs(vh[mask]).max() <= 1e-12
    assert np.abs(den.final - minvar_closed_form(vh)).max() <= 1e-6


def test_nco_single_cluster_collapse(rng):
    v = random_spd(rng, 6) * 1e-3
    out = nco_allocate(est(v), q=10.0, k_min=1, k_max=1, denoise=False)
    assert out.clustering.K == 1
    assert np.allclose(out.final, minvar_closed_form(v), atol=1e-14)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(4, 14))
def test_nco_composition(seed, n):
    rng = np.random.default_rng(seed)
    v = random_spd(rng, n) * 1e-3
    out = nco_allocate(est(v), q=5.0, seed=seed, restarts=3)
    assert abs(out.final.sum() - 1) <= 1e-10
    assert np.allclose(out.final, out.intra @ out.inter, atol=1e-15)
    for k in range(out.clustering.K):
        col = out.intra[:, k]
        assert np.all(col[out.clustering.labels != k] == 0)
        assert abs(col.sum() - 1) <= 1e-10
    vr = out.intra.T @ out.covariance.matrix @ out.intra
    assert np.linalg.eigvalsh(vr)[0] > 1e-10 * np.linalg.eigvalsh(vr)[-1]
