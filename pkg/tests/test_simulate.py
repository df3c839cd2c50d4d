import struct

import numpy as np
import pytest

from inhomspike import channels as ch
from inhomspike import simulate as sm
from inhomspike import spectral as sp
from inhomspike.core import DomainError, ModelError, NoiseProfile, Prior

ONES = Prior(kappa=1, atoms=[[1.0]], weights=[1.0])


def test_block_sizes_largest_remainder():
    assert sm.block_sizes([1 / 3] * 3, 10).tolist() == [4, 3, 3]
    assert sm.block_sizes([0.25, 0.75], 4000).tolist() == [1000, 3000]
    assert sm.block_sizes([0.5, 0.5], 7).sum() == 7


def test_config_validation():
    with pytest.raises(ModelError):
        sm.SimConfig(0)
    with pytest.raises(ModelError):
        sm.SimConfig(10, seed=-1)


def test_signal_point_mass():
    assert np.all(sm.sample_signal(ONES, sm.SimConfig(50)) == 1.0)


def test_signal_rademacher_mean(rademacher):
    N = 100_000
    x = sm.sample_signal(rademacher, sm.SimConfig(N, 7))
    assert abs(x.mean()) < 4 / np.sqrt(N)
    assert set(np.unique(x)) == {-1.0, 1.0}


def test_signal_deterministic(rademacher):
    a = sm.sample_signal(rademacher, sm.SimConfig(500, 42))
    assert np.array_equal(a, sm.sample_signal(rademacher, sm.SimConfig(500, 42)))
    assert not np.array_equal(a, sm.sample_signal(rademacher, sm.SimConfig(500, 43)))
    g = sm.sample_signal(Prior.standard_gaussian(3), sm.SimConfig(20, 1))
    assert g.shape == (20, 3)


def test_spiked_symmetric_and_deterministic(rademacher):
    prof = NoiseProfile([0.3, 0.7], [[1.0, 0.5], [0.5, 2.0]])
    cfg = sm.SimConfig(300, 5, prof.rho)
    x = sm.sample_signal(rademacher, cfg)
    Y = sm.sample_spiked(prof, x, cfg)
    assert np.array_equal(Y, Y.T)
    assert np.array_equal(Y, sm.sample_spiked(prof, x, cfg))


def test_row_streams_thread_independent(monkeypatch):
    prof = NoiseProfile([0.5, 0.5], [[1.0, 0.5], [0.5, 2.0]])
    cfg = sm.SimConfig(257, 9, prof.rho)
    x = np.zeros((257, 1))
    serial = sm.sample_spiked(prof, x, cfg)
    monkeypatch.setenv(sm.THREADS_ENV, "3")
    assert np.array_equal(serial, sm.sample_spiked(prof, x, cfg))


def test_spiked_noise_block_variances():
    prof = NoiseProfile([0.5, 0.5], [[1.0, 0.25], [0.25, 4.0]])
    cfg = sm.SimConfig(1000, 3, prof.rho)
    Y = sm.sample_spiked(prof, np.zeros((1000, 1)), cfg)
    a, b = Y[:500, :500], Y[500:, 500:]
    assert np.var(Y[:500, 500:]) == pytest.approx(4.0, rel=0.02)
    assert np.var(a[np.triu_indices(500)]) == pytest.approx(1.0, rel=0.03)
    assert np.var(b[np.triu_indices(500)]) == pytest.approx(0.25, rel=0.03)


def test_pure_noise_edge(homogeneous):
    cfg = sm.SimConfig(4000, 11)
    Y = sm.sample_spiked(homogeneous, np.zeros((4000, 1)), cfg)
    top = sm.top_eigenvalues(Y / np.sqrt(4000))[-1]
    assert top == pytest.approx(2.0, abs=0.05)
    assert sm.top_outlier(np.array([top]), [(-2.0, 2.0)], N=4000) is None


def test_pure_spike_limit(rademacher):
    prof = NoiseProfile([1.0], [[1e12]])
    cfg = sm.SimConfig(400, 2)
    x = sm.sample_signal(rademacher, cfg)
    top = sm.top_eigenvalues(sm.sample_spiked(prof, x, cfg) / np.sqrt(400))[-1]
    # x x^T / N with zero diagonal has top eigenvalue (||x||^2 - 1) / N
    assert top == pytest.approx(1.0 - 1 / 400, abs=1e-4)


def test_dcsbm_null_edge_frequency():
    theta = [0.3, 0.6]
    c = ch.dcsbm_channel(theta, 0.0, [0.5, 0.5])
    cfg = sm.SimConfig(2000, 4, c.rho)
    D = sm.sample_channel_data(c, np.zeros((2000, 1)), cfg)
    assert np.array_equal(D, D.T) and set(np.unique(D)) <= {0.0, 1.0}
    idx = [slice(0, 1000), slice(1000, 2000)]
    for s in range(2):
        for t in range(2):
            blk = D[idx[s], idx[t]]
            vals = blk[np.triu_indices(1000, 1)] if s == t else blk.ravel()
            p = theta[s] * theta[t]
            assert abs(vals.mean() - p) < 4 * np.sqrt(p * (1 - p) / vals.size)


def test_dcsbm_near_complete():
    c = ch.dcsbm_channel([0.999, 0.999], 0.01, [0.5, 0.5])
    cfg = sm.SimConfig(200, 1, c.rho)
    D = sm.sample_channel_data(c, np.ones((200, 1)) * 0.0, cfg)
    assert D.mean() > 0.99


def test_dcsbm_lambda_too_large():
    c = ch.dcsbm_channel([0.1, 0.5], 100.0, [0.5, 0.5])
    cfg = sm.SimConfig(100, 1, c.rho)
    with pytest.raises(DomainError, match=r"\(0, 0\)"):
        sm.sample_channel_data(c, np.ones((100, 1)), cfg)


def test_effective_matrix_gaussian_channel():
    prof = NoiseProfile([0.5, 0.5], [[1.0, 0.5], [0.5, 2.0]])
    c = ch.gaussian_channel(prof)
    cfg = sm.SimConfig(100, 1, prof.rho)
    D = sm.sample_channel_data(c, np.zeros((100, 1)), cfg)
    E = sm.effective_matrix(c, D, cfg)
    assert np.allclose(E, sm._block_matrix(cfg, prof.inv_delta) * D / 10.0)
    assert np.allclose(sm.effective_matrix(c, D, cfg, scale_by_delta=True), D / 10.0)


def test_effective_matrix_dcsbm_entry():
    c = ch.dcsbm_channel([0.5, 0.5], 1.0, [0.5, 0.5])
    cfg = sm.SimConfig(4, 0, c.rho)
    E = sm.effective_matrix(c, np.ones((4, 4)), cfg)
    assert np.allclose(E, 4.0 / 2.0)


def test_effective_matrix_block_means():
    c = ch.dcsbm_channel([0.4, 0.8], 1.0, [0.5, 0.5])
    inv = ch.fisher_information(c).inv_delta
    N = 2000
    cfg = sm.SimConfig(N, 8, c.rho)
    E = sm.effective_matrix(c, sm.sample_channel_data(c, np.ones((N, 1)), cfg), cfg)
    half = N // 2
    for s, t in ((0, 0), (0, 1), (1, 1)):
        blk = E[s * half:(s + 1) * half, t * half:(t + 1) * half]
        expect = inv[s, t] / N
        sd = np.sqrt(inv[s, t] / N) / half
        assert abs(blk.mean() - expect) < 6 * sd + 1e-4 * expect


def test_custom_channel_sampling_matches_dcsbm():
    p = 0.3
    blk = ch.TabulatedBlock([0.0, 1.0], [1 - p, p], [-1 / (1 - p), 1 / p], [-1 / (1 - p) ** 2, -1 / p ** 2])
    c = ch.custom_channel({(0, 0): blk}, [1.0])
    cfg = sm.SimConfig(1000, 2)
    D = sm.sample_channel_data(c, np.zeros((1000, 1)), cfg)
    vals = D[np.triu_indices(1000, 1)]
    assert abs(vals.mean() - p) < 4 * np.sqrt(p * (1 - p) / vals.size)


def test_empirical_spectrum_examples():
    assert np.allclose(sm.empirical_spectrum(np.eye(3)), [1, 1, 1])
    assert np.allclose(sm.empirical_spectrum(np.diag([3.0, 1.0, 2.0])), [1, 2, 3])
    rng = np.random.default_rng(0)
    A = rng.standard_normal((200, 200))
    A = A + A.T
    assert abs(sm.empirical_spectrum(A).sum() - np.trace(A)) < 1e-8 * 200


def test_ks_examples():
    assert sm.ks_distance([1, 2, 3], [1, 2, 3]) == 0.0
    assert sm.ks_distance(np.zeros(10), np.ones(10)) == 1.0
    with pytest.raises(ValueError):
        sm.ks_distance([], [1.0])


def test_top_outlier_margin():
    assert sm.outlier_margin(4000) == 0.02
    assert sm.outlier_margin(100) == pytest.approx(2 * 100 ** (-2 / 3))
    assert sm.top_outlier([0.0, 2.5], [(-2.0, 2.0)], N=4000) == (2.5, 0.5)
    assert sm.top_outlier([0.0, 2.01], [(-2.0, 2.0)], N=4000) is None


def test_dump_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    A = rng.standard_normal((5, 5))
    A = A + A.T
    path = tmp_path / "m.bin"
    sm.dump_matrix(A, path)
    raw = path.read_bytes()
    assert struct.unpack("<q", raw[:8])[0] == 5
    assert len(raw) == 8 + 8 * 15
    assert struct.unpack("<d", raw[8:16])[0] == A[0, 0]
    assert struct.unpack("<d", raw[16:24])[0] == A[1, 0]
    assert np.array_equal(sm.load_matrix(path), A)


def test_exchange_symmetry_within_block(rademacher):
    prof = NoiseProfile([0.5, 0.5], [[1.0, 0.5], [0.5, 2.0]])
    cfg = sm.SimConfig(400, 6, prof.rho)
    x = sm.sample_signal(rademacher, cfg)
    M = sm.weighted_spiked(prof, sm.sample_spiked(prof, x, cfg), cfg)
    perm = np.concatenate([np.random.default_rng(0).permutation(200), 200 + np.arange(200)])
    assert np.allclose(sm.empirical_spectrum(M[np.ix_(perm, perm)]), sm.empirical_spectrum(M), atol=1e-10)
    # a different seed gives the same limiting spectrum
    other = sm.SimConfig(400, 7, prof.rho)
    M2 = sm.weighted_spiked(prof, sm.sample_spiked(prof, sm.sample_signal(rademacher, other), other), other)
    assert sm.ks_distance(sm.empirical_spectrum(M), sm.empirical_spectrum(M2)) < 0.05


def _universality_ks(N, seed, rademacher):
    c = ch.dcsbm_channel([0.4, 0.8], 1.0, [0.5, 0.5])
    prof = ch.fisher_information(c)
    cfg = sm.SimConfig(N, seed, c.rho)
    x = sm.sample_signal(rademacher, cfg)
    a = sm.empirical_spectrum(sm.effective_matrix(c, sm.sample_channel_data(c, x, cfg), cfg))
    b = sm.empirical_spectrum(sm.matched_gaussian(prof, x, cfg))
    return sm.ks_distance(a, b)


def test_universality_improves_with_N(rademacher):
    means = [np.mean([_universality_ks(N, s, rademacher) for s in range(3)]) for N in (500, 1000, 2000)]
    assert means[0] > means[1] > means[2]


@pytest.mark.parametrize("prof", [NoiseProfile([1.0], [[1.0]]), NoiseProfile([0.4, 0.6], [[1.0, 0.5], [0.5, 2.0]])])
def test_histogram_matches_density(prof):
    N = 4000
    cfg = sm.SimConfig(N, 12, prof.rho)
    M = sm.weighted_spiked(prof, sm.sample_spiked(prof, np.zeros((N, 1)), cfg), cfg)
    evals = sm.empirical_spectrum(M)
    (lo, hi), = sp.support_edges(prof)
    counts, bins = np.histogram(evals, bins=50, range=(lo, hi))
    hist = counts / (N * np.diff(bins))
    mids = 0.5 * (bins[1:] + bins[:-1])
    fine = np.linspace(lo, hi, 5001)
    dens = sp.density(prof, fine)
    pred = np.array([dens[(fine >= a) & (fine <= b)].mean() for a, b in zip(bins[:-1], bins[1:])])
    assert np.max(np.abs(hist - pred)) < 0.05
    assert mids.size == 50
