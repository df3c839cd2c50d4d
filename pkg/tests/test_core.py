import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from inhomspike.core import (DomainError, ModelError, NoiseProfile, OverlapState, Prior, discretize_kernel,
                             scaled_op_norm, tilde_map, validate_noise_profile)
from inhomspike import channels as ch


def test_prior_weights_must_sum_to_one():
    with pytest.raises(ModelError):
        Prior(kappa=1, atoms=[[1.0], [-1.0]], weights=[0.5, 0.49])


def test_prior_atom_dimension_checked():
    with pytest.raises(ModelError):
        Prior(kappa=2, atoms=[[1.0], [-1.0]], weights=[0.5, 0.5])


def test_prior_support_bound_enforced():
    with pytest.raises(ModelError):
        Prior(kappa=1, atoms=[[2.0], [-2.0]], weights=[0.5, 0.5], support_bound=1.0)


def test_prior_moments():
    p = Prior.sparse_rademacher(0.1)
    assert p.is_centered()
    assert np.allclose(p.second_moment(), [[0.2]])
    g = Prior.standard_gaussian(2)
    assert np.allclose(g.covariance(), np.eye(2))
    shifted = Prior(kappa=1, atoms=[[1.0], [0.0]], weights=[0.5, 0.5])
    assert not shifted.is_centered()
    assert np.allclose(shifted.covariance(), [[0.25]])


def test_profile_invariants():
    with pytest.raises(ModelError):
        NoiseProfile([0.5, 0.4], [[1, 1], [1, 1]])
    with pytest.raises(ModelError):
        NoiseProfile([0.5, 0.5], [[1, 2], [1, 1]])
    with pytest.raises(ModelError):
        NoiseProfile([0.5, 0.5], [[1, -1], [-1, 1]])


def test_tilde_map_two_blocks():
    prof = NoiseProfile([0.4, 0.6], [[1, 2], [2, 1]])
    Qt = tilde_map(np.array([[[1.0]], [[2.0]]]), prof)
    assert np.allclose(Qt.ravel(), [2.8, 2.0])


def test_tilde_map_single_block_and_zero():
    prof = NoiseProfile([1.0], [[3.0]])
    assert np.allclose(tilde_map(np.array([[[0.5]]]), prof), 1.5)
    assert np.allclose(tilde_map(np.zeros((1, 1, 1)), prof), 0.0)


def test_overlap_state_checks():
    prof = NoiseProfile([0.5, 0.5], [[1, 1], [1, 1]])
    s = OverlapState.from_Q(np.array([[[1.0]], [[0.5]]]), prof)
    assert s.is_psd() and s.is_consistent(prof)
    bad = OverlapState(np.array([[[-1.0]], [[0.5]]]), np.zeros((2, 1, 1)))
    assert not bad.is_psd()
    assert not bad.is_consistent(prof)


def test_validate_identity_is_psd_but_reducible():
    rep = validate_noise_profile(NoiseProfile([0.5, 0.5], np.eye(2)), power=1)
    assert rep.psd and not rep.irreducible and not rep.ok


def test_validate_indefinite():
    rep = validate_noise_profile(NoiseProfile([0.5, 0.5], [[1, 2], [2, 1]]))
    assert not rep.psd
    assert rep.min_eigenvalue == pytest.approx(-1.0)
    assert rep.reasons


def test_validate_dcsbm_profile_psd():
    prof = ch.fisher_information(ch.dcsbm_channel([0.3, 0.7], 1.0, [0.5, 0.5]))
    rep = validate_noise_profile(prof, qve_probe=True)
    assert rep.ok and rep.psd
    assert rep.qve_bound is not None and rep.qve_bound > 0


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 4), st.integers(0, 2 ** 32 - 1))
def test_irreducibility_monotone_in_power(L, seed):
    rng = np.random.default_rng(seed)
    n = 3
    inv = rng.uniform(0, 1, (n, n)) * (rng.uniform(size=(n, n)) < 0.5)
    inv = inv + inv.T + np.eye(n) * 3
    prof = NoiseProfile(np.full(n, 1 / 3), inv)
    if validate_noise_profile(prof, L).irreducible:
        assert validate_noise_profile(prof, L + 1).irreducible


def test_discretize_kernel_examples():
    p = discretize_kernel(lambda s, t: 2.5, 3)
    assert np.allclose(p.inv_delta, 2.5) and np.allclose(p.rho, 1 / 3)
    p = discretize_kernel(lambda s, t: 1 + s * t, 2)
    assert np.allclose(p.inv_delta, [[1.0625, 1.1875], [1.1875, 1.5625]])
    p = discretize_kernel(lambda s, t: 7.0 + s, 1)
    assert p.inv_delta.shape == (1, 1) and p.inv_delta[0, 0] == 7.5
    with pytest.raises(ValueError):
        discretize_kernel(lambda s, t: 1.0, 0)
    with pytest.raises(DomainError):
        discretize_kernel(lambda s, t: s - 0.5, 2)


def test_scaled_op_norm_examples():
    assert scaled_op_norm(np.eye(2), [0.5, 0.5]) == pytest.approx(0.5)
    # 2x2 oracle: largest eigenvalue of [[a, b], [b, c]]
    a, b, c = 0.4, 0.5 * np.sqrt(0.24), 1.2
    oracle = (a + c) / 2 + np.sqrt(((a - c) / 2) ** 2 + b * b)
    assert scaled_op_norm([[1, 0.5], [0.5, 2]], [0.4, 0.6]) == pytest.approx(oracle, abs=1e-14)
    with pytest.raises(ModelError):
        scaled_op_norm(np.eye(3), [0.5, 0.5])


@settings(max_examples=100, deadline=None)
@given(st.floats(0.01, 100), st.lists(st.floats(0.05, 1), min_size=1, max_size=5))
def test_scaled_op_norm_constant(c, w):
    rho = np.array(w) / np.sum(w)
    n = rho.size
    assert abs(scaled_op_norm(np.full((n, n), c), rho) - c) < 1e-12 * max(1, c)
