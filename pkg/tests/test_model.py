import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import multivariate_normal

from factories import random_params
from matchdid.errors import DimensionMismatch, InvalidProbability, NonPSDCovariance
from matchdid.model import (
    ModelParams,
    two_period_base,
    sample_population,
    scalar_params,
    selection_probability,
    validate,
)


def test_validate_rejects_bad_inputs():
    base = two_period_base()
    with pytest.raises(InvalidProbability):
        validate(base.replace(p_treat=1.0))
    with pytest.raises(NonPSDCovariance):
        validate(base.replace(sigma_e2=-0.1))
    with pytest.raises(NonPSDCovariance):
        validate(scalar_params([1, 1], [1, 1], rho=1.2))
    with pytest.raises(DimensionMismatch):
        validate(base.replace(beta_x=np.ones((3, 1))))
    two_x = ModelParams.build(
        beta_theta=[1, 1], beta_x=[[1, 1], [1, 1]], mu_theta=[[0], [1]], mu_x=[[0, 0], [1, 1]],
        sigma_tt=[[1]], sigma_xx=np.eye(2), sigma_tx=[[0, 0]], sigma_e2=1, interaction=[0, 1],
    )
    with pytest.raises(DimensionMismatch):
        validate(two_x)


def test_asymmetric_covariance_rejected():
    p = ModelParams.build(
        beta_theta=[1, 1], beta_x=[[1, 1], [1, 1]], mu_theta=[[0], [1]], mu_x=[[0, 0], [1, 1]],
        sigma_tt=[[1]], sigma_xx=[[1, 0.2], [0.1, 1]], sigma_tx=[[0, 0]], sigma_e2=1,
    )
    with pytest.raises(NonPSDCovariance):
        validate(p)


def test_perfect_correlation_is_admissible():
    vm = validate(scalar_params([1, 1.5], [1, 1.5], rho=1.0))
    assert vm.chol.shape == (2, 2)


def test_derived_quantities_for_base_configuration():
    d = validate(two_period_base()).derived
    assert d.Delta_PT == pytest.approx(1.0)
    assert d.s == pytest.approx(2 / 3)
    assert d.tilde_delta_theta[0] == pytest.approx(1.0)


@given(st.integers(0, 10_000))
def test_dict_round_trip(seed):
    p = random_params(np.random.default_rng(seed))
    back = ModelParams.from_dict(p.to_dict())
    assert back.to_dict() == p.to_dict()


def test_declared_dimensions_checked():
    doc = two_period_base().to_dict()
    doc["T"] = 3
    with pytest.raises(DimensionMismatch):
        ModelParams.from_dict(doc)
    del doc["sigma_e2"]
    with pytest.raises(DimensionMismatch):
        ModelParams.from_dict(doc)


def test_sampling_is_deterministic_and_blockwise():
    p = two_period_base(tau=2.0)
    a = sample_population(p, 20_000, 7)
    b = sample_population(p, 20_000, 7)
    c = sample_population(p, 16_384, 7)
    assert np.array_equal(a.y, b.y)
    assert np.array_equal(a.y[:16_384], c.y)
    assert not np.array_equal(a.y, sample_population(p, 20_000, 8).y)


def test_treatment_effect_only_in_final_period():
    d = sample_population(two_period_base(tau=2.0), 1000, 1)
    gain = d.y - d.y_untreated
    assert np.allclose(gain[:, 0], 0)
    assert np.allclose(gain[:, 1], 2.0 * d.z)


def test_sample_moments_match_model():
    rng = np.random.default_rng(11)
    p = random_params(rng, T=2, p=2, q=1)
    n = 200_000
    d = sample_population(p, n, 3)
    assert abs(d.z.mean() - p.p_treat) < 4 * np.sqrt(p.p_treat * (1 - p.p_treat) / n)
    for z in (0, 1):
        m = d.z == z
        w = np.hstack([d.theta[m], d.x[m]])
        mu = np.concatenate([p.mu_theta[z], p.mu_x[z]])
        se = np.sqrt(np.diag(p.joint_cov()) / m.sum())
        assert np.all(np.abs(w.mean(axis=0) - mu) < 4 * se)
        assert np.allclose(np.cov(w, rowvar=False), p.joint_cov(), atol=0.03)
    noise = d.y_untreated - p.intercepts - d.theta @ p.beta_theta.T - d.x @ p.beta_x.T
    assert noise.var() == pytest.approx(p.sigma_e2, rel=0.01)


def test_selection_probability_matches_bayes_rule():
    p = random_params(np.random.default_rng(5), p=2, q=1)
    cov = p.joint_cov()
    pts = np.random.default_rng(6).normal(size=(5, 3))
    for w in pts:
        f1 = multivariate_normal(np.concatenate([p.mu_theta[1], p.mu_x[1]]), cov).pdf(w)
        f0 = multivariate_normal(np.concatenate([p.mu_theta[0], p.mu_x[0]]), cov).pdf(w)
        ref = p.p_treat * f1 / (p.p_treat * f1 + (1 - p.p_treat) * f0)
        assert selection_probability(p, w[:1], w[1:]) == pytest.approx(ref, rel=1e-9)
