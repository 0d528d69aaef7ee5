import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from precipdiff.errors import ConfigError
from precipdiff.schedule import SCHEDULE_KINDS, build_schedule, ddim_subsequence


@pytest.mark.parametrize("kind,n_steps", [("cosine", 1400), ("linear", 50), ("cosine", 1)])
def test_invariants(kind, n_steps):
    s = build_schedule(n_steps, kind)
    assert np.abs(s.alpha**2 + s.sigma**2 - 1.0).max() <= 1e-12
    assert s.alpha[0] == 1.0 and s.sigma[0] == 0.0
    assert (np.diff(s.alpha) < 0).all()
    assert (np.diff(s.sigma) > 0).all()
    assert ((s.beta > 0) & (s.beta < 1)).all()
    assert len(s.beta) == n_steps and len(s.alpha) == n_steps + 1


def test_default_run_depth():
    s = build_schedule(1400, "cosine")
    assert s.n_steps == 1400
    # terminal signal level is tiny, as prior matching requires
    assert s.alpha[-1] < 1e-3


def test_linear_alpha_matches_product_iteration():
    # oracle: accumulate the product one beta at a time
    s = build_schedule(50, "linear", beta_start=1e-4, beta_end=0.02)
    prod = 1.0
    for b in np.linspace(1e-4, 0.02, 50):
        prod *= 1.0 - b
    assert math.isclose(s.alpha[50], math.sqrt(prod), rel_tol=1e-12)


def test_build_is_deterministic():
    a = build_schedule(100, "cosine")
    b = build_schedule(100, "cosine")
    assert np.array_equal(a.beta, b.beta) and np.array_equal(a.alpha, b.alpha)


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(n_steps=0),
        dict(n_steps=-3),
        dict(n_steps=10, kind="linear", beta_start=0.0),
        dict(n_steps=10, kind="linear", beta_start=0.5, beta_end=0.1),
        dict(n_steps=10, kind="linear", beta_end=1.0),
        dict(n_steps=10, kind="quadratic"),
    ],
)
def test_build_rejects_bad_config(kwargs):
    with pytest.raises(ConfigError):
        build_schedule(**kwargs)


def test_forward_marginal_trivial_cases():
    s = build_schedule(50, "linear")
    r0 = np.random.default_rng(0).normal(size=(4, 4))
    zero = np.zeros_like(r0)
    np.testing.assert_allclose(s.forward_marginal_sample(r0, 7, zero), s.alpha[7] * r0)
    np.testing.assert_array_equal(s.forward_marginal_sample(r0, 0, zero + 3.0), r0)


def test_v_target_trivial_cases():
    s = build_schedule(50, "linear")
    rng = np.random.default_rng(1)
    r0, eps = rng.normal(size=(2, 5, 5))
    np.testing.assert_array_equal(s.v_target(r0, eps, 0), eps)
    np.testing.assert_allclose(s.v_target(r0, np.zeros_like(r0), 9), -s.sigma[9] * r0)


def test_step_and_shape_validation():
    s = build_schedule(10, "cosine")
    r = np.zeros((3, 3))
    with pytest.raises(ValueError):
        s.forward_marginal_sample(r, 11, r)
    with pytest.raises(ValueError):
        s.forward_marginal_sample(r, -1, r)
    with pytest.raises(ValueError):
        s.forward_marginal_sample(r, 2, np.zeros((2, 3)))
    with pytest.raises(ValueError):
        s.v_target(r, np.zeros((4, 4)), 2)
    with pytest.raises(ValueError):
        s.invert_v(r, r, 0)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 50))
def test_v_roundtrip_is_identity(seed, n):
    s = build_schedule(50, "cosine")
    rng = np.random.default_rng(seed)
    r0, eps = rng.normal(size=(2, 6, 6))
    r_n = s.forward_marginal_sample(r0, n, eps)
    v = s.v_target(r0, eps, n)
    r0_hat, eps_hat = s.invert_v(r_n, v, n)
    np.testing.assert_allclose(r0_hat, r0, atol=1e-12)
    np.testing.assert_allclose(eps_hat, eps, atol=1e-12)


def test_v_roundtrip_single_precision():
    s = build_schedule(50, "cosine")
    g = torch.Generator().manual_seed(3)
    r0 = torch.randn(8, 8, generator=g)
    eps = torch.randn(8, 8, generator=g)
    for n in (1, 17, 50):
        r_n = s.forward_marginal_sample(r0, n, eps)
        v = s.v_target(r0, eps, n)
        r0_hat, eps_hat = s.invert_v(r_n, v, n)
        assert (r0_hat - r0).abs().max() <= 1e-6
        assert (eps_hat - eps).abs().max() <= 1e-6


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 50))
def test_invert_v_reconstruction_identity(seed, n):
    # arbitrary (r_n, v_hat), not necessarily consistent with any r0
    s = build_schedule(50, "linear")
    rng = np.random.default_rng(seed)
    r_n, v_hat = rng.normal(size=(2, 4, 4))
    r0_hat, eps_hat = s.invert_v(r_n, v_hat, n)
    back = s.alpha[n] * r0_hat + s.sigma[n] * eps_hat
    np.testing.assert_allclose(back, r_n, atol=1e-12)


def test_invert_v_zero_prediction():
    s = build_schedule(20, "cosine")
    r_n = np.random.default_rng(2).normal(size=(3, 3))
    r0_hat, eps_hat = s.invert_v(r_n, np.zeros_like(r_n), 5)
    np.testing.assert_allclose(r0_hat, s.alpha[5] * r_n)
    np.testing.assert_allclose(eps_hat, s.sigma[5] * r_n)


def test_stepwise_chain_matches_closed_form():
    # simulate the one-step kernel n times and compare moments
    s = build_schedule(50, "linear", beta_start=1e-3, beta_end=0.05)
    n, draws = 30, 10_000
    r0 = 1.7
    rng = np.random.default_rng(7)
    r = np.full(draws, r0)
    for i in range(n):
        b = s.beta[i]
        r = math.sqrt(1.0 - b) * r + math.sqrt(b) * rng.normal(size=draws)
    assert abs(r.mean() - s.alpha[n] * r0) / abs(s.alpha[n] * r0) < 0.02
    assert abs(r.std() - s.sigma[n]) / s.sigma[n] < 0.02


def test_ddim_examples():
    assert ddim_subsequence(1400, 20) == [70 * i for i in range(1, 21)]
    assert ddim_subsequence(7, 7) == [1, 2, 3, 4, 5, 6, 7]
    assert ddim_subsequence(10, 5) == [2, 4, 6, 8, 10]


@settings(max_examples=200, deadline=None)
@given(st.data())
def test_ddim_properties(data):
    n_total = data.draw(st.integers(1, 3000))
    n_sampler = data.draw(st.integers(1, n_total))
    taus = ddim_subsequence(n_total, n_sampler)
    assert len(taus) == n_sampler
    assert taus[-1] == n_total
    assert all(b > a for a, b in zip(taus, taus[1:]))
    assert taus[0] >= 1


def test_ddim_rejects_bad_args():
    with pytest.raises(ValueError):
        ddim_subsequence(10, 11)
    with pytest.raises(ValueError):
        ddim_subsequence(10, 0)
    with pytest.raises(ValueError):
        ddim_subsequence(0, 0)


def test_kinds_exported():
    assert set(SCHEDULE_KINDS) == {"linear", "cosine"}
