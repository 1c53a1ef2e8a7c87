import numpy as np
import pytest

from diffpol import (ParameterError, ShapeError, approximate_action,
                     build_schedule, ddpm_reverse_step, default_schedule,
                     forward_diffuse)
from diffpol.schedule import posterior_mean


def test_single_step_linear():
    sch = build_schedule("linear", 1, 0.1, 0.1)
    assert np.allclose(sch.beta, [0.1])
    assert np.allclose(sch.alpha, [0.9])
    assert np.allclose(sch.alpha_bar, [0.9])


def test_two_step_product():
    sch = build_schedule("linear", 2, 0.1, 0.3)
    assert np.isclose(sch.alpha_bar[1], 0.9 * 0.7)


def test_classic_linear_terminal_bound():
    sch = build_schedule("linear", 1000, 1e-4, 2e-2)
    # independent check: product computed in log space
    log_ab = np.sum(np.log1p(-sch.beta))
    assert np.isclose(log_ab, np.log(sch.alpha_bar[-1]))
    assert sch.alpha_bar[-1] < 1e-3


@pytest.mark.parametrize("K", [1, 10, 100, 1000])
def test_vp_terminal_bound_any_K(K):
    sch = build_schedule("vp", K, 0.1, 20.0)
    assert sch.alpha_bar[-1] < 1e-3
    # the vp discretization keeps the same terminal marginal for every K
    assert np.isclose(np.log(sch.alpha_bar[-1]), -(0.1 + 0.5 * 19.9), rtol=1e-10)


@pytest.mark.parametrize("variant,lo,hi", [("linear", 1e-4, 2e-2), ("vp", 0.1, 20.0)])
def test_schedule_invariants(variant, lo, hi):
    sch = build_schedule(variant, 200, lo, hi)
    assert np.all(sch.beta > 0) and np.all(sch.beta < 1)
    assert np.all(np.diff(sch.beta) >= 0)
    assert np.allclose(sch.alpha, 1.0 - sch.beta)
    recon = np.concatenate([[sch.alpha_bar[0]], sch.alpha_bar[:-1] * sch.alpha[1:]])
    assert np.array_equal(recon, sch.alpha_bar)  # exact recurrence
    assert np.all(np.diff(sch.alpha_bar) < 0)


def test_build_schedule_validation():
    with pytest.raises(ParameterError):
        build_schedule("linear", 0, 0.1, 0.2)
    with pytest.raises(ParameterError):
        build_schedule("linear", 10, 0.0, 0.2)
    with pytest.raises(ParameterError):
        build_schedule("linear", 10, 0.3, 0.2)
    with pytest.raises(ParameterError):
        build_schedule("linear", 10, 0.1, 1.0)
    with pytest.raises(ParameterError):
        build_schedule("cosine", 10, 0.1, 0.2)
    # vp accepts continuous-time endpoints > 1
    sch = build_schedule("vp", 10, 0.1, 20.0)
    assert np.all(sch.beta < 1)


def test_forward_diffuse_values():
    sch = build_schedule("linear", 2, 0.1, 0.3)  # alpha_bar = [0.9, 0.63]
    out = forward_diffuse(sch, [1.0, 0.0], 2, [0.0, 0.0])
    assert np.allclose(out, [np.sqrt(0.63), 0.0])
    # alpha_bar = 0.25 via a handmade schedule: beta = [0.5, 0.5]
    sch2 = build_schedule("linear", 2, 0.5, 0.5)
    out2 = forward_diffuse(sch2, [2.0], 2, [2.0])
    assert np.allclose(out2, [0.5 * 2.0 + np.sqrt(0.75) * 2.0])


def test_forward_diffuse_terminal_is_pure_noise():
    sch = default_schedule(1000)
    out = forward_diffuse(sch, [0.73, -0.21], 1000, [1.0, -1.0])
    assert np.allclose(out, [1.0, -1.0], atol=0.01)


def test_forward_diffuse_shape_error():
    sch = build_schedule("linear", 2, 0.1, 0.3)
    with pytest.raises(ShapeError):
        forward_diffuse(sch, [1.0, 0.0], 1, [0.0])


def test_approximate_action_near_identity_at_k1():
    sch = build_schedule("linear", 2, 1e-4, 1e-4)
    out = approximate_action(sch, [1.0], 1, [0.0])
    assert np.allclose(out, [1.0 / np.sqrt(1 - 1e-4)])
    assert np.isclose(out[0], 1.00005, atol=1e-5)


def test_approximate_action_k_range():
    sch = build_schedule("linear", 4, 0.1, 0.2)
    with pytest.raises(ParameterError):
        approximate_action(sch, [1.0], 5, [0.0])
    with pytest.raises(ParameterError):
        approximate_action(sch, [1.0], 0, [0.0])


def test_round_trip_identity_property():
    # acceptance-grade property: 1000 random cases, relative error < 1e-6
    sch = default_schedule(1000)
    rng = np.random.default_rng(123)
    for _ in range(1000):
        d = int(rng.integers(1, 6))
        a0 = rng.uniform(-1.0, 1.0, d)
        eps = rng.standard_normal(d)
        k = int(rng.integers(1, sch.K + 1))
        a_k = forward_diffuse(sch, a0, k, eps)
        rec = approximate_action(sch, a_k, k, eps)
        assert np.allclose(rec, a0, rtol=1e-6, atol=1e-9)


def test_ddpm_reverse_step_zero_prediction_rescale():
    sch = build_schedule("linear", 1, 0.1, 0.1)  # alpha = 0.9
    out = ddpm_reverse_step(sch, [0.0], [0.9], 1, [0.0])
    assert np.allclose(out, [0.9 / np.sqrt(0.9)])
    assert np.isclose(out[0], 0.9487, atol=1e-4)


def test_ddpm_reverse_step_matches_posterior_mean():
    # with the true corruption noise as the prediction and z = 0, the update
    # reproduces the closed-form mean of q(a^{k-1} | a^k, a0)
    sch = default_schedule(50)
    rng = np.random.default_rng(7)
    for k in (2, 10, 30, 50):
        a0 = rng.uniform(-1, 1, 3)
        eps = rng.standard_normal(3)
        a_k = forward_diffuse(sch, a0, k, eps)
        stepped = ddpm_reverse_step(sch, eps, a_k, k, np.zeros(3))
        assert np.allclose(stepped, posterior_mean(sch, a0, a_k, k), rtol=1e-10)


def test_ddpm_reverse_step_noise_variance():
    # sample variance of the injected term is beta^k within 5% per coordinate
    sch = build_schedule("linear", 10, 0.05, 0.3)
    k = 7
    rng = np.random.default_rng(11)
    a_k = np.array([0.4, -0.2])
    eps_hat = np.array([0.1, 0.3])
    z = rng.standard_normal((100_000, 2))
    outs = ddpm_reverse_step(sch, eps_hat, np.tile(a_k, (100_000, 1)), k, z)
    var = outs.var(axis=0)
    assert np.all(np.abs(var - sch.beta[k - 1]) < 0.05 * sch.beta[k - 1])


def test_forward_marginal_moments():
    # empirical mean/std of the corruption marginal match the closed form
    # within 3 Monte-Carlo standard errors
    sch = default_schedule(100)
    a0 = np.array([0.5, -0.3])
    k = 40
    n = 100_000
    rng = np.random.default_rng(3)
    eps = rng.standard_normal((n, 2))
    samples = forward_diffuse(sch, np.tile(a0, (n, 1)), k, eps)
    ab = sch.alpha_bar[k - 1]
    mean_se = np.sqrt((1 - ab) / n)
    assert np.all(np.abs(samples.mean(axis=0) - np.sqrt(ab) * a0) < 3 * mean_se)
    var_se = (1 - ab) * np.sqrt(2.0 / n)
    assert np.all(np.abs(samples.var(axis=0) - (1 - ab)) < 3 * var_se)


def test_schedule_is_immutable():
    sch = default_schedule(10)
    with pytest.raises(ValueError):
        sch.beta[0] = 0.5


def test_continuous_marginal_matches_table():
    for variant in ("vp", "linear"):
        sch = default_schedule(64, variant)
        ks = np.arange(1, 65)
        sq_ab, sq_1mab = sch.marginal_coeffs(ks / 64.0)
        assert np.allclose(sq_ab, sch.sqrt_alpha_bar, rtol=1e-6)
        assert np.allclose(sq_1mab, sch.sqrt_one_minus_alpha_bar, rtol=1e-6)


def test_lambda_inverse_round_trip():
    sch = default_schedule(100)
    ts = np.linspace(1.0 / 100, 1.0, 37)
    lam = sch.lam(ts)
    back = sch.t_of_lam(lam)
    assert np.allclose(back, ts, atol=1e-6)
