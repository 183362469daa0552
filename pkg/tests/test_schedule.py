import numpy as np
import pytest

from flashlab.gradcore import Tensor
from flashlab.schedule import (
    cosine_schedule,
    eps_to_x0,
    forward_diffuse,
    pf_ode_coeffs,
    score_from_eps,
    x0_to_eps,
)

SCHED = cosine_schedule()


def test_endpoints():
    assert SCHED.alpha(0.0) == 1.0
    assert SCHED.sigma(0.0) == 0.0
    assert abs(SCHED.alpha(1.0)) < 1e-15
    assert SCHED.sigma(1.0) == 1.0


def test_variance_preserving():
    t = np.linspace(0, 1, 101)
    assert np.allclose(SCHED.alpha(t) ** 2 + SCHED.sigma(t) ** 2, 1.0)


def test_log_snr_strictly_decreasing_on_grid():
    t = np.linspace(1e-4, 1 - 1e-4, 1024)
    snr = SCHED.log_snr(t)
    assert np.all(np.diff(snr) < 0)


def test_forward_diffuse_endpoints_and_midpoint():
    rng = np.random.default_rng(0)
    z0 = rng.normal(size=(4, 2))
    eps = rng.normal(size=(4, 2))
    assert np.array_equal(forward_diffuse(z0, 0.0, eps, SCHED).data, z0)
    out1 = forward_diffuse(z0, 1.0, eps, SCHED).data
    assert np.allclose(out1, eps, atol=1e-15)
    mid = forward_diffuse(z0, 0.5, eps, SCHED).data
    assert np.allclose(mid, (z0 + eps) / np.sqrt(2.0))


def test_forward_diffuse_validates():
    with pytest.raises(ValueError):
        forward_diffuse(np.zeros((2, 2)), 1.5, np.zeros((2, 2)), SCHED)
    with pytest.raises(ValueError):
        forward_diffuse(np.zeros((2, 2)), 0.5, np.zeros((3, 2)), SCHED)


def test_eps_x0_inversion_recovers_z0():
    rng = np.random.default_rng(1)
    z0 = rng.normal(size=(8, 2))
    eps = rng.normal(size=(8, 2))
    for t in (0.1, 0.5, 0.9):
        zt = forward_diffuse(z0, t, eps, SCHED)
        x0 = eps_to_x0(zt, eps, t, SCHED)
        assert np.abs(x0.data - z0).max() < 1e-12


def test_eps_x0_at_alpha_equals_sigma():
    # zt == eps_hat at t=0.5 (alpha == sigma) collapses to zt * (1 - sigma) / alpha
    z = np.ones((1, 3))
    x0 = eps_to_x0(z, z, 0.5, SCHED)
    a = SCHED.alpha(0.5)
    assert np.allclose(x0.data, (1.0 - a) / a)


def test_round_trip_eps():
    rng = np.random.default_rng(2)
    zt = rng.normal(size=(6, 2))
    eps_hat = rng.normal(size=(6, 2))
    back = x0_to_eps(Tensor(zt), eps_to_x0(zt, eps_hat, 0.3, SCHED), 0.3, SCHED)
    assert np.abs(back.data - eps_hat).max() < 1e-10


def test_round_trip_across_t_grid():
    rng = np.random.default_rng(3)
    zt = rng.normal(size=(4, 2))
    eps_hat = rng.normal(size=(4, 2))
    for t in np.linspace(0.01, 0.99, 25):
        back = x0_to_eps(Tensor(zt), eps_to_x0(zt, eps_hat, float(t), SCHED), float(t), SCHED)
        assert np.abs(back.data - eps_hat).max() < 1e-10


def test_conversion_singularity_guard_and_clamp():
    z = np.zeros((1, 2))
    with pytest.raises(ValueError):
        eps_to_x0(z, z, 1.0, SCHED)
    out = eps_to_x0(np.ones((1, 2)), np.ones((1, 2)), 1.0, SCHED, clamp=True)
    assert np.all(np.isfinite(out.data))


def test_per_sample_t_vector():
    rng = np.random.default_rng(4)
    z0 = rng.normal(size=(3, 2))
    eps = rng.normal(size=(3, 2))
    t = np.array([0.1, 0.5, 0.9])
    out = forward_diffuse(z0, t, eps, SCHED).data
    for i in range(3):
        row = forward_diffuse(z0[i : i + 1], float(t[i]), eps[i : i + 1], SCHED).data
        assert np.allclose(out[i], row[0])


def test_score_from_eps():
    assert np.array_equal(score_from_eps(np.zeros((2, 2)), 0.7, SCHED).data, np.zeros((2, 2)))
    t = 0.37
    s = score_from_eps(np.full((1, 1), SCHED.sigma(t)), t, SCHED)
    assert abs(s.data[0, 0] + 1.0) < 1e-12
    with pytest.raises(ValueError):
        score_from_eps(np.zeros((1, 1)), 0.0, SCHED)


def test_pf_ode_coeffs_closed_form_vs_finite_diff():
    h = 1e-6
    for t in (0.1, 0.3, 0.5, 0.77):
        f, g2 = pf_ode_coeffs(t, SCHED)
        dlog_fd = (np.log(SCHED.alpha(t + h)) - np.log(SCHED.alpha(t - h))) / (2 * h)
        ds2_fd = (SCHED.sigma(t + h) ** 2 - SCHED.sigma(t - h) ** 2) / (2 * h)
        assert abs(f - dlog_fd) < 1e-6
        assert abs(g2 - (ds2_fd - 2 * dlog_fd * SCHED.sigma(t) ** 2)) < 1e-6
    f, _ = pf_ode_coeffs(0.5, SCHED)
    assert abs(f + np.pi / 2) < 1e-12


def test_pf_ode_g2_nonnegative_on_grid():
    for t in np.linspace(1e-3, 1 - 1e-3, 1000):
        _, g2 = pf_ode_coeffs(float(t), SCHED)
        assert g2 >= 0.0


def test_pf_ode_rejects_endpoints():
    for t in (0.0, 1.0, -0.1, 1.1):
        with pytest.raises(ValueError):
            pf_ode_coeffs(t, SCHED)


def test_monte_carlo_marginal_statistics():
    rng = np.random.default_rng(11)
    n = 50_000
    z0 = np.array([0.8, -1.5])
    for t in (0.25, 0.5, 0.9):
        eps = rng.normal(size=(n, 2))
        zt = forward_diffuse(np.tile(z0, (n, 1)), t, eps, SCHED).data
        band = 4.0 / np.sqrt(n) * SCHED.sigma(t)
        assert np.all(np.abs(zt.mean(axis=0) - SCHED.alpha(t) * z0) < band)
        var = zt.var(axis=0)
        assert np.all(np.abs(var - SCHED.sigma(t) ** 2) < 0.05 * SCHED.sigma(t) ** 2)
