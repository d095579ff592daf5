import numpy as np
import pytest

from patchdiff.diffusion import (
    DdimParams,
    ddim_step,
    denoised_estimate,
    forward_noise,
    make_schedule,
    sampling_timesteps,
    sigma_t,
)


def test_linear_schedule_endpoints_and_monotonicity():
    s = make_schedule(1000, 1e-4, 0.02)
    assert s.beta[0] == pytest.approx(1e-4)
    assert s.beta[-1] == pytest.approx(0.02)
    assert np.all(np.diff(s.beta) > 0)
    assert np.all(np.diff(s.alpha_bar) < 0)
    assert 0.0 < s.alpha_bar[-1] < s.alpha_bar[0] < 1.0
    # alpha_bar is the running product of (1 - beta), checked independently.
    expected = 1.0
    for i in range(5):
        expected *= 1.0 - s.beta[i]
        assert s.alpha_bar[i] == pytest.approx(expected, rel=1e-12)
    assert s.alpha_bar_at(0) == 1.0
    assert s.alpha_bar_at(1) == pytest.approx(1.0 - 1e-4)


def test_schedule_validation():
    with pytest.raises(ValueError):
        make_schedule(0)
    with pytest.raises(ValueError):
        make_schedule(10, 0.0, 0.02)
    with pytest.raises(ValueError):
        make_schedule(10, 0.03, 0.02)
    s = make_schedule(10)
    with pytest.raises(ValueError):
        s.alpha_bar_at(11)


def test_forward_noise_formula_and_moments():
    s = make_schedule()
    rng = np.random.default_rng(0)
    x0 = np.full((20, 20, 20), 0.7, dtype=np.float32)
    t = 400
    ab = s.alpha_bar_at(t)
    eps = rng.standard_normal(x0.shape).astype(np.float32)
    x_t = forward_noise(x0, t, eps, s)
    np.testing.assert_allclose(x_t, np.sqrt(ab) * 0.7 + np.sqrt(1 - ab) * eps, rtol=1e-6, atol=1e-6)
    assert x_t.dtype == np.float32
    # Moments over many draws at a fixed voxel match the marginal.
    draws = np.array([forward_noise(x0[:1, :1, :1], t, rng.standard_normal((1, 1, 1)).astype(np.float32), s)[0, 0, 0] for _ in range(4000)])
    assert draws.mean() == pytest.approx(np.sqrt(ab) * 0.7, abs=4 * np.sqrt(1 - ab) / np.sqrt(4000))
    assert draws.var() == pytest.approx(1 - ab, rel=0.15)


def test_denoised_estimate_inverts_forward_noise():
    s = make_schedule()
    rng = np.random.default_rng(3)
    x0 = rng.standard_normal((6, 6, 6)).astype(np.float32)
    eps = rng.standard_normal((6, 6, 6)).astype(np.float32)
    for t in (1, 250, 1000):
        x_t = forward_noise(x0, t, eps, s)
        np.testing.assert_allclose(denoised_estimate(x_t, eps, t, s), x0, atol=2e-5)


def test_sigma_rules_match_closed_forms():
    s = make_schedule()
    t, tp = 500, 480
    ab, abp = s.alpha_bar_at(t), s.alpha_bar_at(tp)
    eta = 0.7
    std = sigma_t(DdimParams(eta=eta, sigma_rule="standard"), s, t, tp)
    assert std == pytest.approx(eta * np.sqrt((1 - abp) / (1 - ab)) * np.sqrt(1 - ab / abp), rel=1e-12)
    dds = sigma_t(DdimParams(eta=eta, sigma_rule="dds"), s, t, tp)
    assert dds == pytest.approx(eta * np.sqrt(1 - abp), rel=1e-12)
    # eta = 0 turns both rules deterministic; the terminal step is noiseless too.
    assert sigma_t(DdimParams(eta=0.0, sigma_rule="standard"), s, t, tp) == 0.0
    assert sigma_t(DdimParams(eta=0.9, sigma_rule="dds"), s, 1, 0) == 0.0
    with pytest.raises(ValueError):
        sigma_t(DdimParams(), s, 10, 10)


def test_dds_step_equals_variance_preserving_mix():
    # With the dds sigma the update collapses to
    # sqrt(abar') x0 + sqrt(1 - abar') (sqrt(1 - eta^2) eps_hat + eta eps).
    s = make_schedule()
    rng = np.random.default_rng(4)
    shape = (5, 5, 5)
    x0 = rng.standard_normal(shape)
    eps_hat = rng.standard_normal(shape)
    eps = rng.standard_normal(shape)
    eta = 0.8
    t, tp = 700, 650
    abp = s.alpha_bar_at(tp)
    got = ddim_step(x0, eps_hat, eps, t, tp, DdimParams(eta=eta, sigma_rule="dds"), s)
    want = np.sqrt(abp) * x0 + np.sqrt(1 - abp) * (np.sqrt(1 - eta**2) * eps_hat + eta * eps)
    np.testing.assert_allclose(got, want, rtol=1e-12)


def test_eta_mix_has_unit_variance():
    # The dds update feeds sqrt(1 - eta^2) eps_hat + eta eps back into the
    # noise slot; for independent unit-normal inputs that mix must itself
    # have unit variance or the marginals drift over the trajectory.
    rng = np.random.default_rng(11)
    n = 100_000
    eta = 0.6
    mix = np.sqrt(1 - eta**2) * rng.standard_normal(n) + eta * rng.standard_normal(n)
    assert abs(mix.var() - 1.0) < 3.0 * np.sqrt(2.0 / n)


def test_ddim_step_terminal_returns_denoised():
    s = make_schedule()
    rng = np.random.default_rng(5)
    x0 = rng.standard_normal((4, 4, 4)).astype(np.float32)
    eps_hat = rng.standard_normal((4, 4, 4)).astype(np.float32)
    out = ddim_step(x0, eps_hat, rng.standard_normal((4, 4, 4)).astype(np.float32), 1, 0, DdimParams(eta=0.4), s)
    np.testing.assert_allclose(out, x0, atol=1e-6)


def test_ddim_params_validation():
    with pytest.raises(ValueError):
        DdimParams(eta=1.5)
    with pytest.raises(ValueError):
        DdimParams(steps=0)
    with pytest.raises(ValueError):
        DdimParams(sigma_rule="other")


def test_sampling_timesteps_structure():
    pairs = sampling_timesteps(1000, 200)
    assert len(pairs) == 200
    ts = [t for t, _ in pairs]
    assert ts[0] == 996 and ts[-1] == 1
    assert pairs[-1] == (1, 0)
    strides = -np.diff(ts)
    assert np.all(strides == 5)
    for (t, tp), t_next in zip(pairs, ts[1:] + [0]):
        assert tp == t_next
    # Degenerate and clamped cases.
    assert sampling_timesteps(1000, 1) == [(1, 0)]
    assert sampling_timesteps(10, 10) == [(t, t - 1) for t in range(10, 0, -1)]
    assert sampling_timesteps(10, 99) == [(t, t - 1) for t in range(10, 0, -1)]
    with pytest.raises(ValueError):
        sampling_timesteps(1000, 0)
