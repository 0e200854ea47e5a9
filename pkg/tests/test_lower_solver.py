import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from robustbf import evaluator
from robustbf import lower_solver as ls
from robustbf import model
from robustbf.errors import NumericalError


@pytest.fixture
def instance():
    net = model.NetworkConfig(2, 2, 2, P=[3.0, 5.0], sigma2=[1.0, 0.7, 1.3, 0.9])
    ch = model.generate_rayleigh_channels(net, 21, 0.1)
    V = model.random_beamformers(net, np.random.default_rng(2))
    return net, ch, V


def scalar(eps=0.3, h=1.0):
    net = model.NetworkConfig(1, 1, 1, P=1.0, log_base=math.e)
    ch = model.ChannelSet(np.full((1, 1, 1, 1), h, dtype=complex), eps)
    return net, ch


def scalar_f(d, v):
    """ln(1 + |1 + d|^2 |v|^2) for complex scalars."""
    return math.log(1.0 + abs(1.0 + d) ** 2 * abs(v) ** 2)


# ------------------------------------------------------------ Taylor expansion


def test_taylor_exact_at_expansion_point(instance):
    net, ch, V = instance
    D = model.sample_error(ch, 1)
    assert ls.taylor_f(net, ch, V, D, V) == model.wsr(net, ch, V, D)


def test_taylor_is_affine_in_v(instance):
    net, ch, V = instance
    D = model.sample_error(ch, 2)
    d = np.random.default_rng(3).normal(size=V.size)
    f0 = ls.taylor_f(net, ch, V, D, V)
    f1 = ls.taylor_f(net, ch, V + d, D, V)
    f2 = ls.taylor_f(net, ch, V + 2 * d, D, V)
    assert f2 - f0 == pytest.approx(2 * (f1 - f0), rel=1e-12)


def test_taylor_error_is_second_order(instance):
    net, ch, V = instance
    D = model.sample_error(ch, 3)
    d = np.random.default_rng(4).normal(size=V.size)
    errs = []
    for s in (1e-2, 5e-3, 2.5e-3):
        errs.append(abs(ls.taylor_f(net, ch, V, D, V + s * d) - model.wsr(net, ch, V, D)))
    # halving the step quarters the error
    assert errs[0] / errs[1] == pytest.approx(4.0, rel=0.1)
    assert errs[1] / errs[2] == pytest.approx(4.0, rel=0.1)


# ------------------------------------------------------------ ALM value and step


def test_alm_value_feasible_zero_multipliers(instance):
    net, ch, V = instance
    state = ls.initial_state(net, ch)
    np.testing.assert_allclose(state.s ** 2, 0.1)
    cfg = ls.AlmConfig()
    assert ls.alm_value(net, ch, V, state, cfg) == pytest.approx(model.wsr(net, ch, V), rel=1e-13)


def test_alm_penalty_term(instance):
    net, ch, V = instance
    state = ls.initial_state(net, ch)
    state = replace(state, s=state.s + 0.1)
    c = ls.residuals(net, ch, state)
    cfg = ls.AlmConfig(rho=3.0)
    expected = model.wsr(net, ch, V) + 1.5 * np.sum(c ** 2)
    assert ls.alm_value(net, ch, V, state, cfg) == pytest.approx(expected, rel=1e-13)


def test_alm_scalar_hand_evaluation():
    net, ch = scalar()
    v = 0.8 - 0.3j
    V = np.array([v.real, v.imag])
    d = 0.1 + 0.2j
    state = ls.AlmState(np.array([d.real, d.imag]), np.array([0.4]), np.array([0.7]))
    cfg = ls.AlmConfig(rho=2.0)
    c = abs(d) + 0.16 - 0.3
    expected = scalar_f(d, v) + 0.7 * c + 1.0 * c ** 2
    assert ls.alm_value(net, ch, V, state, cfg) == pytest.approx(expected, rel=1e-13)


def test_alm_step_scalar_hand_computed():
    net, ch = scalar()
    v = 0.8 - 0.3j
    V = np.array([v.real, v.imag])
    d = 0.1 + 0.2j
    s, mu, rho = 0.4, 0.7, 2.0
    state = ls.AlmState(np.array([d.real, d.imag]), np.array([s]), np.array([mu]))
    cfg = ls.AlmConfig(rho=rho, eta_delta=0.05, eta_s=0.03, eta_mu=0.02)
    c = abs(d) + s ** 2 - 0.3
    w = mu + rho * c
    denom = 1.0 + abs(1.0 + d) ** 2 * abs(v) ** 2
    grad_d = 2.0 * (1.0 + d) * abs(v) ** 2 / denom + w * d / abs(d)
    new = ls.alm_step(net, ch, V, state, cfg)
    np.testing.assert_allclose(new.delta_prime, [d.real - 0.05 * grad_d.real, d.imag - 0.05 * grad_d.imag], rtol=1e-12)
    assert new.s[0] == pytest.approx(s - 0.03 * 2 * s * w, rel=1e-12)
    assert new.mu[0] == pytest.approx(mu + 0.02 * c, rel=1e-12)


def test_alm_gradients_match_finite_differences(instance):
    net, ch, V = instance
    rng = np.random.default_rng(5)
    state = ls.AlmState(0.05 * rng.normal(size=net.n_delta), rng.uniform(0.1, 0.3, net.n_blocks), rng.normal(size=net.n_blocks))
    cfg = ls.AlmConfig().at(V + 0.01)
    g_delta, g_s, g_mu = ls.alm_gradients(net, ch, V, state, cfg)
    fd_delta = evaluator.finite_diff_grad(lambda x: ls.alm_value(net, ch, V, replace(state, delta_prime=x), cfg), state.delta_prime, 1e-6)
    fd_s = evaluator.finite_diff_grad(lambda x: ls.alm_value(net, ch, V, replace(state, s=x), cfg), state.s, 1e-6)
    fd_mu = evaluator.finite_diff_grad(lambda x: ls.alm_value(net, ch, V, replace(state, mu=x), cfg), state.mu, 1e-6)
    np.testing.assert_allclose(g_delta, fd_delta, rtol=1e-5, atol=1e-8)
    np.testing.assert_allclose(g_s, fd_s, rtol=1e-5, atol=1e-8)
    np.testing.assert_allclose(g_mu, fd_mu, rtol=1e-5, atol=1e-8)
    np.testing.assert_allclose(g_mu, ls.residuals(net, ch, state), rtol=1e-14)


def test_zero_steps_leave_state(instance):
    net, ch, V = instance
    state = ls.initial_state(net, ch, model.sample_error(ch, 4))
    cfg = ls.AlmConfig(eta_delta=0.0, eta_s=0.0, eta_mu=0.0)
    new = ls.alm_step(net, ch, V, state, cfg)
    np.testing.assert_array_equal(new.delta_prime, state.delta_prime)
    np.testing.assert_array_equal(new.s, state.s)
    np.testing.assert_array_equal(new.mu, state.mu)


def test_non_finite_step_raises(instance):
    net, ch, V = instance
    state = ls.initial_state(net, ch)
    state = replace(state, mu=np.full_like(state.mu, np.inf))
    with pytest.raises(NumericalError) as err:
        ls.alm_step(net, ch, V, state, ls.AlmConfig(), iteration=12)
    assert err.value.iteration == 12


def test_schedule_hook_scales_steps(instance):
    net, ch, V = instance
    state = ls.initial_state(net, ch)
    plain = ls.alm_step(net, ch, V, state, ls.AlmConfig(eta_delta=0.02))
    halved = ls.alm_step(net, ch, V, state, ls.AlmConfig(eta_delta=0.04, schedule=lambda k: 0.5))
    np.testing.assert_allclose(halved.delta_prime, plain.delta_prime, rtol=1e-14)


# ------------------------------------------------------------ phi


def test_phi_zero_without_uncertainty(instance):
    net, ch, V = instance
    out = ls.phi(net, ch.with_radii(0.0), V)
    assert out.shape == (net.n_delta,) and np.all(out == 0)


def test_phi_scalar_matches_grid_search():
    net, ch = scalar(eps=0.3)
    V = np.array([1.0, 0.0])
    cfg = ls.AlmConfig(k_inner=3000)
    d = ls.phi(net, ch, V, cfg)
    f_phi = model.wsr(net, ch, V, d)
    xs = np.linspace(-0.3, 0.3, 121)
    X, Y = np.meshgrid(xs, xs)
    inside = X ** 2 + Y ** 2 <= 0.09
    assert inside.sum() >= 10 ** 4
    grid = np.log1p(np.abs(1.0 + X[inside] + 1j * Y[inside]) ** 2)
    assert abs(f_phi - grid.min()) <= 1e-3
    assert f_phi == pytest.approx(math.log(1.49), abs=1e-3)


def test_phi_deterministic(instance):
    net, ch, V = instance
    np.testing.assert_array_equal(ls.phi(net, ch, V), ls.phi(net, ch, V))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10 ** 6), st.floats(0.5, 5.0))
def test_phi_inside_balls(seed, scale):
    net = model.NetworkConfig(2, 2, 1, P=4.0)
    ch = model.generate_rayleigh_channels(net, seed % 97, 0.2)
    rng = np.random.default_rng(seed)
    V = model.random_beamformers(net, rng)
    warm = scale * 0.2 * rng.normal(size=net.n_delta)
    out = ls.phi(net, ch, V, ls.AlmConfig(k_inner=20), ls.initial_state(net, ch, warm))
    assert np.all(ls.block_norms(net, out) <= ch.radii.reshape(-1) + 1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_residual_trend_from_infeasible_start(seed):
    net = model.NetworkConfig(2, 2, 2, P=5.0)
    ch = model.generate_rayleigh_channels(net, seed, 0.1)
    rng = np.random.default_rng(seed)
    V = model.random_beamformers(net, rng)
    warm = 0.2 * rng.normal(size=net.n_delta)
    init = ls.initial_state(net, ch, warm)
    assert np.sum(np.abs(ls.residuals(net, ch, init))) > 0
    _, trace = ls.run_alm(net, ch, V, ls.AlmConfig().at(V), init, trace=True)
    assert trace[-1] <= trace[0]


@pytest.mark.parametrize("seed", range(8))
def test_adversarial(seed):
    net = model.NetworkConfig(2, 2, 2, P=10.0)
    ch = model.generate_rayleigh_channels(net, seed, 0.1)
    V = model.random_beamformers(net, np.random.default_rng(seed))
    d = ls.phi(net, ch, V, ls.AlmConfig(k_inner=200))
    assert model.wsr(net, ch, V, d) <= model.wsr(net, ch, V) + 1e-9


def test_phi_batches_over_beamformers(instance):
    net, ch, V = instance
    Vs = np.stack([V, 0.5 * V, 2 * V])
    init = ls.initial_state(net, ch)
    batch_init = ls.AlmState(*(np.broadcast_to(x, (3,) + x.shape) for x in (init.delta_prime, init.s, init.mu)))
    cfg = ls.AlmConfig().at(V)
    out = ls.phi(net, ch, Vs, cfg, batch_init)
    for i in range(3):
        np.testing.assert_allclose(out[i], ls.phi(net, ch, Vs[i], cfg, init), rtol=1e-12, atol=1e-15)


# ------------------------------------------------------------ g and its gradient


def test_g_value_examples():
    rng = np.random.default_rng(6)
    phi_v = rng.normal(size=8)
    assert ls.g_value(phi_v, phi_v) == 0.0
    assert ls.g_value(phi_v + np.eye(8)[3], phi_v) == pytest.approx(1.0)
    D = rng.normal(size=8)
    assert ls.g_value(D, phi_v) == pytest.approx(sum((D[i] - phi_v[i]) ** 2 for i in range(8)))


def test_grad_g_delta_zero_at_phi(instance):
    net, ch, V = instance
    phi_v = ls.phi(net, ch, V, ls.AlmConfig().at(V))
    _, d_delta = ls.grad_g(net, ch, V, phi_v, phi_of_v=phi_v)
    assert np.all(d_delta == 0)


def test_grad_g_delta_matches_finite_differences(instance):
    net, ch, V = instance
    phi_v = ls.phi(net, ch, V, ls.AlmConfig().at(V))
    D = phi_v + 0.05 * np.random.default_rng(7).normal(size=net.n_delta)
    _, d_delta = ls.grad_g(net, ch, V, D, phi_of_v=phi_v)
    fd = evaluator.finite_diff_grad(lambda x: float(ls.g_value(x, phi_v)), D, 1e-5)
    np.testing.assert_allclose(d_delta, fd, rtol=1e-6, atol=1e-10)


def test_grad_g_v_two_step_consistency(instance):
    net, ch, V = instance
    cfg = ls.AlmConfig(k_inner=50).at(V)
    init = ls.initial_state(net, ch)
    D = ls.phi(net, ch, V, cfg, init) + 0.05 * np.random.default_rng(8).normal(size=net.n_delta)
    h = ls.default_fd_step(V)
    d_v, _ = ls.grad_g(net, ch, V, D, cfg, init, h=h)
    fd = evaluator.finite_diff_grad(lambda x: float(ls.g_value(D, ls.phi(net, ch, x, cfg, init))), V, h / 2)
    scale = np.max(np.abs(fd))
    assert np.max(np.abs(d_v - fd)) <= 1e-3 * scale
