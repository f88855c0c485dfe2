import math

import numpy as np
import pytest

from meanfield_lab.bridge import (
    DriftField,
    ValueFunctionField,
    bridge_energy,
    bridge_marginal_density,
    cole_hopf_h,
    euler_bias_w2,
    export_drift_csv,
    follmer_drift,
    gibbs_measure_Q,
    greedy_drift,
    q_second_moment_check,
    rescaled_drift,
    simulate_bridge,
    value_function,
    zero_drift,
)
from meanfield_lab.dynamics import CouplingContext, euler_maruyama
from meanfield_lab.free_energy import RegularizationParams, solve_boltzmann_fixed_point
from meanfield_lab.measures import (
    ContractError,
    GridCDF,
    ParticleEnsemble,
    gaussian_on_grid,
    kl_divergence,
    wasserstein2,
)
from meanfield_lab.oracle import finite_difference_gradient, ks_statistic, ks_threshold, mc_value_function, pde_residual


@pytest.fixture(scope="module")
def flat(prob):
    """Solution at a vanishing inverse temperature."""
    p = RegularizationParams(1e-12, 0.04)
    return ValueFunctionField(prob, solve_boltzmann_fixed_point(prob, p))


def probes(n, seed, scale):
    rng = np.random.default_rng(seed)
    return rng.uniform(-2 * scale, 2 * scale, n), rng.uniform(0.05, 0.95, n)


class TestGibbsMeasures:
    def test_flat_limit_is_gaussian(self, flat):
        q = gibbs_measure_Q(flat, 0.1, 0.3)
        ref = gaussian_on_grid(flat.grid, 0.1, 0.04 * 0.7)
        np.testing.assert_allclose(q.density, ref.density, rtol=0, atol=1e-6)

    def test_q00_is_mu_star(self, vf, sol):
        assert kl_divergence(gibbs_measure_Q(vf, 0.0, 0.0), sol.mu_star) <= 1e-6

    def test_resolution_guard(self, vf):
        with pytest.raises(ContractError, match="t -> 1 limit"):
            gibbs_measure_Q(vf, 0.0, 1.0 - 0.5 * vf.guard_s / vf.params.tau)

    def test_second_moment_shrinks(self, vf, flat):
        t = np.linspace(0, 1, 11)
        w = np.linspace(-0.3, 0.3, 5)
        rep = q_second_moment_check(vf, w, t)
        assert rep["nonincreasing"]
        np.testing.assert_array_equal(rep["terminal"], 0.0)
        rep0 = q_second_moment_check(flat, w, t)
        np.testing.assert_allclose(rep0["m"], np.tile(0.04 * (1 - t), (5, 1)), atol=1e-8)


class TestValueFunction:
    def test_terminal_value(self, vf):
        w = np.linspace(-0.5, 0.5, 7)
        np.testing.assert_allclose(value_function(vf, w, 1.0), vf.params.beta * vf.psi(w), rtol=0, atol=0)

    def test_flat_limit_vanishes(self, flat):
        assert np.max(np.abs(value_function(flat, np.linspace(-0.5, 0.5, 7), 0.3))) <= 1e-10

    def test_monte_carlo_oracle(self, vf):
        w, t = probes(3, 0, math.sqrt(vf.params.tau))
        for wi, ti in zip(w, t):
            mc, se = mc_value_function(vf.psi, vf.params.beta, vf.params.tau, wi, ti, 10**6, seed=int(1e3 * ti))
            assert abs(value_function(vf, wi, ti)[0] - mc) <= 3 * se

    def test_cole_hopf_terminal_ratio(self, vf):
        w = np.linspace(-0.5, 0.5, 9)
        ratio = cole_hopf_h(vf, w, 1.0) / np.exp(-vf.params.ratio * vf.psi(w))
        np.testing.assert_allclose(ratio, ratio[0], rtol=1e-8)

    def test_invalid_time(self, vf):
        with pytest.raises(ContractError):
            value_function(vf, 0.0, 1.5)


class TestDrift:
    def test_gradient_identity(self, vf):
        w, t = probes(100, 1, math.sqrt(vf.params.tau))
        for wi, ti in zip(w, t):
            fd = -finite_difference_gradient(lambda v: value_function(vf, v, ti)[0], [wi], step=1e-4,
                                             richardson=True)[0]
            np.testing.assert_allclose(vf.drift_exact(wi, ti)[0], fd, rtol=1e-4, atol=1e-9)

    def test_tabulated_matches_exact(self, vf):
        d = follmer_drift(vf)
        assert d._fn.interp_error <= 1e-6
        w = np.linspace(-0.6, 0.6, 41)
        for t in (0.0, 0.37, 0.8):
            np.testing.assert_allclose(d(w[:, None], t)[:, 0], vf.drift_exact(w, t), rtol=0, atol=1e-6)

    def test_guard_switch_continuity(self, vf):
        w = np.linspace(-0.5, 0.5, 11)
        ts = vf.switch_time
        before = vf.drift_exact(w, ts - 1e-9)
        after = -vf.params.beta * vf.grad_psi(w)
        assert np.max(np.abs(before - after)) <= 1e-4

    def test_flat_limit_is_zero(self, prob):
        p = RegularizationParams(1e-12, 0.04)
        vf0 = ValueFunctionField(prob, solve_boltzmann_fixed_point(prob, p))
        assert np.max(np.abs(vf0.drift_exact(np.linspace(-1, 1, 5), 0.5))) <= 1e-11

    def test_greedy_is_negative_potential_gradient(self, prob, params, sol, vf):
        g = greedy_drift(prob, params, sol.mu_star)
        w = np.linspace(-0.4, 0.4, 5)
        np.testing.assert_allclose(g(w[:, None], 0.0)[:, 0], -params.beta * vf.grad_psi(w), atol=1e-14)

    def test_rescaled_identity(self, vf):
        d = follmer_drift(vf)
        r = rescaled_drift(vf, d)
        rng = np.random.default_rng(2)
        tau = vf.params.tau
        for _ in range(100):
            w, t = rng.uniform(-0.5, 0.5, (1, 1)), float(rng.uniform(0, 1))
            np.testing.assert_allclose(r(w, tau * t), d(w, (tau * t) / tau) / tau, rtol=1e-15)
        assert r.horizon == tau

    def test_non_finite_drift_rejected(self):
        bad = DriftField(lambda W, t: np.full_like(W, np.nan), "zero")
        with pytest.raises(FloatingPointError):
            bad(np.zeros((2, 1)), 0.0)

    def test_export(self, tmp_path, vf):
        d = follmer_drift(vf)
        path = export_drift_csv(d, np.linspace(-0.2, 0.2, 3), [0.0, 0.5], tmp_path / "drift.csv")
        lines = path.read_text().splitlines()
        assert lines[0] == "w,t,u" and len(lines) == 7
        assert vf.provenance in (tmp_path / "drift.json").read_text()


class TestMarginals:
    def test_terminal_is_mu_star(self, vf, sol):
        m = bridge_marginal_density(vf, 1.0)
        np.testing.assert_allclose(m.density, sol.mu_star.density, rtol=0, atol=1e-6)

    def test_flat_limit_is_heat_kernel(self, flat):
        m = bridge_marginal_density(flat, 0.4)
        np.testing.assert_allclose(m.density, gaussian_on_grid(flat.grid, 0.0, 0.04 * 0.4).density, atol=1e-6)

    def test_time_zero_rejected(self, vf):
        with pytest.raises(ContractError):
            bridge_marginal_density(vf, 0.0)

    def test_terminal_output_matches_solution(self, vf, prob, sol):
        from meanfield_lab.problem import net_output

        np.testing.assert_allclose(vf.marginal_output(1.0), net_output(prob, sol.mu_star), atol=1e-9)


@pytest.fixture(scope="module")
def grid_args(vf):
    s = math.sqrt(vf.params.tau)
    return np.linspace(-2 * s, 2 * s, 9), [0.1, 0.3, 0.5, 0.7, 0.9], s / 5


class TestResiduals:
    def test_heat(self, vf, grid_args):
        rep = pde_residual(lambda w, t: cole_hopf_h(vf, w, t), "heat", vf.params.tau, *grid_args)
        assert 1.7 <= rep["order"] <= 2.3

    def test_hjb(self, vf, grid_args):
        rep = pde_residual(lambda w, t: value_function(vf, w, t), "hjb", vf.params.tau, *grid_args)
        assert 1.7 <= rep["order"] <= 2.3

    def test_fokker_planck(self, vf, grid_args):
        field_ = (lambda w, t: np.exp(vf.log_marginal(w, t)), lambda w, t: vf.drift_exact(w, t))
        rep = pde_residual(field_, "fpe", vf.params.tau, *grid_args)
        assert 1.7 <= rep["order"] <= 2.3

    def test_flat_hjb_is_zero(self, flat):
        rep = pde_residual(lambda w, t: value_function(flat, w, t), "hjb", 0.04, [0.0, 0.1], [0.5], 0.02)
        assert max(rep["sup"]) <= 1e-9


class TestSimulation:
    def test_zero_drift_energy_is_exactly_zero(self, params):
        rep = bridge_energy(zero_drift(), params, 200, 20, seed=0)
        assert rep["energy"] == 0.0 and rep["se"] == 0.0
        np.testing.assert_allclose(rep["terminal"].particles.var(), params.tau, rtol=0.3)

    def test_energy_identity_small(self, vf, sol, params):
        rep = bridge_energy(follmer_drift(vf), params, 4000, 100, seed=1)
        target = params.tau * kl_divergence(sol.mu_star, params.prior)
        assert abs(rep["energy"] - target) <= max(0.05 * target, 3 * rep["se"])

    def test_deterministic(self, vf, params):
        d = follmer_drift(vf)
        a = simulate_bridge(d, params, 50, 20, seed=4)
        b = simulate_bridge(d, params, 50, 20, seed=4)
        np.testing.assert_array_equal(a.terminal, b.terminal)

    def test_chunks_compose(self, vf, params):
        d = follmer_drift(vf)
        whole = simulate_bridge(d, params, 40, 20, seed=4).terminal
        parts = [simulate_bridge(d, params, 20, 20, seed=4, offset=o).terminal for o in (0, 20)]
        np.testing.assert_array_equal(whole, np.vstack(parts))

    def test_flat_rescaled_terminal_law(self, flat):
        tau, n, N = 0.04, 50, 5000
        ctx = CouplingContext(0, N, n, tau)
        r = rescaled_drift(flat)
        tr = euler_maruyama(np.zeros((N, 1)), r, ctx.brownian, tau / n, math.sqrt(tau))
        prior_cdf = GridCDF(flat.params.prior.on_grid(flat.grid)).cdf
        assert ks_statistic(tr.terminal[:, 0], prior_cdf) <= ks_threshold(N)

    def test_rescaled_matches_unscaled(self, vf, params):
        tau, n, N = params.tau, 50, 2000
        d = follmer_drift(vf)
        ctx = CouplingContext(0, N, n, tau)
        scaled = euler_maruyama(np.zeros((N, 1)), rescaled_drift(vf, d), ctx.brownian, tau / n, math.sqrt(tau))
        plain = simulate_bridge(d, params, N, n, seed=0)
        bias = euler_bias_w2(d, params, N, n, seed=0)
        gap = wasserstein2(ParticleEnsemble(scaled.terminal), ParticleEnsemble(plain.terminal))
        assert gap <= 2 * bias + 1e-12
