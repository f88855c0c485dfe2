import logging
import math
from types import SimpleNamespace

import numpy as np
import pytest

from meanfield_lab.bridge import euler_bias_w2, follmer_drift, zero_drift
from meanfield_lab.dynamics import (
    CouplingContext,
    SimulationError,
    TrajectoryLog,
    build_log,
    drift_lipschitz_ratio,
    euler_maruyama,
    gap_decomposition,
    interaction_drift,
    reference_risk_flow,
    sgd_expected_update,
    sgd_update,
    simulate_all,
    simulate_gd,
    simulate_mkv,
    simulate_particle,
    simulate_sgd,
)
from meanfield_lab.free_energy import RegularizationParams, loglog_slope
from meanfield_lab.measures import ContractError, ParticleEnsemble, gaussian_on_grid
from meanfield_lab.oracle import particle_n1_oracle
from meanfield_lab.problem import eval_f_tilde, eval_K, net_output, risk_from_output, risk_of_measure

FLAT = SimpleNamespace(beta=0.0, tau=0.04, dim=1)


def tanh_grad(x, w):
    return x * (1 - np.tanh(x * w) ** 2)


class TestCoupling:
    def test_shared_increments(self):
        ctx = CouplingContext(0, 8, 10, 0.04)
        assert ctx.brownian_particle is ctx.brownian
        assert not ctx.brownian.flags.writeable

    def test_increment_variance(self):
        inc = CouplingContext(1, 2000, 50, 0.04).brownian
        np.testing.assert_allclose(inc.var(), 1 / 50, rtol=0.02)

    def test_refined_path_matches_fine_path(self):
        a = CouplingContext(3, 5, 10, 0.04, refine=2).brownian
        b = CouplingContext(3, 5, 20, 0.04).brownian
        np.testing.assert_allclose(a, b[0::2] + b[1::2], atol=1e-15)

    def test_particles_keep_their_noise_when_N_changes(self):
        small = CouplingContext(0, 4, 10, 0.04)
        big = CouplingContext(0, 9, 10, 0.04)
        np.testing.assert_array_equal(small.brownian, big.brownian[:, :4])
        np.testing.assert_array_equal(small.init_sample, big.init_sample[:4])

    def test_decoupling_increases_gap(self, prob, params, vf):
        drift = follmer_drift(vf)
        gaps = []
        for decouple in (False, True):
            ctx = CouplingContext(0, 100, 50, params.tau, decouple=decouple)
            a, b = simulate_mkv(ctx, drift, params), simulate_particle(ctx, prob, params)
            gaps.append(np.max(np.abs(a.states - b.states)))
        assert gaps[1] > gaps[0]

    def test_invalid(self):
        with pytest.raises(ContractError):
            CouplingContext(0, 0, 10, 0.04)


class TestIntegrators:
    def test_zero_drift_is_scaled_brownian(self):
        ctx = CouplingContext(0, 20_000, 20, 0.04)
        tr = simulate_mkv(ctx, zero_drift(), FLAT)
        se = 0.04 * math.sqrt(2 / 20_000)
        assert abs(tr.terminal.var() - 0.04) <= 3 * se

    def test_flat_particle_equals_zero_drift_bitwise(self, prob):
        ctx = CouplingContext(2, 30, 25, 0.04)
        a = simulate_mkv(ctx, zero_drift(), FLAT)
        b = simulate_particle(ctx, prob, FLAT)
        np.testing.assert_array_equal(a.states, b.states)

    def test_single_particle_against_fine_oracle(self, prob):
        p = RegularizationParams(1.0, 0.04)
        f = lambda x: np.sin(np.pi * x)  # noqa: E731
        fine_ctx = CouplingContext(5, 1, 400, 0.04)
        oracle = particle_n1_oracle(prob.nodes[:, 0], prob.weights, f, lambda x, w: np.tanh(x * w), tanh_grad,
                                    p.beta, p.tau, fine_ctx.brownian[:, 0, 0])
        same = simulate_particle(fine_ctx, prob, p).terminal[0, 0]
        np.testing.assert_allclose(same, oracle, rtol=0, atol=1e-12)
        coarse = simulate_particle(CouplingContext(5, 1, 40, 0.04, refine=10), prob, p).terminal[0, 0]
        # strong Euler error with additive noise is O(eta); eta = 1/40 here
        assert abs(coarse - oracle) <= 0.1 / 40

    def test_gd_frozen_and_sgd_frozen_without_signal(self, prob):
        ctx = CouplingContext(0, 10, 20, 0.04)
        np.testing.assert_array_equal(simulate_gd(ctx, prob, FLAT).terminal, ctx.init_sample)
        np.testing.assert_array_equal(simulate_sgd(ctx, prob, FLAT).terminal, ctx.init_sample)

    def test_gd_single_step_by_hand(self, prob):
        p = RegularizationParams(0.5, 0.04)
        ctx = CouplingContext(0, 2, 1, 0.04)
        w0 = ctx.init_sample[:, 0]
        x, pi, f = prob.nodes[:, 0], prob.weights, prob.f_values
        fhat = 0.5 * (np.tanh(x * w0[0]) + np.tanh(x * w0[1]))
        expected = [w0[i] - 0.5 * np.sum(pi * (fhat - f) * x * (1 - np.tanh(x * w0[i]) ** 2)) for i in range(2)]
        np.testing.assert_allclose(simulate_gd(ctx, prob, p).terminal[:, 0], expected, rtol=1e-13)

    def test_gd_first_order_in_step(self, prob):
        p = RegularizationParams(1.0, 0.04)
        term = [simulate_gd(CouplingContext(0, 8, n, 0.04), prob, p, record=False).terminal for n in (25, 50, 100)]
        order = math.log2(np.max(np.abs(term[0] - term[1])) / np.max(np.abs(term[1] - term[2])))
        assert 0.8 <= order <= 1.2

    def test_sgd_single_datum_by_hand(self, prob):
        p = RegularizationParams(0.5, 0.04)
        w = np.array([[0.3]])
        x, y = prob.nodes[4, 0], prob.f_values[4]
        expected = 0.5 * (y - np.tanh(0.3 * x)) * x * (1 - np.tanh(0.3 * x) ** 2)
        np.testing.assert_allclose(sgd_update(prob, p.beta, w, 4)[0, 0], expected, rtol=1e-14)

    def test_sgd_conditional_mean_is_gd_drift(self, prob):
        rng = np.random.default_rng(0)
        for _ in range(5):
            W = rng.normal(scale=0.3, size=(7, 1))
            np.testing.assert_allclose(sgd_expected_update(prob, 0.7, W), interaction_drift(prob, 0.7, W),
                                       rtol=0, atol=1e-10)

    def test_sgd_visits_stream_once(self, prob):
        ctx = CouplingContext(0, 3, 30, 0.04)
        assert len(ctx.data_indices(prob)) == 30
        np.testing.assert_array_equal(ctx.data_indices(prob), ctx.data_indices(prob))

    def test_multi_epoch_flagged(self, prob, params, caplog):
        ctx = CouplingContext(0, 3, 10, params.tau)
        with caplog.at_level(logging.WARNING):
            tr = simulate_sgd(ctx, prob, params, epochs=2)
        assert "one-pass" in caplog.text and len(tr.times) == 21

    def test_blow_up_aborts(self):
        with pytest.raises(SimulationError, match="step 0"):
            euler_maruyama(np.zeros((2, 1)), lambda x, t: np.full_like(x, 1e7), np.zeros((3, 2, 1)), 0.1, 0.0)

    def test_drift_sees_read_only_snapshot(self):
        def drift(x, t):
            with pytest.raises(ValueError):
                x[0] = 1.0
            return np.zeros_like(x)

        euler_maruyama(np.zeros((2, 1)), drift, np.zeros((2, 2, 1)), 0.5, 0.0)

    def test_euler_bias_first_order(self, vf, params):
        d = follmer_drift(vf)
        ns = [20, 40, 80]
        bias = [euler_bias_w2(d, params, 2000, n, seed=0) for n in ns]
        slope, _ = loglog_slope([1 / n for n in ns], bias)
        assert slope >= 0.8


@pytest.fixture(scope="module")
def run(prob, params, vf):
    ctx = CouplingContext(0, 50, 40, params.tau)
    trajs = simulate_all(ctx, prob, params, follmer_drift(vf))
    flow = reference_risk_flow(prob, vf.marginal_output, ctx.times())
    return trajs, flow, build_log(prob, trajs, flow)


class TestLogsAndGaps:
    def test_triangle_and_structure(self, run):
        _, _, log_ = run
        rep = gap_decomposition(log_)
        assert sum(rep["max_gaps"]) >= rep["max_total_gap"]
        assert np.all(np.diff(rep["running_max"], axis=1) >= 0)
        assert len(log_) == 41 and log_.column("t")[-1] == 1.0
        assert np.all(log_.column("risk_sgd") >= 0)

    def test_deterministic_log(self, prob, params, vf, run):
        ctx = CouplingContext(0, 50, 40, params.tau)
        again = build_log(prob, simulate_all(ctx, prob, params, follmer_drift(vf)), run[1])
        assert again.rows == run[2].rows

    def test_csv(self, tmp_path, run):
        path = run[2].to_csv(tmp_path / "log.csv")
        lines = path.read_text().splitlines()
        assert lines[0] == ",".join(TrajectoryLog.COLUMNS)
        assert len(lines) == 42

    def test_append_only(self):
        log_ = TrajectoryLog()
        row = {c: 0.0 for c in TrajectoryLog.COLUMNS}
        log_.append(dict(row, k=0))
        with pytest.raises(ContractError):
            log_.append(dict(row, k=2))
        with pytest.raises(ContractError):
            log_.append({"k": 1})

    def test_mismatched_lengths(self, prob, run):
        trajs, flow, log_ = run
        with pytest.raises(ContractError):
            build_log(prob, trajs, flow[:-1])
        with pytest.raises(ContractError):
            gap_decomposition(log_, flow[:-1])

    def test_flat_gaps(self, prob):
        ctx = CouplingContext(0, 40, 20, 0.04)
        trajs = simulate_all(ctx, prob, FLAT, zero_drift())
        log_ = build_log(prob, trajs, np.zeros(21))
        np.testing.assert_array_equal(log_.column("gap2"), 0.0)
        np.testing.assert_array_equal(log_.column("gap4"), 0.0)


class TestReferenceFlow:
    def test_endpoints(self, prob, sol, vf):
        flow = reference_risk_flow(prob, vf.marginal_output, [0.0, 1.0])
        delta = prob.R0 + 2 * eval_f_tilde(prob, 0.0) + eval_K(prob, 0.0, 0.0)
        np.testing.assert_allclose(flow[0], delta, atol=1e-14)
        np.testing.assert_allclose(flow[1], risk_of_measure(prob, sol.mu_star), atol=1e-9)

    def test_flat_flow_is_heat_flow(self, prob, sol):
        from meanfield_lab.bridge import ValueFunctionField
        from meanfield_lab.free_energy import solve_boltzmann_fixed_point

        p = RegularizationParams(1e-12, 0.04)
        vf0 = ValueFunctionField(prob, solve_boltzmann_fixed_point(prob, p))
        flow = reference_risk_flow(prob, vf0.marginal_output, [0.25, 0.75])
        for t, r in zip((0.25, 0.75), flow):
            mu = gaussian_on_grid(sol.grid, 0.0, 0.04 * t)
            np.testing.assert_allclose(r, risk_from_output(prob, net_output(prob, mu)), atol=1e-9)


class TestLipschitz:
    def test_ratio_linear_in_beta(self, prob):
        betas = [0.1, 0.2, 0.4, 0.8]
        ratios = [drift_lipschitz_ratio(prob, b, n_probes=300) for b in betas]
        slope, _ = loglog_slope(betas, ratios)
        assert abs(slope - 1.0) <= 0.2
        assert max(r / b for r, b in zip(ratios, betas)) <= 2 * prob.lip_kappa2
