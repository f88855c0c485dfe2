import ast
import json
import math
from pathlib import Path

import numpy as np
import pytest
from scipy.stats import norm

import meanfield_lab.oracle as oracle_mod
from meanfield_lab.oracle import (
    OracleReport,
    append_reports,
    brute_force_assignment_w2,
    dense_riemann_kernel,
    finite_difference_gradient,
    ks_statistic,
    ks_threshold,
    mc_value_function,
    pde_residual,
    quantile_w2_gaussians,
)


def _act(x, w):
    return np.tanh(x * w)


class TestIsolation:
    def test_imports_only_numpy_and_stdlib(self):
        tree = ast.parse(Path(oracle_mod.__file__).read_text())
        names = set()
        for node in ast.walk(tree):
            if isinstance(node, ast.Import):
                names.update(a.name.split(".")[0] for a in node.names)
            elif isinstance(node, ast.ImportFrom):
                assert node.level == 0, "oracle must not import package modules"
                names.add(node.module.split(".")[0])
        assert names <= {"itertools", "json", "math", "dataclasses", "pathlib", "numpy"}


class TestReports:
    def test_pass_flag(self):
        assert OracleReport("a", 1.0, 1.0 + 1e-9, 1e-8).passed
        assert not OracleReport("a", 1.0, 1.1, 1e-8).passed
        assert OracleReport("r", 2.0, 2.0 * (1 + 1e-7), 1e-6, relative=True).passed

    def test_zero_oracle_relative(self):
        r = OracleReport("z", 1e-3, 0.0, 1.0, relative=True)
        assert r.rel_error == math.inf and not r.passed

    def test_jsonl(self, tmp_path):
        path = tmp_path / "r.jsonl"
        append_reports([OracleReport("a", 1.0, 1.0, 0.0, provenance={"seed": 1})], path)
        append_reports([OracleReport("b", 1.0, 2.0, 0.1)], path)
        rows = [json.loads(line) for line in path.read_text().splitlines()]
        assert [r["name"] for r in rows] == ["a", "b"]
        assert rows[0]["passed"] and not rows[1]["passed"] and rows[0]["provenance"] == {"seed": 1}


class TestRiemann:
    def test_constant_integrand(self):
        assert dense_riemann_kernel(lambda x: np.ones_like(x), lambda x, w: np.full_like(x, w), -2.0,
                                    n_points=1000) == pytest.approx(2.0, abs=1e-15)

    def test_self_convergence(self):
        f = lambda x: np.sin(np.pi * x)  # noqa: E731
        a = dense_riemann_kernel(f, _act, 1.3)
        b = dense_riemann_kernel(f, _act, 1.3, n_points=2 * 10**6)
        assert abs(a - b) < 1e-9


class TestFiniteDifferences:
    def test_quadratic_exact(self):
        g = lambda w: 3 * w[0] ** 2 - 2 * w[0] * w[1] + w[1]  # noqa: E731
        np.testing.assert_allclose(finite_difference_gradient(g, [0.5, -1.0], step=1e-3), [5.0, 0.0], atol=1e-12)

    def test_second_order(self):
        g = lambda w: math.sin(w[0])  # noqa: E731
        e1 = abs(finite_difference_gradient(g, [0.7], step=0.1)[0] - math.cos(0.7))
        e2 = abs(finite_difference_gradient(g, [0.7], step=0.05)[0] - math.cos(0.7))
        np.testing.assert_allclose(e1 / e2, 4.0, rtol=0.01)

    def test_richardson_improves(self):
        g = lambda w: math.exp(w[0])  # noqa: E731
        plain = abs(finite_difference_gradient(g, [0.2], step=0.1)[0] - math.exp(0.2))
        rich = abs(finite_difference_gradient(g, [0.2], step=0.1, richardson=True)[0] - math.exp(0.2))
        assert rich < plain / 100


class TestAssignment:
    def test_known_cases(self):
        assert brute_force_assignment_w2([1.0, 2.0, 3.0], [3.0, 1.0, 2.0]) == 0.0
        assert brute_force_assignment_w2(np.arange(4.0), np.arange(4.0) + 0.5) == pytest.approx(0.5)

    def test_sort_match_is_optimal_in_1d(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            a, b = rng.normal(size=6), rng.normal(size=6)
            sorted_cost = math.sqrt(np.mean((np.sort(a) - np.sort(b)) ** 2))
            np.testing.assert_allclose(brute_force_assignment_w2(a, b), sorted_cost, atol=1e-12)

    def test_size_limit(self):
        with pytest.raises(ValueError):
            brute_force_assignment_w2(np.zeros(9), np.zeros(9))

    def test_gaussian_closed_form(self):
        assert quantile_w2_gaussians(0.0, 0.04, 0.5, 0.04) == pytest.approx(0.5)


class TestResiduals:
    def test_heat_kernel(self):
        tau = 0.04

        def h(w, t):
            v = tau * (1 - t) + 0.01
            return np.exp(-0.5 * w**2 / v) / np.sqrt(2 * np.pi * v)

        rep = pde_residual(h, "heat", tau, np.linspace(-0.3, 0.3, 7), [0.2, 0.6], 0.02)
        assert rep["order"] >= 1.9

    def test_zero_field(self):
        rep = pde_residual(lambda w, t: np.zeros_like(w), "hjb", 0.04, [0.0, 0.1], [0.5])
        assert rep["order"] == math.inf and max(rep["sup"]) == 0.0

    def test_unknown_tag(self):
        with pytest.raises(ValueError):
            pde_residual(lambda w, t: w, "wave", 0.04, [0.0], [0.5])


class TestKS:
    def test_calibration(self):
        rng = np.random.default_rng(0)
        passes = sum(ks_statistic(rng.standard_normal(500), norm.cdf) <= ks_threshold(500) for _ in range(100))
        assert passes >= 98

    def test_power(self):
        x = np.random.default_rng(1).standard_normal(2000) + 0.5
        assert ks_statistic(x, norm.cdf) > ks_threshold(2000)

    def test_empty(self):
        with pytest.raises(ValueError):
            ks_statistic([], norm.cdf)


class TestMonteCarloValue:
    def test_flat_potential(self):
        v, se = mc_value_function(lambda x: np.zeros_like(x), 0.3, 0.04, 0.1, 0.5, 1000)
        assert v == 0.0 and se == 0.0

    def test_quadratic_potential_closed_form(self):
        # psi = a v^2 / 2: -tau log E exp(-(beta/tau) a (w + s Z)^2 / 2) is Gaussian
        a, beta, tau, w, t = 1.0, 0.5, 0.04, 0.2, 0.3
        s2 = tau * (1 - t)
        k = beta * a / tau
        exact = -tau * (-0.5 * math.log(1 + k * s2) - 0.5 * k * w * w / (1 + k * s2))
        v, se = mc_value_function(lambda x: 0.5 * a * x**2, beta, tau, w, t, 10**6, seed=3)
        assert abs(v - exact) <= 3 * se
