"""Slow, independent reference computations used by the tests and ``verify``.

Nothing here imports the package's numerical modules: every oracle works
from plain callables (target, activation, potential) and numpy arrays, so a
bug in the main path cannot leak into its own check.
"""

import itertools
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "OracleReport",
    "append_reports",
    "dense_riemann_kernel",
    "finite_difference_gradient",
    "brute_force_assignment_w2",
    "pde_residual",
    "ks_statistic",
    "ks_threshold",
    "dense_fixed_point",
    "particle_n1_oracle",
    "mc_value_function",
    "quantile_w2_gaussians",
]

KS_COEFF = {0.10: 1.22, 0.05: 1.36, 0.01: 1.63}


@dataclass
class OracleReport:
    name: str
    value: float
    oracle: float
    tolerance: float
    relative: bool = False
    provenance: dict = field(default_factory=dict)

    @property
    def abs_error(self):
        return abs(self.value - self.oracle)

    @property
    def rel_error(self):
        return self.abs_error / abs(self.oracle) if self.oracle != 0 else math.inf if self.abs_error else 0.0

    @property
    def passed(self):
        err = self.rel_error if self.relative else self.abs_error
        return bool(err <= self.tolerance)

    def to_json(self):
        d = asdict(self)
        d.update(abs_error=self.abs_error, rel_error=self.rel_error, passed=self.passed)
        return json.dumps(d, sort_keys=True, default=float)


def append_reports(reports, path):
    """Append reports as JSON lines."""
    path = Path(path)
    with open(path, "a", encoding="utf-8", newline="\n") as fh:
        for r in reports:
            fh.write(r.to_json() + "\n")
    return path


def dense_riemann_kernel(target, activation, w, w2=None, n_points=10**6, lo=-1.0, hi=1.0):
    """Midpoint-rule value of ``-E[f(X) sigma(X; w)]`` or ``E[sigma(X; w) sigma(X; w2)]``.

    ``X`` is uniform on ``[lo, hi]``; ``target(x)`` and ``activation(x, w)``
    are scalar-input callables vectorized over ``x``.
    """
    dx = (hi - lo) / n_points
    x = lo + dx * (np.arange(n_points) + 0.5)
    a = activation(x, w)
    integrand = -target(x) * a if w2 is None else a * activation(x, w2)
    return float(math.fsum(integrand) * dx / (hi - lo))


def finite_difference_gradient(g, w, step=1e-5, richardson=False):
    """Central differences of a scalar function; ``richardson`` combines ``step`` and ``step / 2``."""
    w = np.atleast_1d(np.asarray(w, dtype=float))

    def central(hh):
        out = np.empty_like(w)
        for i in range(w.size):
            e = np.zeros_like(w)
            e[i] = hh
            out[i] = (g(w + e) - g(w - e)) / (2 * hh)
        return out

    if not richardson:
        return central(step)
    return (4 * central(step / 2) - central(step)) / 3


def brute_force_assignment_w2(a, b):
    """Exact ``W2`` between equal-size point clouds by enumerating all pairings."""
    a = np.asarray(a, dtype=float).reshape(len(a), -1)
    b = np.asarray(b, dtype=float).reshape(len(b), -1)
    n = len(a)
    if n != len(b) or n > 8:
        raise ValueError("brute force needs equal sizes N <= 8")
    cost = np.sum((a[:, None, :] - b[None, :, :]) ** 2, axis=2)
    best = min(sum(cost[i, p[i]] for i in range(n)) for p in itertools.permutations(range(n)))
    return math.sqrt(best / n)


def _derivs(fn, w, t, dw, dt):
    fwp, f0, fwm = fn(w + dw, t), fn(w, t), fn(w - dw, t)
    ft = (fn(w, t + dt) - fn(w, t - dt)) / (2 * dt)
    fw = (fwp - fwm) / (2 * dw)
    fww = (fwp - 2 * f0 + fwm) / dw**2
    return f0, ft, fw, fww


def pde_residual(field_, tag, tau, w_probes, t_probes, base_step=0.02, levels=3, time_scale=1.0):
    """Centered-difference residuals of an exact field under step refinement.

    Parameters
    ----------
    field_ : callable or tuple
        ``f(w_array, t) -> values``.  For ``tag="fpe"`` pass ``(rho, u)``.
    tag : {"heat", "hjb", "fpe"}
        ``heat``: ``h_t + (tau/2) h''``; ``hjb``: ``V_t + (tau/2) V'' - V'^2 / 2``;
        ``fpe``: ``rho_t + (rho u)' - (tau/2) rho''``.
    base_step : float
        Space step at the coarsest level; the time step is ``time_scale`` times it.

    Returns
    -------
    dict with per-level ``steps``, ``sup``, ``l2`` and the fitted ``order``.
    """
    w = np.asarray(w_probes, dtype=float)
    steps, sups, l2s = [], [], []
    for lev in range(levels):
        dw = base_step / 2**lev
        dt = time_scale * dw
        res = []
        for t in t_probes:
            if tag == "heat":
                _, ft, _, fww = _derivs(field_, w, t, dw, dt)
                r = ft + 0.5 * tau * fww
            elif tag == "hjb":
                _, ft, fw, fww = _derivs(field_, w, t, dw, dt)
                r = ft + 0.5 * tau * fww - 0.5 * fw**2
            elif tag == "fpe":
                rho, u = field_

                def flux(x, s):
                    return rho(x, s) * u(x, s)

                _, ft, _, fww = _derivs(rho, w, t, dw, dt)
                _, _, gw, _ = _derivs(flux, w, t, dw, dt)
                r = ft + gw - 0.5 * tau * fww
            else:
                raise ValueError(f"unknown equation tag {tag!r}")
            res.append(np.asarray(r, dtype=float))
        res = np.concatenate(res)
        steps.append(dw)
        sups.append(float(np.max(np.abs(res))))
        l2s.append(float(np.sqrt(np.mean(res**2))))
    if all(s == 0 for s in sups):
        order = math.inf
    else:
        lx, ly = np.log(steps), np.log(np.maximum(sups, 1e-300))
        order = float(np.polyfit(lx, ly, 1)[0])
    return {"steps": steps, "sup": sups, "l2": l2s, "order": order}


def ks_statistic(samples, cdf):
    """One-sample Kolmogorov-Smirnov statistic ``sup |F_n - F|``."""
    x = np.sort(np.asarray(samples, dtype=float).reshape(-1))
    n = x.size
    if n == 0:
        raise ValueError("KS statistic of an empty sample")
    F = np.asarray(cdf(x), dtype=float)
    i = np.arange(1, n + 1)
    return float(max(np.max(i / n - F), np.max(F - (i - 1) / n)))


def ks_threshold(n, alpha=0.01):
    """Asymptotic critical value ``c(alpha) / sqrt(n)``."""
    return KS_COEFF[alpha] / math.sqrt(n)


def dense_fixed_point(target, activation, beta, tau, L, n_w=4001, n_x=4000, tol=1e-13, max_iter=10_000):
    """From-scratch Boltzmann fixed point with Riemann sums in both ``x`` and ``w``.

    Data are uniform on ``[-1, 1]`` (midpoint rule with ``n_x`` cells); weights
    live on ``n_w`` equispaced nodes of ``[-L, L]``.  Returns ``(w_nodes, density)``.
    """
    dx = 2.0 / n_x
    x = -1.0 + dx * (np.arange(n_x) + 0.5)
    px = np.full(n_x, 0.5 * dx)
    wn = np.linspace(-L, L, n_w)
    dw = wn[1] - wn[0]
    A = activation(x[:, None], wn[None, :])  # (n_x, n_w)
    fx = target(x)
    prior = np.exp(-0.5 * wn**2 / tau)
    prior /= prior.sum() * dw
    rho = prior.copy()
    for _ in range(max_iter):
        out = A @ rho * dw
        psi = (px * (out - fx)) @ A
        logq = np.log(prior) - beta / tau * psi
        logq -= logq.max()
        new = np.exp(logq)
        new /= new.sum() * dw
        if np.max(np.abs(new - rho)) < tol:
            return wn, new
        rho = new
    raise RuntimeError("dense fixed point did not converge")


def particle_n1_oracle(nodes, weights, target, activation, activation_grad, beta, tau, fine_increments):
    """Single interacting particle integrated on the fine increments.

    For ``N = 1`` the empirical law is ``delta_W`` and the drift is
    ``-beta sum_j pi_j grad sigma(x_j; W) (sigma(x_j; W) - f(x_j))``.
    """
    x = np.asarray(nodes, dtype=float).reshape(-1)
    pi = np.asarray(weights, dtype=float)
    f = target(x)
    inc = np.asarray(fine_increments, dtype=float).reshape(-1)
    dt = 1.0 / inc.size
    w = 0.0
    for dB in inc:
        drift = -beta * float(np.sum(pi * activation_grad(x, w) * (activation(x, w) - f)))
        w = w + dt * drift + math.sqrt(tau) * dB
    return w


def mc_value_function(psi, beta, tau, w, t, n_draws=10**6, seed=0):
    """Monte Carlo ``-tau log E[exp(-(beta/tau) psi(w + sqrt(tau (1-t)) Z))]`` and its standard error."""
    rng = np.random.default_rng(seed)
    z = rng.standard_normal(n_draws)
    a = -(beta / tau) * psi(w + math.sqrt(tau * (1.0 - t)) * z)
    shift = a.max()
    e = np.exp(a - shift)
    m = e.mean()
    se_rel = e.std(ddof=1) / (m * math.sqrt(n_draws))
    return -tau * (math.log(m) + shift), tau * se_rel


def quantile_w2_gaussians(m1, v1, m2, v2):
    """Closed-form ``W2`` between one-dimensional Gaussians."""
    return math.sqrt((m1 - m2) ** 2 + (math.sqrt(v1) - math.sqrt(v2)) ** 2)
