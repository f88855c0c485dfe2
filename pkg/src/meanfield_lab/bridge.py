"""Optimal bridge from ``delta_0`` to ``mu*``: value function, drift and marginals.

With ``s = tau (1 - t)`` and ``Z`` a standard normal, the value function is

    V(w, t) = -tau log E[exp(-(beta / tau) Psi(w + sqrt(s) Z; mu*))],

so ``V(w, 1) = beta Psi(w; mu*)`` and ``h = exp(-V / tau)`` solves the backward
heat equation ``h_t + (tau / 2) h'' = 0``.  The optimal drift is
``u = -grad V = -beta E_Q[grad Psi]`` with the Gibbs measures

    Q_{w,t}(dv) ~ exp(-|v - w|^2 / (2 s) - (beta / tau) Psi(v; mu*)) dv,

and the marginal of the controlled process is
``phi_{tau t}(w) h(w, t) / h(0, 0)``.  Expectations over ``Z`` use
Gauss-Hermite quadrature, which stays accurate as ``s -> 0``.  The
implementation is one-dimensional in the weight variable.
"""

import csv
import hashlib
import json
import logging
import math
from pathlib import Path

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from scipy.interpolate import CubicSpline
from scipy.special import logsumexp

from .dynamics import CouplingContext, euler_maruyama
from .measures import ContractError, GridMeasure, ParticleEnsemble, wasserstein2
from .problem import feature_grads, features, grad_Psi, potential_coefficients, risk_of_ensemble

__all__ = [
    "ValueFunctionField",
    "DriftField",
    "follmer_drift",
    "greedy_drift",
    "zero_drift",
    "rescaled_drift",
    "gibbs_measure_Q",
    "value_function",
    "cole_hopf_h",
    "bridge_marginal_density",
    "bridge_energy",
    "conditional_drift_check",
    "q_second_moment_check",
    "simulate_bridge",
    "euler_bias_w2",
    "export_drift_csv",
]

log = logging.getLogger(__name__)

INTERP_BUDGET = 1e-6
MASS_DRIFT_TOL = 1e-3


def _provenance(sol):
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(sol.mu_star.density).tobytes())
    h.update(repr((sol.params.beta, sol.params.tau, sol.grid.L, sol.grid.n)).encode())
    return h.hexdigest()[:16]


class ValueFunctionField:
    """``V*``, its gradient and the Gibbs measures ``Q_{w,t}`` for a fixed-point solution.

    Parameters
    ----------
    prob : ProblemInstance
    sol : FixedPointSolution
    n_hermite : int
        Gauss-Hermite nodes for expectations over the conditional Gaussian.
    """

    def __init__(self, prob, sol, n_hermite=64):
        if sol.grid.dim != 1:
            raise ContractError("the bridge is implemented for one-dimensional weights")
        self.prob, self.sol, self.params = prob, sol, sol.params
        self.grid = sol.grid
        self.coef = potential_coefficients(prob, sol.mu_star)
        z, wz = hermegauss(n_hermite)
        self.z = z
        self.log_wz = np.log(wz / wz.sum())
        self.provenance = _provenance(sol)
        self.guard_s = self.grid.h**2 / 4.0
        self.psi_grid = self.psi(self.grid.axis)
        self.psi_grid.setflags(write=False)

    # Psi(.; mu*) and its gradient at arbitrary points, any shape
    def psi(self, v):
        v = np.asarray(v, dtype=float)
        return (self.coef @ features(self.prob, v.reshape(-1, 1))).reshape(v.shape)

    def grad_psi(self, v):
        v = np.asarray(v, dtype=float)
        return np.einsum("j,jm->m", self.coef, feature_grads(self.prob, v.reshape(-1, 1))[:, :, 0]).reshape(v.shape)

    @property
    def switch_time(self):
        """Time after which the drift uses its ``t -> 1`` limit."""
        return 1.0 - self.guard_s / self.params.tau

    def _tilt(self, w, t):
        """Nodes ``w + sqrt(s) z_k`` and log-weights of ``Q_{w,t}`` in Gauss-Hermite form."""
        s = self.params.tau * (1.0 - t)
        w = np.atleast_1d(np.asarray(w, dtype=float)).reshape(-1)
        V = w[:, None] + math.sqrt(max(s, 0.0)) * self.z[None, :]
        lw = self.log_wz[None, :] - self.params.ratio * self.psi(V)
        if not np.all(np.isfinite(lw)):
            bad = w[~np.all(np.isfinite(lw), axis=1)]
            raise FloatingPointError(f"non-finite Gibbs weights at w={bad[:5]}, t={t}")
        return V, lw

    def value(self, w, t):
        if t >= 1.0:
            return self.params.beta * self.psi(np.atleast_1d(w).astype(float))
        _, lw = self._tilt(w, t)
        return -self.params.tau * logsumexp(lw, axis=1)

    def drift_exact(self, w, t):
        """``-beta E_Q[grad Psi]``; past the resolution guard, ``-beta grad Psi(w)``."""
        w = np.atleast_1d(np.asarray(w, dtype=float)).reshape(-1)
        if self.params.tau * (1.0 - t) < self.guard_s:
            return -self.params.beta * self.grad_psi(w)
        V, lw = self._tilt(w, t)
        p = np.exp(lw - logsumexp(lw, axis=1, keepdims=True))
        return -self.params.beta * np.sum(p * self.grad_psi(V), axis=1)

    def q_moment(self, w, t):
        """``int |v - w|^2 Q_{w,t}(dv)``."""
        s = self.params.tau * (1.0 - t)
        if s <= 0:
            return np.zeros(np.atleast_1d(w).size)
        _, lw = self._tilt(w, t)
        p = np.exp(lw - logsumexp(lw, axis=1, keepdims=True))
        return s * np.sum(p * self.z[None, :] ** 2, axis=1)

    def log_marginal(self, w, t):
        """Unnormalized log of ``phi_{tau t}(w) h(w, t) / h(0, 0)``."""
        w = np.atleast_1d(np.asarray(w, dtype=float)).reshape(-1)
        var = self.params.tau * t
        v0 = self.value(np.zeros(1), 0.0)[0]
        return -0.5 * w**2 / var - 0.5 * math.log(2 * math.pi * var) - (self.value(w, t) - v0) / self.params.tau

    def marginal_output(self, t):
        """Network output ``fhat(x_j; mu*_t)`` at the data nodes by nested quadrature."""
        if t <= 0:
            return features(self.prob, np.zeros((1, 1)))[:, 0]
        w = math.sqrt(self.params.tau * t) * self.z
        v0 = self.value(np.zeros(1), 0.0)[0]
        logp = self.log_wz - (self.value(w, t) - v0) / self.params.tau
        p = np.exp(logp - logsumexp(logp))
        return features(self.prob, w.reshape(-1, 1)) @ p


class DriftField:
    """Evaluable drift ``(w, t) -> u`` on an ``(M, d)`` ensemble.

    ``kind`` is one of ``follmer``, ``greedy``, ``zero`` or a ``-rescaled``
    variant; ``horizon`` is the end of the time interval.
    """

    def __init__(self, fn, kind, provenance="", dim=1, horizon=1.0):
        self._fn, self.kind, self.provenance, self.dim, self.horizon = fn, kind, provenance, dim, horizon

    def __call__(self, w, t):
        w = np.asarray(w, dtype=float)
        W = w.reshape(-1, self.dim)
        out = np.asarray(self._fn(W, float(t)), dtype=float).reshape(W.shape)
        if not np.all(np.isfinite(out)):
            raise FloatingPointError(f"{self.kind} drift is not finite at t={t}")
        return out


class _TabulatedFollmer:
    """Per-time cubic-spline tables of the exact drift on the grid nodes."""

    def __init__(self, vf, max_cache=4096):
        self.vf = vf
        self.nodes = vf.grid.axis
        self._cache = {}
        self.max_cache = max_cache
        self._check_budget()

    def _check_budget(self):
        for _ in range(4):
            mids = 0.5 * (self.nodes[1:] + self.nodes[:-1])
            err = 0.0
            for t in (0.0, 0.5, min(0.99, self.vf.switch_time)):
                sp = CubicSpline(self.nodes, self.vf.drift_exact(self.nodes, t))
                err = max(err, float(np.max(np.abs(sp(mids) - self.vf.drift_exact(mids, t)))))
            if err <= INTERP_BUDGET:
                self.interp_error = err
                return
            self.nodes = np.linspace(self.nodes[0], self.nodes[-1], 2 * self.nodes.size - 1)
        raise ContractError(f"drift interpolation error {err:.2e} exceeds {INTERP_BUDGET:g}")

    def table(self, t):
        sp = self._cache.get(t)
        if sp is None:
            if len(self._cache) >= self.max_cache:
                self._cache.clear()
            sp = CubicSpline(self.nodes, self.vf.drift_exact(self.nodes, t))
            self._cache[t] = sp
        return sp

    def __call__(self, W, t):
        w = W[:, 0]
        out = np.empty_like(w)
        inside = (w >= self.nodes[0]) & (w <= self.nodes[-1])
        out[inside] = self.table(t)(w[inside])
        if not np.all(inside):
            out[~inside] = self.vf.drift_exact(w[~inside], t)
        return out[:, None]


def follmer_drift(vf, tabulate=True):
    """Optimal drift ``u(w, t) = -beta int grad Psi dQ_{w,t}``."""
    if vf.params.beta == 0:
        return zero_drift(1)
    fn = _TabulatedFollmer(vf) if tabulate else (lambda W, t: vf.drift_exact(W[:, 0], t)[:, None])
    return DriftField(fn, "follmer", vf.provenance)


def greedy_drift(prob, params, mu):
    """``-beta grad Psi(w; mu)`` for a fixed measure ``mu``."""
    return DriftField(lambda W, t: -params.beta * grad_Psi(prob, W, mu), "greedy", dim=prob.weight_dim)


def zero_drift(dim=1):
    return DriftField(lambda W, t: np.zeros_like(W), "zero", dim=dim)


def rescaled_drift(vf, drift=None):
    """Drift on ``[0, tau]`` with unit diffusion: ``u~(w, s) = u(w, s / tau) / tau``."""
    drift = follmer_drift(vf) if drift is None else drift
    tau = vf.params.tau
    return DriftField(lambda W, s: drift(W, s / tau) / tau, drift.kind + "-rescaled", drift.provenance,
                      drift.dim, horizon=tau)


def gibbs_measure_Q(vf, w, t):
    """``Q_{w,t}`` as a grid density."""
    s = vf.params.tau * (1.0 - t)
    if not 0.0 <= t < 1.0:
        raise ContractError("t must lie in [0, 1)")
    if s < vf.guard_s:
        raise ContractError(
            f"tau(1-t)={s:.3e} is below the grid resolution {vf.guard_s:.3e}; use the t -> 1 limit -beta grad Psi(w)"
        )
    v = vf.grid.axis
    logq = -0.5 * (v - float(w)) ** 2 / s - vf.params.ratio * vf.psi_grid
    logq -= logq.max()
    return GridMeasure(vf.grid, np.exp(logq)).normalize()


def value_function(vf, w, t):
    """``V*(w, t)``; equals ``beta Psi(w; mu*)`` at ``t = 1``."""
    if not 0.0 <= t <= 1.0:
        raise ContractError("t must lie in [0, 1]")
    return vf.value(w, t)


def cole_hopf_h(vf, w, t):
    """``h(w, t) = exp(-V*(w, t) / tau)``."""
    return np.exp(-value_function(vf, w, t) / vf.params.tau)


def bridge_marginal_density(vf, t, grid=None):
    """Marginal law of the optimal process at time ``t`` on a grid."""
    if not 0.0 < t <= 1.0:
        raise ContractError("t must lie in (0, 1]; the law at t = 0 is delta_0")
    grid = vf.grid if grid is None else grid
    lr = vf.log_marginal(grid.axis, t)
    rho = np.exp(lr)
    mu = GridMeasure(grid, rho)
    drift = abs(mu.mass - 1.0)
    if drift > MASS_DRIFT_TOL:
        raise ContractError(f"marginal mass {mu.mass:.6f} at t={t} is off by more than {MASS_DRIFT_TOL:g}")
    if drift > 1e-9:
        log.info("renormalizing bridge marginal at t=%g (mass drift %.2e)", t, drift)
    return mu.normalize()


# ---------------------------------------------------------------------------
# simulation-based checks
# ---------------------------------------------------------------------------


def simulate_bridge(drift, params, n_paths, n_steps, seed, refine=1, record=False, on_step=None, offset=0):
    """Euler-Maruyama paths of ``dW = u dt + sqrt(tau) dB`` from ``W_0 = 0``."""
    ctx = CouplingContext(seed, n_paths, n_steps, params.tau, refine=refine, offset=offset)
    return euler_maruyama(np.zeros((n_paths, 1)), drift, ctx.brownian, ctx.eta, math.sqrt(params.tau),
                          record=record, on_step=on_step)


def bridge_energy(drift, params, n_paths, n_steps, seed, prob=None):
    """Monte Carlo control energy ``E[int_0^1 |u(W_t, t)|^2 / 2 dt]``.

    The time integral is the left-point sum over the Euler steps, matching the
    piecewise-constant control actually applied.  With ``prob`` the total cost
    ``energy + (beta / 2) R_N(W_1)`` is reported as well.
    """
    acc = np.zeros(n_paths)
    eta = 1.0 / n_steps

    def on_step(k, t, x, u):
        acc[:] += 0.5 * eta * np.sum(u * u, axis=1)

    tr = simulate_bridge(drift, params, n_paths, n_steps, seed, on_step=on_step)
    out = {
        "energy": float(acc.mean()),
        "se": float(acc.std(ddof=1) / math.sqrt(n_paths)) if n_paths > 1 else float("nan"),
        "terminal": ParticleEnsemble(tr.terminal),
    }
    if prob is not None:
        out["terminal_risk"] = risk_of_ensemble(prob, out["terminal"])
        out["total_cost"] = out["energy"] + 0.5 * params.beta * out["terminal_risk"]
    return out


def conditional_drift_check(vf, drift, t_probe, n_paths=200_000, seed=0, n_steps=200, n_bins=50,
                            min_count=200, chunk=20_000):
    """Compare ``E[-beta grad Psi(W_1) | W_t]`` with ``u(W_t, t)`` bin by bin.

    Paths are binned by ``W_{t_probe}`` into equal-count bins.  Within a bin
    the paired differences ``-beta grad Psi(W_1) - u(W_t, t)`` should average
    to zero; each bin gets the z-score of that mean.  The check passes when at
    least 95% of bins with ``min_count`` paths have ``|z| <= 3``.
    """
    k_probe = int(round(t_probe * n_steps))
    if not 0 <= k_probe < n_steps or abs(k_probe / n_steps - t_probe) > 1e-12:
        raise ContractError("t_probe must be a multiple of the step size in [0, 1)")
    beta = vf.params.beta
    w_t, diff = [], []
    for start in range(0, n_paths, chunk):
        m = min(chunk, n_paths - start)
        held = {}

        def on_step(k, t, x, u):
            if k == k_probe:
                held["w"], held["u"] = x[:, 0].copy(), u[:, 0].copy()

        tr = simulate_bridge(drift, vf.params, m, n_steps, seed, on_step=on_step, offset=start)
        target = -beta * vf.grad_psi(tr.terminal[:, 0])
        w_t.append(held["w"])
        diff.append(target - held["u"])
    w_t, diff = np.concatenate(w_t), np.concatenate(diff)
    edges = np.quantile(w_t, np.linspace(0, 1, n_bins + 1))
    which = np.clip(np.searchsorted(edges, w_t, side="right") - 1, 0, n_bins - 1)
    bins, skipped = [], 0
    for b in range(n_bins):
        d = diff[which == b]
        if d.size < min_count:
            skipped += 1
            continue
        se = d.std(ddof=1) / math.sqrt(d.size)
        z = d.mean() / se if se > 0 else (0.0 if d.mean() == 0 else math.inf)
        bins.append({"center": float(0.5 * (edges[b] + edges[b + 1])), "count": int(d.size),
                     "mean_diff": float(d.mean()), "z": float(z)})
    frac = float(np.mean([abs(b["z"]) <= 3 for b in bins])) if bins else 1.0
    if skipped:
        log.info("conditional drift check skipped %d under-populated bins", skipped)
    return {"t_probe": t_probe, "bins": bins, "skipped": skipped, "fraction_within": frac, "passed": frac >= 0.95}


def q_second_moment_check(vf, w_probes, t_grid):
    """Spread of ``Q_{w,t}`` about ``w`` along ``t``.

    Reports ``m(w, t) = int |v - w|^2 dQ_{w,t}``, whether it is nonincreasing in
    ``t``, the least-squares slope ``a`` of ``m ~ a (1 - t)`` pooled over probes
    with its ``R^2``, and ``a / (beta^2 + tau d)``.
    """
    t_grid = np.asarray(t_grid, dtype=float)
    w_probes = np.asarray(w_probes, dtype=float).reshape(-1)
    m = np.array([vf.q_moment(w_probes, t) for t in t_grid]).T  # (P, T)
    nonincreasing = bool(np.all(np.diff(m, axis=1) <= 1e-12))
    x = np.tile(1.0 - t_grid, (w_probes.size, 1)).ravel()
    y = m.ravel()
    a = float(x @ y / (x @ x))
    ss = np.sum((y - y.mean()) ** 2)
    r2 = float(1.0 - np.sum((y - a * x) ** 2) / ss) if ss > 0 else 1.0
    scale = vf.params.beta**2 + vf.params.tau
    return {"m": m, "nonincreasing": nonincreasing, "slope": a, "r2": r2, "scale": scale, "ratio": a / scale,
            "terminal": m[:, -1] if t_grid[-1] == 1.0 else None}


def export_drift_csv(drift, w_nodes, t_nodes, path):
    """Long-format ``w,t,u`` table plus a JSON sidecar with the drift's provenance."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    w_nodes = np.asarray(w_nodes, dtype=float)
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["w", "t", "u"])
        for t in t_nodes:
            u = drift(w_nodes[:, None], float(t))[:, 0]
            for wi, ui in zip(w_nodes, u):
                wr.writerow([repr(float(wi)), repr(float(t)), repr(float(ui))])
    tmp.replace(path)
    side = path.with_suffix(".json")
    side.write_text(json.dumps({"kind": drift.kind, "provenance": drift.provenance}, sort_keys=True, indent=2) + "\n",
                    encoding="utf-8")
    return path


def euler_bias_w2(drift, params, n_paths, n_steps, seed):
    """1D ``W2`` between terminal laws at ``n`` and ``2 n`` steps on a shared Brownian path."""
    coarse = simulate_bridge(drift, params, n_paths, n_steps, seed, refine=2)
    fine = simulate_bridge(drift, params, n_paths, 2 * n_steps, seed, refine=1)
    return wasserstein2(ParticleEnsemble(coarse.terminal), ParticleEnsemble(fine.terminal))

