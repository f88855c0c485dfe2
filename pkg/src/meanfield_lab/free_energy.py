"""Free energy, the Boltzmann fixed point and transport of the Gaussian initialization.

The free energy of a weight distribution ``mu`` is

    F(mu) = R(mu) / 2 + (tau / beta) * D(mu || gamma_tau),

and its unique minimizer satisfies ``mu* ~ exp(-(beta / tau) Psi(.; mu*)) gamma_tau``.
All quantities are computed with the trapezoid rule of one grid, so the
discrete fixed point is the exact minimizer of the discrete free energy.
"""

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.interpolate import PchipInterpolator
from scipy.special import logsumexp
from scipy.stats import norm

from .measures import (
    ContractError,
    GaussianPrior,
    Grid,
    GridCDF,
    GridMeasure,
    ParticleEnsemble,
    SupportError,
    convolve_gaussian,
    differential_entropy,
    from_csv,
    kl_divergence,
    mixture,
    sample,
    second_moment,
    to_csv,
    uniform_on_grid,
    wasserstein2,
)
from .problem import features, net_output, risk_of_ensemble, risk_of_measure
from .rng import stream

__all__ = [
    "SolverError",
    "VerificationError",
    "RegularizationParams",
    "FixedPointSolution",
    "default_grid",
    "free_energy",
    "mmn_free_energy",
    "wasserstein_free_energy",
    "boltzmann_map",
    "fixed_point_residual",
    "solve_boltzmann_fixed_point",
    "verify_theorem1",
    "minimality_check",
    "fit_smoothing_constant",
    "free_energy_upper_bound",
    "transport_map_1d",
    "corollary1_experiment",
    "corollary1_sweep",
    "loglog_slope",
    "save_solution",
    "load_solution",
]

log = logging.getLogger(__name__)

BOX_MASS_TOL = 1e-10


class SolverError(RuntimeError):
    """The fixed-point iteration failed; ``trace`` holds ``(beta_k, residual_k)`` pairs."""

    def __init__(self, message, trace=()):
        super().__init__(message)
        self.trace = list(trace)


class VerificationError(AssertionError):
    """A hard inequality that must hold for every solver output was violated."""


@dataclass(frozen=True)
class RegularizationParams:
    """Inverse temperature ``beta`` and prior variance ``tau``."""

    beta: float
    tau: float
    dim: int = 1

    def __post_init__(self):
        for name in ("beta", "tau"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ContractError(f"{name} must be positive and finite, got {v}")

    @classmethod
    def lazy(cls, eps, d=1):
        """Lazy-training preset ``tau = eps^2 / d``, ``beta = eps``."""
        return cls(beta=float(eps), tau=float(eps) ** 2 / d, dim=d)

    @property
    def ratio(self):
        return self.beta / self.tau

    @property
    def prior(self):
        return GaussianPrior(self.tau, self.dim)

    def with_beta(self, beta):
        return RegularizationParams(beta, self.tau, self.dim)


MAX_BOX_DOUBLINGS = 3


def default_grid(params, L=None, h=None):
    """Box ``[-8 sqrt(tau), 8 sqrt(tau)]^d`` with spacing ``sqrt(tau) / 16``."""
    s = math.sqrt(params.tau)
    return Grid.uniform(8.0 * s if L is None else L, s / 16.0 if h is None else h, params.dim)


@dataclass
class FixedPointSolution:
    mu_star: GridMeasure
    params: RegularizationParams
    log_Z: float
    residual: float
    iterations: int
    trace: list = field(default_factory=list)

    @property
    def grid(self):
        return self.mu_star.grid

    @property
    def xi(self):
        """Lagrange multiplier ``-(tau / beta) log Z``."""
        return -self.log_Z / self.params.ratio


# ---------------------------------------------------------------------------
# free energies
# ---------------------------------------------------------------------------


def free_energy(prob, params, mu):
    """``R(mu) / 2 + (tau / beta) D(mu || gamma_tau)``."""
    return 0.5 * risk_of_measure(prob, mu) + kl_divergence(mu, params.prior) / params.ratio


def mmn_free_energy(prob, params, mu):
    """``[R(mu) + M2(mu) / beta] / 2 - (tau / beta) h(mu)``.

    Differs from :func:`free_energy` by the constant ``(tau d / 2 beta) log(2 pi tau)``.
    """
    return 0.5 * (risk_of_measure(prob, mu) + second_moment(mu) / params.beta) - differential_entropy(mu) / params.ratio


def wasserstein_free_energy(prob, params, mu):
    """``R(mu) / 2 + W2(mu, gamma_tau)^2 / (2 beta)`` (one-dimensional grids)."""
    if mu.grid.dim != 1:
        raise ContractError("the Wasserstein free energy is only available in one dimension")
    return 0.5 * risk_of_measure(prob, mu) + wasserstein2(mu, params.prior) ** 2 / (2.0 * params.beta)


# ---------------------------------------------------------------------------
# fixed point
# ---------------------------------------------------------------------------


class _MapContext:
    """Grid-level data reused by every application of the Boltzmann map."""

    def __init__(self, prob, params, grid):
        self.prob, self.params, self.grid = prob, params, grid
        self.S = features(prob, grid.points)
        self.log_w = np.log(grid.weights)
        self.log_prior = params.prior.on_grid(grid)
        with np.errstate(divide="ignore"):
            self.log_prior = np.log(self.log_prior.density)
        self.base = -(prob.weights * prob.f_values) @ self.S  # f~ on the grid

    def psi(self, rho):
        if not self.prob.interaction:
            return self.base
        fhat = self.S @ (self.grid.weights * rho)
        return self.base + (self.prob.weights * fhat) @ self.S

    def log_map(self, rho, beta):
        """Unnormalized log-density of the map and its log-normalizer."""
        psi = self.psi(rho)
        if not np.all(np.isfinite(psi)):
            raise SolverError("potential is not finite on the grid")
        logq = self.log_prior - (beta / self.params.tau) * psi
        log_Z = float(logsumexp(logq + self.log_w))
        return logq - log_Z, log_Z


def boltzmann_map(prob, params, mu):
    """Apply ``rho -> normalize(exp(-(beta / tau) Psi(.; rho)) gamma_tau)``; returns ``(measure, log Z)``."""
    ctx = _MapContext(prob, params, mu.grid)
    logq, log_Z = ctx.log_map(mu.density, params.beta)
    return GridMeasure(mu.grid, np.exp(logq)), log_Z


def fixed_point_residual(prob, params, mu):
    """Sup-node distance between ``mu`` and its image under the Boltzmann map."""
    img, _ = boltzmann_map(prob, params, mu)
    return float(np.max(np.abs(img.density - mu.density)))


def _box_mass_guard(mu):
    """Rough tail-mass estimate beyond the box from the boundary densities."""
    grid = mu.grid
    rho = mu.density.reshape(grid.shape)
    edge = 0.0
    for ax in range(grid.dim):
        lo = np.take(rho, 0, axis=ax)
        hi = np.take(rho, -1, axis=ax)
        face = max(float(lo.max()), float(hi.max()))
        edge = max(edge, face)
    # Gaussian-type tail beyond L has mass about rho(L) * var / L
    est = edge * grid.h * 4.0
    if est > BOX_MASS_TOL:
        raise SupportError(f"estimated mass outside the box {est:.2e} exceeds {BOX_MASS_TOL:g}; enlarge L")
    return est


def _picard(ctx, log_rho, beta, tol, max_iter, damping):
    alpha = damping
    rho = np.exp(log_rho)
    prev = np.inf
    log_Z = np.nan
    for it in range(1, max_iter + 1):
        log_t, log_Z = ctx.log_map(rho, beta)
        res = float(np.max(np.abs(np.exp(log_t) - rho)))
        if res <= tol:
            return log_rho, log_Z, res, it - 1
        if res > prev:
            alpha = max(alpha * 0.5, 1e-3)
        prev = res
        log_rho = (1.0 - alpha) * log_rho + alpha * log_t
        log_rho -= logsumexp(log_rho + ctx.log_w)
        rho = np.exp(log_rho)
    raise SolverError(f"no convergence at beta={beta:g} after {max_iter} iterations (residual {prev:.3e})")


def solve_boltzmann_fixed_point(prob, params, grid=None, tol=1e-10, max_iter=5000, damping=1.0,
                                init="prior", continuation_ratio=10.0, max_continuation=20):
    """Solve ``mu* = normalize(exp(-(beta / tau) Psi(.; mu*)) gamma_tau)`` on a grid.

    Damped Picard iteration in log space; the damping is halved whenever the
    residual grows.  For ``beta / tau > continuation_ratio`` the inverse
    temperature is ramped up geometrically, each stage warm-starting the next.

    Parameters
    ----------
    prob : ProblemInstance
    params : RegularizationParams
    grid : Grid, optional
        Defaults to :func:`default_grid`, whose box is doubled (same spacing)
        while the box-mass guard trips.  An explicit grid must resolve the
        prior, ``h <= sqrt(tau) / 8``, and is never changed.
    tol : float
        Sup-node residual tolerance.
    init : {"prior", "uniform"} or GridMeasure
        Starting density.

    Returns
    -------
    FixedPointSolution
    """
    if grid is None and isinstance(init, GridMeasure):
        grid = init.grid
    if grid is None:
        base = default_grid(params)
        for k in range(MAX_BOX_DOUBLINGS + 1):
            g = default_grid(params, L=base.L * 2**k, h=base.h)
            try:
                return solve_boltzmann_fixed_point(prob, params, g, tol, max_iter, damping, init,
                                                   continuation_ratio, max_continuation)
            except SupportError:
                if k == MAX_BOX_DOUBLINGS:
                    raise
    if grid.h > math.sqrt(params.tau) / 8.0 * (1 + 1e-12):
        raise ContractError(f"grid spacing {grid.h:g} does not resolve the prior (need <= sqrt(tau)/8)")
    ctx = _MapContext(prob, params, grid)
    if isinstance(init, GridMeasure):
        if not init.grid.same_as(grid):
            raise ContractError("initial measure lives on a different grid")
        rho0 = init.normalize().density
    elif init == "prior":
        rho0 = np.exp(ctx.log_prior)
    elif init == "uniform":
        rho0 = uniform_on_grid(grid).density
    else:
        raise ContractError(f"unknown initialization {init!r}")
    with np.errstate(divide="ignore"):
        log_rho = np.log(rho0)
    if not np.all(np.isfinite(log_rho)):
        raise ContractError("initial density must be positive at every node")

    if params.ratio > continuation_ratio:
        k = min(max_continuation, max(1, math.ceil(math.log2(params.ratio))))
        betas = [params.tau * params.ratio ** (i / k) for i in range(1, k + 1)]
        betas[-1] = params.beta
    else:
        betas = [params.beta]

    trace, total = [], 0
    for b in betas:
        try:
            log_rho, log_Z, res, its = _picard(ctx, log_rho, b, tol, max_iter, damping)
        except SolverError as exc:
            trace.append((b, float("nan")))
            raise SolverError(str(exc), trace) from None
        trace.append((b, res))
        total += its
    mu = GridMeasure(grid, np.exp(log_rho))
    _box_mass_guard(mu)
    return FixedPointSolution(mu, params, log_Z, res, total, trace)


# ---------------------------------------------------------------------------
# bounds and checks
# ---------------------------------------------------------------------------


def verify_theorem1(prob, params, sol):
    """Risk, free energy, entropy and transport of ``mu*`` plus the two hard bounds.

    Raises
    ------
    VerificationError
        If ``R(mu*) > 2 F(mu*)`` or, with a realizable target, if
        ``R(mu*) > (2 tau / beta) D(mu0 || gamma_tau) + 1e-8``.
    """
    mu = sol.mu_star
    risk = risk_of_measure(prob, mu)
    kl = kl_divergence(mu, params.prior)
    F = 0.5 * risk + kl / params.ratio
    report = {
        "beta": params.beta,
        "tau": params.tau,
        "risk": risk,
        "two_F": 2.0 * F,
        "kl": kl,
        "w2_sq": wasserstein2(mu, params.prior) ** 2 if mu.grid.dim == 1 else None,
        "realizable_bound": None,
    }
    if risk > 2.0 * F + 1e-12:
        raise VerificationError(f"R(mu*)={risk:.6e} exceeds 2F(mu*)={2 * F:.6e}")
    if prob.realizable_measure is not None:
        bound = 2.0 * kl_divergence(prob.realizable_measure, params.prior) / params.ratio
        report["realizable_bound"] = bound
        if risk > bound + 1e-8:
            raise VerificationError(f"R(mu*)={risk:.6e} exceeds realizable bound {bound:.6e}")
    return report


def _smooth_field(rng, grid, n_modes=6, amplitude=1.0):
    pts = grid.points
    out = np.zeros(grid.size)
    for k in range(1, n_modes + 1):
        freq = rng.standard_normal(grid.dim) * k / grid.L
        out += amplitude / k * rng.standard_normal() * np.cos(np.pi * pts @ freq + rng.uniform(0, 2 * np.pi))
    return out


def minimality_check(prob, params, sol, n_perturb=500, seed=0, extra=()):
    """Free-energy margins ``F(mu) - F(mu*)`` over structured perturbations of ``mu*``.

    Perturbations are exponential tilts ``normalize(mu* exp(xi))`` by smooth
    random fields of varying amplitude, plus mixtures ``(1 - t) mu* + t nu``
    for ``t in {0.1, 0.3}`` and ``nu`` in gamma_tau, uniform and ``extra``.
    """
    mu = sol.mu_star
    F_star = free_energy(prob, params, mu)
    rng = stream(seed, "minimality")
    margins = []
    for i in range(n_perturb):
        amp = 10.0 ** rng.uniform(-4, 0)
        xi = _smooth_field(rng, mu.grid, amplitude=amp)
        nu = GridMeasure(mu.grid, mu.density * np.exp(xi - xi.max())).normalize()
        margins.append(free_energy(prob, params, nu) - F_star)
    others = [params.prior.on_grid(mu.grid), uniform_on_grid(mu.grid), *extra]
    for nu in others:
        for t in (0.1, 0.3):
            margins.append(free_energy(prob, params, mixture([mu, nu], [1 - t, t])) - F_star)
    margins = np.asarray(margins)
    return {"F_star": F_star, "min_margin": float(margins.min()), "n": margins.size, "margins": margins}


def loglog_slope(x, y):
    """Least-squares slope and R^2 of ``log y`` against ``log x``."""
    lx, ly = np.log(np.asarray(x, float)), np.log(np.asarray(y, float))
    A = np.vstack([lx, np.ones_like(lx)]).T
    coef, *_ = np.linalg.lstsq(A, ly, rcond=None)
    pred = A @ coef
    ss = np.sum((ly - ly.mean()) ** 2)
    r2 = 1.0 - np.sum((ly - pred) ** 2) / ss if ss > 0 else 1.0
    return float(coef[0]), float(r2)


def fit_smoothing_constant(prob, mu, eps_values=(1e-3, 2e-3, 4e-3, 6e-3, 8e-3, 1e-2)):
    """Fit ``|R(mu * gamma_eps) - R(mu)| ~ C eps``; returns ``(C, R^2)`` of the linear fit through 0."""
    base = risk_of_measure(prob, mu)
    eps = np.asarray(eps_values, float)
    diffs = np.array([abs(risk_of_measure(prob, convolve_gaussian(mu, e)) - base) for e in eps])
    C = float(eps @ diffs / (eps @ eps))
    ss = np.sum((diffs - diffs.mean()) ** 2)
    r2 = 1.0 - np.sum((diffs - C * eps) ** 2) / ss if ss > 0 else 1.0
    return C, float(r2)


def free_energy_upper_bound(prob, params, nu, kappa):
    """Candidate-``nu`` value of ``R(nu) + M2(nu) / beta + (tau d / beta) log(2 kappa beta + 1)``."""
    d = params.dim
    return risk_of_measure(prob, nu) + second_moment(nu) / params.beta + (params.tau * d / params.beta) * math.log(
        2.0 * kappa * params.beta + 1.0
    )


# ---------------------------------------------------------------------------
# transport of the prior onto mu*
# ---------------------------------------------------------------------------


class MonotoneMap:
    """Monotone rearrangement ``F_target^{-1} o F_prior`` tabulated on prior quantiles."""

    def __init__(self, x, y):
        y = np.maximum.accumulate(y)
        self._interp = PchipInterpolator(x, y, extrapolate=False)
        self.x, self.y = x, y

    def __call__(self, w):
        w = np.asarray(w, dtype=float)
        out = self._interp(w)
        lo, hi = w < self.x[0], w > self.x[-1]
        out = np.where(lo, w + (self.y[0] - self.x[0]), out)
        out = np.where(hi, w + (self.y[-1] - self.x[-1]), out)
        return out

    def lipschitz(self):
        """Largest difference quotient of the table."""
        return float(np.max(np.diff(self.y) / np.diff(self.x)))


def transport_map_1d(sol, prior=None, n_table=2001, z_max=6.0):
    """Optimal transport map from the prior onto ``mu*`` in one dimension.

    Parameters
    ----------
    sol : FixedPointSolution or GridMeasure
    prior : GaussianPrior, optional
        Defaults to the solution's ``gamma_tau``.
    """
    mu = sol.mu_star if isinstance(sol, FixedPointSolution) else sol
    if prior is None:
        prior = sol.params.prior
    if mu.grid.dim != 1 or prior.dim != 1:
        raise ContractError("transport_map_1d requires one-dimensional measures")
    z = np.linspace(-z_max, z_max, n_table)
    x = z * math.sqrt(prior.tau)
    u = norm.cdf(z)
    y = GridCDF(mu).quantile(u)
    return MonotoneMap(x, y)


def corollary1_experiment(prob, params, sol, N, seed=0, delta=0.05, n_seeds=200, T=None):
    """Networks whose weights are transported Gaussian draws.

    For each of ``n_seeds`` draws ``W ~ gamma_tau^N`` the report records

    * ``risk_norm``: ``||f - fhat_N(T W)||`` in ``L^2(pi)``,
    * ``excess``: ``risk_norm - ||f - fhat(mu*)||``,
    * ``maurey``: ``||fhat_N(T W) - fhat(mu*)||``,
    * ``max_shift``: ``max_i |T W_i - W_i|``,
    * ``vs_init``: ``||fhat_N(T W) - fhat_N(W)||^2``,

    and their empirical ``1 - delta`` quantiles.
    """
    if N < 2:
        raise ContractError("need at least two neurons")
    T = transport_map_1d(sol) if T is None else T
    mu = sol.mu_star
    ref_out = net_output(prob, mu)
    ref_norm = math.sqrt(risk_of_measure(prob, mu))
    pi = prob.weights
    rows = {k: [] for k in ("risk_norm", "excess", "maurey", "max_shift", "vs_init")}
    prior = params.prior
    for s in range(n_seeds):
        W = sample(prior, N, seed, stream_id=s).particles
        TW = T(W)
        out_T = net_output(prob, ParticleEnsemble(TW))
        out_W = net_output(prob, ParticleEnsemble(W))
        rn = math.sqrt(risk_of_ensemble(prob, ParticleEnsemble(TW)))
        rows["risk_norm"].append(rn)
        rows["excess"].append(rn - ref_norm)
        rows["maurey"].append(math.sqrt(pi @ (out_T - ref_out) ** 2))
        rows["max_shift"].append(float(np.max(np.abs(TW - W))))
        rows["vs_init"].append(float(pi @ (out_T - out_W) ** 2))
    report = {"N": N, "beta": params.beta, "tau": params.tau, "delta": delta, "reference_norm": ref_norm}
    for k, v in rows.items():
        v = np.asarray(v)
        report[f"{k}_q"] = float(np.quantile(v, 1.0 - delta))
        report[f"{k}_mean"] = float(v.mean())
    return report


def corollary1_sweep(prob, params_list, N_list, grid_for=None, seed=0, delta=0.05, n_seeds=200):
    """Rows of :func:`corollary1_experiment` over ``params x N`` plus fitted scaling exponents."""
    rows = []
    for params in params_list:
        grid = grid_for(params) if grid_for else None
        sol = solve_boltzmann_fixed_point(prob, params, grid)
        T = transport_map_1d(sol)
        for N in N_list:
            rows.append(corollary1_experiment(prob, params, sol, N, seed, delta, n_seeds, T))
    fits = {}
    if len(N_list) > 1:
        for params in params_list:
            sel = [r for r in rows if r["beta"] == params.beta and r["tau"] == params.tau]
            fits[f"maurey_exponent@beta={params.beta:g}"] = loglog_slope(
                [r["N"] for r in sel], [r["maurey_q"] for r in sel])[0]
    if len(params_list) > 1:
        for N in N_list:
            sel = [r for r in rows if r["N"] == N]
            fits[f"vs_init_beta_slope@N={N}"] = loglog_slope(
                [r["beta"] for r in sel], [r["vs_init_q"] for r in sel])[0]
    return rows, fits


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def save_solution(sol, directory, stem="mu_star"):
    """Write ``<stem>.csv`` (+ grid sidecar) and ``<stem>_solution.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    to_csv(sol.mu_star, directory / f"{stem}.csv")
    meta = {
        "beta": sol.params.beta,
        "tau": sol.params.tau,
        "dim": sol.params.dim,
        "log_Z": sol.log_Z,
        "residual": sol.residual,
        "iterations": sol.iterations,
        "trace": [[b, r] for b, r in sol.trace],
    }
    path = directory / f"{stem}_solution.json"
    tmp = path.with_suffix(".json.tmp")
    tmp.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    tmp.replace(path)
    return path


def load_solution(directory, stem="mu_star"):
    directory = Path(directory)
    meta = json.loads((directory / f"{stem}_solution.json").read_text(encoding="utf-8"))
    mu = from_csv(directory / f"{stem}.csv")
    params = RegularizationParams(meta["beta"], meta["tau"], meta.get("dim", 1))
    return FixedPointSolution(mu, params, meta["log_Z"], meta["residual"], meta["iterations"],
                              [tuple(t) for t in meta.get("trace", [])])
