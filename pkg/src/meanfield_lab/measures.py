"""Probability measures on weight space and the distances between them.

Three representations are used throughout the package:

* :class:`GridMeasure` -- a density tabulated on a uniform 1D/2D grid, the
  workhorse for anything that has to be integrated accurately (the optimum,
  the prior, bridge marginals);
* :class:`GaussianPrior` -- the centered isotropic Gaussian with variance
  ``tau``, evaluated in closed form;
* :class:`ParticleEnsemble` -- ``N`` weight vectors, i.e. a finite network or
  an empirical measure.

All integrals over grid measures use the trapezoid rule with the grid's
weights, so that every quantity computed on a given grid (risk, KL, the
fixed-point map) is consistent with every other one.
"""

import csv
import json
import logging
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.ndimage import convolve1d
from scipy.optimize import linear_sum_assignment

from .rng import stream

__all__ = [
    "ContractError",
    "SupportError",
    "Grid",
    "GridMeasure",
    "GaussianPrior",
    "ParticleEnsemble",
    "GridCDF",
    "gaussian_on_grid",
    "gaussian_mixture_on_grid",
    "uniform_on_grid",
    "delta_on_grid",
    "mixture",
    "kl_divergence",
    "wasserstein2",
    "second_moment",
    "differential_entropy",
    "fisher_information",
    "convolve_gaussian",
    "sample",
    "to_csv",
    "from_csv",
]

log = logging.getLogger(__name__)

NORMALIZATION_TOL = 1e-9
N_QUANTILES = 4096


class ContractError(ValueError):
    """A measure violates a precondition (not normalized, wrong dimension...)."""


class SupportError(ValueError):
    """The reference measure vanishes where the measure has mass."""


# ---------------------------------------------------------------------------
# representations
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Grid:
    """Uniform tensor grid on the box ``[-L, L]^dim`` with ``n`` nodes per axis."""

    L: float
    n: int
    dim: int = 1

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise ContractError(f"grid dimension must be 1 or 2, got {self.dim}")
        if not (np.isfinite(self.L) and self.L > 0):
            raise ContractError("grid half-width L must be positive")
        if self.n < 3:
            raise ContractError("grid needs at least 3 nodes per axis")

    @classmethod
    def uniform(cls, L, h, dim=1):
        """Grid on ``[-L, L]^dim`` with spacing as close to ``h`` as possible (never coarser)."""
        n = int(np.ceil(2.0 * L / h - 1e-9)) + 1
        return cls(float(L), n, dim)

    @property
    def h(self):
        return 2.0 * self.L / (self.n - 1)

    @property
    def size(self):
        return self.n**self.dim

    @property
    def shape(self):
        return (self.n,) * self.dim

    @cached_property
    def axis(self):
        return np.linspace(-self.L, self.L, self.n)

    @cached_property
    def points(self):
        if self.dim == 1:
            return self.axis[:, None]
        xx, yy = np.meshgrid(self.axis, self.axis, indexing="ij")
        return np.column_stack([xx.ravel(), yy.ravel()])

    @cached_property
    def weights(self):
        w1 = np.full(self.n, self.h)
        w1[0] = w1[-1] = 0.5 * self.h
        if self.dim == 1:
            return w1
        return np.outer(w1, w1).ravel()

    def same_as(self, other):
        return self.dim == other.dim and self.n == other.n and self.L == other.L

    def integrate(self, values):
        return float(self.weights @ values)


@dataclass(frozen=True, eq=False)
class GridMeasure:
    """Density values at the nodes of a :class:`Grid` (flattened, ``ij`` order)."""

    grid: Grid
    density: np.ndarray

    def __post_init__(self):
        rho = np.array(self.density, dtype=float).ravel()
        if rho.size != self.grid.size:
            raise ContractError(f"density has {rho.size} values, grid has {self.grid.size} nodes")
        if not np.all(np.isfinite(rho)):
            raise ContractError("density contains non-finite values")
        if np.any(rho < 0):
            raise ContractError("density must be non-negative")
        rho.setflags(write=False)
        object.__setattr__(self, "density", rho)

    @classmethod
    def from_function(cls, grid, fn, normalize=True):
        mu = cls(grid, fn(grid.points))
        return mu.normalize() if normalize else mu

    @property
    def dim(self):
        return self.grid.dim

    @property
    def mass(self):
        return self.grid.integrate(self.density)

    @property
    def normalized(self):
        return abs(self.mass - 1.0) <= NORMALIZATION_TOL

    @property
    def masses(self):
        """Quadrature masses ``omega_g * rho_g`` (sum to one when normalized)."""
        return self.grid.weights * self.density

    def normalize(self):
        m = self.mass
        if not m > 0:
            raise ContractError("cannot normalize a measure with zero mass")
        return GridMeasure(self.grid, self.density / m)

    def expect(self, values):
        """Integral of tabulated ``values`` against the measure."""
        return float(self.masses @ values)

    def mean(self):
        return self.masses @ self.grid.points


@dataclass(frozen=True)
class GaussianPrior:
    """Centered Gaussian ``N(0, tau I_d)``."""

    tau: float
    dim: int = 1

    def __post_init__(self):
        if not (np.isfinite(self.tau) and self.tau > 0):
            raise ContractError("prior variance tau must be positive and finite")

    def logpdf(self, points):
        points = np.atleast_2d(points)
        sq = np.sum(points**2, axis=1)
        return -0.5 * sq / self.tau - 0.5 * self.dim * np.log(2 * np.pi * self.tau)

    def pdf(self, points):
        return np.exp(self.logpdf(points))

    def on_grid(self, grid):
        if grid.dim != self.dim:
            raise ContractError("prior and grid dimensions differ")
        return GridMeasure(grid, self.pdf(grid.points)).normalize()


@dataclass(frozen=True, eq=False)
class ParticleEnsemble:
    """``N`` weight vectors in ``R^d``; the empirical measure puts mass ``1/N`` on each."""

    particles: np.ndarray
    lineage: str | None = field(default=None)

    def __post_init__(self):
        w = np.array(self.particles, dtype=float)
        if w.ndim == 1:
            w = w[:, None]
        if w.ndim != 2 or w.shape[0] < 1:
            raise ContractError("ensemble needs at least one particle")
        if not np.all(np.isfinite(w)):
            raise ContractError("ensemble contains non-finite coordinates")
        w.setflags(write=False)
        object.__setattr__(self, "particles", w)

    @property
    def N(self):
        return self.particles.shape[0]

    @property
    def dim(self):
        return self.particles.shape[1]


def gaussian_on_grid(grid, mean, var):
    mean = np.broadcast_to(np.asarray(mean, dtype=float), (grid.dim,))
    sq = np.sum((grid.points - mean) ** 2, axis=1)
    return GridMeasure(grid, np.exp(-0.5 * sq / var)).normalize()


def gaussian_mixture_on_grid(grid, means, var, weights=None):
    """Mixture of isotropic Gaussians, truncated to the box and renormalized."""
    means = np.atleast_1d(np.asarray(means, dtype=float))
    if weights is None:
        weights = np.full(len(means), 1.0 / len(means))
    rho = np.zeros(grid.size)
    for m, a in zip(means, weights):
        m = np.broadcast_to(m, (grid.dim,))
        sq = np.sum((grid.points - m) ** 2, axis=1)
        rho += a * np.exp(-0.5 * sq / var) / (2 * np.pi * var) ** (grid.dim / 2)
    return GridMeasure(grid, rho).normalize()


def uniform_on_grid(grid):
    return GridMeasure(grid, np.ones(grid.size)).normalize()


def delta_on_grid(grid, w0):
    """All mass on the node nearest to ``w0``."""
    k = int(np.argmin(np.sum((grid.points - np.asarray(w0, dtype=float)) ** 2, axis=1)))
    rho = np.zeros(grid.size)
    rho[k] = 1.0 / grid.weights[k]
    return GridMeasure(grid, rho)


def mixture(measures, weights):
    grid = measures[0].grid
    if any(not m.grid.same_as(grid) for m in measures):
        raise ContractError("mixture components must share a grid")
    rho = sum(a * m.density for a, m in zip(weights, measures))
    return GridMeasure(grid, rho)


def _require_normalized(mu):
    if isinstance(mu, GridMeasure) and not mu.normalized:
        raise ContractError(f"measure is not normalized (mass {mu.mass:.12g})")


def _reference_on(mu, ref):
    if isinstance(ref, GaussianPrior):
        if ref.dim != mu.dim:
            raise ContractError("prior and measure dimensions differ")
        logq = ref.logpdf(mu.grid.points)
        logq = logq - np.log(mu.grid.integrate(np.exp(logq)))
        return logq
    if not ref.grid.same_as(mu.grid):
        raise ContractError("reference measure lives on a different grid")
    _require_normalized(ref)
    with np.errstate(divide="ignore"):
        return np.log(ref.density)


# ---------------------------------------------------------------------------
# divergences and moments
# ---------------------------------------------------------------------------


def kl_divergence(mu, prior):
    """Relative entropy ``D(mu || prior)`` by the trapezoid rule (``0 log 0 = 0``).

    A Gaussian prior is discretized on ``mu``'s grid and renormalized there, so
    the result is the KL divergence between two normalized discrete measures
    and hence non-negative up to round-off.
    """
    _require_normalized(mu)
    logq = _reference_on(mu, prior)
    rho = mu.density
    pos = rho > 0
    bad = pos & ~np.isfinite(logq)
    if np.any(bad):
        k = int(np.flatnonzero(bad)[0])
        raise SupportError(f"reference density underflows at node {mu.grid.points[k]} where mu has mass")
    terms = np.zeros_like(rho)
    terms[pos] = rho[pos] * (np.log(rho[pos]) - logq[pos])
    return mu.grid.integrate(terms)


def differential_entropy(mu):
    """``-int rho log rho`` for a grid measure."""
    _require_normalized(mu)
    rho = mu.density
    pos = rho > 0
    terms = np.zeros_like(rho)
    terms[pos] = rho[pos] * np.log(rho[pos])
    return -mu.grid.integrate(terms)


def second_moment(mu):
    """``int ||w||^2 dmu``."""
    if isinstance(mu, GaussianPrior):
        return mu.tau * mu.dim
    if isinstance(mu, ParticleEnsemble):
        return float(np.mean(np.sum(mu.particles**2, axis=1)))
    _require_normalized(mu)
    return mu.expect(np.sum(mu.grid.points**2, axis=1))


def fisher_information(mu, prior):
    """Relative Fisher information ``I(mu || prior) = int ||grad log(dmu/dprior)||^2 dmu``.

    Gradients by centered differences, second-order one-sided at the box edges.
    """
    _require_normalized(mu)
    if np.any(mu.density <= 0):
        raise SupportError("Fisher information needs a strictly positive density")
    logq = _reference_on(mu, prior)
    F = (np.log(mu.density) - logq).reshape(mu.grid.shape)
    grads = np.gradient(F, mu.grid.h, edge_order=2)
    if mu.dim == 1:
        grads = [grads]
    sq = sum(g.ravel() ** 2 for g in grads)
    return mu.expect(sq)


# ---------------------------------------------------------------------------
# one-dimensional distribution functions
# ---------------------------------------------------------------------------


class GridCDF:
    """Distribution and quantile function of a 1D grid measure.

    The density is interpolated by a cubic spline; its antiderivative gives the
    CDF, and quantiles are found by safeguarded Newton iteration, so both are
    accurate to O(h^4) for smooth densities.
    """

    def __init__(self, mu):
        if mu.dim != 1:
            raise ContractError("GridCDF needs a 1D grid measure")
        x = mu.grid.axis
        self.x = x
        self._pdf = CubicSpline(x, mu.density)
        self._F = self._pdf.antiderivative()
        self.total = float(self._F(x[-1]) - self._F(x[0]))
        self._F0 = float(self._F(x[0]))
        Fn = (self._F(x) - self._F0) / self.total
        self.F_nodes = np.maximum.accumulate(np.clip(Fn, 0.0, 1.0))

    def cdf(self, w):
        w = np.asarray(w, dtype=float)
        out = (self._F(np.clip(w, self.x[0], self.x[-1])) - self._F0) / self.total
        return np.clip(out, 0.0, 1.0)

    def pdf(self, w):
        w = np.asarray(w, dtype=float)
        inside = (w >= self.x[0]) & (w <= self.x[-1])
        return np.where(inside, self._pdf(np.clip(w, self.x[0], self.x[-1])) / self.total, 0.0)

    def quantile(self, u, max_iter=60):
        u = np.asarray(u, dtype=float)
        shape = u.shape
        u = u.ravel()
        x, Fn = self.x, self.F_nodes
        idx = np.clip(np.searchsorted(Fn, u, side="right") - 1, 0, len(x) - 2)
        lo, hi = x[idx].copy(), x[idx + 1].copy()
        dF = Fn[idx + 1] - Fn[idx]
        frac = np.where(dF > 0, (u - Fn[idx]) / np.where(dF > 0, dF, 1.0), 0.5)
        q = lo + np.clip(frac, 0.0, 1.0) * (hi - lo)
        for _ in range(max_iter):
            val = self.cdf(q) - u
            hi = np.where(val > 0, q, hi)
            lo = np.where(val <= 0, q, lo)
            p = self._pdf(q) / self.total
            with np.errstate(divide="ignore", invalid="ignore"):
                step = q - val / p
            ok = (p > 0) & (step > lo) & (step < hi)
            q_new = np.where(ok, step, 0.5 * (lo + hi))
            if np.max(np.abs(q_new - q)) <= 1e-15 * max(1.0, self.x[-1]):
                q = q_new
                break
            q = q_new
        return q.reshape(shape)


def _midpoint_quantiles(n):
    return (np.arange(n) + 0.5) / n


def _ensemble_quantile_1d(ens, u):
    xs = np.sort(ens.particles[:, 0])
    k = np.clip(np.ceil(u * ens.N).astype(int) - 1, 0, ens.N - 1)
    return xs[k]


def _w2_empirical_1d(a, b):
    """Exact W2 between two 1D empirical measures of arbitrary sizes."""
    xa, xb = np.sort(a[:, 0]), np.sort(b[:, 0])
    na, nb = len(xa), len(xb)
    if na == nb:
        return float(np.sqrt(np.mean((xa - xb) ** 2)))
    u = np.union1d(np.arange(1, na + 1) / na, np.arange(1, nb + 1) / nb)
    du = np.diff(np.concatenate([[0.0], u]))
    mid = u - 0.5 * du
    qa = xa[np.clip(np.ceil(mid * na).astype(int) - 1, 0, na - 1)]
    qb = xb[np.clip(np.ceil(mid * nb).astype(int) - 1, 0, nb - 1)]
    return float(np.sqrt(np.sum(du * (qa - qb) ** 2)))


def wasserstein2(mu, nu, n_quantiles=N_QUANTILES):
    """Quadratic Wasserstein distance ``W2(mu, nu)``.

    * 1D grid measures (or a grid measure against a Gaussian prior or a 1D
      ensemble): midpoint rule over ``n_quantiles`` quantile levels of
      ``(F_mu^{-1} - F_nu^{-1})^2``.
    * 1D ensembles: exact, any sizes.
    * equal-size ensembles in ``d <= 3`` with ``N <= 512``: optimal assignment.
    """
    if isinstance(mu, GaussianPrior) and isinstance(nu, GridMeasure):
        mu, nu = nu, mu
    if isinstance(nu, GaussianPrior):
        if not isinstance(mu, GridMeasure):
            raise ContractError("a Gaussian prior can only be compared with a grid measure")
        nu = nu.on_grid(mu.grid)
    if mu.dim != nu.dim:
        raise ContractError("measures live in different dimensions")

    if isinstance(mu, ParticleEnsemble) and isinstance(nu, ParticleEnsemble):
        if mu.dim == 1:
            return _w2_empirical_1d(mu.particles, nu.particles)
        if mu.N == nu.N and mu.dim <= 3 and mu.N <= 512:
            cost = np.sum((mu.particles[:, None, :] - nu.particles[None, :, :]) ** 2, axis=2)
            r, c = linear_sum_assignment(cost)
            return float(np.sqrt(cost[r, c].mean()))
        raise ContractError(f"unsupported ensemble sizes/dimension for W2: N={mu.N}, M={nu.N}, d={mu.dim}")

    if mu.dim != 1:
        raise ContractError("W2 between grid measures is only supported in 1D")
    u = _midpoint_quantiles(n_quantiles)
    qs = []
    for m in (mu, nu):
        if isinstance(m, GridMeasure):
            _require_normalized(m)
            qs.append(GridCDF(m).quantile(u))
        else:
            qs.append(_ensemble_quantile_1d(m, u))
    return float(np.sqrt(np.mean((qs[0] - qs[1]) ** 2)))


# ---------------------------------------------------------------------------
# smoothing and sampling
# ---------------------------------------------------------------------------


def convolve_gaussian(mu, eps):
    """Density of ``mu * gamma_eps`` on the same grid, renormalized.

    The kernel is the variance-``eps`` Gaussian sampled at the grid offsets and
    normalized to unit sum; mass pushed outside the box is discarded before
    renormalizing.  For ``eps < h^2/10`` the kernel is under-resolved and
    ``mu`` is returned unchanged with a warning.
    """
    if not eps > 0:
        raise ContractError("convolution variance must be positive")
    h = mu.grid.h
    if eps < h * h / 10:
        warnings.warn(f"eps={eps:g} < h^2/10={h * h / 10:g}: kernel under-resolved, returning input", stacklevel=2)
        return mu
    half = int(np.ceil(10 * np.sqrt(eps) / h))
    offs = np.arange(-half, half + 1) * h
    kern = np.exp(-0.5 * offs**2 / eps)
    kern /= kern.sum()
    rho = mu.density.reshape(mu.grid.shape)
    for ax in range(mu.dim):
        rho = convolve1d(rho, kern, axis=ax, mode="constant", cval=0.0)
    return GridMeasure(mu.grid, np.clip(rho.ravel(), 0.0, None)).normalize()


def sample(source, n, seed, stream_id=0):
    """Draw ``n`` particles from a prior or a grid measure (inverse CDF).

    Deterministic in ``(seed, stream_id)``.  2D grid measures are sampled by
    drawing the first coordinate from its marginal and the second from the
    conditional density interpolated linearly between the bracketing columns.
    """
    n = int(n)
    if n <= 0:
        raise ContractError("sample size must be positive")
    rng = stream(seed, "sample", stream_id)
    tag = f"{seed}:{stream_id}"
    if isinstance(source, GaussianPrior):
        return ParticleEnsemble(np.sqrt(source.tau) * rng.standard_normal((n, source.dim)), tag)
    _require_normalized(source)
    if source.dim == 1:
        u = rng.random(n)
        return ParticleEnsemble(GridCDF(source).quantile(u)[:, None], tag)

    g = source.grid
    line = Grid(g.L, g.n, 1)
    rho = source.density.reshape(g.shape)
    col_mass = rho @ line.weights
    marginal = GridMeasure(line, col_mass).normalize()
    ux, uc, uy = rng.random(n), rng.random(n), rng.random(n)
    x = GridCDF(marginal).quantile(ux)
    pos = (x - g.axis[0]) / g.h
    i = np.clip(np.floor(pos).astype(int), 0, g.n - 2)
    lam = np.clip(pos - i, 0.0, 1.0)
    # the linearly interpolated conditional is a two-column mixture
    a, b = (1 - lam) * col_mass[i], lam * col_mass[i + 1]
    col = np.where(uc * (a + b) < a, i, i + 1)
    y = np.empty(n)
    for k in np.unique(col):
        sel = col == k
        if col_mass[k] > 0:
            y[sel] = GridCDF(GridMeasure(line, rho[k]).normalize()).quantile(uy[sel])
        else:
            y[sel] = g.axis[0] + uy[sel] * 2 * g.L
    return ParticleEnsemble(np.column_stack([x, y]), tag)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def to_csv(mu, path):
    """Write ``node,density`` (1D) or ``node_x,node_y,density`` (2D) plus a JSON sidecar."""
    path = Path(path)
    header = ["node", "density"] if mu.dim == 1 else ["node_x", "node_y", "density"]
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(header)
        for p, r in zip(mu.grid.points, mu.density):
            wr.writerow([repr(float(c)) for c in p] + [repr(float(r))])
    tmp.replace(path)
    meta = {"dim": mu.dim, "h": mu.grid.h, "L": mu.grid.L, "normalized": bool(mu.normalized)}
    side = path.with_suffix(".json")
    tmp = side.with_name(side.name + ".tmp")
    tmp.write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    tmp.replace(side)
    return path


def from_csv(path):
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text(encoding="utf-8"))
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    dim = int(meta["dim"])
    n = int(round(data.shape[0] ** (1.0 / dim)))
    grid = Grid(float(meta["L"]), n, dim)
    if not np.allclose(grid.points, data[:, :dim], rtol=0, atol=1e-12 * grid.L):
        raise ContractError(f"{path}: node coordinates do not form the declared uniform grid")
    return GridMeasure(grid, data[:, dim])
