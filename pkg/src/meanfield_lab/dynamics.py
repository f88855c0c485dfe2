"""Four synchronously coupled weight processes on the unit time interval.

* optimal McKean-Vlasov: ``dW = u(W, t) dt + sqrt(tau) dB`` from ``W_0 = 0``,
* particle dynamics: the drift is ``-beta grad Psi(W^i; empirical law)``, same ``B``,
* gradient descent: the particle drift without noise, started from ``gamma_tau``,
* SGD: one fresh datum per step, started from the same ``gamma_tau`` draw as GD.

Time is discretized with ``eta = 1 / n``.  Brownian increments come from
one counter-based stream per particle, so particle ``i`` sees the same path
whatever ``N`` is, and runs at ``n`` and ``2 n`` steps can share a path.
"""

import csv
import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .measures import ContractError, ParticleEnsemble, wasserstein2
from .problem import feature_grads, features, risk_from_output, risk_of_ensemble
from .rng import stream

__all__ = [
    "SimulationError",
    "CouplingContext",
    "Trajectory",
    "TrajectoryLog",
    "euler_maruyama",
    "interaction_drift",
    "sgd_update",
    "sgd_expected_update",
    "simulate_mkv",
    "simulate_particle",
    "simulate_gd",
    "simulate_sgd",
    "simulate_all",
    "build_log",
    "gap_decomposition",
    "reference_risk_flow",
    "drift_lipschitz_ratio",
]

log = logging.getLogger(__name__)

DRIFT_BLOWUP = 1e6


class SimulationError(RuntimeError):
    """A simulated drift or update became non-finite or exploded."""


@dataclass(frozen=True)
class CouplingContext:
    """Shared randomness for one set of coupled runs.

    Parameters
    ----------
    seed : int
        Master seed.
    N : int
        Number of particles.
    n_steps : int
        Steps on ``[0, 1]``; ``eta = 1 / n_steps``.
    tau : float
        Prior variance (scale of the GD/SGD initialization).
    refine : int
        Increments are drawn at ``n_steps * refine`` substeps and summed, so a
        context with ``(n, refine=2)`` shares its Brownian path with ``(2 n, 1)``.
    decouple : bool
        Debug switch: feed the particle dynamics an independent Brownian path.
    offset : int
        First particle id, used to simulate a large population in chunks.
    """

    seed: int
    N: int
    n_steps: int
    tau: float
    dim: int = 1
    refine: int = 1
    decouple: bool = False
    offset: int = 0

    def __post_init__(self):
        if self.N < 1 or self.n_steps < 1 or self.refine < 1:
            raise ContractError("N, n_steps and refine must be positive integers")

    @property
    def eta(self):
        return 1.0 / self.n_steps

    def times(self, horizon=1.0):
        return horizon * np.arange(self.n_steps + 1) / self.n_steps

    def _increments(self, key):
        fine = self.n_steps * self.refine
        out = np.empty((self.n_steps, self.N, self.dim))
        scale = math.sqrt(1.0 / fine)
        for i in range(self.N):
            z = stream(self.seed, key, self.offset + i).standard_normal((fine, self.dim)) * scale
            out[:, i, :] = z.reshape(self.n_steps, self.refine, self.dim).sum(axis=1)
        return out

    @cached_property
    def brownian(self):
        """``(n_steps, N, d)`` increments with variance ``eta`` (read-only)."""
        inc = self._increments("brownian")
        inc.setflags(write=False)
        return inc

    @cached_property
    def brownian_particle(self):
        if not self.decouple:
            return self.brownian
        inc = self._increments("brownian-decoupled")
        inc.setflags(write=False)
        return inc

    @cached_property
    def init_sample(self):
        """The common ``gamma_tau`` draw for GD and SGD."""
        w = np.empty((self.N, self.dim))
        for i in range(self.N):
            w[i] = stream(self.seed, "init", self.offset + i).standard_normal(self.dim)
        w *= math.sqrt(self.tau)
        w.setflags(write=False)
        return w

    def data_indices(self, prob, epochs=1):
        """Node indices of the SGD data stream, ``X_k ~ pi``, one datum per step."""
        rng = stream(self.seed, "data")
        return rng.choice(prob.weights.size, size=self.n_steps * epochs, p=prob.weights)


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray | None
    terminal: np.ndarray

    def ensemble(self, k):
        return ParticleEnsemble(self.states[k])


def euler_maruyama(x0, drift, increments, step, diffusion, t0=0.0, record=True, on_step=None):
    """Explicit Euler-Maruyama ``x <- x + step * drift(x, t) + diffusion * dB``.

    ``drift`` is evaluated on a read-only snapshot of the whole ensemble.
    ``increments`` has shape ``(n, N, d)``; pass ``None`` for an ODE.
    ``on_step(k, t, x, u)`` is called before each update.
    """
    x = np.array(x0, dtype=float)
    n = len(increments) if increments is not None else None
    if n is None:
        raise ContractError("pass zero increments for deterministic runs")
    states = np.empty((n + 1,) + x.shape) if record else None
    if record:
        states[0] = x
    for k in range(n):
        t = t0 + k * step
        snap = x.copy()
        snap.setflags(write=False)
        u = drift(snap, t)
        if not np.all(np.isfinite(u)) or np.max(np.abs(u), initial=0.0) > DRIFT_BLOWUP:
            raise SimulationError(f"drift blow-up at step {k} (t={t:.6g}); state range [{x.min():.3g}, {x.max():.3g}]")
        if on_step is not None:
            on_step(k, t, snap, u)
        x = x + step * u
        if diffusion != 0.0:
            x = x + diffusion * increments[k]
        if record:
            states[k + 1] = x
    times = t0 + step * np.arange(n + 1)
    return Trajectory(times, states, x)


def interaction_drift(prob, beta, W):
    """``-beta grad Psi(W^i; empirical law of W)`` for every particle."""
    S = features(prob, W)
    G = feature_grads(prob, W)
    pi, f = prob.weights, prob.f_values
    c = pi * (S.mean(axis=1) - f) if prob.interaction else -pi * f
    return -beta * np.einsum("j,jnd->nd", c, G)


def sgd_update(prob, beta, W, j):
    """Direction ``beta (Y - fhat_N(X; W)) grad sigma(X; W^i)`` for the datum at node ``j``."""
    x = prob.nodes[j:j + 1]
    s = prob.activation(x, W)[0]
    g = prob.activation.grad(x, W)[0]
    y = prob.f_values[j]
    resid = y - (s.mean() if prob.interaction else 0.0)
    out = beta * resid * g
    if not np.all(np.isfinite(out)):
        raise SimulationError(f"non-finite SGD update for datum index {j}")
    return out


def sgd_expected_update(prob, beta, W):
    """Average of :func:`sgd_update` over the data nodes, weighted by ``pi``."""
    acc = np.zeros_like(np.asarray(W, dtype=float))
    for j, p in enumerate(prob.weights):
        acc += p * sgd_update(prob, beta, W, j)
    return acc


def simulate_mkv(ctx, drift, params, record=True, on_step=None):
    """Optimal McKean-Vlasov process driven by a tabulated drift field."""
    x0 = np.zeros((ctx.N, ctx.dim))
    return euler_maruyama(x0, drift, ctx.brownian, ctx.eta, math.sqrt(params.tau), record=record, on_step=on_step)


def simulate_particle(ctx, prob, params, record=True):
    """Interacting particles with the mean-field drift, sharing ``B`` with :func:`simulate_mkv`."""
    x0 = np.zeros((ctx.N, ctx.dim))
    beta = params.beta
    return euler_maruyama(x0, lambda w, t: interaction_drift(prob, beta, w), ctx.brownian_particle,
                          ctx.eta, math.sqrt(params.tau), record=record)


def simulate_gd(ctx, prob, params, record=True):
    """Noiseless gradient descent on ``beta R_N / 2`` from the shared Gaussian draw."""
    beta = params.beta
    zero = np.zeros((ctx.n_steps, 1, 1))
    return euler_maruyama(ctx.init_sample, lambda w, t: interaction_drift(prob, beta, w), zero, ctx.eta, 0.0,
                          record=record)


def simulate_sgd(ctx, prob, params, record=True, epochs=1):
    """One-pass SGD; ``epochs > 1`` recycles the stream and is not part of the analysed setting."""
    if epochs != 1:
        log.warning("multi-epoch SGD (epochs=%d) departs from the one-pass setting", epochs)
    idx = ctx.data_indices(prob, epochs)
    beta, eta = params.beta, ctx.eta
    w = np.array(ctx.init_sample, dtype=float)
    n = len(idx)
    states = np.empty((n + 1,) + w.shape) if record else None
    if record:
        states[0] = w
    for k, j in enumerate(idx):
        w = w + eta * sgd_update(prob, beta, w, j)
        if record:
            states[k + 1] = w
    return Trajectory(eta * np.arange(n + 1), states, w)


def simulate_all(ctx, prob, params, drift):
    """The four coupled processes, in the order mkv, particle, gd, sgd."""
    return (
        simulate_mkv(ctx, drift, params),
        simulate_particle(ctx, prob, params),
        simulate_gd(ctx, prob, params),
        simulate_sgd(ctx, prob, params),
    )


# ---------------------------------------------------------------------------
# logging and gap decomposition
# ---------------------------------------------------------------------------


@dataclass
class TrajectoryLog:
    """Append-only per-step record of the four coupled processes."""

    COLUMNS = ("k", "t", "risk_mkv", "risk_particle", "risk_gd", "risk_sgd", "risk_ref",
               "gap1", "gap2", "gap3", "gap4", "maxdist_mkv_particle", "maxdist_gd_sgd")
    rows: list = field(default_factory=list)

    def append(self, row):
        missing = set(self.COLUMNS) - set(row)
        if missing:
            raise ContractError(f"log row is missing {sorted(missing)}")
        if self.rows and row["k"] != self.rows[-1]["k"] + 1:
            raise ContractError("log rows must be appended in step order")
        self.rows.append(dict(row))

    def column(self, name):
        return np.array([r[name] for r in self.rows])

    def __len__(self):
        return len(self.rows)

    def to_csv(self, path):
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        with open(tmp, "w", newline="", encoding="utf-8") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(self.COLUMNS)
            for r in self.rows:
                wr.writerow([r["k"]] + [repr(float(r[c])) for c in self.COLUMNS[1:]])
        tmp.replace(path)
        return path


def _max_dist(a, b):
    return float(np.max(np.linalg.norm(a - b, axis=-1)))


def build_log(prob, trajectories, ref_risks):
    """Per-step risks, the four consecutive gaps and pairwise distances.

    ``trajectories`` is ``(mkv, particle, gd, sgd)`` with recorded states;
    ``ref_risks[k]`` is ``R(mu*_t)`` at ``t = k eta``.
    """
    mkv, par, gd, sgd = trajectories
    n = len(mkv.times)
    if any(len(tr.times) != n for tr in trajectories) or len(ref_risks) != n:
        raise ContractError("trajectories and reference flow must share the time grid")
    out = TrajectoryLog()
    for k in range(n):
        r = [risk_of_ensemble(prob, ParticleEnsemble(tr.states[k])) for tr in trajectories]
        ref = float(ref_risks[k])
        out.append({
            "k": k, "t": float(mkv.times[k]),
            "risk_mkv": r[0], "risk_particle": r[1], "risk_gd": r[2], "risk_sgd": r[3], "risk_ref": ref,
            "gap1": abs(ref - r[0]), "gap2": abs(r[0] - r[1]), "gap3": abs(r[1] - r[2]), "gap4": abs(r[2] - r[3]),
            "maxdist_mkv_particle": _max_dist(mkv.states[k], par.states[k]),
            "maxdist_gd_sgd": _max_dist(gd.states[k], sgd.states[k]),
        })
    return out


def gap_decomposition(log_, ref_risks=None):
    """Running maxima of the four gaps and of the total SGD-vs-optimum gap.

    The step-0 gap (``delta_0`` start versus ``gamma_tau`` start) is reported
    separately as ``initial_gap``.
    """
    if ref_risks is not None and len(ref_risks) != len(log_):
        raise ContractError("reference flow and log lengths differ")
    gaps = np.array([log_.column(f"gap{i}") for i in range(1, 5)])
    total = np.abs(log_.column("risk_ref") - log_.column("risk_sgd"))
    running = np.maximum.accumulate(gaps, axis=1)
    maxima = gaps.max(axis=1)
    if maxima.sum() + 1e-12 < total.max():
        raise AssertionError("triangle inequality violated by the gap decomposition")
    return {
        "max_gaps": maxima.tolist(),
        "running_max": running,
        "total_gap": total,
        "max_total_gap": float(total.max()),
        "initial_gap": float(total[0]),
    }


def reference_risk_flow(prob, marginal_output, t_grid):
    """``R(mu*_t)`` along the optimal flow.

    ``marginal_output(t)`` returns the network output ``fhat(x_j; mu*_t)`` at
    the data nodes; at ``t = 0`` the flow sits at ``delta_0``.
    """
    out = []
    for t in t_grid:
        if t == 0.0:
            fhat = features(prob, np.zeros((1, prob.weight_dim)))[:, 0]
        else:
            fhat = marginal_output(float(t))
        out.append(max(risk_from_output(prob, fhat), 0.0))
    return np.array(out)


def drift_lipschitz_ratio(prob, beta, n_probes=1000, N=16, box=1.0, seed=0):
    """Largest ``|G(w, mu) - G(w', mu')| / (|w - w'| + W2(mu, mu'))`` over random probes.

    ``G(w, mu) = -beta grad Psi(w; mu)`` with ``mu`` an ``N``-particle ensemble.
    """
    rng = stream(seed, "drift-lipschitz", N)
    d = prob.weight_dim
    pi, f = prob.weights, prob.f_values
    best = 0.0
    for _ in range(n_probes):
        ens = rng.uniform(-box, box, size=(2, N, d))
        ens[1] = ens[0] + rng.standard_normal((N, d)) * 10.0 ** rng.uniform(-3, -1)
        w = rng.uniform(-box, box, size=(2, d))
        w[1] = w[0] + rng.standard_normal(d) * 10.0 ** rng.uniform(-3, -1)
        g = []
        for a in range(2):
            fhat = features(prob, ens[a]).mean(axis=1)
            c = pi * (fhat - f) if prob.interaction else -pi * f
            g.append(-beta * np.einsum("j,jd->d", c, feature_grads(prob, w[a:a + 1])[:, 0, :]))
        denom = np.linalg.norm(w[0] - w[1]) + wasserstein2(ParticleEnsemble(ens[0]), ParticleEnsemble(ens[1]))
        best = max(best, float(np.linalg.norm(g[0] - g[1]) / denom))
    return best
