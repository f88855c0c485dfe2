"""The approximation problem: target ``f``, activation ``sigma``, data measure ``pi``.

The data measure is a fixed set of quadrature nodes ``x_j`` with weights
``pi_j``.  Everything the mean-field theory needs reduces to three kernels,

    R0        = E_pi[f(X)^2]
    f~(w)     = -E_pi[f(X) sigma(X; w)]
    K(w, w')  =  E_pi[sigma(X; w) sigma(X; w')]

and the potential ``Psi(w; mu) = f~(w) + int K(w, v) mu(dv)``.  Because ``K``
factorizes through the data nodes, integrals against a measure are computed
from the network output at the nodes, ``fhat_j(mu) = int sigma(x_j; v) mu(dv)``:

    int K(w, v) mu(dv) = sum_j pi_j sigma(x_j; w) fhat_j(mu).
"""

import logging
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from numpy.polynomial.legendre import leggauss

from .measures import ContractError, Grid, GridMeasure, ParticleEnsemble, gaussian_mixture_on_grid
from .rng import stream

__all__ = [
    "EvaluationError",
    "TanhActivation",
    "GaussBumpActivation",
    "ProblemInstance",
    "KernelCache",
    "RegularityReport",
    "gauss_legendre_nodes",
    "sine_problem",
    "realizable_problem",
    "build_problem",
    "features",
    "feature_grads",
    "net_output",
    "eval_f_tilde",
    "grad_f_tilde",
    "eval_K",
    "grad1_K",
    "eval_Psi",
    "potential_coefficients",
    "grad_Psi",
    "risk_from_output",
    "risk_of_measure",
    "risk_of_ensemble",
    "check_regularity",
    "fit_risk_lipschitz",
]

log = logging.getLogger(__name__)

RISK_CLAMP = 1e-10


class EvaluationError(ArithmeticError):
    """An activation or kernel evaluation produced a non-finite value."""


class TanhActivation:
    """``sigma(x; w) = tanh(<w, x>)`` (requires ``p == d``)."""

    name = "tanh"

    def __call__(self, X, W):
        return np.tanh(X @ W.T)

    def grad(self, X, W):
        t = np.tanh(X @ W.T)
        return (1.0 - t * t)[:, :, None] * X[:, None, :]


class GaussBumpActivation:
    """``sigma(x; w) = exp(-||x - w||^2 / (2 s^2))`` (requires ``p == d``)."""

    name = "gauss-bump"

    def __init__(self, width=0.5):
        self.width = float(width)

    def __call__(self, X, W):
        sq = np.sum((X[:, None, :] - W[None, :, :]) ** 2, axis=2)
        return np.exp(-0.5 * sq / self.width**2)

    def grad(self, X, W):
        diff = X[:, None, :] - W[None, :, :]
        s = np.exp(-0.5 * np.sum(diff**2, axis=2) / self.width**2)
        return s[:, :, None] * diff / self.width**2


ACTIVATIONS = {"tanh": TanhActivation, "gauss-bump": GaussBumpActivation}


def gauss_legendre_nodes(order, dim=1):
    """Gauss-Legendre nodes on ``[-1, 1]^dim`` with weights normalized to a probability."""
    x, w = leggauss(order)
    w = w / w.sum()
    if dim == 1:
        return x[:, None], w
    grids = np.meshgrid(*([x] * dim), indexing="ij")
    nodes = np.column_stack([g.ravel() for g in grids])
    weights = np.ones(1)
    for _ in range(dim):
        weights = np.outer(weights, w).ravel()
    return nodes, weights


@dataclass(frozen=True, eq=False)
class ProblemInstance:
    """A target/activation/data triple plus the declared regularity constants.

    ``target`` maps an ``(J, p)`` array of inputs to ``(J,)`` values.  Setting
    ``interaction=False`` drops the ``K`` term everywhere (the potential reduces
    to ``f~``), which is only useful as a degenerate test case.
    """

    nodes: np.ndarray
    weights: np.ndarray
    target: object
    activation: object
    bound_kappa1: float
    lip_kappa2: float
    weight_dim: int = 1
    interaction: bool = True
    name: str = ""
    realizable_measure: GridMeasure | None = field(default=None)

    def __post_init__(self):
        nodes = np.atleast_2d(np.asarray(self.nodes, dtype=float))
        if nodes.shape[0] == 1 and nodes.shape[1] > 1 and np.ndim(self.nodes) == 1:
            nodes = nodes.T
        pi = np.asarray(self.weights, dtype=float)
        if np.any(pi < 0) or abs(pi.sum() - 1.0) > 1e-12:
            raise ContractError("data weights must be non-negative and sum to one")
        if nodes.shape[0] != pi.size:
            raise ContractError("one weight per data node required")
        if self.bound_kappa1 <= 0 or self.lip_kappa2 <= 0:
            raise ContractError("declared regularity constants must be positive")
        nodes.setflags(write=False)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "weights", pi)

    @property
    def input_dim(self):
        return self.nodes.shape[1]

    @cached_property
    def f_values(self):
        f = np.asarray(self.target(self.nodes), dtype=float).reshape(-1)
        if not np.all(np.isfinite(f)):
            raise EvaluationError("target is not finite at every data node")
        return f

    @cached_property
    def R0(self):
        return float(self.weights @ self.f_values**2)

    def without_interaction(self):
        return ProblemInstance(
            self.nodes, self.weights, self.target, self.activation, self.bound_kappa1,
            self.lip_kappa2, self.weight_dim, False, self.name + "/no-K", self.realizable_measure,
        )


# ---------------------------------------------------------------------------
# presets
# ---------------------------------------------------------------------------


def sine_problem(frequency=1.0, quadrature_order=32, activation="tanh", dim=1):
    """Non-realizable target ``sin(frequency * pi * x_1)`` on ``[-1, 1]^dim``."""
    nodes, weights = gauss_legendre_nodes(quadrature_order, dim)
    act = ACTIVATIONS[activation]()
    return ProblemInstance(
        nodes, weights, lambda X: np.sin(frequency * np.pi * X[:, 0]), act,
        bound_kappa1=1.0, lip_kappa2=2.0 * dim if activation == "tanh" else 8.0,
        weight_dim=dim, name=f"sine({frequency})",
    )


REALIZABLE_WEIGHTS = (0.25, 0.75)


def realizable_problem(grid=None, means=(-1.0, 1.0), variance=0.05, mix_weights=REALIZABLE_WEIGHTS,
                       quadrature_order=32, activation="tanh"):
    """Target ``f = fhat(.; mu0)`` for a Gaussian mixture ``mu0`` truncated to ``grid``.

    ``mu0`` is integrated with the grid's trapezoid rule, so on that grid
    ``R(mu0)`` vanishes to round-off.  The mixture weights default to an
    unequal split: with an odd activation, a symmetric mixture produces ``f = 0``.
    """
    if grid is None:
        grid = Grid.uniform(3.0, 0.0125)
    mu0 = gaussian_mixture_on_grid(grid, list(means), variance, mix_weights)
    act = ACTIVATIONS[activation]()
    pts, masses = grid.points, mu0.masses

    def target(X):
        return act(np.atleast_2d(X), pts) @ masses

    nodes, weights = gauss_legendre_nodes(quadrature_order)
    return ProblemInstance(
        nodes, weights, target, act, bound_kappa1=1.0, lip_kappa2=2.0 if activation == "tanh" else 8.0,
        name="realizable", realizable_measure=mu0,
    )


def build_problem(spec, grid=None):
    """Problem from the ``problem`` block of an experiment config."""
    act = spec.get("activation", "tanh")
    order = int(spec.get("quadrature_order", 32))
    target = spec.get("target", {"kind": "sine"})
    kind = target.get("kind", "sine")
    if kind == "sine":
        return sine_problem(float(target.get("frequency", 1.0)), order, act, int(spec.get("dim", 1)))
    if kind == "realizable":
        return realizable_problem(
            grid, tuple(target.get("means", (-1.0, 1.0))), float(target.get("variance", 0.05)),
            target.get("weights", REALIZABLE_WEIGHTS), order, act,
        )
    raise ContractError(f"unknown target kind {kind!r}")


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------


def _as_points(w, d):
    w = np.asarray(w, dtype=float)
    single = w.ndim <= 1 and (w.size == d)
    W = w.reshape(-1, d)
    if not np.all(np.isfinite(W)):
        raise EvaluationError("weight argument is not finite")
    return W, single


def features(prob, W):
    """``sigma(x_j; W_m)`` as a ``(J, M)`` array."""
    S = prob.activation(prob.nodes, W)
    if not np.all(np.isfinite(S)):
        j, m = np.argwhere(~np.isfinite(S))[0]
        raise EvaluationError(f"activation not finite at data node x={prob.nodes[j]} for w={W[m]}")
    return S


def feature_grads(prob, W):
    """``grad_w sigma(x_j; W_m)`` as a ``(J, M, d)`` array."""
    G = prob.activation.grad(prob.nodes, W)
    if not np.all(np.isfinite(G)):
        j, m = np.argwhere(~np.isfinite(G).any(axis=2))[0]
        raise EvaluationError(f"activation gradient not finite at data node x={prob.nodes[j]} for w={W[m]}")
    return G


def _sorted_particles(ens):
    w = ens.particles
    order = np.lexsort(w.T[::-1])
    return w[order]


def net_output(prob, mu):
    """``fhat(x_j; mu)`` at the data nodes for a grid measure or an ensemble."""
    if isinstance(mu, GridMeasure):
        if not mu.normalized:
            raise ContractError(f"measure is not normalized (mass {mu.mass:.12g})")
        return features(prob, mu.grid.points) @ mu.masses
    if isinstance(mu, ParticleEnsemble):
        # sorted so the value does not depend on particle order
        return features(prob, _sorted_particles(mu)).mean(axis=1)
    raise TypeError(f"unsupported measure type {type(mu).__name__}")


def eval_f_tilde(prob, w):
    W, single = _as_points(w, prob.weight_dim)
    val = -(prob.weights * prob.f_values) @ features(prob, W)
    return float(val[0]) if single else val


def grad_f_tilde(prob, w):
    W, single = _as_points(w, prob.weight_dim)
    g = -np.einsum("j,jmd->md", prob.weights * prob.f_values, feature_grads(prob, W))
    return g[0] if single else g


def eval_K(prob, w, w2):
    """``K(w, w2)``; symmetric bit-for-bit since each summand is ``pi_j * (s_j * s'_j)``."""
    W1, single = _as_points(w, prob.weight_dim)
    W2, _ = _as_points(w2, prob.weight_dim)
    if not prob.interaction:
        out = np.zeros((W1.shape[0], W2.shape[0]))
    else:
        S1, S2 = features(prob, W1), features(prob, W2)
        out = np.einsum("j,jab->ab", prob.weights, S1[:, :, None] * S2[:, None, :])
    return float(out[0, 0]) if single and out.size == 1 else out


def grad1_K(prob, w, w2):
    """Gradient of ``K`` in its first argument."""
    W1, single = _as_points(w, prob.weight_dim)
    W2, _ = _as_points(w2, prob.weight_dim)
    if not prob.interaction:
        out = np.zeros((W1.shape[0], W2.shape[0], prob.weight_dim))
    else:
        G1, S2 = feature_grads(prob, W1), features(prob, W2)
        out = np.einsum("j,jad,jb->abd", prob.weights, G1, S2)
    return out[0, 0] if single and out.shape[:2] == (1, 1) else out


def potential_coefficients(prob, mu):
    """Per-node coefficients ``c_j`` with ``Psi(w; mu) = sum_j c_j sigma(x_j; w)``."""
    c = -prob.weights * prob.f_values
    if prob.interaction:
        c = c + prob.weights * net_output(prob, mu)
    return c


def eval_Psi(prob, w, mu):
    """Potential ``Psi(w; mu) = f~(w) + int K(w, v) mu(dv)``."""
    W, single = _as_points(w, prob.weight_dim)
    val = potential_coefficients(prob, mu) @ features(prob, W)
    return float(val[0]) if single else val


def grad_Psi(prob, w, mu):
    """Analytic ``grad_w Psi(w; mu)``."""
    W, single = _as_points(w, prob.weight_dim)
    g = np.einsum("j,jmd->md", potential_coefficients(prob, mu), feature_grads(prob, W))
    return g[0] if single else g


def _clamped(value, what):
    if value < 0:
        if value < -RISK_CLAMP:
            raise EvaluationError(f"{what} is negative beyond quadrature slack: {value:.3e}")
        log.info("clamping %s = %.3e to 0 (quadrature round-off)", what, value)
        return 0.0
    return value


def risk_from_output(prob, fhat):
    """Risk expanded through the kernels, given the network output at the data nodes."""
    pi, f = prob.weights, prob.f_values
    linear = -2.0 * float((pi * f) @ fhat)  # 2 * int f~ dmu
    quad = float(pi @ (fhat * fhat)) if prob.interaction else 0.0  # int int K dmu dmu
    return prob.R0 + linear + quad


def risk_of_measure(prob, mu):
    """``R(mu) = R0 + 2 int f~ dmu + int int K d(mu x mu)``."""
    return _clamped(risk_from_output(prob, net_output(prob, mu)), "R(mu)")


def risk_of_ensemble(prob, ens):
    """``R_N(w) = R(empirical measure of w)``; invariant under permutations bit-for-bit."""
    if not isinstance(ens, ParticleEnsemble):
        ens = ParticleEnsemble(ens)
    return _clamped(risk_from_output(prob, net_output(prob, ens)), "R_N(w)")


@dataclass(frozen=True, eq=False)
class KernelCache:
    """``f~``, ``K`` and their gradients tabulated on a (1D or small) grid."""

    grid: Grid
    f_tilde_values: np.ndarray
    K_values: np.ndarray
    grad_f_tilde: np.ndarray
    grad1_K: np.ndarray

    @classmethod
    def build(cls, prob, grid):
        pts = grid.points
        S, G = features(prob, pts), feature_grads(prob, pts)
        pi, f = prob.weights, prob.f_values
        f_t = -(pi * f) @ S
        if prob.interaction:
            K = (S * pi[:, None]).T @ S
            K = 0.5 * (K + K.T)
            g1 = np.einsum("j,jad,jb->abd", pi, G, S)
        else:
            K = np.zeros((grid.size, grid.size))
            g1 = np.zeros((grid.size, grid.size, prob.weight_dim))
        gf = -np.einsum("j,jmd->md", pi * f, G)
        for arr in (f_t, K, gf, g1):
            arr.setflags(write=False)
        return cls(grid, f_t, K, gf, g1)


# ---------------------------------------------------------------------------
# regularity
# ---------------------------------------------------------------------------


@dataclass
class RegularityReport:
    sup_target: float
    sup_activation: float
    sup_grad_f_tilde: float
    sup_grad1_K: float
    lip_f_tilde: float
    lip_K: float
    lip_grad_f_tilde: float
    lip_grad1_K: float
    bound_kappa1: float
    lip_kappa2: float
    passed: bool

    def ratios(self):
        k1, k2 = self.bound_kappa1, self.lip_kappa2
        return {
            "sup_target": self.sup_target / k1,
            "sup_activation": self.sup_activation / k1,
            "sup_grad_f_tilde": self.sup_grad_f_tilde / k2,
            "sup_grad1_K": self.sup_grad1_K / k2,
            "lip_grad_f_tilde": self.lip_grad_f_tilde / k2,
            "lip_grad1_K": self.lip_grad1_K / k2,
        }


def _probe_pairs(rng, box, n, d):
    a = rng.uniform(-box, box, size=(n, d))
    direction = rng.standard_normal((n, d))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    scale = box * 10.0 ** rng.uniform(-4, 0, size=(n, 1))
    b = np.clip(a + scale * direction, -box, box)
    same = np.all(a == b, axis=1)
    b[same] = a[same] + 1e-3 * box * direction[same]
    return a, b


def check_regularity(prob, probe_box=5.0, n_probes=2000, seed=0):
    """Empirical sup-norms and Lipschitz ratios of ``f~``, ``K`` and their gradients.

    Probes are point pairs in ``[-probe_box, probe_box]^d`` at log-uniformly
    distributed separations.  The report fails if any measured quantity exceeds
    the declared constant by more than 1%.
    """
    d = prob.weight_dim
    rng = stream(seed, "regularity")
    a, b = _probe_pairs(rng, probe_box, n_probes, d)
    c, e = _probe_pairs(rng, probe_box, n_probes, d)
    dist_w = np.linalg.norm(a - b, axis=1)
    dist_joint = np.sqrt(dist_w**2 + np.linalg.norm(c - e, axis=1) ** 2)

    sup_f = float(np.max(np.abs(prob.f_values)))
    sup_s = float(max(np.max(np.abs(features(prob, a))), np.max(np.abs(features(prob, c)))))
    ft_a, ft_b = eval_f_tilde(prob, a), eval_f_tilde(prob, b)
    gf_a, gf_b = grad_f_tilde(prob, a), grad_f_tilde(prob, b)

    Sa, Sb, Sc, Se = (features(prob, x) for x in (a, b, c, e))
    Ga, Gb = feature_grads(prob, a), feature_grads(prob, b)
    pi = prob.weights
    if prob.interaction:
        K_ac = pi @ (Sa * Sc)
        K_be = pi @ (Sb * Se)
        g1_ac = np.einsum("j,jmd,jm->md", pi, Ga, Sc)
        g1_be = np.einsum("j,jmd,jm->md", pi, Gb, Se)
    else:
        K_ac = K_be = np.zeros(n_probes)
        g1_ac = g1_be = np.zeros((n_probes, d))

    report = RegularityReport(
        sup_target=sup_f,
        sup_activation=sup_s,
        sup_grad_f_tilde=float(np.max(np.linalg.norm(np.vstack([gf_a, gf_b]), axis=1))),
        sup_grad1_K=float(np.max(np.linalg.norm(np.vstack([g1_ac, g1_be]), axis=1))),
        lip_f_tilde=float(np.max(np.abs(ft_a - ft_b) / dist_w)),
        lip_K=float(np.max(np.abs(K_ac - K_be) / dist_joint)),
        lip_grad_f_tilde=float(np.max(np.linalg.norm(gf_a - gf_b, axis=1) / dist_w)),
        lip_grad1_K=float(np.max(np.linalg.norm(g1_ac - g1_be, axis=1) / dist_joint)),
        bound_kappa1=prob.bound_kappa1,
        lip_kappa2=prob.lip_kappa2,
        passed=True,
    )
    report.passed = all(r <= 1.01 for r in report.ratios().values())
    return report


def fit_risk_lipschitz(prob, N, n_probes=500, box=1.0, seed=0):
    """Empirical constant ``C`` in ``|R_N(w) - R_N(w')| <= C max_i ||w^i - w'^i||``."""
    rng = stream(seed, "risk-lipschitz", N)
    d = prob.weight_dim
    best = 0.0
    for _ in range(n_probes):
        w = rng.uniform(-box, box, size=(N, d))
        delta = rng.standard_normal((N, d)) * 10.0 ** rng.uniform(-4, -1)
        r0 = risk_of_ensemble(prob, ParticleEnsemble(w))
        r1 = risk_of_ensemble(prob, ParticleEnsemble(w + delta))
        best = max(best, abs(r1 - r0) / np.max(np.linalg.norm(delta, axis=1)))
    return best
