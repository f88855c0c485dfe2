"""Command-line experiment runner: ``meanfield-lab {solve,bridge,dynamics,corollary1,verify}``.

Every run resolves its JSON config against ``config_schema.json``, writes the
resolved config next to its outputs and produces byte-identical files for the
same config and seed.  Exit codes: 0 success, 2 config error, 3 numerical
failure, 4 verification failure.
"""

import argparse
import copy
import csv
import hashlib
import io
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from .measures import (
    ContractError,
    GaussianPrior,
    GridCDF,
    ParticleEnsemble,
    SupportError,
    from_csv,
    kl_divergence,
    wasserstein2,
)
from .problem import EvaluationError, build_problem, eval_f_tilde, eval_K, eval_Psi, grad_Psi, risk_of_measure

log = logging.getLogger("meanfield_lab")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_VERIFY = 0, 2, 3, 4

DEFAULTS = {
    "seed": 0,
    "problem": {"activation": "tanh", "quadrature_order": 32, "dim": 1, "target": {"kind": "sine", "frequency": 1.0}},
    "solver": {"tol": 1e-10, "max_iter": 5000, "damping": 1.0},
    "dynamics": {"N": 400, "n_steps": 200, "seeds": 1, "snapshot_every": 0},
    "bridge": {"n_paths": 20000, "n_steps": 200},
    "corollary1": {"N": [64, 256, 1024], "n_seeds": 200, "delta": 0.05},
    "sweep": {},
}


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# config
# ---------------------------------------------------------------------------


def load_schema():
    return json.loads(resources.files("meanfield_lab").joinpath("config_schema.json").read_text(encoding="utf-8"))


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def resolve_config(raw, seed=None):
    """Validate ``raw`` and fill defaults; unknown keys are rejected."""
    try:
        jsonschema.validate(raw, load_schema())
    except jsonschema.ValidationError as exc:
        raise ConfigError(f"invalid config at {'/'.join(map(str, exc.absolute_path)) or '<root>'}: {exc.message}")
    cfg = _merge(DEFAULTS, raw)
    if seed is not None:
        cfg["seed"] = int(seed)
    if "params" not in cfg:
        lazy = cfg.get("preset", {}).get("lazy", {"epsilon": 0.2})
        cfg["preset"] = {"lazy": {"epsilon": lazy["epsilon"], "d": lazy.get("d", cfg["problem"]["dim"])}}
    return cfg


def config_hash(cfg):
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


@dataclass(frozen=True)
class _ZeroBeta:
    """Stand-in parameters for ``beta = 0``, where the Boltzmann map is the identity."""

    tau: float
    dim: int = 1
    beta: float = 0.0

    @property
    def prior(self):
        return GaussianPrior(self.tau, self.dim)


def make_params(cfg, beta=None, tau=None):
    from .free_energy import RegularizationParams

    d = cfg["problem"]["dim"]
    if beta is None and tau is None:
        if "params" in cfg:
            beta, tau = cfg["params"]["beta"], cfg["params"]["tau"]
        else:
            lazy = cfg["preset"]["lazy"]
            return RegularizationParams.lazy(lazy["epsilon"], lazy["d"])
    if beta == 0:
        return _ZeroBeta(float(tau), d)
    return RegularizationParams(float(beta), float(tau), d)


def make_grid(cfg, params):
    from .free_energy import default_grid
    from .problem import realizable_problem

    g = cfg.get("grid", {})
    if cfg["problem"]["target"]["kind"] == "realizable" and not g:
        return realizable_problem().realizable_measure.grid
    return default_grid(params, g.get("L"), g.get("h"))


def make_problem(cfg, grid):
    spec = copy.deepcopy(cfg["problem"])
    return build_problem(spec, grid)


# ---------------------------------------------------------------------------
# output helpers
# ---------------------------------------------------------------------------


def _atomic_write(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    tmp.replace(path)
    return path


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if v is None:
        return ""
    return str(v)


def write_csv(path, header, rows):
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(header)
    for r in rows:
        wr.writerow([_fmt(r[h]) if isinstance(r, dict) else _fmt(x) for h, x in zip(header, r if not isinstance(r, dict) else header)])
    return _atomic_write(path, buf.getvalue())


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return f if math.isfinite(f) else repr(f)
    if isinstance(obj, ParticleEnsemble):
        return None
    return obj


def write_json(path, obj):
    return _atomic_write(path, json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")


def _prepare_out(out, cmd, cfg):
    d = Path(out) / cmd
    d.mkdir(parents=True, exist_ok=True)
    write_json(d / "resolved_config.json", {
        "config": cfg,
        "provenance": {"package": f"meanfield-lab {__version__}", "config_hash": config_hash(cfg), "command": cmd},
    })
    return d


# ---------------------------------------------------------------------------
# solve
# ---------------------------------------------------------------------------


def _solve(cfg, params):
    from .free_energy import FixedPointSolution, solve_boltzmann_fixed_point

    grid = make_grid(cfg, params)
    prob = make_problem(cfg, grid)
    if params.beta == 0:
        prior = params.prior.on_grid(grid)
        return prob, FixedPointSolution(prior, params, 0.0, 0.0, 0, [(0.0, 0.0)])
    s = cfg["solver"]
    return prob, solve_boltzmann_fixed_point(prob, params, grid, s["tol"], s["max_iter"], s["damping"])


def _theorem1_row(args):
    from .free_energy import verify_theorem1

    cfg, beta, tau = args
    params = make_params(cfg, beta, tau)
    prob, sol = _solve(cfg, params)
    rep = verify_theorem1(prob, params, sol) if params.beta > 0 else {}
    return {"beta": beta, "tau": tau, "seed": cfg["seed"], "risk": rep.get("risk"), "two_F": rep.get("two_F"),
            "kl": rep.get("kl"), "w2_sq": rep.get("w2_sq"), "realizable_bound": rep.get("realizable_bound"),
            "residual": sol.residual, "iterations": sol.iterations}


def _pool_map(fn, items, jobs):
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, items))


def cmd_solve(cfg, out, jobs=1, only=None):
    from .free_energy import save_solution, verify_theorem1

    d = _prepare_out(out, "solve", cfg)
    params = make_params(cfg)
    prob, sol = _solve(cfg, params)
    save_solution(sol, d)
    if params.beta > 0:
        rep = verify_theorem1(prob, params, sol)
    else:
        rep = {"beta": 0.0, "tau": params.tau, "risk": risk_of_measure(prob, sol.mu_star),
               "kl": kl_divergence(sol.mu_star, params.prior), "note": "beta=0: the minimizer is gamma_tau"}
    write_json(d / "theorem1.json", rep)
    sw = cfg["sweep"]
    if sw.get("beta") or sw.get("tau"):
        betas = sw.get("beta") or [params.beta]
        taus = sw.get("tau") or [params.tau]
        rows = _pool_map(_theorem1_row, [(cfg, b, t) for t in taus for b in betas], jobs)
        write_csv(d / "theorem1_sweep.csv", list(rows[0].keys()), rows)
    return EXIT_OK


def _load_solved(cfg, out):
    """Solution written by ``solve`` for the same config."""
    from .free_energy import FixedPointSolution, load_solution

    d = Path(out) / "solve"
    meta_path = d / "mu_star_solution.json"
    if not meta_path.exists():
        raise ConfigError(f"no solve artifacts in {d}; run `meanfield-lab solve` with the same config first")
    params = make_params(cfg)
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    if (meta["beta"], meta["tau"]) != (params.beta, params.tau):
        raise ConfigError("stored solution was produced with different (beta, tau); re-run solve")
    if params.beta == 0:
        sol = FixedPointSolution(from_csv(d / "mu_star.csv"), params, 0.0, 0.0, 0, [])
    else:
        sol = load_solution(d)
    return make_problem(cfg, sol.grid), params, sol


# ---------------------------------------------------------------------------
# bridge
# ---------------------------------------------------------------------------


def cmd_bridge(cfg, out, jobs=1, only=None):
    from .bridge import (
        ValueFunctionField,
        bridge_energy,
        cole_hopf_h,
        export_drift_csv,
        follmer_drift,
        value_function,
        zero_drift,
    )
    from .oracle import ks_statistic, pde_residual
    from .free_energy import free_energy

    prob, params, sol = _load_solved(cfg, out)
    d = _prepare_out(out, "bridge", cfg)
    b = cfg["bridge"]
    seed = cfg["seed"]
    if params.beta == 0:
        drift = zero_drift(1)
        res = bridge_energy(drift, params, b["n_paths"], b["n_steps"], seed)
        write_json(d / "bridge_energy.json", {"energy": res["energy"], "se": res["se"], "tau_kl": 0.0,
                                              "note": "beta=0: zero drift"})
        return EXIT_OK
    vf = ValueFunctionField(prob, sol)
    drift = follmer_drift(vf)
    axis = sol.grid.axis
    export_drift_csv(drift, axis[::8], np.round(np.linspace(0.0, 1.0, 21), 12), d / "drift.csv")
    res = bridge_energy(drift, params, b["n_paths"], b["n_steps"], seed, prob=prob)
    kl = kl_divergence(sol.mu_star, params.prior)
    write_json(d / "bridge_energy.json", {
        "energy": res["energy"], "se": res["se"], "tau_kl": params.tau * kl,
        "total_cost": res["total_cost"], "beta_F": params.beta * free_energy(prob, params, sol.mu_star),
        "switch_time": vf.switch_time, "guard_variance": vf.guard_s,
    })
    s = math.sqrt(params.tau)
    wp = np.linspace(-2 * s, 2 * s, 9)
    tp = [0.2, 0.5, 0.8]
    base = s / 5
    pde = {
        "heat": pde_residual(lambda w, t: cole_hopf_h(vf, w, t), "heat", params.tau, wp, tp, base),
        "hjb": pde_residual(lambda w, t: value_function(vf, w, t), "hjb", params.tau, wp, tp, base),
        "fpe": pde_residual((lambda w, t: np.exp(vf.log_marginal(w, t)), lambda w, t: vf.drift_exact(w, t)),
                            "fpe", params.tau, wp, tp, base),
    }
    write_json(d / "pde_residuals.json", pde)
    cdf = GridCDF(sol.mu_star)
    ks = ks_statistic(res["terminal"].particles[:, 0], cdf.cdf)
    write_json(d / "terminal_ks.json", {"ks": ks, "n": b["n_paths"], "threshold_99": 1.63 / math.sqrt(b["n_paths"])})
    return EXIT_OK


# ---------------------------------------------------------------------------
# dynamics
# ---------------------------------------------------------------------------


def _run_dynamics(prob, params, sol, N, n_steps, seed, snapshot_dir=None, snapshot_every=0):
    from .bridge import ValueFunctionField, follmer_drift, zero_drift
    from .dynamics import CouplingContext, build_log, reference_risk_flow, simulate_all

    ctx = CouplingContext(seed, N, n_steps, params.tau, params.dim)
    times = np.arange(n_steps + 1) / n_steps
    if params.beta == 0:
        drift = zero_drift(params.dim)
        flow = reference_risk_flow(prob, lambda t: _gaussian_output(prob, params.tau * t), times)
    else:
        vf = ValueFunctionField(prob, sol)
        drift = follmer_drift(vf)
        flow = reference_risk_flow(prob, vf.marginal_output, times)
    trajs = simulate_all(ctx, prob, params, drift)
    lg = build_log(prob, trajs, flow)
    if snapshot_dir is not None and snapshot_every:
        for k in range(0, n_steps + 1, snapshot_every):
            rows = [[i] + [tr.states[k][i, 0] for tr in trajs] for i in range(N)]
            write_csv(Path(snapshot_dir) / f"snapshot_k{k:06d}.csv", ["particle", "mkv", "particle_dyn", "gd", "sgd"],
                      rows)
    return lg


def _gaussian_output(prob, var):
    from numpy.polynomial.hermite_e import hermegauss

    from .problem import features

    z, w = hermegauss(64)
    return features(prob, (math.sqrt(var) * z)[:, None]) @ (w / w.sum())


def cmd_dynamics(cfg, out, jobs=1, only=None):
    from .dynamics import gap_decomposition
    from .free_energy import loglog_slope

    prob, params, sol = _load_solved(cfg, out)
    d = _prepare_out(out, "dynamics", cfg)
    dy = cfg["dynamics"]
    snap = d / "snapshots" if dy["snapshot_every"] else None
    lg = _run_dynamics(prob, params, sol, dy["N"], dy["n_steps"], cfg["seed"], snap, dy["snapshot_every"])
    lg.to_csv(d / "trajectory.csv")
    gaps = gap_decomposition(lg)
    write_json(d / "gaps.json", {k: v for k, v in gaps.items() if k not in ("running_max", "total_gap")})
    sw = cfg["sweep"]
    if sw.get("eta"):
        from .dynamics import CouplingContext, simulate_gd, simulate_sgd
        from .problem import risk_of_ensemble

        rows = []
        for eta in sw["eta"]:
            n = int(round(1.0 / eta))
            vals = []
            for s in range(dy["seeds"]):
                ctx = CouplingContext(cfg["seed"] + s, dy["N"], n, params.tau, params.dim)
                a, b = simulate_gd(ctx, prob, params), simulate_sgd(ctx, prob, params)
                ra = np.array([risk_of_ensemble(prob, ParticleEnsemble(x)) for x in a.states])
                rb = np.array([risk_of_ensemble(prob, ParticleEnsemble(x)) for x in b.states])
                vals.append(float(np.max(np.abs(ra - rb))))
            rows.append({"eta": 1.0 / n, "gd_sgd_gap": float(np.mean(vals))})
        write_csv(d / "eta_sweep.csv", ["eta", "gd_sgd_gap"], rows)
        if len(rows) > 1:
            slope, r2 = loglog_slope([r["eta"] for r in rows], [r["gd_sgd_gap"] for r in rows])
            write_json(d / "eta_sweep_fit.json", {"slope": slope, "r2": r2})
    if sw.get("epsilon"):
        from .free_energy import RegularizationParams, solve_boltzmann_fixed_point

        rows = []
        for eps in sw["epsilon"]:
            pe = RegularizationParams.lazy(eps, params.dim)
            from .free_energy import default_grid

            pr = make_problem(cfg, default_grid(pe))
            se = solve_boltzmann_fixed_point(pr, pe, default_grid(pe))
            vals = []
            for s in range(dy["seeds"]):
                lg_e = _run_dynamics(pr, pe, se, dy["N"], dy["n_steps"], cfg["seed"] + s)
                vals.append(gap_decomposition(lg_e)["max_total_gap"])
            rows.append({"epsilon": eps, "beta": pe.beta, "tau": pe.tau, "max_total_gap": float(np.mean(vals))})
        write_csv(d / "theorem3_sweep.csv", ["epsilon", "beta", "tau", "max_total_gap"], rows)
    return EXIT_OK


# ---------------------------------------------------------------------------
# transported finite-width net
# ---------------------------------------------------------------------------


def cmd_corollary1(cfg, out, jobs=1, only=None):
    from .free_energy import corollary1_sweep

    d = _prepare_out(out, "corollary1", cfg)
    base = make_params(cfg)
    betas = cfg["sweep"].get("beta") or [base.beta]
    params_list = [make_params(cfg, b, base.tau) for b in betas]
    if any(p.beta == 0 for p in params_list):
        raise ConfigError("corollary1 needs beta > 0 (beta = 0 is the identity transport)")
    grid = make_grid(cfg, base)
    prob = make_problem(cfg, grid)
    c = cfg["corollary1"]
    rows, fits = corollary1_sweep(prob, params_list, c["N"], lambda p: make_grid(cfg, p), cfg["seed"], c["delta"],
                                  c["n_seeds"])
    write_csv(d / "corollary1.csv", list(rows[0].keys()), rows)
    write_json(d / "corollary1_fits.json", fits)
    return EXIT_OK


# ---------------------------------------------------------------------------
# verify
# ---------------------------------------------------------------------------


def _verify_checks(cfg, out):
    """Named oracle checks; each returns a list of OracleReport."""
    from . import oracle
    from .bridge import ValueFunctionField, bridge_marginal_density, cole_hopf_h, value_function
    from .free_energy import fixed_point_residual, verify_theorem1

    params = make_params(cfg)
    if params.beta == 0:
        raise ConfigError("verify needs beta > 0")
    stored = Path(out) / "solve" / "mu_star_solution.json"
    if stored.exists():
        prob, params, sol = _load_solved(cfg, out)
    else:
        prob, sol = _solve(cfg, params)
    prov = {"config_hash": config_hash(cfg), "seed": cfg["seed"]}
    d1 = prob.weight_dim == 1 and prob.input_dim == 1

    def target(x):
        return prob.target(np.asarray(x, float).reshape(-1, 1))

    def act(x, w):
        return prob.activation(np.asarray(x, float).reshape(-1, 1), np.array([[w]]))[:, 0]

    uniform_data = prob.name.startswith("sine") and prob.nodes.shape[0] >= 20

    def kernels():
        if not (d1 and uniform_data):
            return []
        return [
            oracle.OracleReport("f_tilde@w=1", eval_f_tilde(prob, 1.0),
                                oracle.dense_riemann_kernel(target, act, 1.0), 1e-6, provenance=prov),
            oracle.OracleReport("K@(1,2)", eval_K(prob, 1.0, 2.0),
                                oracle.dense_riemann_kernel(target, act, 1.0, 2.0), 1e-6, provenance=prov),
        ]

    def gradient():
        reps = []
        for w in (-0.7, 0.1, 0.9):
            fd = oracle.finite_difference_gradient(lambda v: eval_Psi(prob, v, sol.mu_star), [w])[0]
            reps.append(oracle.OracleReport(f"grad_psi@w={w}", float(grad_Psi(prob, w, sol.mu_star)[0]), fd, 1e-6,
                                            relative=True, provenance=prov))
        return reps

    def transport():
        a, b = np.arange(4.0), np.arange(4.0) + 0.5
        return [oracle.OracleReport("w2_assignment", wasserstein2(ParticleEnsemble(a), ParticleEnsemble(b)),
                                    oracle.brute_force_assignment_w2(a, b), 1e-12, provenance=prov)]

    def solution():
        res = fixed_point_residual(prob, params, sol.mu_star)
        reps = [oracle.OracleReport("solution_residual", res, 0.0, 10 * cfg["solver"]["tol"], provenance=prov)]
        try:
            verify_theorem1(prob, params, sol)
            ok = 0.0
        except AssertionError:
            ok = 1.0
        reps.append(oracle.OracleReport("theorem1_bounds", ok, 0.0, 0.0, provenance=prov))
        return reps

    def fixed_point():
        if not (d1 and uniform_data and prob.activation.name == "tanh"):
            return []
        _, rho = oracle.dense_fixed_point(target, lambda x, w: np.tanh(x * w), params.beta, params.tau,
                                          sol.grid.L, n_w=sol.grid.n)
        return [oracle.OracleReport("fixed_point_dense", float(np.max(np.abs(rho - sol.mu_star.density))), 0.0, 1e-6,
                                    provenance=prov)]

    def bridge():
        if not d1:
            return []
        vf = ValueFunctionField(prob, sol)
        m1 = bridge_marginal_density(vf, 1.0)
        reps = [oracle.OracleReport("bridge_terminal", float(np.max(np.abs(m1.density - sol.mu_star.density))), 0.0,
                                    1e-6, provenance=prov)]
        s = math.sqrt(params.tau)
        heat = oracle.pde_residual(lambda w, t: cole_hopf_h(vf, w, t), "heat", params.tau,
                                   np.linspace(-2 * s, 2 * s, 9), [0.2, 0.5, 0.8], s / 5)
        reps.append(oracle.OracleReport("heat_order", heat["order"], 2.0, 0.3, provenance=prov))
        v = float(value_function(vf, 0.3 * s, 0.4)[0])
        mc, se = oracle.mc_value_function(vf.psi, params.beta, params.tau, 0.3 * s, 0.4, 10**6, cfg["seed"])
        reps.append(oracle.OracleReport("value_function_mc", v, mc, 3 * se, provenance=prov))
        return reps

    return {"kernels": kernels, "gradient": gradient, "transport": transport, "solution": solution,
            "fixed_point": fixed_point, "bridge": bridge}


def cmd_verify(cfg, out, jobs=1, only=None):
    from .oracle import OracleReport, append_reports

    d = _prepare_out(out, "verify", cfg)
    checks = _verify_checks(cfg, out)
    names = list(checks)
    if only:
        unknown = set(only) - set(names)
        if unknown:
            raise ConfigError(f"unknown check(s) {sorted(unknown)}; available: {names}")
        names = [n for n in names if n in only]
    path = d / "verify_report.jsonl"
    path.write_text("", encoding="utf-8")
    failed = []
    for n in names:
        try:
            reps = checks[n]()
        except (ArithmeticError, ValueError, AssertionError) as exc:
            # a check that cannot even run counts as a named failure
            reps = [OracleReport(f"{n}:error", 1.0, 0.0, 0.0, provenance={"error": str(exc)})]
        append_reports(reps, path)
        failed += [r.name for r in reps if not r.passed]
    if failed:
        log.error("verification failed: %s", ", ".join(failed))
        return EXIT_VERIFY
    return EXIT_OK


COMMANDS = {"solve": cmd_solve, "bridge": cmd_bridge, "dynamics": cmd_dynamics, "corollary1": cmd_corollary1,
            "verify": cmd_verify}


def build_parser():
    ap = argparse.ArgumentParser(prog="meanfield-lab", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", type=Path, help="JSON experiment config")
    ap.add_argument("--seed", type=int, help="master seed (overrides the config)")
    ap.add_argument("--jobs", type=int, default=1, help="worker processes for sweep points")
    ap.add_argument("--out", type=Path, help="output directory (MEANFIELD_LAB_OUT takes precedence)")
    ap.add_argument("--only", type=lambda s: [x for x in s.split(",") if x], help="comma-separated verify checks")
    return ap


def main(argv=None):
    from .dynamics import SimulationError
    from .free_energy import SolverError, VerificationError

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        raw = json.loads(args.config.read_text(encoding="utf-8")) if args.config else {}
        if args.seed is not None and args.seed < 0:
            raise ConfigError("--seed must be a non-negative integer")
        cfg = resolve_config(raw, args.seed)
        out = os.environ.get("MEANFIELD_LAB_OUT") or args.out or cfg.get("output_dir") or "meanfield_out"
        return COMMANDS[args.command](cfg, Path(out), max(1, args.jobs), args.only)
    except (ConfigError, json.JSONDecodeError, FileNotFoundError, ContractError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SolverError as exc:
        out = Path(os.environ.get("MEANFIELD_LAB_OUT") or args.out or "meanfield_out")
        try:
            write_json(out / "solve" / "solver_trace.json", {"error": str(exc), "trace": exc.trace})
        except OSError:
            pass
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (SimulationError, SupportError, EvaluationError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except VerificationError as exc:
        print(f"verification failure: {exc}", file=sys.stderr)
        return EXIT_VERIFY


if __name__ == "__main__":
    sys.exit(main())
