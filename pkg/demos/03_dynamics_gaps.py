"""Couple four dynamics on shared noise and split the tracking gap into its pieces.

MKV: independent particles driven by the Foellmer drift.  Particle: the
interacting N-neuron system.  GD and SGD: their time discretizations with
full and single-sample gradients.

Run: python3 demos/03_dynamics_gaps.py
"""

import numpy as np

from meanfield_lab.bridge import ValueFunctionField, follmer_drift
from meanfield_lab.dynamics import CouplingContext, build_log, gap_decomposition, reference_risk_flow, simulate_all
from meanfield_lab.free_energy import RegularizationParams, solve_boltzmann_fixed_point
from meanfield_lab.problem import sine_problem

prob = sine_problem()
n_steps = 200
times = np.arange(n_steps + 1) / n_steps
for eps in [0.4, 0.2, 0.1]:
    params = RegularizationParams.lazy(eps)
    vf = ValueFunctionField(prob, solve_boltzmann_fixed_point(prob, params))
    flow = reference_risk_flow(prob, vf.marginal_output, times)
    ctx = CouplingContext(0, 800, n_steps, params.tau)
    gaps = gap_decomposition(build_log(prob, simulate_all(ctx, prob, params, follmer_drift(vf)), flow))
    names = ["sampling", "MKV-particle", "particle-GD", "GD-SGD"]
    pieces = "  ".join(f"{n}={g:.4f}" for n, g in zip(names, gaps["max_gaps"]))
    print(f"eps={eps}: total={gaps['max_total_gap']:.4f}  {pieces}")
