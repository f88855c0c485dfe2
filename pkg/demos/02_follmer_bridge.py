"""Steer scaled Brownian motion onto the minimizer with the Foellmer drift.

The terminal particles should follow the minimizer, and the average control
energy should equal tau times its entropy relative to the prior.

Run: python3 demos/02_follmer_bridge.py
"""

from meanfield_lab.bridge import ValueFunctionField, bridge_energy, follmer_drift
from meanfield_lab.free_energy import RegularizationParams, free_energy, solve_boltzmann_fixed_point
from meanfield_lab.measures import GridCDF, kl_divergence
from meanfield_lab.oracle import ks_statistic, ks_threshold
from meanfield_lab.problem import sine_problem

prob = sine_problem()
params = RegularizationParams.lazy(0.2)
sol = solve_boltzmann_fixed_point(prob, params)
vf = ValueFunctionField(prob, sol)
drift = follmer_drift(vf)
print(f"drift table interpolation error: {drift._fn.interp_error:.2e}")

n_paths = 20_000
run = bridge_energy(drift, params, n_paths, 200, seed=0, prob=prob)
ks = ks_statistic(run["terminal"].particles[:, 0], GridCDF(sol.mu_star).cdf)
print(f"KS distance of terminal law: {ks:.4f} (1% critical value {ks_threshold(n_paths):.4f})")

kl = kl_divergence(sol.mu_star, params.prior)
print(f"control energy  {run['energy']:.6f} +- {run['se']:.1e}   tau * KL   {params.tau * kl:.6f}")
print(f"total cost      {run['total_cost']:.6f}             beta * F   {params.beta * free_energy(prob, params, sol.mu_star):.6f}")
