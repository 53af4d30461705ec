"""
The posterior as the minimiser of free energy
=============================================

The free energy of a candidate law P is KL(P || reference) + E_P[H].  It
exceeds its minimum, -log Z, by exactly KL(P || posterior).  We slide the
posterior mean along a direction and watch the Monte Carlo free energy trace
out the closed-form parabola.
"""

import numpy as np

from corrfilt import (CandidateMeasure, LinearModel, SeedSpec, exact_log_normalizer, free_energy,
                      make_dyadic_grid, mean_shift_family, minimize_over_family, posterior_law,
                      reference_law, simulate_joint)
from corrfilt.free_energy import fit_curvature

model = LinearModel(A=-1.0, C=1.0, sigma0=1.0, sigma1=0.5, x0=1.0)
grid = make_dyadic_grid(6, model.T)
y = simulate_joint(model, grid, SeedSpec(11)).y
post = posterior_law(model, grid, y)
ref = reference_law(model, grid, y)

s = np.linspace(-1, 1, 9)
v = np.full(post.dim, 0.2)
family = mean_shift_family(post, v, s)
best, _, reports = minimize_over_family(model, grid, y, family, 20_000, SeedSpec(12), post)

print("     s      F(P)      gap (MC)     KL(P||post)   SE")
for si, r in zip(s, reports):
    print(f"{si:+6.2f}  {r.total:8.4f}  {r.gibbs_gap:10.4f}  {r.gap_predicted:10.4f}  "
          f"{r.gap_standard_error:.4f}")
print(f"minimiser: {best.label}")
print(f"curvature: fitted {fit_curvature(s, [r.total for r in reports]):.3f}, "
      f"closed form {v @ np.linalg.solve(post.cov, v):.3f}")

r_ref = free_energy(CandidateMeasure(ref, "reference"), model, grid, y, 20_000, SeedSpec(13),
                    post, ref)
print(f"\nreference measure: F = {r_ref.total:.4f}, gap {r_ref.gibbs_gap:.4f} "
      f"vs KL {r_ref.gap_predicted:.4f}")
r_post = reports[len(s) // 2]
print(f"-log Z = {-exact_log_normalizer(model, grid, y):.4f}, "
      f"F(posterior) = {r_post.total:.4f} +/- {r_post.mc_standard_error:.4f}")
