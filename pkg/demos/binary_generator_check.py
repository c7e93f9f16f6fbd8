"""
How faithful is the correlated binary generator?
================================================

Binary responses come from thresholding a latent Gaussian vector.  For
each pair of time points the latent correlation is solved so that the
binary correlation hits its target, which is only possible inside the
Frechet bounds set by the two marginal probabilities.
"""
import numpy as np

from grouped_gee.bvn import frechet_bounds, latent_corr_for_binary
from grouped_gee.simulation import gen_binary_longitudinal, truth_ex

rng = np.random.default_rng(0)

# with equal marginals of one half every target is feasible
Y = gen_binary_longitudinal(np.full((100_000, 4), 0.5), truth_ex(), rng)
C = np.corrcoef(Y, rowvar=False)
print("mean", Y.mean().round(4), "pairwise correlations", np.round(C[np.triu_indices(4, 1)], 3))

# %%
# Unequal marginals shrink the attainable range
for p, q in [(0.5, 0.5), (0.3, 0.7), (0.1, 0.9), (0.05, 0.6)]:
    lo, hi = frechet_bounds(p, q)
    r, clamped = latent_corr_for_binary(p, q, 0.5)
    print(f"p={p:4} q={q:4}  feasible [{lo:+.3f}, {hi:+.3f}]  latent r for 0.5: {r:.4f}  clamped={clamped}")

# %%
# With logistic marginals driven by covariates, many pairs are clamped
pi = 1 / (1 + np.exp(-rng.normal(0, 2, size=(2000, 10))))
_, rate = gen_binary_longitudinal(pi, truth_ex(), rng, return_clamps=True)
print("share of clamped pairs with spread-out marginals:", round(rate, 3))
