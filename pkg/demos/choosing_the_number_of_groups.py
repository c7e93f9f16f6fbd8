"""
Choosing the number of groups
=============================

Cross-validation with averaging splits the subjects into two training
halves and a test set, fits grouped GEE on each half and counts pairs of
test subjects that one fit puts together and the other separates.  The
count is smallest near the true number of groups.
"""
import numpy as np

from grouped_gee import SimScenario, cva_select, simulate

sim = simulate(SimScenario(n=270, T=20, seed=3))

# a handful of splits keeps this quick; the averaged curve is already clear
res = cva_select(sim.data, "bernoulli", "EX", candidates=range(2, 8), C=5, seed=1)

for G in res.candidates:
    bar = "#" * int(round(res.instability[G] / 40))
    print(f"G={G}  {res.instability[G]:8.1f}  {bar}")
print("selected:", res.selected_G)

# the raw per-split values show how noisy a single split is
print(np.round(res.per_split, 0))
