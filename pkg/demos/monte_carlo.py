"""Small Monte Carlo table over the built-in designs.

Usage: python demos/monte_carlo.py [reps]   (default 20 replications)
Columns follow the usual layout: infeasible MSE, average leaves, share of
replications recovering the true partition.
"""

import sys

from rdtree.mc import run_mc

reps = int(sys.argv[1]) if len(sys.argv) > 1 else 20
print(f"{'design':>7} {'N':>6} {'inf MSE':>9} {'leaves':>7} {'found':>7} {'sec':>6}")
for dgp, n in (("1", 1000), ("2", 1000), ("3", 1000), ("4", 1000), ("5", 1000), ("f-1", 5000)):
    r = run_mc(dgp, n, reps, seed=1)
    found = "-" if r.dgp_found_pct is None else f"{r.dgp_found_pct:.0f}%"
    print(f"{r.dgp:>7} {n:>6} {r.avg_inf_mse:>9.4f} {r.avg_leaves:>7.2f} {found:>7} {r.runtime_sec:>6.1f}")
