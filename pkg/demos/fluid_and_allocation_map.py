"""Walk through the static pieces of the N network.

Prints the fluid equilibrium, a few allocations produced by the tree map,
the structured drift matrices, and the shifted server splits used by the
balanced saturation policy at n = 100.

Run with ``python3 demos/fluid_and_allocation_map.py``.
"""
import numpy as np

from hwnet.fluid import extract_drift_matrices, psi_map, solve_fluid
from hwnet.networks import n_network
from hwnet.policies import build_capacity_shift, default_margin
from hwnet.topology import scale_params

np.set_printoptions(precision=4, suppress=True)

topo, limit = n_network()
print("edges (class, pool):", topo.edges)

fl = solve_fluid(topo, limit)
print("\nfluid split xi*:\n", fl.xi_star)
print("fluid headcounts x*:", fl.x_star)

# the tree map turns class totals and pool totals into a unique edge allocation
for alpha, beta in (([3, 1], [2, 2]), ([5, 0], [1, 4]), ([1.5, 1.5], [1.0, 2.0])):
    print(f"\nallocation for class totals {alpha}, pool totals {beta}:\n", psi_map(topo, alpha, beta))

dm = extract_drift_matrices(topo, limit, fl)
print("\nB1:\n", dm.B1)
print("B2:\n", dm.B2)
print("elimination order:", dm.elimination_order)

n = 100
sc = scale_params(limit, n, topo)
C = default_margin(topo, limit, fl)
shift = build_capacity_shift(topo, sc, fl, C)
print(f"\nn = {n}: pool sizes {sc.N_n}, margin C = {C:.3f}")
print("nominal splits:\n", shift.N_ij)
print("shifted splits:\n", shift.N_tilde_ij)
