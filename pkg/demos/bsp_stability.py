"""Balanced saturation on the N network: certificate, tails and moments.

For a few values of n this builds the balanced saturation policy, fits a
discrete Foster-Lyapunov certificate on sampled lattice states, simulates
the chain, and prints the scaled moments and the tail decay fit.  Stable
behaviour shows up as a positive decay rate C1, a negative tail slope, and
moments that barely move with n.

Run with ``python3 demos/bsp_stability.py`` (about a minute).
"""
from hwnet.ctmc import simulate_ctmc, tail_decay_fit
from hwnet.fluid import solve_fluid
from hwnet.networks import n_network
from hwnet.policies import build_capacity_shift, default_margin, make_bsp
from hwnet.topology import scale_params
from hwnet.verify import check_discrete_lyapunov

topo, limit = n_network()
fl = solve_fluid(topo, limit)
C = default_margin(topo, limit, fl)

print(f"{'n':>5} {'C1':>8} {'E|x|':>8} {'E|x|^2':>8} {'slope':>7} {'R2':>6} {'events':>10}")
for n in (50, 100, 200):
    sc = scale_params(limit, n, topo)
    pol = make_bsp(topo, sc, fl, build_capacity_shift(topo, sc, fl, C))
    cert = check_discrete_lyapunov(topo, sc, fl, pol)
    res = simulate_ctmc(topo, sc, pol, horizon=5000, seed=0, fluid=fl, replications=2)
    tail = tail_decay_fit(res)
    m1 = res.estimates["x_norm^1"].estimate
    m2 = res.estimates["x_norm^2"].estimate
    print(f"{n:>5} {cert.C1:>8.4f} {m1:>8.3f} {m2:>8.3f} {tail.slope:>7.2f} {tail.r_squared:>6.3f} "
          f"{res.diagnostics['events']:>10}")
