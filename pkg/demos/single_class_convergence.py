"""Scaled many-server queue against its diffusion limit.

A single class with abandonment is simulated at growing n under the
concatenated policy of a constant control, and the long-run cost
E[(x+)^3] is compared with the same cost for the limiting diffusion.  The
gap and the total-variation distance between occupation measures should
shrink as n grows.  The horizon is shorter than in the test suite, so the
numbers are noisier.

Run with ``python3 demos/single_class_convergence.py`` (a few minutes).
"""
from hwnet.ctmc import CostSpec
from hwnet.networks import single_class
from hwnet.policies import MarkovControl
from hwnet.verify import convergence_experiment

topo, limit = single_class(gamma=4.0, lam_hat=1.0)
report = convergence_experiment(
    topo, limit, MarkovControl.constant([1.0], [1.0]), (50, 100, 200, 400),
    costs=CostSpec([1.0], [0.0], m=3.0), horizon=1e4, replications=4,
)
d = report.diffusion
print(f"diffusion: J = {d.estimate:.4f} +/- {d.half_width:.4f}")
for e in report.entries:
    print(f"n = {e.n:>4}: J = {e.estimate.estimate:.4f} +/- {e.estimate.half_width:.4f}, "
          f"gap {e.gap:.4f}, TV {e.tv:.4f}")
print(f"Spearman(gap, n) = {report.gap_trend:.2f}; TV non-increasing: {report.tv_non_increasing}")
