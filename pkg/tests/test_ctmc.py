import math

import numpy as np
import pytest
from oracles import birth_death_stationary

from hwnet.ctmc import (
    BoxGrid,
    CostSpec,
    empirical_measure,
    event_rates,
    observable_names,
    simulate_ctmc,
    tail_decay_fit,
    total_variation,
    write_event_log,
)
from hwnet.errors import StateExplosion
from hwnet.fluid import solve_fluid
from hwnet.networks import single_class
from hwnet.policies import CapacityShift, Policy, build_capacity_shift, make_bsp
from hwnet.topology import LimitParams, NetworkTopology, scale_params


def _bsp(topo, limit, fl, n):
    sc = scale_params(limit, n, topo)
    return sc, make_bsp(topo, sc, fl, build_capacity_shift(topo, sc, fl, 1.0))


def test_cost_spec_validation():
    with pytest.raises(ValueError):
        CostSpec([1.0], [0.0], theta=[0.4, 0.4])
    with pytest.raises(ValueError):
        CostSpec([1.0], [0.0], delta=[0.0])
    assert CostSpec([1.0], [0.0], theta=[0.5, 0.5]).theta.sum() == 1.0


def test_event_rates(nnet):
    topo, limit, fl = nnet
    sc = scale_params(limit, 100, topo)
    z = np.array([[100, 50], [0, 140]])
    r = event_rates([160, 150], z, sc)
    assert r.abandon.tolist() == [0.0, 10.0]
    assert r.service[0, 1] == 50.0
    assert r.total == pytest.approx(300 + 100 + 50 + 140 + 10)


def test_observable_layout():
    names = observable_names(2)
    assert names[:5] == ["J", "J_o", "in_region", "sum_pos", "sum_neg"]
    assert names[-2:] == ["J_c[0]", "J_c[1]"]


def test_single_class_matches_birth_death(mmn):
    topo, limit, fl = mmn
    n = 50
    sc, pol = _bsp(topo, limit, fl, n)
    res = simulate_ctmc(topo, sc, pol, 4000, seed=3, replications=4)
    k, p = birth_death_stationary(sc.lam_n[0], 1.0, 1.0, int(sc.N_n[0]))
    xh = (k - n) / math.sqrt(n)
    for name, f in (("sum_pos", lambda v: np.maximum(v, 0)), ("sum_neg", lambda v: np.maximum(-v, 0))):
        est = res.estimates[name]
        assert abs(est.estimate - (p * f(xh)).sum()) <= 3 * est.half_width


def test_invariants_hold_at_every_event(nnet):
    topo, limit, fl = nnet
    sc, pol = _bsp(topo, limit, fl, 50)
    res = simulate_ctmc(topo, sc, pol, 500, seed=1, replications=2, num_batches=16)
    d = res.diagnostics
    assert d["balance_violations"] == 0 and d["work_conservation_violations"] == 0
    assert d["events"] > 10_000


def test_determinism_and_seed_sensitivity(nnet):
    topo, limit, fl = nnet
    sc, pol = _bsp(topo, limit, fl, 50)
    a = simulate_ctmc(topo, sc, pol, 300, seed=5, replications=2, num_batches=16)
    b = simulate_ctmc(topo, sc, pol, 300, seed=5, replications=2, num_batches=16, workers=2)
    c = simulate_ctmc(topo, sc, pol, 300, seed=6, replications=2, num_batches=16)
    assert np.array_equal(a.batches, b.batches) and np.array_equal(a.hist, b.hist)
    assert a.summary() == b.summary()
    assert not np.array_equal(a.batches, c.batches)


def test_event_log_csv(tmp_path, mmn):
    topo, limit, fl = mmn
    sc, pol = _bsp(topo, limit, fl, 20)
    res = simulate_ctmc(topo, sc, pol, 50, seed=0, replications=1, num_batches=20, event_log=100)
    path = tmp_path / "events.csv"
    write_event_log(res, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "time,event,index,x0"
    assert len(lines) == 101
    t = [float(line.split(",")[0]) for line in lines[1:]]
    assert t == sorted(t)


def test_empirical_measure_and_tv(mmn):
    topo, limit, fl = mmn
    sc, pol = _bsp(topo, limit, fl, 50)
    res = simulate_ctmc(topo, sc, pol, 2000, seed=2, replications=2, num_batches=16)
    m = empirical_measure(res)
    assert m.total == pytest.approx(1.0)
    assert total_variation(m, m) == 0.0
    m0 = empirical_measure(res, replication=0)
    assert 0 < total_variation(m, m0) < 0.2
    with pytest.raises(ValueError):
        empirical_measure(res, grid=BoxGrid.centered(1, cell=0.5))


def test_tail_fit_has_negative_slope(mmn):
    topo, limit, fl = mmn
    sc, pol = _bsp(topo, limit, fl, 100)
    res = simulate_ctmc(topo, sc, pol, 5000, seed=4, replications=2, num_batches=16)
    fit = tail_decay_fit(res)
    assert fit.slope < 0 and fit.r_squared > 0.8


def _overloaded_without_abandonment():
    topo = NetworkTopology(1, 1, [(0, 0)])
    limit = LimitParams(lam=[1.0], mu=[[1.0]], gamma=[0.0], nu=[1.0], lam_hat=[2.0],
                        allow_zero_abandonment=True)
    with pytest.warns(UserWarning):
        fl = solve_fluid(topo, limit)
    sc = scale_params(limit, 25, topo)
    N = np.array([[25]])
    shift = CapacityShift(N, N, np.array([25]), 1.0, np.zeros((1, 1)), 0.0, (0,), ((0,),))
    return topo, limit, fl, sc, Policy("bsp", topo, sc, fl, shift=shift)


def test_explosion_is_detected():
    topo, limit, fl, sc, pol = _overloaded_without_abandonment()
    with pytest.raises(StateExplosion):
        simulate_ctmc(topo, sc, pol, 5000, seed=0, replications=1, num_batches=20, guard=10.0)
    res = simulate_ctmc(topo, sc, pol, 5000, seed=0, replications=1, num_batches=20, guard=10.0,
                        on_explosion="flag")
    assert res.status == "exploded"
