import math

import numpy as np
import pytest
from oracles import m_network_closed_form

from hwnet.errors import DomainViolation, InfeasibleShift, NoAnchorClass, OutsideJWC
from hwnet.fluid import solve_fluid
from hwnet.networks import m_network, random_critical_params, random_tree, single_class
from hwnet.policies import (
    MarkovControl,
    bsp_decide,
    build_capacity_shift,
    canonical_jwc_decide,
    certify_jwc_region,
    concatenated_decide,
    is_admissible,
    largest_remainder,
    make_bsp,
    make_canonical,
    make_concatenated,
    queue_idle,
    rounding_map,
)
from hwnet.topology import scale_params


def test_rounding_map_examples():
    assert rounding_map([1.7, 2.3]).tolist() == [1, 3]
    assert rounding_map([4.0, 0.0, 2.0]).tolist() == [4, 0, 2]
    assert rounding_map([0.5, 0.5, 1.0]).tolist() == [0, 0, 2]
    with pytest.raises(DomainViolation):
        rounding_map([0.5, 0.2])


def test_largest_remainder_preserves_total():
    rng = np.random.default_rng(0)
    for _ in range(100):
        w = rng.dirichlet(np.ones(4))
        tot = int(rng.integers(0, 500))
        out = largest_remainder(w * tot, tot)
        assert out.sum() == tot and np.all(np.abs(out - w * tot) < 1)


def test_all_abandoning_classes_keep_nominal_split(mmn):
    topo, limit, fl = mmn
    sc = scale_params(limit, 100, topo)
    sh = build_capacity_shift(topo, sc, fl, 1.0)
    assert np.array_equal(sh.N_tilde_ij, sh.N_ij)


def test_n_network_shift_margin(nnet):
    topo, limit, fl = nnet
    C = 1.0
    sc = scale_params(limit, 400, topo)
    sh = build_capacity_shift(topo, sc, fl, C)
    gain = (sc.mu_n[0] * (sh.N_tilde_ij[0] - sh.N_ij[0])).sum()
    assert gain >= 2 * C * 20
    assert np.array_equal(sh.N_tilde_ij.sum(axis=0), sc.N_n)
    assert np.allclose(sh.psi.sum(axis=0), 0.0, atol=0)


def test_shift_on_random_networks():
    rng = np.random.default_rng(21)
    for _ in range(30):
        topo = random_tree(rng, 4, 4)
        limit, _ = random_critical_params(topo, rng)
        fl = solve_fluid(topo, limit)
        sc = scale_params(limit, 10_000, topo)
        try:
            sh = build_capacity_shift(topo, sc, fl, 0.5)
        except InfeasibleShift:
            continue
        assert np.array_equal(sh.N_tilde_ij.sum(axis=0), sc.N_n)
        assert np.all(np.abs(sh.psi.sum(axis=0)) < 1e-12)
        gain = (sc.mu_n * (sh.N_tilde_ij - sh.N_ij)).sum(axis=1)
        assert np.all(gain[limit.gamma == 0] >= 2 * 0.5 * 100)


def test_no_anchor_and_infeasible_shift(nnet):
    topo, limit, fl = nnet
    sc = scale_params(limit, 4, topo)
    with pytest.raises(InfeasibleShift):
        build_capacity_shift(topo, sc, fl, 50.0)
    from dataclasses import replace

    sc0 = replace(sc, gamma_n=np.zeros(2))
    with pytest.raises(NoAnchorClass):
        build_capacity_shift(topo, sc0, fl, 1.0)


def _check_bsp(topo, sc, sh, x, z):
    assert is_admissible(topo, sc.N_n, x, z)
    for i in range(topo.I):
        row = z[i, topo.pools_of(i)]
        nt = sh.N_tilde_ij[i, topo.pools_of(i)]
        if x[i] <= sh.N_tilde_i[i]:
            assert np.all(row <= nt) and row.sum() == x[i]
        else:
            assert np.all(row >= nt)


def test_bsp_constraints_on_random_states(nnet, mnet):
    rng = np.random.default_rng(2)
    for topo, limit, fl in (nnet, mnet):
        for n in (50, 100, 200):
            sc = scale_params(limit, n, topo)
            sh = build_capacity_shift(topo, sc, fl, 1.0)
            for _ in range(300):
                x = rng.integers(0, 4 * n, size=topo.I)
                _check_bsp(topo, sc, sh, x, bsp_decide(x, sh, sc, topo))


def test_bsp_trivial_states(mnet):
    topo, limit, fl = mnet
    sc = scale_params(limit, 100, topo)
    sh = build_capacity_shift(topo, sc, fl, 1.0)
    assert np.all(bsp_decide(np.zeros(2, int), sh, sc, topo) == 0)
    assert np.array_equal(bsp_decide(sh.N_tilde_i, sh, sc, topo), sh.N_tilde_ij)


def test_m_network_closed_form(mnet):
    topo, limit, fl = mnet
    rng = np.random.default_rng(7)
    sc = scale_params(limit, 100, topo)
    sh = build_capacity_shift(topo, sc, fl, 1.0)
    for _ in range(1000):
        x = rng.integers(0, 300, size=2)
        assert np.array_equal(bsp_decide(x, sh, sc, topo), m_network_closed_form(x, sc.N_n, sh.N_tilde_ij))


def test_batch_decisions_match_single(nnet):
    topo, limit, fl = nnet
    sc = scale_params(limit, 100, topo)
    sh = build_capacity_shift(topo, sc, fl, 1.0)
    pol = make_bsp(topo, sc, fl, sh)
    X = np.random.default_rng(1).integers(0, 400, size=(200, 2))
    Z, codes = pol.decide_many(X)
    assert np.all(codes == 0)
    for x, z in zip(X, Z):
        assert np.array_equal(topo.edge_matrix(z), bsp_decide(x, sh, sc, topo))


def test_markov_control_kinds():
    c = MarkovControl.constant([0.25, 0.75], [1.0])
    uc, us = c(np.array([3.0, -1.0]))
    assert uc.tolist() == [0.25, 0.75] and us.tolist() == [1.0]
    with pytest.raises(DomainViolation):
        MarkovControl.constant([0.5, 0.6], [1.0])
    f = MarkovControl.closed_form(lambda x: (np.array([1.0, 0.0]) if x[0] > 0 else np.array([0.0, 1.0]),
                                              np.array([1.0])), 2, 1, lo=-2, hi=2, h=0.5)
    assert f(np.array([1.0, 0.0]))[0].tolist() == [1.0, 0.0]
    assert f(np.array([-1.0, 0.0]))[0].tolist() == [0.0, 1.0]


def test_canonical_is_jointly_work_conserving(nnet):
    topo, limit, fl = nnet
    n = 100
    sc = scale_params(limit, n, topo)
    v = MarkovControl.constant([0.5, 0.5], [0.3, 0.7])
    reg = certify_jwc_region(topo, sc, fl)
    assert reg.M0 > 0
    rng = np.random.default_rng(4)
    nx = n * fl.x_star
    hits = 0
    for _ in range(500):
        x = np.maximum(np.floor(nx + rng.normal(scale=2 * math.sqrt(n), size=2)).astype(int), 0)
        if not reg.contains(x):
            continue
        hits += 1
        z = canonical_jwc_decide(x, v, sc, fl, topo)
        q, y = queue_idle(topo, sc.N_n, x, z)
        assert np.all(q >= 0) and np.all(y >= 0)
        assert min(q.sum(), y.sum()) == 0
    assert hits > 100


def test_canonical_outside_region_raises():
    topo, limit = m_network()
    fl = solve_fluid(topo, limit)
    sc = scale_params(limit, 20, topo)
    v = MarkovControl.constant([1.0, 0.0], [1.0, 0.0, 0.0])
    with pytest.raises(OutsideJWC):
        # everything queued at class 0 while class 1 is empty cannot be pooled
        canonical_jwc_decide(np.array([80, 0]), v, sc, fl, topo)
    pol = make_canonical(topo, sc, fl, v)
    with pytest.raises(OutsideJWC):
        pol.decide(np.array([80, 0]))


def test_concatenated_switches_at_region_boundary(nnet):
    topo, limit, fl = nnet
    sc = scale_params(limit, 100, topo)
    sh = build_capacity_shift(topo, sc, fl, 1.0)
    v = MarkovControl.constant([0.5, 0.5], [0.5, 0.5])
    reg = certify_jwc_region(topo, sc, fl)
    pol = make_concatenated(topo, sc, fl, sh, v, reg)
    inside = np.floor(100 * fl.x_star).astype(int)
    far = inside + np.array([int(reg.radius) + 5, 0])
    assert np.array_equal(pol.decide(inside), canonical_jwc_decide(inside, v, sc, fl, topo))
    assert np.array_equal(pol.decide(far), bsp_decide(far, sh, sc, topo))
    assert np.array_equal(concatenated_decide(far, v, sh, sc, fl, reg, topo), bsp_decide(far, sh, sc, topo))


def test_single_class_region_is_capped():
    topo, limit = single_class()
    fl = solve_fluid(topo, limit)
    reg = certify_jwc_region(topo, scale_params(limit, 100, topo), fl)
    assert reg.capped
