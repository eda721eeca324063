import numpy as np
import pytest
from oracles import dense_psi, exact_fluid

from hwnet.errors import DomainViolation, NotCriticallyLoaded, ResourcePoolingViolated
from hwnet.fluid import (
    extract_drift_matrices,
    psi_drift,
    psi_edges,
    psi_map,
    solve_fluid,
    triangular_order,
)
from hwnet.networks import random_critical_params, random_tree, single_class
from hwnet.topology import LimitParams, NetworkTopology


def test_n_network_fluid_matches_exact_solution(nnet):
    topo, limit, fl = nnet
    xi, x = exact_fluid(2, 2, topo.edges, limit.lam, limit.mu, limit.nu)
    assert np.allclose(fl.xi_star, xi, atol=1e-12)
    assert np.allclose(fl.x_star, x, atol=1e-12)
    assert np.allclose(fl.z_star, [[1.0, 0.5], [0.0, 1.5]])


def test_fluid_invariants_on_random_networks():
    rng = np.random.default_rng(11)
    for _ in range(100):
        topo = random_tree(rng)
        limit, xi_true = random_critical_params(topo, rng)
        fl = solve_fluid(topo, limit)
        assert np.allclose(fl.xi_star, xi_true, atol=1e-9)
        assert np.allclose(fl.xi_star.sum(axis=0), 1.0, atol=1e-9)
        assert np.all(fl.xi_star[topo.adjacency] > 0)
        assert np.all(fl.xi_star[~topo.adjacency] == 0)
        assert np.allclose((limit.mu * fl.z_star).sum(axis=1), limit.lam, atol=1e-9)


def test_not_critically_loaded():
    topo, limit = single_class()
    bad = LimitParams(lam=[1.0], mu=[[1.0]], gamma=[1.0], nu=[2.0])
    with pytest.raises(NotCriticallyLoaded):
        solve_fluid(topo, bad)


def test_resource_pooling_violation():
    # class 1 demand is covered by its dedicated pool, leaving no room on edge (0, 1)
    topo = NetworkTopology(2, 2, [(0, 0), (0, 1), (1, 1)])
    limit = LimitParams(lam=[1.0, 1.0], mu=[[1, 1], [0, 1]], gamma=[1, 1], nu=[1.0, 1.0])
    with pytest.raises(ResourcePoolingViolated):
        solve_fluid(topo, limit)


def test_psi_examples(nnet):
    topo = nnet[0]
    out = psi_map(topo, np.array([3, 1]), np.array([2, 2]))
    assert out.dtype.kind == "i"
    assert out.tolist() == [[2, 1], [0, 1]]
    assert psi_map(topo, np.zeros(2, int), np.zeros(2, int)).tolist() == [[0, 0], [0, 0]]
    with pytest.raises(DomainViolation):
        psi_map(topo, np.array([3, 1]), np.array([2, 1]))


def test_psi_matches_dense_solve_and_is_linear():
    rng = np.random.default_rng(5)
    for _ in range(50):
        topo = random_tree(rng)
        a = rng.normal(size=topo.I)
        b = rng.normal(size=topo.J)
        b += (a.sum() - b.sum()) / topo.J
        ref = dense_psi(topo.I, topo.J, topo.edges, a, b)
        assert np.allclose(psi_map(topo, a, b), ref, atol=1e-10)
        a2 = rng.normal(size=topo.I)
        b2 = rng.normal(size=topo.J)
        b2 += (a2.sum() - b2.sum()) / topo.J
        lhs = psi_edges(topo, 2 * a - 3 * a2, 2 * b - 3 * b2)
        rhs = 2 * psi_edges(topo, a, b) - 3 * psi_edges(topo, a2, b2)
        assert np.allclose(lhs, rhs, atol=1e-10)


def test_psi_vectorized_over_batches():
    rng = np.random.default_rng(6)
    topo = random_tree(rng, 5, 5)
    A = rng.integers(0, 10, size=(30, topo.I))
    B = np.zeros((30, topo.J), dtype=np.int64)
    B[:, 0] = A.sum(axis=1)
    batch = psi_edges(topo, A, B)
    for k in range(30):
        assert np.array_equal(batch[k], psi_edges(topo, A[k], B[k]))


def test_scalar_drift_matrices():
    topo, limit = single_class(mu=2.0, gamma=0.5)
    fl = solve_fluid(topo, limit)
    dm = extract_drift_matrices(topo, limit, fl)
    assert dm.B1.tolist() == [[2.0]]
    assert dm.B2.tolist() == [[0.0]]
    ell = dm.ell
    assert psi_drift(topo, limit, ell, [1.0], [1.0], [1.0])[0] == pytest.approx(-0.5)
    assert psi_drift(topo, limit, ell, [-1.0], [1.0], [1.0])[0] == pytest.approx(2.0)


def test_drift_reconstruction_on_random_networks():
    rng = np.random.default_rng(8)
    for _ in range(20):
        topo = random_tree(rng, 4, 4)
        limit, _ = random_critical_params(topo, rng)
        fl = solve_fluid(topo, limit)
        dm = extract_drift_matrices(topo, limit, fl)
        X = rng.normal(scale=5, size=(1000, topo.I))
        uc = rng.dirichlet(np.ones(topo.I), size=1000)
        us = rng.dirichlet(np.ones(topo.J), size=1000)
        direct = psi_drift(topo, limit, dm.ell, X, uc, us)
        assert np.max(np.abs(direct - dm.drift(X, uc, us))) <= 1e-10
        P = dm.permuted_B1()
        assert np.allclose(P, np.tril(P)) and np.all(np.diag(P) > 0)


def test_n_network_drift_matrices(nnet):
    topo, limit, fl = nnet
    dm = extract_drift_matrices(topo, limit, fl)
    assert np.allclose(dm.B1, np.eye(2))
    assert np.allclose(dm.B2, 0.0)
    assert dm.elimination_order == (0, 1)


def test_triangular_order_rejects_cyclic_dependence():
    assert triangular_order(np.array([[1.0, 1.0], [1.0, 1.0]])) is None
    assert triangular_order(np.array([[1.0, 0.0], [0.5, 2.0]])) == (0, 1)
