import numpy as np
import pytest
from oracles import single_class_diffusion_moment

from hwnet.ctmc import CostSpec
from hwnet.diffusion import (
    LyapunovSpec,
    SmoothFunction,
    build_diffusion_model,
    drift,
    fit_exponential_lyapunov,
    fit_structural,
    generator_apply,
    sample_ball,
    search_structural,
    simulate_sde,
)
from hwnet.errors import Blowup
from hwnet.fluid import extract_drift_matrices, solve_fluid
from hwnet.networks import random_critical_params, random_tree, single_class
from hwnet.policies import MarkovControl
from hwnet.topology import LimitParams, NetworkTopology


def test_drift_at_origin_is_ell(nnet):
    topo, limit, fl = nnet
    m = build_diffusion_model(topo, limit, fl)
    rng = np.random.default_rng(0)
    for _ in range(10):
        u = (rng.dirichlet(np.ones(2)), rng.dirichlet(np.ones(2)))
        assert np.allclose(drift(m, np.zeros(2), u), m.ell)


def test_scalar_drift_values():
    topo, limit = single_class(mu=2.0, gamma=0.5)
    m = build_diffusion_model(topo, limit, solve_fluid(topo, limit))
    u = (np.array([1.0]), np.array([1.0]))
    assert drift(m, np.array([1.0]), u)[0] == pytest.approx(-0.5)
    assert drift(m, np.array([-1.0]), u)[0] == pytest.approx(2.0)


def test_piecewise_affine_along_rays():
    rng = np.random.default_rng(1)
    for _ in range(10):
        topo = random_tree(rng, 4, 4)
        limit, _ = random_critical_params(topo, rng)
        m = build_diffusion_model(topo, limit, solve_fluid(topo, limit))
        x = rng.normal(size=topo.I)
        u = (rng.dirichlet(np.ones(topo.I)), rng.dirichlet(np.ones(topo.J)))
        for sign in (1.0, -1.0):
            ts = sign * np.array([0.5, 1.0, 2.0, 3.0])
            b = np.array([drift(m, t * x, u) for t in ts])
            slope = (b[1] - b[0]) / (ts[1] - ts[0])
            pred = b[0] + np.outer(ts - ts[0], slope)
            assert np.max(np.abs(b - pred)) < 1e-12 * max(1.0, np.abs(b).max()) * 10


def test_lipschitz_in_x(nnet):
    topo, limit, fl = nnet
    m = build_diffusion_model(topo, limit, fl)
    rng = np.random.default_rng(2)
    u = (np.array([0.3, 0.7]), np.array([0.6, 0.4]))
    X = rng.normal(scale=5, size=(500, 2))
    Y = X + rng.normal(scale=0.1, size=(500, 2))
    bx = m.b(X, *u)
    by = m.b(Y, *u)
    ratio = np.linalg.norm(bx - by, axis=1) / np.linalg.norm(X - Y, axis=1)
    assert ratio.max() < 10.0


def test_drift_matches_matrix_form(mnet):
    topo, limit, fl = mnet
    m = build_diffusion_model(topo, limit, fl)
    dm = extract_drift_matrices(topo, limit, fl)
    rng = np.random.default_rng(3)
    X = rng.normal(scale=4, size=(1000, 2))
    uc = rng.dirichlet(np.ones(2), size=1000)
    us = rng.dirichlet(np.ones(3), size=1000)
    assert np.max(np.abs(m.b(X, uc, us) - dm.drift(X, uc, us))) <= 1e-10


def test_lyapunov_shapes_and_smoothness():
    beta = np.array([1.0, 0.5])
    spec = LyapunovSpec("polynomial", beta, kappa=3)
    rng = np.random.default_rng(4)
    X = rng.normal(scale=5, size=(200, 2))
    far = np.sqrt((beta * X * X).sum(axis=1)) >= 1
    assert np.allclose(spec.value(X)[far], np.sqrt((beta * X[far] ** 2).sum(axis=1)) ** 3)
    # finite-difference check of gradient and Hessian diagonal, including the blend region
    for kind in ("polynomial", "exponential"):
        s = LyapunovSpec(kind, beta, kappa=2.5, epsilon=0.1)
        for x in list(X[:20] * 0.1) + list(X[:20]):
            h = 1e-5
            for i in range(2):
                e = np.eye(2)[i] * h
                g = (s.value(x + e) - s.value(x - e)) / (2 * h)
                assert g == pytest.approx(s.grad(x)[i], rel=1e-5, abs=1e-7)
                d2 = (s.value(x + e) - 2 * s.value(x) + s.value(x - e)) / h**2
                assert d2 == pytest.approx(s.hess_diag(x)[i], rel=1e-3, abs=1e-4)


def test_generator_examples(nnet):
    topo, limit, fl = nnet
    m = build_diffusion_model(topo, limit, fl)
    rng = np.random.default_rng(5)
    X = rng.normal(scale=8, size=(100, 2))
    u = (np.array([0.5, 0.5]), np.array([0.2, 0.8]))
    const = SmoothFunction(lambda x: np.ones(x.shape[:-1]), lambda x: np.zeros(x.shape),
                           lambda x: np.zeros(x.shape))
    assert np.all(generator_apply(m, const, X, u) == 0)
    lin = SmoothFunction(lambda x: x[..., 1], lambda x: np.broadcast_to([0.0, 1.0], x.shape),
                         lambda x: np.zeros(x.shape))
    assert np.allclose(generator_apply(m, lin, X, u), m.b(X, *u)[:, 1])
    beta = np.array([1.0, 0.5])
    V = SmoothFunction.from_lyapunov(LyapunovSpec("polynomial", beta, kappa=2))
    big = X[np.sqrt((beta * X * X).sum(axis=1)) > 1.5]
    expect = (2 * m.lam * beta).sum() + (2 * beta * m.b(big, *u) * big).sum(axis=1)
    assert np.allclose(generator_apply(m, V, big, u), expect)


def test_structural_fit_succeeds_on_reference_networks(nnet, mnet):
    for topo, limit, fl in (nnet, mnet):
        m = build_diffusion_model(topo, limit, fl)
        order = extract_drift_matrices(topo, limit, fl).elimination_order
        for cone in ("two-sided", "positive"):
            fit = search_structural(m, order, delta=0.1, cone=cone, samples=20_000)
            assert fit.ok and fit.c1 > 0 and fit.max_residual <= 1e-9


def test_structural_fit_fails_without_restoring_force():
    topo = NetworkTopology(1, 1, [(0, 0)])
    limit = LimitParams(lam=[1.0], mu=[[1.0]], gamma=[0.0], nu=[1.0], allow_zero_abandonment=True)
    with pytest.warns(UserWarning):
        fl = solve_fluid(topo, limit)
    m = build_diffusion_model(topo, limit, fl)
    # with no abandonment nothing pulls positive states back: the cone must absorb them
    fit = fit_structural(m, [1.0], cone="positive", samples=5000)
    assert fit.c1 > 0
    fit2 = fit_structural(m, [1.0], cone="two-sided", delta=2.0, samples=5000)
    assert not fit2.ok


def test_exponential_fit_for_stabilizing_control(mmn):
    topo, limit, fl = mmn
    m = build_diffusion_model(topo, limit, fl)
    fits = fit_exponential_lyapunov(m, MarkovControl.constant([1.0], [1.0]), [1.0], samples=5000)
    assert all(f.ok for f in fits)


def test_sample_ball_is_inside():
    X = sample_ball(3, 1000, 2.0, 0)
    assert np.all(np.linalg.norm(X, axis=1) <= 2.0)


def test_sde_matches_stationary_quadrature(mmn):
    topo, limit, fl = mmn
    m = build_diffusion_model(topo, limit, fl)
    res = simulate_sde(m, MarkovControl.constant([1.0], [1.0]), horizon=5000, seed=1, replications=4)
    truth = single_class_diffusion_moment(0.0, 1.0, 1.0, 1.0, lambda x: max(x, 0.0))
    est = res.estimates["sum_pos"]
    assert abs(est.estimate - truth) <= 3 * est.half_width


def test_sde_zero_noise_converges_to_equilibrium():
    topo, limit = single_class(gamma=2.0, lam_hat=1.0)
    m = build_diffusion_model(topo, limit, solve_fluid(topo, limit))
    res = simulate_sde(m, MarkovControl.constant([1.0], [1.0]), x0=[5.0], horizon=40, seed=0,
                       noise_scale=0.0, num_batches=20)
    assert res.final_states[0][0] == pytest.approx(0.5, abs=1e-6)


def test_sde_step_refinement(mmn):
    topo, limit, fl = mmn
    m = build_diffusion_model(topo, limit, fl)
    c = MarkovControl.constant([1.0], [1.0])
    cost = CostSpec([1.0], [0.0])
    a = simulate_sde(m, c, horizon=4000, step=0.02, seed=3, replications=4, costs=cost).estimates["J"]
    b = simulate_sde(m, c, horizon=4000, step=0.01, seed=3, replications=4, costs=cost).estimates["J"]
    assert abs(a.estimate - b.estimate) < max(a.half_width, b.half_width)


def test_sde_blowup_guard():
    topo = NetworkTopology(1, 1, [(0, 0)])
    limit = LimitParams(lam=[1.0], mu=[[1.0]], gamma=[0.0], nu=[1.0], lam_hat=[5.0],
                        allow_zero_abandonment=True)
    with pytest.warns(UserWarning):
        fl = solve_fluid(topo, limit)
    m = build_diffusion_model(topo, limit, fl)
    with pytest.raises(Blowup):
        simulate_sde(m, MarkovControl.constant([1.0], [1.0]), horizon=1000, seed=0, guard=50.0,
                     num_batches=20)
