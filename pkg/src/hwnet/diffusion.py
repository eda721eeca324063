"""Limiting controlled diffusion: drift, Lyapunov functions, generator and SDE paths."""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from .ctmc import RADIAL_BINS, RADIAL_DR, BoxGrid, CostSpec, SimulationResult, _merge
from .errors import Blowup, FitFailed
from .fluid import ell_vector, peel_schedule, psi_drift
from .rng import stream


@dataclass(frozen=True, eq=False)
class DiffusionModel:
    """``dX = b(X, U) dt + Sigma dW`` with ``Sigma = diag(sqrt(2 lam))``.

    Attributes
    ----------
    topo : NetworkTopology
    limit : LimitParams
    ell : ndarray, shape (I,)
    """

    topo: object
    limit: object
    ell: np.ndarray

    @property
    def lam(self):
        return self.limit.lam

    @property
    def gamma(self):
        return self.limit.gamma

    @property
    def sigma(self):
        return np.diag(np.sqrt(2.0 * self.limit.lam))

    def b(self, x, uc, us):
        """Drift, vectorized over leading axes of ``x``/``uc``/``us``."""
        return psi_drift(self.topo, self.limit, self.ell, x, uc, us)


def build_diffusion_model(topo, limit, fluid):
    return DiffusionModel(topo, limit, ell_vector(topo, limit, fluid))


def drift(model, x, u):
    """Drift ``b(x, u)`` for ``u = (u^c, u^s)``."""
    uc, us = u
    return model.b(x, uc, us)


# ---------------------------------------------------------------------------
# Lyapunov functions

def _blend_coeffs(kappa, r0):
    """Coefficients ``a2..a5`` of ``p(r) = sum a_k r^k`` matching ``r^kappa`` to third order at ``r0``."""
    target = [
        r0 ** kappa,
        kappa * r0 ** (kappa - 1),
        kappa * (kappa - 1) * r0 ** (kappa - 2),
        kappa * (kappa - 1) * (kappa - 2) * r0 ** (kappa - 3),
    ]
    A = np.zeros((4, 4))
    for row in range(4):
        for col, k in enumerate(range(2, 6)):
            c = 1.0
            for d in range(row):
                c *= k - d
            A[row, col] = c * r0 ** (k - row) if k - row >= 0 else 0.0
    return np.linalg.solve(A, target)


@dataclass(frozen=True, eq=False)
class LyapunovSpec:
    """Polynomial or exponential Lyapunov function with weights ``beta``.

    ``kind="polynomial"`` gives ``|x|_beta^kappa`` outside the unit ball
    (a radial quintic inside keeps it twice differentiable);
    ``kind="exponential"`` gives ``exp(eps s / sqrt(1 + s))`` with
    ``s = |x|_beta^2``.  ``delta`` is the cone parameter used by the
    structural checks.
    """

    kind: str
    beta: np.ndarray
    kappa: float = 2.0
    epsilon: float = 0.01
    delta: float = 0.1

    def __post_init__(self):
        if self.kind not in ("polynomial", "exponential"):
            raise ValueError(f"unknown Lyapunov kind {self.kind!r}")
        beta = np.asarray(self.beta, dtype=float)
        if np.any(beta <= 0):
            raise ValueError("beta must be positive")
        object.__setattr__(self, "beta", beta)
        if self.kappa < 1 or self.epsilon <= 0:
            raise ValueError("need kappa >= 1 and epsilon > 0")

    @property
    def r0(self):
        return math.sqrt(float(self.beta.min()))

    def _radial(self, r):
        """``(p, p', p'')`` of the polynomial profile at ``r``."""
        k = self.kappa
        r0 = self.r0
        a = _blend_coeffs(k, r0)
        inside = r < r0
        rs = np.where(inside, r, r0)
        ro = np.where(inside, r0, r)
        p = np.where(inside, a[0] * rs**2 + a[1] * rs**3 + a[2] * rs**4 + a[3] * rs**5, ro**k)
        dp = np.where(inside, 2 * a[0] * rs + 3 * a[1] * rs**2 + 4 * a[2] * rs**3 + 5 * a[3] * rs**4,
                      k * ro ** (k - 1))
        d2p = np.where(inside, 2 * a[0] + 6 * a[1] * rs + 12 * a[2] * rs**2 + 20 * a[3] * rs**3,
                       k * (k - 1) * ro ** (k - 2))
        # p'(r)/r, finite at the origin
        dp_over_r = np.where(inside, 2 * a[0] + 3 * a[1] * rs + 4 * a[2] * rs**2 + 5 * a[3] * rs**3,
                             k * ro ** (k - 2))
        return p, dp, d2p, dp_over_r

    def value(self, x):
        x = np.asarray(x, dtype=float)
        s = (self.beta * x * x).sum(axis=-1)
        if self.kind == "exponential":
            return np.exp(self.epsilon * s / np.sqrt(1.0 + s))
        return self._radial(np.sqrt(s))[0]

    def grad(self, x):
        x = np.asarray(x, dtype=float)
        s = (self.beta * x * x).sum(axis=-1)
        if self.kind == "exponential":
            v = np.exp(self.epsilon * s / np.sqrt(1.0 + s))
            g1 = (2.0 + s) / (2.0 * (1.0 + s) ** 1.5)
            return (v * self.epsilon * g1)[..., None] * 2.0 * self.beta * x
        _, _, _, dpr = self._radial(np.sqrt(s))
        return dpr[..., None] * self.beta * x

    def hess_diag(self, x):
        x = np.asarray(x, dtype=float)
        s = (self.beta * x * x).sum(axis=-1)
        if self.kind == "exponential":
            v = np.exp(self.epsilon * s / np.sqrt(1.0 + s))
            g1 = (2.0 + s) / (2.0 * (1.0 + s) ** 1.5)
            g2 = -(1.0 + s / 4.0) * (1.0 + s) ** -2.5
            ds = 2.0 * self.beta * x
            eg1 = (self.epsilon * g1)[..., None]
            eg2 = (self.epsilon * g2)[..., None]
            return v[..., None] * ((eg1 * ds) ** 2 + eg2 * ds**2 + eg1 * 2.0 * self.beta)
        r = np.sqrt(s)
        _, _, d2p, dpr = self._radial(r)
        bx = self.beta * x
        with np.errstate(invalid="ignore", divide="ignore"):
            w = np.where(r[..., None] > 0, bx / np.where(r > 0, r, 1.0)[..., None], 0.0)
        # d_ii p(r) = p'' (b_i x_i / r)^2 + (p'/r) (b_i - (b_i x_i)^2 / r^2)
        return d2p[..., None] * w**2 + dpr[..., None] * (self.beta - w**2)

    def describe(self):
        return {"kind": self.kind, "beta": self.beta.tolist(), "kappa": self.kappa,
                "epsilon": self.epsilon, "delta": self.delta}


@dataclass(frozen=True)
class SmoothFunction:
    """Twice-differentiable function given by value, gradient and Hessian diagonal."""

    value: object
    grad: object
    hess_diag: object

    @classmethod
    def from_lyapunov(cls, spec):
        return cls(spec.value, spec.grad, spec.hess_diag)


def generator_apply(model, f, x, u):
    """``sum_i lam_i d_ii f(x) + b_i(x, u) d_i f(x)``."""
    uc, us = u
    b = model.b(x, uc, us)
    return (model.lam * f.hess_diag(x)).sum(axis=-1) + (b * f.grad(x)).sum(axis=-1)


# ---------------------------------------------------------------------------
# structural drift checks

def corner_controls(I, J):
    """All pairs ``(e_i, e_j)``; the drift is affine in ``u`` so suprema sit here."""
    eye_c, eye_p = np.eye(I), np.eye(J)
    return [(eye_c[i], eye_p[j]) for i in range(I) for j in range(J)]


def sample_ball(I, count, radius, seed):
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xBA11]))
    d = rng.standard_normal((count, I))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    r = radius * rng.random(count) ** (1.0 / I)
    return d * r[:, None]


@dataclass(frozen=True)
class StructuralFit:
    """Fitted constants of a cone drift inequality for ``b . grad V``."""

    c0: float
    c1: float
    c2: float
    beta: tuple
    delta: float
    kappa: float
    cone: str
    samples: int
    radius: float
    ok: bool
    max_residual: float

    def to_dict(self):
        return dict(self.__dict__)


def _sup_drift_dot(model, spec, X):
    g = spec.grad(X)
    best = np.full(X.shape[0], -np.inf)
    for uc, us in corner_controls(model.topo.I, model.topo.J):
        val = (model.b(X, uc, us) * g).sum(axis=1)
        best = np.maximum(best, val)
    return best


def fit_structural(model, beta, kappa=2.0, delta=0.1, cone="two-sided", samples=100_000,
                   radius=50.0, r_inner=5.0, seed=0):
    """Fit the cone drift inequality for the polynomial Lyapunov function.

    With ``cone="two-sided"`` the inequality is
    ``sup_u b . grad V <= c0 - c1 V`` off the cone ``|e.x| > delta |x|`` and
    ``<= c0 + c2 V`` on it.  With ``cone="positive"`` the cone is
    ``e.x > delta |x|``.  ``c1`` is the smallest decay rate ``-sup/V`` over
    samples off the cone with ``|x| >= r_inner``; ``c0`` then absorbs the rest.
    """
    spec = LyapunovSpec("polynomial", beta, kappa=kappa, delta=delta)
    X = sample_ball(model.topo.I, samples, radius, seed)
    sup = _sup_drift_dot(model, spec, X)
    V = spec.value(X)
    s = X.sum(axis=1)
    nrm = np.linalg.norm(X, axis=1)
    on = (np.abs(s) > delta * nrm) if cone == "two-sided" else (s > delta * nrm)
    off = ~on
    outer = off & (nrm >= r_inner)
    if not np.any(outer):
        raise FitFailed("no samples off the cone")
    c1 = float(np.min(-sup[outer] / V[outer]))
    c0 = float(max(0.0, np.max(sup[off] + c1 * V[off])))
    c2 = float(max(1e-12, np.max((sup[on] - c0) / V[on]))) if np.any(on) else 1e-12
    bound = np.where(on, c0 + c2 * V, c0 - c1 * V)
    resid = float(np.max(sup - bound))
    return StructuralFit(c0, c1, c2, tuple(np.asarray(beta, float).tolist()), float(delta), float(kappa),
                         cone, int(samples), float(radius), bool(c1 > 0 and resid <= 1e-9), resid)


RHO_GRID = (1.0, 0.5, 0.25, 0.1, 0.05, 0.01)


def search_structural(model, elimination_order, kappa=2.0, delta=0.1, cone="two-sided",
                      samples=100_000, radius=50.0, seed=0):
    """Try ``beta_a = rho^position`` along the elimination order for each ``rho`` in a grid.

    Returns the first successful fit.

    Raises
    ------
    FitFailed
        If no weight vector in the grid yields ``c1 > 0``.
    """
    pos = np.empty(model.topo.I)
    pos[list(elimination_order)] = np.arange(model.topo.I)
    last = None
    for rho in RHO_GRID:
        beta = rho ** pos
        fit = fit_structural(model, beta, kappa, delta, cone, samples, radius, seed=seed)
        if fit.ok:
            return fit
        last = fit
    raise FitFailed("no weight vector in the search grid gives a positive decay rate", last)


@dataclass(frozen=True)
class ExponentialFit:
    c0: float
    c1: float
    epsilon: float
    beta: tuple
    samples: int
    radius: float
    ok: bool

    def to_dict(self):
        return dict(self.__dict__)


def fit_exponential_lyapunov(model, control, beta, epsilons=(0.01, 0.05, 0.1), samples=20_000,
                             radius=20.0, r_inner=3.0, seed=0):
    """Fit ``L^v V <= c0 - c1 V`` for the exponential Lyapunov function under a Markov control.

    Returns one fit per ``epsilon``.
    """
    X = sample_ball(model.topo.I, samples, radius, seed)
    U = [control(x) for x in X]
    uc = np.array([u[0] for u in U])
    us = np.array([u[1] for u in U])
    out = []
    for eps in epsilons:
        spec = LyapunovSpec("exponential", beta, epsilon=eps)
        f = SmoothFunction.from_lyapunov(spec)
        Lf = generator_apply(model, f, X, (uc, us))
        V = spec.value(X)
        nrm = np.linalg.norm(X, axis=1)
        outer = nrm >= r_inner
        c1 = float(np.min(-Lf[outer] / V[outer]))
        c0 = float(max(0.0, np.max(Lf + c1 * V)))
        out.append(ExponentialFit(c0, c1, float(eps), tuple(np.asarray(beta, float).tolist()),
                                  int(samples), float(radius), bool(c1 > 0)))
    return out


# ---------------------------------------------------------------------------
# SDE simulation

def default_step(limit):
    return 0.01 / max(float(limit.mu.max()), float(limit.gamma.max()), 1.0)


def simulate_sde(
    model,
    control,
    x0=None,
    horizon=1000.0,
    step=None,
    seed=0,
    costs=None,
    replications=1,
    burn_in_frac=0.1,
    num_batches=32,
    guard=1e3,
    grid=None,
    noise_scale=1.0,
    workers=1,
):
    """Euler-Maruyama simulation with batch-means ergodic averages.

    Returns a :class:`SimulationResult` with the same observables as the
    chain simulator (queue ``(e.x)^+ u^c``, idleness ``(e.x)^- u^s``).

    Raises
    ------
    Blowup
        If ``max_i |X_i|`` exceeds ``guard``.
    """
    topo = model.topo
    I, J = topo.I, topo.J
    h = float(step) if step is not None else default_step(model.limit)
    if h <= 0:
        raise ValueError("step must be positive")
    T = float(horizon)
    t_burn = burn_in_frac * T
    costs = costs if costs is not None else CostSpec.default(I, J)
    grid = grid if grid is not None else BoxGrid.centered(I)
    x_init = np.zeros(I) if x0 is None else np.asarray(x0, dtype=float)
    s = peel_schedule(topo)
    mu_e = np.ascontiguousarray(topo.edge_vector(model.limit.mu), dtype=float)
    ck, cp, cv, glo, gh, gs = control.kernel_args()

    def one(rep):
        rng = stream(seed, rep)
        res = K.sde_run(
            x_init.copy(), T, h, t_burn, int(num_batches), rng, float(noise_scale),
            np.ascontiguousarray(model.lam, dtype=float), np.ascontiguousarray(model.ell, dtype=float),
            mu_e, np.ascontiguousarray(model.gamma, dtype=float), J,
            np.ascontiguousarray(topo.edge_class), np.ascontiguousarray(s.edge),
            np.ascontiguousarray(s.cls), np.ascontiguousarray(s.pool), np.ascontiguousarray(s.leaf_is_class),
            ck, cp, cv, glo, gh, gs,
            costs.xi, costs.zeta, float(costs.m), float(costs.m_tilde), float(guard),
            np.asarray(grid.lo, dtype=float), float(grid.cell), np.asarray(grid.shape, dtype=np.int64),
            RADIAL_DR, RADIAL_BINS,
        )
        keys = ("status", "batches", "hist", "hist_u", "rad", "maxabs", "x", "t")
        return dict(zip(keys, res))

    if workers and workers > 1 and replications > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            outs = list(ex.map(one, range(replications)))
    else:
        outs = [one(r) for r in range(replications)]
    for r, o in enumerate(outs):
        if o["status"] == K.EXPLODED:
            raise Blowup(f"replication {r}: |X| exceeded {guard} before t={o['t']:.4g}")
    batches, est, hist, hist_u, radial, hist_reps = _merge(
        "sde", 0, T, t_burn, seed, replications, outs, J, grid, num_batches, 0)
    diagnostics = {
        "step": h,
        "max_abs_x": float(max(o["maxabs"] for o in outs)),
        "noise_scale": float(noise_scale),
        "final_states": [o["x"].tolist() for o in outs],
    }
    return SimulationResult("sde", 0, T, t_burn, int(seed), replications, est, diagnostics,
                            batches, hist, hist_u, radial, grid, "ok", None, [o["x"] for o in outs],
                            hist_reps)
