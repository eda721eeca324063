"""Exact event-by-event simulation of the headcount chain at scale ``n``."""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from .errors import InsufficientTail, OutsideJWC, StateExplosion
from .rng import stream
from .stats import batch_means_estimate

KAPPAS = K.KAPPAS


@dataclass(frozen=True, eq=False)
class CostSpec:
    """Running-cost data.

    Parameters
    ----------
    xi : array_like, shape (I,)
        Positive queue weights.
    zeta : array_like, shape (J,)
        Nonnegative idleness weights.
    m, m_tilde : float
        Exponents of the queueing/idleness cost and of the per-pool idleness
        constraint functionals.
    theta : array_like, shape (J,), optional
        Fairness target (positive, sums to one).
    delta : array_like, shape (J,), optional
        Idleness constraint levels (positive).
    """

    xi: np.ndarray
    zeta: np.ndarray
    m: float = 1.0
    m_tilde: float = 1.0
    theta: np.ndarray = None
    delta: np.ndarray = None

    def __post_init__(self):
        object.__setattr__(self, "xi", np.asarray(self.xi, dtype=float))
        object.__setattr__(self, "zeta", np.asarray(self.zeta, dtype=float))
        if np.any(self.xi <= 0):
            raise ValueError("queue weights xi must be positive")
        if np.any(self.zeta < 0):
            raise ValueError("idleness weights zeta must be nonnegative")
        if self.m < 1 or self.m_tilde < 1:
            raise ValueError("cost exponents must be at least 1")
        if self.theta is not None:
            th = np.asarray(self.theta, dtype=float)
            if np.any(th <= 0) or abs(th.sum() - 1.0) > 1e-9:
                raise ValueError("fairness target theta must be positive and sum to one")
            object.__setattr__(self, "theta", th)
        if self.delta is not None:
            de = np.asarray(self.delta, dtype=float)
            if np.any(de <= 0):
                raise ValueError("constraint levels delta must be positive")
            object.__setattr__(self, "delta", de)

    @classmethod
    def default(cls, I, J):
        return cls(np.ones(I), np.zeros(J))

    def describe(self):
        d = {"xi": self.xi.tolist(), "zeta": self.zeta.tolist(), "m": self.m, "m_tilde": self.m_tilde}
        if self.theta is not None:
            d["theta"] = self.theta.tolist()
        if self.delta is not None:
            d["delta"] = self.delta.tolist()
        return d


def observable_names(J):
    """Names of the time-averaged observables, in accumulator order."""
    names = ["J", "J_o", "in_region", "sum_pos", "sum_neg"]
    names += [f"x_norm^{k}" for k in KAPPAS]
    names += [f"one_q_y^{k}" for k in KAPPAS]
    names += [f"one_q^{k}" for k in KAPPAS]
    names += [f"y_norm^{k}" for k in KAPPAS]
    names += [f"J_c[{j}]" for j in range(J)]
    return names


@dataclass(frozen=True)
class EventRates:
    """Transition rates at one state: arrivals, per-edge services, abandonments."""

    arrival: np.ndarray
    service: np.ndarray
    abandon: np.ndarray

    @property
    def total(self):
        return float(self.arrival.sum() + self.service.sum() + self.abandon.sum())


def event_rates(x, z, scaled):
    """Rates of the chain at headcount ``x`` with allocation ``z`` (``I x J``)."""
    x = np.asarray(x)
    z = np.asarray(z)
    q = x - z.sum(axis=1)
    return EventRates(
        arrival=np.asarray(scaled.lam_n, dtype=float).copy(),
        service=scaled.mu_n * z,
        abandon=scaled.gamma_n * q,
    )


@dataclass(frozen=True)
class BoxGrid:
    """Regular grid of cells in scaled coordinates, shared by CTMC and SDE histograms."""

    lo: tuple
    cell: float
    shape: tuple

    @classmethod
    def centered(cls, I, half_width=8.0, cell=0.25):
        k = int(round(2 * half_width / cell))
        return cls(tuple([-half_width] * I), float(cell), tuple([k] * I))

    def centers(self):
        axes = [self.lo[i] + self.cell * (np.arange(self.shape[i]) + 0.5) for i in range(len(self.shape))]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def describe(self):
        return {"lo": list(self.lo), "cell": self.cell, "shape": list(self.shape)}


RADIAL_DR = 0.01
RADIAL_BINS = 5000


@dataclass(eq=False)
class SimulationResult:
    """Summary of one or more replications of a simulated path.

    Attributes
    ----------
    estimates : dict of str -> ErgodicEstimate
        Time averages after burn-in, keyed by :func:`observable_names`.
    diagnostics : dict
    batches : ndarray, shape (R, B, K)
        Per-replication batch means.
    hist : ndarray
        Occupation time per grid cell (last entry: time outside the box).
    hist_u : ndarray
        Time-weighted control parameterization per cell.
    radial : ndarray
        Occupation time of the scaled norm in bins of width ``RADIAL_DR``.
    """

    kind: str
    n: int
    horizon: float
    burn_in: float
    seed: int
    replications: int
    estimates: dict
    diagnostics: dict
    batches: np.ndarray
    hist: np.ndarray
    hist_u: np.ndarray
    radial: np.ndarray
    grid: BoxGrid
    status: str = "ok"
    event_log: dict = field(default=None, repr=False)
    final_states: list = field(default=None, repr=False)
    hist_reps: list = field(default=None, repr=False)

    def estimate(self, name):
        return self.estimates[name]

    def summary(self):
        """JSON-ready dictionary (no arrays beyond short vectors)."""
        return {
            "kind": self.kind,
            "n": self.n,
            "horizon": self.horizon,
            "burn_in": self.burn_in,
            "seed": self.seed,
            "replications": self.replications,
            "status": self.status,
            "estimates": {k: v.to_dict() for k, v in sorted(self.estimates.items())},
            "diagnostics": self.diagnostics,
        }


def _merge(kind, n, T, t_burn, seed, reps, outs, J, grid, nbatch, log):
    names = observable_names(J)
    blen = (T - t_burn) / nbatch
    batches = np.stack([o["batches"] / blen for o in outs])
    seeds = tuple((seed, r) for r in range(reps))
    est = {}
    for k, name in enumerate(names):
        est[name] = batch_means_estimate(batches[:, :, k], T, t_burn, seeds)
    hist = sum(o["hist"] for o in outs)
    hist_u = sum(o["hist_u"] for o in outs)
    radial = sum(o["rad"] for o in outs)
    return batches, est, hist, hist_u, radial, [o["hist"] for o in outs]


def _initial_state(scaled, fluid, x0):
    if x0 is None:
        return np.floor(scaled.n * fluid.x_star + 0.5).astype(np.int64)
    x0 = np.asarray(x0, dtype=np.int64)
    if np.any(x0 < 0):
        raise ValueError("initial headcounts must be nonnegative")
    return x0


def simulate_ctmc(
    topo,
    scaled,
    policy,
    horizon,
    seed,
    costs=None,
    fluid=None,
    replications=1,
    burn_in_frac=0.1,
    num_batches=32,
    x0=None,
    guard=None,
    grid=None,
    event_log=0,
    workers=1,
    on_explosion="raise",
):
    """Simulate the chain under a stationary policy and estimate long-run averages.

    Parameters
    ----------
    topo, scaled : network and its scale-``n`` parameters
    policy : Policy
    horizon : float
        Simulated time ``T`` per replication.
    seed : int
        Replication ``r`` uses the stream keyed by ``(seed, r)``.
    costs : CostSpec, optional
    fluid : FluidSolution
        Centres the diffusion scaling; defaults to ``policy.fluid``.
    replications : int
    burn_in_frac : float
        Fraction of ``horizon`` discarded before averaging.
    num_batches : int
        Batches per replication.
    x0 : array_like of int, optional
        Initial headcounts; defaults to the rounded fluid equilibrium.
    guard : float, optional
        Explosion threshold on ``max_i |x_hat_i|``; default ``1e6 / sqrt(n)``.
    grid : BoxGrid, optional
        Occupation histogram cells; default ``[-8, 8]^I`` with cell ``0.25``.
    event_log : int
        Record up to this many events per replication.
    workers : int
        Threads used for replications (the kernel releases the GIL).
    on_explosion : {"raise", "flag"}

    Returns
    -------
    SimulationResult

    Raises
    ------
    StateExplosion
        When the scaled state leaves the guard box and ``on_explosion="raise"``.
    OutsideJWC
        A pure canonical policy reached a state without a feasible allocation.
    """
    fluid = fluid if fluid is not None else policy.fluid
    if fluid is None:
        raise ValueError("the fluid solution is needed to centre the scaling")
    T = float(horizon)
    t_burn = burn_in_frac * T
    if not (0 <= t_burn < T):
        raise ValueError("horizon must exceed the burn-in")
    if num_batches * replications < 20:
        raise ValueError("need at least 20 batches in total")
    costs = costs if costs is not None else CostSpec.default(topo.I, topo.J)
    grid = grid if grid is not None else BoxGrid.centered(topo.I)
    n = scaled.n
    guard = guard if guard is not None else 1e6 / math.sqrt(n)
    x_init = _initial_state(scaled, fluid, x0)
    nz_e = np.ascontiguousarray(topo.edge_vector(n * fluid.z_star), dtype=float)
    mu_e = np.ascontiguousarray(topo.edge_vector(scaled.mu_n), dtype=float)
    pa = policy.kernel_args
    (N, pol_kind, ntil_e, ntil_i, ord_ptr, ord_edges, elim, ecls, epool,
     s_edge, s_cls, s_pool, s_leafc, ck, cp, cv, glo, gh, gs, nx, sqn, radius) = pa

    def one(rep):
        rng = stream(seed, rep)
        res = K.ctmc_run(
            x_init.copy(), T, t_burn, int(num_batches), rng,
            np.ascontiguousarray(scaled.lam_n, dtype=float), mu_e,
            np.ascontiguousarray(scaled.gamma_n, dtype=float), N,
            pol_kind, ntil_e, ntil_i, ord_ptr, ord_edges, elim,
            ecls, epool, s_edge, s_cls, s_pool, s_leafc,
            ck, cp, cv, glo, gh, gs,
            nx, nz_e, sqn, radius,
            costs.xi, costs.zeta, float(costs.m), float(costs.m_tilde), float(guard),
            np.asarray(grid.lo, dtype=float), float(grid.cell), np.asarray(grid.shape, dtype=np.int64),
            RADIAL_DR, RADIAL_BINS, int(event_log),
        )
        keys = ("status", "batches", "hist", "hist_u", "rad", "diag", "x", "counts",
                "log_t", "log_kind", "log_idx", "log_x")
        return dict(zip(keys, res))

    if workers and workers > 1 and replications > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            outs = list(ex.map(one, range(replications)))
    else:
        outs = [one(r) for r in range(replications)]

    diag_all = np.stack([o["diag"] for o in outs])
    status = "ok"
    for r, o in enumerate(outs):
        if o["status"] == K.OUTSIDE_JWC:
            raise OutsideJWC(f"replication {r}: canonical allocation infeasible at x={o['x'].tolist()}")
        if o["status"] == K.EXPLODED:
            status = "exploded"
            if on_explosion == "raise":
                raise StateExplosion(
                    f"replication {r}: max |x_hat| = {o['diag'][0]:.4g} exceeded guard {guard:.4g} at n={n}"
                )
    diagnostics = {
        "max_xhat_inf": float(diag_all[:, 0].max()),
        "max_xhat_2": float(diag_all[:, 1].max()),
        "max_jwc_ratio": float(diag_all[:, 2].max()),
        "jwc_ratio_per_rep": diag_all[:, 2].tolist(),
        "balance_violations": int(diag_all[:, 3].sum()),
        "work_conservation_violations": int(diag_all[:, 4].sum()),
        "jwc_violations": int(diag_all[:, 5].sum()),
        "canonical_fallbacks": int(diag_all[:, 6].sum()),
        "events": int(diag_all[:, 7].sum()),
        "guard": float(guard),
        "x0": x_init.tolist(),
        "x0_hat_norm": float(np.linalg.norm((x_init - n * fluid.x_star) / math.sqrt(n))),
    }
    if status != "ok":
        return SimulationResult("ctmc", n, T, t_burn, int(seed), replications, {}, diagnostics,
                                np.zeros((0, 0, 0)), None, None, None, grid, status)
    batches, est, hist, hist_u, radial, hist_reps = _merge(
        "ctmc", n, T, t_burn, seed, replications, outs, topo.J, grid, num_batches, event_log)
    diagnostics["fraction_in_region"] = est["in_region"].estimate
    log = None
    if event_log:
        log = {}
        for r, o in enumerate(outs):
            m = min(int(o["diag"][7]), int(event_log))
            log[r] = {"t": o["log_t"][:m], "kind": o["log_kind"][:m], "index": o["log_idx"][:m],
                      "x": o["log_x"][:m]}
    return SimulationResult(
        "ctmc", n, T, t_burn, int(seed), replications, est, diagnostics, batches,
        hist, hist_u, radial, grid, status, log, [o["x"] for o in outs], hist_reps,
    )


def write_event_log(result, path, replication=0):
    """Write the recorded events of one replication as CSV."""
    import csv

    log = result.event_log[replication]
    I = log["x"].shape[1] if log["x"].ndim == 2 else 0
    kinds = {0: "arrival", 1: "service", 2: "abandon"}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time", "event", "index"] + [f"x{i}" for i in range(I)])
        for t, k, idx, x in zip(log["t"], log["kind"], log["index"], log["x"]):
            w.writerow([repr(float(t)), kinds[int(k)], int(idx)] + [int(v) for v in x])


@dataclass(frozen=True, eq=False)
class EmpiricalMeasure:
    """Normalized occupation measure on a grid.

    Attributes
    ----------
    grid : BoxGrid
    mass : ndarray, shape ``grid.shape``
        Fraction of post-burn-in time per cell.
    outside : float
        Fraction of time outside the box.
    u_mean : ndarray, shape ``grid.shape + (I + J,)``
        Time-averaged control parameterization within each cell (NaN where
        the cell was never visited).
    """

    grid: BoxGrid
    mass: np.ndarray
    outside: float
    u_mean: np.ndarray

    @property
    def total(self):
        return float(self.mass.sum() + self.outside)


def empirical_measure(result, grid=None, replication=None):
    """Mean empirical measure of ``(x_hat, u)`` from a simulation result.

    For the CTMC each lattice state is spread uniformly over its own cube of
    side ``1/sqrt(n)`` before binning, so the cell masses compare directly
    with a continuous density.  ``replication`` selects a single replication
    instead of the pooled histogram.
    """
    if grid is not None and grid != result.grid:
        raise ValueError("the result was recorded on a different grid")
    hist = result.hist if replication is None else result.hist_reps[replication]
    tot = float(hist.sum())
    shape = tuple(result.grid.shape)
    cells = hist[:-1]
    mass = (cells / tot).reshape(shape)
    I = len(shape)
    # each visit contributes weights summing to one over the class block
    occ = result.hist_u[:, :I].sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        u = result.hist_u / occ[:, None]
    u[occ == 0] = np.nan
    return EmpiricalMeasure(result.grid, mass, float(result.hist[-1] / tot), u.reshape(shape + (-1,)))


def total_variation(a, b):
    """Total-variation distance between two measures on the same grid (outside mass included)."""
    if a.grid != b.grid:
        raise ValueError("measures live on different grids")
    return 0.5 * (float(np.abs(a.mass - b.mass).sum()) + abs(a.outside - b.outside))


@dataclass(frozen=True)
class TailFit:
    slope: float
    intercept: float
    r_squared: float
    levels: int
    r_range: tuple


def tail_decay_fit(result, lower_quantile=0.5, upper_tail=1e-4, num_levels=20, min_levels=10):
    """Least-squares fit of ``log P(|X_hat| > r)`` against ``r``.

    Levels are spaced evenly between the ``lower_quantile`` quantile of the
    scaled norm and the level where the survival function drops to
    ``upper_tail``.

    Raises
    ------
    InsufficientTail
        Fewer than ``min_levels`` distinct exceedance levels.
    """
    if result.status != "ok" or result.radial is None:
        raise InsufficientTail("no stationary trace available")
    w = np.asarray(result.radial, dtype=float)
    tot = w.sum()
    if tot <= 0:
        raise InsufficientTail("empty trace")
    edges = RADIAL_DR * np.arange(1, w.size + 1)
    surv = 1.0 - np.cumsum(w) / tot
    surv = np.clip(surv, 0.0, None)
    i_lo = int(np.searchsorted(-surv, -(1 - lower_quantile)))
    hits = np.flatnonzero(surv >= upper_tail)
    i_hi = int(hits[-1]) if hits.size else 0
    if i_hi <= i_lo:
        raise InsufficientTail("tail range collapsed")
    idx = np.unique(np.linspace(i_lo, i_hi, num_levels).round().astype(int))
    r = edges[idx]
    s = surv[idx]
    keep = s > 0
    r, s = r[keep], s[keep]
    distinct = np.unique(s).size
    if distinct < min_levels:
        raise InsufficientTail(f"only {distinct} distinct exceedance levels")
    ls = np.log(s)
    A = np.vstack([r, np.ones_like(r)]).T
    coef, *_ = np.linalg.lstsq(A, ls, rcond=None)
    pred = A @ coef
    ss_res = float(((ls - pred) ** 2).sum())
    ss_tot = float(((ls - ls.mean()) ** 2).sum())
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 0.0
    return TailFit(float(coef[0]), float(coef[1]), r2, int(distinct), (float(r[0]), float(r[-1])))
