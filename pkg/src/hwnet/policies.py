"""Scheduling policies: balanced saturation, canonical JWC and their concatenation.

All decision functions take integer headcounts ``x`` and return an integer
allocation matrix ``z`` of shape ``(I, J)``, zero off the graph.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import _kernels as K
from .errors import DomainViolation, InfeasibleShift, NoAnchorClass, OutsideJWC
from .fluid import peel_schedule, psi_edges, triangular_order

SIMPLEX_TOL = 1e-9


# ---------------------------------------------------------------------------
# state helpers

def queue_idle(topo, N, x, z):
    """Return ``(q, y)`` with ``q_i = x_i - sum_j z_ij`` and ``y_j = N_j - sum_i z_ij``."""
    z = np.asarray(z)
    return np.asarray(x) - z.sum(axis=1), np.asarray(N) - z.sum(axis=0)


def is_admissible(topo, N, x, z):
    """Balance (``q, y >= 0``) and edgewise work conservation."""
    q, y = queue_idle(topo, N, x, z)
    if np.any(np.asarray(z)[topo.adjacency] < 0) or np.any(q < 0) or np.any(y < 0):
        return False
    return not np.any((q[topo.edge_class] > 0) & (y[topo.edge_pool] > 0))


def rounding_map(v):
    """Integer vector with the same total: floors except the last entry.

    Raises
    ------
    DomainViolation
        If the entries do not sum to an integer (tolerance ``1e-9``).
    """
    v = np.asarray(v, dtype=float)
    tot = v.sum()
    if abs(tot - round(tot)) > 1e-9:
        raise DomainViolation(f"entries sum to {tot}, not an integer")
    out = np.floor(v).astype(np.int64)
    out[-1] = int(round(tot)) - out[:-1].sum()
    return out


def largest_remainder(values, total):
    """Integer split of ``values`` summing to ``total``; ties go to the lowest index."""
    values = np.asarray(values, dtype=float)
    base = np.floor(values).astype(np.int64)
    short = int(total - base.sum())
    if short:
        frac = values - base
        order = sorted(range(len(values)), key=lambda k: (-round(frac[k], 12), k))
        for k in order[:short]:
            base[k] += 1
    return base


# ---------------------------------------------------------------------------
# capacity shift

@dataclass(frozen=True, eq=False)
class CapacityShift:
    """Nominal and shifted per-edge server splits for one scale ``n``.

    Attributes
    ----------
    N_ij, N_tilde_ij : ndarray of int, shape (I, J)
    N_tilde_i : ndarray of int, shape (I,)
    C_tilde : float
        Margin constant the shift was built for.
    psi : ndarray, shape (I, J)
        Unscaled shift directions (pool sums zero).
    C_hat : float
        ``max |N_tilde_ij - N_ij| / sqrt(n)``.
    elimination_order : tuple of int
        Class order used when saturated classes compete for spare servers.
    fill_order : tuple of tuple of int
        Per class, the pools in the order an unsaturated class fills them.
    """

    N_ij: np.ndarray
    N_tilde_ij: np.ndarray
    N_tilde_i: np.ndarray
    C_tilde: float
    psi: np.ndarray
    C_hat: float
    elimination_order: tuple
    fill_order: tuple


def structural_elimination_order(topo, root_pool=0):
    """Leaf-first class order of the tree rooted at ``root_pool``.

    This is the order that makes the first drift matrix lower-triangular when
    no service rates cancel.
    """
    parent_pool, _, pool_parent = _rooted(topo, ("pool", root_pool))
    pattern = np.eye(topo.I)
    for k in range(topo.I):
        g = pool_parent.get(parent_pool[k])
        while g is not None:
            pattern[g, k] = 1.0
            g = pool_parent.get(parent_pool[g])
    return triangular_order(pattern)


def _rooted(topo, root):
    """Parent maps of the tree rooted at ``root`` = ("class", i) or ("pool", j)."""
    nbr = {}
    for i, j in topo.edges:
        nbr.setdefault(("class", i), []).append(("pool", j))
        nbr.setdefault(("pool", j), []).append(("class", i))
    parent = {root: None}
    order = [root]
    stack = [root]
    while stack:
        a = stack.pop()
        for b in sorted(nbr.get(a, [])):
            if b not in parent:
                parent[b] = a
                order.append(b)
                stack.append(b)
    parent_of_class = {}
    pool_parent = {}
    for node, par in parent.items():
        if node[0] == "class" and par is not None:
            parent_of_class[node[1]] = par[1]
        if node[0] == "pool" and par is not None:
            pool_parent[node[1]] = par[1]
    return parent_of_class, order, pool_parent


def shift_directions(topo, mu, gamma, C_tilde, anchor=None):
    """Directions ``psi`` with zero pool sums and class gains ``>= 3 C_tilde``.

    Mass is routed along tree paths from a class with positive abandonment
    (the anchor) so that every class without abandonment gains exactly
    ``3 C_tilde`` service capacity; other classes except the anchor gain zero.
    """
    gamma = np.asarray(gamma)
    if not np.any(gamma > 0):
        raise NoAnchorClass("every class has zero abandonment; no class can donate capacity")
    if anchor is None:
        anchor = int(np.flatnonzero(gamma > 0)[0])
    parent_of_class, order, pool_parent = _rooted(topo, ("class", anchor))
    target = np.where(gamma > 0, 0.0, 3.0 * C_tilde)
    t = np.zeros(topo.I)
    psi = np.zeros((topo.I, topo.J))
    # children before parents: reverse BFS/DFS discovery order
    for node in reversed(order):
        if node[0] != "class" or node[1] == anchor:
            continue
        c = node[1]
        p = parent_of_class[c]
        inflow = 0.0
        for j in topo.pools_of(c):
            if j == p:
                continue
            for k in topo.classes_of(j):
                if k != c:
                    inflow += mu[c, j] * t[k]
        t[c] = (target[c] + inflow) / mu[c, p]
        g = pool_parent[p]
        psi[c, p] += t[c]
        psi[g, p] -= t[c]
    return psi


def default_margin(topo, limit, fluid):
    """Default margin constant: one plus the largest second-order imbalance."""
    dev = limit.lam_hat - (limit.mu_hat * fluid.z_star).sum(axis=1) - (
        limit.mu * fluid.xi_star * limit.nu_hat[None, :]
    ).sum(axis=1)
    return 1.0 + float(np.max(np.abs(dev)))


def _fill_order(topo):
    out = []
    for i in range(topo.I):
        pools = topo.pools_of(i)
        out.append(tuple(sorted(pools, key=lambda j: (len(topo.classes_of(j)), j))))
    return tuple(out)


def build_capacity_shift(topo, scaled, fluid, C_tilde, elimination_order=None, anchor=None):
    """Shifted server splits giving classes without abandonment a capacity margin.

    Parameters
    ----------
    topo : NetworkTopology
    scaled : ScaledParams
    fluid : FluidSolution
    C_tilde : float
        Margin constant; classes with ``gamma_i = 0`` receive at least
        ``2 C_tilde sqrt(n)`` extra service rate.
    elimination_order : tuple of int, optional
        Defaults to :func:`structural_elimination_order`.

    Raises
    ------
    NoAnchorClass
        If every class has zero abandonment.
    InfeasibleShift
        If the shifted splits go negative or miss the margin at this ``n``.
    """
    if C_tilde <= 0:
        raise ValueError("C_tilde must be positive")
    gamma = scaled.gamma_n
    if not np.any(gamma > 0):
        raise NoAnchorClass("every class has zero abandonment; no class can donate capacity")
    I, J = topo.I, topo.J
    N = scaled.N_n
    Nij = np.zeros((I, J), dtype=np.int64)
    for j in range(J):
        cls = topo.classes_of(j)
        Nij[cls, j] = largest_remainder(fluid.xi_star[cls, j] * N[j], N[j])
    if np.all(gamma > 0):
        psi = np.zeros((I, J))
        Nt = Nij.copy()
    else:
        psi = shift_directions(topo, scaled.mu_n, gamma, C_tilde, anchor)
        rn = math.sqrt(scaled.n)
        Nt = Nij.copy()
        for j in range(J):
            cls = topo.classes_of(j)
            for i in cls[:-1]:
                Nt[i, j] = Nij[i, j] + math.floor(psi[i, j] * rn)
            last = cls[-1]
            Nt[last, j] = N[j] - Nt[cls[:-1], j].sum()
        if np.any(Nt[topo.adjacency] < 0):
            raise InfeasibleShift(f"shifted split negative at n={scaled.n}; n too small for C_tilde={C_tilde}")
        gain = (scaled.mu_n * (Nt - Nij)).sum(axis=1)
        short = (gamma == 0) & (gain < 2 * C_tilde * rn)
        if np.any(short):
            raise InfeasibleShift(
                f"margin below 2*C_tilde*sqrt(n) for classes {np.flatnonzero(short).tolist()} at n={scaled.n}"
            )
    if elimination_order is None:
        elimination_order = structural_elimination_order(topo)
    C_hat = float(np.max(np.abs(Nt - Nij)) / math.sqrt(scaled.n))
    for a in (Nij, Nt, psi):
        a.setflags(write=False)
    Nti = Nt.sum(axis=1)
    Nti.setflags(write=False)
    return CapacityShift(
        N_ij=Nij,
        N_tilde_ij=Nt,
        N_tilde_i=Nti,
        C_tilde=float(C_tilde),
        psi=psi,
        C_hat=C_hat,
        elimination_order=tuple(int(i) for i in elimination_order),
        fill_order=_fill_order(topo),
    )


# ---------------------------------------------------------------------------
# Markov controls

@dataclass(frozen=True, eq=False)
class MarkovControl:
    """Stationary Markov control ``x_hat -> (u^c, u^s)``.

    Use the constructors :meth:`constant`, :meth:`table` and
    :meth:`closed_form`.  Closed-form controls are evaluated exactly in Python
    code and tabulated on a regular grid (nearest node) inside compiled loops.
    """

    kind: str
    I: int
    J: int
    points: np.ndarray
    values: np.ndarray
    func: Optional[Callable] = None
    grid_lo: np.ndarray = None
    grid_h: float = 1.0
    grid_shape: np.ndarray = None

    @staticmethod
    def _check(values, I, J):
        values = np.atleast_2d(np.asarray(values, dtype=float))
        if values.shape[1] != I + J:
            raise ValueError(f"control values need I+J={I + J} columns")
        if np.any(values < -SIMPLEX_TOL):
            raise DomainViolation("control has negative entries")
        for part in (values[:, :I], values[:, I:]):
            if np.any(np.abs(part.sum(axis=1) - 1.0) > SIMPLEX_TOL):
                raise DomainViolation("control components must each sum to one")
        values = np.clip(values, 0.0, None)
        values.setflags(write=False)
        return values

    @classmethod
    def constant(cls, uc, us):
        uc = np.asarray(uc, dtype=float)
        us = np.asarray(us, dtype=float)
        I, J = len(uc), len(us)
        vals = cls._check(np.concatenate([uc, us])[None, :], I, J)
        return cls("constant", I, J, np.zeros((1, I)), vals, None, np.zeros(I), 1.0, np.ones(I, np.int64))

    @classmethod
    def table(cls, points, values, I, J):
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        vals = cls._check(values, I, J)
        if pts.shape != (vals.shape[0], I):
            raise ValueError("table points must be (G, I) matching the values")
        return cls("table", I, J, pts, vals, None, np.zeros(I), 1.0, np.ones(I, np.int64))

    @classmethod
    def closed_form(cls, func, I, J, lo=-10.0, hi=10.0, h=0.05):
        """``func(x_hat) -> (u^c, u^s)``; tabulated on ``[lo, hi]^I`` with step ``h``."""
        n_side = int(round((hi - lo) / h)) + 1
        shape = np.full(I, n_side, dtype=np.int64)
        axes = [lo + h * np.arange(n_side)] * I
        mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, I)
        rows = []
        for p in mesh:
            uc, us = func(p)
            rows.append(np.concatenate([np.asarray(uc, float), np.asarray(us, float)]))
        vals = cls._check(np.array(rows), I, J)
        return cls("closed-form", I, J, mesh, vals, func, np.full(I, float(lo)), float(h), shape)

    def __call__(self, xhat):
        xhat = np.asarray(xhat, dtype=float)
        if self.kind == "closed-form" and self.func is not None:
            uc, us = self.func(xhat)
            return np.asarray(uc, float), np.asarray(us, float)
        out = np.empty(self.I + self.J)
        K.eval_control(xhat, self.kernel_kind, self.points, self.values, self.grid_lo,
                       self.grid_h, self.grid_shape, out)
        return out[: self.I], out[self.I:]

    @property
    def kernel_kind(self):
        return {"constant": K.CTRL_CONST, "table": K.CTRL_TABLE, "closed-form": K.CTRL_GRID}[self.kind]

    def kernel_args(self):
        return (
            self.kernel_kind,
            np.ascontiguousarray(self.points),
            np.ascontiguousarray(self.values),
            np.ascontiguousarray(self.grid_lo, dtype=float),
            float(self.grid_h),
            np.ascontiguousarray(self.grid_shape, dtype=np.int64),
        )

    def describe(self):
        d = {"kind": self.kind}
        if self.kind == "constant":
            d["uc"] = self.values[0, : self.I].tolist()
            d["us"] = self.values[0, self.I:].tolist()
        elif self.kind == "table":
            d["points"] = int(self.points.shape[0])
        else:
            d["grid_lo"] = float(self.grid_lo[0])
            d["grid_h"] = self.grid_h
            d["grid_shape"] = self.grid_shape.tolist()
        return d


# ---------------------------------------------------------------------------
# JWC region

@dataclass(frozen=True)
class JwcRegion:
    """Ball ``|x - n x*|_1 <= M0 n`` on which canonical allocations are feasible."""

    M0: float
    n: int
    nx_star: tuple
    samples: int
    granularity: float
    capped: bool = False

    @property
    def radius(self):
        return self.M0 * self.n

    def contains(self, x):
        return bool(np.abs(np.asarray(x, float) - np.asarray(self.nx_star)).sum() <= self.radius)


def _corner_feasible(topo, N, X):
    """All corner splits of the total queue/idleness give a nonnegative allocation."""
    X = np.asarray(X, dtype=np.int64)
    tot = X.sum(axis=1) - int(np.sum(N))
    Q = np.maximum(tot, 0)
    Y = np.maximum(-tot, 0)
    ok = np.all(X >= 0, axis=1)
    eye_c = np.eye(topo.I, dtype=np.int64)
    eye_p = np.eye(topo.J, dtype=np.int64)
    for i in range(topo.I):
        for j in range(topo.J):
            a = X - Q[:, None] * eye_c[i]
            b = np.asarray(N, np.int64)[None, :] - Y[:, None] * eye_p[j]
            z = psi_edges(topo, a, b, check=False)
            ok &= np.all(z >= 0, axis=1)
    return ok


def _ball_directions(I, count, seed):
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x4A5743]))
    ex = rng.exponential(size=(count, I + 1))
    v = ex[:, :I] / ex.sum(axis=1, keepdims=True)
    sign = rng.choice([-1.0, 1.0], size=(count, I))
    dirs = v * sign
    corners = np.concatenate([np.eye(I), -np.eye(I)])
    return np.concatenate([corners, dirs])


_REGION_CACHE = {}


def certify_jwc_region(topo, scaled, fluid, samples=10_000, granularity=2.0 ** -10, seed=0, M_max=None):
    """Largest ``M0`` (on a dyadic grid) for which sampled states admit JWC allocations.

    Feasibility is checked at the corner splits ``q = Q e_i``, ``y = Y e_j``; by
    linearity of the allocation map this covers every split, so any control
    works at an accepted state.  The result is cached per network and ``n``.
    """
    key = (topo.key(), scaled.key(), fluid.x_star.tobytes(), samples, granularity, seed, M_max)
    if key in _REGION_CACHE:
        return _REGION_CACHE[key]
    n = scaled.n
    nx = n * fluid.x_star
    if M_max is None:
        M_max = 2.0 * max(float(fluid.x_star.sum()), 1.0)
    dirs = _ball_directions(topo.I, samples, seed)

    def feasible(M):
        X = np.floor(nx[None, :] + M * n * dirs + 0.5).astype(np.int64)
        inside = np.abs(X - nx[None, :]).sum(axis=1) <= M * n
        X = X[inside & np.all(X >= 0, axis=1)]
        return bool(np.all(_corner_feasible(topo, scaled.N_n, X)))

    lo, hi = 0.0, float(M_max)
    capped = feasible(hi)
    if capped:
        lo = hi
    else:
        while hi - lo > granularity:
            mid = 0.5 * (lo + hi)
            if feasible(mid):
                lo = mid
            else:
                hi = mid
        lo = math.floor(lo / granularity) * granularity
    region = JwcRegion(M0=lo, n=n, nx_star=tuple(nx.tolist()), samples=samples,
                       granularity=granularity, capped=capped)
    _REGION_CACHE[key] = region
    return region


def jwc_region_test(state_x, scaled, fluid, region=None, topo=None):
    """Membership of ``state_x`` in the certified JWC region."""
    if region is None:
        if topo is None:
            raise ValueError("need either a region or the topology to certify one")
        region = certify_jwc_region(topo, scaled, fluid)
    return region.contains(state_x)


# ---------------------------------------------------------------------------
# policies

POLICY_KINDS = {"bsp": K.POL_BSP, "canonical": K.POL_CANONICAL, "concatenated": K.POL_CONCAT}


@dataclass(frozen=True, eq=False)
class Policy:
    """A stationary Markov scheduling policy ready for the compiled simulator."""

    kind: str
    topo: object
    scaled: object
    fluid: object = None
    shift: Optional[CapacityShift] = None
    control: Optional[MarkovControl] = None
    region: Optional[JwcRegion] = None
    _args: tuple = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in POLICY_KINDS:
            raise ValueError(f"unknown policy kind {self.kind!r}")
        if self.kind in ("bsp", "concatenated") and self.shift is None:
            raise ValueError(f"{self.kind} policy needs a capacity shift")
        if self.kind in ("canonical", "concatenated") and (self.control is None or self.fluid is None):
            raise ValueError(f"{self.kind} policy needs a Markov control and the fluid solution")
        if self.kind == "concatenated" and self.region is None:
            raise ValueError("concatenated policy needs a JWC region")
        object.__setattr__(self, "_args", self._build_args())

    def _build_args(self):
        topo, I = self.topo, self.topo.I
        s = peel_schedule(topo)
        if self.shift is not None:
            ntil_e = topo.edge_vector(self.shift.N_tilde_ij).astype(np.int64)
            ntil_i = np.asarray(self.shift.N_tilde_i, np.int64)
            ptr, lst = [0], []
            for i, pools in enumerate(self.shift.fill_order):
                lst += [topo.edge_index[(i, j)] for j in pools]
                ptr.append(len(lst))
            ord_ptr = np.array(ptr, np.int64)
            ord_edges = np.array(lst, np.int64)
            elim = np.array(self.shift.elimination_order, np.int64)
        else:
            ntil_e = np.zeros(topo.num_edges, np.int64)
            ntil_i = np.zeros(I, np.int64)
            ord_ptr = np.zeros(I + 1, np.int64)
            ord_edges = np.zeros(1, np.int64)
            elim = np.arange(I, dtype=np.int64)
        ctrl = self.control if self.control is not None else MarkovControl.constant(
            np.eye(I)[-1], np.eye(topo.J)[-1])
        radius = self.region.radius if self.region is not None else -1.0
        if self.fluid is not None:
            nx = np.ascontiguousarray(self.scaled.n * self.fluid.x_star, dtype=float)
        else:
            nx = np.zeros(I)
        return (
            np.ascontiguousarray(self.scaled.N_n, dtype=np.int64), POLICY_KINDS[self.kind],
            ntil_e, ntil_i, ord_ptr, ord_edges, elim,
            np.ascontiguousarray(topo.edge_class), np.ascontiguousarray(topo.edge_pool),
            np.ascontiguousarray(s.edge), np.ascontiguousarray(s.cls), np.ascontiguousarray(s.pool),
            np.ascontiguousarray(s.leaf_is_class),
        ) + ctrl.kernel_args() + (nx, math.sqrt(self.scaled.n), float(radius))

    @property
    def kernel_args(self):
        return self._args

    def decide_many(self, X):
        """Allocations (per edge) and decision codes for a batch of states."""
        X = np.ascontiguousarray(np.atleast_2d(X), dtype=np.int64)
        return K.decide_batch(X, *self._args)

    def decide(self, x):
        """Allocation matrix at ``x``.

        Raises
        ------
        OutsideJWC
            Pure canonical policy at a state where the allocation is infeasible.
        """
        Z, codes = self.decide_many(np.asarray(x)[None, :])
        if codes[0] == 3:
            raise OutsideJWC(f"canonical allocation infeasible at x={np.asarray(x).tolist()}")
        return self.topo.edge_matrix(Z[0])

    def describe(self):
        d = {"kind": self.kind, "n": self.scaled.n}
        if self.shift is not None:
            d["N_tilde"] = self.shift.N_tilde_ij.tolist()
            d["C_tilde"] = self.shift.C_tilde
            d["C_hat"] = self.shift.C_hat
        if self.control is not None:
            d["control"] = self.control.describe()
        if self.region is not None:
            d["M0"] = self.region.M0
        return d


def make_bsp(topo, scaled, fluid, shift):
    return Policy("bsp", topo, scaled, fluid, shift=shift)


def make_canonical(topo, scaled, fluid, control):
    return Policy("canonical", topo, scaled, fluid, control=control)


def make_concatenated(topo, scaled, fluid, shift, control, region):
    return Policy("concatenated", topo, scaled, fluid, shift=shift, control=control, region=region)


def bsp_decide(state_x, shift, scaled, topo, fluid=None):
    """Balanced saturation allocation at ``state_x``.

    Unsaturated classes (``x_i <= N_tilde_i``) fill their pools up to the
    shifted splits, dedicated pools first; saturated classes take their full
    splits and then spread leftover jobs over spare servers in elimination
    order.
    """
    x = np.asarray(state_x, dtype=np.int64)
    z = np.zeros(topo.num_edges, dtype=np.int64)
    pol = Policy("bsp", topo, scaled, fluid, shift=shift)
    a = pol.kernel_args
    ok = K.bsp_decide(x, a[0], a[2], a[3], a[4], a[5], a[6], a[8], z, np.empty(topo.J, np.int64))
    assert ok, "balanced saturation allocation overfilled a pool"
    return topo.edge_matrix(z)


def canonical_jwc_decide(state_x, v, scaled, fluid, topo):
    """Canonical JWC allocation: round the control's queue/idleness split and apply the tree map.

    Raises
    ------
    OutsideJWC
        If the resulting allocation has a negative entry.
    """
    x = np.asarray(state_x, dtype=np.int64)
    xhat = (x - scaled.n * fluid.x_star) / math.sqrt(scaled.n)
    uc, us = v(xhat)
    tot = int(x.sum() - scaled.N_n.sum())
    q = rounding_map(max(tot, 0) * uc) if tot > 0 else np.zeros(topo.I, np.int64)
    y = rounding_map(max(-tot, 0) * us) if tot < 0 else np.zeros(topo.J, np.int64)
    z = psi_edges(topo, x - q, scaled.N_n - y)
    if np.any(z < 0):
        raise OutsideJWC(f"canonical allocation infeasible at x={x.tolist()}")
    return topo.edge_matrix(z)


def concatenated_decide(state_x, v, shift, scaled, fluid, region, topo):
    """Canonical allocation inside ``region``, balanced saturation outside."""
    if region.contains(state_x):
        return canonical_jwc_decide(state_x, v, scaled, fluid, topo)
    return bsp_decide(state_x, shift, scaled, topo, fluid)
