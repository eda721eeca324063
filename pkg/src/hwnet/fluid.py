"""Fluid equilibrium, the tree allocation map and the structured drift matrices."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import (
    DomainViolation,
    NotCriticallyLoaded,
    ResourcePoolingViolated,
    StructureViolation,
)
from .topology import check_params

FLUID_TOL = 1e-9
ZERO_SNAP = 1e-10


@dataclass(frozen=True, eq=False)
class FluidSolution:
    """Static fluid equilibrium.

    Attributes
    ----------
    xi_star : ndarray, shape (I, J)
        Fraction of pool ``j`` working on class ``i``.
    x_star : ndarray, shape (I,)
        Fluid headcounts.
    z_star : ndarray, shape (I, J)
        Fluid allocations ``xi_star * nu``.
    residual : float
        Max-norm residual of the defining linear system.
    """

    xi_star: np.ndarray
    x_star: np.ndarray
    z_star: np.ndarray
    residual: float = 0.0


@dataclass(frozen=True)
class PeelSchedule:
    """Order in which the tree allocation map resolves edges.

    Each step ``k`` fixes edge ``edge[k]`` (endpoints ``cls[k]``, ``pool[k]``).
    When ``leaf_is_class[k]`` the class is the current leaf and the edge takes the
    class's remaining row mass; otherwise the pool is the leaf and the edge takes
    the pool's remaining column mass.
    """

    edge: np.ndarray
    cls: np.ndarray
    pool: np.ndarray
    leaf_is_class: np.ndarray


@lru_cache(maxsize=256)
def _schedule_cached(key):
    _, I, J, edges = key
    deg_c = [0] * I
    deg_p = [0] * J
    for i, j in edges:
        deg_c[i] += 1
        deg_p[j] += 1
    alive = [True] * len(edges)
    out_e, out_i, out_j, out_c = [], [], [], []
    for _ in range(len(edges)):
        pick = None
        for k, (i, j) in enumerate(edges):
            if alive[k] and deg_c[i] == 1:
                pick = (k, True)
                break
        if pick is None:
            for k, (i, j) in enumerate(edges):
                if alive[k] and deg_p[j] == 1:
                    pick = (k, False)
                    break
        if pick is None:
            raise StructureViolation("graph has a cycle; the allocation map needs a tree")
        k, leaf_c = pick
        i, j = edges[k]
        alive[k] = False
        deg_c[i] -= 1
        deg_p[j] -= 1
        out_e.append(k)
        out_i.append(i)
        out_j.append(j)
        out_c.append(leaf_c)
    arrs = [np.array(a, dtype=np.int64) for a in (out_e, out_i, out_j)]
    arrs.append(np.array(out_c, dtype=np.bool_))
    for a in arrs:
        a.setflags(write=False)
    return PeelSchedule(*arrs)


def peel_schedule(topo):
    """Leaf-peeling order for ``topo`` (depends on the graph only; cached)."""
    topo.require_valid()
    return _schedule_cached(topo.key())


def _check_domain(alpha, beta):
    sa = alpha.sum(axis=-1)
    sb = beta.sum(axis=-1)
    if np.issubdtype(alpha.dtype, np.integer) and np.issubdtype(beta.dtype, np.integer):
        bad = sa != sb
    else:
        bad = np.abs(sa - sb) > FLUID_TOL * np.maximum(1.0, np.abs(sa))
    if np.any(bad):
        raise DomainViolation(f"row total {np.ravel(sa)[0]} differs from column total {np.ravel(sb)[0]}")


def psi_edges(topo, alpha, beta, check=True):
    """Tree allocation map on the edge list.

    Vectorized over leading axes: ``alpha`` has shape ``(..., I)`` and ``beta``
    shape ``(..., J)``; the result has shape ``(..., E)`` ordered like
    ``topo.edges``.  Integer inputs are processed in exact integer arithmetic.
    """
    alpha = np.asarray(alpha)
    beta = np.asarray(beta)
    if alpha.shape[-1] != topo.I or beta.shape[-1] != topo.J:
        raise ValueError("alpha/beta length does not match the topology")
    if check:
        _check_domain(alpha, beta)
    dtype = np.result_type(alpha.dtype, beta.dtype)
    if not np.issubdtype(dtype, np.integer):
        dtype = np.float64
    a = np.array(alpha, dtype=dtype)
    b = np.array(beta, dtype=dtype)
    lead = np.broadcast_shapes(a.shape[:-1], b.shape[:-1])
    a = np.broadcast_to(a, lead + (topo.I,)).copy()
    b = np.broadcast_to(b, lead + (topo.J,)).copy()
    out = np.zeros(lead + (topo.num_edges,), dtype=dtype)
    s = peel_schedule(topo)
    for k, i, j, leaf_c in zip(s.edge, s.cls, s.pool, s.leaf_is_class):
        v = a[..., i].copy() if leaf_c else b[..., j].copy()
        out[..., k] = v
        a[..., i] -= v
        b[..., j] -= v
    return out


def psi_map(topo, alpha, beta):
    """Unique allocation matrix with row sums ``alpha`` and column sums ``beta``.

    Parameters
    ----------
    topo : NetworkTopology
    alpha : array_like, shape (I,)
    beta : array_like, shape (J,)

    Returns
    -------
    ndarray, shape (I, J)
        Zero off the edge set.  Integer in, integer out.

    Raises
    ------
    DomainViolation
        If ``sum(alpha) != sum(beta)``.
    """
    return topo.edge_matrix(psi_edges(topo, alpha, beta))


def _system(topo, limit):
    E = topo.num_edges
    A = np.zeros((topo.I + topo.J, E))
    rhs = np.concatenate([limit.lam, np.ones(topo.J)])
    for k, (i, j) in enumerate(topo.edges):
        A[i, k] = limit.mu[i, j] * limit.nu[j]
        A[topo.I + j, k] = 1.0
    return A, rhs


def solve_fluid(topo, limit):
    """Fluid equilibrium of a critically loaded tree network.

    The defining system (demand met per class, every pool fully used) has
    ``I + J`` equations in ``I + J - 1`` unknowns; it is solved in the
    least-squares sense and the residual confirms critical loading.

    Raises
    ------
    NotCriticallyLoaded
        Residual above ``1e-9``.
    ResourcePoolingViolated
        Some activity on the graph is not strictly positive.
    """
    topo.require_valid()
    check_params(topo, limit)
    A, rhs = _system(topo, limit)
    sol, *_ = np.linalg.lstsq(A, rhs, rcond=None)
    res = float(np.max(np.abs(A @ sol - rhs)))
    if res > FLUID_TOL * max(1.0, float(np.max(np.abs(rhs)))):
        raise NotCriticallyLoaded(f"fluid system residual {res:.3g} exceeds tolerance")
    if np.any(sol < FLUID_TOL):
        k = int(np.argmin(sol))
        raise ResourcePoolingViolated(f"activity {topo.edges[k]} has xi = {sol[k]:.3g}")
    xi = topo.edge_matrix(sol)
    z = xi * limit.nu[None, :]
    for arr in (xi, z):
        arr.setflags(write=False)
    x = z.sum(axis=1)
    x.setflags(write=False)
    return FluidSolution(xi_star=xi, x_star=x, z_star=z, residual=res)


def ell_vector(topo, limit, fluid):
    """Constant drift term ``lam_hat_i - sum_j mu_hat_ij z*_ij``."""
    return limit.lam_hat - (limit.mu_hat * fluid.z_star).sum(axis=1)


def psi_drift(topo, limit, ell, x, uc, us):
    """Drift of the limiting diffusion evaluated through the allocation map.

    Vectorized over leading axes of ``x``, ``uc`` and ``us``.
    """
    x = np.asarray(x, dtype=float)
    uc = np.asarray(uc, dtype=float)
    us = np.asarray(us, dtype=float)
    s = x.sum(axis=-1, keepdims=True)
    sp, sm = np.maximum(s, 0.0), np.maximum(-s, 0.0)
    alpha = x - sp * uc
    beta = -sm * us
    pe = psi_edges(topo, alpha, beta, check=False)
    mu_e = limit.mu[topo.edge_class, topo.edge_pool]
    served = np.zeros(pe.shape[:-1] + (topo.I,))
    np.add.at(np.moveaxis(served, -1, 0), topo.edge_class, np.moveaxis(pe * mu_e, -1, 0))
    return ell - served - limit.gamma * sp * uc


@dataclass(frozen=True, eq=False)
class DriftMatrices:
    """Structured form of the limiting drift.

    ``b(x, u) = ell - B1 (x - (e.x)^+ u^c) + (e.x)^- B2 u^s - (e.x)^+ Gamma u^c``.

    Attributes
    ----------
    ell : ndarray, shape (I,)
    B1 : ndarray, shape (I, I)
        Lower-triangular with positive diagonal after permuting rows and
        columns by ``elimination_order``.
    B2 : ndarray, shape (I, J)
    gamma : ndarray, shape (I,)
    elimination_order : tuple of int
    root_pool : int
        Pool used to split the allocation map into its two linear parts.
    """

    ell: np.ndarray
    B1: np.ndarray
    B2: np.ndarray
    gamma: np.ndarray
    elimination_order: tuple
    root_pool: int = 0

    def drift(self, x, uc, us):
        x = np.asarray(x, dtype=float)
        s = x.sum(axis=-1, keepdims=True)
        sp, sm = np.maximum(s, 0.0), np.maximum(-s, 0.0)
        a = x - sp * np.asarray(uc)
        return (
            self.ell
            - a @ self.B1.T
            + sm * (np.asarray(us) @ self.B2.T)
            - sp * self.gamma * uc
        )

    def permuted_B1(self):
        p = list(self.elimination_order)
        return self.B1[np.ix_(p, p)]


def _snap(m):
    m = np.array(m, dtype=float)
    m[np.abs(m) <= ZERO_SNAP] = 0.0
    return m


def triangular_order(B):
    """Greedy search for a permutation making ``B`` lower-triangular.

    Returns a tuple of indices, or ``None`` if the greedy step gets stuck or a
    diagonal entry is not positive.
    """
    B = _snap(B)
    n = B.shape[0]
    placed = []
    remaining = set(range(n))
    while remaining:
        pick = None
        for i in sorted(remaining):
            nz = set(np.flatnonzero(B[i]).tolist())
            if B[i, i] > 0 and nz <= set(placed) | {i}:
                pick = i
                break
        if pick is None:
            return None
        placed.append(pick)
        remaining.discard(pick)
    return tuple(placed)


def extract_drift_matrices(topo, limit, fluid, root_pool=0):
    """Recover ``B1``, ``B2`` numerically from the allocation-map drift.

    ``B1`` is read off on the hyperplane ``e.x = 0`` where the drift equals
    ``ell - B1 x``; ``B2`` from the directions ``-e_k`` with corner idleness
    controls ``u^s = e_j``.  The split between the two parts routes all of a
    class vector's idleness through ``root_pool``, so ``B2[:, root_pool] = 0``.

    Raises
    ------
    StructureViolation
        If no class permutation makes ``B1`` lower-triangular with a positive
        diagonal.
    """
    I, J = topo.I, topo.J
    ell = ell_vector(topo, limit, fluid)
    eye_c = np.eye(I)
    eye_p = np.eye(J)
    uc0 = eye_c[0]
    # At x = -e_k all mass is idleness; sending it to root_pool isolates B1 e_k.
    x = -eye_c
    b_root = psi_drift(topo, limit, ell, x, uc0, eye_p[root_pool])
    # b(-e_k, u^s=e_root) = ell - B1(-e_k) + B2 e_root = ell + B1 e_k
    B1 = _snap((b_root - ell).T)
    B2 = np.zeros((I, J))
    for j in range(J):
        bj = psi_drift(topo, limit, ell, x[0], uc0, eye_p[j])
        # bj = ell + B1 e_0 + B2 e_j
        B2[:, j] = bj - ell - B1[:, 0]
    B2 = _snap(B2)
    order = triangular_order(B1)
    if order is None:
        raise StructureViolation("no class order makes B1 lower-triangular with positive diagonal")
    for arr in (ell, B1, B2):
        arr.setflags(write=False)
    return DriftMatrices(
        ell=ell, B1=B1, B2=B2, gamma=limit.gamma, elimination_order=order, root_pool=root_pool
    )
