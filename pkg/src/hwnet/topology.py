"""Network graph and parameter sets (fluid limit and scale ``n``).

Classes and pools are indexed from 0 throughout the code.  An edge ``(i, j)``
means pool ``j`` can serve class ``i``.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import NegativeRate, StructureViolation


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class NetworkTopology:
    """Bipartite class/pool compatibility graph.

    Parameters
    ----------
    num_classes, num_pools : int
        ``I`` and ``J``.
    edges : iterable of (int, int)
        Pairs ``(i, j)`` with ``0 <= i < I`` and ``0 <= j < J``.
    """

    num_classes: int
    num_pools: int
    edges: tuple

    def __post_init__(self):
        object.__setattr__(self, "edges", tuple(sorted({(int(i), int(j)) for i, j in self.edges})))

    @property
    def I(self):  # noqa: E743
        return self.num_classes

    @property
    def J(self):
        return self.num_pools

    @property
    def num_edges(self):
        return len(self.edges)

    @cached_property
    def edge_index(self):
        return {e: k for k, e in enumerate(self.edges)}

    @cached_property
    def edge_class(self):
        return _frozen([i for i, _ in self.edges], np.int64)

    @cached_property
    def edge_pool(self):
        return _frozen([j for _, j in self.edges], np.int64)

    @cached_property
    def adjacency(self):
        """Boolean ``I x J`` incidence matrix."""
        a = np.zeros((self.I, self.J), dtype=bool)
        for i, j in self.edges:
            a[i, j] = True
        a.setflags(write=False)
        return a

    def pools_of(self, i):
        return [j for (k, j) in self.edges if k == i]

    def classes_of(self, j):
        return [i for (i, k) in self.edges if k == j]

    def edge_vector(self, matrix):
        """Restrict an ``I x J`` matrix to the edge list."""
        m = np.asarray(matrix)
        return m[self.edge_class, self.edge_pool]

    def edge_matrix(self, values):
        """Expand per-edge values into an ``I x J`` matrix, zero off the graph."""
        values = np.asarray(values)
        out = np.zeros((self.I, self.J), dtype=values.dtype)
        out[self.edge_class, self.edge_pool] = values
        return out

    def key(self):
        return ("topology", self.I, self.J, self.edges)

    def require_valid(self):
        report = validate_topology(self)
        if not report.ok:
            raise StructureViolation("; ".join(report.violations))


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple = ()

    @property
    def ok(self):
        return not self.violations

    def __bool__(self):
        return self.ok


def _components(topo):
    """Connected components of the bipartite graph (union-find)."""
    parent = list(range(topo.I + topo.J))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for i, j in topo.edges:
        ra, rb = find(i), find(topo.I + j)
        if ra != rb:
            parent[ra] = rb
    return len({find(a) for a in range(topo.I + topo.J)})


def is_tree_by_count(topo):
    """Tree test via ``connected and |E| = I + J - 1``."""
    return _components(topo) == 1 and topo.num_edges == topo.I + topo.J - 1


def is_tree_by_search(topo):
    """Tree test via depth-first search: every node reached, no back edge."""
    nbrs = {a: [] for a in range(topo.I + topo.J)}
    for i, j in topo.edges:
        nbrs[i].append(topo.I + j)
        nbrs[topo.I + j].append(i)
    seen = {0: None}
    stack = [0]
    while stack:
        a = stack.pop()
        for b in nbrs[a]:
            if b == seen[a]:
                continue
            if b in seen:
                return False
            seen[b] = a
            stack.append(b)
    return len(seen) == topo.I + topo.J


def validate_topology(topo):
    """Check the tree and coverage assumptions; returns a report, never raises."""
    problems = []
    if topo.I < 1 or topo.J < 1:
        problems.append(f"need at least one class and one pool (I={topo.I}, J={topo.J})")
        return ValidationReport(tuple(problems))
    for i, j in topo.edges:
        if not (0 <= i < topo.I and 0 <= j < topo.J):
            problems.append(f"edge {(i, j)} out of range")
    if problems:
        return ValidationReport(tuple(problems))
    for i in range(topo.I):
        if not topo.pools_of(i):
            problems.append(f"class {i} has no pool")
    for j in range(topo.J):
        if not topo.classes_of(j):
            problems.append(f"pool {j} has no class")
    n_expected = topo.I + topo.J - 1
    if topo.num_edges > n_expected:
        problems.append(f"cycle: |E| = {topo.num_edges} > I+J-1 = {n_expected}")
    ncomp = _components(topo)
    if ncomp > 1:
        problems.append(f"graph not connected ({ncomp} components)")
    elif topo.num_edges == n_expected and not is_tree_by_search(topo):
        problems.append("graph is not a tree")
    return ValidationReport(tuple(problems))


@dataclass(frozen=True, eq=False)
class LimitParams:
    """First- and second-order Halfin-Whitt parameters.

    ``mu`` and ``mu_hat`` are ``I x J`` matrices, zero off the graph.  Set
    ``allow_zero_abandonment`` to explore networks with ``gamma == 0``; the
    stability results do not cover that case.
    """

    lam: np.ndarray
    mu: np.ndarray
    gamma: np.ndarray
    nu: np.ndarray
    lam_hat: np.ndarray = None
    mu_hat: np.ndarray = None
    nu_hat: np.ndarray = None
    allow_zero_abandonment: bool = False

    def __post_init__(self):
        lam = _frozen(self.lam)
        mu = _frozen(np.atleast_2d(self.mu))
        object.__setattr__(self, "lam", lam)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "gamma", _frozen(self.gamma))
        object.__setattr__(self, "nu", _frozen(self.nu))
        for name, shape in (("lam_hat", lam.shape), ("mu_hat", mu.shape), ("nu_hat", np.shape(self.nu))):
            v = getattr(self, name)
            object.__setattr__(self, name, _frozen(np.zeros(shape) if v is None else np.reshape(v, shape)))

    def key(self):
        return ("limit",) + tuple(
            getattr(self, k).tobytes() for k in ("lam", "mu", "gamma", "nu", "lam_hat", "mu_hat", "nu_hat")
        )

    @property
    def has_abandonment(self):
        return bool(np.any(self.gamma > 0))


def check_params(topo, limit):
    """Raise if ``limit`` is inconsistent with ``topo`` (shapes, edge support, signs)."""
    I, J = topo.I, topo.J
    if limit.lam.shape != (I,) or limit.gamma.shape != (I,):
        raise ValueError(f"lam/gamma must have length I={I}")
    if limit.nu.shape != (J,):
        raise ValueError(f"nu must have length J={J}")
    if limit.mu.shape != (I, J):
        raise ValueError(f"mu must be {I}x{J}")
    support = limit.mu > 0
    if not np.array_equal(support, topo.adjacency):
        raise StructureViolation("mu_ij > 0 must hold exactly on the edge set")
    if np.any(limit.mu_hat[~topo.adjacency] != 0):
        raise StructureViolation("mu_hat must vanish off the edge set")
    if np.any(limit.lam <= 0) or np.any(limit.nu <= 0):
        raise NegativeRate("lambda and nu must be positive")
    if np.any(limit.gamma < 0):
        raise NegativeRate("gamma must be nonnegative")
    if not limit.has_abandonment:
        if not limit.allow_zero_abandonment:
            raise StructureViolation(
                "all gamma_i are zero; stability results need some gamma_i > 0 "
                "(set allow_zero_abandonment to override)"
            )
        warnings.warn("all abandonment rates are zero: stability checks are not meaningful", stacklevel=2)


@dataclass(frozen=True, eq=False)
class ScaledParams:
    """Parameters of the ``n``-th system."""

    n: int
    lam_n: np.ndarray
    mu_n: np.ndarray
    gamma_n: np.ndarray
    N_n: np.ndarray = field(repr=True)

    @property
    def sqrt_n(self):
        return math.sqrt(self.n)

    def key(self):
        return ("scaled", self.n) + tuple(
            getattr(self, k).tobytes() for k in ("lam_n", "mu_n", "gamma_n", "N_n")
        )


def round_half_up(v):
    return np.floor(np.asarray(v, dtype=float) + 0.5).astype(np.int64)


def scale_params(limit, n, topo=None):
    """Parameters at scale ``n``: ``lam_n = n lam + sqrt(n) lam_hat`` etc.

    Pool sizes are ``round_half_up(n nu + sqrt(n) nu_hat)``.
    """
    if n < 1 or int(n) != n:
        raise ValueError(f"n must be a positive integer, got {n!r}")
    n = int(n)
    rn = math.sqrt(n)
    lam_n = n * limit.lam + rn * limit.lam_hat
    support = limit.mu > 0 if topo is None else topo.adjacency
    mu_n = np.where(support, limit.mu + limit.mu_hat / rn, 0.0)
    if np.any(lam_n <= 0):
        raise NegativeRate(f"arrival rate nonpositive at n={n}: {lam_n}")
    if np.any(mu_n[support] <= 0):
        raise NegativeRate(f"service rate nonpositive at n={n}")
    N_n = round_half_up(n * limit.nu + rn * limit.nu_hat)
    if np.any(N_n < 1):
        raise NegativeRate(f"pool size below 1 at n={n}: {N_n}")
    return ScaledParams(
        n=n,
        lam_n=_frozen(lam_n),
        mu_n=_frozen(mu_n),
        gamma_n=_frozen(limit.gamma),
        N_n=_frozen(N_n, np.int64),
    )
