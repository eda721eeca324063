"""Small reference networks used in the demos, configs and tests."""
import numpy as np

from .topology import LimitParams, NetworkTopology


def single_class(lam=1.0, mu=1.0, gamma=1.0, lam_hat=0.0, nu_hat=0.0):
    """One class, one pool (the many-server queue with abandonment).

    ``nu`` is set to ``lam / mu`` so the fluid model is critically loaded.
    """
    topo = NetworkTopology(1, 1, [(0, 0)])
    limit = LimitParams(lam=[lam], mu=[[mu]], gamma=[gamma], nu=[lam / mu],
                        lam_hat=[lam_hat], nu_hat=[nu_hat])
    return topo, limit


def n_network(gamma=(0.0, 1.0), lam=(1.5, 1.5), nu=(1.0, 2.0)):
    """Two classes, two pools; pool 0 serves only class 0, pool 1 serves both."""
    topo = NetworkTopology(2, 2, [(0, 0), (0, 1), (1, 1)])
    mu = np.array([[1.0, 1.0], [0.0, 1.0]])
    return topo, LimitParams(lam=list(lam), mu=mu, gamma=list(gamma), nu=list(nu))


def m_network(gamma=(0.0, 1.0), lam=(1.5, 1.0), nu=(1.0, 1.0, 0.5)):
    """Two classes, three pools; the middle pool is shared.

    The defaults split the shared pool evenly (``xi*_12 = xi*_22 = 0.5``) and
    give the classes different fluid headcounts, ``x* = (1.5, 1.0)``.
    """
    topo = NetworkTopology(2, 3, [(0, 0), (0, 1), (1, 1), (1, 2)])
    mu = np.array([[1.0, 1.0, 0.0], [0.0, 1.0, 1.0]])
    return topo, LimitParams(lam=list(lam), mu=mu, gamma=list(gamma), nu=list(nu))


def random_tree(rng, max_classes=6, max_pools=6):
    """Random tree topology with ``1..max`` classes and pools (Pruefer-style growth)."""
    I = int(rng.integers(1, max_classes + 1))
    J = int(rng.integers(1, max_pools + 1))
    # grow a random spanning tree over the bipartite node set
    nodes = [("c", i) for i in range(I)] + [("p", j) for j in range(J)]
    order = list(rng.permutation(len(nodes)))
    edges = set()
    placed_c, placed_p = [], []
    first = nodes[order[0]]
    (placed_c if first[0] == "c" else placed_p).append(first[1])
    pending = [nodes[k] for k in order[1:]]
    while pending:
        progressed = False
        for node in list(pending):
            if node[0] == "c" and placed_p:
                j = placed_p[int(rng.integers(len(placed_p)))]
                edges.add((node[1], j))
                placed_c.append(node[1])
            elif node[0] == "p" and placed_c:
                i = placed_c[int(rng.integers(len(placed_c)))]
                edges.add((i, node[1]))
                placed_p.append(node[1])
            else:
                continue
            pending.remove(node)
            progressed = True
        if not progressed:
            # only same-side nodes placed so far: bridge through a new opposite node
            node = pending[0]
            other = [m for m in pending if m[0] != node[0]]
            if not other:
                return random_tree(rng, max_classes, max_pools)
            o = other[0]
            pending.remove(o)
            if o[0] == "c":
                edges.add((o[1], placed_p[0]))
                placed_c.append(o[1])
            else:
                edges.add((placed_c[0], o[1]))
                placed_p.append(o[1])
    return NetworkTopology(I, J, sorted(edges))


def random_critical_params(topo, rng, gamma_zero_frac=0.3):
    """Random critically loaded parameters on ``topo`` with all activities positive."""
    xi = np.zeros((topo.I, topo.J))
    for j in range(topo.J):
        cls = topo.classes_of(j)
        w = rng.uniform(0.2, 1.0, size=len(cls))
        xi[cls, j] = w / w.sum()
    nu = rng.uniform(0.5, 2.0, size=topo.J)
    mu = np.where(topo.adjacency, rng.uniform(0.5, 2.0, size=(topo.I, topo.J)), 0.0)
    lam = (mu * xi * nu[None, :]).sum(axis=1)
    gamma = np.where(rng.random(topo.I) < gamma_zero_frac, 0.0, rng.uniform(0.2, 2.0, size=topo.I))
    if not np.any(gamma > 0):
        gamma[int(rng.integers(topo.I))] = 1.0
    return LimitParams(lam=lam, mu=mu, gamma=gamma, nu=nu), xi
