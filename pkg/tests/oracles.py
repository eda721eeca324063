"""Independent reference computations used as test oracles.

None of these import the package's solvers: they rebuild the answers with
dense linear algebra, exact rational arithmetic, birth-death recursions or
numerical quadrature.
"""
import math

import numpy as np
import sympy as sp
from scipy import integrate


def dense_psi(I, J, edges, alpha, beta):
    """Least-norm solution of the row/column-sum system on the edge set."""
    E = len(edges)
    A = np.zeros((I + J, E))
    for e, (i, j) in enumerate(edges):
        A[i, e] = 1.0
        A[I + j, e] = 1.0
    rhs = np.concatenate([np.asarray(alpha, float), np.asarray(beta, float)])
    z, *_ = np.linalg.lstsq(A, rhs, rcond=None)
    out = np.zeros((I, J))
    for e, (i, j) in enumerate(edges):
        out[i, j] = z[e]
    return out


def exact_fluid(I, J, edges, lam, mu, nu):
    """Fluid equilibrium by exact rational elimination.

    Unknowns ``xi_ij`` on edges; equations ``sum_j mu_ij nu_j xi_ij = lam_i`` and
    ``sum_i xi_ij = 1``.  Returns ``(xi, x)`` as floats with
    ``x_i = sum_j nu_j xi_ij``.
    """
    syms = sp.symbols(f"v0:{len(edges)}")
    eqs = []
    R = sp.Rational
    for i in range(I):
        eqs.append(sum(R(str(mu[i][j])) * R(str(nu[j])) * syms[e]
                       for e, (ii, j) in enumerate(edges) if ii == i) - R(str(lam[i])))
    for j in range(J):
        eqs.append(sum(syms[e] for e, (i, jj) in enumerate(edges) if jj == j) - 1)
    sol = sp.solve(eqs, syms, dict=True)[0]
    xi = np.zeros((I, J))
    for e, (i, j) in enumerate(edges):
        xi[i, j] = float(sol[syms[e]])
    x = (xi * np.asarray(nu, float)[None, :]).sum(axis=1)
    return xi, x


def birth_death_stationary(lam_n, mu, gamma, N, K=None):
    """Stationary law of the many-server queue with abandonment on ``0..K``."""
    if K is None:
        K = int(N + 60 * math.sqrt(N) + 200)
    k = np.arange(K + 1)
    death = mu * np.minimum(k, N) + gamma * np.maximum(k - N, 0)
    logp = np.concatenate([[0.0], np.cumsum(np.log(lam_n) - np.log(death[1:]))])
    p = np.exp(logp - logp.max())
    return k, p / p.sum()


def single_class_diffusion_moment(lam_hat, mu, gamma, lam, f):
    """``E f(X)`` for the piecewise Ornstein-Uhlenbeck stationary density.

    Drift ``lam_hat - mu x`` for ``x < 0`` and ``lam_hat - gamma x`` for
    ``x > 0``; variance ``2 lam``.
    """
    def dens(x):
        if x < 0:
            return math.exp((lam_hat * x - mu * x * x / 2) / lam)
        return math.exp((lam_hat * x - gamma * x * x / 2) / lam)

    Z = integrate.quad(dens, -np.inf, 0)[0] + integrate.quad(dens, 0, np.inf)[0]
    num = integrate.quad(lambda x: f(x) * dens(x), -np.inf, 0)[0] + \
        integrate.quad(lambda x: f(x) * dens(x), 0, np.inf)[0]
    return num / Z


def m_network_closed_form(x, N, Nt):
    """Balanced saturation allocation of the M network in closed form.

    ``N`` holds the three pool sizes; ``Nt`` the shifted splits (``Nt[0][0]``
    and ``Nt[1][2]`` equal the dedicated pool sizes).  The shared pool is
    capped by what the other class leaves free.
    """
    x1, x2 = int(x[0]), int(x[1])
    N1, N2, N3 = (int(v) for v in N)
    Nt12, Nt22 = int(Nt[0][1]), int(Nt[1][1])
    Nt1 = int(Nt[0][0]) + Nt12
    Nt2 = Nt22 + int(Nt[1][2])
    o1 = max(x1 - N1, 0)
    o2 = max(x2 - N3, 0)
    z11 = min(x1, N1)
    z23 = min(x2, N3)
    z12 = min(o1, Nt12) if x2 >= Nt2 else min(o1, N2 - o2)
    z22 = min(o2, Nt22) if x1 >= Nt1 else min(o2, N2 - o1)
    return np.array([[z11, z12, 0], [0, z22, z23]], dtype=np.int64)
