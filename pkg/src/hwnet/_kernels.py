"""Compiled inner loops: tree peeling, policy decisions, CTMC and SDE paths.

Everything here works on plain arrays so it can be compiled with numba in
``nogil`` mode; the public wrappers live in ``policies``, ``ctmc`` and
``diffusion``.
"""
import math

import numpy as np
from numba import njit

# Observable layout shared by the CTMC and SDE accumulators.
KAPPAS = (1, 2, 4)
OBS_R = 0        # running cost r
OBS_RO = 1       # queueing-only running cost
OBS_IN = 2       # indicator of the JWC region
OBS_SP = 3       # (e.x)^+
OBS_SM = 4       # (e.x)^-
OBS_X = 5        # |x|^kappa, kappa in KAPPAS
OBS_QY = 8       # (1 + |q| + |y|)^kappa
OBS_Q = 11       # (1 + |q|)^kappa
OBS_Y = 14       # |y|^kappa
OBS_YJ = 17      # y_j^m_tilde, one per pool


def num_obs(J):
    return OBS_YJ + J


# Policy kinds
POL_BSP = 0
POL_CANONICAL = 1
POL_CONCAT = 2

# Control kinds
CTRL_CONST = 0
CTRL_TABLE = 1
CTRL_GRID = 2

# Simulation exit codes
OK = 0
EXPLODED = 1
OUTSIDE_JWC = 2


@njit(cache=True, nogil=True)
def peel_int(alpha, beta, s_edge, s_cls, s_pool, s_leafc, out):
    """Exact integer allocation map; ``alpha``/``beta`` are consumed."""
    for k in range(s_edge.shape[0]):
        i = s_cls[k]
        j = s_pool[k]
        if s_leafc[k]:
            v = alpha[i]
        else:
            v = beta[j]
        out[s_edge[k]] = v
        alpha[i] -= v
        beta[j] -= v


@njit(cache=True, nogil=True)
def peel_float(alpha, beta, s_edge, s_cls, s_pool, s_leafc, out):
    for k in range(s_edge.shape[0]):
        i = s_cls[k]
        j = s_pool[k]
        if s_leafc[k]:
            v = alpha[i]
        else:
            v = beta[j]
        out[s_edge[k]] = v
        alpha[i] -= v
        beta[j] -= v


@njit(cache=True, nogil=True)
def round_map(total, v, out):
    """Floors for all but the last entry; the last entry takes the remainder."""
    d = v.shape[0]
    acc = 0
    for k in range(d - 1):
        f = int(math.floor(total * v[k]))
        if f < 0:
            f = 0
        if acc + f > total:
            f = total - acc
        out[k] = f
        acc += f
    out[d - 1] = total - acc


@njit(cache=True, nogil=True)
def eval_control(xhat, kind, pts, vals, grid_lo, grid_h, grid_shape, out):
    """Write ``(u^c, u^s)`` at ``xhat`` into ``out`` (length I + J)."""
    I = xhat.shape[0]
    row = 0
    if kind == CTRL_TABLE:
        best = np.inf
        for g in range(pts.shape[0]):
            d = 0.0
            for i in range(I):
                t = xhat[i] - pts[g, i]
                d += t * t
            if d < best:
                best = d
                row = g
    elif kind == CTRL_GRID:
        flat = 0
        for i in range(I):
            k = int(math.floor((xhat[i] - grid_lo[i]) / grid_h + 0.5))
            if k < 0:
                k = 0
            if k > grid_shape[i] - 1:
                k = grid_shape[i] - 1
            flat = flat * grid_shape[i] + k
        row = flat
    for k in range(out.shape[0]):
        out[k] = vals[row, k]


@njit(cache=True, nogil=True)
def bsp_decide(x, N, ntil_e, ntil_i, ord_ptr, ord_edges, elim, edge_pool, z, cap):
    """Balanced saturation allocation (dedicated-first fill, then water-fill).

    ``cap`` is a work buffer of length J.
    """
    I = x.shape[0]
    J = N.shape[0]
    for j in range(J):
        cap[j] = N[j]
    for i in range(I):
        if x[i] <= ntil_i[i]:
            rem = x[i]
            for p in range(ord_ptr[i], ord_ptr[i + 1]):
                e = ord_edges[p]
                t = rem if rem < ntil_e[e] else ntil_e[e]
                z[e] = t
                rem -= t
        else:
            for p in range(ord_ptr[i], ord_ptr[i + 1]):
                e = ord_edges[p]
                z[e] = ntil_e[e]
        for p in range(ord_ptr[i], ord_ptr[i + 1]):
            e = ord_edges[p]
            cap[edge_pool[e]] -= z[e]
    for r in range(I):
        i = elim[r]
        rem = x[i] - ntil_i[i]
        if rem <= 0:
            continue
        for p in range(ord_ptr[i], ord_ptr[i + 1]):
            if rem == 0:
                break
            e = ord_edges[p]
            j = edge_pool[e]
            t = rem if rem < cap[j] else cap[j]
            if t > 0:
                z[e] += t
                cap[j] -= t
                rem -= t
    for j in range(J):
        if cap[j] < 0:
            return False
    return True


@njit(cache=True, nogil=True)
def canonical_decide(x, N, u, s_edge, s_cls, s_pool, s_leafc, z, q, y, a, b):
    """Canonical jointly work-conserving allocation for a given control value.

    ``a`` and ``b`` are integer work buffers of lengths I and J.  Returns
    ``True`` when the allocation is nonnegative.
    """
    I = x.shape[0]
    J = N.shape[0]
    tot = 0
    for i in range(I):
        tot += x[i]
    for j in range(J):
        tot -= N[j]
    qp = tot if tot > 0 else 0
    ym = -tot if tot < 0 else 0
    round_map(qp, u[:I], q)
    round_map(ym, u[I:], y)
    for i in range(I):
        a[i] = x[i] - q[i]
    for j in range(J):
        b[j] = N[j] - y[j]
    peel_int(a, b, s_edge, s_cls, s_pool, s_leafc, z)
    for e in range(z.shape[0]):
        if z[e] < 0:
            return False
    return True


@njit(cache=True, nogil=True)
def in_region(x, nx_star, radius):
    d = 0.0
    for i in range(x.shape[0]):
        d += abs(x[i] - nx_star[i])
    return d <= radius


@njit(cache=True, nogil=True)
def decide(
    x, N, pol_kind, ntil_e, ntil_i, ord_ptr, ord_edges, elim,
    edge_cls, edge_pool, s_edge, s_cls, s_pool, s_leafc,
    ctrl_kind, ctrl_pts, ctrl_vals, grid_lo, grid_h, grid_shape,
    nx_star, sqrt_n, radius, z, ubuf, xhat, qbuf, ybuf, ibuf, jbuf,
):
    """Policy decision at ``x``.

    Returns a code: 0 BSP used, 1 canonical used, 2 canonical failed and BSP
    used instead (concatenated policy), 3 canonical failed with no fallback.
    """
    I = x.shape[0]
    use_can = False
    if pol_kind == POL_CANONICAL:
        use_can = True
    elif pol_kind == POL_CONCAT:
        use_can = in_region(x, nx_star, radius)
    if use_can:
        for i in range(I):
            xhat[i] = (x[i] - nx_star[i]) / sqrt_n
        eval_control(xhat, ctrl_kind, ctrl_pts, ctrl_vals, grid_lo, grid_h, grid_shape, ubuf)
        ok = canonical_decide(x, N, ubuf, s_edge, s_cls, s_pool, s_leafc, z, qbuf, ybuf, ibuf, jbuf)
        if ok:
            return 1
        if pol_kind == POL_CANONICAL:
            return 3
        bsp_decide(x, N, ntil_e, ntil_i, ord_ptr, ord_edges, elim, edge_pool, z, jbuf)
        return 2
    bsp_decide(x, N, ntil_e, ntil_i, ord_ptr, ord_edges, elim, edge_pool, z, jbuf)
    return 0


@njit(cache=True, nogil=True)
def decide_batch(
    X, N, pol_kind, ntil_e, ntil_i, ord_ptr, ord_edges, elim,
    edge_cls, edge_pool, s_edge, s_cls, s_pool, s_leafc,
    ctrl_kind, ctrl_pts, ctrl_vals, grid_lo, grid_h, grid_shape,
    nx_star, sqrt_n, radius,
):
    S, I = X.shape
    J = N.shape[0]
    E = edge_cls.shape[0]
    Z = np.zeros((S, E), np.int64)
    codes = np.zeros(S, np.int64)
    ubuf = np.empty(I + J)
    xhat = np.empty(I)
    qbuf = np.empty(I, np.int64)
    ybuf = np.empty(J, np.int64)
    ibuf = np.empty(I, np.int64)
    jbuf = np.empty(J, np.int64)
    z = np.zeros(E, np.int64)
    for s in range(S):
        for e in range(E):
            z[e] = 0
        codes[s] = decide(
            X[s], N, pol_kind, ntil_e, ntil_i, ord_ptr, ord_edges, elim,
            edge_cls, edge_pool, s_edge, s_cls, s_pool, s_leafc,
            ctrl_kind, ctrl_pts, ctrl_vals, grid_lo, grid_h, grid_shape,
            nx_star, sqrt_n, radius, z, ubuf, xhat, qbuf, ybuf, ibuf, jbuf,
        )
        for e in range(E):
            Z[s, e] = z[e]
    return Z, codes


@njit(cache=True, nogil=True)
def _hist_index(xhat, box_lo, cell, shape):
    flat = 0
    for i in range(xhat.shape[0]):
        k = int(math.floor((xhat[i] - box_lo[i]) / cell))
        if k < 0 or k >= shape[i]:
            return -1
        flat = flat * shape[i] + k
    return flat


@njit(cache=True, nogil=True)
def _hist_spread(xhat, width, box_lo, cell, shape, weight, hist, kbuf, fbuf):
    """Spread ``weight`` uniformly over the cube of side ``width`` centred at ``xhat``.

    A lattice chain with spacing ``width`` binned on a fixed grid aliases
    (cells hold a varying number of lattice points).  Treating each lattice
    point as a uniform density on its own cell removes that artefact.  Mass
    landing outside the box goes to the overflow slot ``hist[-1]``.
    """
    I = xhat.shape[0]
    ncell = hist.shape[0] - 1
    for i in range(I):
        lo = (xhat[i] - 0.5 * width - box_lo[i]) / cell
        k = int(math.floor(lo))
        kbuf[i] = k
        # fraction of the interval inside cell k (rest goes to cell k + 1)
        f = (k + 1 - lo) * cell / width
        fbuf[i] = 1.0 if f > 1.0 else f
    placed = 0.0
    for mask in range(1 << I):
        frac = 1.0
        flat = 0
        inside = True
        for i in range(I):
            if (mask >> i) & 1:
                fi = 1.0 - fbuf[i]
                k = kbuf[i] + 1
            else:
                fi = fbuf[i]
                k = kbuf[i]
            if fi <= 0.0:
                frac = 0.0
                break
            frac *= fi
            if k < 0 or k >= shape[i]:
                inside = False
            else:
                flat = flat * shape[i] + k
        if frac > 0.0 and inside:
            hist[flat] += weight * frac
            placed += weight * frac
    hist[ncell] += weight - placed


@njit(cache=True, nogil=True)
def _accumulate(t0, dt, t_burn, blen, nbatch, obs, batches):
    """Add ``obs * overlap`` to every batch that ``[t0, t0 + dt)`` meets."""
    a = t0 if t0 > t_burn else t_burn
    b = t0 + dt
    t_end = t_burn + blen * nbatch
    if b > t_end:
        b = t_end
    if b <= a:
        return 0.0
    k = int((a - t_burn) / blen)
    if k >= nbatch:
        k = nbatch - 1
    while a < b and k < nbatch:
        edge = t_burn + (k + 1) * blen
        if k == nbatch - 1:
            edge = b
        seg_end = b if b < edge else edge
        w = seg_end - a
        if w > 0:
            for m in range(obs.shape[0]):
                batches[k, m] += obs[m] * w
        a = seg_end
        k += 1
    lo = t0 if t0 > t_burn else t_burn
    return b - lo


@njit(cache=True, nogil=True)
def _pw(v, p):
    if p == 1.0:
        return v
    if p == 2.0:
        return v * v
    if v == 0.0:
        return 0.0
    return v ** p


@njit(cache=True, nogil=True)
def _fill_obs(xhat, qhat, yhat, xi, zeta, m, m_tilde, inreg, obs):
    I = xhat.shape[0]
    J = yhat.shape[0]
    s = 0.0
    nx = 0.0
    for i in range(I):
        s += xhat[i]
        nx += xhat[i] * xhat[i]
    nx = math.sqrt(nx)
    rq = 0.0
    nq = 0.0
    for i in range(I):
        rq += xi[i] * _pw(qhat[i], m)
        nq += qhat[i] * qhat[i]
    nq = math.sqrt(nq)
    ry = 0.0
    ny = 0.0
    for j in range(J):
        ry += zeta[j] * _pw(yhat[j], m)
        ny += yhat[j] * yhat[j]
        obs[OBS_YJ + j] = _pw(yhat[j], m_tilde)
    ny = math.sqrt(ny)
    obs[OBS_R] = rq + ry
    obs[OBS_RO] = rq
    obs[OBS_IN] = 1.0 if inreg else 0.0
    obs[OBS_SP] = s if s > 0 else 0.0
    obs[OBS_SM] = -s if s < 0 else 0.0
    a = 1.0 + nq + ny
    b = 1.0 + nq
    for c in range(3):
        obs[OBS_X + c] = nx
        obs[OBS_QY + c] = a
        obs[OBS_Q + c] = b
        obs[OBS_Y + c] = ny
        # kappa = 1, 2, 4 by repeated squaring
        nx = nx * nx
        a = a * a
        b = b * b
        ny = ny * ny


@njit(cache=True, nogil=True)
def ctmc_run(
    x0, T, t_burn, nbatch, rng,
    lam, mu_e, gam, N,
    pol_kind, ntil_e, ntil_i, ord_ptr, ord_edges, elim,
    edge_cls, edge_pool, s_edge, s_cls, s_pool, s_leafc,
    ctrl_kind, ctrl_pts, ctrl_vals, grid_lo, grid_h, grid_shape,
    nx_star, nz_star_e, sqrt_n, radius,
    xi, zeta, m, m_tilde, guard,
    box_lo, cell, box_shape, rad_dr, rad_nbins, max_log,
):
    """Event-by-event simulation of the headcount chain under a stationary policy.

    Returns a tuple ``(status, batches, hist, hist_u, rad, diag, x, counts,
    log_t, log_kind, log_idx, log_x)``.  ``diag`` holds ``[max |x_hat|_inf,
    max |x_hat|_2, max jwc ratio, balance violations, work-conservation
    violations, jwc violations, canonical fallbacks, events, time in region
    (total, after burn-in), decisions total]``.
    """
    I = x0.shape[0]
    J = N.shape[0]
    E = edge_cls.shape[0]
    K = OBS_YJ + J
    x = x0.copy()
    z = np.zeros(E, np.int64)
    q = np.zeros(I, np.int64)
    y = np.zeros(J, np.int64)
    qb = np.zeros(I, np.int64)
    yb = np.zeros(J, np.int64)
    ib = np.zeros(I, np.int64)
    jb = np.zeros(J, np.int64)
    ubuf = np.empty(I + J)
    xhat = np.empty(I)
    xh2 = np.empty(I)
    kbuf = np.empty(I, np.int64)
    fbuf = np.empty(I)
    qhat = np.empty(I)
    yhat = np.empty(J)
    obs = np.zeros(K)
    batches = np.zeros((nbatch, K))
    ncell = 1
    for i in range(I):
        ncell *= box_shape[i]
    hist = np.zeros(ncell + 1)
    hist_u = np.zeros((ncell, I + J))
    rad = np.zeros(rad_nbins)
    diag = np.zeros(10)
    counts = np.zeros(3, np.int64)
    log_t = np.zeros(max_log)
    log_kind = np.zeros(max_log, np.int64)
    log_idx = np.zeros(max_log, np.int64)
    log_x = np.zeros((max_log, I), np.int64)
    blen = (T - t_burn) / nbatch
    lam_tot = 0.0
    for i in range(I):
        lam_tot += lam[i]
    rates = np.zeros(E + I)
    t = 0.0
    nev = 0
    status = OK
    while t < T:
        for e in range(E):
            z[e] = 0
        # policy dispatch written out here: routing through decide() costs
        # several hundred nanoseconds per event in argument handling
        if pol_kind == POL_BSP:
            use_can = False
        elif pol_kind == POL_CANONICAL:
            use_can = True
        else:
            use_can = in_region(x, nx_star, radius)
        code = 0
        if use_can:
            for i in range(I):
                xhat[i] = (x[i] - nx_star[i]) / sqrt_n
            eval_control(xhat, ctrl_kind, ctrl_pts, ctrl_vals, grid_lo, grid_h, grid_shape, ubuf)
            if canonical_decide(x, N, ubuf, s_edge, s_cls, s_pool, s_leafc, z, qb, yb, ib, jb):
                code = 1
            elif pol_kind == POL_CANONICAL:
                code = 3
            else:
                bsp_decide(x, N, ntil_e, ntil_i, ord_ptr, ord_edges, elim, edge_pool, z, jb)
                code = 2
        else:
            bsp_decide(x, N, ntil_e, ntil_i, ord_ptr, ord_edges, elim, edge_pool, z, jb)
        if code == 3:
            status = OUTSIDE_JWC
            break
        if code == 2:
            diag[6] += 1
        # derived queue and idleness, invariant checks
        for i in range(I):
            q[i] = x[i]
        for j in range(J):
            y[j] = N[j]
        for e in range(E):
            q[edge_cls[e]] -= z[e]
            y[edge_pool[e]] -= z[e]
        bal_bad = False
        for i in range(I):
            if q[i] < 0:
                bal_bad = True
        for j in range(J):
            if y[j] < 0:
                bal_bad = True
        if bal_bad:
            diag[3] += 1
        for e in range(E):
            if q[edge_cls[e]] > 0 and y[edge_pool[e]] > 0:
                diag[4] += 1
                break
        sq = 0
        sy = 0
        for i in range(I):
            sq += q[i]
        for j in range(J):
            sy += y[j]
        inreg = in_region(x, nx_star, radius)
        if code == 1 and sq > 0 and sy > 0:
            diag[5] += 1
        # scaled quantities
        nxi = 0.0
        nx2 = 0.0
        for i in range(I):
            xh2[i] = (x[i] - nx_star[i]) / sqrt_n
            qhat[i] = q[i] / sqrt_n
            a = abs(xh2[i])
            if a > nxi:
                nxi = a
            nx2 += xh2[i] * xh2[i]
        nx2 = math.sqrt(nx2)
        for j in range(J):
            yhat[j] = y[j] / sqrt_n
        if nxi > diag[0]:
            diag[0] = nxi
        if nx2 > diag[1]:
            diag[1] = nx2
        if nxi > guard:
            status = EXPLODED
            break
        if code == 1 and nx2 > 0:
            mz = 0.0
            for e in range(E):
                a = abs(z[e] - nz_star_e[e]) / sqrt_n
                if a > mz:
                    mz = a
            r = mz
            if sq / sqrt_n > r:
                r = sq / sqrt_n
            if sy / sqrt_n > r:
                r = sy / sqrt_n
            r = r / nx2
            if r > diag[2]:
                diag[2] = r
        _fill_obs(xh2, qhat, yhat, xi, zeta, m, m_tilde, inreg, obs)
        # rates
        tot = lam_tot
        for e in range(E):
            rates[e] = mu_e[e] * z[e]
            tot += rates[e]
        for i in range(I):
            rates[E + i] = gam[i] * q[i]
            tot += rates[E + i]
        if tot <= 0.0:
            dt = T - t
        else:
            dt = rng.exponential(1.0 / tot)
            if t + dt > T:
                dt = T - t
        w = _accumulate(t, dt, t_burn, blen, nbatch, obs, batches)
        if w > 0:
            if inreg:
                diag[8] += w
            rb = int(nx2 / rad_dr)
            if rb >= rad_nbins:
                rb = rad_nbins - 1
            rad[rb] += w
            hi = _hist_index(xh2, box_lo, cell, box_shape)
            _hist_spread(xh2, 1.0 / sqrt_n, box_lo, cell, box_shape, w, hist, kbuf, fbuf)
            if hi >= 0:
                # control parameterization of the current allocation
                if sq > 0:
                    for i in range(I):
                        hist_u[hi, i] += w * q[i] / sq
                else:
                    hist_u[hi, I - 1] += w
                if sy > 0:
                    for j in range(J):
                        hist_u[hi, I + j] += w * y[j] / sy
                else:
                    hist_u[hi, I + J - 1] += w
        t += dt
        if t >= T or tot <= 0.0:
            break
        # select event
        v = rng.random() * tot
        kind = 0
        idx = I - 1
        if v < lam_tot:
            acc = 0.0
            for i in range(I):
                acc += lam[i]
                if v < acc:
                    idx = i
                    break
            x[idx] += 1
        else:
            v -= lam_tot
            acc = 0.0
            done = False
            for e in range(E):
                acc += rates[e]
                if v < acc and rates[e] > 0:
                    kind = 1
                    idx = e
                    done = True
                    break
            if not done:
                kind = 2
                idx = -1
                last = -1
                for i in range(I):
                    r = rates[E + i]
                    if r > 0:
                        last = i
                        acc += r
                        if v < acc:
                            idx = i
                            break
                if idx < 0:
                    idx = last
            if kind == 1:
                x[edge_cls[idx]] -= 1
            else:
                x[idx] -= 1
        counts[kind] += 1
        if nev < max_log:
            log_t[nev] = t
            log_kind[nev] = kind
            log_idx[nev] = idx
            for i in range(I):
                log_x[nev, i] = x[i]
        nev += 1
    diag[7] = nev
    diag[9] = T - t_burn
    return status, batches, hist, hist_u, rad, diag, x, counts, log_t, log_kind, log_idx, log_x


@njit(cache=True, nogil=True)
def sde_drift(x, u, ell, mu_e, gam, edge_cls, s_edge, s_cls, s_pool, s_leafc, b, a, be, pe):
    """Drift at ``x`` under control ``u``; ``a``, ``be``, ``pe`` are work buffers (I, J, E)."""
    I = x.shape[0]
    J = be.shape[0]
    E = mu_e.shape[0]
    s = 0.0
    for i in range(I):
        s += x[i]
    sp = s if s > 0 else 0.0
    sm = -s if s < 0 else 0.0
    for i in range(I):
        a[i] = x[i] - sp * u[i]
    for j in range(J):
        be[j] = -sm * u[I + j]
    peel_float(a, be, s_edge, s_cls, s_pool, s_leafc, pe)
    for i in range(I):
        b[i] = ell[i] - gam[i] * sp * u[i]
    for e in range(E):
        b[edge_cls[e]] -= mu_e[e] * pe[e]


@njit(cache=True, nogil=True)
def sde_run(
    x0, T, h, t_burn, nbatch, rng, noise_scale,
    lam, ell, mu_e, gam, J,
    edge_cls, s_edge, s_cls, s_pool, s_leafc,
    ctrl_kind, ctrl_pts, ctrl_vals, grid_lo, grid_h, grid_shape,
    xi, zeta, m, m_tilde, guard,
    box_lo, cell, box_shape, rad_dr, rad_nbins,
):
    """Euler-Maruyama path of the controlled diffusion with ergodic averages."""
    I = x0.shape[0]
    K = OBS_YJ + J
    x = x0.copy()
    u = np.empty(I + J)
    b = np.empty(I)
    qv = np.empty(I)
    yv = np.empty(J)
    obs = np.zeros(K)
    batches = np.zeros((nbatch, K))
    ncell = 1
    for i in range(I):
        ncell *= box_shape[i]
    hist = np.zeros(ncell + 1)
    hist_u = np.zeros((ncell, I + J))
    rad = np.zeros(rad_nbins)
    wa = np.empty(I)
    wb = np.empty(J)
    wp = np.empty(mu_e.shape[0])
    sig = np.empty(I)
    for i in range(I):
        sig[i] = noise_scale * math.sqrt(2.0 * lam[i] * h)
    blen = (T - t_burn) / nbatch
    nsteps = int(math.ceil(T / h - 1e-9))
    maxabs = 0.0
    status = OK
    t = 0.0
    for k in range(nsteps):
        dt = h if t + h <= T else T - t
        eval_control(x, ctrl_kind, ctrl_pts, ctrl_vals, grid_lo, grid_h, grid_shape, u)
        s = 0.0
        for i in range(I):
            s += x[i]
        sp = s if s > 0 else 0.0
        sm = -s if s < 0 else 0.0
        for i in range(I):
            qv[i] = sp * u[i]
        for j in range(J):
            yv[j] = sm * u[I + j]
        _fill_obs(x, qv, yv, xi, zeta, m, m_tilde, False, obs)
        w = _accumulate(t, dt, t_burn, blen, nbatch, obs, batches)
        if w > 0:
            hi = _hist_index(x, box_lo, cell, box_shape)
            if hi < 0:
                hist[ncell] += w
            else:
                hist[hi] += w
                for c in range(I + J):
                    hist_u[hi, c] += w * u[c]
            nrm = 0.0
            for i in range(I):
                nrm += x[i] * x[i]
            rb = int(math.sqrt(nrm) / rad_dr)
            if rb >= rad_nbins:
                rb = rad_nbins - 1
            rad[rb] += w
        sde_drift(x, u, ell, mu_e, gam, edge_cls, s_edge, s_cls, s_pool, s_leafc, b, wa, wb, wp)
        sq = math.sqrt(dt / h)
        for i in range(I):
            x[i] += b[i] * dt + sig[i] * sq * rng.standard_normal()
            a = abs(x[i])
            if a > maxabs:
                maxabs = a
        t += dt
        if maxabs > guard:
            status = EXPLODED
            break
    return status, batches, hist, hist_u, rad, maxabs, x, t
