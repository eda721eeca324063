"""Sampling-based verification: discrete Lyapunov certificates, moment audits, convergence.

Every check here is a fit over sampled states or simulated traces, never a
proof.  Reports always record where and how much was sampled.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

from .ctmc import CostSpec, empirical_measure, simulate_ctmc, total_variation
from .diffusion import LyapunovSpec, build_diffusion_model, sample_ball, simulate_sde
from .errors import FitFailed, OutsideJWC
from .fluid import solve_fluid
from .policies import build_capacity_shift, certify_jwc_region, default_margin, make_concatenated
from .stats import batch_means_estimate, spearman
from .topology import scale_params

TREND_THRESHOLD = -0.8


# ---------------------------------------------------------------------------
# discrete generator

def discrete_generator(topo, scaled, fluid, policy, f, X):
    """Exact generator of the headcount chain applied to ``f`` composed with the scaling.

    Parameters
    ----------
    f : callable
        Maps scaled states ``(S, I)`` to values ``(S,)``.
    X : ndarray of int, shape (S, I)
        Headcount states.

    Returns
    -------
    Lf : ndarray, shape (S,)
    fx : ndarray, shape (S,)
        ``f`` at the scaled states.
    codes : ndarray
        Policy decision codes (3 marks an infeasible canonical allocation).
    """
    X = np.ascontiguousarray(np.atleast_2d(X), dtype=np.int64)
    n = scaled.n
    sq = math.sqrt(n)
    Z, codes = policy.decide_many(X)
    I = topo.I
    served = np.zeros((X.shape[0], I), dtype=np.int64)
    for e, i in enumerate(topo.edge_class):
        served[:, i] += Z[:, e]
    q = X - served
    mu_e = topo.edge_vector(scaled.mu_n)
    down_rate = np.zeros(X.shape, dtype=float)
    for e, i in enumerate(topo.edge_class):
        down_rate[:, i] += mu_e[e] * Z[:, e]
    down_rate += scaled.gamma_n[None, :] * q
    xh = (X - n * fluid.x_star[None, :]) / sq
    f0 = f(xh)
    Lf = np.zeros(X.shape[0])
    step = np.eye(I) / sq
    for i in range(I):
        Lf += scaled.lam_n[i] * (f(xh + step[i]) - f0)
        Lf += down_rate[:, i] * (f(xh - step[i]) - f0)
    return Lf, f0, codes


@dataclass(frozen=True, eq=False)
class LyapunovCertificate:
    """Fitted Foster-Lyapunov constants for ``L f <= C0 - C1 f`` on sampled states.

    Attributes
    ----------
    spec : LyapunovSpec
    C0, C1 : float
    region : dict
        Description of the sampled set (centre, radius, counts).
    samples : ndarray of int, shape (S, I)
        The evaluated headcount states.
    generator, values : ndarray
        ``L f`` and ``f`` at the samples.
    max_residual : float
        ``max(L f + C1 f - C0)`` over the samples.
    passed : bool
        ``C1 > 0`` and the residual is nonpositive everywhere.
    """

    spec: LyapunovSpec
    C0: float
    C1: float
    region: dict
    samples: np.ndarray = field(repr=False)
    generator: np.ndarray = field(repr=False)
    values: np.ndarray = field(repr=False)
    max_residual: float = 0.0
    passed: bool = False
    policy: str = ""
    n: int = 0

    def recheck(self):
        """Recompute the residual from the stored arrays."""
        resid = float(np.max(self.generator + self.C1 * self.values - self.C0))
        return self.C1 > 0 and resid <= 0.0

    def revalidate(self, topo, scaled, fluid, policy):
        """Re-evaluate the generator at the stored samples and require bitwise agreement."""
        Lf, f0, _ = discrete_generator(topo, scaled, fluid, policy, self.spec.value, self.samples)
        same = np.array_equal(Lf, self.generator) and np.array_equal(f0, self.values)
        return bool(same and self.recheck())

    def to_dict(self):
        return {
            "spec": self.spec.describe(),
            "C0": self.C0,
            "C1": self.C1,
            "region": self.region,
            "max_residual": self.max_residual,
            "passed": self.passed,
            "policy": self.policy,
            "n": self.n,
        }


def _lattice_samples(topo, scaled, fluid, count, radius, seed, accept=None, max_rounds=50):
    """Headcount states whose scaled images are uniform in a ball, filtered by ``accept``."""
    n = scaled.n
    sq = math.sqrt(n)
    nx = n * fluid.x_star
    kept, drawn, rejected = [], 0, 0
    have = 0
    for rnd in range(max_rounds):
        B = sample_ball(topo.I, 2 * count, radius, seed * 1000 + rnd)
        X = np.floor(nx[None, :] + sq * B + 0.5).astype(np.int64)
        X = X[np.all(X >= 0, axis=1)]
        drawn += X.shape[0]
        if accept is not None:
            ok = accept(X)
            rejected += int((~ok).sum())
            X = X[ok]
        kept.append(X)
        have += X.shape[0]
        if have >= count:
            break
    X = np.concatenate(kept)[:count]
    return X, drawn, rejected


def _fit(Lf, f0, xh_norm, r_inner):
    outer = xh_norm >= r_inner
    if not np.any(outer):
        return -math.inf, math.inf
    C1 = float(np.min(-Lf[outer] / f0[outer]))
    C0 = float(max(0.0, np.max(Lf + C1 * f0)))
    return C0, C1


def _certify(topo, scaled, fluid, policy, spec, X, region, r_inner):
    Lf, f0, codes = discrete_generator(topo, scaled, fluid, policy, spec.value, X)
    if np.any(codes == 3):
        bad = X[codes == 3][0]
        raise OutsideJWC(f"canonical allocation infeasible at sampled state x={bad.tolist()}")
    xh = (X - scaled.n * fluid.x_star[None, :]) / math.sqrt(scaled.n)
    C0, C1 = _fit(Lf, f0, np.linalg.norm(xh, axis=1), r_inner)
    resid = float(np.max(Lf + C1 * f0 - C0))
    region = dict(region, evaluated=int(X.shape[0]), r_inner=float(r_inner))
    cert = LyapunovCertificate(spec, C0, C1, region, X, Lf, f0, resid,
                               bool(C1 > 0 and resid <= 0.0), policy.kind, scaled.n)
    if not cert.passed:
        raise FitFailed(
            f"no (C0 >= 0, C1 > 0) fits the sampled generator values at n={scaled.n} "
            f"(best decay rate {C1:.4g})",
            cert,
        )
    return cert


def check_discrete_lyapunov(topo, scaled, fluid, policy, spec=None, samples=10_000, radius=20.0,
                            r_inner=5.0, seed=0):
    """Foster-Lyapunov certificate for a balanced saturation policy.

    The exponential Lyapunov function is composed with the diffusion scaling
    and the exact chain generator is evaluated at ``samples`` lattice states
    whose scaled images are uniform in the ball of radius ``radius``.  The
    decay rate ``C1`` is the smallest ``-L f / f`` over samples at scaled
    distance at least ``r_inner``; ``C0`` covers everything else.

    Raises
    ------
    FitFailed
        When no positive decay rate fits; the failed certificate is attached.
    """
    if policy.kind != "bsp":
        raise ValueError("check_discrete_lyapunov expects a balanced saturation policy")
    spec = spec if spec is not None else LyapunovSpec("exponential", np.ones(topo.I), epsilon=0.01)
    X, drawn, _ = _lattice_samples(topo, scaled, fluid, samples, radius, seed)
    region = {"shape": "ball", "centre": "n x*", "radius": float(radius), "drawn": drawn, "rejected": 0}
    return _certify(topo, scaled, fluid, policy, spec, X, region, r_inner)


def check_jwc_stability_preservation(topo, scaled, fluid, policy, spec=None, samples=10_000,
                                     radius=20.0, r_inner=5.0, seed=0):
    """Foster-Lyapunov certificate for a canonical policy on its JWC region.

    Sampling is as in :func:`check_discrete_lyapunov`, except that states
    outside the certified region are discarded before any evaluation.  The
    sampling ball shrinks to the region's scaled radius when that is smaller.
    """
    if policy.kind not in ("canonical", "concatenated"):
        raise ValueError("check_jwc_stability_preservation expects a canonical or concatenated policy")
    region = policy.region if policy.region is not None else certify_jwc_region(topo, scaled, fluid)
    if policy.kind == "canonical":
        from .policies import Policy

        policy = Policy("canonical", topo, scaled, fluid, control=policy.control, region=region)
    spec = spec if spec is not None else LyapunovSpec("exponential", np.ones(topo.I), epsilon=0.01)
    R = min(float(radius), region.radius / math.sqrt(scaled.n))
    nx = np.asarray(region.nx_star)

    def accept(X):
        return np.abs(X - nx[None, :]).sum(axis=1) <= region.radius

    X, drawn, rejected = _lattice_samples(topo, scaled, fluid, samples, R, seed, accept)
    desc = {"shape": "ball within JWC region", "centre": "n x*", "radius": R,
            "region_M0": region.M0, "drawn": drawn, "rejected": rejected}
    r_in = min(float(r_inner), 0.5 * R)
    return _certify(topo, scaled, fluid, policy, spec, X, desc, r_in)


# ---------------------------------------------------------------------------
# moment audits

@dataclass(frozen=True)
class MomentFit:
    kappa: int
    C0: float
    C1: float
    ok: bool
    worst_ratio: float
    ratios: tuple
    C1_by_n: dict

    def to_dict(self):
        d = dict(self.__dict__)
        d["ratios"] = list(self.ratios)
        d["C1_by_n"] = {str(k): v for k, v in sorted(self.C1_by_n.items())}
        return d


@dataclass(frozen=True)
class MomentAudit:
    """Joint fit of the moment bound over a set of traces.

    ``variant="full"`` bounds the state moment by queue plus idleness moments;
    ``variant="queue-only"`` drops idleness.
    """

    variant: str
    fits: dict
    used: tuple
    excluded: tuple
    cap: float

    @property
    def ok(self):
        return all(f.ok for f in self.fits.values())

    def to_dict(self):
        return {
            "variant": self.variant,
            "ok": self.ok,
            "cap": self.cap,
            "used": list(self.used),
            "excluded": [list(e) for e in self.excluded],
            "fits": {str(k): f.to_dict() for k, f in sorted(self.fits.items())},
        }


def check_moment_bounds(traces, kappas=(1, 2), variant="full", cap=100.0):
    """Fit ``avg |x_hat|^k <= C0 (1 + |x_hat(0)|^k) + C1 avg (1 + |q_hat| + |y_hat|)^k``.

    One pair ``(C0, C1)`` per ``k`` must hold for every trace at once.  The
    pair minimizes ``C0 + C1`` subject to both constants lying in
    ``[0, cap]`` (a linear program).  Traces that exploded are excluded and
    listed with the reason.
    """
    if variant not in ("full", "queue-only"):
        raise ValueError("variant must be 'full' or 'queue-only'")
    used, excluded = [], []
    for idx, tr in enumerate(traces):
        if tr.status != "ok" or not tr.estimates:
            excluded.append((idx, f"status {tr.status}"))
        elif "x0_hat_norm" not in tr.diagnostics:
            excluded.append((idx, "no initial-state record"))
        else:
            used.append(idx)
    fits = {}
    for k in kappas:
        rhs_name = f"one_q_y^{k}" if variant == "full" else f"one_q^{k}"
        a = np.array([traces[t].estimates[f"x_norm^{k}"].estimate for t in used])
        b = np.array([1.0 + traces[t].diagnostics["x0_hat_norm"] ** k for t in used])
        c = np.array([traces[t].estimates[rhs_name].estimate for t in used])
        if not used:
            fits[k] = MomentFit(k, math.nan, math.nan, False, math.nan, (), {})
            continue
        res = linprog(np.ones(2), A_ub=-np.column_stack([b, c]), b_ub=-a,
                      bounds=[(0.0, cap), (0.0, cap)], method="highs")
        if res.status == 0:
            C0, C1 = (float(v) for v in res.x)
            ratios = a / (C0 * b + C1 * c)
            ok = bool(np.all(ratios <= 1.0 + 1e-9))
        else:
            C0 = C1 = math.nan
            ratios = np.full(len(used), math.nan)
            ok = False
        by_n = {}
        for t, ai, ci in zip(used, a, c):
            nn = traces[t].n
            by_n[nn] = max(by_n.get(nn, 0.0), float(ai / ci))
        fits[k] = MomentFit(int(k), C0, C1, ok, float(np.max(ratios)), tuple(float(r) for r in ratios), by_n)
    return MomentAudit(variant, fits, tuple(used), tuple(excluded), float(cap))


# ---------------------------------------------------------------------------
# fairness

@dataclass(frozen=True)
class FairnessReport:
    """Idleness shares ``J_c[j] / sum J_c`` per seed against a target ``theta``.

    ``epsilon`` is the largest deviation of the mean share from ``theta``;
    ``spread`` the largest range of a share across seeds.
    """

    theta: tuple
    shares: dict
    mean_share: tuple
    spread: float
    epsilon: float

    def to_dict(self):
        return {"theta": list(self.theta), "shares": {str(k): list(v) for k, v in sorted(self.shares.items())},
                "mean_share": list(self.mean_share), "spread": self.spread, "epsilon": self.epsilon}


def fairness_report(results, theta):
    """Build a :class:`FairnessReport` from one simulation result per seed."""
    theta = np.asarray(theta, dtype=float)
    shares = {}
    for r in results:
        jc = np.array([r.estimates[f"J_c[{j}]"].estimate for j in range(theta.size)])
        tot = jc.sum()
        shares[r.seed] = tuple((jc / tot).tolist()) if tot > 0 else tuple([math.nan] * theta.size)
    S = np.array([shares[k] for k in sorted(shares)])
    mean = S.mean(axis=0)
    spread = float(np.max(S.max(axis=0) - S.min(axis=0)))
    eps = float(np.max(np.abs(mean - theta)))
    return FairnessReport(tuple(theta.tolist()), shares, tuple(mean.tolist()), spread, eps)


# ---------------------------------------------------------------------------
# convergence experiment

def _pooled(results, name):
    bm = np.concatenate([r.estimates[name].batch_means for r in results])
    seeds = tuple(s for r in results for s in r.estimates[name].seeds)
    r0 = results[0]
    return batch_means_estimate(bm, r0.horizon, r0.burn_in, seeds)


def _tv_stats(results, ref):
    tvs = [total_variation(empirical_measure(r, replication=k), ref)
           for r in results for k in range(r.replications)]
    pooled = [empirical_measure(r) for r in results]
    mass = sum(m.mass for m in pooled) / len(pooled)
    outside = sum(m.outside for m in pooled) / len(pooled)
    tv = 0.5 * (float(np.abs(mass - ref.mass).sum()) + abs(outside - ref.outside))
    se = float(np.std(tvs, ddof=1) / math.sqrt(len(tvs))) if len(tvs) > 1 else math.nan
    return tv, se


@dataclass(frozen=True)
class ConvergenceEntry:
    n: int
    estimate: object
    gap: float
    gap_half_width: float
    tv: float
    tv_se: float
    fraction_outside: float
    seeds: tuple
    config_hash: str
    fairness: object = None

    def to_dict(self):
        d = {
            "n": self.n,
            "estimate": self.estimate.to_dict(),
            "gap": self.gap,
            "gap_half_width": self.gap_half_width,
            "tv": self.tv,
            "tv_se": self.tv_se,
            "fraction_outside": self.fraction_outside,
            "seeds": list(self.seeds),
            "config_hash": self.config_hash,
        }
        if self.fairness is not None:
            d["fairness"] = self.fairness.to_dict()
        return d


@dataclass(frozen=True)
class ConvergenceReport:
    """CTMC-versus-diffusion comparison along a sequence of ``n``.

    Attributes
    ----------
    metric : str
        Observable compared (default the running cost ``J``).
    entries : tuple of ConvergenceEntry
        Sorted by ``n``.
    diffusion : ErgodicEstimate
    gap_trend : float
        Spearman correlation of the gap against ``n``.
    outside_trend : float
        Spearman correlation of the time fraction outside the JWC region
        against ``n`` (nan when constant).
    tv_non_increasing : bool
        Each TV distance is at most the previous one plus two combined
        standard errors.
    """

    metric: str
    entries: tuple
    diffusion: object
    gap_trend: float
    outside_trend: float
    tv_non_increasing: bool
    outside_non_increasing: bool
    config_hash: str
    traces: tuple = field(default=(), repr=False)

    @property
    def gap_decreasing(self):
        return len(self.entries) < 2 or (self.gap_trend <= TREND_THRESHOLD)

    def to_dict(self):
        return {
            "metric": self.metric,
            "entries": [e.to_dict() for e in self.entries],
            "diffusion": self.diffusion.to_dict(),
            "gap_trend": None if math.isnan(self.gap_trend) else self.gap_trend,
            "outside_trend": None if math.isnan(self.outside_trend) else self.outside_trend,
            "trend_threshold": TREND_THRESHOLD,
            "gap_decreasing": self.gap_decreasing,
            "tv_non_increasing": self.tv_non_increasing,
            "outside_non_increasing": self.outside_non_increasing,
            "config_hash": self.config_hash,
        }

    def rows(self):
        """Plot-ready rows ``(n, estimate, ci_lo, ci_hi, metric)``."""
        out = []
        for e in self.entries:
            lo, hi = e.estimate.ci
            out.append((e.n, e.estimate.estimate, lo, hi, f"{self.metric}_ctmc"))
        for e in self.entries:
            out.append((e.n, e.gap, e.gap - e.gap_half_width, e.gap + e.gap_half_width, f"{self.metric}_gap"))
        for e in self.entries:
            out.append((e.n, e.tv, e.tv - 2 * e.tv_se, e.tv + 2 * e.tv_se, "tv"))
        lo, hi = self.diffusion.ci
        out.append(("inf", self.diffusion.estimate, lo, hi, f"{self.metric}_diffusion"))
        return out


def convergence_experiment(topo, limit, control, n_list, costs=None, seeds=(0,), horizon=2e4,
                           sde_horizon=None, step=None, replications=4, C_tilde=None, grid=None,
                           metric="J", theta=None, config_hash="", workers=1):
    """Compare the CTMC under concatenated policies with the diffusion under ``control``.

    For each ``n`` and each seed the chain is simulated with ``replications``
    replications; the diffusion is simulated once per seed.  Batch means are
    pooled across seeds before forming confidence intervals.
    """
    costs = costs if costs is not None else CostSpec.default(topo.I, topo.J)
    fluid = solve_fluid(topo, limit)
    model = build_diffusion_model(topo, limit, fluid)
    C_tilde = C_tilde if C_tilde is not None else default_margin(topo, limit, fluid)
    sde_T = sde_horizon if sde_horizon is not None else horizon
    seeds = tuple(sorted(int(s) for s in seeds))
    sde_runs = [simulate_sde(model, control, horizon=sde_T, step=step, seed=s, costs=costs,
                             replications=replications, grid=grid, workers=workers) for s in seeds]
    diff_est = _pooled(sde_runs, metric)
    ref_m = [empirical_measure(r) for r in sde_runs]
    ref = type(ref_m[0])(ref_m[0].grid, sum(m.mass for m in ref_m) / len(ref_m),
                         sum(m.outside for m in ref_m) / len(ref_m), ref_m[0].u_mean)
    entries = []
    traces = []
    for n in sorted(int(v) for v in n_list):
        scaled = scale_params(limit, n, topo)
        shift = build_capacity_shift(topo, scaled, fluid, C_tilde)
        region = certify_jwc_region(topo, scaled, fluid)
        policy = make_concatenated(topo, scaled, fluid, shift, control, region)
        runs = [simulate_ctmc(topo, scaled, policy, horizon, s, costs=costs, fluid=fluid,
                              replications=replications, grid=grid, workers=workers) for s in seeds]
        traces += runs
        est = _pooled(runs, metric)
        inreg = _pooled(runs, "in_region").estimate
        tv, se = _tv_stats(runs, ref)
        fair = fairness_report(runs, theta) if theta is not None else None
        entries.append(ConvergenceEntry(
            n, est, abs(est.estimate - diff_est.estimate),
            math.hypot(est.half_width, diff_est.half_width), tv, se, 1.0 - inreg,
            seeds, config_hash, fair))
    ns = [e.n for e in entries]
    gaps = [e.gap for e in entries]
    outside = [e.fraction_outside for e in entries]
    tv_ok = all(
        b.tv <= a.tv + 2.0 * math.hypot(a.tv_se if not math.isnan(a.tv_se) else 0.0,
                                        b.tv_se if not math.isnan(b.tv_se) else 0.0)
        for a, b in zip(entries, entries[1:])
    )
    out_ok = all(b <= a + 1e-12 for a, b in zip(outside, outside[1:]))
    return ConvergenceReport(metric, tuple(entries), diff_est,
                             spearman(ns, gaps) if len(ns) > 1 else math.nan,
                             spearman(ns, outside) if len(ns) > 1 else math.nan,
                             bool(tv_ok), bool(out_ok), config_hash, tuple(traces))
