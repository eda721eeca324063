"""Run configuration: INI files with flat sections plus ``--set`` overrides.

Layout (indices are zero-based)::

    [network]        classes, pools
    [class.i]        lam, gamma, lam_hat
    [pool.j]         nu, nu_hat
    [edge.i-j]       mu, mu_hat          (one section per edge)
    [policy]         kind, C_tilde, control, uc, us, table
    [cost]           xi, zeta, m, m_tilde, theta, delta
    [run]            n, n_list, horizon, sde_horizon, step, burn_in, num_batches,
                     seeds, replications, workers, event_log, output
    [lyapunov]       kind, epsilon, beta, kappa, delta, samples, radius,
                     moment_kappas, moment_variant
"""
from __future__ import annotations

import configparser
import hashlib
import json
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .ctmc import CostSpec
from .errors import ConfigError
from .topology import LimitParams, NetworkTopology, check_params, validate_topology

DEFAULTS = {
    "policy": {"kind": "bsp", "C_tilde": "auto", "control": "constant", "uc": "", "us": "", "table": ""},
    "cost": {"xi": "", "zeta": "", "m": "1", "m_tilde": "1", "theta": "", "delta": ""},
    "run": {
        "n": "", "n_list": "100", "horizon": "10000", "sde_horizon": "", "step": "",
        "burn_in": "0.1", "num_batches": "32", "seeds": "0", "replications": "4",
        "workers": "1", "event_log": "0", "output": "out",
    },
    "lyapunov": {
        "kind": "exponential", "epsilon": "0.01", "beta": "", "kappa": "2", "delta": "0.1",
        "samples": "10000", "radius": "20", "moment_kappas": "1,2", "moment_variant": "full",
    },
}
CLASS_DEFAULTS = {"gamma": "0", "lam_hat": "0"}
POOL_DEFAULTS = {"nu_hat": "0"}
EDGE_DEFAULTS = {"mu_hat": "0"}
POLICY_KINDS = ("bsp", "canonical", "concatenated")
EDGE_RE = re.compile(r"^edge\.(\d+)-(\d+)$")


@dataclass(frozen=True, eq=False)
class RunConfig:
    """Fully resolved experiment configuration.

    ``resolved`` holds every section and key as strings (defaults filled in);
    it is what gets embedded in artifacts and hashed.
    """

    topo: NetworkTopology
    limit: LimitParams
    costs: CostSpec
    policy: dict
    run: dict
    lyapunov: dict
    resolved: dict
    base_dir: Path

    @property
    def config_hash(self):
        return config_hash(self.resolved)

    @property
    def n_list(self):
        return self.run["n_list"]

    @property
    def n(self):
        return self.run["n"] if self.run["n"] is not None else self.run["n_list"][0]


def config_hash(resolved):
    blob = json.dumps(resolved, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


# ---------------------------------------------------------------------------
# value parsing helpers


def _get(res, section, key):
    try:
        return res[section][key]
    except KeyError:
        raise ConfigError(f"{section}.{key}", "missing") from None


def _float(res, section, key, positive=False, nonneg=False):
    raw = _get(res, section, key)
    try:
        v = float(raw)
    except ValueError:
        raise ConfigError(f"{section}.{key}", f"not a number: {raw!r}") from None
    if positive and not v > 0:
        raise ConfigError(f"{section}.{key}", "must be positive")
    if nonneg and v < 0:
        raise ConfigError(f"{section}.{key}", "must be nonnegative")
    return v


def _int(res, section, key, minimum=None):
    raw = _get(res, section, key)
    try:
        v = int(raw)
    except ValueError:
        raise ConfigError(f"{section}.{key}", f"not an integer: {raw!r}") from None
    if minimum is not None and v < minimum:
        raise ConfigError(f"{section}.{key}", f"must be at least {minimum}")
    return v


def _floats(res, section, key, length=None):
    raw = _get(res, section, key).strip()
    if not raw:
        return None
    try:
        v = [float(t) for t in raw.split(",")]
    except ValueError:
        raise ConfigError(f"{section}.{key}", f"not a comma-separated list of numbers: {raw!r}") from None
    if length is not None and len(v) != length:
        raise ConfigError(f"{section}.{key}", f"expected {length} values, got {len(v)}")
    return v


def _ints(res, section, key):
    raw = _get(res, section, key).strip()
    try:
        return [int(t) for t in raw.split(",") if t.strip()]
    except ValueError:
        raise ConfigError(f"{section}.{key}", f"not a comma-separated list of integers: {raw!r}") from None


# ---------------------------------------------------------------------------
# loading


def _read(path):
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str  # keys are case-sensitive (C_tilde)
    try:
        with open(path) as fh:
            cp.read_file(fh)
    except FileNotFoundError:
        raise ConfigError("config", f"file not found: {path}") from None
    except configparser.Error as exc:
        raise ConfigError("config", f"cannot parse {path}: {exc}") from None
    return {s: dict(cp[s]) for s in cp.sections()}


def apply_overrides(raw, overrides):
    """Apply ``section.key=value`` strings (the last dot separates section and key)."""
    out = {s: dict(v) for s, v in raw.items()}
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(item, "override must look like section.key=value")
        path, value = item.split("=", 1)
        path = path.strip()
        if "." not in path:
            raise ConfigError(path, "override key needs a section prefix")
        section, key = path.rsplit(".", 1)
        out.setdefault(section, {})[key] = value.strip()
    return out


def _resolve(raw):
    res = {}
    for section, keys in DEFAULTS.items():
        res[section] = dict(keys)
        res[section].update(raw.get(section, {}))
    for section, keys in raw.items():
        if section in DEFAULTS:
            continue
        if section.startswith("class."):
            res[section] = dict(CLASS_DEFAULTS, **keys)
        elif section.startswith("pool."):
            res[section] = dict(POOL_DEFAULTS, **keys)
        elif EDGE_RE.match(section):
            res[section] = dict(EDGE_DEFAULTS, **keys)
        elif section == "network":
            res[section] = dict(keys)
        else:
            raise ConfigError(section, "unknown section")
    for section, keys in res.items():
        allowed = set(DEFAULTS.get(section, {}))
        if section.startswith("class."):
            allowed = {"lam", "gamma", "lam_hat"}
        elif section.startswith("pool."):
            allowed = {"nu", "nu_hat"}
        elif EDGE_RE.match(section):
            allowed = {"mu", "mu_hat"}
        elif section == "network":
            allowed = {"classes", "pools", "allow_zero_abandonment"}
        for k in keys:
            if k not in allowed:
                raise ConfigError(f"{section}.{k}", "unknown key")
    return res


def _network(res):
    if "network" not in res:
        raise ConfigError("network", "missing section")
    I = _int(res, "network", "classes", 1)
    J = _int(res, "network", "pools", 1)
    edges = []
    for section in res:
        m = EDGE_RE.match(section)
        if m:
            i, j = int(m.group(1)), int(m.group(2))
            if i >= I or j >= J:
                raise ConfigError(section, f"edge outside {I} classes x {J} pools")
            edges.append((i, j))
    if not edges:
        raise ConfigError("edge", "no [edge.i-j] sections")
    topo = NetworkTopology(I, J, edges)
    report = validate_topology(topo)
    if not report.ok:
        raise ConfigError("edge", "; ".join(report.violations))
    lam = np.array([_float(res, f"class.{i}", "lam", positive=True) for i in range(I)])
    gamma = np.array([_float(res, f"class.{i}", "gamma", nonneg=True) for i in range(I)])
    lam_hat = np.array([_float(res, f"class.{i}", "lam_hat") for i in range(I)])
    nu = np.array([_float(res, f"pool.{j}", "nu", positive=True) for j in range(J)])
    nu_hat = np.array([_float(res, f"pool.{j}", "nu_hat") for j in range(J)])
    mu = np.zeros((I, J))
    mu_hat = np.zeros((I, J))
    for i, j in topo.edges:
        mu[i, j] = _float(res, f"edge.{i}-{j}", "mu", positive=True)
        mu_hat[i, j] = _float(res, f"edge.{i}-{j}", "mu_hat")
    allow = res["network"].get("allow_zero_abandonment", "false").strip().lower() in ("1", "true", "yes")
    limit = LimitParams(lam=lam, mu=mu, gamma=gamma, nu=nu, lam_hat=lam_hat, mu_hat=mu_hat,
                        nu_hat=nu_hat, allow_zero_abandonment=allow)
    try:
        check_params(topo, limit)
    except Exception as exc:
        raise ConfigError("network", str(exc)) from None
    return topo, limit


def _costs(res, I, J):
    xi = _floats(res, "cost", "xi", I)
    zeta = _floats(res, "cost", "zeta", J)
    theta = _floats(res, "cost", "theta", J)
    delta = _floats(res, "cost", "delta", J)
    default = CostSpec.default(I, J)
    try:
        return CostSpec(
            xi=default.xi if xi is None else xi,
            zeta=default.zeta if zeta is None else zeta,
            m=_float(res, "cost", "m", positive=True),
            m_tilde=_float(res, "cost", "m_tilde", positive=True),
            theta=theta,
            delta=delta,
        )
    except ValueError as exc:
        key = "cost.theta" if "theta" in str(exc) else "cost.delta" if "delta" in str(exc) else "cost"
        raise ConfigError(key, str(exc)) from None


def _policy(res, I, J):
    kind = _get(res, "policy", "kind").strip()
    if kind not in POLICY_KINDS:
        raise ConfigError("policy.kind", f"must be one of {', '.join(POLICY_KINDS)}")
    ct = _get(res, "policy", "C_tilde").strip()
    C_tilde = None if ct == "auto" else _float(res, "policy", "C_tilde", positive=True)
    control = _get(res, "policy", "control").strip()
    if control not in ("constant", "table"):
        raise ConfigError("policy.control", "must be 'constant' or 'table'")
    uc = _floats(res, "policy", "uc", I)
    us = _floats(res, "policy", "us", J)
    for key, v in (("uc", uc), ("us", us)):
        if v is not None and (min(v) < 0 or abs(sum(v) - 1) > 1e-9):
            raise ConfigError(f"policy.{key}", "must be a probability vector")
    return {"kind": kind, "C_tilde": C_tilde, "control": control,
            "uc": uc if uc is not None else [0.0] * (I - 1) + [1.0],
            "us": us if us is not None else [0.0] * (J - 1) + [1.0],
            "table": _get(res, "policy", "table").strip()}


def _run(res):
    n_list = _ints(res, "run", "n_list")
    if not n_list or min(n_list) < 1:
        raise ConfigError("run.n_list", "need at least one positive integer")
    n = _get(res, "run", "n").strip()
    sde_T = _get(res, "run", "sde_horizon").strip()
    step = _get(res, "run", "step").strip()
    burn = _float(res, "run", "burn_in", nonneg=True)
    if burn >= 1:
        raise ConfigError("run.burn_in", "must be below 1")
    seeds = _ints(res, "run", "seeds")
    if not seeds:
        raise ConfigError("run.seeds", "need at least one seed")
    return {
        "n": _int(res, "run", "n", 1) if n else None,
        "n_list": n_list,
        "horizon": _float(res, "run", "horizon", positive=True),
        "sde_horizon": _float(res, "run", "sde_horizon", positive=True) if sde_T else None,
        "step": _float(res, "run", "step", positive=True) if step else None,
        "burn_in": burn,
        "num_batches": _int(res, "run", "num_batches", 1),
        "seeds": seeds,
        "replications": _int(res, "run", "replications", 1),
        "workers": _int(res, "run", "workers", 1),
        "event_log": _int(res, "run", "event_log", 0),
        "output": _get(res, "run", "output").strip(),
    }


def _lyapunov(res, I):
    kind = _get(res, "lyapunov", "kind").strip()
    if kind not in ("polynomial", "exponential"):
        raise ConfigError("lyapunov.kind", "must be 'polynomial' or 'exponential'")
    beta = _floats(res, "lyapunov", "beta", I)
    if beta is not None and min(beta) <= 0:
        raise ConfigError("lyapunov.beta", "must be positive")
    variant = _get(res, "lyapunov", "moment_variant").strip()
    if variant not in ("full", "queue-only"):
        raise ConfigError("lyapunov.moment_variant", "must be 'full' or 'queue-only'")
    kappas = _ints(res, "lyapunov", "moment_kappas")
    if not kappas or any(k not in (1, 2, 4) for k in kappas):
        raise ConfigError("lyapunov.moment_kappas", "allowed values are 1, 2 and 4")
    return {
        "kind": kind,
        "epsilon": _float(res, "lyapunov", "epsilon", positive=True),
        "beta": beta if beta is not None else [1.0] * I,
        "kappa": _float(res, "lyapunov", "kappa", positive=True),
        "delta": _float(res, "lyapunov", "delta", positive=True),
        "samples": _int(res, "lyapunov", "samples", 1),
        "radius": _float(res, "lyapunov", "radius", positive=True),
        "moment_kappas": kappas,
        "moment_variant": variant,
    }


def load_config(path, overrides=()):
    """Parse, override, validate.

    Raises
    ------
    ConfigError
        Naming the offending ``section.key``.
    """
    raw = apply_overrides(_read(path), overrides)
    res = _resolve(raw)
    topo, limit = _network(res)
    costs = _costs(res, topo.I, topo.J)
    return RunConfig(topo, limit, costs, _policy(res, topo.I, topo.J), _run(res),
                     _lyapunov(res, topo.I), res, Path(path).resolve().parent)
