"""Command-line entry point: ``hwnet <subcommand> CONFIG [--set section.key=value ...]``.

Every subcommand writes ``<out>/<subcommand>.json`` holding the resolved
configuration, its SHA-256 hash and the result.  Exit status is 0 on
success, 2 for invalid configuration or arguments and 3 when a simulation
or solver fails at run time.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import verify
from .config import load_config
from .ctmc import simulate_ctmc, write_event_log
from .diffusion import LyapunovSpec, build_diffusion_model, search_structural, simulate_sde
from .errors import (
    ConfigError,
    DomainViolation,
    FitFailed,
    HWNetError,
    InfeasibleShift,
    NegativeRate,
    NoAnchorClass,
    NotCriticallyLoaded,
    ResourcePoolingViolated,
    StructureViolation,
)
from .fluid import extract_drift_matrices, psi_map, solve_fluid
from .policies import (
    MarkovControl,
    Policy,
    build_capacity_shift,
    certify_jwc_region,
    default_margin,
)
from .topology import scale_params

log = logging.getLogger("hwnet")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
# problems with the model data itself count as validation failures
INVALID_MODEL = (NegativeRate, NotCriticallyLoaded, ResourcePoolingViolated, StructureViolation,
                 NoAnchorClass, InfeasibleShift)


class UsageError(Exception):
    """Bad command-line arguments (reported with exit status 2)."""


def _clean(obj):
    """Make ``obj`` JSON-serializable with NaN/inf mapped to null."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


def write_json(path, payload):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    text = json.dumps(_clean(payload), sort_keys=True, indent=2) + "\n"
    path.write_text(text)
    return path


def write_rows(path, rows, header=("n", "estimate", "ci_lo", "ci_hi", "metric")):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])
    return path


# ---------------------------------------------------------------------------
# building blocks from a config


def build_control(cfg):
    I, J = cfg.topo.I, cfg.topo.J
    p = cfg.policy
    if p["control"] == "constant":
        return MarkovControl.constant(p["uc"], p["us"])
    if not p["table"]:
        raise ConfigError("policy.table", "a table control needs a CSV path")
    path = Path(p["table"])
    if not path.is_absolute():
        path = cfg.base_dir / path
    try:
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    except OSError:
        raise ConfigError("policy.table", f"cannot read {path}") from None
    if data.shape[1] != 2 * I + J:
        raise ConfigError("policy.table", f"expected {2 * I + J} columns (x, u^c, u^s)")
    try:
        return MarkovControl.table(data[:, :I], data[:, I:], I, J)
    except (ValueError, DomainViolation) as exc:
        raise ConfigError("policy.table", str(exc)) from None


def build_policy(cfg, n, fluid, kind=None):
    topo, limit = cfg.topo, cfg.limit
    kind = kind or cfg.policy["kind"]
    scaled = scale_params(limit, n, topo)
    shift = region = control = None
    if kind in ("bsp", "concatenated"):
        C = cfg.policy["C_tilde"] if cfg.policy["C_tilde"] is not None else default_margin(topo, limit, fluid)
        shift = build_capacity_shift(topo, scaled, fluid, C)
    if kind in ("canonical", "concatenated"):
        control = build_control(cfg)
        region = certify_jwc_region(topo, scaled, fluid)
    return scaled, Policy(kind, topo, scaled, fluid, shift=shift, control=control, region=region)


def _lyap_spec(cfg):
    ly = cfg.lyapunov
    return LyapunovSpec(ly["kind"], ly["beta"], kappa=ly["kappa"], epsilon=ly["epsilon"], delta=ly["delta"])


# ---------------------------------------------------------------------------
# subcommands


def cmd_fluid(cfg, args):
    fl = solve_fluid(cfg.topo, cfg.limit)
    dm = extract_drift_matrices(cfg.topo, cfg.limit, fl)
    return {
        "xi_star": fl.xi_star, "x_star": fl.x_star, "z_star": fl.z_star, "residual": fl.residual,
        "drift": {"ell": dm.ell, "B1": dm.B1, "B2": dm.B2, "gamma": dm.gamma,
                  "elimination_order": list(dm.elimination_order), "root_pool": dm.root_pool},
    }


def _vector(text, name, length):
    if text is None:
        raise UsageError(f"--{name} is required")
    try:
        v = [float(t) for t in text.split(",")]
    except ValueError:
        raise UsageError(f"--{name}: not a list of numbers") from None
    if len(v) != length:
        raise UsageError(f"--{name}: expected {length} values")
    return np.array(v)


def cmd_psi(cfg, args):
    a = _vector(args.alpha, "alpha", cfg.topo.I)
    b = _vector(args.beta, "beta", cfg.topo.J)
    if np.all(a == np.round(a)) and np.all(b == np.round(b)):
        a, b = a.astype(np.int64), b.astype(np.int64)
    return {"alpha": a, "beta": b, "psi": psi_map(cfg.topo, a, b)}


def cmd_simulate_ctmc(cfg, args):
    r = cfg.run
    fluid = solve_fluid(cfg.topo, cfg.limit)
    scaled, pol = build_policy(cfg, cfg.n, fluid)
    res = simulate_ctmc(cfg.topo, scaled, pol, r["horizon"], r["seeds"][0], costs=cfg.costs, fluid=fluid,
                        replications=r["replications"], burn_in_frac=r["burn_in"],
                        num_batches=r["num_batches"], event_log=r["event_log"], workers=r["workers"])
    if r["event_log"]:
        write_event_log(res, Path(args.out) / "simulate-ctmc-events.csv")
    return {"policy": pol.describe(), "costs": cfg.costs.describe(), "summary": res.summary()}


def cmd_simulate_diffusion(cfg, args):
    r = cfg.run
    fluid = solve_fluid(cfg.topo, cfg.limit)
    model = build_diffusion_model(cfg.topo, cfg.limit, fluid)
    control = build_control(cfg)
    T = r["sde_horizon"] or r["horizon"]
    res = simulate_sde(model, control, horizon=T, step=r["step"], seed=r["seeds"][0], costs=cfg.costs,
                       replications=r["replications"], burn_in_frac=r["burn_in"],
                       num_batches=r["num_batches"], workers=r["workers"])
    return {"control": control.describe(), "costs": cfg.costs.describe(), "summary": res.summary()}


def cmd_verify_lyapunov(cfg, args):
    fluid = solve_fluid(cfg.topo, cfg.limit)
    spec = _lyap_spec(cfg)
    ly = cfg.lyapunov
    certs = {}
    for n in sorted(cfg.n_list):
        scaled, pol = build_policy(cfg, n, fluid)
        try:
            if pol.kind == "bsp":
                c = verify.check_discrete_lyapunov(cfg.topo, scaled, fluid, pol, spec, samples=ly["samples"],
                                                   radius=ly["radius"], seed=cfg.run["seeds"][0])
            else:
                c = verify.check_jwc_stability_preservation(cfg.topo, scaled, fluid, pol, spec,
                                                            samples=ly["samples"], radius=ly["radius"],
                                                            seed=cfg.run["seeds"][0])
        except FitFailed as exc:
            c = exc.certificate
        certs[n] = c.to_dict()
    model = build_diffusion_model(cfg.topo, cfg.limit, fluid)
    order = extract_drift_matrices(cfg.topo, cfg.limit, fluid).elimination_order
    structural = {}
    for cone in ("two-sided", "positive"):
        try:
            structural[cone] = search_structural(model, order, delta=ly["delta"], cone=cone).to_dict()
        except FitFailed as exc:
            structural[cone] = dict(exc.certificate.to_dict(), ok=False)
    passed = all(c["passed"] for c in certs.values())
    return {"passed": passed, "certificates": certs, "structural": structural}


def _traces(cfg, fluid):
    r = cfg.run
    out = []
    for n in sorted(cfg.n_list):
        scaled, pol = build_policy(cfg, n, fluid)
        for s in sorted(r["seeds"]):
            out.append(simulate_ctmc(cfg.topo, scaled, pol, r["horizon"], s, costs=cfg.costs, fluid=fluid,
                                     replications=r["replications"], burn_in_frac=r["burn_in"],
                                     num_batches=r["num_batches"], workers=r["workers"],
                                     on_explosion="flag"))
    return out


def cmd_verify_moments(cfg, args):
    fluid = solve_fluid(cfg.topo, cfg.limit)
    traces = _traces(cfg, fluid)
    audit = verify.check_moment_bounds(traces, cfg.lyapunov["moment_kappas"], cfg.lyapunov["moment_variant"])
    rows = []
    for t in traces:
        if t.status != "ok":
            continue
        for k in cfg.lyapunov["moment_kappas"]:
            e = t.estimates[f"x_norm^{k}"]
            rows.append((t.n, e.estimate, e.ci[0], e.ci[1], f"x_norm^{k}"))
    write_rows(Path(args.out) / "verify-moments.csv", rows)
    return {"audit": audit.to_dict(),
            "traces": [{"n": t.n, "seed": t.seed, "status": t.status} for t in traces]}


def cmd_convergence(cfg, args):
    r = cfg.run
    control = build_control(cfg)
    rep = verify.convergence_experiment(
        cfg.topo, cfg.limit, control, r["n_list"], costs=cfg.costs, seeds=r["seeds"], horizon=r["horizon"],
        sde_horizon=r["sde_horizon"], step=r["step"], replications=r["replications"],
        C_tilde=cfg.policy["C_tilde"], theta=cfg.costs.theta, config_hash=cfg.config_hash,
        workers=r["workers"])
    write_rows(Path(args.out) / "convergence.csv", rep.rows())
    return rep.to_dict()


COMMANDS = {
    "fluid": cmd_fluid,
    "psi": cmd_psi,
    "simulate-ctmc": cmd_simulate_ctmc,
    "simulate-diffusion": cmd_simulate_diffusion,
    "verify-lyapunov": cmd_verify_lyapunov,
    "verify-moments": cmd_verify_moments,
    "convergence": cmd_convergence,
}


def build_parser():
    p = argparse.ArgumentParser(prog="hwnet", description="Many-server network experiments.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("config", help="INI configuration file")
        sp.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE")
        sp.add_argument("--out", default=None, help="output directory (default: run.output)")
        if name == "psi":
            sp.add_argument("--alpha", help="class totals, comma separated")
            sp.add_argument("--beta", help="pool totals, comma separated")
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.overrides)
        args.out = args.out or cfg.run["output"]
        result = COMMANDS[args.command](cfg, args)
    except (ConfigError, UsageError, *INVALID_MODEL) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (HWNetError, ValueError, FloatingPointError) as exc:
        print(f"runtime error ({type(exc).__name__}): {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    payload = {"command": args.command, "config": cfg.resolved, "config_hash": cfg.config_hash,
               "result": result}
    path = write_json(Path(args.out) / f"{args.command}.json", payload)
    log.info("wrote %s", path)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
