"""Command-line interface.

Subcommands: describe, certify, estimate, geodesic, heatflow, sweep.  Option
values come from flags, then from ``--config FILE`` (a JSON object keyed by
option name), then from built-in defaults.  ``RICCI_LOG`` sets the log level.
"""

from __future__ import annotations

import argparse
import csv
import io
import itertools
import json
import logging
import math
import os
import string
import sys
from typing import Sequence

import numpy as np

from . import models
from .bochner import bochner_inequality_residual, certify_kappa
from .curvature import DEFAULT_BUDGET, DEFAULT_STARTS, estimate_ricci
from .errors import LeftInterior, NoKernelAvailable, ParseError, RicciError
from .markov import spectral_gap
from .transport import action, entropy, geodesic_integrate, heat_flow

log = logging.getLogger("entropic_ricci")

DEFAULTS = {
    "spec": None,
    "seed": f"0-{DEFAULT_STARTS - 1}",
    "budget": DEFAULT_BUDGET,
    "threads": 1,
    "format": None,
    "out": None,
    "samples": 1000,
    "steps": 1000,
    "t_max": 1.0,
    "points": 11,
    "rho0": "uniform",
    "psi0": "zero",
}


def fmt(x) -> str:
    """Float formatting for CSV: 17 significant digits, '.' decimal point."""
    if isinstance(x, (float, np.floating)):
        return format(float(x), ".17g")
    return str(x)


def parse_seeds(text) -> list[int]:
    """``"0,3,5-8"`` -> ``[0, 3, 5, 6, 7, 8]``."""
    if isinstance(text, list):
        return [int(s) for s in text]
    out = []
    try:
        for part in str(text).split(","):
            part = part.strip()
            if not part:
                continue
            if "-" in part:
                lo, hi = part.split("-", 1)
                out.extend(range(int(lo), int(hi) + 1))
            else:
                out.append(int(part))
    except ValueError as exc:
        raise ParseError(f"bad seed list {text!r}") from exc
    if not out:
        raise ParseError("seed list is empty")
    return out


def _read_json(path: str):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path} is not valid JSON: {exc}") from exc


def _load_spec(spec_path: str | None):
    if not spec_path:
        raise ParseError("--spec is required")
    return _read_json(spec_path)


def _load_bundle(spec_path: str | None) -> models.ModelBundle:
    return models.model_from_spec(_load_spec(spec_path))


def _vector(text: str, t, kind: str) -> np.ndarray:
    """Density or potential from ``uniform``/``zero``, ``vertex:STATE``, a JSON
    list, or ``@file.json``."""
    if text.startswith("@"):
        values = _read_json(text[1:])
    elif text == "uniform":
        return np.ones(t.n)
    elif text == "zero":
        return np.zeros(t.n)
    elif text.startswith("vertex:"):
        name = text.split(":", 1)[1]
        if name not in t.index:
            raise ParseError(f"unknown state {name!r}")
        v = np.zeros(t.n)
        v[t.index[name]] = 1.0 / t.pi[t.index[name]]
        return v
    else:
        try:
            values = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ParseError(f"bad {kind} vector {text!r}") from exc
    v = np.asarray(values, dtype=float)
    if v.shape != (t.n,):
        raise ParseError(f"{kind} needs {t.n} entries, got shape {v.shape}")
    if kind == "rho":
        if np.any(v < 0) or not v.any():
            raise ParseError("density must be nonnegative and nonzero")
        v = v / (t.pi @ v)
    return v


class _Output:
    def __init__(self, path: str | None):
        self.path = path

    def write(self, text: str) -> None:
        if self.path:
            with open(self.path, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
        else:
            sys.stdout.write(text)


def _csv_text(header: Sequence[str], rows: Sequence[Sequence], footer: str | None = None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([fmt(x) for x in r])
    if footer:
        w.writerow([footer])
    return buf.getvalue()


def _flatten(d: dict, prefix: str = "") -> list[tuple[str, object]]:
    out = []
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out += _flatten(v, key + ".")
        elif isinstance(v, (list, tuple)):
            out.append((key, json.dumps(v)))
        else:
            out.append((key, v))
    return out


def _emit(opts, payload: dict, default_format: str = "json") -> None:
    kind = opts["format"] or default_format
    if kind == "json":
        _Output(opts["out"]).write(json.dumps(payload, indent=2, default=_json_default) + "\n")
    elif kind == "csv":
        _Output(opts["out"]).write(_csv_text(["key", "value"], _flatten(json.loads(json.dumps(payload, default=_json_default)))))
    else:
        raise ParseError(f"unknown format {kind!r}")


def _json_default(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    raise TypeError(f"cannot serialize {type(x).__name__}")


# ----------------------------------------------------------------------------
# commands


def cmd_describe(opts) -> int:
    b = _load_bundle(opts["spec"])
    t = b.triple
    payload = {
        "model": b.name,
        "states": t.n,
        "edges": t.n_edges // 2,
        "reversible": True,
        "irreducible": True,
        "worst_detailed_balance_residual": t.detailed_balance_residual(),
        "pi": {"min": float(t.pi.min()), "max": float(t.pi.max()), "argmin": t.states[int(np.argmin(t.pi))]},
        "spectral_gap": spectral_gap(t),
        "moves": b.rep.n_moves if b.rep is not None else None,
    }
    _emit(opts, payload)
    return 0


def _bochner_summary(b: models.ModelBundle, samples: int, seed: int) -> dict:
    t, k = b.triple, b.kernel
    rng = np.random.default_rng(seed)
    worst = math.inf
    for _ in range(samples):
        rho = np.exp(rng.normal(size=t.n))
        rho /= t.pi @ rho
        psi = rng.normal(size=t.n)
        worst = min(worst, bochner_inequality_residual(k, rho, psi))
    return {"samples": samples, "min_residual": worst, "passed": bool(worst >= -1e-10)}


def cmd_certify(opts) -> int:
    b = _load_bundle(opts["spec"])
    if b.kernel is None:
        raise NoKernelAvailable(
            f"model {b.name!r} has no R-kernel; use 'estimate' for a numerical curvature bound"
        )
    seeds = parse_seeds(opts["seed"])
    report = b.kernel.report
    payload = {
        "model": b.name,
        "params": b.params,
        "kappa_formula": b.kappa_formula.as_dict() if b.kappa_formula else None,
        "kernel": report.as_dict(),
    }
    if report.passed:
        res = certify_kappa(b.kernel, seeds=seeds, budget=int(opts["budget"]), threads=int(opts["threads"]))
        payload["criterion_estimate"] = {
            "kappa": res.kappa,
            "kappa_min_found": res.kappa_min,
            "uncertainty": res.uncertainty,
            "witness_rho": res.rho.tolist(),
            "witness_psi": res.psi.tolist(),
            "note": "numerical estimate of the best constant the kernel criterion delivers",
        }
        payload["bochner_residual"] = _bochner_summary(b, int(opts["samples"]), seeds[0])
    _emit(opts, payload)
    return 0


def cmd_estimate(opts) -> int:
    spec = _load_spec(opts["spec"])
    b = models.model_from_spec(spec)
    seeds = parse_seeds(opts["seed"])
    kf = b.kappa_formula
    rep = estimate_ricci(
        b.triple,
        seeds=seeds,
        budget=int(opts["budget"]),
        threads=int(opts["threads"]),
        kappa_certified=kf.value if kf is not None and kf.applicable else None,
        certified_provenance=kf.provenance if kf is not None and kf.applicable else None,
    )
    payload = rep.to_dict()
    payload["config"]["spec"] = spec
    payload["config"]["model"] = b.name
    _emit(opts, payload)
    return 0


def cmd_geodesic(opts) -> int:
    b = _load_bundle(opts["spec"])
    t = b.triple
    rho0 = _vector(opts["rho0"], t, "rho")
    psi0 = _vector(opts["psi0"], t, "psi")
    steps = int(opts["steps"])
    header = ["s", *t.states, "entropy", "action"]

    def rows(traj):
        return [[st.time, *st.rho, entropy(t, st.rho), action(t, st.rho, st.psi)] for st in traj]

    try:
        traj = geodesic_integrate(t, rho0, psi0, steps=steps)
    except LeftInterior as exc:
        _Output(opts["out"]).write(_csv_text(header, rows(exc.partial), footer=f"# error: {exc}"))
        log.error("%s", exc)
        return exc.exit_code
    _Output(opts["out"]).write(_csv_text(header, rows(traj)))
    return 0


def cmd_heatflow(opts) -> int:
    b = _load_bundle(opts["spec"])
    t = b.triple
    rho0 = _vector(opts["rho0"], t, "rho")
    times = np.linspace(0.0, float(opts["t_max"]), int(opts["points"]))
    rows = []
    for s in times:
        r = heat_flow(t, rho0, float(s))
        rows.append([float(s), *r, entropy(t, r)])
    _Output(opts["out"]).write(_csv_text(["t", *t.states, "entropy"], rows))
    return 0


def _param_values(items: Sequence[str]) -> list[tuple[str, list[float]]]:
    out = []
    for item in items:
        try:
            name, rng = item.split("=", 1)
            parts = rng.split(":")
            if len(parts) == 3:
                vals = np.linspace(float(parts[0]), float(parts[1]), int(parts[2])).tolist()
            else:
                vals = [float(v) for v in rng.split(",")]
        except ValueError as exc:
            raise ParseError(f"bad --param {item!r}; use NAME=start:stop:count or NAME=v1,v2") from exc
        out.append((name.strip(), vals))
    return out


def cmd_sweep(opts) -> int:
    if not opts["template"]:
        raise ParseError("--template is required")
    try:
        with open(opts["template"], encoding="utf-8") as fh:
            template = string.Template(fh.read())
    except OSError as exc:
        raise ParseError(f"cannot read {opts['template']}: {exc}") from exc
    params = _param_values(opts["param"] or [])
    names = [p[0] for p in params]
    seeds = parse_seeds(opts["seed"])
    rows = []
    for combo in itertools.product(*[p[1] for p in params]):
        values = dict(zip(names, combo))
        try:
            spec = json.loads(template.substitute({k: repr(v) for k, v in values.items()}))
        except (KeyError, ValueError) as exc:
            raise ParseError(f"template substitution failed: {exc}") from exc
        b = models.model_from_spec(spec)
        kf = b.kappa_formula
        kform = kf.value if kf is not None and kf.applicable else float("nan")
        if opts["no_estimate"]:
            knum = float("nan")
        else:
            knum = estimate_ricci(b.triple, seeds=seeds, budget=int(opts["budget"]), threads=int(opts["threads"])).kappa_numeric
        rows.append([*combo, kform, knum, spectral_gap(b.triple)])
        log.info("sweep %s -> formula %s numeric %s", values, kform, knum)
    _Output(opts["out"]).write(_csv_text([*names, "kappa_formula", "kappa_numeric", "spectral_gap"], rows))
    return 0


COMMANDS = {
    "describe": cmd_describe,
    "certify": cmd_certify,
    "estimate": cmd_estimate,
    "geodesic": cmd_geodesic,
    "heatflow": cmd_heatflow,
    "sweep": cmd_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--spec", help="model spec JSON file")
    common.add_argument("--config", help="JSON file with option defaults")
    common.add_argument("--seed", help="seed list, e.g. 0-15 or 1,4,9")
    common.add_argument("--budget", type=int, help="optimizer iterations per start")
    common.add_argument("--threads", type=int, help="worker threads for multi-start")
    common.add_argument("--out", help="output file (default stdout)")
    common.add_argument("--format", choices=["json", "csv"], help="report format")

    p = argparse.ArgumentParser(prog="entropic-ricci", description="Entropic Ricci curvature bounds for finite Markov chains.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("describe", parents=[common], help="validate a model and print basic data")
    c = sub.add_parser("certify", parents=[common], help="closed-form bound, kernel checks and criterion estimate")
    c.add_argument("--samples", type=int, help="random samples for the Bochner residual check")
    sub.add_parser("estimate", parents=[common], help="numerical estimate of the curvature bound")
    g = sub.add_parser("geodesic", parents=[common], help="integrate a geodesic and write CSV")
    g.add_argument("--rho0", help="initial density: uniform, vertex:STATE, JSON list or @file")
    g.add_argument("--psi0", help="initial potential: zero, JSON list or @file")
    g.add_argument("--steps", type=int, help="RK4 steps on [0, 1]")
    h = sub.add_parser("heatflow", parents=[common], help="heat flow trajectory as CSV")
    h.add_argument("--rho0", help="initial density: uniform, vertex:STATE, JSON list or @file")
    h.add_argument("--t-max", dest="t_max", type=float, help="final time")
    h.add_argument("--points", type=int, help="number of output times")
    s = sub.add_parser("sweep", parents=[common], help="parameter sweep over a spec template")
    s.add_argument("--template", help="spec template with $name placeholders")
    s.add_argument("--param", action="append", help="NAME=start:stop:count or NAME=v1,v2,...")
    s.add_argument("--no-estimate", dest="no_estimate", action="store_true", default=None, help="skip the numerical estimate")
    return p


def resolve_options(args: argparse.Namespace) -> dict:
    """Flags override the config file, which overrides the defaults."""
    opts = dict(DEFAULTS)
    opts.update({"template": None, "param": None, "no_estimate": False})
    if args.config:
        cfg = _read_json(args.config)
        if not isinstance(cfg, dict):
            raise ParseError("config file must hold a JSON object")
        opts.update({k.replace("-", "_"): v for k, v in cfg.items()})
    opts.update({k: v for k, v in vars(args).items() if v is not None})
    if int(opts["threads"]) < 1 or int(opts["budget"]) < 1:
        raise ParseError("threads and budget must be positive")
    return opts


def main(argv: Sequence[str] | None = None) -> int:
    level = os.environ.get("RICCI_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        opts = resolve_options(args)
        return COMMANDS[args.command](opts)
    except RicciError as exc:
        sys.stderr.write(f"error ({type(exc).__name__}): {exc}\n")
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
