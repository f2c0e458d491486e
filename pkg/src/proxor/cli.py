"""Command-line front end.

    proxor estimate data.csv [--estimators pipw,por,pdr] [--out result.json]
    proxor simulate --scenario III --n 200000 --reps 500 --seed 7
    proxor kernel data.csv --folds 5 --lambda-q 1e-3

Options may also come from a JSON file given with ``--config``; explicit
flags win.  Every output document carries the fully resolved configuration
and the package version, and passing a previous output document back via
``--config`` reproduces it.  Unseeded runs use DEFAULT_SEED.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import re
import sys
from typing import Dict, List, Optional

import numpy as np

from . import __version__
from .bridge import solve_h, solve_q
from .data import MomentWeights, SelectedSample, SolverOptions, validate
from .errors import InvalidSpec, ParseError, ProxorError
from .estimators import joint_fit
from .families import InverseLogisticTreatment, LogLinearOutcome, SaturatedBinary
from .kernel import KernelConfig, crossfit_fit
from .simulation import DgpSpec, run_monte_carlo

log = logging.getLogger("proxor")

DEFAULT_SEED = 20240601
LOG_ENV = "PROXOR_LOG_LEVEL"

DEFAULTS = {
    "estimators": "pipw,por,pdr",
    "q_model": "auto",
    "h_model": "auto",
    "drop_x_from_q": False,
    "drop_x_from_h": False,
    "tolerance": 1e-8,
    "max_iter": 200,
    "scenario": "II",
    "n": None,
    "reps": 500,
    "seed": DEFAULT_SEED,
    "beta0": math.log(0.2),
    "folds": 5,
    "lambda_q": None,
    "lambda_h": None,
    "lambda_qstar": None,
    "lambda_hstar": None,
    "bandwidth_q": None,
    "bandwidth_h": None,
    "gamma_reading": "adjoint",
    "out": None,
}

COMMAND_KEYS = {
    "estimate": ("input", "estimators", "q_model", "h_model", "drop_x_from_q", "drop_x_from_h",
                 "tolerance", "max_iter", "out"),
    "simulate": ("scenario", "n", "reps", "seed", "beta0", "estimators", "drop_x_from_q",
                 "drop_x_from_h", "tolerance", "max_iter", "folds", "lambda_q", "lambda_h",
                 "lambda_qstar", "lambda_hstar", "bandwidth_q", "bandwidth_h", "gamma_reading",
                 "out"),
    "kernel": ("input", "seed", "folds", "lambda_q", "lambda_h", "lambda_qstar", "lambda_hstar",
               "bandwidth_q", "bandwidth_h", "gamma_reading", "out"),
}


# ---------------------------------------------------------------------------
# CSV


def _column_key(name):
    m = re.fullmatch(r"([zwx])(\d+)", name)
    return (m.group(1), int(m.group(2))) if m else None


def read_csv(path) -> SelectedSample:
    """Read a sample with header a, y, z1..zp, w1..wr, optional x1..xd.

    Values are parsed with ``float`` so text written by ``write_csv``
    round-trips bit for bit.  Rows are numbered from 1 after the header.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError("empty file: header required", None, None) from None
        for col in ("a", "y"):
            if col not in header:
                raise ParseError(f"missing required column {col!r}", 0, col)
        blocks: Dict[str, list] = {"z": [], "w": [], "x": []}
        for j, name in enumerate(header):
            key = _column_key(name)
            if key:
                blocks[key[0]].append((key[1], j))
            elif name not in ("a", "y"):
                raise ParseError(f"unrecognized column {name!r}", 0, name)
        if not blocks["z"] or not blocks["w"]:
            raise ParseError("need at least one z and one w column", 0, None)
        for b in blocks.values():
            b.sort()
        rows = []
        for i, row in enumerate(reader, start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ParseError(f"row {i} has {len(row)} fields, expected {len(header)}", i, None)
            vals = []
            for j, cell in enumerate(row):
                try:
                    v = float(cell)
                except ValueError:
                    raise ParseError(f"row {i}, column {header[j]}: cannot parse {cell!r}",
                                     i, header[j]) from None
                if not math.isfinite(v):
                    raise ParseError(f"row {i}, column {header[j]}: non-finite value", i, header[j])
                vals.append(v)
            rows.append(vals)
    if not rows:
        raise ParseError("no data rows", None, None)
    data = np.array(rows)
    idx = {n: j for j, n in enumerate(header)}

    def cols(k):
        return data[:, [j for _, j in blocks[k]]] if blocks[k] else None

    return SelectedSample(data[:, idx["a"]], data[:, idx["y"]], cols("z"), cols("w"), cols("x"))


def write_csv(sample: SelectedSample, path) -> None:
    """Write a sample so that ``read_csv`` restores it exactly."""
    header = (["a", "y"] + [f"z{j + 1}" for j in range(sample.p)]
              + [f"w{j + 1}" for j in range(sample.r)] + [f"x{j + 1}" for j in range(sample.d)])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh)
        wr.writerow(header)
        for i in range(sample.n):
            wr.writerow([str(int(sample.a[i])), str(int(sample.y[i]))]
                        + [repr(float(v)) for v in sample.z[i]]
                        + [repr(float(v)) for v in sample.w[i]]
                        + [repr(float(v)) for v in sample.x[i]])


# ---------------------------------------------------------------------------
# model selection


def _is_binary_col(v):
    return v.shape[1] == 1 and np.isin(v, (0.0, 1.0)).all()


def _categorical_x(x):
    return x.shape[1] == 0 or (np.all(x == np.round(x)) and np.unique(x, axis=0).shape[0] <= 20)


def build_specs(sample: SelectedSample, q_model="auto", h_model="auto", drop_x_from_q=False,
                drop_x_from_h=False):
    """Bridge families from CLI model names."""
    sat_ok = _categorical_x(sample.x)

    def pick(model, proxy, role, drop):
        if model == "auto":
            model = "saturated" if (_is_binary_col(proxy) and sat_ok and not drop) else (
                "logistic" if role == "q" else "loglinear")
        if model == "saturated":
            return SaturatedBinary.for_sample(sample)
        if role == "q" and model == "logistic":
            return InverseLogisticTreatment.for_sample(sample, use_x=not drop)
        if role == "h" and model == "loglinear":
            return LogLinearOutcome.for_sample(sample, use_x=not drop)
        raise InvalidSpec(f"unknown {role}-model {model!r}")

    return (pick(q_model, sample.z, "q", drop_x_from_q),
            pick(h_model, sample.w, "h", drop_x_from_h))


# ---------------------------------------------------------------------------
# commands


def _estimators(text):
    names = [t.strip().lower() for t in str(text).split(",") if t.strip()]
    for t in names:
        if t not in ("pipw", "por", "pdr", "kernel"):
            raise InvalidSpec(f"unknown estimator {t!r}")
    return names


def _options(cfg):
    return SolverOptions(tolerance=float(cfg["tolerance"]), max_iter=int(cfg["max_iter"]))


def _kernel_config(cfg):
    return KernelConfig(
        folds=int(cfg["folds"]), lambda_q=cfg["lambda_q"], lambda_h=cfg["lambda_h"],
        lambda_qstar=cfg["lambda_qstar"], lambda_hstar=cfg["lambda_hstar"],
        bandwidth_q=cfg["bandwidth_q"], bandwidth_h=cfg["bandwidth_h"],
        seed=int(cfg["seed"]), gamma_reading=cfg["gamma_reading"])


def _error_doc(exc):
    doc = {"error": type(exc).__name__, "message": str(exc)}
    for k in ("row", "column"):
        if getattr(exc, k, None) is not None:
            doc[k] = getattr(exc, k)
    return doc


def cmd_estimate(cfg) -> (dict, bool):
    sample = validate(read_csv(cfg["input"]))
    methods = [m for m in _estimators(cfg["estimators"]) if m != "kernel"]
    q_spec, h_spec = build_specs(sample, cfg["q_model"], cfg["h_model"], cfg["drop_x_from_q"],
                                 cfg["drop_x_from_h"])
    weights = MomentWeights.default(q_spec, h_spec)
    options = _options(cfg)
    fits, errors = {}, {}
    for role, spec, solver in (("q", q_spec, solve_q), ("h", h_spec, solve_h)):
        try:
            fits[role] = solver(sample, spec, weights, options)
        except ProxorError as exc:
            errors[role] = exc
    results, ok = {}, True
    for m in methods:
        need = {"pipw": ("q",), "por": ("h",), "pdr": ("q", "h")}[m]
        bad = [errors[r] for r in need if r in errors]
        if bad:
            results[m.upper()] = _error_doc(bad[0])
            ok = False
            continue
        try:
            fit = joint_fit(sample, m.upper(), q_spec, h_spec, weights, options,
                            q_fit=fits.get("q") if "q" in need else None,
                            h_fit=fits.get("h") if "h" in need else None)
        except ProxorError as exc:
            results[m.upper()] = _error_doc(exc)
            ok = False
            continue
        r = fit.result
        ok = ok and r.converged
        results[m.upper()] = {
            "beta_hat": r.beta_hat, "std_err": r.std_err, "ci": [r.ci_low, r.ci_high],
            "odds_ratio": r.odds_ratio, "converged": r.converged, "iterations": r.iterations,
            "moment_residual_norm": r.moment_residual_norm,
            "theta1": r.theta1, "theta0": r.theta0,
            "bridges": {k: fits[k].to_dict() for k in need},
        }
    return {"n": sample.n, "results": results}, ok


def cmd_simulate(cfg) -> (dict, bool):
    spec = DgpSpec.scenario_spec(str(cfg["scenario"]), N=cfg["n"], beta0=float(cfg["beta0"]))
    if cfg["drop_x_from_q"] or cfg["drop_x_from_h"]:
        from dataclasses import replace
        spec = replace(spec, drop_x_from_q=spec.drop_x_from_q or cfg["drop_x_from_q"],
                       drop_x_from_h=spec.drop_x_from_h or cfg["drop_x_from_h"])
    names = [("Kernel" if m == "kernel" else m.upper()) for m in _estimators(cfg["estimators"])]
    report = run_monte_carlo(spec, names, int(cfg["reps"]), int(cfg["seed"]), _options(cfg),
                             _kernel_config(cfg) if "Kernel" in names else None)
    doc = report.to_dict()
    flags = {}
    for row in report.rows:
        if row.bias is not None and row.mc_se is not None:
            flags[row.estimator] = bool(abs(row.bias) > 2 * row.mc_se)
    doc["biased_flag"] = flags
    doc["table"] = report.format_table()
    ok = all(r.n_converged > 0 for r in report.rows)
    return doc, ok


def cmd_kernel(cfg) -> (dict, bool):
    sample = validate(read_csv(cfg["input"]))
    fit = crossfit_fit(sample, _kernel_config(cfg))
    return {"n": sample.n, **fit.to_dict()}, fit.result.converged


COMMANDS = {"estimate": cmd_estimate, "simulate": cmd_simulate, "kernel": cmd_kernel}


# ---------------------------------------------------------------------------
# argument handling


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="proxor", description=__doc__.split("\n\n")[0])
    p.add_argument("--version", action="version", version=f"proxor {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON file with option values (flags override)")
        sp.add_argument("--out", default=None, help="write the JSON document here")

    def solver(sp):
        sp.add_argument("--tolerance", type=float, default=None)
        sp.add_argument("--max-iter", dest="max_iter", type=int, default=None)

    def drops(sp):
        sp.add_argument("--drop-x-from-q", dest="drop_x_from_q", action="store_true", default=None)
        sp.add_argument("--drop-x-from-h", dest="drop_x_from_h", action="store_true", default=None)

    def kernel(sp):
        sp.add_argument("--folds", type=int, default=None)
        for name in ("q", "h", "qstar", "hstar"):
            sp.add_argument(f"--lambda-{name}", dest=f"lambda_{name}", type=float, default=None)
        sp.add_argument("--bandwidth-q", dest="bandwidth_q", type=float, default=None)
        sp.add_argument("--bandwidth-h", dest="bandwidth_h", type=float, default=None)
        sp.add_argument("--gamma-reading", dest="gamma_reading", choices=("adjoint", "literal"),
                        default=None)

    est = sub.add_parser("estimate", help="PIPW / POR / PDR on a CSV sample")
    est.add_argument("input", nargs="?", default=None)
    est.add_argument("--estimators", default=None)
    est.add_argument("--q-model", dest="q_model", choices=("auto", "saturated", "logistic"),
                     default=None)
    est.add_argument("--h-model", dest="h_model", choices=("auto", "saturated", "loglinear"),
                     default=None)
    drops(est)
    solver(est)
    common(est)

    sim = sub.add_parser("simulate", help="Monte Carlo study of a built-in scenario")
    sim.add_argument("--scenario", choices=("I", "II", "III", "IV", "V"), default=None)
    sim.add_argument("--n", type=int, default=None, help="target-population size N")
    sim.add_argument("--reps", type=int, default=None)
    sim.add_argument("--seed", type=int, default=None)
    sim.add_argument("--beta0", type=float, default=None)
    sim.add_argument("--estimators", default=None)
    drops(sim)
    solver(sim)
    kernel(sim)
    common(sim)

    ker = sub.add_parser("kernel", help="cross-fitted kernel minimax estimate on a CSV sample")
    ker.add_argument("input", nargs="?", default=None)
    ker.add_argument("--seed", type=int, default=None)
    kernel(ker)
    common(ker)
    return p


def resolve_config(args) -> dict:
    """defaults < config file < explicit flags, restricted to the command's keys."""
    keys = COMMAND_KEYS[args.command]
    cfg = {k: DEFAULTS.get(k) for k in keys}
    if getattr(args, "config", None):
        try:
            with open(args.config, encoding="utf-8") as fh:
                loaded = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise InvalidSpec(f"cannot read config {args.config}: {exc}") from exc
        loaded = loaded.get("config", loaded)
        unknown = set(loaded) - set(keys)
        if unknown:
            raise InvalidSpec(f"unknown config keys for {args.command}: {sorted(unknown)}")
        cfg.update(loaded)
    for k in keys:
        v = getattr(args, k, None)
        if v is not None:
            cfg[k] = v
    if "input" in keys and not cfg.get("input"):
        raise InvalidSpec("an input CSV is required")
    return cfg


def _configure_logging():
    level = os.environ.get(LOG_ENV, "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv: Optional[List[str]] = None) -> int:
    _configure_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
        body, ok = COMMANDS[args.command](cfg)
    except (ProxorError, OSError) as exc:
        doc = {"tool": "proxor", "version": __version__, "command": args.command,
               **_error_doc(exc)}
        print(json.dumps(doc, indent=2, sort_keys=True), file=sys.stderr)
        return 2
    doc = {"tool": "proxor", "version": __version__, "command": args.command, "config": cfg,
           **body}
    text = json.dumps(doc, indent=2, sort_keys=True, default=_json_default)
    if cfg.get("out"):
        with open(cfg["out"], "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
        if "table" in body:
            print(body["table"])
    else:
        print(text)
    return 0 if ok else 1


def _json_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not serializable: {type(obj).__name__}")


if __name__ == "__main__":
    sys.exit(main())
