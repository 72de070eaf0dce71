"""Command-line front end.

Each subcommand reads one JSON config file (``--config``), optionally
overridden field by field with ``--set path.to.field=value``, and writes CSV
curves or JSON reports.  Output is a pure function of the config: grid points
are computed in a fixed order (or in parallel and reassembled in that order)
and floats are written with ``repr``.

Exit codes: 0 success, 1 a tolerance or oracle check failed, 2 config error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .exact_dp import (
    biophysics_partition,
    build_constrained,
    build_free,
    dump_table,
    enumerate_constrained,
)
from .kernels import FreeEndKernel, KernelError, kernel_from_spec, make_biophysics_kernel
from .ldp import rate_and_free_energy
from .phase import ScanModel, classify_order, scan_transitions
from .sampler import limit_law_report, sample_constrained, sample_free
from .tilt_solver import SolverError, solve_tilt
from . import validation

WORKERS_ENV = "GPS_WORKERS"
EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2
ORACLE_RTOL = 1e-12
MATCH_RTOL = 1e-10


class ConfigError(ValueError):
    """Invalid or incomplete configuration."""


# --------------------------------------------------------------------------
# config handling
# --------------------------------------------------------------------------


def load_config(path: str | None, overrides=()) -> dict:
    cfg: dict = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"{path}: {exc.strerror}") from exc
        try:
            cfg = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
        if not isinstance(cfg, dict):
            raise ConfigError(f"{path}: top level must be an object")
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        try:
            val = json.loads(raw)
        except json.JSONDecodeError:
            val = raw
        node = cfg
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"--set {key}: {p} is not an object")
        node[parts[-1]] = val
    return cfg


def _get(cfg: dict, key: str, kind=None, default=...):
    if key not in cfg:
        if default is ...:
            raise ConfigError(f"missing field {key!r}")
        return default
    val = cfg[key]
    if kind is None:
        return val
    try:
        if kind is int and isinstance(val, float) and not val.is_integer():
            raise ValueError("not an integer")
        return kind(val)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"field {key!r}: expected {kind.__name__}, got {val!r}") from exc


def _kernel(cfg: dict):
    spec = _get(cfg, "kernel")
    if not isinstance(spec, dict):
        raise ConfigError("field 'kernel' must be an object")
    try:
        return kernel_from_spec(spec)
    except KernelError as exc:
        raise ConfigError(f"field 'kernel': {exc}") from exc


def _free_end(cfg: dict) -> FreeEndKernel:
    fe = _get(cfg, "free_end", dict, {"alpha_bar": 1.5, "shift": 1})
    try:
        return FreeEndKernel(float(fe["alpha_bar"]), float(fe.get("constant", 1.0)), int(fe.get("shift", 1)))
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"field 'free_end': {exc}") from exc


def _model(cfg: dict) -> ScanModel:
    """A fixed kernel (``kernel``) or the biophysics scan (``biophysics`` with c, E_b, E_l)."""
    if "biophysics" in cfg:
        b = _get(cfg, "biophysics", dict)
        try:
            return ScanModel.biophysics(float(b["c"]), float(b["E_b"]), float(b["E_l"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"field 'biophysics': {exc}") from exc
    return ScanModel.fixed(_kernel(cfg))


def _grid(cfg: dict, key: str = "h") -> list[float]:
    g = _get(cfg, key)
    if isinstance(g, list):
        return [float(x) for x in g]
    if not isinstance(g, dict):
        raise ConfigError(f"field {key!r}: expected a list or {{start, stop, num, log}}")
    start, stop = _get(g, "start", float), _get(g, "stop", float)
    num = _get(g, "num", int)
    if num < 1:
        raise ConfigError(f"field {key!r}.num must be positive")
    if _get(g, "log", bool, False):
        if start <= 0 or stop <= 0:
            raise ConfigError(f"field {key!r}: log grid needs positive ends")
        return [float(x) for x in np.geomspace(start, stop, num)]
    return [float(x) for x in np.linspace(start, stop, num)]


def _workers(args) -> int:
    if args.workers is not None:
        return max(1, args.workers)
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError as exc:
        raise ConfigError(f"{WORKERS_ENV} must be an integer") from exc


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return str(v)


def write_csv(out, columns: list[str], rows: list[list], kernel_hash: str) -> None:
    buf = io.StringIO()
    buf.write(f"# kernel_hash={kernel_hash} version={__version__}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    out.write(buf.getvalue())


def _model_hash(model: ScanModel, cfg: dict) -> str:
    if model.fixed_kernel is not None:
        return model.fixed_kernel.hash()
    return "biophysics:" + json.dumps(cfg.get("biophysics"), sort_keys=True)


# --------------------------------------------------------------------------
# free-energy
# --------------------------------------------------------------------------

FREE_ENERGY_COLUMNS = ["h", "g", "lambda1_bar", "gamma_c", "D", "F", "regime", "c_minus_c_hat", "status"]


def _free_energy_row(model: ScanModel, gamma: float, h: float) -> list:
    try:
        k, st = model.solve(h)
        if st.h <= 0:
            return [h, st.g, math.nan, math.nan, math.nan, 0.0, "Delocalized", math.nan, "ok"]
        r = rate_and_free_energy(k, st, gamma)
        gap = st.c - r.c_hat if r.regime is not None and r.regime.value == "Cramer" else 0.0
        return [h, st.g, st.lambda1_bar, st.gamma_c, r.D, r.free_energy, r.regime.value, gap, "ok"]
    except (SolverError, ValueError, ArithmeticError) as exc:
        msg = str(exc).replace("\n", " ")
        return [h] + [math.nan] * 5 + ["", math.nan, f"error: {msg}"]


_WORKER_MODEL: ScanModel | None = None


def _init_worker(cfg: dict) -> None:
    global _WORKER_MODEL
    _WORKER_MODEL = _model(cfg)


def _worker_row(gamma: float, h: float) -> list:
    return _free_energy_row(_WORKER_MODEL, gamma, h)


def cmd_free_energy(cfg: dict, workers: int, out) -> int:
    model = _model(cfg)
    gamma = _get(cfg, "gamma", float)
    if gamma <= 0:
        raise ConfigError("field 'gamma' must be positive")
    hs = _grid(cfg)
    if workers > 1:
        # models hold closures, so each worker rebuilds its own from the config
        with ProcessPoolExecutor(workers, initializer=_init_worker, initargs=(cfg,)) as ex:
            rows = list(ex.map(_worker_row, [gamma] * len(hs), hs))
    else:
        rows = [_free_energy_row(model, gamma, h) for h in hs]
    write_csv(out, FREE_ENERGY_COLUMNS, rows, _model_hash(model, cfg))
    return EXIT_OK if all(r[-1] == "ok" for r in rows) else EXIT_FAIL


# --------------------------------------------------------------------------
# phase-scan
# --------------------------------------------------------------------------

PHASE_COLUMNS = ["h_star", "kind", "bracket_lo", "bracket_hi", "gamma", "gamma_c_slope", "order", "jump", "jump_fd"]


def cmd_phase_scan(cfg: dict, workers: int, out) -> int:
    model = _model(cfg)
    gamma = _get(cfg, "gamma", float)
    lo, hi = _get(cfg, "h_range")
    recs = scan_transitions(model, gamma, (float(lo), float(hi)), grid=_get(cfg, "grid", int, 512),
                            tol_h=_get(cfg, "tol_h", float, 1e-8),
                            include_denaturation=_get(cfg, "include_denaturation", bool, False))
    if _get(cfg, "classify", bool, True):
        recs = [classify_order(model, r) for r in recs]
    rows = [[r.h_star, r.kind.value, r.bracket[0], r.bracket[1], r.gamma, r.gamma_c_slope,
             r.order.value if r.order is not None else "", r.jump, r.jump_fd] for r in recs]
    write_csv(out, PHASE_COLUMNS, rows, _model_hash(model, cfg))
    return EXIT_OK


# --------------------------------------------------------------------------
# exact
# --------------------------------------------------------------------------


def cmd_exact(cfg: dict, workers: int, out) -> int:
    k = _kernel(cfg)
    N, M = _get(cfg, "N", int), _get(cfg, "M", int)
    h = _get(cfg, "h", float)
    if N < 1 or M < 1:
        raise ConfigError("fields 'N' and 'M' must be >= 1")
    table = build_constrained(k, N, M, h)
    rows = [["log_Zc", table.log_z(N, M)]]
    if "free_end" in cfg:
        rows.append(["log_Zf", build_free(k, _free_end(cfg), table)])
    status = EXIT_OK
    if _get(cfg, "oracle", bool, False):
        if N + M > 24:
            raise ConfigError("oracle enumeration is limited to N + M <= 24")
        worst = 0.0
        for n in range(1, N + 1):
            for m in range(1, M + 1):
                ref = enumerate_constrained(k, n, m, h)
                worst = max(worst, abs(table.log_z(n, m) - ref) / max(1.0, abs(ref)))
        ok = worst <= ORACLE_RTOL
        rows += [["oracle_max_rel_error", worst], ["oracle_match", ok]]
        status = EXIT_OK if ok else EXIT_FAIL
    if "dump" in cfg:
        dump_table(table, _get(cfg, "dump", str))
    write_csv(out, ["quantity", "value"], rows, k.hash())
    return status


# --------------------------------------------------------------------------
# match-biophysics
# --------------------------------------------------------------------------


def cmd_match_biophysics(cfg: dict, workers: int, out) -> int:
    c, Eb, El = _get(cfg, "c", float), _get(cfg, "E_b", float), _get(cfg, "E_l", float)
    beta, cbar = _get(cfg, "beta", float), _get(cfg, "cbar", float)
    N, M = _get(cfg, "N", int), _get(cfg, "M", int)
    if N < 2 or M < 2:
        raise ConfigError("fields 'N' and 'M' must be >= 2")
    try:
        k, off = make_biophysics_kernel(c, Eb, El, beta, convention="strict")
    except KernelError as exc:
        raise ConfigError(str(exc)) from exc
    kf = FreeEndKernel(cbar, shift=1)
    table = build_constrained(k, N - 1, M - 1, off)
    rows, ok = [], True
    for n in range(2, N + 1):
        for m in range(2, M + 1):
            rec = biophysics_partition(c, Eb, El, beta, n, m, cbar, method="recursion")
            ren = biophysics_partition(c, Eb, El, beta, n, m, cbar, method="renewal")
            sub = type(table)(n - 1, m - 1, off, table.log_Zc[:n, :m], table.kernel_hash)
            zf = build_free(k, kf, sub)
            err = max(abs(rec - ren), abs(rec - zf)) / max(1.0, abs(zf))
            ok &= err <= MATCH_RTOL
            rows.append([n, m, rec, ren, zf, err, err <= MATCH_RTOL])
    write_csv(out, ["N", "M", "log_Z_recursion", "log_Z_renewal", "log_Zf_shifted", "rel_error", "match"],
              rows, k.hash())
    return EXIT_OK if ok else EXIT_FAIL


# --------------------------------------------------------------------------
# sample
# --------------------------------------------------------------------------


def cmd_sample(cfg: dict, workers: int, out, report_path: str | None = None) -> int:
    k = _kernel(cfg)
    N, M = _get(cfg, "N", int), _get(cfg, "M", int)
    h = _get(cfg, "h", float)
    count, seed = _get(cfg, "count", int), _get(cfg, "seed", int)
    mode = _get(cfg, "mode", str, "constrained")
    table = build_constrained(k, N, M, h)
    rows = []
    status = EXIT_OK
    if mode == "constrained":
        batch = sample_constrained(k, table, seed, count)
    elif mode == "free":
        kf = _free_end(cfg)
        fs = sample_free(k, kf, table, seed, count, bridges=_get(cfg, "bridges", bool, True))
        batch = fs.paths
        if report_path or _get(cfg, "report", bool, False):
            rate = None
            if h > 0:
                rate = rate_and_free_energy(k, solve_tilt(k, h), M / N)
            rep = limit_law_report(k, kf, fs, h, rate)
            tol = _get(cfg, "tv_tolerance", float, 0.05)
            d = {"kind": rep.kind, "n_samples": rep.n_samples, "tv": rep.tv, "max_abs_z": rep.max_abs_z,
                 "step_tv": rep.step_tv, "n_steps": rep.n_steps, "extra": rep.extra, "tolerance": tol,
                 "params": {"kernel": k.hash(), "N": N, "M": M, "h": h, "seed": seed}}
            d["pass"] = bool(rep.tv <= tol and (math.isnan(rep.step_tv) or rep.step_tv <= tol))
            status = EXIT_OK if d["pass"] else EXIT_FAIL
            text = json.dumps(validation.json_safe(d), sort_keys=True, allow_nan=False) + "\n"
            if report_path:
                Path(report_path).write_text(text)
            else:
                sys.stderr.write(text)
        if batch is None:
            for i, (f, l) in enumerate(zip(fs.last_contact, fs.free_ends)):
                rows.append([i, -1, int(f[0]), int(f[1])])
    else:
        raise ConfigError(f"field 'mode': unknown mode {mode!r}")
    if batch is not None:
        for i in range(len(batch)):
            for j, (n, m) in enumerate(batch[i].points):
                rows.append([i, j, int(n), int(m)])
    write_csv(out, ["path_id", "contact_index", "n", "m"], rows, k.hash())
    return status


# --------------------------------------------------------------------------
# validate
# --------------------------------------------------------------------------

DEFAULT_SUITE = [
    {"check": "terminating_sharp", "kernel": {"family": "GammaRatio", "parameters": {"alpha": 1.5}},
     "h": -0.5, "gamma": 1.5, "sizes": [50, 100, 200, 400]},
    {"check": "free_sharp", "kernel": {"family": "GammaRatio", "parameters": {"alpha": 1.5}},
     "free_end": {"alpha_bar": 0.5, "shift": 1}, "h": -0.5, "gamma": 1.5, "sizes": [50, 100, 200, 400]},
    {"check": "free_sharp", "kernel": {"family": "GammaRatio", "parameters": {"alpha": 1.5}},
     "free_end": {"alpha_bar": 2.0, "shift": 1}, "h": -0.5, "gamma": 1.5, "sizes": [50, 100, 200, 400]},
    {"check": "free_sharp", "kernel": {"family": "GammaRatio", "parameters": {"alpha": 1.5}},
     "free_end": {"alpha_bar": 0.5, "shift": 1}, "h": 1.0, "gamma": 1.5, "sizes": [200, 400]},
    {"check": "renewal_llt", "kernel": {"family": "GammaRatio", "parameters": {"alpha": 1.5}},
     "h": 1.0, "gamma": 1.5, "sizes": [200, 400]},
]


def _run_check(spec: dict) -> validation.CheckReport:
    name = _get(spec, "check", str)
    k = _kernel(spec)
    sizes = _get(spec, "sizes")
    h, gamma = _get(spec, "h", float), _get(spec, "gamma", float, 1.5)
    if name == "terminating_sharp":
        return validation.check_terminating_sharp(k, h, sizes, gamma)
    if name == "free_sharp":
        return validation.check_free_sharp(k, _free_end(spec), h, gamma, sizes)
    if name == "renewal_llt":
        return validation.check_renewal_llt(k, solve_tilt(k, h), gamma, sizes)
    if name == "convolution_bound":
        return validation.check_convolution_bound(k, sizes)
    raise ConfigError(f"unknown check {name!r}")


def cmd_validate(cfg: dict, workers: int, out) -> int:
    checks = _get(cfg, "checks", list, DEFAULT_SUITE)
    if workers > 1 and len(checks) > 1:
        with ProcessPoolExecutor(workers) as ex:
            reports = list(ex.map(_run_check, checks))
    else:
        reports = [_run_check(c) for c in checks]
    merged = validation.merge_reports(*reports)
    out.write(merged.to_json() + "\n")
    return EXIT_OK if merged.passed else EXIT_FAIL


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------

COMMANDS = {
    "free-energy": cmd_free_energy,
    "phase-scan": cmd_phase_scan,
    "exact": cmd_exact,
    "sample": cmd_sample,
    "validate": cmd_validate,
    "match-biophysics": cmd_match_biophysics,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gps", description="Two-dimensional renewal pinning model toolkit.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", "-c", help="JSON config file")
        s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config field (dotted path, JSON value)")
        s.add_argument("--out", "-o", help="output file (default stdout)")
        s.add_argument("--workers", type=int, default=None,
                       help=f"worker processes (default ${WORKERS_ENV} or 1)")
        if name == "sample":
            s.add_argument("--report", help="write the limit-law JSON report here")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config, args.set)
        workers = _workers(args)
        buf = io.StringIO()
        fn = COMMANDS[args.command]
        if args.command == "sample":
            code = fn(cfg, workers, buf, args.report)
        else:
            code = fn(cfg, workers, buf)
    except (ConfigError, KernelError) as exc:
        sys.stderr.write(f"config error: {exc}\n")
        return EXIT_CONFIG
    if args.out:
        Path(args.out).write_text(buf.getvalue())
    else:
        sys.stdout.write(buf.getvalue())
    return code


if __name__ == "__main__":
    sys.exit(main())
