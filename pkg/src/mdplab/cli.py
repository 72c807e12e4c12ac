"""Command-line runner: ``mdplab {run,validate,oracle,report}``.

Exit codes: 0 all checks pass, 1 a check flag failed, 2 schema or usage
error, 3 numerical admissibility failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np
from scipy.linalg import solve_discrete_lyapunov

from . import __version__, _rng
from .checks import REGISTRY, RunContext, ordered
from .config import (
    ConfigError,
    build_experiment,
    build_model,
    build_observable,
    config_echo,
    load_config,
)
from .errors import AdmissibilityError, ContractViolation, DivergentMomentError
from .reporting import dumps, results_to_csv, results_to_json

EXIT_OK, EXIT_SOFT, EXIT_SCHEMA, EXIT_ADMISSIBILITY, EXIT_IO = 0, 1, 2, 3, 4

class _Exit(Exception):
    def __init__(self, code: int, message: str):
        self.code = code
        super().__init__(message)


def _load(path):
    try:
        return load_config(path)
    except ConfigError as exc:
        raise _Exit(EXIT_SCHEMA, "config schema violation:\n  " + "\n  ".join(exc.diagnostics)) from exc
    except OSError as exc:
        raise _Exit(EXIT_IO, f"cannot read config: {exc}") from exc


def _build(cfg):
    try:
        model = build_model(cfg)
    except AdmissibilityError as exc:
        raise _Exit(EXIT_ADMISSIBILITY, f"admissibility failure: {exc}") from exc
    except DivergentMomentError as exc:
        raise _Exit(EXIT_ADMISSIBILITY, f"admissibility failure [moment gate]: {exc}") from exc
    except ContractViolation as exc:
        raise _Exit(EXIT_SCHEMA, f"invalid model: {exc}") from exc
    return model, build_observable(cfg, model.d)


def _replications(cfg) -> dict:
    out = {"experiment.M": cfg.experiment.M}
    for i, c in enumerate(cfg.checks):
        counts = {k: v for k, v in c.model_dump().items() if k in ("M", "M_inner", "n_B", "M_U", "M_cond", "trials", "n", "N")}
        out[f"{i}:{c.id}"] = counts
    return out


def _write(path: Path, text: str):
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    except OSError as exc:
        raise _Exit(EXIT_IO, f"cannot write {path}: {exc}") from exc


def _emit(out_dir: Path, fmt: str, reports: list[dict], meta: dict) -> dict:
    files = {}
    if fmt in ("json", "both"):
        files["json"] = str(out_dir / "report.json")
        _write(out_dir / "report.json", results_to_json(reports, meta))
    if fmt in ("csv", "both"):
        files["csv"] = str(out_dir / "report.csv")
        _write(out_dir / "report.csv", results_to_csv(reports))
    return files


def cmd_run(args) -> int:
    cfg = _load(args.config)
    seed = cfg.seed if args.seed is None else args.seed
    model, observable = _build(cfg)
    try:
        experiment = build_experiment(cfg, seed)
    except ContractViolation as exc:
        raise _Exit(EXIT_SCHEMA, f"invalid experiment: {exc}") from exc
    out_dir = Path(args.out_dir)
    manifest = {
        "config_path": str(args.config),
        "seed": seed,
        "version": __version__,
        "workers": _rng.worker_count(),
        "dry_run": bool(args.dry_run),
        "checks": [c.id for c in ordered(cfg.checks)],
        "replications": _replications(cfg),
        "outputs": {},
    }
    if args.dry_run:
        _write(out_dir / "manifest.json", dumps(manifest))
        print(f"dry run: {len(cfg.checks)} check(s) validated; manifest written to {out_dir / 'manifest.json'}")
        return EXIT_OK

    ctx = RunContext(model, observable, experiment, seed)
    echo = config_echo(cfg)
    echo["seed"] = seed
    reports, failed, timings = [], [], {}
    t_start = time.perf_counter()
    for params in ordered(cfg.checks):
        t0 = time.perf_counter()
        try:
            rep = REGISTRY[params.id](ctx, params)
        except AdmissibilityError as exc:
            raise _Exit(EXIT_ADMISSIBILITY, f"{params.id}: admissibility failure: {exc}") from exc
        except DivergentMomentError as exc:
            raise _Exit(EXIT_ADMISSIBILITY, f"{params.id}: admissibility failure [moment gate]: {exc}") from exc
        except ContractViolation as exc:
            raise _Exit(EXIT_SCHEMA, f"{params.id}: {exc}") from exc
        timings[params.id] = time.perf_counter() - t0
        reports.append(rep.to_dict({"check": params.model_dump(mode="json")}))
        status = "PASS" if rep.passed else "FAIL"
        print(f"{status} {rep.check_id}" + ("" if rep.passed else f" ({', '.join(k for k, v in rep.flags.items() if not v)})"))
        if not rep.passed:
            failed.append(rep.check_id)
    meta = {"version": __version__, "seed": seed, "config": echo}
    manifest["outputs"] = _emit(out_dir, args.format, reports, meta)
    manifest["outputs"]["manifest"] = str(out_dir / "manifest.json")
    manifest["wall_clock_s"] = {"total": time.perf_counter() - t_start, **timings}
    _write(out_dir / "manifest.json", dumps(manifest))
    return EXIT_SOFT if failed else EXIT_OK


def cmd_validate(args) -> int:
    cfg = _load(args.config)
    print(f"ok: schema_version {cfg.schema_version}, {len(cfg.checks)} check(s)")
    return EXIT_OK


def linear_gaussian_oracle(A, noise_cov, C, loc) -> dict:
    """Closed-form references for X_n = A X_{n-1} + xi_n with H(x) = C x (centred)."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    S = np.atleast_2d(np.asarray(noise_cov, dtype=float))
    C = np.atleast_2d(np.asarray(C, dtype=float))
    inv = np.linalg.inv(np.eye(A.shape[0]) - A)
    G = C @ inv
    x_bar = inv @ np.full(A.shape[0], float(loc))
    B = G @ S @ G.T
    return {
        "A": A,
        "G": G,
        "stationary_mean": x_bar,
        "stationary_cov": solve_discrete_lyapunov(A, S),
        "U(x)": "G (x - stationary_mean)",
        "PU(x)": "G A (x - stationary_mean)",
        "B": B,
        "B_pinv": np.linalg.pinv(B),
        "U_at": {f"{x:g}": G @ (np.full(A.shape[0], x) - x_bar) for x in (-2.0, 0.5, 3.0)},
    }


def cmd_oracle(args) -> int:
    if args.config:
        cfg = _load(args.config)
        if cfg.model.variant != "linear_ar":
            raise _Exit(EXIT_SCHEMA, "oracle values exist only for linear_ar models")
        model, observable = _build(cfg)
        ref = linear_gaussian_oracle(model.variant.A, model.noise.covariance(), observable.linear, model.noise.loc)
    else:
        ref = linear_gaussian_oracle([[0.5]], [[1.0]], [[1.0]], 0.0)
    sys.stdout.write(dumps(ref))
    return EXIT_OK


def cmd_report(args) -> int:
    src = Path(args.results) if args.results else Path(args.out_dir) / "report.json"
    try:
        data = json.loads(src.read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise _Exit(EXIT_IO, f"cannot read stored results {src}: {exc}") from exc
    _emit(Path(args.out_dir), args.format, data.get("checks", []), data.get("meta", {}))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mdplab", description="Moderate-deviation verification runs for ergodic Markov chains.")
    sub = ap.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="execute the checks in a config")
    run.add_argument("--config", required=True)
    run.add_argument("--seed", type=int, default=None, help="override the config seed")
    run.add_argument("--out-dir", default="mdplab-out")
    run.add_argument("--dry-run", action="store_true", help="validate and write the manifest only")
    run.add_argument("--format", choices=("json", "csv", "both"), default="both")
    run.set_defaults(func=cmd_run)

    val = sub.add_parser("validate", help="schema check only")
    val.add_argument("--config", required=True)
    val.set_defaults(func=cmd_validate)

    orc = sub.add_parser("oracle", help="print closed-form references for a linear chain")
    orc.add_argument("--config", default=None)
    orc.set_defaults(func=cmd_oracle)

    rep = sub.add_parser("report", help="re-emit stored results")
    rep.add_argument("results", nargs="?", default=None, help="stored report.json (default: <out-dir>/report.json)")
    rep.add_argument("--out-dir", default="mdplab-out")
    rep.add_argument("--format", choices=("json", "csv", "both"), default="both")
    rep.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except _Exit as exc:
        print(str(exc), file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
