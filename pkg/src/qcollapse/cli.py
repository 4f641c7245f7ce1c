"""Command-line entry point.

Every subcommand writes its data files plus ``run-manifest.json`` into the
output directory.  The manifest records the full argument list, seeds,
library versions, wall time and a SHA-256 of every file written, so
``qcollapse --replay run-manifest.json`` reproduces and checks the run.

Exit codes: 0 success, 1 invalid input, 2 a ``verify`` tolerance failed or a
replay did not reproduce.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import os
import platform
import sys
import time
from importlib import metadata, resources
from pathlib import Path

import numpy as np

from .core import (ModelError, SchemaError, load_model_document, matrix_to_json,
                   parse_vector, read_json, trace_distance)
from .parallel import WORKERS_ENV, resolve_workers

log = logging.getLogger("qcollapse")

OUTDIR_ENV = "QCOLLAPSE_OUTDIR"
MANIFEST = "run-manifest.json"
EXIT_OK, EXIT_INPUT, EXIT_TOLERANCE = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """Usage errors exit with status 1, keeping 2 for numerical failures."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def fixture_path(name: str) -> Path:
    return Path(str(resources.files("qcollapse") / "fixtures" / name))


DEFAULT_MODEL = "d2_model.json"
DEFAULT_RATE_MODEL = "d2_rate.json"
DEFAULT_TESTFUNCTION = "d2_testfunction.json"


# -- input helpers ----------------------------------------------------------------

def _model(path):
    path = Path(path) if path else fixture_path(DEFAULT_MODEL)
    return load_model_document(path)


def _rate_model(path):
    model, eta0 = load_model_document(Path(path) if path else fixture_path(DEFAULT_RATE_MODEL))
    if model.R is None:
        raise ModelError(f"{path}: this command needs a model given by its rate operator R")
    return model, eta0


def _initial_state(arg, doc_eta0, dim: int) -> np.ndarray:
    if arg:
        try:
            raw = json.loads(arg)
        except json.JSONDecodeError as exc:
            raise SchemaError("--eta", f"invalid JSON ({exc.msg})") from exc
        eta = parse_vector(raw, "--eta", dim)
        norm = np.linalg.norm(eta)
        if norm == 0:
            raise SchemaError("--eta", "initial state is zero")
        return eta / norm
    if doc_eta0 is not None:
        return doc_eta0
    return np.ones(dim, dtype=complex) / math.sqrt(dim)


def _grid(t_max: float, step: float) -> np.ndarray:
    if step <= 0 or t_max <= 0:
        raise SchemaError("--grid-step", "grid step and horizon must be positive")
    n = max(1, round(t_max / step))
    return np.linspace(0.0, t_max, n + 1)


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise SchemaError("--lambdas", f"expected comma-separated numbers, got {text!r}") from exc


def _testfunction(path, lam: float):
    from .genfun import TestFunction
    path = Path(path) if path else fixture_path(DEFAULT_TESTFUNCTION)
    doc = read_json(path, "test-function file")
    if not isinstance(doc, dict) or "grid" not in doc or "values" not in doc:
        raise SchemaError("$", f"{path}: expected an object with 'grid' and 'values'")
    grid = doc["grid"]
    if not isinstance(grid, list) or not all(isinstance(x, (int, float)) for x in grid):
        raise SchemaError("$.grid", f"{path}: expected a list of numbers")
    values = parse_vector(doc["values"], "$.values", len(grid) - 1)
    if "lambda" in doc and not math.isclose(float(doc["lambda"]), lam, rel_tol=1e-12):
        raise SchemaError("$.lambda", f"{path}: test function built for lambda={doc['lambda']}, "
                          f"model has {lam}")
    try:
        return TestFunction(grid, values, lam)
    except ValueError as exc:
        raise SchemaError("$.values", f"{path}: {exc}") from exc


# -- output helpers ---------------------------------------------------------------

class Outputs:
    def __init__(self, outdir: Path):
        self.dir = outdir
        self.dir.mkdir(parents=True, exist_ok=True)
        self.files: dict[str, str] = {}

    def _record(self, path: Path):
        self.files[path.name] = hashlib.sha256(path.read_bytes()).hexdigest()
        log.info("wrote %s", path)

    def csv(self, name: str, header: list[str], rows):
        path = self.dir / name
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\r\n")
            w.writerow(header)
            for row in rows:
                w.writerow([_fmt(x) for x in row])
        self._record(path)

    def json(self, name: str, doc):
        path = self.dir / name
        path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=_json_default) + "\n")
        self._record(path)


def _fmt(x):
    if isinstance(x, (bool, np.bool_)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return x


def _json_default(x):
    if isinstance(x, np.ndarray):
        return x.tolist() if not np.iscomplexobj(x) else matrix_to_json(x)
    if isinstance(x, (np.floating, np.integer, np.bool_)):
        return x.item()
    if isinstance(x, complex):
        return [x.real, x.imag]
    raise TypeError(f"cannot serialize {type(x).__name__}")


def _complex_cols(prefix: str, d: int) -> list[str]:
    return [f"{prefix}{i}_{part}" for i in range(d) for part in ("re", "im")]


def _split(z) -> list[float]:
    z = np.asarray(z, dtype=complex).reshape(-1)
    return [v for c in z for v in (c.real, c.imag)]


def _matrix_cols(prefix: str, d: int) -> list[str]:
    return [f"{prefix}{i}{j}_{part}" for i in range(d) for j in range(d) for part in ("re", "im")]


# -- subcommands ------------------------------------------------------------------

def cmd_trajectories(args, out: Outputs) -> int:
    from .trajectory import ensemble_average, evolve_state, sample_jumps
    model, doc_eta = _model(args.model)
    eta0 = _initial_state(args.eta, doc_eta, model.dim)
    grid = _grid(args.t_max, args.grid_step)
    ens = ensemble_average(model, eta0, args.n, grid, args.seed, workers=args.workers)
    d = model.dim
    out.csv("ensemble.csv", ["t", "q_mean", "q_stderr"] + _matrix_cols("rho", d),
            ([t, q, s] + _split(r) for t, q, s, r in
             zip(grid, ens.q_bar, ens.q_stderr, ens.rho_bar.rho)))
    path = evolve_state(model, sample_jumps(model.lam, grid[-1], args.seed), eta0, grid)
    out.csv("trajectory.csv", ["t", "jumps_before", "q"] + _complex_cols("chi", d),
            ([t, int(k), q] + _split(c) for t, k, q, c in
             zip(grid, path.jumps.count_before(grid), path.q, path.chi)))
    out.json("jumps.json", {"seed": args.seed, "lambda": model.lam, "t_max": float(grid[-1]),
                            "times": path.jumps.times})
    return EXIT_OK


def cmd_master(args, out: Outputs) -> int:
    from .master import integrate_master
    model, doc_eta = _model(args.model)
    eta0 = _initial_state(args.eta, doc_eta, model.dim)
    grid = _grid(args.t_max, args.grid_step)
    path = integrate_master(model, np.outer(eta0, eta0.conj()), grid)
    out.csv("master.csv", ["t", "trace", "purity", "min_eigenvalue"] + _matrix_cols("rho", model.dim),
            ([t, tr, p, np.linalg.eigvalsh(r).min()] + _split(r)
             for t, tr, p, r in zip(grid, path.trace, path.purity, path.rho)))
    return EXIT_OK


def cmd_dyson(args, out: Outputs) -> int:
    from .master import dyson_series, integrate_master
    model, doc_eta = _model(args.model)
    eta0 = _initial_state(args.eta, doc_eta, model.dim)
    sigma = np.outer(eta0, eta0.conj())
    rho, info = dyson_series(model, sigma, args.t, tol=args.tol, full_output=True)
    rk = integrate_master(model, sigma, [0.0, args.t]).rho[-1]
    out.json("dyson.json", {"t": args.t, "tol": args.tol, "rho": rho, "info": info,
                            "master_rk4": rk, "max_abs_difference": float(np.max(np.abs(rho - rk))),
                            "trace_distance": trace_distance(rho, rk)})
    return EXIT_OK


def cmd_genfun(args, out: Outputs) -> int:
    from .genfun import genfun_mc, genfun_ode
    model, doc_eta = _model(args.model)
    eta0 = _initial_state(args.eta, doc_eta, model.dim)
    f = _testfunction(args.testfunction, model.lam)
    grid = _grid(args.t_max if args.t_max else float(f.grid[-1]), args.grid_step)
    d = model.dim
    header = ["t"]
    cols = []
    if args.mode in ("ode", "both"):
        ode = genfun_ode(model, f, eta0, grid)
        header += _complex_cols("ode", d)
        cols.append([_split(x) for x in ode])
    if args.mode in ("mc", "both"):
        ests = [None] + [genfun_mc(model, f, eta0, args.n, t, args.seed, args.workers)
                         for t in grid[1:]]
        mean = [eta0] + [e.mean for e in ests[1:]]
        se = [0.0] + [e.stderr for e in ests[1:]]
        header += _complex_cols("mc", d) + ["mc_stderr"]
        cols.append([_split(m) + [s] for m, s in zip(mean, se)])
    if args.mode == "both":
        z = [0.0] + [float(np.linalg.norm(e.mean - o) / e.stderr) if e.stderr > 0 else 0.0
                     for e, o in zip(ests[1:], ode[1:])]
        header.append("z")
        cols.append([[v] for v in z])
    out.csv("genfun.csv", header,
            ([t] + sum((c[k] for c in cols), []) for k, t in enumerate(grid)))
    return EXIT_OK


def cmd_dilation(args, out: Outputs) -> int:
    from .dilation import (build_dilation, compress, dilated_evolve, intertwining_residual,
                           survival_ensemble)
    from .master import integrate_master
    from .trajectory import propagator_at, sample_jumps
    model, doc_eta = _model(args.model)
    eta0 = _initial_state(args.eta, doc_eta, model.dim)
    Sd = build_dilation(model.C, args.flavor)
    residuals = []
    for i in range(args.n_traj):
        j = sample_jumps(model.lam, args.t, args.seed + i)
        if j.count_before(args.t) > args.max_jumps:
            residuals.append({"seed": args.seed + i, "jumps": int(j.n), "residual": None})
            continue
        st = dilated_evolve(Sd, model.H, j, eta0, args.t)
        res = np.max(np.abs(compress(Sd, st) - propagator_at(model, j, args.t) @ eta0))
        residuals.append({"seed": args.seed + i, "jumps": int(j.n), "residual": float(res),
                          "dilated_norm": st.norm})
    times = np.linspace(0.0, args.t, args.survival_points)
    q_master = integrate_master(model, np.outer(eta0, eta0.conj()), times).trace
    survival = []
    for t, qm in zip(times[1:], q_master[1:]):
        mean, se = survival_ensemble(model, Sd, eta0, t, args.n_survival, args.seed, args.workers)
        survival.append({"t": float(t), "dilated_mean": mean, "stderr": se, "master": float(qm),
                         "z": (mean - qm) / se if se > 0 else 0.0})
    out.json("dilation.json", {
        "flavor": args.flavor, "S": Sd.S, "unitarity_residual": Sd.unitarity_residual(),
        "intertwining_residual": intertwining_residual(model.C),
        "compression": residuals, "survival": survival})
    return EXIT_OK


def cmd_diffusion(args, out: Outputs) -> int:
    from .diffusion import diffusion_ensemble, integrate_ito_schrodinger, mean_oracle
    model, doc_eta = _rate_model(args.model)
    eta0 = _initial_state(args.eta, doc_eta, model.dim)
    d = model.dim
    if args.n <= 1:
        p = integrate_ito_schrodinger(model.H, model.R, eta0, args.dt, args.t_max, args.seed,
                                      args.scheme, args.renormalize)
        stride = max(1, args.record_every)
        w = p.wiener_path()
        out.csv("diffusion.csv", ["t", "w"] + _complex_cols("psi", d) + ["norm_sq"],
                ([p.grid[k], w[k]] + _split(p.psi[k]) + [p.norm_sq[k]]
                 for k in range(0, p.grid.size, stride)))
        return EXIT_OK
    ens = diffusion_ensemble(model.H, model.R, eta0, args.n, args.dt, args.t_max, args.seed,
                             scheme=args.scheme, workers=args.workers)
    oracle = np.array([mean_oracle(model.H, model.R, eta0, t) for t in ens.grid])
    out.csv("diffusion_ensemble.csv",
            ["t"] + _complex_cols("mean", d) + [f"mean{i}_stderr" for i in range(d)]
            + _complex_cols("semigroup", d) + ["trace", "trace_stderr"],
            ([t] + _split(m) + list(s) + _split(o) + [tr, ts] for t, m, s, o, tr, ts in
             zip(ens.grid, ens.mean, ens.mean_stderr, oracle, ens.trace, ens.trace_stderr)))
    out.json("second_moment.json", {"grid": ens.grid, "second": ens.second,
                                    "second_stderr": ens.second_stderr})
    return EXIT_OK


def cmd_zeno(args, out: Outputs) -> int:
    from .diffusion import zeno_sweep
    model, doc_eta = _rate_model(args.model)
    eta0 = _initial_state(args.eta, doc_eta, model.dim)
    rows = zeno_sweep(model.H, model.R, _floats(args.lambdas), eta0, args.t_max, args.n,
                      args.seed, grid_points=args.grid_points, dt=args.dt, workers=args.workers)
    out.csv("zeno.csv", ["lambda", "sup_error_vs_semigroup", "trace_distance_vs_semigroup",
                         "trace_distance_vs_diffusion", "side_condition"],
            ([r.lam, r.sup_error, r.dist_semigroup, r.dist_diffusion, r.side_condition]
             for r in rows))
    return EXIT_OK


def cmd_verify(args, out: Outputs) -> int:
    from .verify import all_passed, run_checks
    model, doc_eta = _model(args.model)
    rate, _ = _rate_model(args.rate_model)
    eta0 = _initial_state(args.eta, doc_eta, model.dim)
    if rate.dim != model.dim:
        raise ModelError("the two verification models must share the dimension")
    checks = run_checks(model, rate, eta0, seed=args.seed, n=args.n, workers=args.workers)
    ok = all_passed(checks)
    out.json("verify.json", {"passed": ok, "checks": [c.as_dict() for c in checks]})
    for c in checks:
        print(f"{'PASS' if c.passed else 'FAIL'} {c.name} {c.observed:.3e} (limit {c.limit:.3e})")
    return EXIT_OK if ok else EXIT_TOLERANCE


COMMANDS = {
    "trajectories": cmd_trajectories, "master": cmd_master, "dyson": cmd_dyson,
    "genfun": cmd_genfun, "dilation": cmd_dilation, "diffusion": cmd_diffusion,
    "zeno": cmd_zeno, "verify": cmd_verify,
}


# -- parser -----------------------------------------------------------------------

MODEL_HELP = ("model JSON: {dim, H, lambda, C and/or R, optional eta0}; matrix entries are "
              "numbers or [re, im] pairs (default: bundled d=2 fixture)")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--outdir", default=None,
                        help=f"output directory (env {OUTDIR_ENV}, default ./qcollapse-out)")
    common.add_argument("--workers", type=int, default=None,
                        help=f"worker processes (env {WORKERS_ENV}, default all cores); "
                             "results do not depend on it")
    common.add_argument("--seed", type=int, default=0, help="base seed (default 0)")
    common.add_argument("--eta", default=None,
                        help="initial state as a JSON list, normalized on input "
                             "(default: the model's eta0, else the uniform superposition)")
    common.add_argument("--log-level", default="INFO", help="stderr logging level")

    p = _Parser(prog="qcollapse", description="Poisson collapse dynamics of unstable "
                "quantum systems, with independent oracles for every channel.")
    p.add_argument("--replay", metavar="MANIFEST",
                   help="re-run the command recorded in a run manifest and compare outputs")
    p.add_argument("--outdir", dest="replay_outdir", default=None,
                   help="with --replay: directory for the reproduced files")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("trajectories", parents=[common], help="sample jump trajectories")
    s.add_argument("--model", help=MODEL_HELP)
    s.add_argument("--n", type=int, default=10_000, help="ensemble size")
    s.add_argument("--t-max", type=float, default=1.0)
    s.add_argument("--grid-step", type=float, default=0.1)

    s = sub.add_parser("master", parents=[common], help="integrate the averaged master equation")
    s.add_argument("--model", help=MODEL_HELP)
    s.add_argument("--t-max", type=float, default=1.0)
    s.add_argument("--grid-step", type=float, default=0.05)

    s = sub.add_parser("dyson", parents=[common], help="iterated-integral series oracle")
    s.add_argument("--model", help=MODEL_HELP)
    s.add_argument("--t", type=float, default=1.0)
    s.add_argument("--tol", type=float, default=1e-12)

    s = sub.add_parser("genfun", parents=[common], help="generating functional of a test function")
    s.add_argument("--model", help=MODEL_HELP)
    s.add_argument("--testfunction", help="JSON {grid, values, optional lambda}; values are "
                   "cell values as numbers or [re, im] pairs")
    s.add_argument("--mode", choices=("ode", "mc", "both"), default="both")
    s.add_argument("--n", type=int, default=10_000, help="Monte Carlo trajectories per time")
    s.add_argument("--t-max", type=float, default=None,
                   help="horizon (default: end of the test-function grid)")
    s.add_argument("--grid-step", type=float, default=0.25)

    s = sub.add_parser("dilation", parents=[common], help="unitary dilation checks")
    s.add_argument("--model", help=MODEL_HELP)
    s.add_argument("--flavor", choices=("hermitian", "nonhermitian"), default="hermitian")
    s.add_argument("--n-traj", type=int, default=100, help="trajectories for the compression check")
    s.add_argument("--max-jumps", type=int, default=6)
    s.add_argument("--t", type=float, default=1.0)
    s.add_argument("--n-survival", type=int, default=5000)
    s.add_argument("--survival-points", type=int, default=5)

    s = sub.add_parser("diffusion", parents=[common], help="Ito-Schrodinger diffusion limit")
    s.add_argument("--model", help=MODEL_HELP + "; must carry R")
    s.add_argument("--n", type=int, default=1, help="1 for a single path, else ensemble size")
    s.add_argument("--dt", type=float, default=1e-4)
    s.add_argument("--t-max", type=float, default=1.0)
    s.add_argument("--scheme", choices=("milstein", "euler"), default="milstein")
    s.add_argument("--renormalize", action="store_true",
                   help="renormalize after each step (changes the process)")
    s.add_argument("--record-every", type=int, default=100, help="single path: CSV stride")

    s = sub.add_parser("zeno", parents=[common], help="intensity sweep towards the diffusion limit")
    s.add_argument("--model", help=MODEL_HELP + "; must carry R")
    s.add_argument("--lambdas", default="10,100,1000", help="comma-separated intensities")
    s.add_argument("--n", type=int, default=2000)
    s.add_argument("--t-max", type=float, default=1.0)
    s.add_argument("--dt", type=float, default=1e-3)
    s.add_argument("--grid-points", type=int, default=11)

    s = sub.add_parser("verify", parents=[common], help="run the cross-oracle suite")
    s.add_argument("--model", help=MODEL_HELP)
    s.add_argument("--rate-model", help="rate-form model for the limit checks "
                   "(default: bundled d=2 fixture)")
    s.add_argument("--n", type=int, default=2000, help="Monte Carlo ensemble size")
    return p


def _versions() -> dict:
    import scipy
    try:
        own = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        own = "unknown"
    return {"qcollapse": own, "python": platform.python_version(),
            "numpy": np.__version__, "scipy": scipy.__version__}


def _execute(argv: list[str], outdir_override: str | None = None) -> tuple[int, Outputs | None]:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.replay:
        return _replay(args.replay, args.replay_outdir)
    if not args.command:
        parser.print_help(sys.stderr)
        raise UsageError("a subcommand is required")
    logging.getLogger().setLevel(getattr(logging, str(args.log_level).upper(), logging.INFO))
    args.workers = resolve_workers(args.workers)
    outdir = Path(outdir_override or args.outdir or os.environ.get(OUTDIR_ENV) or "qcollapse-out")
    out = Outputs(outdir)
    start = time.perf_counter()
    code = COMMANDS[args.command](args, out)
    wall = time.perf_counter() - start
    manifest = {"argv": argv, "command": args.command, "seed": args.seed,
                "config": {k: v for k, v in vars(args).items()
                           if k not in ("replay", "replay_outdir")},
                "versions": _versions(), "wall_time_s": wall, "exit_code": code,
                "outputs": dict(out.files)}
    (outdir / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True,
                                              default=_json_default) + "\n")
    log.info("%s finished in %.2f s (exit %d)", args.command, wall, code)
    return code, out


def _replay(manifest_path, outdir) -> tuple[int, Outputs | None]:
    doc = read_json(manifest_path, "run manifest")
    if not isinstance(doc, dict) or "argv" not in doc or "outputs" not in doc:
        raise SchemaError("$", f"{manifest_path}: not a run manifest")
    argv = list(doc["argv"])
    target = outdir or str(Path(manifest_path).resolve().parent / "replay")
    code, out = _execute(argv, outdir_override=target)
    mismatched = sorted(name for name, digest in doc["outputs"].items()
                        if out.files.get(name) != digest)
    if mismatched:
        log.error("replay differs in %s", ", ".join(mismatched))
        return EXIT_TOLERANCE, out
    log.info("replay reproduced %d files bit for bit", len(doc["outputs"]))
    return code, out


def run(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        return _execute(argv)[0]
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INPUT
    except (ModelError, ValueError) as exc:
        print(f"qcollapse: error: {exc}", file=sys.stderr)
        return EXIT_INPUT


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
