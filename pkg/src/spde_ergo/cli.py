"""Command line entry point: ``spde-ergo <subcommand> --config run.ini --out dir``.

Subcommands: ``simulate``, ``kernel-test``, ``invariant``, ``couple``,
``steer``, ``gradient`` and ``replay --manifest path``.

Exit codes: 0 success, 2 invalid configuration, 3 numerical blow-up,
4 inconclusive irreducibility status.  Diagnostics go to stderr, data to
files in the output directory, each run listed in ``manifest.json``.

Binary profile dump (``profiles.bin``): little-endian header
``{n_cells: u32, n_samples: u32}`` followed by ``n_samples`` rows of f64
``[t, u_1, ..., u_{n_cells-1}]``.
"""

from __future__ import annotations

import argparse
import json
import math
import struct
import sys
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigErrors, RunConfig, parse_config, parse_text
from .errors import BlowUpError, ConfigurationError, HypothesisViolation
from .ergolab import (
    SteeringPlan,
    bounded,
    builtin_observables,
    indicator,
    irreducibility_report,
    krylov_bogolyubov,
    normality_pvalue,
    synchronous_coupling,
    uniqueness_probe,
)
from .grid_noise import stream_ids as role_streams
from .heat_kernel import (
    GreenKernel,
    KernelKind,
    apply_J,
    eval_green,
    eval_green_dt,
    eval_green_dy,
    j_bound_constant,
    j_bound_rhs,
)
from .solver import Trajectory, simulate_ensemble
from .tangent_bel import bel_table, fd_gradient

EXIT_OK, EXIT_CONFIG, EXIT_BLOWUP, EXIT_INCONCLUSIVE = 0, 2, 3, 4

SUBCOMMANDS = ("simulate", "kernel-test", "invariant", "couple", "steer", "gradient")


# ---------------------------------------------------------------------------
# output helpers


def fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, str):
        return x
    return "%.17g" % float(x)


class Outputs:
    """Tracks files written by one run."""

    def __init__(self, out_dir: Path):
        self.dir = Path(out_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.files = []

    def csv(self, name, header, rows):
        path = self.dir / name
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(",".join(header) + "\n")
            for row in rows:
                fh.write(",".join(fmt(v) for v in row) + "\n")
        self.files.append(name)

    def json(self, name, payload):
        with open(self.dir / name, "w", encoding="utf-8") as fh:
            json.dump(_jsonable(payload), fh, indent=2, sort_keys=True)
            fh.write("\n")
        self.files.append(name)

    def profiles(self, name, n_cells, times, profiles):
        with open(self.dir / name, "wb") as fh:
            fh.write(struct.pack("<II", n_cells, len(times)))
            rows = np.column_stack([np.asarray(times, float), np.asarray(profiles, float)])
            fh.write(rows.astype("<f8").tobytes())
        self.files.append(name)


def read_profiles(path):
    """Inverse of the binary dump: ``(n_cells, times, profiles)``."""
    raw = Path(path).read_bytes()
    n_cells, n_samples = struct.unpack_from("<II", raw)
    rows = np.frombuffer(raw, dtype="<f8", offset=8).reshape(n_samples, n_cells)
    return n_cells, rows[:, 0].copy(), rows[:, 1:].copy()


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    return obj


def _chunks(n, threads):
    threads = max(1, min(int(threads), n))
    bounds = np.linspace(0, n, threads + 1).astype(int)
    return [(lo, hi) for lo, hi in zip(bounds[:-1], bounds[1:]) if hi > lo]


def _map_chunks(fn, n, threads):
    """Run ``fn(lo, hi)`` over path chunks; results are returned in chunk order."""
    parts = _chunks(n, threads)
    if len(parts) == 1:
        return [fn(*parts[0])]
    with ThreadPoolExecutor(len(parts)) as pool:
        return list(pool.map(lambda p: fn(*p), parts))


# ---------------------------------------------------------------------------
# subcommands


def run_simulate(rc: RunConfig, out: Outputs, threads: int):
    cfg = rc.sim
    n = rc.experiment["n_paths"]
    ids = cfg.stream_id + np.arange(n, dtype=np.uint64)
    keep = bool(rc.experiment["dump_profiles"])

    def work(lo, hi):
        return simulate_ensemble(cfg, hi - lo, stream_ids=ids[lo:hi], keep_profiles=keep and lo == 0)

    parts = _map_chunks(work, n, threads)
    names = list(parts[0].observables)
    rows = []
    times = parts[0].times
    offset = 0
    for res in parts:
        P = res.final.shape[0]
        for p in range(P):
            for j, t in enumerate(times):
                rows.append([t, offset + p] + [res.observables[k][j, p] for k in names])
        offset += P
    out.csv("trajectory.csv", ["t", "path"] + names, rows)
    if cfg.exit_levels:
        ex_rows = []
        offset = 0
        for res in parts:
            P = res.final.shape[0]
            for p in range(P):
                for R in cfg.exit_levels:
                    ex_rows.append([R, offset + p, res.exit_times[float(R)][p]])
            offset += P
        out.csv("exit_times.csv", ["R", "path", "tau"], ex_rows)
    if keep:
        out.profiles("profiles.bin", cfg.n_cells, times, parts[0].profiles[:, 0, :])
    return EXIT_OK, {"n_paths": n}


def kernel_suite(n_modes: int = 64, seed: int = 0):
    """Rows ``(identity, parameters, max_error)`` for the heat-kernel checks."""
    from .grid_noise import SpatialGrid

    rng = np.random.Generator(np.random.Philox(key=np.array([seed, 7], dtype=np.uint64)))
    kernel = GreenKernel(n_modes)
    rows = []
    # semigroup identity by trapezoid quadrature on a fine y grid
    y = np.linspace(0.0, 1.0, 4097)
    w = np.full(y.size, y[1] - y[0])
    w[[0, -1]] *= 0.5
    worst = 0.0
    ts = (0.01, 0.05, 0.2)
    for t in ts:
        for s in ts:
            x, z = rng.random(20), rng.random(20)
            lhs = (eval_green(t, x[:, None], y[None, :], kernel) * eval_green(s, y[None, :], z[:, None], kernel)) @ w
            worst = max(worst, float(np.max(np.abs(lhs - eval_green(t + s, x, z, kernel)))))
    rows.append(("semigroup", f"N={n_modes};t,s in 0.01/0.05/0.2", worst))
    # heat identity: central difference in t vs spectral A G
    worst = 0.0
    h = 1e-5
    for t in (0.05, 0.1, 0.2):
        x, yy = rng.random(20), rng.random(20)
        fd = (eval_green(t + h, x, yy, kernel) - eval_green(t - h, x, yy, kernel)) / (2 * h)
        exact = eval_green_dt(t, x, yy, kernel)
        worst = max(worst, float(np.max(np.abs(fd - exact)) / np.max(np.abs(exact))))
    rows.append(("heat_equation", f"N={n_modes};h=1e-5;t in 0.05/0.1/0.2", worst))
    # discrete orthonormality
    grid = SpatialGrid(2 * n_modes)
    B = grid.sine_basis(n_modes)
    rows.append(("orthonormality", f"n_cells={grid.n_cells};N={n_modes}",
                 float(np.max(np.abs(grid.dx * B @ B.T - np.eye(n_modes))))))
    # y-derivative against finite differences
    x, yy = rng.random(20), 0.05 + 0.9 * rng.random(20)
    hy = 1e-6
    fd = (eval_green(0.1, x, yy + hy, kernel) - eval_green(0.1, x, yy - hy, kernel)) / (2 * hy)
    exact = eval_green_dy(0.1, x, yy, kernel)
    rows.append(("dy_finite_difference", "t=0.1;h=1e-6", float(np.max(np.abs(fd - exact)) / np.max(np.abs(exact)))))
    # J bound with q=1, rho=2 for both kinds, 100 random inputs each
    jgrid = SpatialGrid(32)
    jker = GreenKernel(16, jgrid)
    for kind in (KernelKind.GAUSS, KernelKind.GAUSS_DY):
        C1 = j_bound_constant(kind, jker, jgrid)
        violations = 0
        ratio = 0.0
        for _ in range(100):
            k = int(rng.integers(1, 9))
            times = np.concatenate([[0.0], np.sort(rng.random(k - 1)), [1.0]]) * 0.5
            v = rng.standard_normal((k, jgrid.n_interior)) * rng.random((k, 1)) * 5
            lhs = math.sqrt(jgrid.h_norm_sq(apply_J(v, kind, 0.5, jker, times=times)))
            rhs = j_bound_rhs(v, times, 0.5, jgrid, C1)
            violations += lhs > rhs
            ratio = max(ratio, lhs / rhs)
        rows.append((f"J_bound_{kind.name.lower()}", f"q=1;rho=2;C1={C1:.6g};max_ratio={ratio:.6g}", float(violations)))
    return rows


def run_kernel_test(rc: RunConfig, out: Outputs, threads: int):
    rows = kernel_suite(rc.experiment["kernel_modes"], rc.sim.seed)
    out.csv("kernel_test.csv", ["identity", "parameters", "max_error"], rows)
    return EXIT_OK, {r[0]: r[2] for r in rows}


def run_invariant(rc: RunConfig, out: Outputs, threads: int):
    cfg = rc.sim
    e = rc.experiment
    res = simulate_ensemble(cfg, 1, stream_ids=[cfg.stream_id])
    traj = Trajectory(res.times, None, {k: v[:, 0] for k, v in res.observables.items()}, {},
                      cfg.seed, cfg.stream_id, cfg.dt, cfg.save_every, cfg.grid, cfg)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", RuntimeWarning)
        measure = krylov_bogolyubov(traj, e["burn_in"], bins=e["bins"])
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    rows = []
    for name, hist in measure.histograms.items():
        for lo, hi, m in zip(hist.edges[:-1], hist.edges[1:], hist.masses):
            rows.append([name, lo, hi, m])
    out.csv("histogram.csv", ["observable", "bin_lo", "bin_hi", "mass"], rows)
    summary = {
        name: {
            "mean": measure.mean(name),
            "var": measure.var(name),
            "tau_int": measure.tau_int[name],
        }
        for name in measure.samples
    }
    summary["mode_1"]["normality_p"] = normality_pvalue(
        measure.samples["mode_1"], measure.tau_int["mode_1"] / measure.sample_dt)
    summary["burn_in"] = measure.burn_in
    summary["T"] = measure.T
    out.json("invariant_summary.json", summary)
    return EXIT_OK, summary


def run_couple(rc: RunConfig, out: Outputs, threads: int):
    cfg = rc.sim
    e = rc.experiment
    f1 = cfg.initial_values()
    f2 = cfg.grid.from_modes(e["f2_modes"])
    curve = synchronous_coupling(f1, f2, cfg, e["n_paths"])
    rows = [[t, p, curve.distance[j, p]] for p in range(curve.distance.shape[1]) for j, t in enumerate(curve.times)]
    out.csv("coupling.csv", ["t", "path", "distance"], rows)
    summary = {"final_mean_distance": float(np.mean(curve.distance[-1]))}
    if e["uniqueness"]:
        rep = uniqueness_probe(f1, f2, cfg, burn_in=e["burn_in"], bins=e["bins"], n_boot=e["n_boot"],
                               n_paths=e["n_paths"])
        out.csv("uniqueness.csv", ["observable", "w1", "noise", "ratio"],
                [[k, rep.distances[k], rep.noise[k], rep.ratios[k]] for k in rep.distances])
        summary["within_noise"] = rep.within_noise
    out.json("couple_summary.json", summary)
    return EXIT_OK, summary


def run_steer(rc: RunConfig, out: Outputs, threads: int):
    cfg = rc.sim
    e = rc.experiment
    if not math.isfinite(cfg.R):
        raise ConfigurationError("truncation.R must be finite for steer")
    plan = SteeringPlan.build(cfg.grid, cfg.grid.from_modes(e["target_modes"]), e["radius"], cfg.T, e["t1"], e["K"])
    rep = irreducibility_report(plan, cfg, cfg.replace(R=math.inf), e["n_paths"], e["include_b"])
    s = rep.steering
    rows = [[p, s.xi_norm[p], s.distances[p], s.i2_norm[p], s.i3_norm[p], s.log_weights[p],
             rep.gap.sup_distance[p], rep.gap.blew_up[p]] for p in range(s.n_paths)]
    out.csv("steer_paths.csv", ["path", "xi_norm", "distance", "I2_norm", "I3_norm", "log_weight",
                                "truncation_gap", "full_blew_up"], rows)
    summary = rep.summary()
    summary["cutoff"] = plan.cutoff
    out.json("steer_summary.json", summary)
    code = EXIT_INCONCLUSIVE if rep.status == "inconclusive" else EXIT_OK
    for reason in rep.reasons:
        print(f"inconclusive: {reason}", file=sys.stderr)
    return code, summary


def _psi(rc: RunConfig):
    grid = rc.grid
    mode = builtin_observables(grid)["mode_1"]
    kind = rc.experiment["psi"]
    if kind == "mode_1":
        return mode
    if kind == "indicator_mode_1":
        return indicator(mode)
    return bounded(mode, rc.experiment["psi_scale"])


def run_gradient(rc: RunConfig, out: Outputs, threads: int):
    cfg = rc.sim
    e = rc.experiment
    grid = cfg.grid
    psi = _psi(rc)
    h = grid.from_modes(e["direction_modes"])
    f = cfg.initial_values()
    n = e["n_samples"]
    ids = role_streams("primary", n, cfg.stream_id)
    t = cfg.T
    parts = _map_chunks(lambda lo, hi: bel_table(psi, f, [h], [t], cfg, hi - lo, ids[lo:hi])[0, 0], n, threads)
    samples = np.concatenate(parts)
    est = float(samples.mean())
    err = float(samples.std(ddof=1) / math.sqrt(n))
    fd = float("nan")
    if e["fd_reference"]:
        fd = fd_gradient(psi, f, h, t, cfg, n, e["eps"], ids).value
    out.csv("gradient.csv", ["t", "estimator", "std_err", "fd_reference", "n_samples"], [[t, est, err, fd, n]])
    return EXIT_OK, {"estimator": est, "std_err": err, "fd_reference": fd}


HANDLERS = {
    "simulate": run_simulate,
    "kernel-test": run_kernel_test,
    "invariant": run_invariant,
    "couple": run_couple,
    "steer": run_steer,
    "gradient": run_gradient,
}


# ---------------------------------------------------------------------------
# dispatch


def dispatch(subcommand: str, rc: RunConfig, out_dir, threads: int = 1, source_text: str = "") -> int:
    """Run one subcommand and write its manifest; returns the exit code."""
    out = Outputs(out_dir)
    start = time.time()
    summary = {}
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            code, summary = HANDLERS[subcommand](rc, out, threads)
    except BlowUpError as exc:
        print(f"blow-up: {exc}", file=sys.stderr)
        code = EXIT_BLOWUP
        summary = {"error": str(exc), "t_fail": exc.t_fail}
    except (ConfigurationError, HypothesisViolation) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        code = EXIT_CONFIG
        summary = {"error": str(exc)}
    manifest = {
        "subcommand": subcommand,
        "version": __version__,
        "config": rc.to_text(),
        "config_values": rc.values,
        "seeds": {"seed": rc.sim.seed, "stream_id": rc.sim.stream_id,
                  "stream_roles": "role * 2**40 + stream_id + path"},
        "threads": threads,
        "wall_clock_seconds": time.time() - start,
        "exit_code": code,
        "outputs": list(out.files),
        "summary": summary,
    }
    with open(out.dir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(_jsonable(manifest), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return code


def replay(manifest_path, out_dir=None, threads=None) -> int:
    """Re-run a manifest's subcommand with its resolved configuration."""
    manifest_path = Path(manifest_path)
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    rc = parse_text(manifest["config"], str(manifest_path))
    out_dir = Path(out_dir) if out_dir else manifest_path.parent / "replay"
    return dispatch(manifest["subcommand"], rc, out_dir, threads or manifest.get("threads", 1))


def build_parser():
    parser = argparse.ArgumentParser(prog="spde-ergo", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=name != "kernel-test", help="configuration file")
        p.add_argument("--seed", type=int, default=None, help="override noise.seed")
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--threads", type=int, default=1, help="worker threads for path chunks")
    p = sub.add_parser("replay")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--threads", type=int, default=None)
    return parser


def _show_warning(message, category, filename, lineno, file=None, line=None):
    print(f"warning: {message}", file=sys.stderr)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    warnings.showwarning = _show_warning
    try:
        if args.command == "replay":
            return replay(args.manifest, args.out, args.threads)
        if args.seed is not None and not 0 <= args.seed < 2**64:
            raise ConfigErrors(["--seed must fit in an unsigned 64-bit integer"])
        if args.config is None:
            rc = parse_text("", "<defaults>", args.seed)
        else:
            rc = parse_config(args.config, args.seed)
    except ConfigErrors as exc:
        for line in exc.errors:
            print(f"error: {line}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    return dispatch(args.command, rc, args.out, args.threads)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
