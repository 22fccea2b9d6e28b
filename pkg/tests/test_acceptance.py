"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -s`` to see the lines as they
happen; they are also collected in the terminal summary.
"""

import json
import math
import time

import numpy as np
import pytest

from spde_ergo.cli import kernel_suite, main
from spde_ergo.coefficients import make_preset
from spde_ergo.ergolab import (
    SteeringPlan,
    bounded,
    builtin_observables,
    indicator,
    krylov_bogolyubov,
    normality_pvalue,
    steering_experiment,
    uniqueness_probe,
)
from spde_ergo.grid_noise import SpatialGrid, stream_ids
from spde_ergo.solver import SimConfig, mild_residual, simulate, simulate_ensemble
from spde_ergo.tangent_bel import (
    bel_gradient,
    fd_gradient,
    finite_difference_tangent,
    gradient_scaling,
    run_tangent,
    tangent_config,
)

from conftest import h_rel


class Clock:
    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.seconds = time.perf_counter() - self.start


def test_criterion_01_kernel_identities(criterion):
    with Clock() as clk:
        rows = {name: err for name, _, err in kernel_suite(64)}
    ok = rows["semigroup"] <= 1e-6 and rows["heat_equation"] <= 1e-4 and clk.seconds <= 10
    assert criterion(1, ok, f"semigroup {rows['semigroup']:.2e}, heat {rows['heat_equation']:.2e}, {clk.seconds:.1f}s")


def test_criterion_02_j_bound(criterion):
    with Clock() as clk:
        rows = {name: (params, err) for name, params, err in kernel_suite(64)}
    v_g = rows["J_bound_gauss"][1]
    v_dy = rows["J_bound_gauss_dy"][1]
    ok = v_g == 0 and v_dy == 0 and clk.seconds <= 30
    assert criterion(2, ok, f"violations gauss {v_g:g}, gauss_dy {v_dy:g} of 100 each, {clk.seconds:.1f}s")


def test_criterion_03_solver_consistency(criterion):
    with Clock() as clk:
        from spde_ergo.coefficients import Polynomial

        c = make_preset("custom", b=Polynomial((0.0, 1.0)), sigma=0.0)
        res = []
        for dt in (1e-3, 5e-4, 2.5e-4):
            cfg = SimConfig(n_cells=64, dt=dt, T=0.1, coefficients=c)
            res.append(mild_residual(simulate(cfg.replace(initial=cfg.grid.from_modes([1.0, 0.5])))))
        orders = np.log2(np.array(res[:-1]) / np.array(res[1:]))
        silent = make_preset("custom", sigma=0.0)
        heat = SimConfig(n_cells=128, dt=1e-5, T=0.1, coefficients=silent, save_every=10000)
        heat = heat.replace(initial=heat.grid.from_modes([1.0]))
        err = h_rel(heat.grid, simulate(heat).profiles[-1], math.exp(-math.pi**2 * 0.1) * heat.grid.mode(1))
    ok = bool(np.all(orders >= 0.8)) and err <= 1e-3 and clk.seconds <= 120
    detail = f"residuals {', '.join(f'{r:.2e}' for r in res)}, orders {', '.join(f'{o:.2f}' for o in orders)}, " \
             f"heat decay error {err:.1e}, {clk.seconds:.1f}s"
    assert criterion(3, ok, detail)


def test_criterion_04_truncation_identity(criterion):
    with Clock() as clk:
        c = make_preset("burgers", sigma_const=3.0)
        base = SimConfig(n_cells=32, dt=2e-4, T=0.5, coefficients=c)
        base = base.replace(initial=base.grid.from_modes([1.0]))
        R = 4.0
        free = simulate_ensemble(base.replace(exit_levels=(R,)), 50, keep_profiles=True)
        gated = simulate_ensemble(base.replace(R=R), 50, keep_profiles=True)
        worst, exited = 0.0, 0
        for p in range(50):
            tau = free.exit_times[R][p]
            upto = free.times <= tau
            exited += bool(np.isfinite(tau))
            diff = free.profiles[upto, p] - gated.profiles[upto, p]
            worst = max(worst, float(np.max(np.abs(diff))))
    ok = worst == 0.0 and clk.seconds <= 60
    assert criterion(4, ok, f"max |u - u^R| before exit {worst:g} over 50 paths ({exited} exit), {clk.seconds:.1f}s")


def test_criterion_05_exit_time_bound(criterion):
    with Clock() as clk:
        levels = (5.0, 10.0, 20.0, 40.0)
        c = make_preset("burgers", sigma_const=6.0)
        cfg = SimConfig(n_cells=32, dt=2e-4, T=0.5, coefficients=c, exit_levels=levels)
        cfg = cfg.replace(initial=cfg.grid.from_modes([2.0]))
        res = simulate_ensemble(cfg, 500)
        f_sq = float(cfg.grid.h_norm_sq(cfg.initial_values()))
        p = np.array([np.mean(res.exit_times[R] <= cfg.T) for R in levels])
        c_fit = p[0] * math.log(levels[0]) / (1 + f_sq)
        bound = c_fit * (1 + f_sq) / np.log(levels)
    decreasing = bool(np.all(np.diff(p) < 0))
    violations = int(np.sum(p > bound + 1e-12))
    ok = decreasing and violations == 0 and clk.seconds <= 300
    detail = f"P(tau_R<=t) {', '.join(f'{x:.3f}' for x in p)}, bound {', '.join(f'{b:.3f}' for b in bound)}, " \
             f"{violations} violations, {clk.seconds:.1f}s"
    assert criterion(5, ok, detail)


def test_criterion_06_tangent_vs_fd(criterion):
    with Clock() as clk:
        c = make_preset("burgers", sigma_const=1.0, sigma_amp=0.3)
        cfg = tangent_config(SimConfig(n_cells=32, dt=2e-4, T=0.1, coefficients=c, R=3.0))
        f = cfg.grid.from_modes([1.5, 0.5])
        h = cfg.grid.from_modes([0.3, 1.0, -0.2])
        ids = np.arange(20)
        run = run_tangent(cfg, f, [h], ids)
        fd = finite_difference_tangent(cfg, f, h, ids, eps=1e-5)
        worst = max(h_rel(cfg.grid, run.Y[p, 0], fd[p]) for p in range(ids.size))
    ok = worst <= 1e-2 and clk.seconds <= 120
    assert criterion(6, ok, f"max relative discrepancy {worst:.1e} over 20 paths, {clk.seconds:.1f}s")


def test_criterion_07_bel_estimator(criterion):
    with Clock() as clk:
        lin = SimConfig(n_cells=32, dt=2e-4, T=0.1, coefficients=make_preset("custom", sigma=1.0))
        grid = lin.grid
        mode1 = builtin_observables(grid)["mode_1"]
        h = grid.from_modes([1.0, 0.5])
        est = bel_gradient(mode1, np.zeros(31), h, 0.1, lin, 10000)
        exact = math.exp(-math.pi**2 * 0.1)
        z_lin = abs(est.value - exact) / est.std_err

        c = make_preset("burgers", sigma_const=1.0)
        burg = SimConfig(n_cells=32, dt=2e-4, T=0.1, coefficients=c, R=20.0)
        psi = bounded(mode1, 0.5)
        f = grid.from_modes([1.0, 0.5])
        ids = stream_ids("primary", 10000)
        bel = bel_gradient(psi, f, h, 0.1, burg, 10000, ids)
        fd = fd_gradient(psi, f, h, 0.1, burg, 10000, eps=1e-3, stream_ids=ids)
        z_burg = abs(bel.value - fd.value) / math.hypot(bel.std_err, fd.std_err)
    ok = z_lin <= 3 and z_burg <= 5 and clk.seconds <= 600
    detail = f"linear {est.value:.4f}+-{est.std_err:.4f} vs {exact:.4f} (z={z_lin:.2f}); " \
             f"Burgers BEL {bel.value:.4f}+-{bel.std_err:.4f} vs FD {fd.value:.4f}+-{fd.std_err:.4f} " \
             f"(z={z_burg:.2f}), {clk.seconds:.1f}s"
    assert criterion(7, ok, detail)


def test_criterion_08_strong_feller_exponent(criterion):
    with Clock() as clk:
        from spde_ergo.coefficients import Polynomial

        # the first mode is neutral under A + pi^2, so the gradient bound is not
        # masked by exponential decay over the fitted time range
        c = make_preset("custom", b=Polynomial((0.0, math.pi**2)), sigma=1.0, K=10.0, L=10.0)
        cfg = SimConfig(n_cells=32, dt=1e-3, T=0.4, coefficients=c)
        grid = cfg.grid
        psi = indicator(builtin_observables(grid)["mode_1"])
        dirs = [grid.mode(k) for k in (1, 2, 3)]
        times = [0.05, 0.1, 0.2, 0.4]
        fit = gradient_scaling(psi, np.zeros(31), dirs, times, cfg, 10000)
    ok = -0.7 <= fit.exponent <= -0.3 and clk.seconds <= 600
    detail = f"exponent {fit.exponent:.3f}, sup gradient {', '.join(f'{s:.3f}' for s in fit.sup_gradient)}, " \
             f"{clk.seconds:.1f}s"
    assert criterion(8, ok, detail)


def test_criterion_09_invariant_measure(criterion):
    with Clock() as clk:
        amp = 0.8
        c = make_preset("custom", sigma=amp)
        cfg = SimConfig(n_cells=16, dt=1e-3, T=400.0, coefficients=c, save_every=10, seed=9)
        traj = simulate(cfg)
        long = krylov_bogolyubov(traj, burn_in=20.0)
        half = traj.times <= 200.0
        from spde_ergo.solver import Trajectory

        short_traj = Trajectory(traj.times[half], traj.profiles[half], {k: v[half] for k, v in traj.observables.items()},
                                {}, traj.seed, traj.stream_id, traj.dt, traj.save_every, traj.grid, traj.cfg)
        short = krylov_bogolyubov(short_traj, burn_in=20.0)
        target = amp**2 / (2 * math.pi**2)
        var_err = abs(short.var("mode_1") / target - 1)
        tv = max(short.tv_distance(long, name) for name in short.samples)
        pval = normality_pvalue(short.samples["mode_1"], short.tau_int["mode_1"] / short.sample_dt)
    ok = var_err <= 0.10 and tv <= 0.05 and clk.seconds <= 300
    detail = f"mode-1 variance {short.var('mode_1'):.5f} vs {target:.5f} ({100 * var_err:.1f}%), " \
             f"normality p={pval:.2f}, max TV(T=200, T=400) {tv:.3f}, {clk.seconds:.1f}s"
    assert criterion(9, ok, detail)


def test_criterion_10_uniqueness_proxy(criterion):
    with Clock() as clk:
        c = make_preset("reaction_diffusion", b_coeffs=(0.0, -1.0), b_sin_amp=-0.5, sigma_const=1.0, sigma_amp=0.25,
                        K=2.0, L=2.0)
        cfg = SimConfig(n_cells=16, dt=1e-3, T=200.0, coefficients=c, save_every=10, seed=5)
        f2 = cfg.grid.from_modes([5.0])
        long = uniqueness_probe(np.zeros(15), f2, cfg, burn_in=20.0, n_paths=8)
        short = uniqueness_probe(np.zeros(15), f2, cfg.replace(T=5.0), burn_in=0.0, n_paths=8)
    ok = long.within_noise and short.exceeds_noise and clk.seconds <= 600
    detail = "T=200 ratios " + ", ".join(f"{k} {v:.2f}" for k, v in long.ratios.items()) + \
             "; T=5 ratios " + ", ".join(f"{k} {v:.2f}" for k, v in short.ratios.items()) + f", {clk.seconds:.1f}s"
    assert criterion(10, ok, detail)


def test_criterion_11_deterministic_reconstruction(criterion):
    with Clock() as clk:
        grid = SpatialGrid(128)
        plan = SteeringPlan.build(grid, grid.from_modes([0.5]), r=1.0, t=1.0, t1=0.9, K=5.0)
        silent = make_preset("custom", sigma=0.0)
        cfg = SimConfig(n_cells=128, dt=1e-5, T=1.0, coefficients=silent, R=50.0, initial=grid.from_modes([0.0, 1.0]))
        res = steering_experiment(plan, cfg, 1)
        smoothing = math.sqrt(grid.h_norm_sq(plan.a_target - plan.a_tilde))
        err = float(res.distances[0]) + smoothing  # |Z(t) - a_tilde| <= |Z(t) - a| + |a - a_tilde|
    ok = err <= 1e-3 and clk.seconds <= 30
    assert criterion(11, ok, f"|Z(t) - a_tilde|_H <= {err:.1e}, {clk.seconds:.1f}s")


STEER_CONFIG = """\
[grid]
n_cells = 32
[time]
dt = 1e-4
T = 1.0
[coefficients]
preset = burgers
sigma_const = 0.5
[truncation]
R = 20
[noise]
seed = 0
[experiment]
target_modes = 0.5
radius = 1.0
n_paths = 400
n_pilot = 200
"""


@pytest.fixture(scope="module")
def steer_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("acceptance")
    cfg = out / "steer.ini"
    cfg.write_text(STEER_CONFIG)
    start = time.perf_counter()
    code = main(["steer", "--config", str(cfg), "--out", str(out / "steer")])
    return out, code, time.perf_counter() - start


def test_criterion_12_irreducibility(criterion, steer_run):
    out, code, seconds = steer_run
    s = json.loads((out / "steer" / "steer_summary.json").read_text())
    ok = code == 0 and s["status"] == "positive" and s["hit_lower_95"] > 0 and s["lower_bound"] > 0 and seconds <= 900
    detail = f"hit fraction {s['hit_fraction']:.3f} (LCB95 {s['hit_lower_95']:.3f}), combined lower bound " \
             f"{s['lower_bound']:.3f}, P(I1 regime) {s['regime_fraction']:.3f}, P(|I2|>=r/6) {s['p_I2_ge_r6']:.3f}, " \
             f"P(|I3|>=r/6) {s['p_I3_ge_r6']:.3f}, chain holds {s['chain_holds']}, {seconds:.1f}s"
    assert criterion(12, ok, detail)


SMALL = """\
[grid]
n_cells = 16
[time]
dt = 1e-3
T = {T}
[coefficients]
preset = reaction_diffusion
b_coeffs = 0, -1
sigma_const = 1.0
sigma_amp = 0.25
[truncation]
R = 20
[experiment]
initial_modes = 1.0
n_paths = 8
exit_levels = 1.0, 2.0
f2_modes = 3.0
uniqueness = true
n_boot = 20
n_samples = 200
n_pilot = 20
"""


def _data_files(directory):
    return {p.name: p.read_bytes() for p in sorted(directory.iterdir()) if p.suffix in (".csv", ".bin")}


def test_criterion_13_reproducibility(criterion, steer_run, tmp_path):
    out, _, _ = steer_run
    runs = [out / "steer"]
    for sub, T in (("simulate", 0.1), ("kernel-test", 0.1), ("invariant", 5.0), ("couple", 2.0), ("gradient", 0.05),
                   ("steer", 0.5)):
        cfg = tmp_path / f"{sub}.ini"
        cfg.write_text(SMALL.format(T=T))
        main([sub, "--config", str(cfg), "--out", str(tmp_path / sub), "--threads", "2"])
        runs.append(tmp_path / sub)
    mismatched = []
    for run in runs:
        main(["replay", "--manifest", str(run / "manifest.json")])
        original, again = _data_files(run), _data_files(run / "replay")
        listed = set(json.loads((run / "manifest.json").read_text())["outputs"])
        if not original or original != again or listed != set(p.name for p in run.iterdir() if p.is_file()) - {"manifest.json"}:
            mismatched.append(run.name)
    ok = not mismatched
    assert criterion(13, ok, f"{len(runs) - len(mismatched)}/{len(runs)} manifests replay byte-identically"
                             + (f" (mismatch: {', '.join(mismatched)})" if mismatched else ""))
