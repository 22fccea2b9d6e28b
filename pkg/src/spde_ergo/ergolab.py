"""Ergodicity experiments: time-average invariant measures, coupling, steering.

* :func:`krylov_bogolyubov` bins observables averaged uniformly over
  ``(burn_in, T]`` of one long path.
* :func:`uniqueness_probe` compares the measures from two initial conditions
  in 1-Wasserstein distance against a block-bootstrap noise level.
* :func:`synchronous_coupling` runs two initial conditions on one noise path.
* :func:`steering_experiment` drives the truncated system towards a target
  ball with the two-phase control drift and decomposes the terminal state;
  :func:`irreducibility_report` combines it with a measured truncation gap.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, Optional, Sequence

import numpy as np
from scipy import stats

from .coefficients import CoefficientSet, Constant
from .errors import ConfigurationError, DomainError
from .grid_noise import ROLES, NoiseSource, SpatialGrid, stream_ids as role_streams
from .heat_kernel import GreenKernel
from .solver import (
    OBSERVABLE_NAMES,
    SimConfig,
    Stepper,
    Trajectory,
    _as_values,
    observable_functions,
    simulate,
    simulate_ensemble,
)


# ---------------------------------------------------------------------------
# observables


@dataclass(frozen=True, eq=False)
class Observable:
    """Named scalar functional of the state; ``sup`` is ``sup |functional|``."""

    name: str
    functional: Callable
    sup: float = math.inf

    def __call__(self, u):
        return self.functional(u)


def builtin_observables(grid: SpatialGrid, x0: float = 0.5) -> Dict[str, Observable]:
    """``h_norm_sq``, ``mode_1``, ``point`` (at the node nearest ``x0``), ``sup_abs``."""
    fns = observable_functions(grid, x0)
    return {name: Observable(name, fns[name]) for name in OBSERVABLE_NAMES}


def bounded(obs: Observable, scale: float = 1.0) -> Observable:
    """``tanh(obs / scale)``, bounded by 1."""
    return Observable(f"tanh({obs.name})", lambda u: np.tanh(obs(u) / scale), 1.0)


def indicator(obs: Observable, threshold: float = 0.0) -> Observable:
    """``1{obs > threshold}``."""
    return Observable(f"1[{obs.name}>{threshold:g}]", lambda u: (obs(u) > threshold).astype(float), 1.0)


# ---------------------------------------------------------------------------
# time series statistics


def integrated_autocorr_time(x, c: float = 5.0) -> float:
    """Integrated autocorrelation time in samples (Sokal's adaptive window)."""
    x = np.asarray(x, dtype=float)
    n = x.size
    if n < 4 or np.ptp(x) == 0:
        return 1.0
    y = x - x.mean()
    nfft = 1 << (2 * n - 1).bit_length()
    spec = np.fft.rfft(y, nfft)
    acf = np.fft.irfft(spec * np.conj(spec), nfft)[:n]
    acf /= acf[0]
    tau = 2.0 * np.cumsum(acf) - 1.0
    window = np.arange(n) >= c * tau
    m = int(np.argmax(window)) if window.any() else n - 1
    return float(max(tau[m], 1.0))


def wasserstein_1(a, b) -> float:
    """W1 between two 1-D empirical measures by matching sorted samples.

    ``int_0^1 |F_a^{-1}(q) - F_b^{-1}(q)| dq`` with the quantile functions
    piecewise constant between the breakpoints ``i / n_a`` and ``j / n_b``.
    """
    a = np.sort(np.asarray(a, dtype=float).ravel())
    b = np.sort(np.asarray(b, dtype=float).ravel())
    if a.size == b.size:
        return float(np.mean(np.abs(a - b)))
    q = np.union1d(np.arange(1, a.size + 1) / a.size, np.arange(1, b.size + 1) / b.size)
    widths = np.diff(np.concatenate([[0.0], q]))
    mid = q - 0.5 * widths
    ia = np.minimum((mid * a.size).astype(int), a.size - 1)
    ib = np.minimum((mid * b.size).astype(int), b.size - 1)
    return float(np.sum(widths * np.abs(a[ia] - b[ib])))


def _bootstrap_rng(seed, salt):
    key = np.array([int(seed), ROLES["bootstrap"] * (1 << 40) + int(salt)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def block_bootstrap_noise(x, block: int, n_boot: int = 200, rng=None) -> float:
    """RMS of ``W1(x*, x)`` over moving-block bootstrap resamples ``x*``."""
    x = np.asarray(x, dtype=float)
    n = x.size
    block = int(max(1, min(block, n)))
    rng = rng if rng is not None else np.random.default_rng(0)
    n_blocks = -(-n // block)
    offsets = np.arange(block)
    out = np.empty(n_boot)
    xs = np.sort(x)
    for k in range(n_boot):
        starts = rng.integers(0, n - block + 1, n_blocks)
        sample = x[(starts[:, None] + offsets).ravel()[:n]]
        out[k] = np.mean(np.abs(np.sort(sample) - xs))
    return float(np.sqrt(np.mean(out**2)))


def path_bootstrap_noise(x, n_paths: int, n_boot: int = 200, rng=None) -> float:
    """RMS of ``W1(x*, x)`` when whole paths are resampled with replacement.

    ``x`` holds ``n_paths`` equally long path segments one after another.
    Paths are independent replicates, so this needs no stationarity: a
    transient shared by all paths shifts the measure but not its noise.
    """
    x = np.asarray(x, dtype=float)
    paths = x.reshape(int(n_paths), -1)
    rng = rng if rng is not None else np.random.default_rng(0)
    xs = np.sort(x)
    out = np.empty(n_boot)
    for k in range(n_boot):
        pick = rng.integers(0, paths.shape[0], paths.shape[0])
        out[k] = np.mean(np.abs(np.sort(paths[pick].ravel()) - xs))
    return float(np.sqrt(np.mean(out**2)))


# ---------------------------------------------------------------------------
# empirical measures


@dataclass
class Histogram:
    edges: np.ndarray
    masses: np.ndarray

    @property
    def centers(self):
        return 0.5 * (self.edges[1:] + self.edges[:-1])


@dataclass
class EmpiricalMeasure:
    """Time-averaged law of observables over ``(burn_in, T]``.

    Every kept sample has weight ``1 / n_samples``; raw samples are kept so
    measures can be re-binned and compared.  ``tau_int`` holds autocorrelation
    times in time units.  A measure pooled from ``n_paths`` independent paths
    stores their samples one path after another.
    """

    histograms: Dict[str, Histogram]
    samples: Dict[str, np.ndarray]
    burn_in: float
    T: float
    sample_dt: float
    tau_int: Dict[str, float] = field(default_factory=dict)
    n_paths: int = 1

    @property
    def n_samples(self) -> int:
        return next(iter(self.samples.values())).size

    @property
    def weights(self) -> np.ndarray:
        return np.full(self.n_samples, 1.0 / self.n_samples)

    def mean(self, name):
        return float(np.mean(self.samples[name]))

    def var(self, name):
        return float(np.var(self.samples[name], ddof=1))

    def rebin(self, name, edges) -> Histogram:
        counts, _ = np.histogram(self.samples[name], bins=edges)
        # samples outside the edges are folded into the end bins
        x = self.samples[name]
        counts[0] += np.count_nonzero(x < edges[0])
        counts[-1] += np.count_nonzero(x > edges[-1])
        return Histogram(np.asarray(edges, float), counts / x.size)

    def tv_distance(self, other: "EmpiricalMeasure", name: str, bins: Optional[int] = None) -> float:
        """Total variation between the two histograms on shared edges."""
        n_bins = bins or (self.histograms[name].masses.size)
        joint = np.concatenate([self.samples[name], other.samples[name]])
        edges = _edges(joint, n_bins)
        p = self.rebin(name, edges).masses
        q = other.rebin(name, edges).masses
        return 0.5 * float(np.sum(np.abs(p - q)))


def _edges(x, bins):
    lo, hi = float(np.min(x)), float(np.max(x))
    if hi <= lo:
        lo, hi = lo - 0.5, hi + 0.5
    return np.linspace(lo, hi, int(bins) + 1)


def krylov_bogolyubov(
    traj: Trajectory,
    burn_in: Optional[float] = None,
    observables=None,
    bins: int = 20,
    edges: Optional[dict] = None,
    thin: int = 1,
) -> EmpiricalMeasure:
    """Histogram the observables averaged uniformly over ``(burn_in, T]``.

    Parameters
    ----------
    traj : Trajectory
        A single long path.
    burn_in : float, optional
        Discarded initial time; defaults to ``T / 10``.
    observables : sequence, optional
        Built-in names or :class:`Observable` objects (the latter need saved
        profiles).  Defaults to all built-ins.
    edges : dict, optional
        Fixed bin edges per observable name.
    thin : int
        Keep every ``thin``-th sample.

    Warns when ``T - burn_in`` is shorter than ten autocorrelation times of
    ``h_norm_sq``.
    """
    times = np.asarray(traj.times)
    T = float(times[-1])
    burn_in = T / 10.0 if burn_in is None else float(burn_in)
    if not burn_in < T:
        raise ConfigurationError("horizon T must exceed the burn-in time")
    keep = np.flatnonzero(times > burn_in)[::thin]
    if keep.size < 2:
        raise ConfigurationError("fewer than two samples after burn-in")
    sample_dt = float(times[1] - times[0]) * thin
    observables = list(OBSERVABLE_NAMES) if observables is None else list(observables)
    samples = {}
    for obs in observables:
        if isinstance(obs, str):
            samples[obs] = np.asarray(traj.observables[obs])[keep]
        else:
            if traj.profiles is None:
                raise ConfigurationError(f"observable {obs.name!r} needs saved profiles")
            samples[obs.name] = np.asarray(obs(traj.profiles[keep]), dtype=float)
    tau = {name: integrated_autocorr_time(x) * sample_dt for name, x in samples.items()}
    energy = samples.get("h_norm_sq")
    if energy is None:
        energy = np.asarray(traj.observables["h_norm_sq"])[keep]
        tau_e = integrated_autocorr_time(energy) * sample_dt
    else:
        tau_e = tau["h_norm_sq"]
    if T - burn_in < 10.0 * tau_e:
        warnings.warn(
            f"averaging window {T - burn_in:g} is shorter than 10 autocorrelation times ({tau_e:g})",
            RuntimeWarning,
            stacklevel=2,
        )
    hists = {}
    for name, x in samples.items():
        e = np.asarray(edges[name]) if edges and name in edges else _edges(x, bins)
        counts, e = np.histogram(x, bins=e)
        counts[0] += np.count_nonzero(x < e[0])
        counts[-1] += np.count_nonzero(x > e[-1])
        hists[name] = Histogram(e, counts / x.size)
    return EmpiricalMeasure(hists, samples, burn_in, T, sample_dt, tau)


def pool_measures(measures, bins: int = 20) -> EmpiricalMeasure:
    """Average measures from independent paths of equal length into one."""
    first = measures[0]
    samples = {name: np.concatenate([m.samples[name] for m in measures]) for name in first.samples}
    hists = {}
    for name, x in samples.items():
        counts, e = np.histogram(x, bins=_edges(x, bins))
        hists[name] = Histogram(e, counts / x.size)
    tau = {name: float(np.mean([m.tau_int[name] for m in measures])) for name in samples}
    n_paths = sum(m.n_paths for m in measures)
    return EmpiricalMeasure(hists, samples, first.burn_in, first.T, first.sample_dt, tau, n_paths)


def normality_pvalue(x, tau_samples: float = 1.0) -> float:
    """D'Agostino-Pearson p-value on the series thinned to roughly independent draws."""
    step = max(1, int(math.ceil(2.0 * tau_samples)))
    return float(stats.normaltest(np.asarray(x)[::step]).pvalue)


# ---------------------------------------------------------------------------
# uniqueness


@dataclass
class DistanceReport:
    """Per-observable W1 distance, bootstrap noise and their ratio."""

    distances: Dict[str, float]
    noise: Dict[str, float]
    measures: tuple
    factor: float = 2.0

    @property
    def ratios(self):
        return {k: self.distances[k] / self.noise[k] if self.noise[k] > 0 else math.inf for k in self.distances}

    @property
    def within_noise(self) -> bool:
        return all(self.distances[k] <= self.factor * self.noise[k] for k in self.distances)

    @property
    def exceeds_noise(self) -> bool:
        return any(self.distances[k] > self.factor * self.noise[k] for k in self.distances)


def compare_measures(m1: EmpiricalMeasure, m2: EmpiricalMeasure, n_boot: int = 200, seed: int = 0,
                     factor: float = 2.0) -> DistanceReport:
    """W1 between matching observables with bootstrap noise.

    The noise level is ``sqrt(n1^2 + n2^2)`` where ``n_k`` is the bootstrap RMS
    of ``W1`` for measure ``k``.  Measures pooled from several paths resample
    whole paths; single-path measures use blocks four autocorrelation times
    long.
    """
    dist, noise = {}, {}
    for j, name in enumerate(m1.samples):
        x, y = m1.samples[name], m2.samples[name]
        dist[name] = wasserstein_1(x, y)
        levels = []
        for k, (m, z) in enumerate(((m1, x), (m2, y))):
            rng = _bootstrap_rng(seed, 2 * j + k)
            if m.n_paths > 1:
                levels.append(path_bootstrap_noise(z, m.n_paths, n_boot, rng))
                continue
            block = int(math.ceil(4.0 * m.tau_int[name] / m.sample_dt))
            levels.append(block_bootstrap_noise(z, block, n_boot, rng))
        noise[name] = math.hypot(*levels)
    return DistanceReport(dist, noise, (m1, m2), factor)


def uniqueness_probe(f1, f2, cfg: SimConfig, observables=None, burn_in: Optional[float] = None,
                     bins: int = 20, n_boot: int = 200, factor: float = 2.0, n_paths: int = 1) -> DistanceReport:
    """Run long paths from each initial condition and compare the measures.

    The two initial conditions use independent noise (primary and secondary
    roles), ``n_paths`` paths each; with more than one path the time averages
    are pooled and the bootstrap resamples whole paths.  ``burn_in``
    defaults to ``T / 10``.
    """
    grid = cfg.grid
    f1 = _as_values(f1, grid)
    f2 = _as_values(f2, grid)
    P = int(n_paths)
    ids = np.concatenate([role_streams("primary", P, cfg.stream_id), role_streams("secondary", P, cfg.stream_id)])
    init = np.concatenate([np.broadcast_to(f1, (P, grid.n_interior)), np.broadcast_to(f2, (P, grid.n_interior))])
    res = simulate_ensemble(cfg, 2 * P, initial=init, stream_ids=ids)
    measures = []
    for side in range(2):
        per_path = []
        for p in range(side * P, (side + 1) * P):
            traj = Trajectory(
                times=res.times,
                profiles=None,
                observables={k: v[:, p] for k, v in res.observables.items()},
                exit_times={},
                seed=cfg.seed,
                stream_id=int(ids[p]),
                dt=cfg.dt,
                save_every=cfg.save_every,
                grid=grid,
                cfg=cfg,
            )
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                per_path.append(krylov_bogolyubov(traj, burn_in, observables, bins))
        measures.append(per_path[0] if P == 1 else pool_measures(per_path, bins))
    return compare_measures(measures[0], measures[1], n_boot, cfg.seed, factor)


# ---------------------------------------------------------------------------
# synchronous coupling


@dataclass
class CouplingCurve:
    """``|u1(t) - u2(t)|_H`` at the saved times, one column per noise path."""

    times: np.ndarray
    distance: np.ndarray


def synchronous_coupling(f1, f2, cfg: SimConfig, n_paths: int = 1) -> CouplingCurve:
    """Run ``f1`` and ``f2`` on the same noise for each of ``n_paths`` streams."""
    grid = cfg.grid
    f1 = _as_values(f1, grid)
    f2 = _as_values(f2, grid)
    base = cfg.stream_id + np.arange(n_paths, dtype=np.uint64)
    ids = np.repeat(base, 2)
    init = np.tile(np.stack([f1, f2]), (n_paths, 1))
    save = {}

    def record(k, t, u):
        if (k + 1) % cfg.save_every == 0 or k + 1 == cfg.n_steps:
            save[k + 1] = np.sqrt(grid.h_norm_sq(u[0::2] - u[1::2]))

    simulate_ensemble(cfg, 2 * n_paths, initial=init, stream_ids=ids, step_callback=record)
    steps = np.array([0] + sorted(save))
    dist = np.vstack([np.full(n_paths, math.sqrt(grid.h_norm_sq(f1 - f2)))] + [save[k] for k in steps[1:]])
    return CouplingCurve(steps * cfg.dt, dist)


# ---------------------------------------------------------------------------
# steering


@dataclass(frozen=True, eq=False)
class SteeringPlan:
    """Target ``a``, radius ``r``, switch time ``t1`` and the smoothed target ``a_tilde``.

    ``K`` is the H-norm threshold below which the control is fully on; it may
    be left ``None`` and filled from a pilot run by :func:`with_pilot_threshold`.
    """

    grid: SpatialGrid
    a_target: np.ndarray
    r: float
    t: float
    t1: float
    a_tilde: np.ndarray
    cutoff: int
    K: Optional[float] = None

    @classmethod
    def build(cls, grid: SpatialGrid, a, r: float = 1.0, t: float = 1.0, t1: Optional[float] = None,
              K: Optional[float] = None) -> "SteeringPlan":
        """Smooth ``a`` by dropping sine modes above ``n_cells / 4``.

        If that moves ``a`` by ``r / 6`` or more, the cut-off is raised
        step by step up to ``n_cells / 2``; past that the plan is rejected.
        """
        a = _as_values(a, grid)
        t1 = t - 0.01 * t if t1 is None else float(t1)
        if not (r > 0 and 0 < t1 < t):
            raise ConfigurationError("steering needs r > 0 and 0 < t1 < t")
        kernel = GreenKernel(grid.n_interior, grid)
        coeffs = kernel.project(a)
        for cutoff in range(max(1, grid.n_cells // 4), grid.n_cells // 2 + 1):
            a_tilde = kernel.synthesize(np.where(np.arange(1, coeffs.size + 1) <= cutoff, coeffs, 0.0))
            if math.sqrt(grid.h_norm_sq(a - a_tilde)) < r / 6.0:
                return cls(grid, a, float(r), float(t), t1, a_tilde, cutoff, None if K is None else float(K))
        raise ConfigurationError("target is too rough: no smoothing within r/6 keeps modes <= n_cells/2")

    @property
    def kernel(self) -> GreenKernel:
        return GreenKernel(self.grid.n_interior, self.grid)

    @property
    def A_a_tilde(self) -> np.ndarray:
        return self.kernel.laplacian(self.a_tilde)

    def with_K(self, K: float) -> "SteeringPlan":
        return replace(self, K=float(K))


def control_blend(norm, K):
    """1 below ``K``, 0 above ``2K``, linear in between."""
    return np.clip((2.0 * K - np.asarray(norm, dtype=float)) / K, 0.0, 1.0)


def control_drift(xi, s: float, plan: SteeringPlan, kernel: Optional[GreenKernel] = None) -> np.ndarray:
    """Control ``(1/(t - t1)) G_{s - t1}(a_tilde - xi) - A a_tilde``, faded out for large ``xi``.

    ``xi`` is the state at the switch time, shape ``(n,)`` or ``(P, n)``.
    The result is multiplied by :func:`control_blend` of ``|xi|_H``.
    """
    if plan.K is None:
        raise ConfigurationError("steering plan has no threshold K")
    if s < plan.t1:
        raise DomainError("control drift is defined for s >= t1 only")
    kernel = kernel or plan.kernel
    grid = plan.grid
    xi = np.asarray(xi, dtype=float)
    diff = kernel.semigroup(plan.a_tilde - xi, s - plan.t1, grid) / (plan.t - plan.t1)
    blend = control_blend(np.sqrt(grid.h_norm_sq(xi)), plan.K)
    return np.asarray(blend)[..., None] * (diff - kernel.laplacian(plan.a_tilde, grid))


def free_coefficients(coeffs: CoefficientSet, include_b: bool) -> CoefficientSet:
    return coeffs if include_b else replace(coeffs, b=Constant(0.0))


def pilot_threshold(plan: SteeringPlan, cfg: SimConfig, n_pilot: int = 200, include_b: bool = False) -> float:
    """``2 sqrt(E |Z(t1)|_H^2)`` estimated on pilot streams."""
    run = cfg.replace(T=plan.t1, save_every=max(1, int(round(plan.t1 / cfg.dt))), drift_hook=None)
    res = simulate_ensemble(run, n_pilot, stream_ids=role_streams("pilot", n_pilot, cfg.stream_id),
                            on_blowup="mask", coefficients=free_coefficients(run.effective_coefficients, include_b))
    return 2.0 * math.sqrt(float(np.mean(cfg.grid.h_norm_sq(res.final))))


def with_pilot_threshold(plan, cfg, n_pilot=200, include_b=False) -> SteeringPlan:
    return plan.with_K(pilot_threshold(plan, cfg, n_pilot, include_b))


def clopper_pearson_lower(k: int, n: int, level: float = 0.95) -> float:
    """One-sided lower confidence bound for a binomial proportion."""
    if k == 0:
        return 0.0
    return float(stats.beta.ppf(1.0 - level, k, n - k + 1))


def clopper_pearson_upper(k: int, n: int, level: float = 0.95) -> float:
    if k == n:
        return 1.0
    return float(stats.beta.ppf(level, k + 1, n - k))


@dataclass
class SteeringResult:
    """Terminal statistics of the steered ensemble.

    ``distances`` are ``|Z(t) - a|_H`` per path (for other radii);
    ``i1_error`` is ``|I1(t) - a_tilde|_H``; ``log_weights`` are the discrete
    Girsanov log-likelihood ratios of the truncated system against the
    steered one.
    """

    hit_fraction: float
    n_paths: int
    hits: int
    lower_95: float
    distances: np.ndarray
    xi_norm: np.ndarray
    regime_fraction: float
    i1_error: np.ndarray
    i2_norm: np.ndarray
    i3_norm: np.ndarray
    ib_norm: Optional[np.ndarray]
    p_i2: float
    p_i3: float
    chain_holds: bool
    log_weights: np.ndarray
    cost: np.ndarray
    K: float

    def hit_fraction_at(self, radius: float) -> float:
        return float(np.mean(self.distances < radius))

    @property
    def importance_estimate(self) -> float:
        """Girsanov-reweighted probability that the truncated system hits the ball."""
        top = self.log_weights.max()
        if not np.isfinite(top):
            return 0.0
        w = np.exp(self.log_weights - top)
        hit = self.distances < self._radius
        return float(np.mean(w * hit) * math.exp(top))

    @property
    def effective_sample_size(self) -> float:
        top = self.log_weights.max()
        if not np.isfinite(top):
            return 0.0
        w = np.exp(self.log_weights - top)
        return float(w.sum() ** 2 / np.sum(w * w))

    _radius: float = 0.5

    def summary(self) -> dict:
        return {
            "hit_fraction": self.hit_fraction,
            "hits": self.hits,
            "n_paths": self.n_paths,
            "hit_lower_95": self.lower_95,
            "K": self.K,
            "regime_fraction": self.regime_fraction,
            "p_I2_ge_r6": self.p_i2,
            "p_I3_ge_r6": self.p_i3,
            "max_I1_error": float(np.max(self.i1_error)) if self.i1_error.size else 0.0,
            "chain_holds": self.chain_holds,
            "mean_girsanov_cost": float(np.mean(self.cost)),
            "importance_estimate": self.importance_estimate,
            "effective_sample_size": self.effective_sample_size,
        }


def steering_experiment(plan: SteeringPlan, cfg: SimConfig, n_paths: int, include_b: bool = False,
                        stream_ids=None, n_pilot: int = 200) -> SteeringResult:
    """Free dynamics on ``[0, t1]``, then the control drift on ``(t1, t]``.

    The steered system ``Z`` carries ``g`` and ``sigma`` (and ``b`` only if
    ``include_b``), gated by the truncation level of ``cfg``.  On the
    controlled phase ``Z = I1 + I2 + I3 (+ Ib)`` is tracked term by term with
    the same implicit solve: ``I1`` starts from ``Z(t1)`` and receives the
    control, ``I2`` the flux, ``I3`` the noise and ``Ib`` the reaction term.
    """
    grid = cfg.grid
    if plan.grid != grid:
        raise ConfigurationError("steering plan and config use different grids")
    if plan.K is None:
        plan = with_pilot_threshold(plan, cfg, n_pilot, include_b)
    run = cfg.replace(T=plan.t, drift_hook=None)
    full = run.effective_coefficients
    coeffs = free_coefficients(full, include_b)
    stepper = Stepper(run, coeffs)
    if stream_ids is None:
        stream_ids = role_streams("primary", n_paths, cfg.stream_id)
    stream_ids = np.asarray(stream_ids, dtype=np.uint64)
    source = NoiseSource(grid, run.dt, run.seed, stream_ids)
    kernel = plan.kernel
    x = grid.interior_nodes
    dt, dx = run.dt, grid.dx
    n_total = int(round(plan.t / dt))
    k1 = int(round(plan.t1 / dt))
    Aa = kernel.laplacian(plan.a_tilde)

    Z = np.array(np.broadcast_to(run.initial_values(), (n_paths, grid.n_interior)))
    log_w = np.zeros(n_paths)
    cost = np.zeros(n_paths)
    xi = blend = c_xi = None
    I = None
    for k in range(n_total):
        s = k * dt
        dW = source.panel(k)
        r2, kappa = stepper.gate_values(Z)
        sig = stepper.sigma_values(s, Z)
        flux = kappa[:, None] * stepper.flux_divergence(s, Z) if coeffs.has_flux else 0.0
        react = kappa[:, None] * full.b(s, x, Z) if not full.b.is_zero else np.zeros_like(Z)
        if k == k1:
            xi = Z.copy()
            blend = control_blend(np.sqrt(grid.h_norm_sq(xi)), plan.K)[:, None]
            c_xi = kernel.project(plan.a_tilde - xi)
            I = {"1": xi.copy(), "2": np.zeros_like(Z), "3": np.zeros_like(Z)}
            if include_b:
                I["b"] = np.zeros_like(Z)
        control = 0.0
        if k >= k1:
            decay = np.exp(-kernel.eigenvalues * (s - plan.t1))
            control = blend * (kernel.synthesize(c_xi * decay) / (plan.t - plan.t1) - Aa)
        # Girsanov: drift of Z minus drift of the truncated system, in noise units
        delta = control + (react if include_b else 0.0) - react
        with np.errstate(divide="ignore", invalid="ignore"):
            # sigma = 0 with a nonzero drift change: mutually singular laws
            theta = np.where(delta == 0, 0.0, delta / sig)
            step_cost = 0.5 * dt * dx * np.sum(theta**2, axis=-1)
            cost += step_cost
            log_w += np.where(np.isfinite(step_cost), -np.sum(theta * dW, axis=-1) - step_cost, -np.inf)

        rhs = Z + dt * flux + sig * (dW / dx) + dt * control
        if include_b:
            rhs += dt * react
        Z = stepper.solve(rhs)
        if I is not None:
            I["1"] = stepper.solve(I["1"] + dt * control)
            I["2"] = stepper.solve(I["2"] + dt * flux)
            I["3"] = stepper.solve(I["3"] + sig * (dW / dx))
            if include_b:
                I["b"] = stepper.solve(I["b"] + dt * react)
    if xi is None:  # pragma: no cover - t1 < t guarantees a switch
        raise DomainError("switch time not reached")
    finite = np.all(np.isfinite(Z), axis=-1)
    dist = np.where(finite, np.sqrt(grid.h_norm_sq(Z - plan.a_target)), np.inf)
    radius = plan.r / 2.0
    hits = int(np.count_nonzero(dist < radius))
    norm = lambda v: np.sqrt(grid.h_norm_sq(v))
    xi_norm = norm(xi)
    regime = xi_norm <= plan.K
    p2 = float(np.mean(norm(I["2"]) >= plan.r / 6.0))
    p3 = float(np.mean(norm(I["3"]) >= plan.r / 6.0))
    regime_fraction = float(np.mean(regime))
    result = SteeringResult(
        hit_fraction=hits / n_paths,
        n_paths=n_paths,
        hits=hits,
        lower_95=clopper_pearson_lower(hits, n_paths),
        distances=dist,
        xi_norm=xi_norm,
        regime_fraction=regime_fraction,
        i1_error=norm(I["1"][regime] - plan.a_tilde),
        i2_norm=norm(I["2"]),
        i3_norm=norm(I["3"]),
        ib_norm=norm(I["b"]) if include_b else None,
        p_i2=p2,
        p_i3=p3,
        chain_holds=bool(regime_fraction >= 0.75 and p2 <= 0.125 and p3 <= 0.125),
        log_weights=log_w,
        cost=cost,
        K=float(plan.K),
    )
    result._radius = radius
    return result


# ---------------------------------------------------------------------------
# irreducibility


#: Girsanov costs above this many nats make the likelihood ratio underflow
#: double precision; the chain cannot then be trusted to transfer positivity.
MAX_GIRSANOV_COST = -math.log(np.finfo(float).tiny)


@dataclass
class TruncationGap:
    """Shared-noise comparison of the truncated and untruncated free dynamics."""

    sup_distance: np.ndarray
    blew_up: np.ndarray
    radius: float

    @property
    def deviations(self) -> int:
        return int(np.count_nonzero((self.sup_distance >= self.radius) | self.blew_up))

    @property
    def probability(self) -> float:
        return self.deviations / self.sup_distance.size

    @property
    def upper_95(self) -> float:
        return clopper_pearson_upper(self.deviations, self.sup_distance.size)


def truncation_gap(cfg_R: SimConfig, cfg_full: SimConfig, T: float, radius: float, n_paths: int) -> TruncationGap:
    """``sup_{t <= T} |u(t) - u^R(t)|_H`` on shared reference streams.

    A path on which the untruncated system leaves the floating-point range
    counts as a deviation.
    """
    if cfg_R.grid != cfg_full.grid or cfg_R.dt != cfg_full.dt:
        raise ConfigurationError("truncated and full configs must share grid and time step")
    grid = cfg_R.grid
    ids = role_streams("reference", n_paths, cfg_R.stream_id)
    source = NoiseSource(grid, cfg_R.dt, cfg_R.seed, ids)
    sR, sF = Stepper(cfg_R), Stepper(cfg_full)
    u = np.array(np.broadcast_to(cfg_R.initial_values(), (n_paths, grid.n_interior)))
    v = np.array(np.broadcast_to(cfg_full.initial_values(), (n_paths, grid.n_interior)))
    sup = np.sqrt(grid.h_norm_sq(u - v))
    dead = np.zeros(n_paths, dtype=bool)
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(int(round(T / cfg_R.dt))):
            t = k * cfg_R.dt
            dW = source.panel(k)
            u = sR.advance(t, u, dW)
            v_new = sF.advance(t, v, dW)
            bad = ~np.all(np.isfinite(v_new), axis=-1)
            dead |= bad
            v = np.where(dead[:, None], v, v_new)
            sup = np.maximum(sup, np.sqrt(grid.h_norm_sq(u - v)))
    return TruncationGap(sup, dead, float(radius))


@dataclass
class IrreducibilityReport:
    """Lower confidence bound for ``P(u(t) in B_H(a, r))`` and its status.

    ``status`` is ``"positive"`` when the bound is above zero and every
    precondition was verified, otherwise ``"inconclusive"`` with ``reasons``.
    """

    lower_bound: float
    status: str
    reasons: list
    steering: SteeringResult
    gap: TruncationGap

    def summary(self) -> dict:
        out = {
            "status": self.status,
            "lower_bound": self.lower_bound,
            "reasons": list(self.reasons),
            "truncation_gap_probability": self.gap.probability,
            "truncation_gap_upper_95": self.gap.upper_95,
        }
        out.update(self.steering.summary())
        return out


def irreducibility_report(plan: SteeringPlan, cfg_R: SimConfig, cfg_full: SimConfig, n_paths: int,
                          include_b: bool = False) -> IrreducibilityReport:
    """Combine the steering hit rate with the measured truncation gap.

    ``lower = LCB95(hit fraction of Z) - UCB95(P(sup |u - u^R|_H >= r/2))``.
    The status is ``"inconclusive"`` if that gap bound exceeds 1/4, if the
    mean Girsanov cost is beyond what double precision can represent, or if
    the lower bound is not positive.
    """
    if not math.isfinite(cfg_R.R):
        raise ConfigurationError("irreducibility report needs an active truncation level")
    steer = steering_experiment(plan, cfg_R, n_paths, include_b)
    gap = truncation_gap(cfg_R, cfg_full, plan.t, plan.r / 2.0, n_paths)
    lower = steer.lower_95 - gap.upper_95
    reasons = []
    if gap.upper_95 > 0.25:
        reasons.append(f"truncation gap bound {gap.upper_95:.3g} exceeds 1/4")
    mean_cost = float(np.mean(steer.cost))
    if not mean_cost <= MAX_GIRSANOV_COST:
        reasons.append(f"Girsanov cost {mean_cost:.3g} nats exceeds {MAX_GIRSANOV_COST:.4g}")
    if not lower > 0:
        reasons.append(f"lower bound {lower:.3g} is not positive")
    return IrreducibilityReport(float(lower), "inconclusive" if reasons else "positive", reasons, steer, gap)
