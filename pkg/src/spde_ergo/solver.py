"""Semi-implicit Euler-Maruyama integrator for the (truncated) semilinear SPDE.

One step reads

    u' = (I - dt A_h)^{-1} [u + dt k b(u) + dt k D F(u) + sigma(u) dW / dx + dt h(t, u)]

with ``A_h`` the Dirichlet second difference, ``k = kappa_R(|u|_H^2)`` taken
at the start of the step, ``D F`` the divergence of face fluxes of ``g`` and
``h`` an optional external drift.  Ensembles are stepped together as arrays
of shape ``(n_paths, n_interior)``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.linalg import lapack

from .coefficients import CoefficientSet, TruncationGate, make_preset, mollify
from .errors import BlowUpError, ConfigurationError
from .grid_noise import NoiseIncrement, NoiseSource, SpatialGrid, row_sum
from .heat_kernel import (
    GreenKernel,
    KernelKind,
    apply_J,
    stochastic_convolution,
)

# 3-point Gauss-Legendre rule on [0, 1] for the face flux average
_GL_THETA = 0.5 + 0.5 * np.array([-math.sqrt(3.0 / 5.0), 0.0, math.sqrt(3.0 / 5.0)])
_GL_W = np.array([5.0, 8.0, 5.0]) / 18.0


@dataclass(frozen=True, eq=False)
class Field:
    """Spatial profile on the interior nodes at time ``t``."""

    t: float
    values: np.ndarray
    grid: SpatialGrid

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.shape[-1] != self.grid.n_interior:
            raise ConfigurationError("field values do not match the grid")
        object.__setattr__(self, "values", vals)

    @property
    def h_norm_sq(self) -> float:
        return float(self.grid.h_norm_sq(self.values))

    @property
    def h_norm(self) -> float:
        return math.sqrt(self.h_norm_sq)

    def full_profile(self) -> np.ndarray:
        return self.grid.full_profile(self.values)

    @classmethod
    def from_modes(cls, grid: SpatialGrid, amplitudes, t=0.0) -> "Field":
        return cls(t, grid.from_modes(amplitudes), grid)


def _as_values(obj, grid):
    if obj is None:
        return np.zeros(grid.n_interior)
    if isinstance(obj, Field):
        return obj.values
    vals = np.asarray(obj, dtype=float)
    if vals.shape[-1] != grid.n_interior:
        raise ConfigurationError("initial condition does not match the grid")
    return vals


@dataclass(frozen=True, eq=False)
class SimConfig:
    """Everything that determines a run.

    ``R = inf`` disables truncation; ``mollification = None`` uses the raw
    coefficients.  ``drift_hook(t, u)`` receives the ensemble state of shape
    ``(n_paths, n_interior)`` and returns an extra drift of the same shape.
    ``exit_levels`` are the levels ``R`` whose exit times are recorded.
    """

    n_cells: int = 64
    dt: float = 1e-4
    T: float = 1.0
    coefficients: CoefficientSet = None
    R: float = math.inf
    mollification: Optional[int] = None
    seed: int = 0
    stream_id: int = 0
    save_every: int = 1
    drift_hook: Optional[Callable] = None
    initial: object = None
    exit_levels: tuple = ()
    c_cfl: float = 0.25

    def __post_init__(self):
        if self.coefficients is None:
            object.__setattr__(self, "coefficients", make_preset("burgers"))
        errors = self.problems()
        if errors:
            raise ConfigurationError("; ".join(errors))
        if self.coefficients.has_flux and self.dt > self.c_cfl * self.grid.dx**2:
            # diffusion is implicit, but the flux is not
            warnings.warn(
                f"dt={self.dt:g} exceeds c_cfl*dx^2={self.c_cfl * self.grid.dx**2:g}; "
                "the explicit flux may be under-resolved",
                RuntimeWarning,
                stacklevel=3,
            )

    def problems(self):
        out = []
        if not (isinstance(self.n_cells, (int, np.integer)) and self.n_cells >= 4):
            out.append("grid.n_cells must be an integer >= 4")
        if not self.dt > 0:
            out.append("time.dt must be positive")
        elif not self.T >= self.dt:
            out.append("time.T must be at least time.dt")
        if not self.R > 0:
            out.append("truncation.R must be positive")
        if self.mollification is not None and self.mollification < 1:
            out.append("coefficients.mollification must be >= 1")
        if self.save_every < 1:
            out.append("time.save_every must be >= 1")
        return out

    def replace(self, **changes) -> "SimConfig":
        return replace(self, **changes)

    @cached_property
    def grid(self) -> SpatialGrid:
        return SpatialGrid(int(self.n_cells))

    @cached_property
    def gate(self) -> TruncationGate:
        return TruncationGate(self.R)

    @cached_property
    def effective_coefficients(self) -> CoefficientSet:
        if self.mollification is None:
            return self.coefficients
        return mollify(self.coefficients, self.mollification)

    @property
    def n_steps(self) -> int:
        return int(round(self.T / self.dt))

    def initial_values(self) -> np.ndarray:
        return _as_values(self.initial, self.grid)


# ---------------------------------------------------------------------------
# stepping


class Stepper:
    """Precomputed operators for one configuration; steps whole ensembles."""

    def __init__(self, cfg: SimConfig, coefficients: Optional[CoefficientSet] = None):
        self.cfg = cfg
        self.grid = cfg.grid
        self.dt = float(cfg.dt)
        self.coeffs = coefficients if coefficients is not None else cfg.effective_coefficients
        self.gate = cfg.gate
        n = self.grid.n_interior
        c = self.dt / self.grid.dx**2
        lu = lapack.dgttrf(np.full(n - 1, -c), np.full(n, 1.0 + 2.0 * c), np.full(n - 1, -c))
        if lu[-1] != 0:  # pragma: no cover - M is strictly diagonally dominant
            raise np.linalg.LinAlgError("tridiagonal factorization failed")
        self._lu = lu[:-1]
        self.x = self.grid.interior_nodes
        self.x_face = (np.arange(self.grid.n_cells) + 0.5) * self.grid.dx
        self._use_b = not self.coeffs.b.is_zero
        self._use_g = self.coeffs.has_flux
        self._additive = self.coeffs.sigma.is_constant

    # linear algebra -----------------------------------------------------
    def solve(self, rhs):
        """Apply ``(I - dt A_h)^{-1}`` along the last axis."""
        rhs = np.asarray(rhs, dtype=float)
        flat = rhs.reshape(-1, rhs.shape[-1])
        out, info = lapack.dgttrs(*self._lu, flat.T)
        return out.T.reshape(rhs.shape)

    # pieces of the drift -------------------------------------------------
    def gate_values(self, u):
        r = self.grid.h_norm_sq(u)
        return r, self.gate.value(r)

    def _face_states(self, u):
        full = self.grid.full_profile(u)
        return full[..., :-1], full[..., 1:]

    def flux_divergence(self, t, u):
        """``(F_{i+1/2} - F_{i-1/2}) / dx`` with ``F(a, b) = int_0^1 g(a + s (b - a)) ds``.

        The face average makes the scheme conserve ``|u|_H^2`` exactly for
        any ``g`` that depends on ``r`` only.
        """
        a, b = self._face_states(u)
        g = self.coeffs.g
        F = np.zeros(a.shape)
        for th, w in zip(_GL_THETA, _GL_W):
            F += w * g(t, self.x_face, a + th * (b - a))
        return np.diff(F, axis=-1) / self.grid.dx

    def flux_divergence_tangent(self, t, u, Y):
        """Linearization of :meth:`flux_divergence` at ``u`` in direction ``Y``."""
        a, b = self._face_states(u)
        ya, yb = self._face_states(Y)
        g = self.coeffs.g
        dF = np.zeros(np.broadcast(a, ya).shape)
        for th, w in zip(_GL_THETA, _GL_W):
            gp = g.deriv(t, self.x_face, a + th * (b - a))
            dF += w * gp * ((1.0 - th) * ya + th * yb)
        return np.diff(dF, axis=-1) / self.grid.dx

    def sigma_values(self, t, u):
        return self.coeffs.sigma(t, self.x, u)

    def drift(self, t, u, kappa, include_b=True):
        """Explicit drift ``k b(u) + k D F(u)`` (without any external hook)."""
        out = np.zeros(u.shape)
        k = np.asarray(kappa)[..., None]
        if include_b and self._use_b:
            out += k * self.coeffs.b(t, self.x, u)
        if self._use_g:
            out += k * self.flux_divergence(t, u)
        return out

    def advance(self, t, u, dW, extra_drift=None, include_b=True):
        """One step for an ensemble ``u`` of shape ``(P, n)`` with increments ``dW``."""
        _, kappa = self.gate_values(u)
        rhs = u + self.dt * self.drift(t, u, kappa, include_b)
        rhs += self.sigma_values(t, u) * (dW / self.grid.dx)
        if extra_drift is not None:
            rhs += self.dt * extra_drift
        return self.solve(rhs)

    def tangent_advance(self, t, u, Y, dW):
        """Linearized step for tangent ``Y`` along the base states ``u``.

        Includes both derivative-of-gate terms ``2 k'(|u|^2) (u, Y)_H``
        multiplying ``b(u)`` and ``D F(u)``.
        """
        r, kappa = self.gate_values(u)
        k = kappa[..., None]
        dk = (2.0 * self.gate.derivative(r) * self.grid.inner(u, Y))[..., None]
        rhs = np.array(Y, dtype=float, copy=True)
        if self._use_b:
            rhs += self.dt * (k * self.coeffs.b.deriv(t, self.x, u) * Y)
            if self.gate.active:
                rhs += self.dt * dk * self.coeffs.b(t, self.x, u)
        if self._use_g:
            rhs += self.dt * k * self.flux_divergence_tangent(t, u, Y)
            if self.gate.active:
                rhs += self.dt * dk * self.flux_divergence(t, u)
        if not self._additive:
            rhs += self.coeffs.sigma.deriv(t, self.x, u) * Y * (dW / self.grid.dx)
        return self.solve(rhs)


def step(state: Field, cfg: SimConfig, noise: NoiseIncrement, gate_value: Optional[float] = None) -> Field:
    """Advance a single field by one step.

    ``gate_value`` overrides ``kappa_R(|u|_H^2)``; by default it is computed
    from ``state``.  Raises :class:`BlowUpError` if the result is not finite.
    """
    if noise.grid != state.grid or noise.grid != cfg.grid:
        raise ConfigurationError("noise panel does not match the grid")
    if not math.isclose(noise.dt, cfg.dt, rel_tol=1e-12):
        raise ConfigurationError("noise panel does not match the time step")
    stepper = _stepper_for(cfg)
    u = state.values[None, :]
    if gate_value is None:
        _, kappa = stepper.gate_values(u)
    else:
        kappa = np.array([float(gate_value)])
    rhs = u + stepper.dt * stepper.drift(state.t, u, kappa)
    rhs += stepper.sigma_values(state.t, u) * noise.density
    if cfg.drift_hook is not None:
        rhs += stepper.dt * np.asarray(cfg.drift_hook(state.t, u))
    new = stepper.solve(rhs)[0]
    t_new = state.t + cfg.dt
    if not np.all(np.isfinite(new)):
        raise BlowUpError("non-finite state", t_new, state.values, state.t)
    return Field(t_new, new, state.grid)


_STEPPERS = {}


def _stepper_for(cfg):
    key = id(cfg)
    entry = _STEPPERS.get(key)
    if entry is None or entry[0] is not cfg:
        if len(_STEPPERS) > 16:
            _STEPPERS.clear()
        entry = (cfg, Stepper(cfg))
        _STEPPERS[key] = entry
    return entry[1]


# ---------------------------------------------------------------------------
# observables


def observable_functions(grid: SpatialGrid, x0: float = 0.5):
    """Built-in observables as functions of state arrays ``(..., n_interior)``."""
    e1 = grid.mode(1)
    i0 = int(np.clip(round(x0 * grid.n_cells), 1, grid.n_interior)) - 1
    return {
        "h_norm_sq": lambda u: grid.h_norm_sq(u),
        # fixed-order row sums: results must not depend on the batch size
        "mode_1": lambda u: grid.dx * row_sum(np.asarray(u) * e1),
        "point": lambda u: np.asarray(u)[..., i0],
        "sup_abs": lambda u: np.max(np.abs(u), axis=-1),
    }


OBSERVABLE_NAMES = ("h_norm_sq", "mode_1", "point", "sup_abs")


# ---------------------------------------------------------------------------
# trajectories


@dataclass
class Trajectory:
    """Saved samples of one path.

    ``exit_times[R]`` is the first step time with ``|u|_H^2 >= R`` (checked
    every step, including the initial state) or ``inf``.
    """

    times: np.ndarray
    profiles: Optional[np.ndarray]
    observables: dict
    exit_times: dict
    seed: int
    stream_id: int
    dt: float
    save_every: int
    grid: SpatialGrid
    cfg: SimConfig = None
    start_step: int = 0

    @property
    def samples(self):
        if self.profiles is None:
            return []
        return [Field(float(t), u, self.grid) for t, u in zip(self.times, self.profiles)]

    @property
    def final(self) -> Field:
        return Field(float(self.times[-1]), self.profiles[-1], self.grid)


@dataclass
class EnsembleResult:
    """Output of :func:`simulate_ensemble`; arrays are indexed ``[sample, path]``.

    Paths that blew up (``on_blowup="mask"``) are frozen at their last finite
    state and flagged in ``blew_up`` with the failure time in ``t_fail``.
    """

    times: np.ndarray
    observables: dict
    exit_times: dict
    final: np.ndarray
    stream_ids: np.ndarray
    blew_up: np.ndarray
    t_fail: np.ndarray
    profiles: Optional[np.ndarray] = None
    sup_h_norm_sq: Optional[np.ndarray] = None


def simulate_ensemble(
    cfg: SimConfig,
    n_paths: int,
    initial=None,
    stream_ids=None,
    on_blowup: str = "raise",
    keep_profiles: bool = False,
    coefficients: Optional[CoefficientSet] = None,
    step_callback: Optional[Callable] = None,
) -> EnsembleResult:
    """Integrate ``n_paths`` paths of ``cfg`` side by side.

    Parameters
    ----------
    initial : array, optional
        ``(n_interior,)`` shared or ``(n_paths, n_interior)`` per-path start;
        defaults to ``cfg.initial``.
    stream_ids : array of int, optional
        Noise stream of every path; defaults to ``cfg.stream_id + arange``.
        Repeating an id shares the noise between paths.
    on_blowup : {"raise", "mask"}
    step_callback : callable, optional
        Called as ``step_callback(k, t, u)`` after every step with the new state.
    """
    grid = cfg.grid
    if stream_ids is None:
        stream_ids = cfg.stream_id + np.arange(n_paths, dtype=np.uint64)
    stream_ids = np.asarray(stream_ids, dtype=np.uint64)
    if stream_ids.size != n_paths:
        raise ConfigurationError("need one stream id per path")
    stepper = Stepper(cfg, coefficients)
    source = NoiseSource(grid, cfg.dt, cfg.seed, stream_ids)
    u0 = _as_values(cfg.initial if initial is None else initial, grid)
    u = np.array(np.broadcast_to(u0, (n_paths, grid.n_interior)), dtype=float)

    obs_fns = observable_functions(grid)
    n_steps = cfg.n_steps
    save_idx = list(range(0, n_steps + 1, cfg.save_every))
    if save_idx[-1] != n_steps:
        save_idx.append(n_steps)
    times = np.array(save_idx) * cfg.dt
    obs = {name: np.empty((len(save_idx), n_paths)) for name in obs_fns}
    profiles = np.empty((len(save_idx), n_paths, grid.n_interior)) if keep_profiles else None
    levels = tuple(float(R) for R in cfg.exit_levels)
    exits = {R: np.full(n_paths, np.inf) for R in levels}
    blew_up = np.zeros(n_paths, dtype=bool)
    t_fail = np.full(n_paths, np.inf)

    def record(slot, u):
        with np.errstate(over="ignore"):
            for name, fn in obs_fns.items():
                obs[name][slot] = fn(u)
        if profiles is not None:
            profiles[slot] = u

    def check_exits(t, r):
        for R in levels:
            hit = (r >= R) & np.isinf(exits[R])
            exits[R][hit] = t

    r = grid.h_norm_sq(u)
    sup_r = r.copy()
    check_exits(0.0, r)
    record(0, u)
    slot = 1
    hook = cfg.drift_hook
    for k in range(n_steps):
        t = k * cfg.dt
        extra = None if hook is None else hook(t, u)
        # overflow is detected below and reported as a blow-up
        with np.errstate(over="ignore", invalid="ignore"):
            new = stepper.advance(t, u, source.panel(k), extra)
        bad = ~np.all(np.isfinite(new), axis=-1)
        if bad.any():
            fresh = bad & ~blew_up
            if on_blowup == "raise":
                i = int(np.flatnonzero(fresh)[0])
                raise BlowUpError(f"path {i} left the floating-point range", (k + 1) * cfg.dt, u[i].copy(), t)
            t_fail[fresh] = (k + 1) * cfg.dt
            blew_up |= bad
            new[bad] = u[bad]
        u = new
        with np.errstate(over="ignore"):
            r = grid.h_norm_sq(u)
        np.maximum(sup_r, np.where(blew_up, np.inf, r), out=sup_r)
        check_exits((k + 1) * cfg.dt, np.where(blew_up, np.inf, r))
        if step_callback is not None:
            step_callback(k, (k + 1) * cfg.dt, u)
        if slot < len(save_idx) and save_idx[slot] == k + 1:
            record(slot, u)
            slot += 1
    return EnsembleResult(
        times=times,
        observables=obs,
        exit_times=exits,
        final=u,
        stream_ids=stream_ids,
        blew_up=blew_up,
        t_fail=t_fail,
        profiles=profiles,
        sup_h_norm_sq=sup_r,
    )


def simulate(cfg: SimConfig) -> Trajectory:
    """Single path ``(cfg.seed, cfg.stream_id)`` over ``[0, cfg.T]``.

    Raises :class:`BlowUpError` with the failure time if the state leaves
    the floating-point range.
    """
    res = simulate_ensemble(cfg, 1, stream_ids=[cfg.stream_id], keep_profiles=True)
    return Trajectory(
        times=res.times,
        profiles=res.profiles[:, 0, :],
        observables={k: v[:, 0] for k, v in res.observables.items()},
        exit_times={R: float(v[0]) for R, v in res.exit_times.items()},
        seed=cfg.seed,
        stream_id=cfg.stream_id,
        dt=cfg.dt,
        save_every=cfg.save_every,
        grid=cfg.grid,
        cfg=cfg,
    )


def exit_time(traj: Trajectory, R: float) -> float:
    """``tau_R``: first sample time with ``|u|_H^2 >= R``, ``inf`` if never."""
    R = float(R)
    if R in traj.exit_times:
        return traj.exit_times[R]
    if math.isinf(R):
        return math.inf
    hits = np.flatnonzero(traj.observables["h_norm_sq"] >= R)
    return float(traj.times[hits[0]]) if hits.size else math.inf


# ---------------------------------------------------------------------------
# diagnostics


@dataclass
class EnergyRecord:
    """Per-sample ``|u|_H^2``, ``|v|_H^2`` with ``v = u - eta``, and ``eta*``."""

    times: np.ndarray
    u_norm_sq: np.ndarray
    v_norm_sq: np.ndarray
    eta_star: np.ndarray

    def triangle_holds(self, grid: SpatialGrid, eta=None) -> bool:
        # |u|^2 <= 2|v|^2 + 2|eta|^2 and |eta|_H <= sup|eta| on [0, 1]
        bound = 2.0 * self.v_norm_sq + 2.0 * self.eta_star**2
        return bool(np.all(self.u_norm_sq <= bound * (1 + 1e-12) + 1e-300))


def energy_record(traj: Trajectory, kernel: Optional[GreenKernel] = None) -> EnergyRecord:
    """Energy diagnostics along a fully saved trajectory."""
    kernel = kernel or GreenKernel(traj.grid.n_interior, traj.grid)
    sigma = traj.cfg.effective_coefficients.sigma
    sc = stochastic_convolution(traj, sigma, kernel)
    grid = traj.grid
    v = traj.profiles - sc.eta
    return EnergyRecord(
        times=np.asarray(traj.times),
        u_norm_sq=grid.h_norm_sq(traj.profiles),
        v_norm_sq=grid.h_norm_sq(v),
        eta_star=sc.eta_star,
    )


def mild_residual(traj: Trajectory, kernel: Optional[GreenKernel] = None, n_times: int = 10) -> float:
    """Largest H-norm gap between ``u(t)`` and the mild (Duhamel) form.

    The right-hand side ``G_t f + J_G(k b(u)) - J_dG(k g(u)) + eta`` is built
    from the saved path: drift histories are piecewise constant on the steps
    (left end point), ``J`` is integrated exactly in time mode by mode, and
    ``eta`` replays the noise stream.  Evaluated at ``n_times`` evenly spaced
    sample times.  The kernel should keep all ``n_cells - 1`` modes.
    """
    grid = traj.grid
    if traj.save_every != 1 or traj.profiles is None:
        raise ConfigurationError("mild residual needs every step of the trajectory")
    kernel = kernel or GreenKernel(grid.n_interior, grid)
    if kernel.grid is not None and kernel.grid != grid:
        raise ConfigurationError("trajectory and kernel use different grids")
    cfg = traj.cfg
    coeffs = cfg.effective_coefficients
    gate = cfg.gate
    times = np.asarray(traj.times)
    hist = traj.profiles[:-1]
    t_hist = times[:-1]
    kappa = gate.value(grid.h_norm_sq(hist))[:, None]
    x = grid.interior_nodes
    b_hist = kappa * coeffs.b(t_hist[:, None], x, hist) if not coeffs.b.is_zero else None
    g_hist = None
    if coeffs.has_flux:
        full = grid.full_profile(hist)
        g_hist = kappa * coeffs.g(t_hist[:, None], grid.nodes, full)
    if coeffs.sigma.is_zero:
        eta = np.zeros_like(traj.profiles)
    else:
        eta = stochastic_convolution(traj, coeffs.sigma, kernel).eta
    f = traj.profiles[0]

    picks = np.unique(np.linspace(1, len(times) - 1, n_times).round().astype(int))
    worst = 0.0
    for j in picks:
        t = float(times[j])
        rhs = kernel.semigroup(f, t, grid) + eta[j]
        if b_hist is not None:
            rhs += apply_J(b_hist, KernelKind.GAUSS, t, kernel, times=times, grid=grid)
        if g_hist is not None:
            rhs -= apply_J(g_hist, KernelKind.GAUSS_DY, t, kernel, times=times, grid=grid)
        worst = max(worst, math.sqrt(grid.h_norm_sq(traj.profiles[j] - rhs)))
    return worst
