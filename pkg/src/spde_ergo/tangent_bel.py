"""Tangent process and Bismut-Elworthy-Li gradient estimates.

The tangent ``Y`` is the derivative of the discrete solution with respect to
its initial condition along a direction ``h``; it is advanced with the exact
linearization of the solver step on the same noise.  The gradient estimator is

    <D P_t psi(f), h>  ~  E[ psi(u(t)) M_t ] / t,   M_t = sum_steps sum_i Y_i / sigma_n(u_i) dW_i,

where ``sum_i (Y_i / sigma_i) dW_i = dx sum_i (Y_i / sigma_i) (dW_i / dx)`` is the
discrete H pairing of ``Sigma^{-1} Y`` with the noise density.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import BlowUpError, ConfigurationError, HypothesisViolation
from .grid_noise import NoiseIncrement, NoiseSource, row_sum, stream_ids as role_streams
from .solver import Field, SimConfig, Stepper, _as_values, simulate_ensemble

#: Mollification index used by tangent runs when the config leaves it unset.
DEFAULT_MOLLIFICATION = 64


@dataclass(frozen=True, eq=False)
class TangentField:
    """Tangent ``Y(t)`` along a base path (``base`` is the base state at ``t``)."""

    Y: np.ndarray
    t: float
    base: Optional[Field] = None

    @classmethod
    def start(cls, h, base: Field) -> "TangentField":
        return cls(np.array(_as_values(h, base.grid), dtype=float), base.t, base)


def tangent_config(cfg: SimConfig) -> SimConfig:
    """``cfg`` with the default mollification filled in."""
    if cfg.mollification is None:
        return cfg.replace(mollification=DEFAULT_MOLLIFICATION)
    return cfg


def tangent_step(Y: TangentField, base: Field, cfg: SimConfig, noise: NoiseIncrement) -> TangentField:
    """Advance ``Y`` over the step that takes ``base`` to the next state.

    ``noise`` must be the panel used by the base step.
    """
    stepper = Stepper(cfg)
    new = stepper.tangent_advance(base.t, base.values[None, :], Y.Y[None, :], noise.dW[None, :])[0]
    if not np.all(np.isfinite(new)):
        raise BlowUpError("non-finite tangent", base.t + cfg.dt, Y.Y, Y.t)
    return TangentField(new, base.t + cfg.dt, None)


@dataclass
class TangentRun:
    """Base states and tangents at the final time, per path and direction."""

    u: np.ndarray  # (P, n)
    Y: np.ndarray  # (P, D, n)
    t: float


def run_tangent(cfg: SimConfig, f, directions, stream_ids) -> TangentRun:
    """Integrate base paths from ``f`` with tangents along each direction."""
    grid = cfg.grid
    stepper = Stepper(cfg)
    stream_ids = np.asarray(stream_ids, dtype=np.uint64)
    source = NoiseSource(grid, cfg.dt, cfg.seed, stream_ids)
    P = stream_ids.size
    u = np.array(np.broadcast_to(_as_values(f, grid), (P, grid.n_interior)))
    H = np.atleast_2d(np.asarray([_as_values(h, grid) for h in directions]))
    Y = np.array(np.broadcast_to(H, (P,) + H.shape))
    for k in range(cfg.n_steps):
        t = k * cfg.dt
        dW = source.panel(k)
        extra = None if cfg.drift_hook is None else cfg.drift_hook(t, u)
        Y = stepper.tangent_advance(t, u[:, None, :], Y, dW[:, None, :])
        u = stepper.advance(t, u, dW, extra)
    if not (np.all(np.isfinite(u)) and np.all(np.isfinite(Y))):
        raise BlowUpError("non-finite base or tangent", cfg.T, None, None)
    return TangentRun(u=u, Y=Y, t=cfg.n_steps * cfg.dt)


def finite_difference_tangent(cfg: SimConfig, f, h, stream_ids, eps: float = 1e-5) -> np.ndarray:
    """``(u(t, f + eps h) - u(t, f - eps h)) / (2 eps)`` on shared noise."""
    f = _as_values(f, cfg.grid)
    h = _as_values(h, cfg.grid)
    stream_ids = np.asarray(stream_ids, dtype=np.uint64)
    n = stream_ids.size
    plus = simulate_ensemble(cfg, n, initial=f + eps * h, stream_ids=stream_ids)
    minus = simulate_ensemble(cfg, n, initial=f - eps * h, stream_ids=stream_ids)
    return (plus.final - minus.final) / (2.0 * eps)


# ---------------------------------------------------------------------------
# gradient estimates


@dataclass(frozen=True)
class BELEstimate:
    """Monte Carlo estimate of ``<D P_t psi(f), h>``."""

    value: float
    std_err: float
    n_samples: int

    @classmethod
    def from_samples(cls, samples) -> "BELEstimate":
        samples = np.asarray(samples, dtype=float)
        n = samples.size
        return cls(float(samples.mean()), float(samples.std(ddof=1) / math.sqrt(n)), n)


def _check_h4(coeffs):
    if coeffs.k1 is None or not coeffs.k1 > 0:
        raise ConfigurationError("(H4) required for BEL estimator: coefficients declare no lower noise bound k1")


def _snapshot_steps(times, dt):
    steps = np.array([int(round(t / dt)) for t in times])
    if np.any(steps < 1):
        raise ConfigurationError("gradient times must be at least one time step")
    return steps


def bel_table(
    psi: Callable,
    f,
    directions: Sequence,
    times: Sequence[float],
    cfg: SimConfig,
    n_samples: int,
    stream_ids=None,
    chunk: int = 2000,
):
    """BEL samples for several directions and times from one ensemble.

    Returns an array of shape ``(len(times), len(directions), n_samples)``
    holding ``psi(u(t)) M_t / t``; the run stops at ``max(times)``.
    """
    cfg = tangent_config(cfg)
    coeffs = cfg.effective_coefficients
    _check_h4(coeffs)
    floor = 0.5 * coeffs.k1
    grid = cfg.grid
    times = np.atleast_1d(np.asarray(times, dtype=float))
    steps = _snapshot_steps(times, cfg.dt)
    t_end = float(steps.max() * cfg.dt)
    run_cfg = cfg.replace(T=t_end)
    stepper = Stepper(run_cfg)
    if stream_ids is None:
        stream_ids = role_streams("primary", n_samples, cfg.stream_id)
    stream_ids = np.asarray(stream_ids, dtype=np.uint64)
    H = np.atleast_2d(np.asarray([_as_values(h, grid) for h in directions]))
    f = _as_values(f, grid)
    out = np.empty((times.size, H.shape[0], stream_ids.size))
    x = grid.interior_nodes

    for lo in range(0, stream_ids.size, chunk):
        ids = stream_ids[lo : lo + chunk]
        P = ids.size
        source = NoiseSource(grid, cfg.dt, cfg.seed, ids)
        u = np.array(np.broadcast_to(f, (P, grid.n_interior)))
        Y = np.array(np.broadcast_to(H, (P,) + H.shape))
        M = np.zeros((P, H.shape[0]))
        for k in range(int(steps.max())):
            t = k * cfg.dt
            dW = source.panel(k)
            sig = coeffs.sigma(t, x, u)
            if np.min(np.abs(sig)) < floor:
                raise HypothesisViolation("H4", "|sigma_n| fell below k1/2 along a path", {"t": t})
            M += row_sum(Y * (dW / sig)[:, None, :])
            extra = None if cfg.drift_hook is None else cfg.drift_hook(t, u)
            Y = stepper.tangent_advance(t, u[:, None, :], Y, dW[:, None, :])
            u = stepper.advance(t, u, dW, extra)
            for j in np.flatnonzero(steps == k + 1):
                if not np.all(np.isfinite(u)):
                    raise BlowUpError("non-finite state in gradient run", (k + 1) * cfg.dt)
                out[j, :, lo : lo + P] = (np.asarray(psi(u))[:, None] * M / times[j]).T
    return out


def bel_gradient(psi: Callable, f, h, t: float, cfg: SimConfig, n_samples: int, stream_ids=None) -> BELEstimate:
    """Estimate ``<D P_t psi(f), h>`` with the Bismut-Elworthy-Li weight.

    Parameters
    ----------
    psi : callable
        Bounded functional acting on state arrays ``(P, n_interior) -> (P,)``.
    f, h : Field or array
        Initial condition and direction.
    cfg : SimConfig
        Mollification defaults to 64 if unset; the coefficients must declare
        ``k1 > 0``.
    """
    samples = bel_table(psi, f, [h], [t], cfg, n_samples, stream_ids)[0, 0]
    return BELEstimate.from_samples(samples)


def expectation(psi: Callable, f, t: float, cfg: SimConfig, stream_ids):
    """Samples of ``psi(u(t, f))`` over the given streams."""
    stream_ids = np.asarray(stream_ids, dtype=np.uint64)
    res = simulate_ensemble(cfg.replace(T=t, save_every=max(1, int(round(t / cfg.dt)))), stream_ids.size,
                            initial=f, stream_ids=stream_ids)
    return np.asarray(psi(res.final), dtype=float)


def fd_gradient(psi: Callable, f, h, t: float, cfg: SimConfig, n_samples: int, eps: float = 1e-2,
                stream_ids=None) -> BELEstimate:
    """Central difference of ``P_t psi`` in direction ``h`` with common random numbers."""
    cfg = tangent_config(cfg)
    grid = cfg.grid
    if stream_ids is None:
        stream_ids = role_streams("primary", n_samples, cfg.stream_id)
    f = _as_values(f, grid)
    h = _as_values(h, grid)
    plus = expectation(psi, f + eps * h, t, cfg, stream_ids)
    minus = expectation(psi, f - eps * h, t, cfg, stream_ids)
    return BELEstimate.from_samples((plus - minus) / (2.0 * eps))


@dataclass
class GradientScaling:
    """Sup over directions of ``|BEL estimate|`` at several times and its power-law fit."""

    times: np.ndarray
    sup_gradient: np.ndarray
    std_err: np.ndarray
    exponent: float
    constant: float


def gradient_scaling(psi, f, directions, times, cfg, n_samples, stream_ids=None) -> GradientScaling:
    """Fit ``sup_h |<D P_t psi(f), h>| ~ c t^p`` over ``times`` (log-log least squares)."""
    table = bel_table(psi, f, directions, times, cfg, n_samples, stream_ids)
    means = table.mean(axis=-1)
    errs = table.std(axis=-1, ddof=1) / math.sqrt(table.shape[-1])
    best = np.argmax(np.abs(means), axis=1)
    sup = np.abs(means[np.arange(len(times)), best])
    err = errs[np.arange(len(times)), best]
    slope, intercept = np.polyfit(np.log(times), np.log(sup), 1)
    return GradientScaling(np.asarray(times, float), sup, err, float(slope), float(math.exp(intercept)))


@dataclass(frozen=True)
class StrongFellerProbe:
    """``|P_t psi(f1) - P_t psi(f2)|`` with its standard error and the modulus bound."""

    difference: float
    bound: float
    std_err: float

    def __iter__(self):
        return iter((self.difference, self.bound))


def strong_feller_probe(psi, f1, f2, t, cfg, n_samples, constant: Optional[float] = None,
                        psi_sup: Optional[float] = None) -> StrongFellerProbe:
    """Compare ``P_t psi`` at two initial conditions against ``C / sqrt(t) |psi| |f1 - f2|_H``.

    The two expectations use independent noise (primary and secondary
    stream roles).  Without ``constant``, ``C`` is fitted from BEL estimates at
    ``f1`` along the first three sine modes and along ``f2 - f1``.
    """
    cfg = tangent_config(cfg)
    grid = cfg.grid
    f1 = _as_values(f1, grid)
    f2 = _as_values(f2, grid)
    a = expectation(psi, f1, t, cfg, role_streams("primary", n_samples, cfg.stream_id))
    b = expectation(psi, f2, t, cfg, role_streams("secondary", n_samples, cfg.stream_id))
    diff = abs(a.mean() - b.mean())
    err = math.sqrt(a.var(ddof=1) / a.size + b.var(ddof=1) / b.size)
    sup = psi_sup if psi_sup is not None else getattr(psi, "sup", None)
    if sup is None or not math.isfinite(sup):
        raise ConfigurationError("strong Feller probe needs a bounded functional")
    dist = math.sqrt(grid.h_norm_sq(f1 - f2))
    if constant is None:
        dirs = [grid.mode(k) for k in (1, 2, 3)]
        if dist > 0:
            dirs.append((f2 - f1) / dist)
        table = bel_table(psi, f1, dirs, [t], cfg, n_samples)[0]
        est = np.abs(table.mean(axis=-1)) + 3.0 * table.std(axis=-1, ddof=1) / math.sqrt(table.shape[-1])
        constant = float(est.max() * math.sqrt(t) / sup)
    return StrongFellerProbe(float(diff), float(constant / math.sqrt(t) * sup * dist), float(err))
