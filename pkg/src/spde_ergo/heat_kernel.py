"""Dirichlet heat kernel on [0, 1] and the operators built on it.

The kernel is the truncated eigen-expansion

    G_t(x, y) = sum_{n <= N} e_n(x) e_n(y) exp(-lambda_n t),
    e_n(x) = sqrt(2) sin(n pi x),  lambda_n = n^2 pi^2.

Time integrals against the kernel are done mode by mode in closed form
(product integration), which keeps the (t - s)^{-3/4} type singularity of
the convolution operators out of the quadrature error.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import ConfigurationError, DomainError
from .grid_noise import NoiseSource, SpatialGrid


class KernelKind(enum.Enum):
    """Which kernel the convolution operator ``J`` integrates against."""

    GAUSS = "gauss"  # H(s, t; x, y) = G_{t-s}(x, y)
    GAUSS_DY = "gauss_dy"  # H(s, t; x, y) = d/dy G_{t-s}(x, y)


@dataclass(frozen=True)
class GreenKernel:
    """Truncated spectral representation of the Dirichlet heat kernel."""

    n_modes: int
    grid: Optional[SpatialGrid] = None

    def __post_init__(self):
        if self.n_modes < 1:
            raise ConfigurationError("kernel needs at least one mode")
        if self.grid is not None and self.n_modes > self.grid.n_interior:
            raise ConfigurationError(
                f"{self.n_modes} modes exceed the {self.grid.n_interior} resolvable on the grid"
            )

    @classmethod
    def for_grid(cls, grid: SpatialGrid, n_modes: Optional[int] = None) -> "GreenKernel":
        """Kernel tied to ``grid``; ``n_modes`` defaults to ``n_cells // 2``."""
        return cls(n_modes=n_modes or grid.n_cells // 2, grid=grid)

    @property
    def wavenumbers(self) -> np.ndarray:
        return np.arange(1, self.n_modes + 1, dtype=float)

    @property
    def eigenvalues(self) -> np.ndarray:
        k = self.wavenumbers
        return k * k * np.pi**2

    def eigenfunctions(self, x) -> np.ndarray:
        """``e_n(x)`` with the mode index on the last axis."""
        x = np.asarray(x, dtype=float)[..., None]
        return np.sqrt(2.0) * np.sin(self.wavenumbers * np.pi * x)

    def eigenfunction_derivatives(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)[..., None]
        k = self.wavenumbers
        return np.sqrt(2.0) * k * np.pi * np.cos(k * np.pi * x)

    def _require_grid(self, grid):
        grid = grid or self.grid
        if grid is None:
            raise ConfigurationError("this operation needs a spatial grid")
        if self.grid is not None and grid != self.grid:
            raise ConfigurationError("kernel and field live on different grids")
        if self.n_modes > grid.n_interior:
            raise ConfigurationError("kernel has more modes than the grid resolves")
        return grid

    def basis(self, grid=None) -> np.ndarray:
        """``(n_modes, n_interior)`` matrix of eigenfunctions on the grid."""
        return self._require_grid(grid).sine_basis(self.n_modes)

    def project(self, values, grid=None) -> np.ndarray:
        """Discrete coefficients ``<v, e_n>_H`` (interior values, last axis)."""
        grid = self._require_grid(grid)
        return grid.dx * np.asarray(values) @ self.basis(grid).T

    def project_dy(self, profile, grid=None) -> np.ndarray:
        """Coefficients ``int_0^1 e_n'(y) v(y) dy`` by the trapezoid rule.

        ``profile`` holds values at all ``n_cells + 1`` nodes, boundaries
        included; interior-only input is padded with zeros.
        """
        grid = self._require_grid(grid)
        profile = np.asarray(profile, dtype=float)
        if profile.shape[-1] == grid.n_interior:
            profile = grid.full_profile(profile)
        weights = np.full(grid.n_cells + 1, grid.dx)
        weights[[0, -1]] *= 0.5
        dphi = self.eigenfunction_derivatives(grid.nodes)  # (n_nodes, N)
        return (profile * weights) @ dphi

    def synthesize(self, coeffs, grid=None) -> np.ndarray:
        """Field ``sum_n c_n e_n`` on the interior nodes."""
        return np.asarray(coeffs) @ self.basis(grid)

    def semigroup(self, values, tau: float, grid=None) -> np.ndarray:
        """Apply ``exp(tau A)`` (``tau >= 0``) through the truncated expansion."""
        if tau < 0:
            raise DomainError("semigroup time must be non-negative")
        coeffs = self.project(values, grid) * np.exp(-self.eigenvalues * tau)
        return self.synthesize(coeffs, grid)

    def laplacian(self, values, grid=None) -> np.ndarray:
        """Spectral ``A v = v''`` restricted to the kernel's modes."""
        coeffs = -self.eigenvalues * self.project(values, grid)
        return self.synthesize(coeffs, grid)


def _check_time(t):
    t = np.asarray(t, dtype=float)
    if np.any(t <= 0):
        raise DomainError("heat kernel is singular at t <= 0")
    return t


def eval_green(t, x, y, kernel: GreenKernel):
    """``G_t(x, y)``; broadcasts over ``t``, ``x`` and ``y``."""
    t = _check_time(t)
    decay = np.exp(-kernel.eigenvalues * t[..., None])
    return np.sum(kernel.eigenfunctions(x) * kernel.eigenfunctions(y) * decay, axis=-1)


def eval_green_dy(t, x, y, kernel: GreenKernel):
    """``d/dy G_t(x, y)``."""
    t = _check_time(t)
    decay = np.exp(-kernel.eigenvalues * t[..., None])
    terms = kernel.eigenfunctions(x) * kernel.eigenfunction_derivatives(y) * decay
    return np.sum(terms, axis=-1)


def eval_green_dt(t, x, y, kernel: GreenKernel):
    """``A_x G_t(x, y)``, the spectral time derivative of the kernel."""
    t = _check_time(t)
    decay = -kernel.eigenvalues * np.exp(-kernel.eigenvalues * t[..., None])
    return np.sum(kernel.eigenfunctions(x) * kernel.eigenfunctions(y) * decay, axis=-1)


def interval_weights(lam, t, s_lo, s_hi):
    """``int_{s_lo}^{s_hi} exp(-lam (t - s)) ds`` for every mode and interval.

    ``lam`` has shape ``(N,)``; ``s_lo``/``s_hi`` shape ``(K,)``.  Returns
    ``(K, N)``.  Written with ``expm1`` so short intervals stay accurate.
    """
    lam = np.asarray(lam)[None, :]
    h = (np.asarray(s_hi) - np.asarray(s_lo))[:, None]
    tail = (t - np.asarray(s_hi))[:, None]
    return np.exp(-lam * tail) * (-np.expm1(-lam * h)) / lam


def _refined_intervals(t, n_panels=64, levels=8):
    """Uniform panels on [0, t] with the last one split geometrically toward t."""
    edges = list(np.linspace(0.0, t, n_panels + 1)[:-1])
    h = t / n_panels
    start = t - h
    for _ in range(levels):
        edges.append(start)
        h *= 0.5
        start = t - h
    edges.append(t - h)
    edges.append(t)
    edges = np.unique(np.asarray(edges))
    return edges[:-1], edges[1:]


def apply_J(
    v,
    kind: KernelKind,
    t: float,
    kernel: GreenKernel,
    times=None,
    grid: Optional[SpatialGrid] = None,
    n_panels: int = 64,
):
    """Evaluate ``J(v)(t, .) = int_0^t int_0^1 H(r, t; ., y) v(r, y) dy dr``.

    Parameters
    ----------
    v : array or callable
        Either an array of shape ``(K, m)`` holding ``v`` on the time
        intervals ``[times[j], times[j+1])`` (piecewise constant in time), or a
        callable ``v(s)`` returning a spatial profile.  ``m`` is the number of
        interior nodes or of all nodes (boundary values included).
    kind : KernelKind
        ``GAUSS`` for ``G_{t-s}``, ``GAUSS_DY`` for ``d/dy G_{t-s}``.
    t : float
        Evaluation time.
    times : array, optional
        ``K + 1`` interval edges, required for array input.  Intervals beyond
        ``t`` are dropped and a straddling interval is cut at ``t``.
    n_panels : int
        Uniform panels for callable input; the last panel is refined
        geometrically (ratio 1/2, 8 levels) toward ``s = t``.

    Returns
    -------
    ndarray
        ``J(v)(t, x_i)`` at the interior nodes.
    """
    grid = kernel._require_grid(grid)
    if t <= 0:
        raise DomainError("J(v)(t) needs t > 0")
    if callable(v):
        s_lo, s_hi = _refined_intervals(t, n_panels)
        panels = np.stack([np.asarray(v(0.5 * (a + b)), dtype=float) for a, b in zip(s_lo, s_hi)])
    else:
        panels = np.asarray(v, dtype=float)
        if panels.size == 0:
            raise DomainError("J(v) of an empty history")
        if times is None:
            raise DomainError("array input to J needs interval edges")
        times = np.asarray(times, dtype=float)
        if times.size != panels.shape[0] + 1:
            raise DomainError("need one more time edge than history panels")
        keep = times[:-1] < t
        if not np.any(keep):
            raise DomainError("history does not start before t")
        panels = panels[keep]
        s_lo = times[:-1][keep]
        s_hi = np.minimum(times[1:][keep], t)
    if panels.shape[-1] not in (grid.n_interior, grid.n_cells + 1):
        raise DomainError("history panels do not match the grid")

    if kind is KernelKind.GAUSS:
        interior = panels if panels.shape[-1] == grid.n_interior else panels[:, 1:-1]
        coeffs = kernel.project(interior, grid)
    elif kind is KernelKind.GAUSS_DY:
        coeffs = kernel.project_dy(panels, grid)
    else:  # pragma: no cover - enum is closed
        raise DomainError(f"unknown kernel kind {kind!r}")
    weights = interval_weights(kernel.eigenvalues, t, s_lo, s_hi)
    return kernel.synthesize(np.sum(coeffs * weights, axis=0), grid)


def _kernel_column_norms(kind, kernel, grid, tau):
    """Discrete ``|H_tau(., y)|_2`` for every node ``y``; exact by Parseval."""
    if kind is KernelKind.GAUSS:
        coef = kernel.eigenfunctions(grid.nodes)
    else:
        coef = kernel.eigenfunction_derivatives(grid.nodes)
    decay = np.exp(-2.0 * kernel.eigenvalues * np.asarray(tau)[..., None])  # (..., N)
    return np.sqrt(decay @ (coef**2).T)  # (..., n_nodes)


def j_bound_constant(kind: KernelKind, kernel: GreenKernel, grid=None, t_max=1.0, n_tau=4000):
    """Constant ``C1`` in ``|J(v)(t)|_2 <= C1 int_0^t (t-s)^{-3/4} |v(s)|_1 ds``.

    This is the ``(q, rho) = (1, 2)`` case of the kernel estimate.  ``C1`` is
    measured as ``sup_{0 < tau <= t_max, y} tau^{3/4} |H_tau(., y)|_2`` on the
    discrete grid.  The column norm decreases in ``tau``, so bracketing each
    scan cell by its end points gives an upper bound on the true supremum and
    the inequality then holds exactly for discrete inputs (Minkowski).
    """
    grid = kernel._require_grid(grid)
    taus = np.geomspace(1e-12, t_max, n_tau)
    norms = _kernel_column_norms(kind, kernel, grid, taus).max(axis=-1)
    at_zero = _kernel_column_norms(kind, kernel, grid, 0.0).max()
    cells = taus[1:] ** 0.75 * norms[:-1]
    return float(max(taus[0] ** 0.75 * at_zero, cells.max()))


def l1_norm(profile, grid: SpatialGrid):
    """Trapezoid ``|v|_1``; interior-only input is padded with zero ends."""
    profile = np.asarray(profile, dtype=float)
    if profile.shape[-1] == grid.n_interior:
        profile = grid.full_profile(profile)
    w = np.full(grid.n_cells + 1, grid.dx)
    w[[0, -1]] *= 0.5
    return np.abs(profile) @ w


def j_bound_rhs(v, times, t, grid: SpatialGrid, constant: float, exponent: float = -0.75):
    """``C1 int_0^t (t-s)^exponent |v(s)|_1 ds`` for piecewise-constant ``v``."""
    times = np.asarray(times, dtype=float)
    keep = times[:-1] < t
    lo = times[:-1][keep]
    hi = np.minimum(times[1:][keep], t)
    p = exponent + 1.0
    integrals = ((t - lo) ** p - (t - hi) ** p) / p
    return constant * float(np.sum(l1_norm(np.asarray(v)[keep], grid) * integrals))


def phi1(z):
    """``(1 - exp(-z)) / z`` with the removable singularity at 0."""
    z = np.asarray(z, dtype=float)
    out = np.ones_like(z)
    nz = z > 1e-12
    out[nz] = -np.expm1(-z[nz]) / z[nz]
    return out


class ConvolutionAccumulator:
    """Running stochastic convolution ``eta`` for an ensemble of paths.

    Each step adds the cell-wise noise of that step, treated as a density
    constant in time over the step, propagated exactly mode by mode.
    """

    def __init__(self, kernel: GreenKernel, grid: SpatialGrid, dt: float, n_paths: int):
        self.kernel = kernel
        self.grid = kernel._require_grid(grid)
        self.decay = np.exp(-kernel.eigenvalues * dt)
        self.gain = phi1(kernel.eigenvalues * dt)
        self.basis = kernel.basis(self.grid)
        self.modes = np.zeros((n_paths, kernel.n_modes))

    def update(self, sigma_values, dW):
        # <sigma dW / dx, e_n>_H = sum_i e_n(x_i) sigma_i dW_i
        forcing = (np.asarray(sigma_values) * dW) @ self.basis.T
        self.modes = self.decay * self.modes + self.gain * forcing

    def values(self) -> np.ndarray:
        return self.modes @ self.basis

    def h_norm_sq(self) -> np.ndarray:
        # Parseval on the grid (discrete orthonormality of the basis)
        return np.sum(self.modes**2, axis=-1)


@dataclass
class StochasticConvolution:
    """``eta`` along one trajectory together with its running supremum."""

    times: np.ndarray
    eta: np.ndarray
    eta_star: np.ndarray

    def h_norm_sq(self, grid: SpatialGrid) -> np.ndarray:
        return grid.h_norm_sq(self.eta)


def stochastic_convolution(traj, sigma: Callable, kernel: GreenKernel) -> StochasticConvolution:
    """Rebuild ``eta(t) = int_0^t int G_{t-s}(., y) sigma(s, y, u(s, y)) W(dy ds)``.

    The trajectory's noise stream is regenerated from its ``(seed, stream_id)``
    instead of being stored; the trajectory must hold every time step.
    ``sigma`` is a coefficient ``(t, x, r) -> value``.
    """
    grid = traj.grid
    if kernel.grid is not None and kernel.grid != grid:
        raise ConfigurationError("trajectory and kernel use different grids")
    if traj.save_every != 1:
        raise ConfigurationError("stochastic convolution replay needs every time step saved")
    dt = traj.dt
    source = NoiseSource(grid, dt, traj.seed, [traj.stream_id])
    acc = ConvolutionAccumulator(kernel, grid, dt, 1)
    x = grid.interior_nodes
    n_steps = len(traj.times) - 1
    eta = np.zeros((n_steps + 1, grid.n_interior))
    for k in range(n_steps):
        u = traj.profiles[k]
        acc.update(sigma(traj.times[k], x, u)[None, :], source.panel(traj.start_step + k))
        eta[k + 1] = acc.values()[0]
    eta_star = np.maximum.accumulate(np.max(np.abs(eta), axis=-1))
    return StochasticConvolution(times=np.asarray(traj.times), eta=eta, eta_star=eta_star)
