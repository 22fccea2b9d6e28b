"""Spatial grid on [0, 1] and discretized space-time white noise.

Noise is cell-wise: every interior node carries an independent Brownian-sheet
increment of variance ``dt * dx`` per time step.  Increments are generated by a
counter-based generator (NumPy's Philox) keyed by ``(seed, stream_id)``; the
counter encodes the block of time steps, so the panel for any
``(seed, stream_id, step)`` can be regenerated on demand without storing it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import ConfigurationError, DomainError

#: Time steps drawn per Philox counter block.  Part of the stream layout:
#: changing it changes every generated panel.
BLOCK_STEPS = 32

_U64 = 2**64


def row_sum(x) -> np.ndarray:
    """Sum along the last axis in a fixed pairwise order.

    ``np.sum`` picks its summation order from the array layout, so a row can
    round differently depending on how many rows are summed with it.  Here
    every row is reduced the same way whatever the batch shape.
    """
    x = np.asarray(x, dtype=float)
    while x.shape[-1] > 1:
        half = x.shape[-1] // 2
        head = x[..., :half] + x[..., half : 2 * half]
        if x.shape[-1] % 2:
            head = np.concatenate([head, x[..., 2 * half :]], axis=-1)
        x = head
    return x[..., 0]


@dataclass(frozen=True)
class SpatialGrid:
    """Uniform grid of ``n_cells`` cells on [0, 1] with Dirichlet ends.

    Only the ``n_cells - 1`` interior nodes are unknowns; the boundary values
    are zero and never stored.
    """

    n_cells: int

    def __post_init__(self):
        if int(self.n_cells) != self.n_cells or self.n_cells < 4:
            raise ConfigurationError("grid.n_cells must be an integer >= 4")

    @property
    def dx(self) -> float:
        return 1.0 / self.n_cells

    @property
    def n_interior(self) -> int:
        return self.n_cells - 1

    @cached_property
    def interior_nodes(self) -> np.ndarray:
        return np.arange(1, self.n_cells) / self.n_cells

    @cached_property
    def nodes(self) -> np.ndarray:
        """All nodes including the two boundary points."""
        return np.arange(self.n_cells + 1) / self.n_cells

    def mode(self, n: int) -> np.ndarray:
        """Eigenfunction ``e_n(x) = sqrt(2) sin(n pi x)`` at the interior nodes."""
        return np.sqrt(2.0) * np.sin(n * np.pi * self.interior_nodes)

    def sine_basis(self, n_modes: int) -> np.ndarray:
        """Matrix of shape ``(n_modes, n_interior)`` with rows ``e_1 .. e_N``."""
        k = np.arange(1, n_modes + 1)[:, None]
        return np.sqrt(2.0) * np.sin(k * np.pi * self.interior_nodes[None, :])

    def h_norm_sq(self, values) -> np.ndarray:
        """Discrete ``|u|_H^2 = dx * sum_i u_i^2`` along the last axis."""
        values = np.asarray(values)
        return self.dx * row_sum(values * values)

    def inner(self, a, b) -> np.ndarray:
        return self.dx * row_sum(np.asarray(a) * np.asarray(b))

    def full_profile(self, values) -> np.ndarray:
        """Pad interior values with the zero boundary values."""
        values = np.asarray(values)
        pad = [(0, 0)] * (values.ndim - 1) + [(1, 1)]
        return np.pad(values, pad)

    def from_modes(self, amplitudes) -> np.ndarray:
        """Field ``sum_n a_n e_n`` sampled on the interior nodes."""
        amplitudes = np.atleast_1d(np.asarray(amplitudes, dtype=float))
        if amplitudes.size == 0:
            return np.zeros(self.n_interior)
        return amplitudes @ self.sine_basis(amplitudes.size)


def _check_seed(seed, stream_id):
    if not 0 <= int(seed) < _U64:
        raise ConfigurationError("noise.seed must be an unsigned 64-bit integer")
    if not 0 <= int(stream_id) < _U64:
        raise ConfigurationError("noise.stream_id must be a non-negative 64-bit integer")


def block_normals(seed: int, stream_id: int, block: int, n_interior: int) -> np.ndarray:
    """Standard normals for one counter block, shape ``(BLOCK_STEPS, n_interior)``.

    The Philox key is ``(seed, stream_id)`` and the second counter word is the
    block index, so blocks never overlap as long as one block draws fewer than
    2**64 values.
    """
    key = np.array([int(seed), int(stream_id)], dtype=np.uint64)
    counter = np.array([0, int(block), 0, 0], dtype=np.uint64)
    gen = np.random.Generator(np.random.Philox(key=key, counter=counter))
    return gen.standard_normal((BLOCK_STEPS, n_interior))


@dataclass
class RngStream:
    """One reproducible noise stream: ``(seed, stream_id)`` plus a step cursor."""

    seed: int
    stream_id: int = 0
    step_index: int = 0
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        _check_seed(self.seed, self.stream_id)

    def reset(self, step_index: int = 0):
        self.step_index = int(step_index)

    def normals(self, step: int, n_interior: int) -> np.ndarray:
        block, offset = divmod(int(step), BLOCK_STEPS)
        key = (block, n_interior)
        if key not in self._cache:
            self._cache.clear()
            self._cache[key] = block_normals(self.seed, self.stream_id, block, n_interior)
        return self._cache[key][offset]


@dataclass(frozen=True)
class NoiseIncrement:
    """Brownian-sheet increments over one time step, one entry per interior node."""

    dW: np.ndarray
    dt: float
    grid: SpatialGrid

    @property
    def density(self) -> np.ndarray:
        """White-noise density panel ``dW / dx`` as it enters the equation."""
        return self.dW / self.grid.dx


def sample_noise(grid: SpatialGrid, dt: float, rng: RngStream) -> NoiseIncrement:
    """Draw the next increment panel from ``rng`` and advance its cursor."""
    if not dt > 0:
        raise ConfigurationError("time.dt must be positive")
    z = rng.normals(rng.step_index, grid.n_interior)
    rng.step_index += 1
    dW = np.sqrt(dt * grid.dx) * z
    dW.setflags(write=False)
    return NoiseIncrement(dW=dW, dt=float(dt), grid=grid)


def project_mode(dW: NoiseIncrement, n: int) -> float:
    """Increment of the ``n``-th Brownian motion ``beta_n`` over the step.

    Equals ``dx * sum_i e_n(x_i) * (dW_i / dx)``, the discrete H-pairing of
    the noise density with ``e_n``; its variance is ``dt``.
    """
    grid = dW.grid
    if not 1 <= n <= grid.n_interior:
        raise DomainError(f"mode index {n} outside 1..{grid.n_interior}")
    return float(grid.dx * np.dot(grid.mode(n), dW.density))


class NoiseSource:
    """Increment panels for an ensemble of paths, one stream per path.

    Several paths may share a stream id (common random numbers); each distinct
    stream is generated once per block.  ``panel(step)`` returns an array of
    shape ``(n_paths, n_interior)`` holding ``dW`` (not the density).
    """

    def __init__(self, grid: SpatialGrid, dt: float, seed: int, stream_ids):
        if not dt > 0:
            raise ConfigurationError("time.dt must be positive")
        ids = np.asarray(stream_ids, dtype=np.uint64).ravel()
        for sid in np.unique(ids):
            _check_seed(seed, int(sid))
        self.grid = grid
        self.dt = float(dt)
        self.seed = int(seed)
        self.stream_ids = ids
        self._unique, self._inverse = np.unique(ids, return_inverse=True)
        self._scale = np.sqrt(self.dt * grid.dx)
        self._block = None
        self._data = None

    @property
    def n_paths(self) -> int:
        return self.stream_ids.size

    def _load(self, block):
        n = self.grid.n_interior
        data = np.empty((self._unique.size, BLOCK_STEPS, n))
        for j, sid in enumerate(self._unique):
            data[j] = block_normals(self.seed, int(sid), block, n)
        data *= self._scale
        self._data = data[self._inverse]
        self._block = block

    def panel(self, step: int) -> np.ndarray:
        block, offset = divmod(int(step), BLOCK_STEPS)
        if block != self._block:
            self._load(block)
        return self._data[:, offset, :]


# Stream-id roles.  Each experiment derives path stream ids as
# ``role_offset + base + path_index`` so distinct roles never collide.
ROLE_STRIDE = 1 << 40
ROLES = {
    "primary": 0,
    "secondary": 1,
    "pilot": 2,
    "reference": 3,
    "bootstrap": 4,
}


def stream_ids(role: str, n_paths: int, base: int = 0) -> np.ndarray:
    """Deterministic stream ids for ``n_paths`` paths playing ``role``."""
    offset = ROLES[role] * ROLE_STRIDE + int(base)
    return offset + np.arange(n_paths, dtype=np.uint64)
