import numpy as np
import pytest
from scipy import integrate

from spde_ergo.errors import ConfigurationError, DomainError
from spde_ergo.grid_noise import NoiseSource, SpatialGrid
from spde_ergo.heat_kernel import (
    ConvolutionAccumulator,
    GreenKernel,
    KernelKind,
    apply_J,
    eval_green,
    eval_green_dt,
    eval_green_dy,
    j_bound_constant,
    j_bound_rhs,
    stochastic_convolution,
)

K64 = GreenKernel(64)
rng = np.random.default_rng(11)


def test_symmetry():
    t, x, y = rng.random(50) * 0.3 + 0.01, rng.random(50), rng.random(50)
    np.testing.assert_array_equal(eval_green(t, x, y, K64), eval_green(t, y, x, K64))


@pytest.mark.parametrize("t", [0.01, 0.05, 0.2])
@pytest.mark.parametrize("s", [0.01, 0.05, 0.2])
def test_semigroup_identity(t, s):
    x, z = rng.random(20), rng.random(20)
    # oracle: adaptive quadrature in y
    lhs = np.array([
        integrate.quad(lambda y: eval_green(t, xi, y, K64) * eval_green(s, y, zi, K64), 0, 1, limit=200,
                       epsabs=1e-11)[0]
        for xi, zi in zip(x[:5], z[:5])
    ])
    assert np.max(np.abs(lhs - eval_green(t + s, x[:5], z[:5], K64))) <= 1e-6


def test_heat_identity_finite_difference():
    h = 1e-5
    for t in (0.05, 0.1, 0.2):
        x, y = rng.random(20), rng.random(20)
        fd = (eval_green(t + h, x, y, K64) - eval_green(t - h, x, y, K64)) / (2 * h)
        exact = eval_green_dt(t, x, y, K64)
        assert np.max(np.abs(fd - exact)) / np.max(np.abs(exact)) <= 1e-4


def test_singular_time_rejected():
    for fn in (eval_green, eval_green_dy, eval_green_dt):
        with pytest.raises(DomainError):
            fn(0.0, 0.3, 0.4, K64)


def test_dy_integrates_to_zero():
    for x in (0.1, 0.37, 0.8):
        val, _ = integrate.quad(lambda y: eval_green_dy(0.05, x, y, K64), 0, 1, limit=200)
        assert abs(val) < 1e-9


def test_dy_matches_finite_difference():
    x, y = rng.random(30), 0.05 + 0.9 * rng.random(30)
    h = 1e-6
    fd = (eval_green(0.1, x, y + h, K64) - eval_green(0.1, x, y - h, K64)) / (2 * h)
    ex = eval_green_dy(0.1, x, y, K64)
    assert np.max(np.abs(fd - ex)) / np.max(np.abs(ex)) <= 1e-4


def test_dy_first_mode_dominates_late():
    x, y = 0.3, 0.2
    lead = 2 * np.pi * np.sin(np.pi * x) * np.cos(np.pi * y) * np.exp(-np.pi**2)
    assert abs(eval_green_dy(1.0, x, y, K64) / lead - 1) <= 1e-6


def test_positivity_up_to_truncation():
    x, y = np.meshgrid(np.linspace(0, 1, 101), np.linspace(0, 1, 101))
    assert eval_green(0.01, x, y, K64).min() > -1e-8


def test_kernel_orthonormality_on_grid():
    g = SpatialGrid(64)
    k = GreenKernel.for_grid(g)
    assert k.n_modes == 32
    B = k.basis()
    np.testing.assert_allclose(g.dx * B @ B.T, np.eye(32), atol=1e-8)


# --- apply_J ---------------------------------------------------------------

G32 = SpatialGrid(32)
KJ = GreenKernel(31, G32)


def test_apply_J_zero():
    out = apply_J(np.zeros((4, 31)), KernelKind.GAUSS, 0.5, KJ, times=np.linspace(0, 0.5, 5))
    assert np.all(out == 0)


def test_apply_J_constant_mode():
    e1 = G32.mode(1)
    expected = e1 * (1 - np.exp(-np.pi**2 / 2)) / np.pi**2
    arr = apply_J(np.tile(e1, (3, 1)), KernelKind.GAUSS, 0.5, KJ, times=[0, 0.1, 0.3, 0.5])
    np.testing.assert_allclose(arr, expected, atol=1e-12)
    fn = apply_J(lambda s: e1, KernelKind.GAUSS, 0.5, KJ)
    np.testing.assert_allclose(fn, expected, atol=1e-12)


def test_apply_J_linear():
    times = np.linspace(0, 0.4, 9)
    v, w = rng.standard_normal((8, 31)), rng.standard_normal((8, 31))
    for kind in KernelKind:
        lhs = apply_J(2.5 * v + w, kind, 0.4, KJ, times=times)
        rhs = 2.5 * apply_J(v, kind, 0.4, KJ, times=times) + apply_J(w, kind, 0.4, KJ, times=times)
        np.testing.assert_allclose(lhs, rhs, atol=1e-12)


def test_apply_J_empty_rejected():
    with pytest.raises(DomainError):
        apply_J(np.zeros((0, 31)), KernelKind.GAUSS, 0.5, KJ, times=[0.0])


def test_apply_J_dy_matches_quadrature_oracle():
    # J_dG(v)(t, x) for v(s, y) = y(1 - y) constant in time, direct 2-D quadrature
    g = SpatialGrid(64)
    k = GreenKernel(63, g)
    prof = g.nodes * (1 - g.nodes)
    out = apply_J(np.tile(prof, (1, 1)), KernelKind.GAUSS_DY, 0.2, k, times=[0, 0.2])
    x = g.interior_nodes[20]
    # integrate in s analytically per mode, in y by quadrature
    lam = k.eigenvalues
    ws = (1 - np.exp(-lam * 0.2)) / lam
    coef = np.array([integrate.quad(lambda y, n=n: np.sqrt(2) * n * np.pi * np.cos(n * np.pi * y) * y * (1 - y), 0, 1)[0]
                     for n in range(1, 64)])
    ref = np.sum(np.sqrt(2) * np.sin(np.arange(1, 64) * np.pi * x) * coef * ws)
    # the y-projection is a trapezoid rule on the grid: O(dx^2) relative error
    assert abs(out[20] - ref) < 1e-3 * abs(ref)


def test_smoothing_of_spikes():
    norms = []
    for width in (4, 2, 1):
        g = SpatialGrid(64)
        prof = np.zeros(g.n_cells + 1)
        prof[32 - width + 1:32 + width] = 1.0
        prof /= prof.sum() * g.dx  # unit mass
        out = apply_J(prof[None, :], KernelKind.GAUSS, 0.1, GreenKernel(63, g), times=[0, 0.1])
        norms.append(np.sqrt(g.h_norm_sq(out)))
    assert max(norms) < 1.0
    assert np.ptp(norms) < 0.05 * max(norms)


@pytest.mark.parametrize("kind", list(KernelKind))
def test_j_bound_no_violations(kind):
    C1 = j_bound_constant(kind, KJ, G32)
    local = np.random.default_rng(5)
    for _ in range(100):
        k = int(local.integers(1, 9))
        times = np.concatenate([[0.0], np.sort(local.random(k - 1)), [1.0]]) * 0.5
        v = local.standard_normal((k, 31)) * local.random((k, 1)) * 5
        lhs = np.sqrt(G32.h_norm_sq(apply_J(v, kind, 0.5, KJ, times=times)))
        assert lhs <= j_bound_rhs(v, times, 0.5, G32, C1)


# --- stochastic convolution -------------------------------------------------


def test_convolution_mean_square_matches_quadrature():
    g = SpatialGrid(32)
    k = GreenKernel(31, g)
    c, dt, t, P = 0.7, 2.5e-5, 0.05, 4000
    acc = ConvolutionAccumulator(k, g, dt, P)
    src = NoiseSource(g, dt, 3, np.arange(P))
    sig = np.full((P, 31), c)
    for step in range(int(round(t / dt))):
        acc.update(sig, src.panel(step))
    mc = acc.h_norm_sq()
    # oracle: c^2 int_0^t int int G^2 dy dx ds, inner integrals by Parseval, ds by quadrature
    target = c**2 * integrate.quad(lambda s: np.sum(np.exp(-2 * k.eigenvalues * s)), 0, t, limit=200)[0]
    assert abs(mc.mean() / target - 1) < 0.05


class _Traj:
    def __init__(self, grid, n_steps, dt):
        self.grid = grid
        self.dt = dt
        self.seed = 4
        self.stream_id = 2
        self.save_every = 1
        self.start_step = 0
        self.times = np.arange(n_steps + 1) * dt
        self.profiles = np.zeros((n_steps + 1, grid.n_interior))


def test_stochastic_convolution_zero_sigma_and_monotone_sup():
    g = SpatialGrid(16)
    k = GreenKernel(15, g)
    tr = _Traj(g, 200, 1e-3)
    zero = stochastic_convolution(tr, lambda t, x, r: np.zeros_like(r), k)
    assert np.all(zero.eta == 0)
    sc = stochastic_convolution(tr, lambda t, x, r: np.ones_like(r), k)
    assert np.all(np.diff(sc.eta_star) >= 0)
    with pytest.raises(ConfigurationError):
        stochastic_convolution(tr, lambda t, x, r: r, GreenKernel(15, SpatialGrid(32)))
