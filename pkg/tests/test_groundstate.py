import numpy as np
import pytest

from solstab.fields import Field, make_grid
from solstab.groundstate import (BifurcationError, build_branch, dphi_domega,
                                 dphi_fd_error, slope_condition,
                                 solve_ground_state)
from solstab.nonlinearity import make_nonlinearity


@pytest.fixture(scope="module")
def grid():
    return make_grid(40, 2048)


@pytest.fixture(scope="module")
def cubic():
    return make_nonlinearity("power", q=1)


@pytest.fixture(scope="module")
def quintic():
    return make_nonlinearity("power", q=2)


def test_cubic_soliton_analytic(grid, cubic):
    gs = solve_ground_state(cubic, 1.0, grid)
    exact = np.sqrt(2.0) / np.cosh(grid.x)
    assert np.max(np.abs(gs.phi.values.real - exact)) < 1e-10
    assert gs.residual < 1e-9 * gs.phi.norm()
    assert abs(gs.phi.values.real[int(0.95 * grid.n)]) < 1e-10


def test_quintic_soliton_analytic(grid, quintic):
    gs = solve_ground_state(quintic, 1.0, grid)
    exact = 3.0**0.25 / np.cosh(2.0 * grid.x) ** 0.5
    assert np.max(np.abs(gs.phi.values.real - exact)) < 1e-9
    assert gs.phi.values.real[grid.n // 2] == pytest.approx(3.0**0.25, abs=1e-10)


def test_exact_guess_is_fixed_point(grid, cubic):
    gs = solve_ground_state(cubic, 1.0, grid)
    again = solve_ground_state(cubic, 1.0, grid, guess=gs.phi)
    assert again.newton_steps <= 1
    assert again.residual <= max(gs.residual * 1.5, 1e-12)


def test_decay_rate_estimate(grid, cubic):
    gs = solve_ground_state(cubic, 1.0, grid)
    assert gs.decay_rate == pytest.approx(1.0, abs=5e-3)


def test_trivial_collapse_raises(grid):
    nl = make_nonlinearity("quintic_septic", gamma=0.3)
    with pytest.raises(BifurcationError):
        # outside the existence window the Newton collapses or leaves the cone
        solve_ground_state(nl, 1.4, grid)


def test_dphi_domega_cubic(grid, cubic):
    gs = solve_ground_state(cubic, 1.0, grid)
    v = dphi_domega(gs, cubic)
    x = grid.x
    exact = np.sqrt(2) * (1 / np.cosh(x) - x * np.sinh(x) / np.cosh(x) ** 2) / 2.0
    err = np.sqrt(grid.h * np.sum((v.values.real - exact) ** 2))
    assert err < 1e-6
    assert dphi_fd_error(gs, cubic, v) < 1e-4


def test_dphi_quintic_orthogonal(grid, quintic):
    gs = solve_ground_state(quintic, 1.0, grid)
    v = dphi_domega(gs, quintic)
    # Q constant along the quintic branch: <phi, dphi> = 0
    assert abs(grid.h * np.sum(gs.phi.values.real * v.values.real)) < 1e-6


def test_weak_form_of_dphi(grid, cubic):
    gs = solve_ground_state(cubic, 1.0, grid)
    v = dphi_domega(gs, cubic)
    from solstab.groundstate import lplus_apply
    resid = lplus_apply(cubic, 1.0, gs.phi, v) + gs.phi
    rng = np.random.default_rng(5)
    from solstab.fields import seeded_even_field
    for _ in range(10):
        test = seeded_even_field(grid, rng)
        val = grid.h * np.sum(resid.values.real * test.values.real)
        assert abs(val) < 1e-7


def test_newton_quadratic_convergence(grid, cubic):
    # seed Newton just outside the solution and watch the residual contraction
    gs = solve_ground_state(cubic, 1.0, grid)
    from solstab.evensector import even_sector
    from solstab.groundstate import _newton_even, _ode_residual
    cg = make_grid(40, 1024)
    es = even_sector(cg)
    from solstab.groundstate import _spectral_resample
    exact = es.restrict(_spectral_resample(grid, cg, gs.phi.values.real))
    start = exact * (1 + 1e-3)
    r0 = np.linalg.norm(_ode_residual(es, cubic, 1.0, start))
    phi1, r1, steps = _newton_even(es, cubic, 1.0, start, max_steps=1, tol_rel=0.0)
    assert r1 < 0.01 * r0   # one step contracts quadratically from 1e-3 scale


def test_branch_continuation_c1(grid, cubic):
    br = build_branch(cubic, [0.8, 0.9, 1.0, 1.1], grid)
    for a, b in zip(br.states[:-1], br.states[1:]):
        diff = np.sqrt(grid.h * np.sum(
            (a.phi.values.real - b.phi.values.real) ** 2))
        assert diff < 2.0 * abs(b.omega - a.omega) * 3.0


def test_slope_condition_cubic(grid, cubic):
    br = build_branch(cubic, [0.99, 1.0, 1.01], grid)
    sv = slope_condition(br, cubic)
    assert sv.passed
    assert sv.dq_fd[0] == pytest.approx(2.0, abs=1e-4)
    assert sv.dq_pairing[0] == pytest.approx(2.0, abs=1e-5)


def test_slope_condition_quintic_fails(grid, quintic):
    br = build_branch(quintic, [0.99, 1.0, 1.01], grid)
    sv = slope_condition(br, quintic)
    assert not sv.passed
    assert abs(sv.dq_fd[0]) < 1e-6
