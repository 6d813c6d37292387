import numpy as np
import pytest

from solstab.fields import (Field, GridError, Spinor, derivative, gaussian,
                            make_grid, pairing, seeded_even_spinor, sigma_apply,
                            weighted_norm)


def test_make_grid_spacing():
    g = make_grid(40, 4096)
    assert g.h == pytest.approx(0.01953125)
    g2 = make_grid(20, 1024)
    assert g2.h == pytest.approx(0.0390625)


def test_make_grid_rejects_bad_n():
    with pytest.raises(GridError):
        make_grid(40, 100)
    with pytest.raises(GridError):
        make_grid(40, 32)
    with pytest.raises(GridError):
        make_grid(-1.0, 128)


def test_second_derivative_eigenfunction():
    g = make_grid(40, 512)
    f = Field(g, np.cos(np.pi * g.x / g.L))
    d2 = derivative(f, 2)
    expect = -(np.pi / g.L) ** 2 * np.cos(np.pi * g.x / g.L)
    assert np.max(np.abs(d2.values - expect)) < 1e-12


def test_derivative_of_constant_is_zero():
    g = make_grid(40, 256)
    f = Field(g, np.ones(g.n))
    assert np.max(np.abs(derivative(f, 1).values)) < 1e-13


def test_sech_second_derivative_analytic():
    g = make_grid(40, 4096)
    s = 1.0 / np.cosh(g.x)
    d2 = derivative(Field(g, s), 2)
    expect = s - 2.0 * s**3
    assert np.max(np.abs(d2.values - expect)) < 1e-10


def test_weighted_norm_gaussian():
    g = make_grid(40, 2048)
    u = gaussian(g, 1.0)
    # ||e^{-x^2}||_2 = (pi/2)^(1/4)
    assert weighted_norm(u, 0, 0.0) == pytest.approx((np.pi / 2) ** 0.25, abs=1e-8)
    # tau = 1: quadrature oracle of int (1+x^2) e^{-2x^2}
    xs = np.linspace(-30, 30, 400001)
    oracle = np.sqrt(np.trapezoid((1 + xs**2) * np.exp(-2 * xs**2), xs))
    assert weighted_norm(u, 0, 1.0) == pytest.approx(oracle, rel=1e-8)


def test_weighted_norm_zero():
    g = make_grid(40, 256)
    assert weighted_norm(Field(g, np.zeros(g.n)), 2, 3.0) == 0.0


def test_pairing_values():
    g = make_grid(40, 2048)
    u = gaussian(g, 1.0)
    z = Field(g, np.zeros(g.n))
    f = Spinor(u, z)
    assert pairing(f, f) == pytest.approx(np.sqrt(np.pi / 2), abs=1e-10)
    gsp = Spinor(z, u)
    assert abs(pairing(f, gsp)) < 1e-14
    both = Spinor(u, u)
    assert abs(pairing(both, sigma_apply(3, both))) < 1e-14


def test_sigma_conventions():
    g = make_grid(40, 128)
    one = Field(g, np.ones(g.n))
    zero = Field(g, np.zeros(g.n))
    s = Spinor(one, zero)
    s2 = sigma_apply(2, s)
    assert np.allclose(s2.up.values, 0.0)
    assert np.allclose(s2.lo.values, -1j)
    s3 = sigma_apply(3, Spinor(one, one))
    assert np.allclose(s3.lo.values, -1.0)
    for j in (1, 2, 3):
        twice = sigma_apply(j, sigma_apply(j, s))
        assert np.allclose(twice.up.values, s.up.values)
        assert np.allclose(twice.lo.values, s.lo.values)


def test_parseval():
    g = make_grid(40, 512)
    rng = np.random.default_rng(0)
    f = seeded_even_spinor(g, rng)
    phys = f.norm()
    modal = np.sqrt(
        g.h * (np.sum(np.abs(np.fft.fft(f.up.values)) ** 2)
               + np.sum(np.abs(np.fft.fft(f.lo.values)) ** 2)) / g.n)
    assert phys == pytest.approx(modal, rel=1e-12)


def test_even_sector_parity_of_derivatives():
    g = make_grid(40, 512)
    rng = np.random.default_rng(3)
    f = seeded_even_spinor(g, rng).up
    even2 = derivative(f, 2)
    assert even2.is_even(1e-9)
    odd1 = derivative(f, 1).values
    refl = np.roll(odd1[::-1], 1)
    assert np.max(np.abs(odd1 + refl)) < 1e-9 * max(1.0, np.max(np.abs(odd1)))


def test_pairing_sigma3_symmetry():
    g = make_grid(40, 256)
    rng = np.random.default_rng(11)
    for _ in range(5):
        a = rng.standard_normal(g.n) + 1j * rng.standard_normal(g.n)
        b = rng.standard_normal(g.n) + 1j * rng.standard_normal(g.n)
        f = Spinor.from_arrays(g, a, b)
        c = rng.standard_normal(g.n) + 1j * rng.standard_normal(g.n)
        d = rng.standard_normal(g.n) + 1j * rng.standard_normal(g.n)
        h = Spinor.from_arrays(g, c, d)
        lhs = pairing(f, sigma_apply(3, h))
        rhs = np.conj(pairing(h, sigma_apply(3, f)))
        assert lhs == pytest.approx(rhs, rel=1e-12)
