import numpy as np
import pytest

from solstab.nonlinearity import (DerivativeOrderError, check_H1_H2,
                                  make_nonlinearity)


def test_cubic_derivative():
    nl = make_nonlinearity("power", q=1)
    assert nl.eval(2.0, 1) == pytest.approx(1.0)
    assert nl.eval(2.0, 0) == pytest.approx(2.0)


def test_cubic_quintic_value():
    nl = make_nonlinearity("cubic_quintic", gamma=0.2)
    assert nl.eval(1.0, 0) == pytest.approx(0.8)


def test_saturable_derivative_at_zero():
    nl = make_nonlinearity("saturable", sigma=1.0)
    # symbolic: d/ds [s^2/(1+s)] = (s^2 + 2s) / (1+s)^2 -> 0 at s = 0
    assert nl.eval(0.0, 1) == pytest.approx(0.0, abs=1e-14)
    assert nl.eval(0.0, 0) == pytest.approx(0.0, abs=1e-14)


@pytest.mark.parametrize("name,params", [
    ("power", {"q": 2}),
    ("quintic_septic", {"gamma": 0.1}),
    ("saturable", {"sigma": 1.3}),
    ("sqrt_saturable", {"sigma": 0.5}),
    ("poly", {"coeffs": {2: 1.0, 3: 0.5, 4: -0.2}}),
])
def test_analytic_vs_finite_difference(name, params):
    nl = make_nonlinearity(name, **params)
    s = np.linspace(0.01, 10.0, 23)
    for j in (1, 2):
        h = 6e-4 * np.maximum(1.0, s) if j == 2 else 1e-5 * np.maximum(1.0, s)
        if j == 1:
            fd = (nl.eval(s + h, 0) - nl.eval(s - h, 0)) / (2 * h)
        else:
            fd = (nl.eval(s + h, 0) - 2 * nl.eval(s, 0) + nl.eval(s - h, 0)) / h**2
        ana = nl.eval(s, j)
        scale = np.maximum(np.abs(ana), 1e-8)
        assert np.max(np.abs(fd - ana) / scale) < 1e-5


def test_antiderivative_consistency():
    for name, params in [("quintic_septic", {"gamma": 0.1}),
                         ("saturable", {"sigma": 1.0}),
                         ("sqrt_saturable", {"sigma": 0.5})]:
        nl = make_nonlinearity(name, **params)
        s = np.linspace(0.0, 5.0, 2001)
        G = nl.antiderivative(s)
        dG = np.gradient(G, s)
        beta = nl.eval(s, 0)
        assert np.max(np.abs(dG[2:-2] - beta[2:-2])) < 5e-5 * max(1.0, np.max(np.abs(beta)))


def test_order_overflow():
    nl = make_nonlinearity("custom", func=lambda s: s**3, max_order=4)
    with pytest.raises(DerivativeOrderError):
        nl.eval(1.0, 5)


def test_h1_pass_quintic():
    v = check_H1_H2(make_nonlinearity("power", q=2), p=5.0)
    assert v.h1_pass and v.h2_pass


def test_h1_fail_cubic():
    v = check_H1_H2(make_nonlinearity("power", q=1), p=3.0)
    assert not v.h1_pass


def test_h2_saturable_fit():
    v = check_H1_H2(make_nonlinearity("saturable", sigma=1.0), p=3.0)
    assert v.passed
    # log-log fit of |beta(v^2)| ~ v^2 at large v: exponent ~ 2 = p - 1
    assert v.fitted_exponents[0] == pytest.approx(2.0, abs=0.15)


def test_h1h2_deterministic():
    nl = make_nonlinearity("quintic_septic", gamma=0.1)
    a = check_H1_H2(nl, p=7.0)
    b = check_H1_H2(nl, p=7.0)
    assert a.fitted_exponents == b.fitted_exponents
