"""Tests for SDE models, test functions, generator, and probes."""

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from emcds import model as M


def test_shifted_sine_drift_values():
    m = M.shifted_sine()
    assert m.drift(0.0) == 0.0
    assert m.drift(np.pi) == pytest.approx(-np.pi, abs=1e-15)
    assert m.d == 1 and m.sigma == 1.0 and m.L == 2.0


def test_ou_drift_is_linear():
    m = M.ornstein_uhlenbeck(math.sqrt(2))
    assert m.drift(1.0) == -1.0
    assert m.K1 == 1.0 and m.K2 == 0.0
    assert m.K3 > 1.0


def test_builtin_model_lookup():
    assert M.builtin_model("shifted-sine").name == "shifted-sine"
    assert M.builtin_model("OU", sigma=2.0).sigma == 2.0
    with pytest.raises(ValueError):
        M.builtin_model("brownian")


def test_model_validation():
    with pytest.raises(ValueError):
        M.SDEModel(d=1, drift=M._ou_drift, sigma=0.0, L=1, K1=1, K2=0, K3=2)
    with pytest.raises(ValueError):
        M.SDEModel(d=1, drift=M._ou_drift, sigma=1.0, L=1, K1=0, K2=0, K3=2)
    with pytest.raises(ValueError):
        M.SDEModel(d=1, drift=M._ou_drift, sigma=1.0, L=1, K1=1, K2=0, K3=1.0)
    with pytest.raises(ValueError):
        M.SDEModel(d=1, drift=M._ou_drift, sigma=1.0, L=1, K1=1, K2=-1, K3=2)


# ---------------------------------------------------------------- generator

def test_generator_linear_phi():
    # drift -x against phi(x) = -x: contribution is (-x)(-1) + 0 = x
    m = M.ornstein_uhlenbeck(math.sqrt(2))
    for x in (-3.0, 0.0, 1.7):
        val = M.generator_apply(m, -x, -1.0, 0.0, x)
        assert val == pytest.approx(x, abs=1e-15)


def test_generator_constant_phi():
    m = M.shifted_sine()
    assert M.generator_apply(m, 5.0, 0.0, 0.0, 2.0) == 0.0


def test_generator_quadratic_phi():
    # phi(x) = x^2 under drift -x gives -2x^2 + sigma^2
    for sigma in (1.0, math.sqrt(2), 3.0):
        m = M.ornstein_uhlenbeck(sigma)
        for x in (-2.0, 0.5):
            val = M.generator_apply(m, x * x, 2 * x, 2.0, x)
            assert val == pytest.approx(-2 * x * x + sigma ** 2, rel=1e-14)


def test_generator_matches_finite_differences():
    """Polynomial phi: generator value vs centered differences of phi along
    the drift direction plus the second-difference diffusion term."""
    m = M.shifted_sine()

    def phi(x):
        return 0.3 * x ** 3 - 1.2 * x ** 2 + 0.5 * x

    hstep = 1e-4
    for x in (-1.3, 0.0, 0.9, 2.4):
        grad_fd = (phi(x + hstep) - phi(x - hstep)) / (2 * hstep)
        hess_fd = (phi(x + hstep) - 2 * phi(x) + phi(x - hstep)) / hstep ** 2
        expected = m.drift(x) * grad_fd + 0.5 * m.sigma_squared * hess_fd
        exact = M.generator_apply(m, phi(x), 0.9 * x ** 2 - 2.4 * x + 0.5,
                                  1.8 * x - 2.4, x)
        assert exact == pytest.approx(expected, abs=1e-6)


def test_generator_vectorized_in_d1():
    m = M.ornstein_uhlenbeck(1.0)
    x = np.array([-1.0, 0.0, 2.0])
    out = M.generator_apply(m, x * x, 2 * x, np.full(3, 2.0), x)
    np.testing.assert_allclose(out, -2 * x * x + 1.0, rtol=1e-14)


def test_generator_shape_mismatch():
    m = M.ornstein_uhlenbeck(1.0)
    with pytest.raises(ValueError):
        M.generator_apply(m, 0.0, np.zeros(2), 0.0, np.zeros(3))


# ------------------------------------------------------------------- probes

def test_ou_probe_equality_case():
    m = M.ornstein_uhlenbeck(1.0)
    rep = M.dissipativity_probe(m, 1000, 5.0, seed=7)
    assert rep.max_violation == 0.0
    assert rep.verdict == "consistent"
    assert rep.lipschitz_ratio == pytest.approx(1.0, rel=1e-12)


def test_shifted_sine_probe_consistent():
    m = M.shifted_sine()
    rep = M.dissipativity_probe(m, 100_000, 20.0, seed=11)
    assert rep.max_violation <= 0.0
    assert rep.verdict == "consistent"
    assert rep.lipschitz_ratio <= 2.0 + 1e-9


def test_shifted_sine_contracts_beyond_pi():
    # grid probe of <b(x)-b(y), x-y> for well separated pairs
    m = M.shifted_sine()
    xs = np.linspace(-15, 15, 301)
    for shift in (np.pi, 4.0, 7.5):
        ys = xs - shift
        inner = (m.drift(xs) - m.drift(ys)) * (xs - ys)
        assert np.all(inner <= 0.0)


def test_probe_deterministic_and_empty():
    m = M.shifted_sine()
    a = M.dissipativity_probe(m, 500, 10.0, seed=3)
    b = M.dissipativity_probe(m, 500, 10.0, seed=3)
    assert a == b
    empty = M.dissipativity_probe(m, 0, 10.0, seed=3)
    assert empty.verdict == "inconclusive"
    assert math.isnan(empty.max_violation)


def test_probe_detects_false_constants():
    # claiming full dissipation (K2 = 0) for the sine-perturbed drift fails
    m = M.SDEModel(d=1, drift=M._shifted_sine_drift, sigma=1.0,
                   L=2.0, K1=0.5, K2=0.0, K3=1.01)
    rep = M.dissipativity_probe(m, 10_000, 5.0, seed=1)
    assert rep.max_violation > 0.0
    assert rep.verdict == "violated"


def test_sigma_condition_spot_check():
    assert M.sigma_condition_check(M.shifted_sine()) <= 0.0
    assert M.sigma_condition_check(M.ornstein_uhlenbeck(math.sqrt(2))) <= 0.0


# ----------------------------------------------------------- test functions

def test_builtin_testfn_values():
    witch = M.builtin_testfn("witch")
    assert witch.h(0.0) == 1.0
    assert witch.h(1.0) == 0.5
    assert witch.lipschitz_bound == pytest.approx(3 * math.sqrt(3) / 8, rel=1e-15)
    ident = M.builtin_testfn("identity")
    assert ident.h(2.5) == 2.5
    sine = M.builtin_testfn("sine")
    assert sine.h(np.pi / 2) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        M.builtin_testfn("cubic")


@pytest.mark.parametrize("name", ["witch", "sine", "identity"])
def test_testfn_lipschitz_bounds_hold(name):
    fn = M.builtin_testfn(name)
    ratio = M.lipschitz_probe(fn.h, fn.lipschitz_bound, 50_000, 15.0, seed=5)
    assert ratio <= fn.lipschitz_bound * (1 + 1e-9)


def test_model_lipschitz_bound_holds():
    m = M.shifted_sine()
    ratio = M.lipschitz_probe(m.drift, m.L, 50_000, 25.0, seed=9)
    assert ratio <= m.L * (1 + 1e-9)


# -------------------------------------------------------------------- kappa

def test_kappa_values():
    m = M.SDEModel(d=1, drift=M._ou_drift, sigma=1.0, L=2.0,
                   K1=1.0, K2=4.0, K3=1.01)
    assert M.kappa(m, 1.0) == 2.0  # min(3, 2)
    assert M.kappa(m, 1e6) == pytest.approx(-1.0, abs=1e-9)
    with pytest.raises(ValueError):
        M.kappa(m, 0.0)


def test_kappa_without_offset_is_constant():
    m = M.ornstein_uhlenbeck(1.0)  # K2 = 0
    r = np.array([0.01, 1.0, 100.0])
    np.testing.assert_array_equal(M.kappa(m, r), np.full(3, -1.0))


@given(st.floats(0.001, 1e5), st.floats(0.001, 1e5))
@settings(max_examples=100, deadline=None)
def test_kappa_monotone_past_cap(r_a, r_b):
    m = M.SDEModel(d=1, drift=M._ou_drift, sigma=1.0, L=2.0,
                   K1=1.0, K2=4.0, K3=1.01)
    # where the cap no longer binds the profile decreases in r
    lo, hi = min(r_a, r_b), max(r_a, r_b)
    if M.kappa(m, lo) < m.L:
        assert M.kappa(m, hi) <= M.kappa(m, lo) + 1e-12
