"""Bundled model derivatives, Jacobians, and the model-id registry."""

import numpy as np
import pytest

from fdtools import central_jac, rel_err
from ssvb.errors import ConfigError
from ssvb.models import (TvSirSpec, fitzhugh_nagumo, lorenz96, parse_model,
                         resolve_model, tv_sir, tvsir_initial_coefficients)
from ssvb.odes import integrate
from ssvb.splines import make_basis


def test_fhn_derivative_values():
    sys = fitzhugh_nagumo()
    x = np.array([-1.0, -1.0])
    th = np.array([0.2, 0.2, 3.0])
    d = sys.deriv(x, 0.0, th)
    assert d[0] == pytest.approx(-5.0)
    assert d[1] == pytest.approx(0.2 * 7.0 / 3.0)  # -(-1 - 0.2 - 0.2)/3


def test_fhn_jac_state_values():
    sys = fitzhugh_nagumo()
    x = np.array([-1.0, -1.0])
    th = np.array([0.2, 0.2, 3.0])
    j = sys.jac_state(x, 0.0, th)
    want = np.array([[0.0, 3.0], [-1.0 / 3.0, -0.2 / 3.0]])
    assert np.allclose(j, want)


def test_fhn_jac_params_values():
    sys = fitzhugh_nagumo()
    x = np.array([-1.0, -1.0])
    th = np.array([0.2, 0.2, 3.0])
    j = sys.jac_params(x, 0.0, th)
    want = np.array([
        [0.0, 0.0, -5.0 / 3.0],
        [1.0 / 3.0, 1.0 / 3.0, -1.4 / 9.0],
    ])
    assert np.allclose(j, want)


def test_lorenz96_derivative_values():
    sys = lorenz96(4)
    x = np.array([1.0, 8.0, 4.0, 3.0])
    th = np.array([1.0, 1.0, 8.0] * 4)
    assert np.allclose(sys.deriv(x, 0.0, th), [19.0, 1.0, 20.0, -23.0])


@pytest.mark.parametrize("p", [3, 4, 5, 10])
def test_lorenz96_jacobians_match_fd(p):
    # p = 3 and p = 4 make neighbour indices coincide; the analytic Jacobian
    # must accumulate those contributions rather than overwrite them
    sys = lorenz96(p)
    rng = np.random.default_rng(p)
    x = rng.normal(size=p) * 3.0
    th = rng.uniform(0.2, 2.0, size=3 * p)
    jx = sys.jac_state(x, 0.0, th)
    jth = sys.jac_params(x, 0.0, th)
    assert rel_err(jx, central_jac(lambda v: sys.deriv(v, 0.0, th), x)) < 1e-8
    assert rel_err(jth, central_jac(lambda v: sys.deriv(x, 0.0, v), th)) < 1e-8


def test_lorenz96_param_packing_is_site_major():
    sys = lorenz96(5)
    x = np.arange(1.0, 6.0)
    th = np.ones(15)
    jth = sys.jac_params(x, 0.0, th)
    for j in range(5):
        cols = np.nonzero(np.abs(jth[j]) > 0)[0]
        assert set(cols) <= {3 * j, 3 * j + 1, 3 * j + 2}
        assert jth[j, 3 * j + 2] == 1.0


def test_fhn_jacobians_match_fd():
    sys = fitzhugh_nagumo()
    rng = np.random.default_rng(1)
    for _ in range(5):
        x = rng.normal(size=2) * 2.0
        th = np.array([rng.uniform(-0.8, 0.8), rng.uniform(-0.8, 0.8), rng.uniform(0.5, 8.0)])
        assert rel_err(sys.jac_state(x, 0.0, th),
                       central_jac(lambda v: sys.deriv(v, 0.0, th), x)) < 1e-7
        assert rel_err(sys.jac_params(x, 0.0, th),
                       central_jac(lambda v: sys.deriv(x, 0.0, v), th)) < 1e-7


def _small_tvsir(nbasis=5, population=1000.0):
    basis = make_basis(0.0, 10.0, nbasis)
    return TvSirSpec(population=population, basis_beta=basis, basis_gamma=basis)


def test_tvsir_constant_rate_derivative():
    # clamped bases sum to one, so constant coefficients log(r) give rate r
    spec = _small_tvsir()
    sys = tv_sir(spec)
    th = np.concatenate([np.full(5, np.log(0.5)), np.full(5, np.log(0.1))])
    d = sys.deriv(np.array([10.0, 0.0]), 3.0, th)
    assert d[0] == pytest.approx(0.5 * 10.0 * 990.0 / 1000.0 - 0.1 * 10.0)
    assert d[1] == pytest.approx(1.0)


def test_tvsir_rates_positive_and_time_varying():
    spec = _small_tvsir()
    rng = np.random.default_rng(2)
    th = rng.normal(size=10)
    beta, gamma = spec.rates(th, np.linspace(0.0, 10.0, 7))
    assert beta.shape == (7,)
    assert np.all(beta > 0) and np.all(gamma > 0)
    assert np.std(beta) > 0


def test_tvsir_jacobians_match_fd():
    spec = _small_tvsir()
    sys = tv_sir(spec)
    rng = np.random.default_rng(3)
    for _ in range(5):
        x = np.array([rng.uniform(1.0, 200.0), rng.uniform(0.0, 300.0)])
        th = rng.normal(scale=0.5, size=10)
        t = rng.uniform(0.0, 10.0)
        assert rel_err(sys.jac_state(x, t, th),
                       central_jac(lambda v: sys.deriv(v, t, th), x)) < 1e-6
        assert rel_err(sys.jac_params(x, t, th),
                       central_jac(lambda v: sys.deriv(x, t, v), th)) < 1e-6


def test_tvsir_batched_evaluation_shapes():
    spec = _small_tvsir()
    sys = tv_sir(spec)
    x = np.abs(np.random.default_rng(0).normal(size=(6, 4, 2))) * 10.0
    th = np.random.default_rng(1).normal(size=(4, 10), scale=0.3)
    t = np.linspace(0.0, 9.0, 6)[:, None]
    d = sys.deriv(x, t, th)
    assert d.shape == (6, 4, 2)
    assert sys.jac_state(x, t, th).shape == (6, 4, 2, 2)
    assert sys.jac_params(x, t, th).shape == (6, 4, 2, 10)


def test_tvsir_mass_is_conserved_along_trajectories():
    # dI + dR + dS = 0 by construction; integrate and check I + R stays
    # below N while S + I + R equals N when S is reconstructed
    spec = _small_tvsir()
    sys = tv_sir(spec)
    th = np.concatenate([np.full(5, np.log(0.4)), np.full(5, np.log(0.15))])
    grid = np.linspace(0.0, 10.0, 21)
    curve = integrate(sys, np.array([5.0, 0.0]), th, grid, substeps=16)
    assert np.all(curve > -1e-9)
    assert np.all(curve.sum(axis=-1) < spec.population)


def test_tvsir_initial_coefficients_recover_constant_rates():
    spec = _small_tvsir(population=1e6)
    sys = tv_sir(spec)
    th_true = np.concatenate([np.full(5, np.log(0.5)), np.full(5, np.log(0.1))])
    grid = np.linspace(0.0, 10.0, 41)
    curve = integrate(sys, np.array([100.0, 0.0]), th_true, grid, substeps=16)
    coef = tvsir_initial_coefficients(spec, grid, curve)
    beta, gamma = spec.rates(coef, grid[5:-5])
    assert np.all(np.abs(np.log(beta) - np.log(0.5)) < 0.2)
    assert np.all(np.abs(np.log(gamma) - np.log(0.1)) < 0.2)


def test_parse_model():
    assert parse_model("fhn") == ("fhn", None)
    assert parse_model("lorenz96:10") == ("lorenz96", 10)
    assert parse_model("tvsir:25") == ("tvsir", 25)
    for bad in ("nope", "fhn:2", "lorenz96", "lorenz96:x", "tvsir:0"):
        with pytest.raises(ConfigError):
            parse_model(bad)


def test_resolve_model_fhn_defaults():
    bundle = resolve_model("fhn")
    assert bundle.system.dim_state == 2
    assert bundle.theta_names == ["a", "b", "c"]
    assert np.allclose(bundle.theta_lo, [-0.8, -0.8, 0.0])
    assert np.allclose(bundle.theta_hi, [0.8, 0.8, 8.0])


def test_resolve_model_lorenz96_defaults():
    bundle = resolve_model("lorenz96:4")
    assert bundle.system.dim_params == 12
    assert bundle.theta_names[:3] == ["adv1", "diss1", "forc1"]
    assert np.allclose(bundle.theta_lo, [0.0] * 12)
    assert np.allclose(bundle.theta_hi, [2.0, 2.0, 16.0] * 4)


def test_resolve_model_tvsir_needs_context():
    with pytest.raises(ConfigError):
        resolve_model("tvsir:8")
    bundle = resolve_model("tvsir:8", times=np.linspace(0, 30, 31), population=5e5)
    assert bundle.system.dim_params == 16
    assert np.all(np.isinf(bundle.theta_lo))
    assert bundle.tvsir is not None
    assert bundle.tvsir.basis_beta.count == 8
