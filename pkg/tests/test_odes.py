"""RK4 step, composed transitions, Jacobian recursions, integrate."""

import numpy as np
import pytest
from scipy.integrate import solve_ivp

from fdtools import central_jac, rel_err
from ssvb.errors import NumericFailure
from ssvb.models import fitzhugh_nagumo, lorenz96
from ssvb.odes import (OdeSystemSpec, TransitionConfig, integrate, rk4_step,
                       step_jacobians, transition, transition_jacobians,
                       transition_with_jacobians)


def linear_decay():
    """dx/dt = -x with an empty parameter vector."""

    def deriv(x, t, th):
        return -x

    def jac_state(x, t, th):
        p = x.shape[-1]
        batch = x.shape[:-1]
        return np.broadcast_to(-np.eye(p), batch + (p, p)).copy()

    def jac_params(x, t, th):
        return np.zeros(x.shape[:-1] + (x.shape[-1], 0))

    return OdeSystemSpec(name="decay", dim_state=1, dim_params=0,
                         deriv=deriv, jac_state=jac_state, jac_params=jac_params)


def time_ramp():
    """dx/dt = t; RK4 integrates polynomials of degree <= 3 exactly."""

    def deriv(x, t, th):
        return np.broadcast_to(np.asarray(t)[..., None], x.shape).copy()

    def jac_state(x, t, th):
        return np.zeros(x.shape[:-1] + (1, 1))

    def jac_params(x, t, th):
        return np.zeros(x.shape[:-1] + (1, 0))

    return OdeSystemSpec(name="ramp", dim_state=1, dim_params=0,
                         deriv=deriv, jac_state=jac_state, jac_params=jac_params)


EMPTY = np.zeros(0)


def test_rk4_step_hand_computed_decay():
    # dx/dt = -x, x0 = 1, h = 0.1, worked by hand:
    # k1=-0.1  k2=-0.095  k3=-0.09525  k4=-0.090475  ->  x1 = 0.9048375
    out = rk4_step(linear_decay(), np.array([1.0]), 0.0, 0.1, EMPTY)
    assert out.shape == (1,)
    assert out[0] == pytest.approx(0.9048375, abs=1e-15)


def test_rk4_step_matches_exponential_to_fourth_order():
    out = rk4_step(linear_decay(), np.array([1.0]), 0.0, 0.1, EMPTY)
    assert abs(out[0] - np.exp(-0.1)) < 1e-7


def test_transition_advances_time_between_substeps():
    # exact integral of f = t over [t0, t0+h] is h*t0 + h^2/2; every RK4
    # substep is exact here, so any m must reproduce it to roundoff.  A
    # transition that forgets to advance t gives h*t0 + h^2/(2m) instead.
    sys = time_ramp()
    t0, h = 1.5, 0.8
    want = h * t0 + 0.5 * h * h
    for m in (1, 2, 3, 5):
        cfg = TransitionConfig(interval=h, step_count=m)
        out = transition(sys, np.array([0.0]), t0, EMPTY, cfg)
        assert out[0] == pytest.approx(want, rel=1e-14)


def test_transition_composition_identity():
    sys = fitzhugh_nagumo()
    x = np.array([-1.0, 1.0])
    th = np.array([0.2, 0.2, 3.0])
    cfg = TransitionConfig(interval=0.4, step_count=2)
    two = transition(sys, x, 0.0, th, cfg)
    half = rk4_step(sys, x, 0.0, 0.2, th)
    half = rk4_step(sys, half, 0.2, 0.2, th)
    assert np.allclose(two, half, rtol=1e-15, atol=0)


@pytest.mark.parametrize("make,x0,th", [
    (fitzhugh_nagumo, [-1.0, -1.0], [0.2, 0.2, 3.0]),
    (lambda: lorenz96(4), [1.0, 8.0, 4.0, 3.0], [1.0, 1.0, 8.0] * 4),
])
def test_substep_halving_is_fourth_order(make, x0, th):
    sys = make()
    x0 = np.array(x0)
    th = np.array(th)
    h = 0.02  # small enough that the h^4 local error term dominates
    ref = transition(sys, x0, 0.0, th, TransitionConfig(interval=h, step_count=256))
    e1 = np.linalg.norm(transition(sys, x0, 0.0, th, TransitionConfig(interval=h, step_count=1)) - ref)
    e2 = np.linalg.norm(transition(sys, x0, 0.0, th, TransitionConfig(interval=h, step_count=2)) - ref)
    assert 14.0 <= e1 / e2 <= 18.0


def test_integrate_matches_scipy_on_fhn():
    sys = fitzhugh_nagumo()
    th = np.array([0.2, 0.2, 3.0])
    x0 = np.array([-1.0, -1.0])
    grid = np.linspace(0.0, 2.0, 21)

    sol = solve_ivp(lambda t, x: sys.deriv(x, t, th), (0.0, 2.0), x0,
                    t_eval=grid, rtol=1e-11, atol=1e-12, method="RK45")
    ours = integrate(sys, x0, th, grid)
    assert ours.shape == (21, 2)
    assert np.max(np.abs(ours - sol.y.T)) < 1e-6


def test_integrate_batched_matches_loop():
    sys = lorenz96(4)
    rng = np.random.default_rng(3)
    x0 = rng.normal(size=(5, 4))
    th = np.abs(rng.normal(size=(5, 12))) + 0.5
    grid = np.linspace(0.0, 1.0, 6)
    batched = integrate(sys, x0, th, grid, substeps=4)
    for b in range(5):
        single = integrate(sys, x0[b], th[b], grid, substeps=4)
        assert np.allclose(batched[b], single, rtol=1e-13, atol=1e-13)


def test_integrate_validates_grid():
    sys = fitzhugh_nagumo()
    with pytest.raises(ValueError):
        integrate(sys, np.zeros(2), np.array([0.2, 0.2, 3.0]), np.array([0.0, 0.0, 1.0]))
    with pytest.raises(ValueError):
        integrate(sys, np.zeros(3), np.array([0.2, 0.2, 3.0]), np.array([0.0, 1.0]))


def test_transition_config_validation():
    with pytest.raises(ValueError):
        TransitionConfig(interval=0.1, step_count=0)
    with pytest.raises(ValueError):
        TransitionConfig(interval=-0.1, step_count=1)


@pytest.mark.parametrize("m", [1, 2, 3, 4])
@pytest.mark.parametrize("make,p,q", [
    (fitzhugh_nagumo, 2, 3),
    (lambda: lorenz96(4), 4, 12),
])
def test_transition_jacobians_match_finite_differences(make, p, q, m):
    sys = make()
    rng = np.random.default_rng(100 + m)
    for _ in range(5):
        x = rng.normal(size=p)
        th = rng.uniform(0.3, 2.0, size=q)
        t0 = rng.uniform(0.0, 1.0)
        cfg = TransitionConfig(interval=0.1, step_count=m)
        jx, jth = transition_jacobians(sys, x, t0, th, cfg)
        fd_x = central_jac(lambda v: transition(sys, v, t0, th, cfg), x)
        fd_th = central_jac(lambda v: transition(sys, x, t0, v, cfg), th)
        assert rel_err(jx, fd_x) < 1e-5
        assert rel_err(jth, fd_th) < 1e-5


def test_step_jacobians_batched_matches_loop():
    sys = fitzhugh_nagumo()
    rng = np.random.default_rng(7)
    x = rng.normal(size=(3, 4, 2))
    th = rng.uniform(0.5, 2.0, size=(4, 3))
    jx, jth = step_jacobians(sys, x, 0.3, 0.1, th)
    assert jx.shape == (3, 4, 2, 2)
    assert jth.shape == (3, 4, 2, 3)
    for i in range(3):
        for s in range(4):
            jx1, jth1 = step_jacobians(sys, x[i, s], 0.3, 0.1, th[s])
            assert np.allclose(jx[i, s], jx1, rtol=1e-13)
            assert np.allclose(jth[i, s], jth1, rtol=1e-13)


def test_transition_with_jacobians_returns_consistent_state():
    sys = lorenz96(4)
    x = np.array([1.0, 8.0, 4.0, 3.0])
    th = np.array([1.0, 1.0, 8.0] * 4)
    cfg = TransitionConfig(interval=0.05, step_count=3)
    out, jx, jth = transition_with_jacobians(sys, x, 0.0, th, cfg)
    assert np.allclose(out, transition(sys, x, 0.0, th, cfg), rtol=1e-14)
    jx2, jth2 = transition_jacobians(sys, x, 0.0, th, cfg)
    assert np.allclose(jx, jx2)
    assert np.allclose(jth, jth2)


def test_non_finite_state_raises():
    sys = lorenz96(4)
    th = np.array([1.0, 1.0, 8.0] * 4)
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(NumericFailure):
            x = np.array([1e200, -1e200, 1e200, -1e200])
            for _ in range(10):
                x = rk4_step(sys, x, 0.0, 1.0, th)


def test_check_false_lets_non_finite_through():
    sys = lorenz96(4)
    th = np.array([1.0, 1.0, 8.0] * 4)
    with np.errstate(over="ignore", invalid="ignore"):
        x = np.array([1e200, -1e200, 1e200, -1e200])
        for _ in range(10):
            x = rk4_step(sys, x, 0.0, 1.0, th, check=False)
    assert not np.all(np.isfinite(x))
