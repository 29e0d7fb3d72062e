import numpy as np
import pytest

from ssvb.dataio import simulate_dataset
from ssvb.errors import NumericFailure
from ssvb.gradients import fixed_point_rhs
from ssvb.models import resolve_model
from ssvb.optimizer import fit, line_search
from ssvb.vb import FitConfig, PriorConfig, make_bank


# ---------------------------------------------------------------- line search

def test_line_search_exact_on_quadratic():
    # trials at 0, 1, 2 bracket the vertex of (a-2)^2 + 5; the parabola fit
    # must land on it exactly
    calls = []

    def f(a):
        calls.append(a)
        return (a - 2.0) ** 2 + 5.0

    assert line_search(f, alpha_init=1.0) == 2.0
    assert calls[:3] == [0.0, 1.0, 2.0]


def test_line_search_vertex_between_trials():
    step = line_search(lambda a: (a - 0.8) ** 2, alpha_init=1.0)
    assert step == pytest.approx(0.8, abs=1e-12)


def test_line_search_backtracks_on_plateau():
    def f(a):
        return (a - 0.01) ** 2 if a <= 0.02 else 1e6

    step = line_search(f, alpha_init=1.0)
    assert step is not None
    assert 0.0 < step <= 0.02
    assert f(step) < f(0.0)


def test_line_search_gives_up_on_increase():
    assert line_search(lambda a: a, alpha_init=1.0) is None


def test_line_search_accepts_precomputed_f0():
    calls = []

    def f(a):
        calls.append(a)
        return (a - 2.0) ** 2

    assert line_search(f, alpha_init=1.0, f0=4.0) == 2.0
    assert 0.0 not in calls


# ------------------------------------------------------------------ full fits

@pytest.fixture(scope="module")
def fhn_problem():
    bundle = resolve_model("fhn")
    dset = simulate_dataset(bundle.system, np.array([0.2, 0.2, 3.0]),
                            np.array([-1.0, -1.0]), np.linspace(0, 10, 41),
                            0.25, seed=5)
    priors = PriorConfig(theta_lo=bundle.theta_lo, theta_hi=bundle.theta_hi)
    cfg = FitConfig(tau=1e-5, step_count=1, m_samples=11, eps=1e-4, seed=2)
    return bundle, dset, priors, cfg


def test_fit_converges_near_truth(fhn_problem):
    bundle, dset, priors, cfg = fhn_problem
    res = fit(dset, bundle.system, priors, cfg)
    assert res.converged
    assert np.all(np.abs(res.theta_mean - [0.2, 0.2, 3.0]) < [0.15, 0.25, 0.35])
    assert np.all(res.theta_sd > 0) and np.all(res.x0_sd > 0)
    assert res.lambda_mean > 0


def test_accepted_trace_is_monotone(fhn_problem):
    bundle, dset, priors, cfg = fhn_problem
    res = fit(dset, bundle.system, priors, cfg)
    trace = np.asarray(res.cost_trace)
    assert trace.size > 2
    assert np.all(np.diff(trace) <= 0.0)
    # outer trace is the per-cycle subset of the same record
    assert np.all(np.diff(res.outer_trace) <= 0.0)


def test_identical_seeds_identical_results(fhn_problem):
    bundle, dset, priors, cfg = fhn_problem
    a = fit(dset, bundle.system, priors, cfg)
    b = fit(dset, bundle.system, priors, cfg)
    assert np.array_equal(a.theta_mean, b.theta_mean)
    assert np.array_equal(a.x0_mean, b.x0_mean)
    assert np.array_equal(a.state.v, b.state.v)
    assert a.cost_trace == b.cost_trace
    assert a.lambda_mean == b.lambda_mean


def test_different_seed_moves_the_bank(fhn_problem):
    bundle, dset, priors, cfg = fhn_problem
    a = fit(dset, bundle.system, priors, cfg)
    cfg2 = FitConfig(tau=cfg.tau, step_count=1, m_samples=11, eps=1e-4, seed=3)
    b = fit(dset, bundle.system, priors, cfg2)
    assert a.cost_trace != b.cost_trace


def test_variances_satisfy_fixed_point(fhn_problem):
    bundle, dset, priors, cfg = fhn_problem
    res = fit(dset, bundle.system, priors, cfg)
    bank = make_bank(cfg.m_samples, bundle.system.dim_params, dset.times.size,
                     bundle.system.dim_state, seed=cfg.seed)
    rhs = fixed_point_rhs(res.state, dset, bundle.system, cfg, bank, priors)
    assert np.allclose(1.0 / rhs.d_v, res.state.v, rtol=1e-2)
    assert np.allclose(1.0 / rhs.d_sigma2, res.state.sigma2, rtol=1e-2)


def test_box_constraints_respected(fhn_problem):
    bundle, dset, _, cfg = fhn_problem
    # deliberately exclude the true theta3 = 3 and pin x0 near the data start
    priors = PriorConfig(theta_lo=np.array([-0.8, -0.8, 0.0]),
                         theta_hi=np.array([0.8, 0.8, 2.5]),
                         x0_lo=np.array([-1.1, -1.1]),
                         x0_hi=np.array([-0.9, -0.9]))
    res = fit(dset, bundle.system, priors, cfg)
    assert np.all(res.theta_mean <= priors.theta_hi + 1e-12)
    assert np.all(res.theta_mean >= priors.theta_lo - 1e-12)
    assert np.all(res.x0_mean <= priors.x0_hi + 1e-12)
    assert np.all(res.x0_mean >= priors.x0_lo - 1e-12)


def test_hopeless_relaxation_raises_after_restarts():
    # tau far below the actual one-step integration error at this coarse
    # grid: every attempt stalls and the fit must say so
    bundle = resolve_model("fhn")
    dset = simulate_dataset(bundle.system, np.array([0.2, 0.2, 3.0]),
                            np.array([-1.0, -1.0]), np.linspace(0, 10, 26),
                            0.25, seed=5)
    priors = PriorConfig(theta_lo=bundle.theta_lo, theta_hi=bundle.theta_hi)
    cfg = FitConfig(tau=1e-4, step_count=1, m_samples=11, eps=1e-4, seed=2,
                    max_restarts=2)
    with pytest.raises(NumericFailure, match="restart"):
        fit(dset, bundle.system, priors, cfg)


def test_result_dict_is_json_ready(fhn_problem):
    import json

    bundle, dset, priors, cfg = fhn_problem
    res = fit(dset, bundle.system, priors, cfg)
    payload = res.as_dict()
    text = json.dumps(payload)
    back = json.loads(text)
    assert back["theta_mean"] == res.theta_mean.tolist()
    assert back["config"]["tau"] == cfg.tau
    assert back["lambda_mean"] == pytest.approx(res.lambda_mean)
