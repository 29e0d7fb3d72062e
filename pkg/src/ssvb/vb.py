"""Mean-field variational family and the reduced optimization cost.

The state-space relaxation of the ODE regression model has latent states
x_0..x_n, a noise precision lambda with a Gamma prior, and ODE parameters
theta with box priors.  The variational family factorizes as

    Gamma(lambda | a_lam, b_lam) * N(theta | mu, diag(sigma2))
                                 * prod_i N(x_i | m_i, diag(v_i))

where the Gamma factor has closed-form updates: a_lam is a constant fixed
by the model size, b_lam is a function of the current state means and
variances.  The intractable expectation of the transition penalty is
replaced by a quasi Monte Carlo average over a fixed bank of standard
normal quantiles, one independently shuffled column per latent scalar, so
the cost is a deterministic function of the variational parameters for the
whole run.  All constant terms are dropped.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import ndtri

from .errors import NumericFailure
from .odes import (OdeSystemSpec, TransitionConfig, transition,
                   transition_with_jacobians)

Array = np.ndarray


@dataclass
class PriorConfig:
    """Gamma(shape, rate) prior on the noise precision plus independent
    box priors on theta and optionally on the initial state.

    Infinite box edges are allowed; they leave the coordinate free.  The
    normal variational factors are not truncated at the box: the bounds act
    only as projection constraints during optimization.
    """

    theta_lo: Array
    theta_hi: Array
    lambda_shape: float = 1.0
    lambda_rate: float = 1.0
    x0_lo: Array | None = None
    x0_hi: Array | None = None

    def __post_init__(self):
        self.theta_lo = np.asarray(self.theta_lo, dtype=float)
        self.theta_hi = np.asarray(self.theta_hi, dtype=float)
        if self.theta_lo.shape != self.theta_hi.shape or self.theta_lo.ndim != 1:
            raise ValueError("theta bounds must be 1-d arrays of equal length")
        if np.any(self.theta_lo > self.theta_hi):
            raise ValueError("theta_lo must not exceed theta_hi")
        if not (self.lambda_shape > 0 and self.lambda_rate > 0):
            raise ValueError("lambda prior shape and rate must be positive")
        for name in ("x0_lo", "x0_hi"):
            val = getattr(self, name)
            if val is not None:
                setattr(self, name, np.asarray(val, dtype=float))
        if (self.x0_lo is None) != (self.x0_hi is None):
            raise ValueError("x0 bounds must be given together")
        if self.x0_lo is not None and np.any(self.x0_lo > self.x0_hi):
            raise ValueError("x0_lo must not exceed x0_hi")

    @property
    def dim_params(self) -> int:
        return self.theta_lo.size


@dataclass
class FitConfig:
    """Everything the optimizer needs besides data and priors.

    tau is the relaxation variance of the state transitions and step_count
    the number of RK4 substeps per observation interval; both typically come
    out of the tuning procedure.  m_samples must be odd so the quantile bank
    contains the median.  theta_var_init overrides the box-derived initial
    theta variances; a small value keeps the first natural-gradient steps
    short, which matters when the parameters are unbounded and the cost has
    flat regions the line search could overshoot into.
    """

    tau: float
    step_count: int = 1
    m_samples: int = 11
    eps: float = 1e-6
    seed: int = 0
    alpha_init: float = 1.0
    theta_var_init: float | None = None
    max_cycles: int = 60
    max_mean_iters: int = 200
    max_fp_iters: int = 200
    max_restarts: int = 10
    deterministic: bool = True

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.step_count < 1:
            raise ValueError("step_count must be at least 1")
        if self.m_samples < 1 or self.m_samples % 2 == 0:
            raise ValueError("m_samples must be a positive odd integer")
        if self.eps <= 0 or self.alpha_init <= 0:
            raise ValueError("eps and alpha_init must be positive")
        if self.theta_var_init is not None and self.theta_var_init <= 0:
            raise ValueError("theta_var_init must be positive when given")


@dataclass
class VariationalState:
    """Free parameters of the mean-field posterior.

    a_lam is the (constant) Gamma shape; the rate b_lam is derivable from
    (m, v) and the data at any time, so it is carried only as a convenience
    cache that posterior_rate() refreshes.
    """

    mu: Array
    sigma2: Array
    m: Array
    v: Array
    a_lam: float
    b_lam: float = np.nan

    def copy(self) -> "VariationalState":
        return VariationalState(mu=self.mu.copy(), sigma2=self.sigma2.copy(),
                                m=self.m.copy(), v=self.v.copy(),
                                a_lam=self.a_lam, b_lam=self.b_lam)

    @property
    def dim_params(self) -> int:
        return self.mu.size

    @property
    def n_points(self) -> int:
        return self.m.shape[0]

    @property
    def dim_state(self) -> int:
        return self.m.shape[1]


@dataclass(frozen=True)
class QmcSampleBank:
    """Fixed bank of shuffled standard normal quantiles.

    Row s holds the s-th draw of every latent scalar; each column is an
    independent permutation of the same symmetric quantile ladder, so
    marginals are exact while the cross-sample coupling is broken.
    """

    m_samples: int
    z_theta: Array  # (M, q)
    z_x: Array      # (M, n+1, p)
    seed: int


def base_quantiles(m_samples: int) -> Array:
    """Normal quantiles at the midpoints s/M - 1/(2M), s = 1..M."""
    if m_samples < 1 or m_samples % 2 == 0:
        raise ValueError("m_samples must be a positive odd integer")
    u = (np.arange(1, m_samples + 1) - 0.5) / m_samples
    return ndtri(u)


def make_bank(m_samples: int, dim_params: int, n_points: int, dim_state: int,
              seed: int) -> QmcSampleBank:
    """Shuffle the quantile ladder once per latent scalar column.

    Column order is fixed (theta coordinates first, then states in time-major
    order) so a given seed always produces the same bank.
    """
    base = base_quantiles(m_samples)
    rng = np.random.default_rng(seed)
    ncol = dim_params + n_points * dim_state
    cols = np.empty((m_samples, ncol))
    for c in range(ncol):
        cols[:, c] = rng.permutation(base)
    z_theta = cols[:, :dim_params]
    z_x = cols[:, dim_params:].reshape(m_samples, n_points, dim_state)
    return QmcSampleBank(m_samples=m_samples, z_theta=z_theta, z_x=z_x, seed=seed)


def realize(bank: QmcSampleBank, state: VariationalState):
    """Reparameterized samples (theta_s, x_s) at the current state."""
    theta_s = state.mu + np.sqrt(state.sigma2) * bank.z_theta
    x_s = state.m + np.sqrt(state.v) * bank.z_x
    return theta_s, x_s


def posterior_lambda_shape(priors: PriorConfig, n_points: int, dim_state: int) -> float:
    """Closed-form Gamma shape: prior shape + (number of observed scalars)/2."""
    return priors.lambda_shape + 0.5 * dim_state * n_points


def posterior_lambda_rate(state: VariationalState, data, priors: PriorConfig) -> float:
    """Closed-form Gamma rate: prior rate + half the expected squared misfit."""
    y = np.asarray(data.y, dtype=float)
    return priors.lambda_rate + 0.5 * float(((state.m - y) ** 2 + state.v).sum())


def relaxation_residuals(state: VariationalState, data, sys: OdeSystemSpec,
                         cfg: FitConfig, bank: QmcSampleBank,
                         with_jacobians: bool = False, check: bool = True):
    """Transition residuals r[i, s] = m_{i+1} - g(x_i^(s), t_i, theta^(s)).

    Returns (resid, jx, jth) with resid of shape (n, M, p); the Jacobians of
    the transition map at the sampled inputs are None unless requested.
    This is the single expensive pass shared by the cost and the gradients.
    """
    times = np.asarray(data.times, dtype=float)
    theta_s, x_s = realize(bank, state)
    x_in = np.swapaxes(x_s[:, :-1, :], 0, 1)  # (n, M, p)
    tcfg = TransitionConfig(interval=np.diff(times)[:, None], step_count=cfg.step_count)
    t_in = times[:-1][:, None]
    # trial states probed by the line search may overflow or hit a pole of
    # the model; compute quietly, the finite checks turn bad values into
    # NumericFailure which callers treat as an infinite cost
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        if with_jacobians:
            g, jx, jth = transition_with_jacobians(sys, x_in, t_in, theta_s, tcfg, check=check)
        else:
            g = transition(sys, x_in, t_in, theta_s, tcfg, check=check)
            jx = jth = None
    resid = state.m[1:, None, :] - g
    return resid, jx, jth


def cost_terms(state: VariationalState, data, sys: OdeSystemSpec, cfg: FitConfig,
               bank: QmcSampleBank, priors: PriorConfig) -> dict:
    """The reduced cost split into named pieces (constants dropped).

    'smooth' pieces (everything but the entropy terms) are what the variance
    fixed point differentiates; the full cost adds the entropies.
    """
    if np.any(state.v <= 0) or np.any(state.sigma2 <= 0):
        raise NumericFailure("non-positive variational variance")
    b_lam = posterior_lambda_rate(state, data, priors)
    resid, _, _ = relaxation_residuals(state, data, sys, cfg, bank)
    with np.errstate(over="ignore"):
        mc = float((resid ** 2).sum())
    return {
        "lambda_term": state.a_lam * float(np.log(b_lam)),
        "process_var_term": float(state.v[1:].sum()) / (2.0 * cfg.tau),
        "mc_term": mc / (2.0 * cfg.tau * bank.m_samples),
        "entropy_theta": -0.5 * float(np.log(state.sigma2).sum()),
        "entropy_state": -0.5 * float(np.log(state.v).sum()),
    }


def cost(state: VariationalState, data, sys: OdeSystemSpec, cfg: FitConfig,
         bank: QmcSampleBank, priors: PriorConfig) -> float:
    """Reduced variational cost at the current state.

    Raises NumericFailure when the value is not finite.
    """
    terms = cost_terms(state, data, sys, cfg, bank, priors)
    val = sum(terms.values())
    if not np.isfinite(val):
        raise NumericFailure("cost is not finite")
    return float(val)


def cost_smooth(state: VariationalState, data, sys: OdeSystemSpec, cfg: FitConfig,
                bank: QmcSampleBank, priors: PriorConfig) -> float:
    """Cost without the entropy terms; used by the variance fixed point."""
    terms = cost_terms(state, data, sys, cfg, bank, priors)
    return terms["lambda_term"] + terms["process_var_term"] + terms["mc_term"]


def pack_means(state: VariationalState) -> Array:
    """Concatenate (mu, m) into the flat vector the mean phase optimizes."""
    return np.concatenate([state.mu, state.m.ravel()])


def with_means(state: VariationalState, u: Array) -> VariationalState:
    """A copy of the state with means replaced by the flat vector u."""
    q = state.mu.size
    out = state.copy()
    out.mu = u[:q].copy()
    out.m = u[q:].reshape(state.m.shape).copy()
    return out


def pack_variances(state: VariationalState) -> Array:
    return np.concatenate([state.sigma2, state.v.ravel()])


def with_variances(state: VariationalState, w: Array) -> VariationalState:
    q = state.sigma2.size
    out = state.copy()
    out.sigma2 = w[:q].copy()
    out.v = w[q:].reshape(state.v.shape).copy()
    return out
