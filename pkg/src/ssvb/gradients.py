"""Analytic gradients of the reduced cost.

Two consumers: the conjugate-gradient mean phase needs the gradient with
respect to (mu, m), and the variance phase needs the right-hand side of the
fixed-point condition new_var = 1/rhs, where rhs is twice the gradient of
the smooth cost part (everything except the entropy terms) with respect to
(sigma2, v).  Both reuse the residual/Jacobian pass from vb.py; every sum
over samples is an einsum over the fixed bank, so results are deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .odes import OdeSystemSpec
from .vb import (FitConfig, PriorConfig, QmcSampleBank, VariationalState,
                 posterior_lambda_rate, relaxation_residuals)

Array = np.ndarray


@dataclass
class MeanGradient:
    """Gradient w.r.t. the variational means: theta block and state block."""

    d_mu: Array   # (q,)
    d_m: Array    # (n+1, p)

    def ravel(self) -> Array:
        return np.concatenate([self.d_mu, self.d_m.ravel()])


@dataclass
class VarianceRhs:
    """Fixed-point right-hand sides: new sigma2 = 1/d_sigma2, new v = 1/d_v.

    Entries are twice the partial derivatives of the smooth cost part, so a
    positive entry is the reciprocal of the stationarity-optimal variance.
    """

    d_sigma2: Array  # (q,)
    d_v: Array       # (n+1, p)

    def ravel(self) -> Array:
        return np.concatenate([self.d_sigma2, self.d_v.ravel()])


def grad_means(state: VariationalState, data, sys: OdeSystemSpec, cfg: FitConfig,
               bank: QmcSampleBank, priors: PriorConfig) -> MeanGradient:
    """Gradient of the cost w.r.t. (mu, m) at fixed variances.

    Three contributions per state mean: the data misfit through the Gamma
    rate, the incoming transition residual, and the outgoing residual pulled
    back through the transition Jacobian; mu only sees the Jacobian term.
    """
    y = np.asarray(data.y, dtype=float)
    resid, jx, jth = relaxation_residuals(state, data, sys, cfg, bank,
                                          with_jacobians=True)
    tau_m = cfg.tau * bank.m_samples
    w = state.a_lam / posterior_lambda_rate(state, data, priors)

    d_m = w * (state.m - y)
    d_m[1:] += resid.sum(axis=1) / tau_m
    d_m[:-1] -= np.einsum("isab,isa->ib", jx, resid) / tau_m
    d_mu = -np.einsum("isak,isa->k", jth, resid) / tau_m
    return MeanGradient(d_mu=d_mu, d_m=d_m)


def fixed_point_rhs(state: VariationalState, data, sys: OdeSystemSpec,
                    cfg: FitConfig, bank: QmcSampleBank,
                    priors: PriorConfig) -> VarianceRhs:
    """Twice the gradient of the smooth cost part w.r.t. (sigma2, v).

    The derivative passes through the reparameterized samples: a variance
    enters as sqrt(v) * z, so each sample contributes its z weighted by the
    pulled-back residual and divided by the current standard deviation.  The
    final state's rhs has no sample term at all: v_n only appears in the
    Gamma rate and the process-variance penalty.
    """
    resid, jx, jth = relaxation_residuals(state, data, sys, cfg, bank,
                                          with_jacobians=True)
    tau = cfg.tau
    tau_m = tau * bank.m_samples
    w = state.a_lam / posterior_lambda_rate(state, data, priors)

    d_v = np.full_like(state.v, w)
    d_v[1:] += 1.0 / tau
    pulled = np.einsum("isab,isa->isb", jx, resid)       # (n, M, p)
    z_in = np.swapaxes(bank.z_x[:, :-1, :], 0, 1)        # (n, M, p)
    d_v[:-1] -= (z_in * pulled).sum(axis=1) / (np.sqrt(state.v[:-1]) * tau_m)

    pulled_th = np.einsum("isak,isa->sk", jth, resid)    # (M, q)
    d_sigma2 = -(bank.z_theta * pulled_th).sum(axis=0) / (np.sqrt(state.sigma2) * tau_m)
    return VarianceRhs(d_sigma2=d_sigma2, d_v=d_v)
