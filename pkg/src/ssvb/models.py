"""Bundled ODE systems: FitzHugh-Nagumo, Lorenz-96 and a time-varying SIR.

Each builder returns an OdeSystemSpec whose callables accept batched inputs
(see odes.py for the broadcasting convention).  parse_model / resolve_model
map the CLI model ids ("fhn", "lorenz96:<p>", "tvsir:<nbasis>") onto these
builders together with default parameter boxes and display names.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .odes import OdeSystemSpec
from .splines import SplineBasis, basis_eval, lsq_fit, make_basis

Array = np.ndarray


def fitzhugh_nagumo() -> OdeSystemSpec:
    """Two-state neuron model with parameters theta = (a, b, c).

    dx1/dt = c (x1 - x1^3/3 + x2)
    dx2/dt = -(x1 - a + b x2) / c
    """

    def deriv(x, t, th):
        x1, x2 = x[..., 0], x[..., 1]
        a, b, c = th[..., 0], th[..., 1], th[..., 2]
        d1 = c * (x1 - x1 ** 3 / 3.0 + x2)
        d2 = -(x1 - a + b * x2) / c
        return np.stack(np.broadcast_arrays(d1, d2), axis=-1)

    def jac_state(x, t, th):
        x1 = x[..., 0]
        b, c = th[..., 1], th[..., 2]
        j11 = c * (1.0 - x1 ** 2)
        j12 = np.broadcast_to(c, j11.shape)
        j21 = np.broadcast_to(-1.0 / c, j11.shape)
        j22 = np.broadcast_to(-b / c, j11.shape)
        return _rows(j11, j12, j21, j22)

    def jac_params(x, t, th):
        x1, x2 = x[..., 0], x[..., 1]
        a, b, c = th[..., 0], th[..., 1], th[..., 2]
        zero = np.zeros(np.broadcast_shapes(x1.shape, c.shape))
        r1 = [zero, zero, zero + (x1 - x1 ** 3 / 3.0 + x2)]
        r2 = [zero + 1.0 / c, zero - x2 / c, zero + (x1 - a + b * x2) / c ** 2]
        row1 = np.stack(r1, axis=-1)
        row2 = np.stack(r2, axis=-1)
        return np.stack([row1, row2], axis=-2)

    return OdeSystemSpec(name="fhn", dim_state=2, dim_params=3,
                         deriv=deriv, jac_state=jac_state, jac_params=jac_params)


def _rows(j11, j12, j21, j22):
    row1 = np.stack([j11, j12], axis=-1)
    row2 = np.stack([j21, j22], axis=-1)
    return np.stack([row1, row2], axis=-2)


def lorenz96(dim: int) -> OdeSystemSpec:
    """Cyclic Lorenz-96 ring with per-site coefficients.

    dx_j/dt = a_j (x_{j+1} - x_{j-2}) x_{j-1} - d_j x_j + f_j, indices mod p.
    The parameter vector packs (a_j, d_j, f_j) site by site, so q = 3 p.
    Neighbour indices can coincide for p < 5; the Jacobian accumulates those
    contributions instead of overwriting them.
    """
    if dim < 3:
        raise ValueError("lorenz96 needs at least 3 sites")
    p = int(dim)
    jj = np.arange(p)
    c_p1 = (jj + 1) % p
    c_m2 = (jj - 2) % p
    c_m1 = (jj - 1) % p

    def _unpack(th):
        return th[..., 0::3], th[..., 1::3], th[..., 2::3]

    def deriv(x, t, th):
        adv, dis, forc = _unpack(th)
        xp1 = np.roll(x, -1, axis=-1)
        xm2 = np.roll(x, 2, axis=-1)
        xm1 = np.roll(x, 1, axis=-1)
        return adv * (xp1 - xm2) * xm1 - dis * x + forc

    def jac_state(x, t, th):
        adv, dis, _ = _unpack(th)
        xp1 = np.roll(x, -1, axis=-1)
        xm2 = np.roll(x, 2, axis=-1)
        xm1 = np.roll(x, 1, axis=-1)
        batch = np.broadcast_shapes(x.shape, adv.shape)[:-1]
        jac = np.zeros(batch + (p, p))
        jac[..., jj, c_p1] += np.broadcast_to(adv * xm1, batch + (p,))
        jac[..., jj, c_m2] += np.broadcast_to(-adv * xm1, batch + (p,))
        jac[..., jj, c_m1] += np.broadcast_to(adv * (xp1 - xm2), batch + (p,))
        jac[..., jj, jj] += np.broadcast_to(-dis, batch + (p,))
        return jac

    def jac_params(x, t, th):
        adv, _, _ = _unpack(th)
        xp1 = np.roll(x, -1, axis=-1)
        xm2 = np.roll(x, 2, axis=-1)
        xm1 = np.roll(x, 1, axis=-1)
        batch = np.broadcast_shapes(x.shape, adv.shape)[:-1]
        jac = np.zeros(batch + (p, 3 * p))
        jac[..., jj, 3 * jj] = np.broadcast_to((xp1 - xm2) * xm1, batch + (p,))
        jac[..., jj, 3 * jj + 1] = np.broadcast_to(-x, batch + (p,))
        jac[..., jj, 3 * jj + 2] = 1.0
        return jac

    return OdeSystemSpec(name=f"lorenz96:{p}", dim_state=p, dim_params=3 * p,
                         deriv=deriv, jac_state=jac_state, jac_params=jac_params)


@dataclass(frozen=True)
class TvSirSpec:
    """SIR compartments with log-spline transmission and recovery rates.

    State is (I, R); the susceptible pool is S = N - I - R.  The rates are
    beta(t) = exp(sum_l c_beta_l B_l(t)) and gamma(t) likewise, with the
    coefficient vectors concatenated into the ODE parameter vector.
    """

    population: float
    basis_beta: SplineBasis
    basis_gamma: SplineBasis

    @property
    def dim_params(self) -> int:
        return self.basis_beta.count + self.basis_gamma.count

    def split(self, th: Array):
        nb = self.basis_beta.count
        return th[..., :nb], th[..., nb:]

    def rates(self, th: Array, t):
        """(beta, gamma) at time(s) t for coefficient vector(s) th."""
        cb, cg = self.split(th)
        bb = basis_eval(self.basis_beta, t)
        bg = basis_eval(self.basis_gamma, t)
        beta = np.exp((bb * cb).sum(axis=-1))
        gamma = np.exp((bg * cg).sum(axis=-1))
        return beta, gamma


def tv_sir(spec: TvSirSpec) -> OdeSystemSpec:
    """Build the (I, R) system for a TvSirSpec."""
    n_pop = float(spec.population)
    nb = spec.basis_beta.count

    def _common(x, t, th):
        i, r = x[..., 0], x[..., 1]
        beta, gamma = spec.rates(th, t)
        s_frac = (n_pop - i - r) / n_pop
        return i, r, beta, gamma, s_frac

    def deriv(x, t, th):
        i, _, beta, gamma, s_frac = _common(x, t, th)
        di = beta * i * s_frac - gamma * i
        dr = gamma * i
        return np.stack(np.broadcast_arrays(di, dr), axis=-1)

    def jac_state(x, t, th):
        i, _, beta, gamma, s_frac = _common(x, t, th)
        j11 = beta * (s_frac - i / n_pop) - gamma
        j12 = -beta * i / n_pop
        j21 = gamma + 0.0 * i
        j22 = np.zeros(np.broadcast_shapes(j11.shape, j21.shape))
        return _rows(j11, j12, np.broadcast_to(j21, j22.shape), j22)

    def jac_params(x, t, th):
        i, _, beta, gamma, s_frac = _common(x, t, th)
        bb = basis_eval(spec.basis_beta, t)
        bg = basis_eval(spec.basis_gamma, t)
        d_i_cb = (beta * i * s_frac)[..., None] * bb
        d_i_cg = (-gamma * i)[..., None] * bg
        d_r_cg = (gamma * i)[..., None] * bg
        batch = np.broadcast_shapes(d_i_cb.shape[:-1], d_r_cg.shape[:-1])
        jac = np.zeros(batch + (2, spec.dim_params))
        jac[..., 0, :nb] = d_i_cb
        jac[..., 0, nb:] = d_i_cg
        jac[..., 1, nb:] = d_r_cg
        return jac

    return OdeSystemSpec(name="tvsir", dim_state=2, dim_params=spec.dim_params,
                         deriv=deriv, jac_state=jac_state, jac_params=jac_params)


def tvsir_initial_coefficients(spec: TvSirSpec, times: Array, y: Array) -> Array:
    """Starting coefficients from crude finite-difference rate estimates.

    gamma_hat = (dR/dt) / I and beta_hat = (dI/dt + dR/dt) / (I S / N); both
    are clipped away from zero, logged, and least-squares fitted in the two
    spline bases.  Good enough to start the optimizer in the right decade.
    """
    times = np.asarray(times, dtype=float)
    i_obs = np.maximum(np.asarray(y[:, 0], dtype=float), 1.0)
    r_obs = np.asarray(y[:, 1], dtype=float)
    di = np.gradient(y[:, 0], times)
    dr = np.gradient(r_obs, times)
    s_frac = np.clip((spec.population - i_obs - r_obs) / spec.population, 1e-6, None)
    gamma_hat = np.clip(dr / i_obs, 1e-6, None)
    beta_hat = np.clip((di + dr) / (i_obs * s_frac), 1e-6, None)
    cb = lsq_fit(times, np.log(beta_hat), spec.basis_beta)
    cg = lsq_fit(times, np.log(gamma_hat), spec.basis_gamma)
    return np.concatenate([cb, cg])


@dataclass(frozen=True)
class ModelBundle:
    """A resolved model: system, default parameter box, display names."""

    model_id: str
    system: OdeSystemSpec
    theta_lo: Array
    theta_hi: Array
    theta_names: list[str]
    state_names: list[str]
    tvsir: TvSirSpec | None = None


def parse_model(model_id: str):
    """Split a model id into (family, argument). Argument may be None."""
    parts = model_id.strip().lower().split(":")
    family = parts[0]
    if family not in ("fhn", "lorenz96", "tvsir"):
        raise ConfigError(f"unknown model '{model_id}' (expected fhn, lorenz96:<p> or tvsir:<nbasis>)")
    if family == "fhn":
        if len(parts) > 1:
            raise ConfigError("fhn takes no argument")
        return family, None
    if len(parts) != 2:
        raise ConfigError(f"model '{model_id}' needs an argument, e.g. {family}:4")
    try:
        arg = int(parts[1])
    except ValueError:
        raise ConfigError(f"model argument in '{model_id}' must be an integer") from None
    if arg < 1:
        raise ConfigError(f"model argument in '{model_id}' must be positive")
    return family, arg


def resolve_model(model_id: str, times: Array | None = None,
                  population: float | None = None) -> ModelBundle:
    """Build the system named by a model id.

    tvsir additionally needs the observation times (to place the spline
    knots) and the population size.
    """
    family, arg = parse_model(model_id)
    if family == "fhn":
        lo = np.array([-0.8, -0.8, 0.0])
        hi = np.array([0.8, 0.8, 8.0])
        return ModelBundle(model_id="fhn", system=fitzhugh_nagumo(),
                           theta_lo=lo, theta_hi=hi,
                           theta_names=["a", "b", "c"],
                           state_names=["x1", "x2"])
    if family == "lorenz96":
        p = arg
        lo = np.tile([0.0, 0.0, 0.0], p)
        hi = np.tile([2.0, 2.0, 16.0], p)
        names = []
        for j in range(1, p + 1):
            names += [f"adv{j}", f"diss{j}", f"forc{j}"]
        return ModelBundle(model_id=f"lorenz96:{p}", system=lorenz96(p),
                           theta_lo=lo, theta_hi=hi, theta_names=names,
                           state_names=[f"x{j}" for j in range(1, p + 1)])
    # tvsir
    if times is None or population is None:
        raise ConfigError("tvsir needs observation times and --population")
    times = np.asarray(times, dtype=float)
    nbasis = arg
    if nbasis < 4:
        raise ConfigError("tvsir needs at least 4 basis functions")
    basis = make_basis(float(times[0]), float(times[-1]), nbasis)
    spec = TvSirSpec(population=float(population), basis_beta=basis, basis_gamma=basis)
    q = spec.dim_params
    lo = np.full(q, -np.inf)
    hi = np.full(q, np.inf)
    names = [f"cbeta{j}" for j in range(1, nbasis + 1)]
    names += [f"cgamma{j}" for j in range(1, nbasis + 1)]
    return ModelBundle(model_id=f"tvsir:{nbasis}", system=tv_sir(spec),
                       theta_lo=lo, theta_hi=hi, theta_names=names,
                       state_names=["I", "R"], tvsir=spec)
