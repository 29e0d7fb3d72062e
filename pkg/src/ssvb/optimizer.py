"""Alternating optimizer for the variational cost.

Means (mu, m) move along approximate Riemannian conjugate-gradient
directions: the plain gradient is preconditioned by the current variances
(the inverse Fisher metric of a diagonal Gaussian restricted to its means),
combined with a Polak-Ribiere momentum term clipped at zero, and stepped by
a three-point quadratic line search.  Variances (sigma2, v) then satisfy a
one-dimensional stationarity condition each, solved by fixed-point
iteration; the update direction is always a descent direction in log space,
so a geometric backtrack toward the proposal keeps the cost monotone
without changing the fixed point.  The two phases alternate with the mean
tolerance tightening by a decade per cycle until it reaches eps.

Restarts: any non-finite value, or a line search that fails while the
directional derivative is still large, abandons the attempt and restarts
from a fresh prior draw, up to max_restarts times.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Callable

import numpy as np

from .errors import NumericFailure
from .gradients import fixed_point_rhs, grad_means
from .odes import OdeSystemSpec
from .splines import smooth_start
from .vb import (FitConfig, PriorConfig, QmcSampleBank, VariationalState,
                 cost, make_bank, pack_means, pack_variances,
                 posterior_lambda_rate, posterior_lambda_shape, with_means,
                 with_variances)

if TYPE_CHECKING:  # pragma: no cover
    from .dataio import ObservationSet

Array = np.ndarray

LINE_SEARCH_SHRINKS = 20
FP_BACKTRACKS = 12
FP_GROWTH_CAP = 100.0
VAR_FLOOR = 1e-12
STALL_TOL = 1e-8


def line_search(cost_along: Callable[[float], float], alpha_init: float,
                f0: float | None = None) -> float | None:
    """Three-point quadratic line search.

    Evaluates the cost at 0, alpha_init and 2*alpha_init, fits a parabola,
    and takes whichever of the trial points and the parabola minimizer is
    best, provided it beats the cost at 0.  Otherwise backtracks by halving
    up to 20 times.  Returns the accepted step, or None when no decreasing
    step was found.
    """
    if f0 is None:
        f0 = cost_along(0.0)
    a1 = float(alpha_init)
    f1 = cost_along(a1)
    a2 = 2.0 * a1
    f2 = cost_along(a2)
    best_a, best_f = (a1, f1) if f1 <= f2 else (a2, f2)
    denom = f0 - 2.0 * f1 + f2
    if np.isfinite(denom) and denom > 0.0:
        astar = a1 * (3.0 * f0 - 4.0 * f1 + f2) / (2.0 * denom)
        if np.isfinite(astar) and astar > 0.0:
            fstar = cost_along(astar)
            if fstar < best_f:
                best_a, best_f = astar, fstar
    if best_f < f0:
        return best_a
    a = a1
    for _ in range(LINE_SEARCH_SHRINKS):
        a *= 0.5
        if cost_along(a) < f0:
            return a
    return None


@dataclass
class FitResult:
    """Posterior summaries plus everything needed to reproduce the run."""

    state: VariationalState
    theta_mean: Array
    theta_sd: Array
    x0_mean: Array
    x0_sd: Array
    lambda_mean: float
    cost_trace: list[float]
    outer_trace: list[float]
    restarts: int
    seconds: float
    converged: bool
    diagnostics: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "theta_mean": self.theta_mean.tolist(),
            "theta_sd": self.theta_sd.tolist(),
            "x0_mean": self.x0_mean.tolist(),
            "x0_sd": self.x0_sd.tolist(),
            "lambda_mean": float(self.lambda_mean),
            "cost_trace": [float(c) for c in self.cost_trace],
            "restarts": int(self.restarts),
            "seconds": float(self.seconds),
            "converged": bool(self.converged),
            "diagnostics": self.diagnostics,
            "config": self.config,
        }


def _box_midpoint(lo: Array, hi: Array) -> Array:
    """Representative interior point of a (possibly unbounded) box."""
    mid = np.zeros_like(lo)
    both = np.isfinite(lo) & np.isfinite(hi)
    mid[both] = 0.5 * (lo[both] + hi[both])
    only_lo = np.isfinite(lo) & ~np.isfinite(hi)
    mid[only_lo] = lo[only_lo] + 1.0
    only_hi = ~np.isfinite(lo) & np.isfinite(hi)
    mid[only_hi] = hi[only_hi] - 1.0
    return mid


def _box_draw(rng: np.random.Generator, lo: Array, hi: Array) -> Array:
    """Prior draw for restarts; unbounded coordinates get a unit normal
    around the box midpoint."""
    mid = _box_midpoint(lo, hi)
    out = mid + rng.normal(size=lo.shape)
    both = np.isfinite(lo) & np.isfinite(hi)
    out[both] = rng.uniform(lo[both], hi[both])
    return out


def _box_sigma2(lo: Array, hi: Array) -> Array:
    """Initial theta variances: (width/6)^2 capped at 1; 1 when unbounded."""
    width = hi - lo
    out = np.ones_like(lo)
    finite = np.isfinite(width)
    out[finite] = np.minimum((width[finite] / 6.0) ** 2, 1.0)
    out[out <= 0] = 1e-4  # degenerate zero-width box
    return out


def update_means(state: VariationalState, data, sys: OdeSystemSpec,
                 cfg: FitConfig, bank: QmcSampleBank, priors: PriorConfig,
                 tol: float, lo_vec: Array, hi_vec: Array,
                 c0: float | None = None, alpha0: float | None = None):
    """Riemannian conjugate-gradient descent on (mu, m) at fixed variances.

    Runs until the relative cost decrease per accepted step drops below tol
    or the iteration cap is hit.  Returns (state, cost, info); info records
    the accepted-step cost trace, the last accepted step length, and whether
    the phase stopped on a line-search failure together with the directional
    derivative at that point (near zero means we were simply at a minimum).
    """
    u = pack_means(state)
    metric = pack_variances(state)
    inv_metric = 1.0 / metric
    g_prev = np.ones_like(u)
    p_prev = np.zeros_like(u)
    c_prev = cost(state, data, sys, cfg, bank, priors) if c0 is None else c0
    alpha_prev = cfg.alpha_init if alpha0 is None else alpha0
    info = {"accepted": [], "stalled": False, "dir_deriv": 0.0, "alpha": alpha_prev}

    for _ in range(cfg.max_mean_iters):
        grad = grad_means(state, data, sys, cfg, bank, priors).ravel()
        if not np.all(np.isfinite(grad)):
            raise NumericFailure("non-finite mean gradient")
        g_nat = metric * grad
        denom = float(g_prev @ (inv_metric * g_prev))
        beta = max(0.0, float(grad @ (g_nat - g_prev)) / denom) if denom > 0 else 0.0
        direction = -g_nat + beta * p_prev

        cache: dict[float, float] = {}

        def cost_along(a: float, _d=direction) -> float:
            if a == 0.0:
                return c_prev
            if a in cache:
                return cache[a]
            trial = np.clip(u + a * _d, lo_vec, hi_vec)
            try:
                val = cost(with_means(state, trial), data, sys, cfg, bank, priors)
            except NumericFailure:
                val = np.inf
            cache[a] = val
            return val

        alpha = line_search(cost_along, alpha_prev, f0=c_prev)
        if alpha is None and beta > 0.0:
            # momentum may have spoiled the direction; retry steepest descent
            direction = -g_nat
            cache.clear()
            alpha = line_search(cost_along, alpha_prev, f0=c_prev)
        if alpha is None:
            info["stalled"] = True
            info["dir_deriv"] = float(grad @ direction)
            break

        u = np.clip(u + alpha * direction, lo_vec, hi_vec)
        state = with_means(state, u)
        c_new = cache[alpha]
        info["accepted"].append(c_new)
        rel = (c_prev - c_new) / max(1.0, abs(c_prev))
        c_prev = c_new
        alpha_prev = alpha
        g_prev = g_nat
        p_prev = direction
        if rel < tol:
            break

    info["alpha"] = alpha_prev
    return state, c_prev, info


def update_variances(state: VariationalState, data, sys: OdeSystemSpec,
                     cfg: FitConfig, bank: QmcSampleBank, priors: PriorConfig,
                     c0: float | None = None, tol: float = 1e-8):
    """Fixed-point iteration on (sigma2, v) at fixed means.

    Each sweep proposes new_var = 1/rhs where the rhs is positive, damps
    coordinates where it is not, clamps growth to a factor of 100 per sweep,
    and backtracks geometrically toward the proposal until the cost does not
    increase.  Stops when the largest relative variance change falls below
    tol, the backtrack fails entirely, or the sweep cap is reached.
    """
    c_prev = cost(state, data, sys, cfg, bank, priors) if c0 is None else c0
    info = {"sweeps": 0, "damped": 0, "stalled": False}

    for sweep in range(cfg.max_fp_iters):
        rhs = fixed_point_rhs(state, data, sys, cfg, bank, priors).ravel()
        if not np.all(np.isfinite(rhs)):
            raise NumericFailure("non-finite variance fixed-point rhs")
        w_old = pack_variances(state)
        pos = rhs > 0
        info["damped"] += int((~pos).sum())
        w_prop = np.where(pos, 1.0 / np.where(pos, rhs, 1.0),
                          np.maximum(w_old / 10.0, VAR_FLOOR))
        w_prop = np.clip(w_prop, VAR_FLOOR, w_old * FP_GROWTH_CAP)

        log_old = np.log(w_old)
        log_prop = np.log(w_prop)
        gamma = 1.0
        accepted = False
        for _ in range(FP_BACKTRACKS):
            w_try = np.exp((1.0 - gamma) * log_old + gamma * log_prop)
            try:
                c_try = cost(with_variances(state, w_try), data, sys, cfg, bank, priors)
            except NumericFailure:
                c_try = np.inf
            if c_try <= c_prev:
                accepted = True
                break
            gamma *= 0.5
        if not accepted:
            info["stalled"] = True
            break

        rel = float(np.max(np.abs(w_try - w_old) / w_old)) if w_old.size else 0.0
        state = with_variances(state, w_try)
        c_prev = c_try
        info["sweeps"] = sweep + 1
        if rel < tol:
            break
    return state, c_prev, info


def _initial_state(data, sys: OdeSystemSpec, priors: PriorConfig, cfg: FitConfig,
                   rng: np.random.Generator, mu0: Array | None,
                   fresh_draw: bool):
    times = np.asarray(data.times, dtype=float)
    y = np.asarray(data.y, dtype=float)
    fitted, resid_var = smooth_start(times, y)
    v0 = np.tile(0.1 * resid_var, (times.size, 1))
    m_init = fitted.copy()
    if fresh_draw:
        mu = _box_draw(rng, priors.theta_lo, priors.theta_hi)
        m_init = fitted + rng.normal(size=fitted.shape) * np.sqrt(v0)
    elif mu0 is not None:
        mu = np.asarray(mu0, dtype=float).copy()
    else:
        mu = _box_midpoint(priors.theta_lo, priors.theta_hi)
    if cfg.theta_var_init is not None:
        sigma2 = np.full_like(mu, cfg.theta_var_init)
    else:
        sigma2 = _box_sigma2(priors.theta_lo, priors.theta_hi)
    state = VariationalState(
        mu=mu,
        sigma2=sigma2,
        m=m_init,
        v=v0,
        a_lam=posterior_lambda_shape(priors, times.size, y.shape[1]),
    )
    return state, resid_var


def _bound_vectors(priors: PriorConfig, x0_lo: Array, x0_hi: Array,
                   n_points: int, dim_state: int):
    """Flat clip bounds for (mu, m): theta box, x0 box, free interior states."""
    lo = np.concatenate([priors.theta_lo, x0_lo,
                         np.full((n_points - 1) * dim_state, -np.inf)])
    hi = np.concatenate([priors.theta_hi, x0_hi,
                         np.full((n_points - 1) * dim_state, np.inf)])
    return lo, hi


def fit(data, sys: OdeSystemSpec, priors: PriorConfig, cfg: FitConfig,
        mu0: Array | None = None) -> FitResult:
    """Run the full alternating scheme on an ObservationSet.

    mu0 optionally overrides the first attempt's starting point for the
    parameter means (restarts always draw from the prior).  Raises
    NumericFailure when every restart attempt fails.
    """
    t_start = time.perf_counter()
    times = np.asarray(data.times, dtype=float)
    y = np.asarray(data.y, dtype=float)
    if y.ndim != 2 or y.shape[0] != times.size:
        raise ValueError("data.y must have one row per observation time")
    if y.shape[1] != sys.dim_state:
        raise ValueError(f"data has {y.shape[1]} state columns, model wants {sys.dim_state}")
    if priors.dim_params != sys.dim_params:
        raise ValueError("prior box size does not match the model parameter count")

    n_points = times.size
    # deterministic=False swaps the seeded streams for OS entropy; everything
    # downstream is unchanged, so two seeded runs stay bit-identical.
    bank_seed = cfg.seed if cfg.deterministic else None
    bank = make_bank(cfg.m_samples, sys.dim_params, n_points, sys.dim_state,
                     seed=bank_seed)
    rng = np.random.default_rng([cfg.seed, 1] if cfg.deterministic else None)

    restarts = 0
    last_error: Exception | None = None
    for attempt in range(cfg.max_restarts + 1):
        state, resid_var = _initial_state(data, sys, priors, cfg, rng, mu0,
                                          fresh_draw=attempt > 0)
        if priors.x0_lo is not None:
            x0_lo, x0_hi = priors.x0_lo, priors.x0_hi
        else:
            margin = 4.0 * np.sqrt(resid_var)
            x0_lo, x0_hi = state.m[0] - margin, state.m[0] + margin
        lo_vec, hi_vec = _bound_vectors(priors, x0_lo, x0_hi, n_points,
                                        sys.dim_state)
        state.mu = np.clip(state.mu, priors.theta_lo, priors.theta_hi)
        state.m[0] = np.clip(state.m[0], x0_lo, x0_hi)
        try:
            state, traces, diag = _run_cycles(state, data, sys, cfg, bank,
                                              priors, lo_vec, hi_vec)
        except NumericFailure as exc:
            restarts += 1
            last_error = exc
            continue
        state.b_lam = posterior_lambda_rate(state, data, priors)
        diag.update({"x0_lo": x0_lo.tolist(), "x0_hi": x0_hi.tolist(),
                     "attempts": attempt + 1})
        return FitResult(
            state=state,
            theta_mean=state.mu.copy(),
            theta_sd=np.sqrt(state.sigma2),
            x0_mean=state.m[0].copy(),
            x0_sd=np.sqrt(state.v[0]),
            lambda_mean=state.a_lam / state.b_lam,
            cost_trace=traces["accepted"],
            outer_trace=traces["outer"],
            restarts=restarts,
            seconds=time.perf_counter() - t_start,
            converged=diag["converged"],
            diagnostics=diag,
            config={"tau": cfg.tau, "step_count": cfg.step_count,
                    "m_samples": cfg.m_samples, "eps": cfg.eps,
                    "seed": cfg.seed, "alpha_init": cfg.alpha_init,
                    "theta_var_init": cfg.theta_var_init},
        )
    raise NumericFailure(
        f"optimization failed after {restarts} restarts: {last_error}")


def _run_cycles(state, data, sys, cfg, bank, priors, lo_vec, hi_vec):
    c = cost(state, data, sys, cfg, bank, priors)
    accepted = [c]
    outer = [c]
    diag = {"converged": False, "damped": 0, "cycles": 0, "mean_iters": 0}
    alpha = cfg.alpha_init
    stall_streak = 0
    for cycle in range(cfg.max_cycles):
        tol_j = max(cfg.eps, 1e-2 * 10.0 ** (-cycle))
        state, c_means, ms_info = update_means(
            state, data, sys, cfg, bank, priors, tol=tol_j,
            lo_vec=lo_vec, hi_vec=hi_vec, c0=c, alpha0=alpha)
        accepted.extend(ms_info["accepted"])
        diag["mean_iters"] += len(ms_info["accepted"])
        alpha = ms_info["alpha"]
        if ms_info["stalled"] and abs(ms_info["dir_deriv"]) > STALL_TOL * max(1.0, abs(c_means)):
            # a stall with real descent left usually means the variance
            # metric is badly scaled for this region; let the variance phase
            # rescale it once before declaring the attempt dead
            stall_streak += 1
            alpha = cfg.alpha_init
            if stall_streak >= 2:
                raise NumericFailure("line search failed with a non-negligible descent direction")
        else:
            stall_streak = 0
        state, c_fp, fp_info = update_variances(state, data, sys, cfg, bank,
                                                priors, c0=c_means)
        diag["damped"] += fp_info["damped"]
        rel = abs(c - c_fp) / max(1.0, abs(c))
        c = c_fp
        outer.append(c)
        diag["cycles"] = cycle + 1
        if rel < cfg.eps and tol_j <= cfg.eps:
            diag["converged"] = True
            break
    return state, {"accepted": accepted, "outer": outer}, diag
