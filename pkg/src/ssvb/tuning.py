"""Data-driven choice of the relaxation variance tau and the substep count.

The relaxation variance should roughly match the one-step discretization
error of the RK4 map along plausible trajectories.  We draw parameter
vectors from the prior box, integrate each accurately across the data grid
from a smoothed starting point, keep the draws whose trajectory stays inside
a generous band around the observations, and record for each kept draw the
sample variance of all one-step deviations g(s(t_{i-1})) - s(t_i).  The
average of the middle half of those variances, rounded up to the next power
of ten, is the suggested tau.  Increasing the substep count shrinks the
deviations, so the selector walks m upward until tau reaches 1e-4.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericFailure
from .odes import OdeSystemSpec, TransitionConfig, integrate, transition
from .splines import smooth_start
from .vb import PriorConfig

Array = np.ndarray

ACCEPT_TARGET = 100
ACCEPT_MINIMUM = 50
DRAW_LIMIT = 1000
BAND_WIDTH = 3.0
FINE_SUBSTEPS = 16


@dataclass
class TuningResult:
    """Chosen (step_count, tau) plus the search trace for diagnostics."""

    step_count: int
    tau: float
    trace: list = field(default_factory=list)  # (step_count, tau) pairs tried
    accepted: int = 0
    attempts: int = 0
    capped: bool = False


def round_up_tau(value: float) -> float:
    """Ceiling to the next power of ten; exact powers stay put.

    Zero or negative input (every deviation identically zero) falls back to
    the floor 1e-12.
    """
    if value <= 0 or not np.isfinite(value):
        return 1e-12
    exponent = math.ceil(math.log10(value) - 1e-9)
    return 10.0 ** exponent


def _acceptance_band(y: Array):
    lo = y.min(axis=0)
    hi = y.max(axis=0)
    width = np.maximum(hi - lo, 1e-8 * (1.0 + np.abs(hi)))
    return lo - BAND_WIDTH * width, hi + BAND_WIDTH * width


def _prior_trajectories(sys: OdeSystemSpec, data, priors: PriorConfig,
                        seed: int, x0_start: Array):
    """Accepted prior-predictive trajectories on the observation grid.

    Returns (curves, thetas, attempts): curves has shape (A, n+1, p) with A
    the number of accepted draws (at most ACCEPT_TARGET).  Raises when fewer
    than ACCEPT_MINIMUM of the first DRAW_LIMIT draws stay inside the band.
    """
    if not (np.all(np.isfinite(priors.theta_lo)) and np.all(np.isfinite(priors.theta_hi))):
        raise ConfigError("tuning needs a finite prior box to draw parameters from")
    times = np.asarray(data.times, dtype=float)
    y = np.asarray(data.y, dtype=float)
    lo_band, hi_band = _acceptance_band(y)
    rng = np.random.default_rng(seed)

    kept_curves = []
    kept_thetas = []
    attempts = 0
    batch = 200
    while attempts < DRAW_LIMIT and sum(c.shape[0] for c in kept_curves) < ACCEPT_TARGET:
        ndraw = min(batch, DRAW_LIMIT - attempts)
        attempts += ndraw
        thetas = rng.uniform(priors.theta_lo, priors.theta_hi, size=(ndraw, priors.dim_params))
        starts = np.broadcast_to(x0_start, (ndraw, x0_start.size))
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            curves = integrate(sys, starts, thetas, times,
                               substeps=FINE_SUBSTEPS, check=False)
            inside = np.isfinite(curves) & (curves >= lo_band) & (curves <= hi_band)
        ok = inside.all(axis=(1, 2))
        if np.any(ok):
            kept_curves.append(curves[ok])
            kept_thetas.append(thetas[ok])
    accepted = sum(c.shape[0] for c in kept_curves)
    if accepted < ACCEPT_MINIMUM:
        raise NumericFailure(
            f"only {accepted} of {attempts} prior draws stayed within the data band; "
            "the prior box and the data appear incompatible")
    curves = np.concatenate(kept_curves)[:ACCEPT_TARGET]
    thetas = np.concatenate(kept_thetas)[:ACCEPT_TARGET]
    return curves, thetas, attempts


def _deviation_variances(sys: OdeSystemSpec, times: Array, curves: Array,
                         thetas: Array, step_count: int) -> Array:
    """Per-draw sample variance of all one-step map deviations."""
    x_in = np.swapaxes(curves[:, :-1, :], 0, 1)   # (n, A, p)
    cfg = TransitionConfig(interval=np.diff(times)[:, None], step_count=step_count)
    stepped = transition(sys, x_in, times[:-1][:, None], thetas, cfg, check=False)
    dev = stepped - np.swapaxes(curves[:, 1:, :], 0, 1)
    return np.var(dev, axis=(0, 2), ddof=1)


def _tau_from_variances(variances: Array) -> float:
    ordered = np.sort(variances)
    k = ordered.size
    middle = ordered[k // 4: k // 4 + k // 2]
    return round_up_tau(float(middle.mean()))


def reasonable_tau(sys: OdeSystemSpec, data, priors: PriorConfig, step_count: int,
                   seed: int = 0, x0_start: Array | None = None) -> float:
    """Suggested relaxation variance for a fixed substep count."""
    times = np.asarray(data.times, dtype=float)
    if x0_start is None:
        x0_start = smooth_start(times, np.asarray(data.y, dtype=float))[0][0]
    x0_start = np.asarray(x0_start, dtype=float)
    curves, thetas, _ = _prior_trajectories(sys, data, priors, seed, x0_start)
    return _tau_from_variances(_deviation_variances(sys, times, curves, thetas, step_count))


def select_tuning(sys: OdeSystemSpec, data, priors: PriorConfig, seed: int = 0,
                  x0_start: Array | None = None, threshold: float = 1e-4,
                  max_step_count: int = 16) -> TuningResult:
    """Walk the substep count upward until tau is acceptably small.

    The accepted trajectory bank is drawn once and reused for every substep
    count, so the deviation variances are monotone in m by construction and
    the walk terminates at the first m with tau <= threshold (or at the cap).
    """
    times = np.asarray(data.times, dtype=float)
    if x0_start is None:
        x0_start = smooth_start(times, np.asarray(data.y, dtype=float))[0][0]
    x0_start = np.asarray(x0_start, dtype=float)
    curves, thetas, attempts = _prior_trajectories(sys, data, priors, seed, x0_start)

    trace = []
    tau = np.inf
    for m in range(1, max_step_count + 1):
        tau = _tau_from_variances(_deviation_variances(sys, times, curves, thetas, m))
        trace.append((m, tau))
        if tau <= threshold:
            return TuningResult(step_count=m, tau=tau, trace=trace,
                                accepted=curves.shape[0], attempts=attempts)
    return TuningResult(step_count=max_step_count, tau=tau, trace=trace,
                        accepted=curves.shape[0], attempts=attempts, capped=True)
