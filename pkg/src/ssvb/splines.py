"""Clamped B-spline bases and least-squares curve fits.

Used in two places: smooth starting curves for the optimizer state means,
and the log-rate curves of the time-varying SIR model.  The basis is the
standard Cox-de Boor construction on a clamped uniform knot vector; the
recursion is written directly (rather than calling scipy) because the model
Jacobians need basis values at batched time arrays inside hot loops, and the
tests check it against scipy independently.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError

Array = np.ndarray


@dataclass(frozen=True)
class SplineBasis:
    """A B-spline basis of a given degree on a fixed knot vector."""

    degree: int
    knots: Array = field(repr=False)

    def __post_init__(self):
        knots = np.asarray(self.knots, dtype=float)
        object.__setattr__(self, "knots", knots)
        if self.degree < 1:
            raise ValueError("degree must be at least 1")
        if knots.ndim != 1 or knots.size < 2 * (self.degree + 1):
            raise ValueError("knot vector too short for the requested degree")
        if np.any(np.diff(knots) < 0):
            raise ValueError("knots must be non-decreasing")

    @property
    def count(self) -> int:
        """Number of basis functions."""
        return self.knots.size - self.degree - 1

    @property
    def t_min(self) -> float:
        return float(self.knots[self.degree])

    @property
    def t_max(self) -> float:
        return float(self.knots[-self.degree - 1])


def make_basis(t0: float, t1: float, count: int, degree: int = 3) -> SplineBasis:
    """Clamped basis with equispaced interior knots on [t0, t1].

    count is the number of basis functions; it must be at least degree + 1.
    """
    if t1 <= t0:
        raise ValueError("need t1 > t0")
    if count < degree + 1:
        raise ValueError(f"count must be >= degree + 1 = {degree + 1}, got {count}")
    inner = np.linspace(t0, t1, count - degree + 1)
    knots = np.concatenate([np.full(degree, t0), inner, np.full(degree, t1)])
    return SplineBasis(degree=degree, knots=knots)


def basis_eval(basis: SplineBasis, t) -> Array:
    """Evaluate all basis functions at t.

    t may have any shape; the result has shape t.shape + (basis.count,).
    Times outside [t_min, t_max] (beyond a small roundoff slack) raise
    DomainError; the right endpoint is included by closing the last
    non-empty knot interval.
    """
    u = basis.knots
    d = basis.degree
    nk = u.size
    tt = np.asarray(t, dtype=float)
    scalar = tt.ndim == 0
    if scalar:
        tt = tt[None]
    slack = 1e-9 * max(basis.t_max - basis.t_min, 1.0)
    if np.any(tt < basis.t_min - slack) or np.any(tt > basis.t_max + slack):
        bad = tt[(tt < basis.t_min - slack) | (tt > basis.t_max + slack)]
        raise DomainError(
            f"time {float(np.ravel(bad)[0])} outside spline domain "
            f"[{basis.t_min}, {basis.t_max}]")

    tcol = tt[..., None]
    b = ((tcol >= u[:-1]) & (tcol < u[1:])).astype(float)
    # close the right end: t at (or within slack of) t_max lands in the last
    # non-empty interval, which the half-open indicators above leave empty
    nonempty = np.nonzero(u[1:] > u[:-1])[0]
    at_end = tt >= basis.t_max - slack
    if np.any(at_end):
        b[at_end] = 0.0
        b[at_end, nonempty[-1]] = 1.0

    for k in range(1, d + 1):
        den1 = u[k:nk - 1] - u[0:nk - k - 1]
        den2 = u[k + 1:nk] - u[1:nk - k]
        w1 = np.where(den1 > 0, (tcol - u[0:nk - k - 1]) / np.where(den1 > 0, den1, 1.0), 0.0)
        w2 = np.where(den2 > 0, (u[k + 1:nk] - tcol) / np.where(den2 > 0, den2, 1.0), 0.0)
        b = w1 * b[..., :-1] + w2 * b[..., 1:]
    return b[0] if scalar else b


def curve_eval(basis: SplineBasis, coef: Array, t) -> Array:
    """Evaluate the spline curve with the given coefficients at t.

    coef has shape (count,) or (count, p); the result has shape t.shape or
    t.shape + (p,).
    """
    b = basis_eval(basis, t)
    return b @ np.asarray(coef, dtype=float)


def lsq_fit(times: Array, values: Array, basis: SplineBasis) -> Array:
    """Least-squares spline coefficients for values observed at times.

    values may be (n,) or (n, p).  Raises ValueError when the design matrix
    is rank deficient, which usually means too many basis functions for the
    available time points.
    """
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    a = basis_eval(basis, times)
    coef, _, rank, _ = np.linalg.lstsq(a, values, rcond=None)
    if rank < basis.count:
        raise ValueError(
            f"spline design matrix is rank deficient ({rank} < {basis.count}); "
            "use fewer basis functions")
    return coef


def default_basis_count(n_intervals: int) -> int:
    """Basis size used for smooth starting curves: max(10, n/8)."""
    return max(10, n_intervals // 8)


def smooth_start(times: Array, y: Array, count: int | None = None):
    """Smooth the observations with a least-squares cubic spline.

    Returns (fitted, resid_var): the fitted curve at the observation times,
    shape like y, and the per-coordinate residual sample variance.  Falls
    back to the raw observations when there are too few points to support a
    cubic fit, in which case the residual variance comes from first
    differences.
    """
    times = np.asarray(times, dtype=float)
    y = np.asarray(y, dtype=float)
    n = times.size - 1
    if count is None:
        count = default_basis_count(n)
    count = min(count, max(times.size - 2, 4))
    if times.size >= count + 2 and count >= 4:
        basis = make_basis(times[0], times[-1], count)
        try:
            coef = lsq_fit(times, y, basis)
        except ValueError:
            coef = None
        if coef is not None:
            fitted = curve_eval(basis, coef, times)
            resid = y - fitted
            var = resid.var(axis=0, ddof=1)
            return fitted, np.maximum(var, 1e-8)
    # too few points: pass the data through and estimate noise from steps
    var = 0.5 * np.diff(y, axis=0).var(axis=0, ddof=1) if times.size > 2 else np.ones(y.shape[-1])
    return y.copy(), np.maximum(var, 1e-8)
