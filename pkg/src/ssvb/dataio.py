"""Datasets on disk, CSSE ingestion, model selection, benchmark studies.

File formats are deliberately plain: observation sets are comma-separated
tables with a `t,x1,...,xp` header, optionally preceded by `#` comment lines
that carry simulation ground truth so a written file reads back losslessly.
Plot data is a long `series,t,value` table that any tool can consume; the
figures module renders the same rows to PNG next to it.
"""

from __future__ import annotations

import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from .errors import ConfigError, NumericFailure
from .models import ModelBundle, resolve_model, tvsir_initial_coefficients
from .odes import OdeSystemSpec, integrate
from .optimizer import FitResult, fit
from .tuning import select_tuning
from .vb import FitConfig, PriorConfig

Array = np.ndarray

CSSE_META_COLUMNS = 4  # Province/State, Country/Region, Lat, Long


@dataclass
class ObservationSet:
    """Observed trajectories: times (n+1,) and values (n+1, p).

    Simulated sets carry their generating truth along; real data leaves the
    optional fields as None.
    """

    times: Array
    y: Array
    theta_true: Array | None = None
    x0_true: Array | None = None
    noise_var: float | None = None
    state_names: list[str] | None = None

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        if self.y.ndim == 1:
            self.y = self.y[:, None]
        if self.times.ndim != 1 or self.y.shape[0] != self.times.size:
            raise ValueError("times and y must have matching leading length")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("times must be strictly increasing")
        if self.state_names is None:
            self.state_names = [f"x{j}" for j in range(1, self.y.shape[1] + 1)]

    @property
    def n_intervals(self) -> int:
        return self.times.size - 1

    @property
    def dim_state(self) -> int:
        return self.y.shape[1]


def simulate_dataset(sys: OdeSystemSpec, theta: Array, x0: Array, times: Array,
                     noise_var: float, seed: int = 0,
                     state_names: list[str] | None = None) -> ObservationSet:
    """Integrate the system accurately and add iid Gaussian noise."""
    theta = np.asarray(theta, dtype=float)
    x0 = np.asarray(x0, dtype=float)
    times = np.asarray(times, dtype=float)
    if noise_var < 0:
        raise ValueError("noise_var must be non-negative")
    truth = integrate(sys, x0, theta, times)
    rng = np.random.default_rng(seed)
    y = truth + rng.normal(scale=np.sqrt(noise_var), size=truth.shape)
    return ObservationSet(times=times, y=y, theta_true=theta, x0_true=x0,
                          noise_var=float(noise_var), state_names=state_names)


def write_dataset(path, dset: ObservationSet) -> None:
    """CSV with a `t,<states>` header; truth metadata goes into comments."""
    path = Path(path)
    lines = []
    if dset.theta_true is not None:
        lines.append("# theta_true: " + " ".join(f"{v:.17g}" for v in dset.theta_true))
    if dset.x0_true is not None:
        lines.append("# x0_true: " + " ".join(f"{v:.17g}" for v in dset.x0_true))
    if dset.noise_var is not None:
        lines.append(f"# noise_var: {dset.noise_var:.17g}")
    lines.append("t," + ",".join(dset.state_names))
    for i in range(dset.times.size):
        row = [f"{dset.times[i]:.17g}"] + [f"{v:.17g}" for v in dset.y[i]]
        lines.append(",".join(row))
    path.write_text("\n".join(lines) + "\n")


def read_dataset(path) -> ObservationSet:
    """Read a dataset written by write_dataset (or any `t,...` CSV)."""
    path = Path(path)
    meta: dict[str, str] = {}
    header = None
    rows = []
    for raw in path.read_text().splitlines():
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            if ":" in body:
                key, val = body.split(":", 1)
                meta[key.strip()] = val.strip()
            continue
        if header is None:
            header = [c.strip() for c in line.split(",")]
            continue
        rows.append([float(v) for v in line.split(",")])
    if header is None or not rows:
        raise ConfigError(f"{path} does not look like a dataset CSV")
    if header[0] != "t":
        raise ConfigError(f"{path}: first column must be 't', got '{header[0]}'")
    table = np.asarray(rows, dtype=float)

    def _vector(key):
        return np.array([float(v) for v in meta[key].split()]) if key in meta else None

    return ObservationSet(
        times=table[:, 0], y=table[:, 1:],
        theta_true=_vector("theta_true"),
        x0_true=_vector("x0_true"),
        noise_var=float(meta["noise_var"]) if "noise_var" in meta else None,
        state_names=header[1:])


def ingest_csse(confirmed_path, recovered_path, deaths_path, region: str,
                trim_threshold: float | None = None) -> ObservationSet:
    """Build an (I, R) observation set from the three CSSE time-series files.

    Rows whose Country/Region equals `region` are summed (provinces of one
    country collapse into a national series).  Active infections are
    confirmed - recovered - deaths; removals are recovered + deaths.  Times
    are day offsets.  With trim_threshold set, leading days where active
    infections stay below that fraction of the peak are dropped and times
    are re-anchored at zero.
    """
    series = {}
    for name, p in (("confirmed", confirmed_path), ("recovered", recovered_path),
                    ("deaths", deaths_path)):
        frame = pd.read_csv(p)
        if frame.shape[1] <= CSSE_META_COLUMNS:
            raise ConfigError(f"{p}: no date columns found")
        match = frame[frame["Country/Region"] == region]
        if match.empty:
            raise ConfigError(f"region '{region}' not found in {p}")
        series[name] = match.iloc[:, CSSE_META_COLUMNS:].sum(axis=0).to_numpy(dtype=float)
        dates = pd.to_datetime(frame.columns[CSSE_META_COLUMNS:], format="%m/%d/%y")
    lengths = {len(v) for v in series.values()}
    if len(lengths) != 1:
        raise ConfigError("CSSE files disagree on the number of date columns")

    active = series["confirmed"] - series["recovered"] - series["deaths"]
    removed = series["recovered"] + series["deaths"]
    times = (dates - dates[0]).days.to_numpy(dtype=float)

    if trim_threshold is not None:
        floor = trim_threshold * active.max()
        start = int(np.argmax(active >= floor))
        active, removed, times = active[start:], removed[start:], times[start:]
        times = times - times[0]
    if times.size < 2:
        raise ConfigError("fewer than two usable days after trimming")
    negative = int((active < 0).sum())
    if negative:
        # bookkeeping glitches in the source produce these; keep the values
        # so the user sees them rather than silently repairing the series
        warnings.warn(f"{region}: {negative} day(s) with negative active count",
                      stacklevel=2)
    return ObservationSet(times=times, y=np.column_stack([active, removed]),
                          state_names=["I", "R"])


def gaussian_loglik(data: ObservationSet, result: FitResult) -> float:
    """Log-likelihood of the data at the posterior mean trajectory, with the
    posterior mean precision as the plug-in noise parameter."""
    lam = result.lambda_mean
    resid = data.y - result.state.m
    n_obs = data.y.size
    return 0.5 * n_obs * (np.log(lam) - np.log(2.0 * np.pi)) \
        - 0.5 * lam * float((resid ** 2).sum())


def bic_score(data: ObservationSet, result: FitResult) -> float:
    """k ln(N) - 2 loglik with k = (ODE params) + (initial states) + noise."""
    k = result.theta_mean.size + data.dim_state + 1
    return k * np.log(data.y.size) - 2.0 * gaussian_loglik(data, result)


def bic_select(data: ObservationSet, counts, fit_fn):
    """Fit every candidate count and keep the smallest BIC (ties: fewer).

    fit_fn(count) -> FitResult.  Returns (best_count, table) where table is
    a list of (count, bic) in the order tried.
    """
    counts = sorted(set(int(c) for c in counts))
    table = []
    best_count = None
    best = np.inf
    for count in counts:
        result = fit_fn(count)
        score = bic_score(data, result)
        table.append((count, score))
        if score < best:
            best = score
            best_count = count
    return best_count, table


def curve_deviation(sys: OdeSystemSpec, theta: Array, x0: Array,
                    times: Array, truth: Array) -> float:
    """Squared distance between the plug-in trajectory and a reference curve.

    Integrates from (x0, theta) across `times` and sums squared differences
    against `truth` at those points; returns +inf when integration blows up.
    """
    try:
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            curve = integrate(sys, np.asarray(x0, float), np.asarray(theta, float),
                              np.asarray(times, float))
    except NumericFailure:
        return np.inf
    if not np.all(np.isfinite(curve)):
        return np.inf
    return float(((curve - truth) ** 2).sum())


@dataclass
class BenchProtocol:
    """Everything one replicate of a simulation benchmark needs."""

    model_id: str
    theta_true: Array
    x0_true: Array
    times: Array
    noise_var: float
    population: float | None = None
    tau: float | None = None          # None: tune per replicate
    step_count: int | None = None
    m_samples: int = 11
    eps: float = 1e-6
    base_seed: int = 0


@dataclass
class BenchReport:
    model_id: str
    parameter_names: list[str]
    true_values: Array
    estimates: Array          # (replicates, n_params), nan rows for failures
    deviations: list[float]
    seconds: list[float]
    tunings: list[tuple]
    failures: int

    @property
    def replicates(self) -> int:
        return self.estimates.shape[0]

    @property
    def mab(self) -> Array:
        ok = ~np.isnan(self.estimates[:, 0])
        return np.abs(self.estimates[ok] - self.true_values).mean(axis=0)

    @property
    def ssd(self) -> Array:
        ok = ~np.isnan(self.estimates[:, 0])
        return self.estimates[ok].std(axis=0, ddof=1)


def _bench_replicate(args):
    """One simulate/tune/fit replicate; module-level so pools can pickle it."""
    proto, r = args
    import time as _time

    t0 = _time.perf_counter()
    seed = proto.base_seed + r
    bundle = resolve_model(proto.model_id, times=proto.times,
                           population=proto.population)
    sys = bundle.system
    dset = simulate_dataset(sys, proto.theta_true, proto.x0_true, proto.times,
                            proto.noise_var, seed=seed)
    priors = PriorConfig(theta_lo=bundle.theta_lo, theta_hi=bundle.theta_hi)
    if proto.tau is None or proto.step_count is None:
        tun = select_tuning(sys, dset, priors, seed=seed)
        tau, m_steps = tun.tau, tun.step_count
    else:
        tau, m_steps = proto.tau, proto.step_count
    mu0 = None
    if bundle.tvsir is not None:
        # unbounded log-rates: start from the crude rate regression and keep
        # the first steps short, same as the epidemic fitting path
        cfg = FitConfig(tau=tau, step_count=m_steps, m_samples=proto.m_samples,
                        eps=proto.eps, seed=seed, alpha_init=1e-4,
                        theta_var_init=1e-6)
        mu0 = tvsir_initial_coefficients(bundle.tvsir, dset.times, dset.y)
    else:
        cfg = FitConfig(tau=tau, step_count=m_steps, m_samples=proto.m_samples,
                        eps=proto.eps, seed=seed)
    try:
        result = fit(dset, sys, priors, cfg, mu0=mu0)
    except NumericFailure:
        return r, None, (m_steps, tau), np.inf, _time.perf_counter() - t0
    truth = integrate(sys, proto.x0_true, proto.theta_true, proto.times)
    dev = curve_deviation(sys, result.theta_mean, result.x0_mean, proto.times, truth)
    estimate = np.concatenate([result.theta_mean, result.x0_mean])
    return r, estimate, (m_steps, tau), dev, _time.perf_counter() - t0


def run_bench(proto: BenchProtocol, replicates: int, jobs: int = 1) -> BenchReport:
    """Repeated simulate/tune/fit cycles with per-parameter error summaries.

    jobs > 1 fans replicates out over processes; each replicate is seeded by
    base_seed + index, so the report is identical however it was scheduled.
    """
    bundle = resolve_model(proto.model_id, times=proto.times,
                           population=proto.population)
    names = bundle.theta_names + [f"x0_{s}" for s in bundle.state_names]
    true_values = np.concatenate([proto.theta_true, proto.x0_true])
    n_par = true_values.size

    tasks = [(proto, r) for r in range(replicates)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            raw = list(pool.map(_bench_replicate, tasks))
    else:
        raw = [_bench_replicate(t) for t in tasks]

    estimates = np.full((replicates, n_par), np.nan)
    deviations = [np.inf] * replicates
    seconds = [0.0] * replicates
    tunings = [None] * replicates
    failures = 0
    for r, est, tun, dev, sec in raw:
        tunings[r] = tun
        deviations[r] = dev
        seconds[r] = sec
        if est is None:
            failures += 1
        else:
            estimates[r] = est
    if failures == replicates:
        raise NumericFailure("every benchmark replicate failed")
    return BenchReport(model_id=proto.model_id, parameter_names=names,
                       true_values=true_values, estimates=estimates,
                       deviations=deviations, seconds=seconds,
                       tunings=tunings, failures=failures)


def write_bench_report(path, report: BenchReport) -> None:
    """Per-parameter MAB/SSD table with run metadata in comment lines."""
    path = Path(path)
    ok = ~np.isnan(report.estimates[:, 0])
    mean_est = report.estimates[ok].mean(axis=0)
    lines = [
        f"# model: {report.model_id}",
        f"# replicates: {report.replicates}",
        f"# failures: {report.failures}",
        f"# seconds_total: {sum(report.seconds):.3f}",
        f"# seconds_mean: {np.mean(report.seconds):.3f}",
        f"# tunings: {sorted(set(t for t in report.tunings if t))}",
        "parameter,true_value,mean_estimate,mab,ssd",
    ]
    for j, name in enumerate(report.parameter_names):
        lines.append(f"{name},{report.true_values[j]:.17g},{mean_est[j]:.17g},"
                     f"{report.mab[j]:.17g},{report.ssd[j]:.17g}")
    path.write_text("\n".join(lines) + "\n")


def plot_rows(data: ObservationSet, bundle: ModelBundle, theta: Array,
              x0: Array, points: int = 400):
    """Long-format rows (series, t, value) for a fitted model over a dataset.

    Contains the observations, the plug-in fitted trajectory on a fine grid,
    and for the SIR model the fitted rate curves and their ratio r0.
    """
    rows = []
    for j, name in enumerate(data.state_names):
        for t, v in zip(data.times, data.y[:, j]):
            rows.append((f"{name}_data", float(t), float(v)))
    tgrid = np.linspace(data.times[0], data.times[-1], points)
    try:
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            curve = integrate(bundle.system, x0, theta, tgrid)
        if not np.all(np.isfinite(curve)):
            raise NumericFailure("non-finite fitted trajectory")
    except NumericFailure:
        curve = None
    if curve is not None:
        for j, name in enumerate(data.state_names):
            for t, v in zip(tgrid, curve[:, j]):
                rows.append((f"{name}_fit", float(t), float(v)))
    if bundle.tvsir is not None:
        beta, gamma = bundle.tvsir.rates(np.asarray(theta, float), tgrid)
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = beta / gamma
        for t, b, g, r in zip(tgrid, beta, gamma, ratio):
            rows.append(("beta", float(t), float(b)))
            rows.append(("gamma", float(t), float(g)))
            if np.isfinite(r):  # gamma can underflow to 0 at the edges
                rows.append(("r0", float(t), float(r)))
    return rows


def write_plot_rows(path, rows) -> None:
    path = Path(path)
    lines = ["series,t,value"]
    for series, t, value in rows:
        lines.append(f"{series},{t:.17g},{value:.17g}")
    path.write_text("\n".join(lines) + "\n")
