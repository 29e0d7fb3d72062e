"""Command line front end.

Subcommands: simulate, tune, fit, bench, covid, plotdata.  Every option can
also be supplied through a flat YAML file via --config; explicit flags win.
Exit codes: 0 on success, 2 for configuration/input problems, 3 when the
numerics fail irrecoverably.
"""

from __future__ import annotations

import argparse
import json
import re
import sys
from pathlib import Path

import numpy as np
import yaml

from .dataio import (BenchProtocol, ingest_csse, bic_select, plot_rows,
                     read_dataset, run_bench, simulate_dataset, write_bench_report,
                     write_dataset, write_plot_rows)
from .errors import ConfigError, NumericFailure
from .figures import save_bench_figure, save_fit_figure, save_rates_figure
from .models import parse_model, resolve_model, tvsir_initial_coefficients
from .optimizer import fit
from .tuning import select_tuning
from .vb import FitConfig, PriorConfig

# defaults for the stiff-ish epidemic fits; the box models use the plain ones
TVSIR_ALPHA_INIT = 1e-4
TVSIR_EPS = 1e-4
TVSIR_TAU = 1e-4
# unbounded log-rate coefficients need short first steps or the line search
# overshoots onto the exp-underflow plateau where the rate gradients vanish
TVSIR_THETA_VAR = 1e-6
COVID_COUNTS = (20, 25, 30, 35, 40)
COVID_LAMBDA_PRIOR = (0.01, 0.01)
COVID_TRIM = 1e-3


def _floats(text: str) -> np.ndarray:
    try:
        return np.array([float(v) for v in text.replace(",", " ").split()])
    except ValueError as exc:
        raise ConfigError(f"could not parse number list '{text}': {exc}") from None


def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.replace(",", " ").split()]
    except ValueError as exc:
        raise ConfigError(f"could not parse integer list '{text}': {exc}") from None


def _require(args, *names):
    for name in names:
        if getattr(args, name) is None:
            flag = "--" + name.replace("_", "-")
            raise ConfigError(f"{flag} is required (flag or config file)")


def _add_common(sub):
    sub.add_argument("--seed", type=int, default=0, help="base random seed")
    sub.add_argument("--deterministic", action=argparse.BooleanOptionalAction,
                     default=True,
                     help="seeded, bit-reproducible runs (default on)")
    sub.add_argument("--jobs", type=int, default=1,
                     help="worker processes where supported")
    sub.add_argument("-o", "--out", "--output", dest="output", default=None,
                     help="output file or prefix, subcommand dependent")
    sub.add_argument("--config", default=None,
                     help="YAML file with flat option defaults; flags override")


def _grid_args(sub):
    sub.add_argument("--t0", type=float, default=None, help="first observation time")
    sub.add_argument("--t1", type=float, default=None, help="last observation time")
    sub.add_argument("--n-obs", "--n", dest="n_obs", type=int, default=None,
                     help="number of observation times (including both ends)")


def _fit_args(sub):
    sub.add_argument("--tau", type=float, default=None,
                     help="relaxation variance of the state transitions")
    sub.add_argument("--step-count", "--m", dest="step_count", type=int,
                     default=None, help="RK4 substeps per observation interval")
    sub.add_argument("--m-samples", type=int, default=11,
                     help="odd quasi Monte Carlo sample count")
    sub.add_argument("--eps", type=float, default=None,
                     help="relative cost tolerance (default 1e-6, 1e-4 for tvsir)")
    sub.add_argument("--alpha-init", type=float, default=None,
                     help="initial line search step (default 1.0, 1e-4 for tvsir)")
    sub.add_argument("--max-restarts", type=int, default=10,
                     help="fresh prior draws to try after a failed attempt")
    sub.add_argument("--lambda-shape", type=float, default=1.0)
    sub.add_argument("--lambda-rate", type=float, default=1.0)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="ssvb",
        description="Variational ODE parameter estimation through a "
                    "Runge-Kutta state-space relaxation.")
    subs = parser.add_subparsers(dest="command", required=True)
    registry = {}

    def register(name, help_text):
        sub = subs.add_parser(name, help=help_text)
        # let values like -1,-1 pass as numbers rather than flags
        sub._negative_number_matcher = re.compile(r"^-\d[\d.,eE+-]*$")
        _add_common(sub)
        registry[name] = sub
        return sub

    sub = register("simulate", "integrate a model and write noisy observations")
    sub.add_argument("--model", default=None, help="fhn | lorenz96:<p> | tvsir:<nbasis>")
    sub.add_argument("--theta", default=None, help="true parameters, comma separated")
    sub.add_argument("--x0", default=None, help="true initial state, comma separated")
    _grid_args(sub)
    sub.add_argument("--noise-var", type=float, default=None, help="observation noise variance")
    sub.add_argument("--population", type=float, default=None, help="tvsir population size")
    sub.set_defaults(func=_cmd_simulate)

    sub = register("tune", "choose the substep count and relaxation variance")
    sub.add_argument("--data", default=None, help="dataset CSV")
    sub.add_argument("--model", default=None)
    sub.add_argument("--population", type=float, default=None)
    sub.add_argument("--threshold", type=float, default=1e-4,
                     help="stop once tau is at or below this")
    sub.add_argument("--max-step-count", type=int, default=16)
    sub.set_defaults(func=_cmd_tune)

    sub = register("fit", "fit the variational posterior to a dataset")
    sub.add_argument("--data", default=None, help="dataset CSV")
    sub.add_argument("--model", default=None)
    sub.add_argument("--population", type=float, default=None)
    sub.add_argument("--tune", action="store_true",
                     help="run the tuning procedure instead of --tau/--step-count")
    _fit_args(sub)
    sub.set_defaults(func=_cmd_fit)

    sub = register("bench", "repeated simulate/fit replicates with error summaries")
    sub.add_argument("--model", default=None)
    sub.add_argument("--theta", default=None, help="true parameters")
    sub.add_argument("--x0", default=None, help="true initial state")
    _grid_args(sub)
    sub.add_argument("--noise-var", type=float, default=None)
    sub.add_argument("--population", type=float, default=None)
    sub.add_argument("--replicates", type=int, default=10)
    sub.add_argument("--tau", type=float, default=None,
                     help="relaxation variance; omit to tune per replicate")
    sub.add_argument("--step-count", "--m", dest="step_count", type=int, default=None)
    sub.add_argument("--m-samples", type=int, default=11)
    sub.add_argument("--eps", type=float, default=1e-6)
    sub.set_defaults(func=_cmd_bench)

    sub = register("covid", "fit the time-varying SIR model to CSSE case files")
    sub.add_argument("--confirmed", default=None, help="CSSE confirmed CSV")
    sub.add_argument("--recovered", default=None, help="CSSE recovered CSV")
    sub.add_argument("--deaths", default=None, help="CSSE deaths CSV")
    sub.add_argument("--region", default=None, help="Country/Region value")
    sub.add_argument("--population", type=float, default=None)
    sub.add_argument("--counts", default=None,
                     help="candidate spline counts, comma separated "
                          f"(default {','.join(map(str, COVID_COUNTS))})")
    sub.add_argument("--trim-threshold", type=float, default=COVID_TRIM,
                     help="drop leading days with I below this fraction of peak")
    sub.add_argument("--tau", type=float, default=TVSIR_TAU)
    sub.add_argument("--step-count", "--m", dest="step_count", type=int, default=1)
    sub.add_argument("--m-samples", type=int, default=11)
    sub.add_argument("--eps", type=float, default=TVSIR_EPS)
    sub.set_defaults(func=_cmd_covid)

    sub = register("plotdata", "tabulate data/fit curves and render figures")
    sub.add_argument("--data", default=None, help="dataset CSV")
    sub.add_argument("--result", "--fit", dest="result", default=None,
                     help="fit result JSON")
    sub.add_argument("--model", default=None,
                     help="override the model id recorded in the result")
    sub.add_argument("--population", type=float, default=None)
    sub.add_argument("--points", type=int, default=400,
                     help="fitted curve resolution")
    sub.set_defaults(func=_cmd_plotdata)

    return parser, registry


def _apply_config(path, sub):
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"bad YAML in {path}: {exc}") from None
    if raw is None:
        return
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config must be a flat mapping")
    dests = {a.dest for a in sub._actions}
    unknown = sorted(set(raw) - dests)
    if unknown:
        raise ConfigError(f"{path}: unknown config keys {unknown}")
    sub.set_defaults(**raw)


def _resolve_for(args, times):
    _require(args, "model")
    family, _ = parse_model(args.model)
    if family == "tvsir":
        _require(args, "population")
    return resolve_model(args.model, times=times, population=args.population), family


def _fit_config(args, family, tau, step_count):
    eps = args.eps if args.eps is not None else (TVSIR_EPS if family == "tvsir" else 1e-6)
    alpha = args.alpha_init if args.alpha_init is not None else \
        (TVSIR_ALPHA_INIT if family == "tvsir" else 1.0)
    theta_var = TVSIR_THETA_VAR if family == "tvsir" else None
    return FitConfig(tau=tau, step_count=step_count, m_samples=args.m_samples,
                     eps=eps, seed=args.seed, alpha_init=alpha,
                     theta_var_init=theta_var,
                     max_restarts=getattr(args, "max_restarts", 10),
                     deterministic=args.deterministic)


def _write_result_json(path, result, model, population=None):
    payload = result.as_dict()
    payload["config"]["model"] = model
    if population is not None:
        payload["config"]["population"] = float(population)
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")


def _cmd_simulate(args) -> int:
    _require(args, "theta", "x0", "t0", "t1", "n_obs", "noise_var", "output")
    if args.n_obs < 2:
        raise ConfigError("--n-obs must be at least 2")
    times = np.linspace(args.t0, args.t1, args.n_obs)
    bundle, _ = _resolve_for(args, times)
    theta = _floats(args.theta)
    x0 = _floats(args.x0)
    if theta.size != bundle.system.dim_params:
        raise ConfigError(f"model {args.model} expects {bundle.system.dim_params} "
                          f"parameters, got {theta.size}")
    if x0.size != bundle.system.dim_state:
        raise ConfigError(f"model {args.model} expects {bundle.system.dim_state} "
                          f"initial states, got {x0.size}")
    dset = simulate_dataset(bundle.system, theta, x0, times, args.noise_var,
                            seed=args.seed, state_names=bundle.state_names)
    write_dataset(args.output, dset)
    print(f"wrote {args.output} ({args.n_obs} rows, {bundle.system.dim_state} states)")
    return 0


def _cmd_tune(args) -> int:
    _require(args, "data")
    dset = read_dataset(args.data)
    bundle, _ = _resolve_for(args, dset.times)
    priors = PriorConfig(theta_lo=bundle.theta_lo, theta_hi=bundle.theta_hi)
    res = select_tuning(bundle.system, dset, priors, seed=args.seed,
                        threshold=args.threshold,
                        max_step_count=args.max_step_count)
    print(f"m={res.step_count} tau={res.tau:g} "
          f"(accepted {res.accepted}/{res.attempts} prior draws)")
    if args.output:
        Path(args.output).write_text(json.dumps({
            "step_count": res.step_count, "tau": res.tau,
            "accepted": res.accepted, "attempts": res.attempts,
            "capped": res.capped, "trace": res.trace}, indent=2) + "\n")
    return 0


def _cmd_fit(args) -> int:
    _require(args, "data", "output")
    dset = read_dataset(args.data)
    bundle, family = _resolve_for(args, dset.times)
    priors = PriorConfig(theta_lo=bundle.theta_lo, theta_hi=bundle.theta_hi,
                         lambda_shape=args.lambda_shape,
                         lambda_rate=args.lambda_rate)
    if args.tune:
        if args.tau is not None or args.step_count is not None:
            raise ConfigError("--tune replaces --tau/--step-count; give one or the other")
        tun = select_tuning(bundle.system, dset, priors, seed=args.seed)
        tau, step_count = tun.tau, tun.step_count
        print(f"tuned: m={step_count} tau={tau:g}")
    else:
        if args.tau is None:
            raise ConfigError("provide --tau (and optionally --step-count) or --tune")
        tau = args.tau
        step_count = args.step_count if args.step_count is not None else 1
    cfg = _fit_config(args, family, tau, step_count)
    mu0 = None
    if family == "tvsir":
        mu0 = tvsir_initial_coefficients(bundle.tvsir, dset.times, dset.y)
    result = fit(dset, bundle.system, priors, cfg, mu0=mu0)
    _write_result_json(args.output, result, args.model, args.population)
    theta_txt = " ".join(f"{name}={v:.4g}" for name, v
                         in zip(bundle.theta_names, result.theta_mean))
    print(f"converged={result.converged} cost={result.cost_trace[-1]:.6g} "
          f"restarts={result.restarts} seconds={result.seconds:.2f}")
    print(f"theta: {theta_txt}")
    print(f"wrote {args.output}")
    return 0


def _cmd_bench(args) -> int:
    _require(args, "theta", "x0", "t0", "t1", "n_obs", "noise_var", "output")
    times = np.linspace(args.t0, args.t1, args.n_obs)
    bundle, family = _resolve_for(args, times)
    if family == "tvsir" and (args.tau is None or args.step_count is None):
        raise ConfigError("tvsir benchmarks need explicit --tau and --step-count")
    proto = BenchProtocol(
        model_id=args.model, theta_true=_floats(args.theta),
        x0_true=_floats(args.x0), times=times, noise_var=args.noise_var,
        population=args.population, tau=args.tau, step_count=args.step_count,
        m_samples=args.m_samples, eps=args.eps, base_seed=args.seed)
    if proto.theta_true.size != bundle.system.dim_params:
        raise ConfigError(f"model {args.model} expects {bundle.system.dim_params} "
                          f"parameters, got {proto.theta_true.size}")
    report = run_bench(proto, replicates=args.replicates, jobs=args.jobs)
    csv_path = Path(str(args.output) + ".csv")
    png_path = Path(str(args.output) + ".png")
    write_bench_report(csv_path, report)
    save_bench_figure(report, png_path)
    for name, mab, ssd in zip(report.parameter_names, report.mab, report.ssd):
        print(f"{name}: mab={mab:.4g} ssd={ssd:.4g}")
    print(f"{report.failures}/{report.replicates} replicates failed, "
          f"total {sum(report.seconds):.1f}s")
    print(f"wrote {csv_path} and {png_path}")
    return 0


def _cmd_covid(args) -> int:
    _require(args, "confirmed", "recovered", "deaths", "region", "population",
             "output")
    counts = _ints(args.counts) if args.counts else list(COVID_COUNTS)
    dset = ingest_csse(args.confirmed, args.recovered, args.deaths, args.region,
                       trim_threshold=args.trim_threshold)
    prefix = str(args.output)
    write_dataset(prefix + "_data.csv", dset)

    results = {}

    def fit_count(count):
        bundle = resolve_model(f"tvsir:{count}", times=dset.times,
                               population=args.population)
        priors = PriorConfig(theta_lo=bundle.theta_lo, theta_hi=bundle.theta_hi,
                             lambda_shape=COVID_LAMBDA_PRIOR[0],
                             lambda_rate=COVID_LAMBDA_PRIOR[1])
        cfg = FitConfig(tau=args.tau, step_count=args.step_count,
                        m_samples=args.m_samples, eps=args.eps, seed=args.seed,
                        alpha_init=TVSIR_ALPHA_INIT,
                        theta_var_init=TVSIR_THETA_VAR,
                        deterministic=args.deterministic)
        mu0 = tvsir_initial_coefficients(bundle.tvsir, dset.times, dset.y)
        results[count] = fit(dset, bundle.system, priors, cfg, mu0=mu0)
        return results[count]

    best_count, table = bic_select(dset, counts, fit_count)
    bic_lines = ["count,bic"] + [f"{c},{b:.17g}" for c, b in table]
    Path(prefix + "_bic.csv").write_text("\n".join(bic_lines) + "\n")
    for c, b in table:
        marker = " <- selected" if c == best_count else ""
        print(f"nbasis={c}: bic={b:.4f}{marker}")

    best = results[best_count]
    model_id = f"tvsir:{best_count}"
    _write_result_json(prefix + "_result.json", best, model_id, args.population)
    bundle = resolve_model(model_id, times=dset.times, population=args.population)
    rows = plot_rows(dset, bundle, best.theta_mean, best.x0_mean)
    write_plot_rows(prefix + "_plot.csv", rows)
    save_fit_figure(rows, dset.state_names, prefix + "_fit.png",
                    title=f"{args.region} ({model_id})")
    save_rates_figure(rows, prefix + "_rates.png", title=args.region)
    print(f"wrote {prefix}_data.csv, {prefix}_bic.csv, {prefix}_result.json, "
          f"{prefix}_plot.csv, {prefix}_fit.png, {prefix}_rates.png")
    return 0


def _cmd_plotdata(args) -> int:
    _require(args, "data", "result", "output")
    dset = read_dataset(args.data)
    payload = json.loads(Path(args.result).read_text())
    config = payload.get("config", {})
    model = args.model or config.get("model")
    if model is None:
        raise ConfigError(f"{args.result} has no config.model entry; pass --model")
    population = args.population if args.population is not None \
        else config.get("population")
    bundle = resolve_model(model, times=dset.times, population=population)
    rows = plot_rows(dset, bundle, np.asarray(payload["theta_mean"], float),
                     np.asarray(payload["x0_mean"], float), points=args.points)
    prefix = str(args.output)
    write_plot_rows(prefix + ".csv", rows)
    save_fit_figure(rows, dset.state_names, prefix + "_fit.png", title=model)
    written = [prefix + ".csv", prefix + "_fit.png"]
    if any(r[0] == "beta" for r in rows):
        save_rates_figure(rows, prefix + "_rates.png", title=model)
        written.append(prefix + "_rates.png")
    print("wrote " + ", ".join(written))
    return 0


def main(argv=None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    parser, registry = build_parser()
    try:
        probe, _ = parser.parse_known_args(argv)
        config_path = getattr(probe, "config", None)
        if config_path:
            _apply_config(config_path, registry[probe.command])
        args = parser.parse_args(argv)
        return args.func(args)
    except SystemExit as exc:  # argparse errors already printed usage
        return int(exc.code or 0)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericFailure as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
