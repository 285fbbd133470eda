"""Command-line interface: ``ctbp simulate | filter | infer``.

Runs are described by a JSON configuration file; command-line flags
override the matching file entries. See the README for the schema.
"""

import argparse
import csv
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import stats

from .branching import compute_moment_operators
from .errors import ConfigError, DimensionError, InvalidInputError, NumericalError, ParseError, UnsupportedFormatError
from .experiments import (
    ENGINES,
    piecewise_loglik,
    piecewise_prior,
    r0_loglik,
    r0_prior,
    simulate_observations,
)
from .gaussian import ABORTED, OK, GaussianBelief, run_gaussian_filter
from .hybrid import SwitchPolicy, run_hybrid
from .inference import MHConfig, ess, mh_run, rhat
from .models import (
    PiecewiseSeirLikelihood,
    SeirParams,
    StagedSeirParams,
    build_seir,
    build_staged_seir,
    weekly_windows,
)
from .particle import fixed_initial, gaussian_initial, run_pf

__all__ = ["ObservationSeries", "load_series", "load_config", "main"]

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_ABORTED = 4

MODEL_KINDS = ("seir", "se8i8r", "piecewise-seir")

DEFAULTS = {
    "model": {"kind": "seir", "delta": 0.375, "lam": 3 / 28, "p": 0.75, "r0": 2.8, "k_e": 8, "k_i": 8},
    "observation": {"sigma": 1.0, "sigma_is": "variance"},
    "engine": {"kind": "gaussian", "n": 256, "threshold": None, "include_counters": False, "scheme": "multinomial"},
    "mcmc": {
        "steps": 81920,
        "burn_in": 20480,
        "adapt_window": 4096,
        "scale": None,
        "seed": 0,
        "chains": 1,
        "use_likelihood": True,
        "prior": {"shape": 4.4, "scale": 0.5},
    },
    "simulate": {"T": 30, "replicates": 1},
    "io": {"data": None, "out": "."},
    "seed": 0,
}


# --------------------------------------------------------------------------
# data and configuration


@dataclass(frozen=True, eq=False)
class ObservationSeries:
    """Unit-spaced observations ``y_1..y_T``."""

    times: np.ndarray
    values: np.ndarray

    @property
    def T(self):
        return self.values.shape[0]


def load_series(path):
    """Read a CSV with header ``t,y1[,y2,...]`` and rows ``t = 1, 2, ...``."""
    path = Path(path)
    try:
        handle = path.open(newline="")
    except OSError as exc:
        raise ConfigError(f"cannot open data file {path}: {exc.strerror}") from exc
    with handle:
        reader = csv.reader(handle)
        header = next(reader, None)
        if header is None:
            raise ParseError("missing header row", line=1)
        header = [h.strip() for h in header]
        if len(header) < 2 or header[0] != "t" or any(not h.startswith("y") for h in header[1:]):
            raise ParseError(f"header must be t,y1[,y2,...], got {','.join(header)}", line=1)
        times, values = [], []
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(row)}", line=line)
            try:
                t = int(row[0])
                ys = [float(c) for c in row[1:]]
            except ValueError as exc:
                raise ParseError(str(exc), line=line) from exc
            if not all(np.isfinite(ys)):
                raise ParseError("non-finite observation", line=line)
            times.append(t)
            values.append(ys)
    if not times:
        raise ParseError("empty series")
    times = np.asarray(times, dtype=np.int64)
    if times[0] != 1 or np.any(np.diff(times) != 1):
        raise UnsupportedFormatError("times must be the consecutive integers 1, 2, ..., T")
    return ObservationSeries(times, np.asarray(values, dtype=float))


def _merge(base, extra):
    out = dict(base)
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def load_config(path=None, overrides=None):
    """Merge defaults, an optional JSON file and flag overrides; validate."""
    cfg = DEFAULTS
    if path is not None:
        try:
            with open(path) as fh:
                cfg = _merge(cfg, json.load(fh))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if overrides:
        cfg = _merge(cfg, overrides)
    _validate(cfg)
    return cfg


def _validate(cfg):
    model = cfg["model"]
    if model["kind"] not in MODEL_KINDS:
        raise ConfigError(f"model.kind must be one of {MODEL_KINDS}, got {model['kind']!r}")
    if cfg["engine"]["kind"] not in ENGINES:
        raise ConfigError(f"engine.kind must be one of {ENGINES}, got {cfg['engine']['kind']!r}")
    if cfg["engine"]["scheme"] not in ("multinomial", "systematic"):
        raise ConfigError("engine.scheme must be multinomial or systematic")
    if int(cfg["engine"]["n"]) < 2:
        raise ConfigError("engine.n must be at least 2")
    if cfg["observation"]["sigma_is"] not in ("sd", "variance"):
        raise ConfigError("observation.sigma_is must be 'sd' or 'variance'")
    if not float(cfg["observation"]["sigma"]) >= 0:
        raise ConfigError("observation.sigma must be non-negative")
    for key in ("delta", "lam"):
        if not float(model[key]) > 0:
            raise ConfigError(f"model.{key} must be positive")
    if not 0 <= float(model["p"]) <= 1:
        raise ConfigError("model.p must lie in [0, 1]")
    mc = cfg["mcmc"]
    if int(mc["chains"]) < 1:
        raise ConfigError("mcmc.chains must be at least 1")
    if model["kind"] == "piecewise-seir" and not model.get("r_values"):
        if "windows" not in model:
            raise ConfigError("piecewise-seir needs model.windows (number of windows) or model.r_values")
    if cfg["simulate"]["T"] < 1 or cfg["simulate"]["replicates"] < 1:
        raise ConfigError("simulate.T and simulate.replicates must be positive")


def _obs_var(cfg):
    o = cfg["observation"]
    s = float(o["sigma"])
    return s * s if o["sigma_is"] == "sd" else s


def _params(model, r0=None):
    r0 = float(model["r0"] if r0 is None else r0)
    return SeirParams(r0 * float(model["lam"]), float(model["delta"]), float(model["lam"]), float(model["p"]))


def _default_z0(cfg):
    model = cfg["model"]
    if "z0" in model:
        return np.asarray(model["z0"], dtype=np.int64)
    if model["kind"] == "se8i8r":
        return np.array([1] * 6 + [0] * (int(model["k_e"]) + int(model["k_i"]) - 5), dtype=np.int64)
    if model["kind"] == "piecewise-seir":
        return np.array([10, 10, 0], dtype=np.int64)
    return np.array([6, 0, 0], dtype=np.int64)


def _threshold(cfg):
    s = cfg["engine"]["threshold"]
    if s is None:
        return 1.25 if cfg["model"]["kind"] == "se8i8r" else 10.0
    return float("inf") if s in ("inf", "infinity") else float(s)


def _window_length(cfg):
    return int(cfg["model"].get("window_length", 7))


def _build_steps(cfg, T):
    """Per-step branching models and operators plus the observation model."""
    model = cfg["model"]
    var = _obs_var(cfg)
    if model["kind"] == "seir":
        m, obs = build_seir(_params(model), var)
        return [m] * T, [compute_moment_operators(m)] * T, obs
    if model["kind"] == "se8i8r":
        p = _params(model)
        m, obs = build_staged_seir(StagedSeirParams(p.beta, p.delta, p.lam, p.p, int(model["k_e"]), int(model["k_i"])), var)
        return [m] * T, [compute_moment_operators(m)] * T, obs
    r_values = np.asarray(model["r_values"], dtype=float)
    pw = weekly_windows(r_values, float(model["delta"]), float(model["lam"]), float(model["p"]), _window_length(cfg))
    if pw.T < T:
        raise ConfigError(f"windows cover {pw.T} days but {T} are needed")
    widx = pw.window_index()[:T]
    models, ops = [], []
    for w in pw.windows:
        m, obs = build_seir(w.params, var)
        models.append(m)
        ops.append(compute_moment_operators(m))
    return [models[k] for k in widx], [ops[k] for k in widx], obs


# --------------------------------------------------------------------------
# output helpers


def _fmt(x):
    return repr(float(x))


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _quantile_row(trace, t):
    """10/50/90% quantiles of each coordinate of the filtered state."""
    ens = trace.ensembles[t] if t < len(trace.ensembles) else None
    if ens is not None:
        return np.quantile(ens.particles, [0.1, 0.5, 0.9], axis=0)
    mean = trace.filtered_means[t]
    sd = np.sqrt(np.clip(np.diag(trace.filtered_covs[t]), 0.0, None))
    z = stats.norm.ppf([0.1, 0.5, 0.9])[:, None]
    return mean[None, :] + z * sd[None, :]


# --------------------------------------------------------------------------
# commands


def cmd_simulate(cfg, out):
    T = int(cfg["simulate"]["T"])
    reps = int(cfg["simulate"]["replicates"])
    rng = np.random.default_rng(int(cfg["seed"]))
    models, _, obs = _build_steps(cfg, T)
    z0 = _default_z0(cfg)
    r = models[0].r
    state_rows, obs_rows = [], []
    for rep in range(reps):
        if all(m is models[0] for m in models):
            states, ys = simulate_observations(models[0], obs, z0, T, rng)
        else:
            states, ys = _simulate_piecewise(models, obs, z0, rng)
        for t in range(T):
            state_rows.append([rep, t + 1, *(int(v) for v in states[t])])
            obs_rows.append([rep, t + 1, *(_fmt(v) for v in ys[t])])
    _write_csv(out / "sim_states.csv", ["replicate", "t", *(f"z{i + 1}" for i in range(r))], state_rows)
    _write_csv(out / "sim_obs.csv", ["replicate", "t", *(f"y{i + 1}" for i in range(obs.d))], obs_rows)
    return EXIT_OK


def _simulate_piecewise(models, obs, z0, rng):
    from .branching import simulate

    T = len(models)
    states = np.empty((T, models[0].r), dtype=np.int64)
    z = np.asarray(z0, dtype=np.int64)
    for t, m in enumerate(models):
        z = z.copy()
        z[list(m.counter_types)] = 0
        z = simulate(m, z, np.array([1.0]), rng)[0]
        states[t] = z
    ys = states @ obs.H.T
    if np.any(obs.R != 0):
        ys = ys + rng.multivariate_normal(np.zeros(obs.d), obs.R, size=T, method="eigh")
    return states, ys


def _initial_belief(cfg, r):
    model = cfg["model"]
    if "init_mean" in model:
        mean = np.zeros(r)
        mean[: len(model["init_mean"])] = model["init_mean"]
        cov = np.zeros((r, r))
        var = np.asarray(model.get("init_var", 0.0), dtype=float)
        k = len(model["init_mean"])
        cov[:k, :k] = np.diag(np.broadcast_to(var, (k,)))
        return GaussianBelief(mean, cov)
    return GaussianBelief.point_mass(_default_z0(cfg))


def cmd_filter(cfg, out):
    series = _load_data(cfg)
    T = series.T
    models, ops, obs = _build_steps(cfg, T)
    init = _initial_belief(cfg, models[0].r)
    rng = np.random.default_rng(int(cfg["seed"]))
    eng = cfg["engine"]
    sampler = fixed_initial(init.mean.astype(np.int64)) if not init.cov.any() else gaussian_initial(init)
    if eng["kind"] == "gaussian":
        trace = run_gaussian_filter(ops, obs, init, series.values)
    elif eng["kind"] == "particle":
        trace = run_pf(models, obs, sampler, series.values, int(eng["n"]), rng, eng["scheme"])
    else:
        policy = SwitchPolicy(_threshold(cfg), bool(eng["include_counters"]))
        trace = run_hybrid(models, ops, obs, init, series.values, int(eng["n"]), policy, rng,
                           z0_sampler=sampler, scheme=eng["scheme"])
    r = models[0].r
    header = ["t", "engine"]
    for i in range(r):
        header += [f"z{i + 1}_q10", f"z{i + 1}_median", f"z{i + 1}_q90"]
    header.append("loglik_increment")
    rows = []
    for t in range(trace.steps):
        q = _quantile_row(trace, t) if np.all(np.isfinite(trace.filtered_means[t])) else np.full((3, r), np.nan)
        cells = []
        for i in range(r):
            cells += [_fmt(q[0, i]), _fmt(q[1, i]), _fmt(q[2, i])]
        rows.append([t + 1, trace.engines[t], *cells, _fmt(trace.increments[t])])
    rows.append(["total", trace.status, *([""] * (3 * r)), _fmt(trace.loglik)])
    _write_csv(out / "filter_summary.csv", header, rows)
    return EXIT_OK if trace.status == OK else (EXIT_ABORTED if trace.status == ABORTED else EXIT_NUMERICAL)


def _load_data(cfg):
    path = cfg["io"]["data"]
    if path is None:
        raise ConfigError("io.data must name an observation CSV")
    return load_series(path)


def _inference_problem(cfg, series, rng):
    """``(loglik, prior, space, x0)`` for the configured model and engine."""
    model = cfg["model"]
    eng = cfg["engine"]
    var = _obs_var(cfg)
    if model["kind"] == "piecewise-seir":
        if eng["kind"] != "gaussian":
            raise ConfigError("the piecewise model is only supported with the gaussian engine")
        n_windows = int(model.get("windows", len(model.get("r_values", []))))
        L = _window_length(cfg)
        widx = np.minimum(np.arange(series.T) // L, n_windows - 1)
        if n_windows * L < series.T:
            raise ConfigError(f"{n_windows} windows of {L} days do not cover {series.T} observations")
        prior, space = piecewise_prior(n_windows, window_length=L,
                                       init_mean=model.get("init_mean", (10.0, 10.0)),
                                       init_var=float(model.get("init_var", 10.0)))
        loglik = piecewise_loglik(series.values[:, 0], widx, float(model["delta"]), float(model["lam"]),
                                  float(model["p"]), var)
        x0 = np.r_[np.ones(n_windows), np.asarray(model.get("init_mean", (10.0, 10.0)), float)]
        return loglik, prior, space, x0
    if model["kind"] != "seir":
        raise ConfigError("inference is supported for seir and piecewise-seir models")
    pr = cfg["mcmc"]["prior"]
    prior, space = r0_prior(float(pr["shape"]), float(pr["scale"]))
    loglik = r0_loglik(series.values[:, 0], _default_z0(cfg), float(model["delta"]), float(model["lam"]),
                       float(model["p"]), var, eng["kind"], int(eng["n"]), _threshold(cfg), rng,
                       bool(eng["include_counters"]), eng["scheme"])
    x0 = np.array([float(pr["shape"]) * float(pr["scale"])])
    return loglik, prior, space, x0


def cmd_infer(cfg, out):
    series = _load_data(cfg)
    mc = cfg["mcmc"]
    chains = int(mc["chains"])
    seeds = np.random.SeedSequence(int(cfg["seed"])).spawn(chains)
    config = MHConfig(int(mc["steps"]), int(mc["burn_in"]), int(mc["adapt_window"]), mc["scale"])
    traces = []
    for c in range(chains):
        rng = np.random.default_rng(seeds[c])
        loglik, prior, space, x0 = _inference_problem(cfg, series, rng)
        if not mc["use_likelihood"]:
            loglik = lambda theta: 0.0  # noqa: E731
        traces.append(mh_run(loglik, prior, x0, config, rng, space))
    names = traces[0].names
    rows = []
    for c, tr in enumerate(traces):
        for j in range(tr.samples.shape[0]):
            rows.append([c, tr.burn_in + j + 1, *(_fmt(v) for v in tr.samples[j]), _fmt(tr.logliks[j]),
                         int(tr.accepted[j])])
    _write_csv(out / "samples.csv", ["chain", "step", *names, "loglik", "accepted"], rows)
    summary = {
        "engine": cfg["engine"]["kind"],
        "seconds": float(sum(tr.seconds for tr in traces)),
        "chains": chains,
        "samples_per_chain": int(traces[0].samples.shape[0]),
        "acceptance_rate": float(np.mean([tr.acceptance_rate for tr in traces])),
        "parameters": summarize(traces),
        "config": cfg,
    }
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")
    return EXIT_OK


def summarize(traces):
    """Per-parameter mean, SD, quantiles, ESS and split R-hat over chains."""
    allsamp = np.concatenate([tr.samples for tr in traces], axis=0)
    out = {}
    for k, name in enumerate(traces[0].names):
        col = allsamp[:, k]
        entry = {
            "mean": float(col.mean()),
            "sd": float(col.std(ddof=1)) if col.size > 1 else 0.0,
            "q2.5": float(np.quantile(col, 0.025)),
            "q50": float(np.quantile(col, 0.5)),
            "q97.5": float(np.quantile(col, 0.975)),
        }
        try:
            entry["ess"] = float(sum(ess(tr.samples[:, k]) for tr in traces))
        except InvalidInputError:
            entry["ess"] = None
        if len(traces) > 1:
            try:
                entry["rhat"] = rhat([tr.samples[:, k] for tr in traces])
            except InvalidInputError:
                entry["rhat"] = None
        out[name] = entry
    return out


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return str(obj)


# --------------------------------------------------------------------------
# entry point


def build_parser():
    parser = argparse.ArgumentParser(prog="ctbp", description="Branching-process epidemic filtering and inference.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, helptext in (
        ("simulate", "simulate latent states and observations"),
        ("filter", "run a filter over an observation series"),
        ("infer", "sample a parameter posterior with Metropolis-Hastings"),
    ):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--seed", type=int, help="random seed")
        p.add_argument("--engine", choices=ENGINES, help="likelihood engine")
        p.add_argument("--out", help="output directory")
        p.add_argument("--chains", type=int, help="number of MCMC chains")
        p.add_argument("--data", help="observation CSV (overrides io.data)")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.engine is not None:
        overrides["engine"] = {"kind": args.engine}
    if args.chains is not None:
        overrides["mcmc"] = {"chains": args.chains}
    io = {}
    if args.out is not None:
        io["out"] = args.out
    if args.data is not None:
        io["data"] = args.data
    if io:
        overrides["io"] = io
    try:
        cfg = load_config(args.config, overrides)
        out = Path(cfg["io"]["out"])
        out.mkdir(parents=True, exist_ok=True)
        command = {"simulate": cmd_simulate, "filter": cmd_filter, "infer": cmd_infer}[args.command]
        return command(cfg, out)
    except (ConfigError, DimensionError, InvalidInputError, KeyError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
