"""Command-line front end.

Three subcommands:

- ``simulate``: run one model under one scheme, writing ``moments.csv``,
  ``acceptance.csv``, ``timing.csv`` and ``manifest.json``.
- ``compare``: run plain EM, the corrected scheme and the fine-step
  reference under one seed and emit a single wide CSV aligned on time
  (plus the stationary moment columns for the RVP model).
- ``validate``: execute the built-in property suites and print a table.

Configuration comes from a flat ``key = value`` text file plus command
line flags; flags override file keys.  Exit codes: 0 success, 2 usage or
configuration error, 3 numeric failure (a ``diagnostics.json`` is written
next to the outputs).
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, brownian
from .core import (
    ConfigurationError,
    PathState,
    SimulationError,
    TimeGrid,
)
from .em import reference_oracle, strong_order_estimate
from .girsanov import (
    discrete_radon_nikodym,
    finite_difference_bundle,
    normal_shift_weight,
)
from .models import MODEL_BUILDERS, RvpParams, rvp_stationary_moments
from .sampler import SamplerOptions, em_simulate, neem_simulate, thinning_accept
from .stats import MomentSeries

SEED_ENV_VAR = "NEEMSIM_SEED"
SCHEMES = ("em", "neem")

DEFAULTS = {
    "model": "rvp",
    "scheme": "neem",
    "dt": 0.01,
    "t_end": 40.0,
    "n_sub": 10,
    "ensemble": 100,
    "threads": os.cpu_count() or 1,
    "max_trials": 1000,
    "output_dir": ".",
}

DEFAULT_IC = {"rvp": [0.01, 0.01], "dvp": [0.01, 0.01], "two_dof": [0.01, 0.01, 0.01, 0.01]}


def _fmt(x: float) -> str:
    return f"{x:.17g}"


def read_config_file(path: str) -> dict:
    """Flat ``key = value`` document; blank lines and ``#`` comments allowed."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key] = value
    return out


def _default_seed() -> int:
    env = os.environ.get(SEED_ENV_VAR)
    if env is not None:
        return int(env)
    return 0


def resolve_config(args: argparse.Namespace) -> dict:
    """Merge defaults, config file and flags (flags win)."""
    cfg = dict(DEFAULTS)
    cfg["seed"] = _default_seed()
    params: dict[str, float] = {}
    if getattr(args, "config", None):
        for key, value in read_config_file(args.config).items():
            if key in ("model", "scheme", "output_dir"):
                cfg[key] = value
            elif key in ("n_sub", "ensemble", "seed", "threads", "max_trials"):
                cfg[key] = int(value)
            elif key in ("dt", "t_end"):
                cfg[key] = float(value)
            elif key == "ic":
                cfg["ic"] = [float(v) for v in value.split(",")]
            else:
                params[key] = float(value)
    for key in ("model", "scheme", "dt", "t_end", "n_sub", "ensemble", "seed",
                "threads", "max_trials", "output_dir"):
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    if getattr(args, "ic", None):
        cfg["ic"] = [float(v) for v in args.ic.split(",")]
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigurationError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        params[key.strip()] = float(value)
    cfg["params"] = params
    cfg.setdefault("ic", DEFAULT_IC.get(cfg["model"]))
    return cfg


def build_from_config(cfg: dict):
    model_name = cfg["model"]
    if model_name not in MODEL_BUILDERS:
        raise ConfigurationError(
            f"unknown model {model_name!r}; choose from {sorted(MODEL_BUILDERS)}"
        )
    params_cls, builder = MODEL_BUILDERS[model_name]
    try:
        params = params_cls(**cfg["params"])
    except TypeError as exc:
        raise ConfigurationError(f"bad parameters for model {model_name!r}: {exc}") from None
    model = builder(params)
    dt, t_end = float(cfg["dt"]), float(cfg["t_end"])
    steps = int(round(t_end / dt))
    if abs(steps * dt - t_end) > 1e-9 * max(1.0, t_end) or steps < 1:
        raise ConfigurationError(f"t_end={t_end} is not a multiple of dt={dt}")
    grid = TimeGrid(0.0, t_end, steps, int(cfg["n_sub"]))
    ic = cfg["ic"]
    if ic is None or len(ic) != 2 * model.dof:
        raise ConfigurationError(
            f"initial conditions must list {2 * model.dof} values for model {model_name!r}"
        )
    init = PathState(x1=ic[: model.dof], x2=ic[model.dof:], t=0.0)
    options = SamplerOptions(
        max_trials=int(cfg["max_trials"]), threads=int(cfg["threads"])
    )
    return model, grid, init, options


def _moment_header(dof: int) -> list[str]:
    cols = ["t"]
    for j in range(1, dof + 1):
        suffix = str(j) if dof > 1 else "1"
        cols += [f"m2_x{suffix}", f"se_x{suffix}", f"m2_v{suffix}", f"se_v{suffix}"]
    return cols


def write_moments_csv(path: Path, series: MomentSeries) -> None:
    m2, se = series.interleaved()
    with open(path, "w") as fh:
        fh.write(",".join(_moment_header(series.dof)) + "\n")
        for row in range(len(series.times)):
            cells = [_fmt(series.times[row])]
            for j in range(series.dof):
                cells += [
                    _fmt(m2[row, 2 * j]), _fmt(se[row, 2 * j]),
                    _fmt(m2[row, 2 * j + 1]), _fmt(se[row, 2 * j + 1]),
                ]
            fh.write(",".join(cells) + "\n")


def write_acceptance_csv(path: Path, series: MomentSeries, records) -> None:
    with open(path, "w") as fh:
        fh.write("step,t,trials,accepted,ratio,ess\n")
        for rec in records:
            i = rec.macro_index
            fh.write(
                f"{i},{_fmt(series.times[i + 1])},{rec.trials},{rec.accepted},"
                f"{_fmt(rec.ratio)},{_fmt(series.ess[i])}\n"
            )


def write_timing_csv(path: Path, series: MomentSeries) -> None:
    with open(path, "w") as fh:
        fh.write("step,t,seconds\n")
        for i, sec in enumerate(series.step_seconds):
            fh.write(f"{i},{_fmt(series.times[i + 1])},{_fmt(sec)}\n")


def write_manifest(path: Path, cfg: dict, diagnostics: dict) -> None:
    manifest = {
        "config": cfg,
        "seed": cfg["seed"],
        "versions": {
            "neemsim": __version__,
            "numpy": np.__version__,
            "python": sys.version.split()[0],
        },
        "diagnostics": diagnostics,
    }
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def run_simulate(args) -> int:
    cfg = resolve_config(args)
    if cfg["scheme"] not in SCHEMES:
        raise ConfigurationError(f"unknown scheme {cfg['scheme']!r}; choose from {SCHEMES}")
    model, grid, init, options = build_from_config(cfg)
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    runner = neem_simulate if cfg["scheme"] == "neem" else em_simulate
    series, records, diagnostics = runner(
        model, grid, int(cfg["ensemble"]), int(cfg["seed"]), init, options
    )
    diagnostics["ess_series"] = [float(v) for v in series.ess]
    write_moments_csv(out / "moments.csv", series)
    write_acceptance_csv(out / "acceptance.csv", series, records)
    write_timing_csv(out / "timing.csv", series)
    write_manifest(out / "manifest.json", cfg, diagnostics)
    print(f"wrote moments.csv, acceptance.csv, timing.csv, manifest.json to {out}")
    return 0


def run_compare(args) -> int:
    cfg = resolve_config(args)
    model, grid, init, options = build_from_config(cfg)
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    ensemble, seed = int(cfg["ensemble"]), int(cfg["seed"])

    em_series, _, _ = em_simulate(model, grid, ensemble, seed, init, options)
    nm_series, records, diagnostics = neem_simulate(model, grid, ensemble, seed, init, options)
    oracle_grid = TimeGrid(0.0, grid.t_end, int(round(grid.t_end / min(1e-3, grid.dt))), 1)
    oracle = reference_oracle(
        model, oracle_grid, max(ensemble, 1000), seed, init, output_times=grid.macro_times()
    )
    stationary = None
    if model.name == "rvp":
        p = RvpParams(**{k: model.parameters[k] for k in ("h1", "h3", "sigma")})
        stationary = rvp_stationary_moments(p)

    names = []
    blocks = []
    for label, series in (("em", em_series), ("neem", nm_series), ("oracle", oracle)):
        m2, se = series.interleaved()
        for j in range(model.dof):
            suffix = str(j + 1)
            names += [
                f"{label}_m2_x{suffix}", f"{label}_se_x{suffix}",
                f"{label}_m2_v{suffix}", f"{label}_se_v{suffix}",
            ]
        cols = np.empty((len(series.times), 4 * model.dof))
        cols[:, 0::4] = m2[:, 0::2]
        cols[:, 1::4] = se[:, 0::2]
        cols[:, 2::4] = m2[:, 1::2]
        cols[:, 3::4] = se[:, 1::2]
        blocks.append(cols)
    if stationary is not None:
        names += ["stationary_m2_x1", "stationary_m2_v1"]
        blocks.append(np.tile(np.asarray(stationary), (len(nm_series.times), 1)))

    path = out / "compare.csv"
    with open(path, "w") as fh:
        fh.write(",".join(["t"] + names) + "\n")
        table = np.hstack(blocks)
        for row, t in enumerate(nm_series.times):
            fh.write(",".join([_fmt(t)] + [_fmt(v) for v in table[row]]) + "\n")
    write_manifest(out / "manifest.json", cfg, diagnostics)
    print(f"wrote compare.csv to {out}")
    return 0


def _validate_suites(quick: bool, fault_injection: bool):
    """Property suites behind ``validate``; yields (name, passed, detail)."""
    scale = 10 if quick else 1
    tol_scale = math.sqrt(scale)

    n = 100_000 // scale
    rng = np.random.default_rng(2024)
    dxs = rng.standard_normal((n, 10)) * math.sqrt(0.1)
    lam = discrete_radon_nikodym(np.full((n, 10), 0.5), dxs, 0.1)
    err = abs(lam.mean() - 1.0)
    bound = 5 * lam.std() / math.sqrt(n)
    yield "radon-nikodym unit mean", err < bound, f"|mean-1|={err:.2e} bound={bound:.2e}"

    n = 1_000_000 // scale
    x = rng.standard_normal(n)
    est = float(np.mean(normal_shift_weight(x, 0.5) * ((x >= 0.0) & (x <= 1.0))))
    phi_cdf = lambda z: 0.5 * (1.0 + math.erf(z / math.sqrt(2.0)))
    exact = phi_cdf(0.5) - phi_cdf(-0.5)
    se = float(np.std(normal_shift_weight(x, 0.5) * ((x >= 0.0) & (x <= 1.0)))) / math.sqrt(n)
    err = abs(est - exact)
    yield "change-of-measure identity", err < 3 * se, f"err={err:.2e} 3se={3 * se:.2e}"

    trials = 20_000 // scale
    hits = 0
    for k in range(trials):
        rng_t = brownian.substream(123, brownian.PURPOSE_THINNING, k, 0, 0)
        hits += thinning_accept(lambda u: 50.0, 0.0, 0.01, 100.0, rng_t)
    est = hits / trials
    exact = math.exp(-0.5)
    bound = (3 + tol_scale) * math.sqrt(exact * (1 - exact) / trials)
    err = abs(est - exact)
    yield "thinning exactness", err < bound, f"rate={est:.4f} target={exact:.4f}"

    slope, _, _ = strong_order_estimate(
        [2.0**-k for k in range(4, 11)], 1000 // scale + 100, seed=5
    )
    yield "strong order one half", abs(slope - 0.5) < 0.1 + 0.05 * (scale > 1), f"slope={slope:.3f}"

    from .models import build_dvp, build_rvp, build_two_dof, DvpParams, TwoDofParams
    from .girsanov import gamma_arrays as _ga

    worst = 0.0
    for model in (build_rvp(RvpParams()), build_dvp(DvpParams()), build_two_dof(TwoDofParams())):
        bundle = model.gamma_derivatives
        fd = finite_difference_bundle(model)
        rng_m = np.random.default_rng(7)
        for _ in range(100 // scale + 10):
            x1 = rng_m.uniform(0.5, 1.5, model.dof)
            x2 = rng_m.uniform(-1.0, 1.0, model.dof)
            for name in ("dx1", "dx2", "dx2dx2", "dx1dx2"):
                a = np.asarray(getattr(bundle, name)(0.0, x1, x2, x1, x2), dtype=float)
                if fault_injection and name == "dx2":
                    a = -a
                b = np.asarray(getattr(fd, name)(0.0, x1, x2, x1, x2), dtype=float)
                # relative 1e-6 with an absolute floor for exact-zero entries
                budget = 1e-6 * np.maximum(np.abs(a), np.abs(b)) + 1e-7
                worst = max(worst, float((np.abs(a - b) / budget).max()))
    yield "derivative audit", worst < 1.0, f"worst dev/budget={worst:.2e}"


def run_validate(args) -> int:
    failures = 0
    rows = []
    for name, passed, detail in _validate_suites(args.quick, args.inject_derivative_fault):
        rows.append((name, passed, detail))
        failures += 0 if passed else 1
    width = max(len(r[0]) for r in rows)
    for name, passed, detail in rows:
        print(f"{name:<{width}}  {'PASS' if passed else 'FAIL'}  {detail}")
    return 1 if failures else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="neemsim",
        description="Nonlinear oscillator ensembles under plain and measure-corrected Euler-Maruyama",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_run_flags(p):
        p.add_argument("--config", help="flat key=value configuration file")
        p.add_argument("--model", choices=sorted(MODEL_BUILDERS))
        p.add_argument("--dt", type=float)
        p.add_argument("--t-end", dest="t_end", type=float)
        p.add_argument("--n-sub", dest="n_sub", type=int)
        p.add_argument("--ensemble", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--threads", type=int)
        p.add_argument("--max-trials", dest="max_trials", type=int)
        p.add_argument("--ic", help="comma-separated initial state (x1..., v1...)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="model parameter override (repeatable)")
        p.add_argument("--output-dir", dest="output_dir")

    p_sim = sub.add_parser("simulate", help="run one model under one scheme")
    add_run_flags(p_sim)
    p_sim.add_argument("--scheme", choices=SCHEMES)
    p_sim.set_defaults(func=run_simulate)

    p_cmp = sub.add_parser("compare", help="run em, neem and the reference oracle under one seed")
    add_run_flags(p_cmp)
    p_cmp.set_defaults(func=run_compare)

    p_val = sub.add_parser("validate", help="run the built-in property suites")
    p_val.add_argument("--quick", action="store_true",
                       help="smaller samples, proportionally wider tolerances")
    p_val.add_argument("--inject-derivative-fault", action="store_true",
                       help=argparse.SUPPRESS)
    p_val.set_defaults(func=run_validate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except SimulationError as exc:
        out = Path(getattr(args, "output_dir", None) or ".")
        out.mkdir(parents=True, exist_ok=True)
        (out / "diagnostics.json").write_text(
            json.dumps({"error": type(exc).__name__, "message": str(exc)}, indent=2) + "\n"
        )
        print(f"numeric failure: {exc} (diagnostics.json written to {out})", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
