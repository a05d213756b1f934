"""Command-line orchestration: config parsing, pipelines, CSV emission and
gnuplot-script generation.

Configs are flat key-value text files with sections (see the README for the
schema).  Exit codes: 0 success, 2 configuration problems, 3 solver did not
converge, 4 the checked path is not a local minimizer.
"""

from __future__ import annotations

import argparse
import configparser
import os
import sys
from pathlib import Path

import numpy as np

from . import pointprocess as pp
from .acceptance import run_all
from .errors import ConfigError
from .model import HiddenPath, ObservationSeries, Prior
from .oracle import balls_mean_trials
from .registry import default_prior, get_example
from .secondorder import check_local_min, second_order_law, solve_F, extract_ABq
from .simulate import euler_maruyama
from .variational import solve_least_action

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NOT_CONVERGED = 3
EXIT_NOT_LOCAL_MIN = 4

_SECTIONS = {
    "model": None,                       # name + per-example parameter overrides
    "grid": {"horizon", "level"},
    "init": {"z0"},
    "prior": {"kind", "center", "variance", "mean_rate"},
    "fit": {"starts"},
    "simulate": {"seed"},
}


def _find_line(path, needle):
    try:
        for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
            if needle in line:
                return lineno
    except OSError:
        pass
    return 0


def load_config(path):
    if not os.path.isfile(path):
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except configparser.Error as exc:
        lineno = getattr(exc, "lineno", 0)
        raise ConfigError(f"{path}:{lineno}: {exc.message}") from None
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(
                f"{path}:{_find_line(path, '[' + section + ']')}: unknown section [{section}]"
            )
        allowed = _SECTIONS[section]
        if allowed is not None:
            for key in parser[section]:
                if key not in allowed:
                    raise ConfigError(
                        f"{path}:{_find_line(path, key)}: unknown key {key!r} in [{section}]"
                    )
    if not parser.has_section("model") or not parser.has_option("model", "name"):
        raise ConfigError(f"{path}: missing [model] name")
    return parser


def _floats(text):
    return [float(tok) for tok in text.replace(",", " ").split()]


def build_setup(parser):
    model_items = dict(parser["model"])
    name = model_items.pop("name")
    overrides = {}
    for key, val in model_items.items():
        try:
            overrides[key] = float(val)
        except ValueError:
            raise ConfigError(f"parameter {key!r} must be a number, got {val!r}") from None
    grid_kw = {}
    if parser.has_section("grid"):
        if parser.has_option("grid", "horizon"):
            grid_kw["horizon"] = float(parser["grid"]["horizon"])
        if parser.has_option("grid", "level"):
            grid_kw["level"] = int(parser["grid"]["level"])
    z0 = None
    if parser.has_section("init") and parser.has_option("init", "z0"):
        z0 = _floats(parser["init"]["z0"])
    try:
        return get_example(name, z0=z0, **grid_kw, **overrides)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None


def build_prior(parser, setup):
    kind = "default"
    section = parser["prior"] if parser.has_section("prior") else {}
    kind = section.get("kind", "default")
    if setup.kind == "pointprocess":
        if kind in ("default", "lognormal"):
            mean_rate = float(section.get("mean_rate", setup.z0[0]))
            variance = float(section.get("variance", 1.0))
            return pp.lognormal_prior(mean_rate, variance)
        raise ConfigError(f"prior kind {kind!r} unsupported for point-process models")
    n = setup.model.hidden_n
    if kind == "default":
        return default_prior(n)
    if kind == "gaussian":
        center = _floats(section.get("center", "0"))
        if len(center) == 1:
            center = center * n
        return Prior.gaussian(np.asarray(center), float(section.get("variance", 10.0)))
    if kind == "flat":
        return Prior.flat(n)
    raise ConfigError(f"unknown prior kind {kind!r}")


def _seed(parser, args):
    if getattr(args, "seed", None) is not None:
        return int(args.seed)
    if parser.has_section("simulate") and parser.has_option("simulate", "seed"):
        return int(parser["simulate"]["seed"])
    return 0


def write_csv(path, columns, data):
    data = np.asarray(data)
    with open(path, "w") as fh:
        fh.write(",".join(columns) + "\n")
        for row in data:
            fh.write(",".join(f"{v:.17g}" for v in row) + "\n")


def read_csv(path):
    try:
        with open(path) as fh:
            header = fh.readline().strip().split(",")
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    except ValueError as exc:
        raise ConfigError(f"malformed CSV {path}: {exc}") from None
    return header, data


def _write_gnuplot(path, title, plots):
    lines = [f'set title "{title}"', "set key outside", "set grid"]
    lines.append("plot " + ", \\\n     ".join(plots))
    Path(path).write_text("\n".join(lines) + "\n")


def _grid_override(setup, args):
    grid = setup.grid
    if getattr(args, "level", None) is not None:
        grid = grid.with_level(int(args.level))
    return grid


def cmd_simulate(args):
    parser = load_config(args.config)
    setup = build_setup(parser)
    grid = _grid_override(setup, args)
    seed = _seed(parser, args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    print(f"seed: {seed}")
    if setup.kind == "pointprocess":
        path, events = pp.simulate_cox(setup.model, grid, seed, x0=setup.z0[0])
        write_csv(out / "intensity.csv", ["t", "x"],
                  np.column_stack([grid.times(), path.z[:, 0]]))
        with open(out / "events.txt", "w") as fh:
            for t in events.times:
                fh.write(f"{t:.17g}\n")
        print(f"wrote {out / 'intensity.csv'} and {out / 'events.txt'} ({events.count} events)")
        if args.plot:
            _write_gnuplot(out / "plot.gp", "simulated intensity and events",
                           ['"intensity.csv" using 1:2 with lines title "intensity"'])
    else:
        sim = euler_maruyama(setup.model.base, grid, seed, setup.z0)
        cols = ["t"] + [f"z_{i + 1}" for i in range(setup.model.d)]
        write_csv(out / "path.csv", cols, np.column_stack([grid.times(), sim.z]))
        n = setup.model.hidden_n
        obs_cols = ["t"] + [f"y_{i + 1}" for i in range(setup.model.observed_s)]
        write_csv(out / "observations.csv", obs_cols,
                  np.column_stack([grid.times(), sim.z[:, n:]]))
        print(f"wrote {out / 'path.csv'} and {out / 'observations.csv'}")
        if args.plot:
            plots = [
                f'"path.csv" using 1:{i + 2} with lines title "z_{i + 1}"'
                for i in range(setup.model.d)
            ]
            _write_gnuplot(out / "plot.gp", "simulated joint path", plots)
    return EXIT_OK


def _load_observations(setup, grid, args, parser, seed):
    n = setup.model.hidden_n
    if args.obs is not None:
        _, data = read_csv(args.obs)
        samples = data[:, 1:]
        if samples.shape != (grid.count_N + 1, setup.model.observed_s):
            raise ConfigError(
                f"observation file has shape {samples.shape}, expected "
                f"({grid.count_N + 1}, {setup.model.observed_s})"
            )
        return ObservationSeries(grid, samples), None
    print(f"seed: {seed} (self-simulated observations)")
    sim = euler_maruyama(setup.model.base, grid, seed, setup.z0)
    return ObservationSeries(grid, sim.z[:, n:]), sim


def _starts(parser):
    if parser.has_section("fit") and parser.has_option("fit", "starts"):
        text = parser["fit"]["starts"].strip()
        if text != "auto":
            return [np.asarray(_floats(chunk)) for chunk in text.split(";") if chunk.strip()]
    return "auto"


def cmd_fit(args):
    parser = load_config(args.config)
    setup = build_setup(parser)
    if setup.kind != "diffusion":
        raise ConfigError("fit expects a diffusion model config")
    grid = _grid_override(setup, args)
    prior = build_prior(parser, setup)
    seed = _seed(parser, args)
    obs, _ = _load_observations(setup, grid, args, parser, seed)
    fit = solve_least_action(obs, setup.model, prior, grid, starts=_starts(parser))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    n = setup.model.hidden_n
    cols = ["t"] + [f"x_{i + 1}" for i in range(n)] + [f"p_{i + 1}" for i in range(n)]
    write_csv(out / "fit.csv", cols,
              np.column_stack([grid.times(), fit.path.x, fit.path.p]))
    resid = float(np.max(np.abs(fit.residual_bcT)))
    print(
        f"action={fit.action:.12g} bcT_residual={resid:.3e} "
        f"starts_tried={fit.starts_tried} converged={fit.converged}"
    )
    print(f"wrote {out / 'fit.csv'}")
    if args.plot:
        plots = [f'"fit.csv" using 1:{i + 2} with lines title "x_{i + 1}"' for i in range(n)]
        if args.obs is not None:
            plots.append(f'"{args.obs}" using 1:2 with lines title "observation"')
        _write_gnuplot(out / "plot.gp", "least-action path", plots)
    return EXIT_OK if fit.converged else EXIT_NOT_CONVERGED


def _load_fit_path(setup, grid, fit_file):
    _, data = read_csv(fit_file)
    n = setup.model.hidden_n
    if data.shape != (grid.count_N + 1, 1 + 2 * n):
        raise ConfigError(
            f"fit file has shape {data.shape}, expected ({grid.count_N + 1}, {1 + 2 * n})"
        )
    return HiddenPath(grid, data[:, 1:1 + n], data[:, 1 + n:])


def cmd_cov(args):
    parser = load_config(args.config)
    setup = build_setup(parser)
    grid = _grid_override(setup, args)
    prior = build_prior(parser, setup)
    seed = _seed(parser, args)
    obs, _ = _load_observations(setup, grid, args, parser, seed)
    path = _load_fit_path(setup, grid, args.fit)
    law = second_order_law(path, obs, setup.model, prior)
    diag = solve_F(extract_ABq(path, obs, setup.model), grid)
    n = setup.model.hidden_n
    theta_cols = [f"theta_{i + 1}{j + 1}" for i in range(n) for j in range(n)]
    v_cols = [f"V_{i + 1}{j + 1}" for i in range(n) for j in range(n)]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    m = grid.count_N + 1
    write_csv(
        out / "cov.csv",
        ["t"] + theta_cols + v_cols + ["detF"],
        np.column_stack([
            grid.times(),
            law.theta.reshape(m, -1),
            law.V.reshape(m, -1),
            diag.detF,
        ]),
    )
    print(f"verdict={diag.verdict} min_abs_detF={diag.min_abs_det:.3e}")
    print(f"wrote {out / 'cov.csv'}")
    if args.plot:
        _write_gnuplot(out / "plot.gp", "perturbation standard deviation",
                       ['"cov.csv" using 1:(sqrt(column(' + str(1 + n * n + 1) + '))) '
                        'with lines title "std"'])
    return EXIT_OK


def cmd_check(args):
    parser = load_config(args.config)
    setup = build_setup(parser)
    grid = _grid_override(setup, args)
    prior = build_prior(parser, setup)
    seed = _seed(parser, args)
    obs, _ = _load_observations(setup, grid, args, parser, seed)
    path = _load_fit_path(setup, grid, args.fit)
    report = check_local_min(path, obs, setup.model, prior, grid)
    eigs = (
        "n/a" if report.init_precision_eigs is None
        else np.array2string(report.init_precision_eigs, precision=4)
    )
    print(
        f"verdict={report.verdict} min_abs_detF={report.min_abs_det:.3e} "
        f"riccati_exploded={report.riccati_exploded} init_precision_eigs={eigs}"
    )
    return EXIT_NOT_LOCAL_MIN if report.verdict == "not_local_min" else EXIT_OK


def cmd_ppfit(args):
    parser = load_config(args.config)
    setup = build_setup(parser)
    if setup.kind != "pointprocess":
        raise ConfigError("ppfit expects a point-process model config")
    grid = _grid_override(setup, args)
    if not os.path.isfile(args.events):
        raise ConfigError(f"events file not found: {args.events}")
    times = [float(line) for line in Path(args.events).read_text().split()]
    events = pp.EventRecord(grid.horizon_T, np.asarray(sorted(times)))
    prior = build_prior(parser, setup)
    fit = pp.pp_solve(events, setup.model, prior, grid)
    rows = []
    for k, seg in enumerate(fit.path.segments):
        start = 0 if k == 0 else 1
        for t, x, p in zip(seg.t[start:], seg.x[start:], seg.p[start:]):
            rows.append((t, x, p, k))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "ppfit.csv", ["t", "x", "p", "segment_index"], np.asarray(rows))
    print(
        f"converged={fit.converged} terminal_residual={fit.residual_terminal:.3e} "
        f"interior_residual={fit.residual_interior_sup:.3e} starts_tried={fit.starts_tried}"
    )
    print(f"wrote {out / 'ppfit.csv'}")
    if args.plot:
        _write_gnuplot(out / "plot.gp", "estimated intensity",
                       ['"ppfit.csv" using 1:2 with lines title "intensity"'])
    return EXIT_OK if fit.converged else EXIT_NOT_CONVERGED


def cmd_balls(args):
    b = float(args.b)
    print("d,mean_trials")
    for d in range(1, int(args.dmax) + 1):
        print(f"{d},{balls_mean_trials(b, d):.6g}")
    return EXIT_OK


def cmd_verify(args):
    only = args.only.split(",") if args.only else None
    try:
        results = run_all(only=only)
    except KeyError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_CONFIG
    for result in results:
        print(result.line)
    return EXIT_OK if all(r.passed for r in results) else 1


def _add_common(sub, obs=False, fit=False):
    sub.add_argument("--config", required=True, help="model config file")
    sub.add_argument("--out", default=".", help="output directory")
    sub.add_argument("--seed", type=int, default=None, help="override the config seed")
    sub.add_argument("--level", type=int, default=None, help="override the grid level")
    sub.add_argument("--plot", action="store_true", help="emit a gnuplot script")
    if obs:
        sub.add_argument("--obs", default=None, help="observation CSV (t, y columns)")
    if fit:
        sub.add_argument("--fit", required=True, help="fit CSV from the fit command")


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="leastaction",
        description="Least-action estimation of hidden diffusions and intensities",
    )
    subs = parser.add_subparsers(dest="command", required=True)

    _add_common(subs.add_parser("simulate", help="simulate a joint path or Cox record"))
    _add_common(subs.add_parser("fit", help="least-action path from observations"), obs=True)
    _add_common(subs.add_parser("cov", help="fluctuation law along a fitted path"),
                obs=True, fit=True)
    _add_common(subs.add_parser("check", help="local-minimum diagnosis of a fitted path"),
                obs=True, fit=True)
    pfit = subs.add_parser("ppfit", help="intensity estimate from an event record")
    _add_common(pfit)
    pfit.add_argument("--events", required=True, help="event times, one per line")
    balls = subs.add_parser("balls", help="expected uniform trials to hit a hidden ball")
    balls.add_argument("--b", required=True, help="ball radius in (0, 1]")
    balls.add_argument("--dmax", default=10, help="largest dimension to tabulate")
    verify = subs.add_parser("verify", help="run the acceptance suite")
    verify.add_argument("--only", default=None,
                        help="comma-separated criteria, e.g. a1,a7")

    args = parser.parse_args(argv)
    handlers = {
        "simulate": cmd_simulate,
        "fit": cmd_fit,
        "cov": cmd_cov,
        "check": cmd_check,
        "ppfit": cmd_ppfit,
        "balls": cmd_balls,
        "verify": cmd_verify,
    }
    try:
        return handlers[args.command](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
