"""Command-line entry point: ``carlemanlab <experiment> --config FILE``.

Exit codes: 0 all checks pass, 1 an asserted invariant fails (or the
weight parameters are infeasible), 2 configuration error, 3 numerical
failure (NaN/Inf or CFL violation).
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import EXPERIMENTS, ConfigError, ExperimentConfig, parse_config
from .grid import Grid, ScalarField, read_snapshot
from .media import CoefficientPair, check_admissible, profile, pseudoconvexity_constant, xi_directions
from .solver import (NumericalFailure, build_initial_data, energy_drift, run_forward,
                     trace_norm_H)
from .weights import InfeasibleParameters, make_s_grid, select_parameters

log = logging.getLogger("carlemanlab")

EXIT_OK, EXIT_INVARIANT, EXIT_CONFIG, EXIT_NUMERICAL = 0, 1, 2, 3


# ---------------------------------------------------------------------------
# builders

def build_grid(cfg: ExperimentConfig) -> Grid:
    g = cfg.sections["grid"]
    n = tuple(g["n"])
    h = max((b - a) / k for a, b, k in zip(g["lo"], g["hi"], n))
    width = g["collar_width"] if g["collar_width"] is not None else max(0.2, 4 * h)
    return Grid(tuple(g["lo"]), tuple(g["hi"]), n, width)


def _coefficient(cfg: ExperimentConfig, grid: Grid, section: str) -> np.ndarray:
    spec = cfg.sections.get(section, {"profile": "constant", "value": 1.0})
    if spec["profile"] != "snapshot":
        return profile(grid, spec)
    if not spec["path"]:
        raise ConfigError(f"[{section}] profile = snapshot needs a path")
    path = Path(spec["path"])
    if not path.is_absolute() and cfg.path:
        path = Path(cfg.path).parent / path
    try:
        snap = read_snapshot(path)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"[{section}] cannot load snapshot: {exc}") from None
    if snap.stagger != "cell" or snap.grid != grid:
        raise ConfigError(f"[{section}] snapshot {path} does not match the [grid] block "
                          f"({snap.grid.describe()}, stagger={snap.stagger})")
    return snap.data


def build_media(cfg: ExperimentConfig, grid: Grid) -> CoefficientPair:
    m = cfg.sections["media"]
    mu = _coefficient(cfg, grid, "media.mu")
    lam = _coefficient(cfg, grid, "media.lam")
    return CoefficientPair(ScalarField(grid, "cell", mu), ScalarField(grid, "cell", lam),
                           m["mu0"], m["lambda0"], m["M0"])


def carleman_varrho(cfg, cp) -> float:
    c = cfg.sections["carleman"]
    return pseudoconvexity_constant(cp, c["x0"], xi=xi_directions(seed=cfg.seed))


def build_params(cfg: ExperimentConfig, grid: Grid, cp: CoefficientPair, varrho=None):
    c = cfg.sections["carleman"]
    s_grid = make_s_grid(c["s_min"], c["s_max"], c["s_count"], c["s_spacing"])
    return select_parameters(grid, cp, c["x0"], gamma=c["gamma"], delta=c["delta"], eps=c["eps"],
                             T=c["T"], beta=c["beta"], beta0=c["beta0"], s_grid=s_grid,
                             varrho=carleman_varrho(cfg, cp) if varrho is None else varrho)


# ---------------------------------------------------------------------------
# output helpers

class Outputs:
    def __init__(self, cfg: ExperimentConfig, out_dir: Path):
        self.cfg = cfg
        self.dir = out_dir
        self.dir.mkdir(parents=True, exist_ok=True)
        self.files: list[str] = []

    @property
    def header(self) -> str:
        return (f"# config_hash={self.cfg.config_hash} seed={self.cfg.seed} "
                f"experiment={self.cfg.experiment}")

    def path(self, name: str) -> Path:
        self.files.append(name)
        return self.dir / name

    def json(self, name: str, data) -> None:
        payload = {"config_hash": self.cfg.config_hash, "seed": self.cfg.seed, **data}
        with open(self.path(name), "w") as fh:
            json.dump(_clean(payload), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def csv(self, name: str, columns, rows) -> None:
        with open(self.path(name), "w") as fh:
            fh.write(self.header + "\n")
            fh.write(",".join(columns) + "\n")
            for row in rows:
                fh.write(",".join(_cell(v) for v in row) + "\n")

    def dat(self, name: str, columns, rows) -> None:
        """Gnuplot-friendly whitespace table."""
        with open(self.path(name), "w") as fh:
            fh.write(self.header + "\n")
            fh.write("# " + " ".join(columns) + "\n")
            for row in rows:
                fh.write(" ".join(_cell(v) for v in row) + "\n")


def _cell(v) -> str:
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return f"{v:.12e}"
    return str(v)


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    return obj


# ---------------------------------------------------------------------------
# pipelines (each returns (passed, summary dict))

def _check_media(cfg, out: Outputs):
    from .plotting import plot_margin_slice

    grid = build_grid(cfg)
    cp = build_media(cfg, grid)
    c = cfg.sections["carleman"]
    rep = check_admissible(cp, c["x0"], c["rho"])
    varrho = carleman_varrho(cfg, cp)
    summary = {"admissible": rep.passed, "conditions": rep.conditions, "varrho": varrho,
               "rho_max": rep.pseudoconvexity.rho_max, "grid": grid.describe()}
    try:
        p = build_params(cfg, grid, cp, varrho)
        summary["params"] = {"T": p.T, "beta": p.beta, "eps": p.eps, "d0": p.d0, "d1": p.d1,
                             "s_star": p.s_star}
    except InfeasibleParameters as exc:
        summary["params_error"] = str(exc)
    x, y, z = grid.mesh("cell")
    margin = rep.pseudoconvexity.margin
    rows = ((i, j, k, x[i, j, k], y[i, j, k], z[i, j, k], margin[i, j, k])
            for i, j, k in np.ndindex(margin.shape))
    out.csv("pseudoconvexity.csv", ["i", "j", "k", "x", "y", "z", "margin"], rows)
    mid = margin.shape[2] // 2
    out.dat("margin_slice.dat", ["x", "y", "margin"],
            ((x[i, j, mid], y[i, j, mid], margin[i, j, mid])
             for i in range(margin.shape[0]) for j in range(margin.shape[1])))
    out.json("media_report.json", summary)
    plot_margin_slice(margin, out.path("margin_slice.png"))
    return rep.passed, summary


def _run_forward(cfg, out: Outputs):
    from .manufactured import cavity_mode
    from .plotting import plot_energy, plot_trace_energy

    grid = build_grid(cfg)
    cp = build_media(cfg, grid)
    r = cfg.sections["run"]
    T = r["T"]
    if T is None:
        if "carleman" in cfg.sections:
            T = build_params(cfg, grid, cp).T
        else:
            T = 1.0
    if r["initial"] == "reference":
        ids = build_initial_data(grid)
        k = r["experiment_k"] - 1
        if k not in (0, 1):
            raise ConfigError("[run] experiment_k must be 1 or 2")
        D0, B0 = ids.D0[k], ids.B0[k]
    elif r["initial"] == "cavity":
        D0, B0, _ = cavity_mode(grid)
    else:
        raise ConfigError(f"[run] initial = {r['initial']!r}: expected reference or cavity")
    t0 = time.perf_counter()
    run = run_forward(grid, cp, D0, B0, T, safety=r["safety"], stride=r["stride"],
                      keep_history=False)
    elapsed = time.perf_counter() - t0
    div_max = float(max(run.div_D.max(), run.div_B.max()))
    summary = {"T": T, "dt": run.dt, "nsteps_each_direction": run.nsteps,
               "energy_drift": energy_drift(run), "max_relative_divergence": div_max,
               "boundary_dof_max": run.boundary_max,
               "trace_norm_Btau": trace_norm_H(run.traces, "Btau"),
               "trace_norm_Dnu": trace_norm_H(run.traces, "Dnu"),
               "divergence_ok": div_max <= 1e-12, "boundary_ok": run.boundary_max == 0.0}
    log.info("forward run: %d steps each way in %.2f s", run.nsteps, elapsed)
    rows = list(zip(run.step_times, run.energy, run.div_D, run.div_B))
    out.csv("diagnostics.csv", ["t", "energy", "div_D", "div_B"], rows)
    out.dat("diagnostics.dat", ["t", "energy", "div_D", "div_B"], rows)
    sub = run.traces
    if r["trace_stride"] > 1:
        from .solver import BoundaryTraceSeries
        s = r["trace_stride"]
        sub = BoundaryTraceSeries(grid, sub.times[::s], {f: v[::s] for f, v in sub.btau.items()},
                                  {f: v[::s] for f, v in sub.dnu.items()})
    sub.write_csv(out.path("traces.csv"), header=out.header)
    bt = np.sqrt(sum((v**2).sum(axis=(1, 2, 3)) for v in run.traces.btau.values()))
    dn = np.sqrt(sum((v**2).sum(axis=(1, 2)) for v in run.traces.dnu.values()))
    plot_energy(run.step_times, run.energy, run.div_D, run.div_B, out.path("energy.png"))
    plot_trace_energy(run.step_times, bt, dn, out.path("traces.png"))
    out.json("forward_summary.json", summary)
    return summary["divergence_ok"] and summary["boundary_ok"], summary


def _verify_carleman(cfg, out: Outputs):
    from . import stability as st
    from . import verifier as ver
    from .plotting import plot_carleman

    grid = build_grid(cfg)
    cp = build_media(cfg, grid)
    p = build_params(cfg, grid, cp)
    s_grid = np.asarray(p.s_grid)
    n = max(grid.n)
    times = np.linspace(-p.T, p.T, int(math.ceil(2 * p.T * n)) | 1)
    reports = []
    for name, v in ver.scalar_test_library(grid, p, times).items():
        r = ver.verify_scalar_hyperbolic(v, times, cp, p, s_grid)
        r.extra["test_function"] = name
        reports.append(r)
    for name, u in ver.div_curl_library(grid).items():
        r = ver.verify_div_curl(u, grid, p, s_grid)
        r.extra["test_function"] = name
        reports.append(r)
    shapes = st.default_shapes(grid, cfg.sections["stability"]["peak"],
                               cfg.sections["stability"]["radius"])
    ids = build_initial_data(grid)
    cp1 = st.perturbed_pair(cp, shapes[0], shapes[1], 0.05)
    sr = st.sourced_linearized_run(cp1, cp, ids, 0, p.T, stride=cfg.sections["run"]["stride"],
                                   safety=cfg.sections["run"]["safety"])
    full, trace = ver.verify_maxwell_carleman(grid, sr.run.times, sr.run.D_hist, sr.run.B_hist,
                                              sr.F_hist, sr.G_hist, p, s_grid)
    del sr
    reports += [full, trace]
    tz = []
    for name, z in ver.time_zero_library(grid, times).items():
        rep = ver.verify_time_zero(z, times, grid, p)
        tz.append({"test_function": name, **rep.summary()})
    ver.write_reports_csv(out.path("carleman.csv"), reports, header=out.header)
    rows = [(r.inequality, r.extra.get("test_function", "-"), s, ratio)
            for r in reports for s, ratio in zip(r.s, r.ratio)]
    out.dat("carleman_ratios.dat", ["inequality", "test_function", "s", "ratio"], rows)
    passed = all(r.passed for r in reports) and all(t["passed"] for t in tz)
    summary = {"reports": [r.summary() for r in reports], "time_zero": tz,
               "params": {"gamma": p.gamma, "beta": p.beta, "T": p.T, "eps": p.eps,
                          "d0": p.d0, "d1": p.d1, "s_star": p.s_star, "varrho": p.varrho},
               "passed": passed}
    out.json("carleman_summary.json", summary)
    plot_carleman(reports, out.path("carleman_ratios.png"))
    return passed, summary


def _run_stability(cfg, out: Outputs):
    from . import stability as st
    from .plotting import plot_stability

    grid = build_grid(cfg)
    cp = build_media(cfg, grid)
    p = build_params(cfg, grid, cp)
    s = cfg.sections["stability"]
    shapes = st.default_shapes(grid, s["peak"], s["radius"])
    ids = build_initial_data(grid)
    c = cfg.sections["carleman"]
    rep = st.stability_sweep(cp, shapes, s["amplitudes"], ids, p.T, x0=c["x0"], rho=c["rho"],
                             safety=cfg.sections["run"]["safety"], mode=s["mode"],
                             noise=s["noise"], seed=cfg.seed, rows=s["rows"])
    rep.write_csv(out.path("stability.csv"), header=out.header)
    out.dat("stability.dat", ["t", "N", "E", "kappa_running"],
            zip(rep.amplitudes, rep.N, rep.E, rep.kappa_running))
    summary = rep.summary()
    summary["minor_rows"] = list(rep.minor.rows)
    summary["minor_best_rows"] = list(rep.minor.best_rows)
    summary["T"] = p.T
    out.json("stability_summary.json", summary)
    plot_stability(rep, out.path("stability.png"))
    passed = bool(rep.fit is not None and rep.monotone and rep.inequality_holds
                  and rep.minor.passed and not rep.dropped)
    return passed, summary


PIPELINES = {"check-media": _check_media, "run-forward": _run_forward,
             "verify-carleman": _verify_carleman, "run-stability": _run_stability}


def run_experiment(cfg: ExperimentConfig, out_dir=None) -> int:
    out = Outputs(cfg, Path(out_dir or cfg.out))
    start = time.perf_counter()
    status, code, message = "passed", EXIT_OK, ""
    try:
        passed, _ = PIPELINES[cfg.experiment](cfg, out)
        if not passed:
            status, code = "invariant_failure", EXIT_INVARIANT
    except InfeasibleParameters as exc:
        status, code, message = "infeasible_parameters", EXIT_INVARIANT, str(exc)
    except NumericalFailure as exc:
        status, code, message = "numerical_failure", EXIT_NUMERICAL, str(exc)
    except ConfigError as exc:
        status, code, message = "config_error", EXIT_CONFIG, str(exc)
    except (ValueError, FloatingPointError) as exc:
        status, code, message = "module_error", EXIT_INVARIANT, f"{type(exc).__name__}: {exc}"
    if message:
        log.error("%s: %s", status, message)
    manifest = {
        "experiment": cfg.experiment, "status": status, "exit_code": code, "message": message,
        "partial": code not in (EXIT_OK, EXIT_INVARIANT) or bool(message),
        "config": cfg.canonical(), "config_hash": cfg.config_hash, "seed": cfg.seed,
        "wall_time_s": round(time.perf_counter() - start, 3),
        "artifacts": sorted(out.files),
        "versions": _versions(),
    }
    with open(out.dir / "manifest.json", "w") as fh:
        json.dump(_clean(manifest), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return code


def _versions() -> dict:
    import matplotlib
    import scipy
    return {"carlemanlab": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "scipy": scipy.__version__,
            "matplotlib": matplotlib.__version__}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="carlemanlab", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    for name in EXPERIMENTS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="INI experiment file")
        sp.add_argument("--out", default=None, help="output directory (overrides [experiment] out)")
        sp.add_argument("--seed", type=int, default=None, help="overrides [experiment] seed")
        sp.add_argument("--verbose", "-v", action="count", default=0)
        sp.add_argument("--permissive", action="store_true",
                        help="ignore unknown sections and keys instead of failing")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = {("experiment", "name"): args.command}
    if args.seed is not None:
        overrides[("experiment", "seed")] = args.seed
    try:
        cfg = parse_config(args.config, strict=not args.permissive, overrides=overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    code = run_experiment(cfg, args.out)
    if args.verbose or code:
        print(f"{cfg.experiment}: exit {code}", file=sys.stderr)
    return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
