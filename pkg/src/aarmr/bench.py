"""Experiment runner: problem specs, single runs, mode comparisons, parameter sweeps, output files."""
from __future__ import annotations

import csv
import dataclasses
import itertools
import logging
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import AarmrError, ConfigurationError, OptimizationError, ParameterError
from .multigrid import MultigridConfig
from .optimizer import SOLVER_MODES, IterationRecord, OptConfig, OptProblem, exact_objective, optimize
from .presets import DEFAULT_DIMS, PRESETS, build_preset, volume_ramp
from .reanalysis import ReanalysisConfig

log = logging.getLogger(__name__)

CSV_HEADER = ("loop", "objective", "volume", "change_pct", "path", "epsilon", "cg_iters", "solve_seconds")

# per-preset values that differ from the ProblemSpec field defaults
PRESET_DEFAULTS = {
    "cantilever2d": dict(volfrac=0.5, eps_tol=0.1),
    "halfwheel2d": dict(volfrac=0.5, eps_tol=0.01),
    "volschedule2d": dict(volfrac=0.48, eps_tol=0.01, max_iter=100, tol=0.0, volume_schedule="ramp"),
    "inverter2d": dict(volfrac=0.3, eps_tol=0.001, move=0.05, oc_exponent=0.3),
    "ssbeam3d": dict(volfrac=0.2, eps_tol=0.01, max_cg=50),
    **{f"cantilever3d-case{i}": dict(volfrac=0.2, eps_tol=0.01, max_cg=50) for i in range(1, 5)},
}
SCHEDULES = ("none", "ramp")


@dataclass
class ProblemSpec:
    """A preset plus every overridable run parameter.

    Use :func:`make_spec` to get the preset's defaults filled in.
    """

    preset: str
    dims: tuple = ()
    volfrac: float = 0.5
    solver: str = "aarmr"
    eps_tol: float = 0.01
    n_s: int = 2
    n_m: int = 2
    n_on: int = 20
    levels: int = 3
    cgtol: float = 1e-6
    max_cg: int = 200
    max_iter: int = 200
    tol: float = 0.01
    move: float = 0.2
    oc_exponent: float = 0.5
    filter_radius: float = 2.5
    volume_schedule: str = "none"

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ConfigurationError(f"unknown preset {self.preset!r}; choose from {', '.join(PRESETS)}")
        self.dims = tuple(int(d) for d in (self.dims or DEFAULT_DIMS[self.preset]))
        if len(self.dims) != len(DEFAULT_DIMS[self.preset]):
            raise ConfigurationError(f"preset {self.preset} needs {len(DEFAULT_DIMS[self.preset])} grid dimensions")
        if self.solver not in SOLVER_MODES:
            raise ConfigurationError(f"solver must be one of {', '.join(SOLVER_MODES)}")
        if self.volume_schedule not in SCHEDULES:
            raise ConfigurationError(f"volume_schedule must be one of {', '.join(SCHEDULES)}")

    def replace(self, **changes) -> "ProblemSpec":
        return dataclasses.replace(self, **changes)

    def problem(self) -> OptProblem:
        g, dm, load, extra = build_preset(self.preset, self.dims)
        return OptProblem(g, dm, load, self.volfrac, filter_radius=self.filter_radius, **extra)

    def config(self) -> OptConfig:
        return OptConfig(
            max_iter=self.max_iter, tol=self.tol, move=self.move, oc_exponent=self.oc_exponent,
            solver=self.solver,
            reanalysis=ReanalysisConfig(n_s=self.n_s, n_m=self.n_m, eps_tol=self.eps_tol, n_on=self.n_on),
            multigrid=MultigridConfig(levels=self.levels, cgtol=self.cgtol, max_cg=self.max_cg),
            volume_schedule=volume_ramp() if self.volume_schedule == "ramp" else None)


SPEC_FIELDS = {f.name: f for f in dataclasses.fields(ProblemSpec)}


def make_spec(preset: str, **overrides) -> ProblemSpec:
    if preset not in PRESETS:
        raise ConfigurationError(f"unknown preset {preset!r}; choose from {', '.join(PRESETS)}")
    unknown = set(overrides) - set(SPEC_FIELDS)
    if unknown:
        raise ConfigurationError(f"unknown spec keys: {', '.join(sorted(unknown))}")
    return ProblemSpec(preset=preset, **{**PRESET_DEFAULTS[preset], **overrides})


def parse_dims(text: str) -> tuple:
    try:
        return tuple(int(v) for v in str(text).lower().replace("×", "x").split("x"))
    except ValueError:
        raise ConfigurationError(f"cannot parse grid dimensions {text!r}; expected e.g. 320x160") from None


def coerce(key: str, value):
    """Convert a text value to the type of ProblemSpec field ``key``."""
    if key not in SPEC_FIELDS:
        raise ConfigurationError(f"unknown key {key!r}; valid keys: {', '.join(SPEC_FIELDS)}")
    if not isinstance(value, str):
        return value
    if key == "dims":
        return parse_dims(value)
    kind = SPEC_FIELDS[key].type
    try:
        if kind == "int":
            return int(value)
        if kind == "float":
            return float(value)
    except ValueError:
        raise ConfigurationError(f"{key}: cannot parse {value!r} as {kind}") from None
    return value.strip()


def parse_config(text: str) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = coerce(key, value)
    return out


def load_spec(target: str, overrides: dict | None = None) -> ProblemSpec:
    """Spec from a preset name or a config file path; ``overrides`` win over file values."""
    values = {}
    if target in PRESETS:
        values["preset"] = target
    elif os.path.isfile(target):
        values = parse_config(Path(target).read_text())
        if "preset" not in values:
            raise ConfigurationError(f"{target}: config file must set 'preset'")
    else:
        raise ConfigurationError(f"{target!r} is neither a preset ({', '.join(PRESETS)}) nor a config file")
    values.update({k: coerce(k, v) for k, v in (overrides or {}).items()})
    return make_spec(**values)


def format_spec(spec: ProblemSpec) -> str:
    lines = []
    for name in SPEC_FIELDS:
        v = getattr(spec, name)
        lines.append(f"{name} = {'x'.join(map(str, v)) if name == 'dims' else v}")
    return "\n".join(lines) + "\n"


# -- running -----------------------------------------------------------------

@dataclass
class RunReport:
    spec: ProblemSpec
    records: list[IterationRecord]
    physical: np.ndarray
    objective: float
    wall_seconds: float = 0.0

    @property
    def iterations(self) -> int:
        return len(self.records)

    @property
    def solve_seconds(self) -> float:
        return float(sum(r.solve_seconds for r in self.records))

    @property
    def mgcg_evaluations(self) -> int:
        return int(sum(r.mgcg_calls for r in self.records))

    @property
    def cg_iterations(self) -> int:
        return int(sum(r.cg_iters for r in self.records))

    @property
    def avg_cg(self) -> float:
        n = self.mgcg_evaluations
        return self.cg_iterations / n if n else 0.0

    def path_counts(self) -> dict:
        out = {}
        for r in self.records:
            out[r.path] = out.get(r.path, 0) + 1
        return out

    def summary(self) -> dict:
        s = self.spec
        return {
            "preset": s.preset, "dims": "x".join(map(str, s.dims)), "solver": s.solver,
            "volfrac": s.volfrac, "eps_tol": s.eps_tol, "n_s": s.n_s, "n_m": s.n_m, "n_on": s.n_on,
            "levels": s.levels, "iterations": self.iterations, "objective": self.objective,
            "last_iteration_objective": self.records[-1].objective if self.records else math.nan,
            "solve_seconds": self.solve_seconds, "wall_seconds": self.wall_seconds,
            "mgcg_evaluations": self.mgcg_evaluations, "cg_iterations": self.cg_iterations,
            "avg_cg": self.avg_cg,
            **{f"path_{k}": v for k, v in sorted(self.path_counts().items())},
        }


def run(spec: ProblemSpec, outdir=None, stem: str | None = None, callback=None) -> RunReport:
    """Optimize ``spec``; write the CSV log, density image and summary if ``outdir`` is given.

    ``objective`` in the report is the final design's objective from an
    accurate re-solve, so modes are compared on equal footing.
    """
    problem = spec.problem()
    config = spec.config()
    t0 = time.perf_counter()
    density, records = optimize(problem, config, callback)
    wall = time.perf_counter() - t0
    report = RunReport(spec, records, density.physical,
                       exact_objective(problem, density.physical, multigrid=config.multigrid), wall)
    if outdir is not None:
        write_run(report, outdir, stem)
    return report


def default_stem(spec: ProblemSpec) -> str:
    return f"{spec.preset}_{'x'.join(map(str, spec.dims))}_{spec.solver}"


def write_run(report: RunReport, outdir, stem: str | None = None) -> dict:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    stem = stem or default_stem(report.spec)
    paths = {"log": outdir / f"{stem}.csv", "summary": outdir / f"{stem}.summary.txt"}
    write_records_csv(report.records, paths["log"])
    dims = report.spec.dims
    if len(dims) == 2:
        paths["density"] = outdir / f"{stem}.pgm"
        write_pgm(report.physical, dims, paths["density"])
    else:
        paths["density"] = outdir / f"{stem}.vtk"
        write_vtk(report.physical, dims, paths["density"])
    _atomic_write(paths["summary"], format_summary(report.summary()))
    return paths


# -- comparison and sweeps ---------------------------------------------------

def speedup(t_ref: float, t_goal: float) -> float:
    return t_ref / t_goal if t_goal > 0 else math.inf


def relative_diff(c_goal: float, c_ref: float) -> float:
    """Objective difference in percent of the reference."""
    return (c_goal - c_ref) / abs(c_ref) * 100.0


COMPARE_COLUMNS = ("mode", "status", "objective", "diff_pct", "solve_seconds", "speedup",
                   "mgcg_evaluations", "avg_cg", "iterations", "error")


def compare(spec: ProblemSpec, modes, outdir=None, callback=None) -> list[dict]:
    """Run ``spec`` under each solver mode; the first mode is the reference.

    Failed runs become rows with ``status = failed`` and the error text.
    """
    modes = list(modes)
    if len(modes) < 2:
        raise ConfigurationError("compare needs at least two modes")
    rows = []
    for i, mode in enumerate(modes):
        s = spec.replace(solver=mode)
        try:
            rep = run(s, outdir, stem=f"{default_stem(s)}_{i}" if outdir else None, callback=callback)
            rows.append(dict(mode=mode, status="ok", objective=rep.objective,
                             solve_seconds=rep.solve_seconds, mgcg_evaluations=rep.mgcg_evaluations,
                             avg_cg=rep.avg_cg, iterations=rep.iterations, error=""))
        except (AarmrError, ValueError, RuntimeError) as exc:
            log.error("mode %s failed: %s", mode, exc)
            n = len(getattr(exc, "records", None) or [])
            rows.append(dict(mode=mode, status="failed", objective=math.nan, solve_seconds=math.nan,
                             mgcg_evaluations=0, avg_cg=math.nan, iterations=n, error=str(exc)))
    ref = rows[0]
    for row in rows:
        row["diff_pct"] = relative_diff(row["objective"], ref["objective"])
        row["speedup"] = speedup(ref["solve_seconds"], row["solve_seconds"])
    if outdir is not None:
        stem = f"{spec.preset}_{'x'.join(map(str, spec.dims))}_compare"
        write_table_csv(rows, COMPARE_COLUMNS, Path(outdir) / f"{stem}.csv")
        _atomic_write(Path(outdir) / f"{stem}.txt", format_compare(rows))
    return rows


def format_compare(rows) -> str:
    head = f"{'mode':<8} {'objective':>14} {'diff %':>10} {'solve s':>10} {'speedup':>8} {'MGCG':>6} {'avg CG':>8} {'iters':>6}"
    lines = [head, "-" * len(head)]
    for r in rows:
        if r["status"] != "ok":
            lines.append(f"{r['mode']:<8} FAILED after {r['iterations']} iterations: {r['error']}")
            continue
        lines.append(f"{r['mode']:<8} {r['objective']:>14.8g} {r['diff_pct']:>+10.4f} {r['solve_seconds']:>10.3f} "
                     f"{r['speedup']:>8.3f} {r['mgcg_evaluations']:>6d} {r['avg_cg']:>8.3f} {r['iterations']:>6d}")
    return "\n".join(lines) + "\n"


SWEEP_RESULT_COLUMNS = ("status", "objective", "iterations", "solve_seconds", "mgcg_evaluations",
                        "cg_iterations", "avg_cg", "error")


def sweep(spec: ProblemSpec, grid: dict, outdir=None, callback=None) -> list[dict]:
    """Run the Cartesian product of ``grid`` (field -> list of values); one row per cell."""
    if not grid:
        raise ConfigurationError("sweep needs at least one parameter")
    keys = list(grid)
    values = [[coerce(k, v) for v in grid[k]] for k in keys]
    rows = []
    for combo in itertools.product(*values):
        cell = dict(zip(keys, combo))
        row = {k: ("x".join(map(str, v)) if k == "dims" else v) for k, v in cell.items()}
        try:
            rep = run(spec.replace(**cell), callback=callback)
            row.update(status="ok", objective=rep.objective, iterations=rep.iterations,
                       solve_seconds=rep.solve_seconds, mgcg_evaluations=rep.mgcg_evaluations,
                       cg_iterations=rep.cg_iterations, avg_cg=rep.avg_cg, error="")
        except (AarmrError, ValueError, RuntimeError) as exc:
            log.error("sweep cell %s failed: %s", cell, exc)
            row.update(status="failed", objective=math.nan, iterations=len(getattr(exc, "records", None) or []),
                       solve_seconds=math.nan, mgcg_evaluations=0, cg_iterations=0, avg_cg=math.nan,
                       error=str(exc))
        rows.append(row)
        if outdir is not None:
            write_table_csv(rows, tuple(keys) + SWEEP_RESULT_COLUMNS,
                            Path(outdir) / f"{spec.preset}_{'x'.join(map(str, spec.dims))}_sweep.csv")
    return rows


# -- file formats ------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))  # shortest text that parses back to the same double
    return str(v)


def _atomic_write(path, data, mode="w"):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, mode) as fh:
        fh.write(data)
    os.replace(tmp, path)


def write_records_csv(records, path):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in records:
            w.writerow([_fmt(getattr(r, c)) for c in CSV_HEADER])
    os.replace(tmp, path)


def read_records_csv(path) -> list[dict]:
    types = dict(loop=int, objective=float, volume=float, change_pct=float, path=str,
                 epsilon=float, cg_iters=int, solve_seconds=float)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != CSV_HEADER:
            raise ConfigurationError(f"{path}: unexpected header {header}")
        return [{k: types[k](v) for k, v in zip(header, row)} for row in reader]


def write_table_csv(rows, columns, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r.get(c, "")) for c in columns])
    os.replace(tmp, path)


def write_pgm(physical, dims, path):
    """Binary 8-bit PGM, 255 = solid, top image row = top of the domain."""
    nelx, nely = dims
    img = np.rint(np.clip(physical, 0, 1).reshape(nely, nelx)[::-1] * 255).astype(np.uint8)
    _atomic_write(path, f"P5\n{nelx} {nely}\n255\n".encode() + img.tobytes(), "wb")


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ConfigurationError(f"{path}: not a binary PGM")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4][: w * h], dtype=np.uint8).reshape(h, w)


def write_vtk(physical, dims, path):
    """Legacy ASCII VTK structured points with the physical density as CELL_DATA."""
    nx, ny, nz = dims
    head = ("# vtk DataFile Version 3.0\n"
            "physical density\n"
            "ASCII\n"
            "DATASET STRUCTURED_POINTS\n"
            f"DIMENSIONS {nx + 1} {ny + 1} {nz + 1}\n"
            "ORIGIN 0 0 0\n"
            "SPACING 1 1 1\n"
            f"CELL_DATA {nx * ny * nz}\n"
            "SCALARS density double 1\n"
            "LOOKUP_TABLE default\n")
    body = "\n".join(format(float(v), ".9g") for v in physical)
    _atomic_write(path, head + body + "\n")


def read_vtk(path) -> tuple[tuple, np.ndarray]:
    """Cell dimensions and cell values of a file written by :func:`write_vtk`."""
    lines = Path(path).read_text().splitlines()
    dims = None
    for i, line in enumerate(lines):
        if line.startswith("DIMENSIONS"):
            dims = tuple(int(v) - 1 for v in line.split()[1:])
        if line.startswith("LOOKUP_TABLE"):
            return dims, np.array([float(v) for v in lines[i + 1:] if v.strip()])
    raise ConfigurationError(f"{path}: no cell data found")


def format_summary(summary: dict) -> str:
    width = max(len(k) for k in summary)
    return "".join(f"{k:<{width}} : {_fmt(v)}\n" for k, v in summary.items())
