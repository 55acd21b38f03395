"""Command-line entry point: ``identify``, ``run`` and ``compare``.

Exit codes: 0 success, 1 runtime failure, 2 configuration or usage error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import re
import sys
import tempfile
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .errors import AirpathError, ConfigurationError, DomainError, IdentificationError
from .fb_mpc import FbGrids, FbMpcConfig
from .feedforward import FfMode, FfMpcConfig
from .identification import build_grid
from .lpv import DEFAULT_FUEL_BREAKPOINTS, DEFAULT_SPEED_BREAKPOINTS, ModelGrid
from .plant import PlantParams
from .riccati import PenaltyGrid
from .schema import GRID_SCHEMA, RUN_SCHEMA, validate
from .sim import (ControllerConfigs, Scenario, SimOptions, compute_metrics, make_scenario,
                  run_closed_loop)

log = logging.getLogger("airpath_mpc")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2
OUTPUT_ROOT_ENV = "AIRPATH_MPC_OUTPUT"
MODE_LABELS = {"none": "FB MPC only", "lookup_table": "LUT FF + FB MPC", "mpc": "FF MPC + FB MPC"}


class UsageError(ConfigurationError):
    pass


# -- files ----------------------------------------------------------------------

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def atomic_write(path, text: str) -> None:
    """Write via a temporary file in the target directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        umask = os.umask(0)
        os.umask(umask)
        os.chmod(tmp, 0o666 & ~umask)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _read_json(path, what):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read {what}: {exc.strerror or exc}", str(path)) from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise UsageError(f"invalid JSON ({exc.msg} at line {exc.lineno})", str(path)) from exc


@dataclass
class RunManifest:
    """Everything needed to repeat a run: resolved configuration, input digests, versions."""

    command: str
    config: dict
    seeds: list
    inputs: dict = field(default_factory=dict)
    tool_version: str = __version__

    def to_dict(self):
        return {"tool": "airpath-mpc", "tool_version": self.tool_version,
                "command": self.command, "config": self.config, "seeds": self.seeds,
                "inputs": self.inputs,
                "environment": {"python": platform.python_version(),
                                "numpy": np.__version__}}

    def write(self, out_dir):
        atomic_write(Path(out_dir) / "manifest.json", _dump(self.to_dict()))


# -- run configuration --------------------------------------------------------------

@dataclass
class RunSetup:
    """A validated run configuration with its resolved objects."""

    document: dict
    base_dir: Path
    plant: PlantParams
    configs: ControllerConfigs
    ff_mode: FfMode
    options: SimOptions
    seed: int
    grid_path: Path = None
    inputs: dict = field(default_factory=dict)

    def scenario(self, seed) -> Scenario:
        spec = self.document["scenario"]
        if "file" in spec:
            sc = Scenario.from_csv(self._resolve(spec["file"]), dt=self.configs.fb.sample_period)
        else:
            sc = make_scenario(spec["kind"], spec.get("params"), seed=seed,
                               dt=self.configs.fb.sample_period)
        if "label" in spec:
            sc.label = spec["label"]
        return sc

    def _resolve(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    def load_grid(self) -> ModelGrid:
        if self.grid_path is None:
            log.info("no grid file given; identifying the default grid on the plant")
            return build_grid(self.plant)
        return load_grid_file(self.grid_path)


def load_grid_file(path) -> ModelGrid:
    doc = _read_json(path, "model grid")
    validate(doc, GRID_SCHEMA, root="grid")
    return ModelGrid.from_dict(doc)


def load_run_config(path) -> RunSetup:
    path = Path(path)
    doc = _read_json(path, "run configuration")
    validate(doc, RUN_SCHEMA)
    base = path.resolve().parent
    fb = FbMpcConfig.from_dict(doc.get("fb", {}))
    ff = FfMpcConfig.from_dict(doc.get("ff", {}))
    sim = doc.get("sim", {})
    setup = RunSetup(
        document=doc, base_dir=base, plant=PlantParams.from_dict(doc.get("plant", {})),
        configs=ControllerConfigs(fb, ff), ff_mode=FfMode.parse(doc.get("ff_mode", "none")),
        options=SimOptions(egr_lag=sim.get("egr_lag", 0.0),
                           measurement_noise=tuple(sim.get("measurement_noise", (0.0, 0.0)))),
        seed=int(doc.get("seed", 0)))
    setup.inputs[str(path)] = sha256_file(path)
    if "grid" in doc:
        setup.grid_path = setup._resolve(doc["grid"])
        if not setup.grid_path.is_file():
            raise UsageError("grid file not found", "grid")
        setup.inputs[str(setup.grid_path)] = sha256_file(setup.grid_path)
    if "file" in doc["scenario"]:
        sp = setup._resolve(doc["scenario"]["file"])
        if not sp.is_file():
            raise UsageError("scenario file not found", "scenario.file")
        setup.inputs[str(sp)] = sha256_file(sp)
    # build once so envelope errors surface as configuration errors before any work
    setup.scenario(setup.seed)
    return setup


def resolved_config(setup: RunSetup) -> dict:
    return {"plant": setup.plant.to_dict(),
            "grid": str(setup.grid_path) if setup.grid_path else None,
            "fb": setup.configs.fb.to_dict(), "ff": setup.configs.ff.to_dict(),
            "ff_mode": setup.ff_mode.value, "scenario": setup.document["scenario"],
            "sim": setup.options.to_dict(), "seed": setup.seed}


# -- argument parsing -------------------------------------------------------------

def parse_mesh(text):
    m = re.fullmatch(r"\s*(\d+)\s*[xX]\s*(\d+)\s*", text)
    if not m or int(m.group(1)) < 2 or int(m.group(2)) < 2:
        raise argparse.ArgumentTypeError(f"mesh must look like 9x11 with both sizes >= 2, got {text!r}")
    return int(m.group(1)), int(m.group(2))


def parse_seeds(text):
    """``1..5`` or ``1,3,7`` (or a mix such as ``1..3,9``)."""
    seeds = []
    for part in text.split(","):
        part = part.strip()
        m = re.fullmatch(r"(\d+)\.\.(\d+)", part)
        if m:
            lo, hi = int(m.group(1)), int(m.group(2))
            if hi < lo:
                raise argparse.ArgumentTypeError(f"empty seed range {part!r}")
            seeds.extend(range(lo, hi + 1))
        elif part.isdigit():
            seeds.append(int(part))
        else:
            raise argparse.ArgumentTypeError(f"bad seed token {part!r}")
    return list(dict.fromkeys(seeds))


def parse_modes(text):
    modes = []
    for tok in text.split(","):
        try:
            modes.append(FfMode.parse(tok))
        except ConfigurationError:
            raise argparse.ArgumentTypeError(f"unknown mode {tok.strip()!r} "
                                             "(expected none, lut or mpc)") from None
    return list(dict.fromkeys(modes))


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="airpath-mpc", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("identify", help="identify the LPV model grid on the surrogate plant")
    s.add_argument("--plant", required=True, help="plant parameter JSON (may be {})")
    s.add_argument("--out", required=True, help="model-grid JSON to write")
    s.add_argument("--mesh", type=parse_mesh, default=(9, 11),
                   help="speed x fuel breakpoints, e.g. 9x11 (default)")

    s = sub.add_parser("run", help="simulate one configuration")
    s.add_argument("--config", required=True)
    s.add_argument("--out", help=f"output directory (default ${OUTPUT_ROOT_ENV}/run)")

    s = sub.add_parser("compare", help="compare feedforward modes over seeds")
    s.add_argument("--config", required=True)
    s.add_argument("--modes", type=parse_modes, default=parse_modes("none,lut,mpc"))
    s.add_argument("--seeds", type=parse_seeds, default=parse_seeds("1..5"))
    s.add_argument("--out", help=f"output directory (default ${OUTPUT_ROOT_ENV}/compare)")
    s.add_argument("--jobs", type=int, default=1, help="parallel cells (default 1)")
    return p


def _out_dir(arg, command) -> Path:
    if arg:
        return Path(arg)
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "airpath-output")) / command


# -- commands ---------------------------------------------------------------------

def mesh_breakpoints(mesh):
    if mesh == (9, 11):
        return DEFAULT_SPEED_BREAKPOINTS, DEFAULT_FUEL_BREAKPOINTS
    lo_s, hi_s = DEFAULT_SPEED_BREAKPOINTS[0], DEFAULT_SPEED_BREAKPOINTS[-1]
    lo_f, hi_f = DEFAULT_FUEL_BREAKPOINTS[0], DEFAULT_FUEL_BREAKPOINTS[-1]
    return tuple(np.linspace(lo_s, hi_s, mesh[0])), tuple(np.linspace(lo_f, hi_f, mesh[1]))


def cmd_identify(args) -> int:
    doc = _read_json(args.plant, "plant configuration")
    if not isinstance(doc, dict):
        raise UsageError("plant configuration must be a JSON object", str(args.plant))
    plant = PlantParams.from_dict(doc.get("plant", doc))
    speed, fuel = mesh_breakpoints(args.mesh)
    report = []
    grid = build_grid(plant, speed, fuel, report=report)
    fb = FbMpcConfig()
    records = [PenaltyGrid.compute(grid, Q, R).to_dict() for Q, R in fb.region_table.weight_sets]
    grid = ModelGrid(grid.speed, grid.fuel, grid.nodes, records)
    doc = grid.to_dict()
    validate(doc, GRID_SCHEMA, root="grid")
    atomic_write(args.out, json.dumps(doc, indent=1))
    rel = np.array([fit.relative_residual for fit in report])
    radii = np.array([m.spectral_radius for m in grid])
    worst = report[int(np.argmax(rel.max(axis=1)))]
    print(f"identified {len(report)} nodes ({args.mesh[0]}x{args.mesh[1]}) -> {args.out}")
    print(f"one-step residual RMS / signal range: p_im max {rel[:, 0].max():.2e} "
          f"mean {rel[:, 0].mean():.2e}; chi_egr max {rel[:, 1].max():.2e} "
          f"mean {rel[:, 1].mean():.2e}")
    print(f"worst node {worst.node} at ({worst.rho[0]:g} rpm, {worst.rho[1]:g} mg/stroke); "
          f"largest spectral radius {radii.max():.4f}")
    return EXIT_OK


def simulate_cell(setup: RunSetup, grid: ModelGrid, mode: FfMode, seed: int, out_dir: Path,
                  fb_grids: FbGrids = None) -> dict:
    """One (mode, seed) simulation written to ``out_dir``; returns its metrics."""
    scenario = setup.scenario(seed)
    trace = run_closed_loop(setup.plant, grid, setup.configs, mode, scenario, seed=seed,
                            options=setup.options, fb_grids=fb_grids)
    metrics = compute_metrics(trace).to_dict()
    out_dir = Path(out_dir)
    atomic_write(out_dir / "trace.csv", trace.to_csv())
    summary = {"mode": mode.value, "seed": seed, "scenario": scenario.label,
               "scenario_checksum": scenario.checksum(), "samples": len(trace),
               "metrics": metrics,
               "solver": {"fb_not_optimal": sum(s != "optimal" for s in trace.fb_status),
                          "ff_not_optimal": sum(s not in ("optimal", "none", "lut")
                                                for s in trace.ff_status)}}
    atomic_write(out_dir / "metrics.json", _dump(summary))
    return summary


def cmd_run(args) -> int:
    setup = load_run_config(args.config)
    out = _out_dir(args.out, "run")
    grid = setup.load_grid()
    summary = simulate_cell(setup, grid, setup.ff_mode, setup.seed, out)
    RunManifest("run", resolved_config(setup), [setup.seed], setup.inputs).write(out)
    m = summary["metrics"]
    print(f"{MODE_LABELS[setup.ff_mode.value]}: mean |e_pim| {m['mean_abs_error_pim']:.4g} bar, "
          f"mean |e_egr| {m['mean_abs_error_egr']:.4g} -> {out}")
    return EXIT_OK


_WORKER = {}


def _init_worker(setup, grid):
    _WORKER["setup"] = setup
    _WORKER["grid"] = grid
    _WORKER["fb_grids"] = FbGrids(grid, setup.configs.fb)


def _cell(mode, seed, out_dir):
    try:
        return simulate_cell(_WORKER["setup"], _WORKER["grid"], mode, seed, out_dir,
                             _WORKER["fb_grids"])
    except Exception as exc:  # recorded per cell; the aggregate is still produced
        return {"mode": mode.value, "seed": seed, "error": f"{type(exc).__name__}: {exc}",
                "traceback": traceback.format_exc()}


def _delta(value, base):
    if base is None or not np.isfinite(base) or base == 0:
        return ""
    pct = 100.0 * (value - base) / base
    arrow = "↓" if pct <= 0 else "↑"
    return f"({arrow} {abs(pct):.1f}%)"


def comparison_table(results, modes):
    """Per-mode seed averages and baseline-relative changes."""
    rows = []
    by_mode = {m.value: [r for r in results if r["mode"] == m.value and "metrics" in r]
               for m in modes}
    base = by_mode.get(FfMode.NONE.value)
    base_vals = None
    if base:
        base_vals = [float(np.mean([r["metrics"][k] for r in base]))
                     for k in ("mean_abs_error_pim", "mean_abs_error_egr")]
    for m in modes:
        cells = by_mode[m.value]
        row = {"mode": m.value, "controller": MODE_LABELS[m.value],
               "seeds": sorted(r["seed"] for r in cells),
               "failed_seeds": sorted(r["seed"] for r in results
                                      if r["mode"] == m.value and "error" in r)}
        for i, key in enumerate(("mean_abs_error_pim", "mean_abs_error_egr")):
            val = float(np.mean([r["metrics"][key] for r in cells])) if cells else float("nan")
            row[key] = val
            if base_vals is not None and m is not FfMode.NONE and cells:
                row[key.replace("mean_abs_error", "change_pct")] = (
                    100.0 * (val - base_vals[i]) / base_vals[i])
        rows.append(row)
    return rows, base_vals


def format_table(rows, base_vals) -> str:
    head = ("Controller", "e_pim [bar]", "e_egr [-]")
    lines = []
    for r in rows:
        cells = [r["controller"]]
        for i, key in enumerate(("mean_abs_error_pim", "mean_abs_error_egr")):
            txt = f"{r[key]:.4f}"
            if base_vals is not None and r["mode"] != "none":
                txt += " " + _delta(r[key], base_vals[i])
            cells.append(txt)
        lines.append(cells)
    widths = [max(len(head[c]), *(len(l[c]) for l in lines)) for c in range(3)]
    fmt = lambda cells: "  ".join(cells[c].ljust(widths[c]) for c in range(3)).rstrip()
    out = [fmt(head), fmt(["-" * w for w in widths])] + [fmt(l) for l in lines]
    return "\n".join(out) + "\n"


def cmd_compare(args) -> int:
    setup = load_run_config(args.config)
    if args.jobs < 1:
        raise UsageError("--jobs must be at least 1", "--jobs")
    out = _out_dir(args.out, "compare")
    grid = setup.load_grid()
    cells = [(m, s, out / "cells" / f"{m.value}_seed{s}") for m in args.modes for s in args.seeds]
    if args.jobs == 1 or len(cells) == 1:
        _init_worker(setup, grid)
        results = [_cell(*c) for c in cells]
    else:
        with ProcessPoolExecutor(max_workers=args.jobs, initializer=_init_worker,
                                 initargs=(setup, grid)) as pool:
            results = list(pool.map(_cell, *zip(*cells)))
    for r in results:
        if "error" in r:
            print(f"cell {r['mode']} seed {r['seed']} failed: {r['error']}", file=sys.stderr)
    rows, base_vals = comparison_table(results, args.modes)
    summary = {"modes": [m.value for m in args.modes], "seeds": args.seeds, "table": rows,
               "cells": [{k: v for k, v in r.items() if k != "traceback"} for r in results]}
    atomic_write(out / "comparison.json", _dump(summary))
    text = format_table(rows, base_vals)
    atomic_write(out / "comparison.txt", text)
    RunManifest("compare", resolved_config(setup), args.seeds, setup.inputs).write(out)
    print(text, end="")
    return EXIT_RUNTIME if all("error" in r for r in results) else EXIT_OK


COMMANDS = {"identify": cmd_identify, "run": cmd_run, "compare": cmd_compare}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigurationError, DomainError) as exc:
        print(f"airpath-mpc: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except IdentificationError as exc:
        print(f"airpath-mpc: identification failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (AirpathError, OSError, ArithmeticError) as exc:
        print(f"airpath-mpc: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
