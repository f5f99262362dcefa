"""Command-line interface: ``ensemblectl solve|validate|export-physical|convergence``.

Exit codes: 0 success, 1 error (bad input, solver failure), 2 a declared
threshold was not met.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__, bloch, studies
from .bloch import AXES, BlochParams
from .solver import SolverConfig
from .studies import Regularization, StudySpec

log = logging.getLogger("ensemblectl")

EXIT_OK, EXIT_ERROR, EXIT_THRESHOLD = 0, 1, 2
FORMATS = ("pulse_csv", "robustness_csv", "convergence_csv", "manifest_json", "physical_pulse_csv")
FREQUENCY_PROFILES = {"none": None, "sin": np.sin, "cos": np.cos}
MANIFEST_VERSION = 1


class ConfigError(ValueError):
    """Invalid run configuration; the message starts with the field path."""


# -- configuration -----------------------------------------------------------------

_BLOCH_KEYS = ("B", "delta", "amplitude_bound", "duration", "frequency_profile")
_STUDY_KEYS = ("name", "orders", "cost_weights", "stages", "sweep.N", "sweep.N_omega", "mode",
               "cost_choice", "horizon_min", "validation_points", "validation_steps", "threshold",
               "worst_threshold", "threads")
_REG_KEYS = tuple(f.name for f in dataclasses.fields(Regularization))
_SOLVER_KEYS = tuple(f.name for f in dataclasses.fields(SolverConfig))
_TOP_KEYS = ("output_dir", "formats", "nominal_amplitude_hz")

KNOWN_KEYS = (
    {f"bloch.{k}" for k in _BLOCH_KEYS}
    | {f"study.{k}" for k in _STUDY_KEYS}
    | {f"regularization.{k}" for k in _REG_KEYS}
    | {f"solver.{k}" for k in _SOLVER_KEYS}
    | set(_TOP_KEYS)
)


def flatten(doc, prefix="") -> dict:
    """Nested mappings to dotted keys; already-dotted keys pass through."""
    out = {}
    for key, val in doc.items():
        path = f"{prefix}{key}"
        if isinstance(val, dict):
            out.update(flatten(val, path + "."))
        else:
            out[path] = val
    return out


def load_document(path) -> dict:
    """Parse a JSON, YAML or TOML config (by extension) into flat dotted keys.

    A run manifest is accepted too: its echoed ``config`` is used.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    suffix = path.suffix.lower()
    try:
        if suffix == ".json":
            doc = json.loads(text)
        elif suffix in (".yaml", ".yml"):
            import yaml

            doc = yaml.safe_load(text)
        elif suffix == ".toml":
            try:
                import tomllib
            except ModuleNotFoundError:  # Python < 3.11
                import tomli as tomllib
            doc = tomllib.loads(text)
        else:
            raise ConfigError(f"unsupported config format {suffix!r} (use .json, .yaml or .toml)")
    except ConfigError:
        raise
    except Exception as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: the config must be a mapping")
    if "manifest_version" in doc and "config" in doc:
        doc = doc["config"]
    return flatten(doc)


def _num(path, val, kind=float, positive=False):
    if isinstance(val, bool) or not isinstance(val, (int, float)) or (kind is int and not float(val).is_integer()):
        raise ConfigError(f"{path}: expected {'an integer' if kind is int else 'a number'}, got {val!r}")
    val = kind(val)
    if positive and not val > 0:
        raise ConfigError(f"{path}: must be positive, got {val!r}")
    return val


def _list(path, val, kind=float, length=None):
    if not isinstance(val, (list, tuple)):
        raise ConfigError(f"{path}: expected a list, got {val!r}")
    if length is not None and len(val) != length:
        raise ConfigError(f"{path}: expected {length} values, got {len(val)}")
    return [_num(f"{path}[{i}]", v, kind) for i, v in enumerate(val)]


def _construct(section, cls, kwargs):
    """Build ``cls(**kwargs)``; validation errors are prefixed with ``section.field``."""
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as exc:
        msg = str(exc)
        words = msg.replace(",", " ").replace(".", " ").split()
        names = [f.name for f in dataclasses.fields(cls) if f.name in words]
        where = f"{section}.{min(names, key=words.index)}" if names else section
        raise ConfigError(f"{where}: {msg}") from None


@dataclass
class RunConfig:
    study: StudySpec
    solver: SolverConfig
    output_dir: Path
    formats: tuple
    nominal_amplitude_hz: Optional[float] = None
    worst_threshold: Optional[float] = None
    echo: dict = field(default_factory=dict)


def default_formats(name: str) -> list:
    if name == "convergence":
        return ["convergence_csv", "manifest_json"]
    return ["pulse_csv", "robustness_csv", "manifest_json"]


def parse_config(flat: dict) -> RunConfig:
    """Validate every field of a flat config before any computation."""
    unknown = sorted(set(flat) - KNOWN_KEYS)
    if unknown:
        raise ConfigError(f"{unknown[0]}: unknown field")
    if "study.name" not in flat:
        raise ConfigError("study.name: required field missing")
    name = flat["study.name"]
    if name not in studies.STUDY_NAMES:
        raise ConfigError(f"study.name: must be one of {list(studies.STUDY_NAMES)}, got {name!r}")

    bkw = {}
    for k in ("B", "delta", "amplitude_bound", "duration"):
        if f"bloch.{k}" in flat:
            bkw[k] = _num(f"bloch.{k}", flat[f"bloch.{k}"])
    prof = flat.get("bloch.frequency_profile", "none")
    if prof not in FREQUENCY_PROFILES:
        raise ConfigError(f"bloch.frequency_profile: must be one of {list(FREQUENCY_PROFILES)}, got {prof!r}")
    bkw["frequency_profile"] = FREQUENCY_PROFILES[prof]
    params = _construct("bloch", BlochParams, bkw)

    rkw = {}
    for k in _REG_KEYS:
        key = f"regularization.{k}"
        if key in flat:
            kind = int if k in ("resolution_modes", "smoothness_order", "bound_oversample") else float
            rkw[k] = None if flat[key] is None else _num(key, flat[key], kind)
    reg = None
    if rkw:
        base = dataclasses.asdict(studies.default_regularization(name))
        reg = _construct("regularization", Regularization, {**base, **rkw})

    skw = {"name": name, "bloch": params, "regularization": reg}
    if "study.orders" in flat:
        skw["orders"] = tuple(_list("study.orders", flat["study.orders"], int, 3))
    if "study.cost_weights" in flat:
        skw["cost_weights"] = tuple(_list("study.cost_weights", flat["study.cost_weights"], float, 3))
    if "study.stages" in flat:
        stages = flat["study.stages"]
        if not isinstance(stages, list) or not all(isinstance(s, (list, tuple)) and len(s) == 2 for s in stages):
            raise ConfigError("study.stages: expected a list of [transfer, fraction] pairs")
        skw["stages"] = [(str(t), _num(f"study.stages[{i}]", f)) for i, (t, f) in enumerate(stages)]
    if "study.sweep.N" in flat or "study.sweep.N_omega" in flat:
        skw["sweep"] = {
            "N": _list("study.sweep.N", flat.get("study.sweep.N", [8, 16, 24, 32, 40]), int),
            "N_omega": _list("study.sweep.N_omega", flat.get("study.sweep.N_omega", [2, 4, 8, 12]), int),
        }
    for k in ("mode", "cost_choice"):
        if f"study.{k}" in flat:
            skw[k] = flat[f"study.{k}"]
    if "study.horizon_min" in flat:
        skw["horizon_min"] = _num("study.horizon_min", flat["study.horizon_min"], positive=True)
    if "study.validation_points" in flat:
        skw["validation_points"] = tuple(_list("study.validation_points", flat["study.validation_points"], int, 2))
    if "study.validation_steps" in flat:
        skw["validation_steps"] = _num("study.validation_steps", flat["study.validation_steps"], int)
    if flat.get("study.threshold") is not None:
        skw["threshold"] = _num("study.threshold", flat["study.threshold"])
    if flat.get("study.threads") is not None:
        skw["threads"] = _num("study.threads", flat["study.threads"], int, positive=True)
    spec = _construct("study", StudySpec, skw)
    worst = flat.get("study.worst_threshold")
    worst = None if worst is None else _num("study.worst_threshold", worst)

    ckw = {}
    for k in _SOLVER_KEYS:
        key = f"solver.{k}"
        if key in flat:
            kind = int if k in ("max_outer", "max_inner", "memory", "seed") else float
            ckw[k] = _num(key, flat[key], kind)
    solver = studies.default_solver_config(name)
    solver = _construct("solver", SolverConfig, {**dataclasses.asdict(solver), **ckw})

    formats = flat.get("formats", default_formats(name))
    if not isinstance(formats, list) or not all(isinstance(f, str) for f in formats):
        raise ConfigError("formats: expected a list of format names")
    for f in formats:
        if f not in FORMATS:
            raise ConfigError(f"formats: unknown format {f!r}; choose from {list(FORMATS)}")
    if name == "convergence" and set(formats) - {"convergence_csv", "manifest_json"}:
        raise ConfigError("formats: the convergence study writes only convergence_csv and manifest_json")
    if name != "convergence" and "convergence_csv" in formats:
        raise ConfigError("formats: convergence_csv needs study.name = convergence")
    amp = flat.get("nominal_amplitude_hz")
    if amp is not None:
        amp = _num("nominal_amplitude_hz", amp, positive=True)
    if "physical_pulse_csv" in formats and amp is None:
        raise ConfigError("nominal_amplitude_hz: required when physical_pulse_csv is requested")
    out = flat.get("output_dir", "ensemblectl-out")
    if not isinstance(out, str) or not out:
        raise ConfigError("output_dir: expected a path string")

    echo = echo_config(spec, solver, formats, amp, worst, prof)
    return RunConfig(spec, solver, Path(out), tuple(formats), amp, worst, echo)


def echo_config(spec: StudySpec, solver: SolverConfig, formats, amp, worst, prof) -> dict:
    """Complete flat config (defaults filled in) that reproduces the run.

    ``output_dir`` is left out on purpose: rerunning a manifest into another
    directory must give byte-identical files.
    """
    p = spec.bloch
    echo = {
        "study.name": spec.name,
        "bloch.B": p.B,
        "bloch.delta": p.delta,
        "bloch.amplitude_bound": p.amplitude_bound,
        "bloch.duration": p.duration,
        "bloch.frequency_profile": prof,
        "study.orders": list(spec.orders),
        "study.cost_weights": list(spec.cost_weights),
        "study.mode": spec.mode,
        "study.cost_choice": spec.cost_choice,
        "study.horizon_min": spec.horizon_min,
        "study.validation_steps": spec.validation_steps,
        "study.threshold": spec.threshold,
        "study.worst_threshold": worst,
    }
    if spec.stages is not None:
        echo["study.stages"] = [list(s) for s in spec.stages]
    if spec.sweep is not None:
        echo["study.sweep.N"] = list(spec.sweep["N"])
        echo["study.sweep.N_omega"] = list(spec.sweep["N_omega"])
    if spec.validation_points is not None:
        echo["study.validation_points"] = list(spec.validation_points)
    for k, v in dataclasses.asdict(spec.regularization).items():
        echo[f"regularization.{k}"] = v
    for k, v in dataclasses.asdict(solver).items():
        echo[f"solver.{k}"] = v
    echo["formats"] = list(formats)
    echo["nominal_amplitude_hz"] = amp
    return echo


# -- running studies -----------------------------------------------------------------


class _Outputs:
    """Tracks written files so a failed run leaves nothing behind."""

    def __init__(self, root: Path):
        self.root = root
        self.created_root = not root.exists()
        self.files = []

    def path(self, name: str) -> Path:
        self.root.mkdir(parents=True, exist_ok=True)
        p = self.root / name
        self.files.append(p)
        return p

    def discard(self):
        for p in self.files:
            try:
                p.unlink()
            except FileNotFoundError:
                pass
        if self.created_root:
            try:
                self.root.rmdir()
            except OSError:
                pass


def _threshold_ok(value, threshold, sense="max"):
    if threshold is None:
        return True
    return value >= threshold if sense == "max" else value <= threshold


def _write_pulse_outputs(cfg: RunConfig, out: _Outputs, sol, report, suffix=""):
    written = []
    if "pulse_csv" in cfg.formats:
        p = out.path(f"pulse{suffix}.csv")
        studies.write_pulse_csv(p, sol)
        written.append(p.name)
    if "robustness_csv" in cfg.formats and report is not None:
        p = out.path(f"robustness{suffix}.csv")
        studies.write_robustness_csv(p, report)
        written.append(p.name)
    if "physical_pulse_csv" in cfg.formats:
        p = out.path(f"physical_pulse{suffix}.csv")
        t = np.linspace(0.0, sol.horizon, 2001)
        bloch.to_physical((t, sol.control_at(t)), cfg.nominal_amplitude_hz).to_csv(p)
        written.append(p.name)
    return written


def _solution_stats(sol, spec: StudySpec, initial) -> dict:
    return {
        "solver": sol.solver_stats,
        "horizon": sol.horizon,
        "objective": sol.objective_value,
        "cost_breakdown": sol.cost_breakdown,
        "dynamics_residual": sol.dynamics_residual,
        "max_control_norm_oversampled": studies.max_interpolant_norm(sol),
        "oracle_gap": studies.oracle_gap(sol, spec.bloch, initial, spec.validation_steps),
    }


def run_study(cfg: RunConfig) -> tuple[dict, bool, list]:
    """Run the configured study and write its outputs.

    Returns ``(results, thresholds_met, files)``.  On any exception the
    files written so far are removed before re-raising.
    """
    spec = cfg.study
    out = _Outputs(cfg.output_dir)
    try:
        results, ok, files = _dispatch(cfg, spec, out)
        if "manifest_json" in cfg.formats:
            p = out.path("manifest.json")
            manifest = {
                "manifest_version": MANIFEST_VERSION,
                "package_version": __version__,
                "study": spec.name,
                "config": cfg.echo,
                "results": results,
                "thresholds": {"threshold": spec.threshold, "worst_threshold": cfg.worst_threshold},
                "passed": ok,
                "outputs": files + [p.name],
            }
            p.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=_json_default) + "\n")
            files.append(p.name)
        return results, ok, files
    except BaseException:
        out.discard()
        raise


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serialisable: {type(obj).__name__}")


def _dispatch(cfg: RunConfig, spec: StudySpec, out: _Outputs):
    z = AXES["z"]
    if spec.name == "robust_pi":
        sol, rep = studies.run_robust_pi(spec, cfg.solver)
        files = _write_pulse_outputs(cfg, out, sol, rep)
        results = {"robustness": rep.summary(), **_solution_stats(sol, spec, z)}
        ok = _threshold_ok(rep.average, spec.threshold, "min") and _threshold_ok(rep.worst, cfg.worst_threshold, "min")
        return results, ok, files

    if spec.name == "three_stage":
        sols, reps = studies.run_three_stage(spec, config=cfg.solver)
        files, stages = [], []
        for i, (sol, rep) in enumerate(zip(sols, reps), start=1):
            files += _write_pulse_outputs(cfg, out, sol, rep, suffix=f"_stage{i}")
            stages.append({"robustness": rep.summary(), **_solution_stats(sol, spec, sol.states[0])})
        ok = all(_threshold_ok(r.average, spec.threshold) and _threshold_ok(r.worst, cfg.worst_threshold)
                 for r in reps)
        return {"mode": spec.mode, "stages": stages}, ok, files

    if spec.name == "time_varying":
        sol, mx = studies.run_time_varying(spec, config=cfg.solver)
        axes = [np.array([0.0]), np.array([1.0])]
        rep = studies.RobustnessReport(axes[0], axes[1], np.array([[mx]]), "M_x", "max", spec.threshold)
        files = _write_pulse_outputs(cfg, out, sol, rep)
        results = {"cost_choice": spec.cost_choice, "Mx": mx, "energy": studies.control_energy(sol),
                   **_solution_stats(sol, spec, z)}
        return results, _threshold_ok(mx, spec.threshold), files

    cells = studies.run_convergence(spec, cfg.solver)
    files = []
    if "convergence_csv" in cfg.formats:
        p = out.path("convergence.csv")
        studies.write_convergence_csv(p, cells)
        files.append(p.name)
    largest = max(cells, key=lambda c: (c.N, c.N_omega))
    results = {"cells": [dataclasses.asdict(c) for c in cells], "failed_cells": sum(c.status == "failed" for c in cells)}
    ok = _threshold_ok(largest.avg_Mx, spec.threshold) and np.isfinite(largest.avg_Mx)
    return results, bool(ok), files


# -- commands ----------------------------------------------------------------------------


def cmd_solve(args, require=None) -> int:
    cfg = parse_config(load_document(args.config))
    if require is not None and cfg.study.name != require:
        raise ConfigError(f"study.name: the {require} command needs study.name = {require}, got {cfg.study.name!r}")
    if args.output_dir:
        cfg = dataclasses.replace(cfg, output_dir=Path(args.output_dir))
    results, ok, files = run_study(cfg)
    _print_summary(cfg, results)
    print(f"outputs in {cfg.output_dir}: {', '.join(files) if files else '(none)'}")
    if not ok:
        print("threshold not met", file=sys.stderr)
        return EXIT_THRESHOLD
    return EXIT_OK


def _print_summary(cfg: RunConfig, results: dict):
    name = cfg.study.name
    if name == "robust_pi":
        r = results["robustness"]
        print(f"robust_pi: average {r['quantity']} = {r['average']:.6f}, worst = {r['worst']:.6f}")
    elif name == "three_stage":
        for i, st in enumerate(results["stages"], start=1):
            r = st["robustness"]
            print(f"stage {i}: average {r['quantity']} = {r['average']:.6f}, worst = {r['worst']:.6f}")
    elif name == "time_varying":
        print(f"time_varying ({results['cost_choice']}): M_x(T) = {results['Mx']:.6f}, "
              f"T = {results['horizon']:.6f}, energy = {results['energy']:.6f}")
    else:
        for c in results["cells"]:
            print(f"N={c['N']:3d} N_omega={c['N_omega']:3d} avg_Mx={c['avg_Mx']:.6f} {c['status']}")


def _parse_grid(text: str):
    try:
        a, b = text.lower().split("x")
        n, m = int(a), int(b)
    except ValueError:
        raise ConfigError(f"--grid: expected NxM, got {text!r}") from None
    if n < 1 or m < 1:
        raise ConfigError("--grid: both sizes must be positive")
    return n, m


def cmd_validate(args) -> int:
    t, uv = studies.read_pulse_csv(args.pulse)
    n, m = _parse_grid(args.grid)
    if args.target not in AXES:
        raise ConfigError(f"--target: must be one of {sorted(AXES)}")
    params = _construct("bloch", BlochParams, {"B": args.B, "delta": args.delta, "duration": float(t[-1])})
    omega = np.linspace(-params.B, params.B, n) if params.B > 0 else np.array([0.0])
    eps = np.linspace(1 - params.delta, 1 + params.delta, m) if params.delta > 0 else np.array([1.0])
    controls = bloch.linear_controls(t, uv)
    M = studies.validate_controls(params, controls, params.duration, AXES[args.initial], [omega, eps], args.steps)
    target = AXES[args.target]
    score = M @ target
    comp = args.target.lstrip("-")
    idx = "xyz".index(comp)
    print(f"grid {len(omega)}x{len(eps)}, duration {params.duration:.6g}")
    print(f"average M_{comp}(T) = {M[..., idx].mean():.6f}, min = {M[..., idx].min():.6f}, max = {M[..., idx].max():.6f}")
    print(f"score <M(T), {args.target}>: average = {score.mean():.6f}, worst = {score.min():.6f}")
    if args.output:
        rep = studies.RobustnessReport(omega, eps, score, f"M.{args.target}", "max")
        studies.write_robustness_csv(args.output, rep)
    return EXIT_OK


def cmd_export_physical(args) -> int:
    if not args.amp_hz > 0:
        raise ConfigError(f"--amp-hz: must be positive, got {args.amp_hz!r}")
    t, uv = studies.read_pulse_csv(args.pulse)
    pulse = bloch.to_physical((t, uv), args.amp_hz)
    out = Path(args.output) if args.output else Path(args.pulse).with_name(Path(args.pulse).stem + "_physical.csv")
    pulse.to_csv(out)
    print(f"wrote {out}: duration {pulse.duration * 1e6:.6g} us, peak amplitude {pulse.amplitude_hz.max():.6g} Hz")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ensemblectl", description="Ensemble pulse design with pseudospectral collocation.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="-v for progress, -vv for solver detail")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", help="run a study from a config file")
    p.add_argument("config")
    p.add_argument("--output-dir", help="override output_dir from the config")

    p = sub.add_parser("convergence", help="run a convergence sweep config")
    p.add_argument("config")
    p.add_argument("--output-dir", help="override output_dir from the config")

    p = sub.add_parser("validate", help="re-simulate a t,u,v pulse over an (omega, epsilon) grid")
    p.add_argument("pulse")
    p.add_argument("--B", type=float, default=1.0, help="frequency half-band")
    p.add_argument("--delta", type=float, default=0.0, help="rf inhomogeneity half-width")
    p.add_argument("--grid", default="41x9", help="validation grid NxM (omega x epsilon)")
    p.add_argument("--target", default="-z", choices=sorted(AXES), help="target axis of the transfer")
    p.add_argument("--initial", default="z", choices=sorted(AXES), help="initial magnetisation axis")
    p.add_argument("--steps", type=int, default=4000, help="RK4 steps")
    p.add_argument("--output", help="write the score grid as omega,epsilon,score CSV")

    p = sub.add_parser("export-physical", help="convert a t,u,v pulse to seconds / Hz / rad")
    p.add_argument("pulse")
    p.add_argument("--amp-hz", type=float, required=True, help="nominal amplitude A in Hz")
    p.add_argument("--output", help="output CSV (default: <pulse>_physical.csv)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = {0: logging.WARNING, 1: logging.INFO}.get(args.verbose, logging.DEBUG)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "solve":
            return cmd_solve(args)
        if args.command == "convergence":
            return cmd_solve(args, require="convergence")
        if args.command == "validate":
            return cmd_validate(args)
        return cmd_export_physical(args)
    except (ConfigError, studies.PulseFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except (ValueError, RuntimeError, OSError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
