"""Command-line orchestration: YAML experiment configs, subcommands, result reports.

    compww make-data --config exp.yaml
    compww evolve --config exp.yaml --out runs/a
    compww sweep-kappa --config exp.yaml
    compww probe --config exp.yaml
    compww verify-commutators --config exp.yaml
    compww report runs/

Exit codes: 0 ok, 2 failed check (or invalid config/inputs), 3 numerical halt.
The output root defaults to ``output`` from the config and can be overridden
with ``COMPWW_OUTPUT_ROOT``.
"""
from __future__ import annotations

import argparse
import json
import math
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

EXIT_OK, EXIT_FAILED, EXIT_HALT = 0, 2, 3
OUTPUT_ENV = "COMPWW_OUTPUT_ROOT"
CONFIG_NAME = "config.yaml"
SUBCOMMANDS = ("make-data", "evolve", "sweep-kappa", "probe", "verify-commutators", "report")


class ConfigError(ValueError):
    pass


# -- configuration ------------------------------------------------------------------------

@dataclass
class GridConfig:
    n_horizontal: int = 64
    n_vertical: int = 32
    depth: float = 1.0
    dim: int = 2


@dataclass
class EOSConfig:
    kind: str = "linear"
    kappa: float = 100.0
    gamma: float | None = None


@dataclass
class InitialConfig:
    preset: str = "swirl"
    amplitude: float | None = None
    path: str | None = None


@dataclass
class StepperSection:
    dt: float = 1e-3
    filter_strength: float = 0.05
    filter_fraction: float = 1.0 / 3.0
    reproject: bool = True
    T_final: float = 0.1
    cfl: float = 0.9
    vertical_dissipation: float = 0.01
    sample_every: float = 0.01


@dataclass
class SweepConfig:
    kappas: list = field(default_factory=lambda: [1e2, 1e3, 1e4])
    T: float = 0.1
    monitor: bool = True


@dataclass
class ProbeConfig:
    kinds: list = field(default_factory=lambda: ["poincare", "hodge", "trace", "interior_sobolev",
                                                 "boundary_interpolation", "gagliardo_nirenberg"])
    samples: int = 100
    perturbation: float = 0.0
    weighted: bool = False
    mu: float = 2.0


@dataclass
class CommutatorConfig:
    max_order: int = 2
    structure_order: int = 6
    dt: float = 0.02
    levels: int = 4


@dataclass
class ExperimentConfig:
    grid: GridConfig = field(default_factory=GridConfig)
    eos: EOSConfig = field(default_factory=EOSConfig)
    mu: float = 2.0
    r: int = 2
    initial: InitialConfig = field(default_factory=InitialConfig)
    stepper: StepperSection = field(default_factory=StepperSection)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    commutators: CommutatorConfig = field(default_factory=CommutatorConfig)
    output: str = "results"
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    def dump(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=True))


_SECTIONS = {"grid": GridConfig, "eos": EOSConfig, "initial": InitialConfig, "stepper": StepperSection,
             "sweep": SweepConfig, "probe": ProbeConfig, "commutators": CommutatorConfig}


def _coerce(name: str, value, default):
    """Check ``value`` against the type of the default; ints are accepted for floats."""
    if value is None or default is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{name}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{name}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{name}: expected a string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{name}: expected a list, got {value!r}")
        return list(value)
    return value


def _build(cls, data: dict, prefix: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix}: expected a mapping")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"{prefix}: unknown keys {unknown}")
    base = cls()
    kwargs = {}
    for name, value in data.items():
        path = f"{prefix}.{name}" if prefix else name
        if name in _SECTIONS and cls is ExperimentConfig:
            kwargs[name] = _build(_SECTIONS[name], value or {}, path)
        else:
            kwargs[name] = _coerce(path, value, getattr(base, name))
    return cls(**kwargs)


def _validate(cfg: ExperimentConfig) -> None:
    from .initdata import PRESETS
    g = cfg.grid
    if g.n_horizontal < 8 or g.n_horizontal % 2:
        raise ConfigError("grid.n_horizontal must be even and >= 8")
    if g.n_vertical < 4:
        raise ConfigError("grid.n_vertical must be >= 4")
    if not g.depth > 0:
        raise ConfigError("grid.depth must be positive")
    if g.dim not in (2, 3):
        raise ConfigError("grid.dim must be 2 or 3")
    if cfg.eos.kind not in ("linear", "gamma-law"):
        raise ConfigError(f"eos.kind must be 'linear' or 'gamma-law', got {cfg.eos.kind!r}")
    if not cfg.eos.kappa > 0:
        raise ConfigError("eos.kappa must be positive")
    if cfg.mu < 2:
        raise ConfigError("mu must be >= 2")
    if not 1 <= cfg.r <= 5:
        raise ConfigError("r must lie in 1..5")
    if cfg.initial.preset != "file" and cfg.initial.preset not in PRESETS:
        raise ConfigError(f"initial.preset must be one of {sorted(PRESETS) + ['file']}")
    if cfg.initial.preset == "file" and not cfg.initial.path:
        raise ConfigError("initial.path is required for the 'file' preset")
    if not cfg.stepper.dt > 0 or not cfg.stepper.T_final > 0:
        raise ConfigError("stepper.dt and stepper.T_final must be positive")
    if not cfg.sweep.kappas or any(not (isinstance(k, (int, float)) and k > 0) for k in cfg.sweep.kappas):
        raise ConfigError("sweep.kappas must be a non-empty list of positive numbers")
    if cfg.probe.samples < 1:
        raise ConfigError("probe.samples must be >= 1")
    if not 1 <= cfg.commutators.max_order <= 3:
        raise ConfigError("commutators.max_order must lie in 1..3")


def config_from_dict(data: dict | None) -> ExperimentConfig:
    cfg = _build(ExperimentConfig, data or {}, "")
    _validate(cfg)
    return cfg


def load_config(path) -> ExperimentConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        data = yaml.safe_load(p.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {p}: {exc}") from exc
    return config_from_dict(data)


# -- builders ---------------------------------------------------------------------------

def make_grid(cfg: ExperimentConfig):
    from .mesh import StripGrid
    g = cfg.grid
    return StripGrid(g.n_horizontal, g.n_vertical, g.depth, g.dim)


def make_eos_from(cfg: ExperimentConfig, kappa: float | None = None):
    from .eos import make_eos
    return make_eos(cfg.eos.kind, cfg.eos.kappa if kappa is None else kappa, cfg.eos.gamma)


def initial_velocity(cfg: ExperimentConfig, grid) -> np.ndarray:
    from .initdata import PRESETS
    from .mesh import load_field
    ic = cfg.initial
    if ic.preset == "file":
        f = load_field(ic.path)
        if f.rank != 1 or f.grid.shape != grid.shape:
            raise ConfigError(f"{ic.path}: expected a vector field on a {grid.shape} grid")
        return f.values
    make = PRESETS[ic.preset]
    return make(grid) if ic.amplitude is None else make(grid, ic.amplitude)


def stepper_config(cfg: ExperimentConfig, grid, eos):
    from .evolve import StepperConfig, max_stable_dt
    s = cfg.stepper
    dt = min(s.dt, max_stable_dt(grid, eos, cfl=s.cfl))
    n = max(1, math.ceil(s.T_final / dt - 1e-9))
    return StepperConfig(dt=s.T_final / n, filter_strength=s.filter_strength, filter_fraction=s.filter_fraction,
                         reproject=s.reproject, T_final=s.T_final, cfl=1.0,
                         vertical_dissipation=s.vertical_dissipation)


def _sample_every(cfg: ExperimentConfig, dt: float) -> int:
    return max(1, int(round(cfg.stepper.sample_every / dt)))


# -- output helpers -------------------------------------------------------------------------

def output_dir(cfg: ExperimentConfig, sub: str, override: str | None = None) -> Path:
    if override:
        return Path(override)
    root = os.environ.get(OUTPUT_ENV) or cfg.output
    return Path(root) / sub


def _prepare(out: Path, cfg: ExperimentConfig, command: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    cfg.dump(out / CONFIG_NAME)
    (out / "command.txt").write_text(command + "\n")


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(x):
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, np.bool_):
        return bool(x)
    raise TypeError(f"not serializable: {type(x)}")


def _clean(x):
    """Map non-finite floats to strings so the JSON stays standard."""
    if isinstance(x, float) and not math.isfinite(x):
        return repr(x)
    if isinstance(x, dict):
        return {k: _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    return x


# -- subcommands ----------------------------------------------------------------------------

def cmd_make_data(cfg: ExperimentConfig, out: Path) -> int:
    from .initdata import InitialDataProblem, InitDataError, construct_compatible_data, verify_compatibility
    grid = make_grid(cfg)
    eos = make_eos_from(cfg)
    try:
        data = construct_compatible_data(InitialDataProblem(grid, initial_velocity(cfg, grid), eos, r=cfg.r,
                                                            mu=cfg.mu))
    except InitDataError as exc:
        _write_json(out / "status.json", {"status": "failed", "error": str(exc)})
        print(f"make-data: {exc}", file=sys.stderr)
        return EXIT_FAILED
    data.save(out / "data")
    rep = verify_compatibility(data, cfg.r)
    ok = data.converged and rep.passed()
    _write_json(out / "compatibility.json", _clean({
        "boundary": rep.boundary, "closure_boundary": rep.closure_boundary, "relation": rep.relation,
        "scale": rep.scale, "passed": rep.passed(), "converged": data.converged,
        "iterations": len(data.trace.m)}))
    print(f"make-data: {'ok' if ok else 'FAILED'} ({len(data.trace.m)} iterations) -> {out}")
    return EXIT_OK if ok else EXIT_FAILED


def cmd_evolve(cfg: ExperimentConfig, out: Path) -> int:
    from .evolve import SimState, SimulationHalt, evolve_with_monitor
    from .initdata import InitialDataProblem, InitDataError, construct_compatible_data
    from .mesh import Field, save_field
    grid = make_grid(cfg)
    eos = make_eos_from(cfg)
    try:
        data = construct_compatible_data(InitialDataProblem(grid, initial_velocity(cfg, grid), eos, r=cfg.r,
                                                            mu=cfg.mu))
    except InitDataError as exc:
        print(f"evolve: {exc}", file=sys.stderr)
        return EXIT_FAILED
    sc = stepper_config(cfg, grid, eos)
    state = SimState(0.0, data.lmap, data.v0, data.h[0], eos)
    try:
        series = evolve_with_monitor(state, sc, cfg.r, every=_sample_every(cfg, sc.dt))
    except SimulationHalt as exc:
        if exc.series is not None:
            exc.series.write_csv(out / "timeseries.csv")
        if exc.state is not None:
            dump = out / "halt_state"
            dump.mkdir(exist_ok=True)
            save_field(Field(grid, exc.state.v, 1), dump / "v.bin", "bin")
            save_field(Field(grid, exc.state.h), dump / "h.bin", "bin")
            save_field(Field(grid, exc.state.lmap.displacement, 1), dump / "displacement.bin", "bin")
        _write_json(out / "summary.json", {"status": "halted", "error": str(exc), "dt": sc.dt})
        print(f"evolve: halted: {exc}", file=sys.stderr)
        return EXIT_HALT
    series.write_csv(out / "timeseries.csv")
    summary = {"status": "ok", "r": cfg.r, "kappa": eos.kappa, "dt": sc.dt, "T_final": sc.T_final,
               "T_obs": series.T_obs, "E_ratio_max": series.E_ratio_max(),
               "tilde_E_star": series.tilde_star}
    _write_json(out / "summary.json", _clean(summary))
    print(f"evolve: T_obs={series.T_obs:.4g} E_ratio_max={series.E_ratio_max():.6g} -> {out}")
    return EXIT_OK


def cmd_sweep(cfg: ExperimentConfig, out: Path) -> int:
    from .evolve import kappa_sweep
    grid = make_grid(cfg)
    eos0 = make_eos_from(cfg)
    sc = stepper_config(cfg, grid, eos0)
    u0 = initial_velocity(cfg, grid)
    res = kappa_sweep(grid, u0, cfg.sweep.kappas, T=cfg.sweep.T, r=cfg.r, eos_kind=cfg.eos.kind,
                      gamma=cfg.eos.gamma, config=sc, every=_sample_every(cfg, sc.dt),
                      monitor=cfg.sweep.monitor)
    for run_ in res.runs:
        if run_.series is not None:
            run_.series.write_csv(out / f"series_kappa_{run_.kappa:g}.csv")
    summary = {"runs": res.summary(), "slope_v": res.slope_v, "monotone_v": res.monotone_v,
               "tilde_E_star0": res.tilde_E_star0, "partial": res.partial}
    _write_json(out / "sweep.json", _clean(summary))
    for row in res.summary():
        print(f"kappa={row['kappa']:g} |v-u|={row['final_diff_v']:.3e} |h-p|={row['final_diff_h']:.3e}")
    print(f"sweep: slope={res.slope_v:.3f} monotone={res.monotone_v} -> {out}")
    return EXIT_HALT if res.partial else EXIT_OK


def cmd_probe(cfg: ExperimentConfig, out: Path) -> int:
    from .geometry import LagrangianMap
    from .mesh import WeightSpec
    from .probes import PROBE_KINDS, ProbeContext, inequality_probe, perturbed_map
    grid = make_grid(cfg)
    p = cfg.probe
    unknown = [k for k in p.kinds if k not in PROBE_KINDS]
    if unknown:
        print(f"probe: unknown kinds {unknown}", file=sys.stderr)
        return EXIT_FAILED
    lmap = perturbed_map(grid, p.perturbation) if p.perturbation else LagrangianMap.identity(grid)
    ctx = ProbeContext(lmap, WeightSpec(p.mu) if p.weighted else None)
    ok = True
    for kind in p.kinds:
        rep = inequality_probe(kind, weighted=p.weighted, samples=p.samples, seed=cfg.seed, context=ctx)
        (out / f"probe_{kind}.json").write_text(rep.to_json() + "\n")
        ok &= rep.passed
        print(f"probe {kind}: worst={rep.worst_ratio:.4g} constant={rep.constant:.4g} "
              f"{'ok' if rep.passed else 'FAILED'}")
    return EXIT_OK if ok else EXIT_FAILED


def cmd_verify_commutators(cfg: ExperimentConfig, out: Path) -> int:
    from .commutators import check_f_structure, check_g_structure, random_flow, verify_expansion
    from .mesh import StripGrid
    c = cfg.commutators
    grid = StripGrid(cfg.grid.n_horizontal, cfg.grid.n_vertical, cfg.grid.depth, cfg.grid.dim)
    flow = random_flow(grid, seed=cfg.seed)
    results, ok = [], True
    for identity in ("Dt_partial_r", "partial_Dtk", "laplacian_Dt"):
        for order in range(1, c.max_order + 1):
            rep = verify_expansion(identity, order, flow, dt=c.dt, levels=c.levels)
            # successive differences shrink by 4 per halving once the dt^2 term dominates
            good = all(2.5 <= q <= 6.5 for q in rep.richardson_ratios)
            ok &= good
            results.append({"identity": identity, "order": order, "residuals": rep.residuals,
                            "richardson_ratios": rep.richardson_ratios, "passed": good})
            print(f"{identity} order {order}: ratios {['%.2f' % q for q in rep.richardson_ratios]}")
    structure = {}
    for r in range(1, c.structure_order + 1):
        problems = check_f_structure(r) + check_g_structure(r)
        structure[r] = problems
        ok &= not problems
    _write_json(out / "commutators.json", _clean({"expansions": results, "structure_violations": structure,
                                                  "passed": ok}))
    return EXIT_OK if ok else EXIT_FAILED


# -- report ------------------------------------------------------------------------------

def _evolve_entry(d: Path, warnings: list) -> dict | None:
    from .energy import read_time_series
    from .evolve import observed_time
    ts = d / "timeseries.csv"
    if not ts.is_file():
        warnings.append(f"{d}: summary without timeseries.csv")
        return None
    header, data = read_time_series(ts)
    if data.shape[0] == 0:
        warnings.append(f"{d}: empty time series")
        return None
    star = next(i for i, h in enumerate(header) if h.endswith("*"))
    eps = header.index("eps")
    E = data[:, star]
    entry = {"dir": str(d), "kind": "evolve", "E_ratio_max": float(np.max(E / E[0])),
             "T_obs": observed_time(data[:, 0], E, data[:, eps]), "t_final": float(data[-1, 0])}
    entry["criterion_E_bound"] = bool(entry["E_ratio_max"] <= 2.0)
    return entry


def _sweep_entry(d: Path, warnings: list) -> dict:
    summary = json.loads((d / "sweep.json").read_text())
    runs = summary["runs"]
    ks = np.array([float(r["kappa"]) for r in runs])
    dv = np.array([float(r["final_diff_v"]) for r in runs])
    finite = np.isfinite(dv)
    if not finite.all():
        warnings.append(f"{d}: halted runs in sweep")
    monotone = bool(finite.all() and np.all(np.diff(dv) < 0))
    good = finite & (dv > 0)
    slope = float(np.polyfit(np.log(ks[good]), np.log(dv[good]), 1)[0]) if good.sum() >= 2 else float("nan")
    return {"dir": str(d), "kind": "sweep", "kappas": ks.tolist(), "final_diff_v": dv.tolist(),
            "monotone_v": monotone, "slope_v": slope,
            "E_bound_all": all(float(r["E_ratio_max"]) <= 2.0 for r in runs
                               if isinstance(r["E_ratio_max"], (int, float)) and math.isfinite(r["E_ratio_max"]))}


def build_report(results: Path) -> dict:
    """Scan ``results`` recursively and recompute the run verdicts from the CSV/JSON outputs."""
    entries, warnings = [], []
    if results.is_dir():
        for d in sorted({p.parent for p in results.rglob("*") if p.is_file()}):
            if (d / "sweep.json").is_file():
                entries.append(_sweep_entry(d, warnings))
            elif (d / "summary.json").is_file() or (d / "timeseries.csv").is_file():
                e = _evolve_entry(d, warnings)
                if e:
                    entries.append(e)
            elif (d / "compatibility.json").is_file():
                c = json.loads((d / "compatibility.json").read_text())
                entries.append({"dir": str(d), "kind": "make-data", "passed": c["passed"]})
            elif any(d.glob("probe_*.json")):
                reps = [json.loads(p.read_text()) for p in sorted(d.glob("probe_*.json"))]
                entries.append({"dir": str(d), "kind": "probe", "passed": all(r["passed"] for r in reps),
                                "worst": {r["kind"]: r["worst_ratio"] for r in reps}})
            elif (d / "commutators.json").is_file():
                c = json.loads((d / "commutators.json").read_text())
                entries.append({"dir": str(d), "kind": "verify-commutators", "passed": c["passed"]})
    if not entries:
        status = "no results"
    elif warnings:
        status = "partial"
    else:
        status = "ok"
    return _clean({"status": status, "entries": entries, "warnings": warnings})


def format_report(rep: dict) -> str:
    lines = [f"status: {rep['status']}"]
    for e in rep["entries"]:
        kind = e["kind"]
        if kind == "evolve":
            lines.append(f"evolve  {e['dir']}: E_ratio_max={e['E_ratio_max']:.6g} T_obs={e['T_obs']:.4g} "
                         f"bound={'pass' if e['criterion_E_bound'] else 'FAIL'}")
        elif kind == "sweep":
            lines.append(f"sweep   {e['dir']}: monotone={'pass' if e['monotone_v'] else 'FAIL'} "
                         f"slope={e['slope_v']}")
        else:
            lines.append(f"{kind:7s} {e['dir']}: {'pass' if e['passed'] else 'FAIL'}")
    for w in rep["warnings"]:
        lines.append(f"warning: {w}")
    return "\n".join(lines)


def cmd_report(results: Path) -> int:
    rep = build_report(results)
    text = format_report(rep)
    if results.is_dir() and rep["status"] != "no results":
        _write_json(results / "report.json", rep)
        (results / "report.txt").write_text(text + "\n")
    print(text)
    return EXIT_OK


# -- entry point -----------------------------------------------------------------------------

COMMANDS = {"make-data": cmd_make_data, "evolve": cmd_evolve, "sweep-kappa": cmd_sweep,
            "probe": cmd_probe, "verify-commutators": cmd_verify_commutators}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="compww", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", "-c", help="YAML experiment config (defaults if omitted)")
        p.add_argument("--out", "-o", help="output directory (overrides config and environment)")
    p = sub.add_parser("report")
    p.add_argument("results", help="results directory")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "report":
        return cmd_report(Path(args.results))
    try:
        cfg = load_config(args.config) if args.config else config_from_dict({})
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_FAILED
    out = output_dir(cfg, args.command, args.out)
    _prepare(out, cfg, " ".join(["compww", args.command] + ([f"--config {args.config}"] if args.config else [])))
    try:
        return COMMANDS[args.command](cfg, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
