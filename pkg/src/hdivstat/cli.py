"""Command-line entry point: run experiments and post-process stored ensembles.

Subcommands
-----------
run              sample, evolve, store the ensemble and compute observables
compare          Cauchy errors and Wasserstein distances between two runs
structure        structure functions of a stored run
wasserstein      Wasserstein distances between two stored runs
validate-config  parse and check a configuration file
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .assembly import FormContext, default_penalty
from .config import (
    PRESETS,
    ConfigError,
    ExperimentConfig,
    _parse_value,
    load_config,
    preset,
    serialize_config,
)
from .mc import (
    CHANNEL,
    Ensemble,
    MonteCarloError,
    RandomFieldSpec,
    file_checksum,
    read_ensemble,
    run_monte_carlo,
    write_ensemble,
)
from .mesh import (
    BoundarySpec,
    MeshError,
    Rectangle,
    classify_faces,
    generate_channel_mesh,
    generate_uniform_quad_mesh,
    generate_uniform_tri_mesh,
    load_gmsh_mesh,
    uniform_refine,
)
from .observables import (
    GridError,
    cauchy_error,
    characteristic_size,
    default_offsets,
    element_average,
    ensemble_mean,
    ensemble_variance,
    structure_functions,
    wasserstein_distances,
)
from .solver import SolverConfig, SolverError
from .spaces import build_velocity_space, write_field_csv

log = logging.getLogger("hdivstat")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_MESH = 4
EXIT_SOLVER = 5
EXIT_OBSERVABLE = 6
EXIT_IO = 7
EXIT_CONTRACT = 8


class RunError(RuntimeError):
    """A stage of an experiment failed; ``stage`` names it."""

    def __init__(self, stage: str, cause: Exception, code: int):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
        self.code = code


class ContractError(ValueError):
    pass


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------
def fit_slope(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Least-squares slope of ``log y`` against ``log x``."""
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    if xs.shape != ys.shape or xs.ndim != 1 or len(xs) < 2:
        raise ValueError("need two equally long sequences of at least two points")
    if np.any(~(xs > 0)) or np.any(~(ys > 0)):
        raise ValueError("slopes in log-log coordinates need positive data")
    lx, ly = np.log(xs), np.log(ys)
    if np.ptp(lx) == 0:
        raise ValueError("abscissae must not all coincide")
    return float(np.polyfit(lx, ly, 1)[0])


def write_rows(path: Path, header: Sequence[str], rows) -> Path:
    """CSV with floats written by ``repr`` so files round-trip exactly."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return Path(path)


def build_mesh(cfg: ExperimentConfig):
    if cfg.mesh_source == "file":
        mesh = load_gmsh_mesh(cfg.mesh_file)
        for _ in range(cfg.level):
            mesh = uniform_refine(mesh)
        return mesh
    if cfg.kind == CHANNEL:
        return generate_channel_mesh(cfg.level, h_wall=cfg.h_wall, h_core=cfg.h_core)
    gen = generate_uniform_quad_mesh if cfg.cell == "quad" else generate_uniform_tri_mesh
    return gen(cfg.resolution, cfg.resolution, Rectangle.unit_square())


def boundary_for(cfg: ExperimentConfig, mesh) -> BoundarySpec:
    rect = mesh.bounding_box()
    return BoundarySpec.channel(rect) if cfg.kind == CHANNEL else BoundarySpec.all_dirichlet(rect)


def field_spec(cfg: ExperimentConfig) -> RandomFieldSpec:
    return RandomFieldSpec(cfg.kind, cfg.gamma1, cfg.gamma2, cfg.K, cfg.base_seed)


def solver_settings(cfg: ExperimentConfig) -> tuple[FormContext, SolverConfig]:
    sigma = cfg.sigma if cfg.sigma is not None else default_penalty(cfg.k)
    ctx = FormContext(nu=cfg.nu, sigma=sigma)
    scfg = SolverConfig.from_final_time(cfg.T, cfg.n_steps, cfg.nu, sigma=sigma, tol=cfg.tol,
                                        restart=cfg.restart, max_iter=cfg.max_iter, schur=cfg.schur,
                                        gamma=cfg.gamma)
    return ctx, scfg


@dataclass
class StoredRun:
    directory: Path
    config: ExperimentConfig
    ensemble: Ensemble


def load_run(directory) -> StoredRun:
    """Rebuild the mesh and space of a run directory and read its ensemble."""
    directory = Path(directory)
    cfg = load_config(directory / "config.ini")
    mesh = build_mesh(cfg)
    space = build_velocity_space(mesh, cfg.k, classify_faces(mesh, boundary_for(cfg, mesh)))
    ens = read_ensemble(directory / "ensemble" / "ensemble.csv", space)
    return StoredRun(directory, cfg, ens)


# --------------------------------------------------------------------------
# observables
# --------------------------------------------------------------------------
def statistics_rows(ens: Ensemble) -> tuple[list, list]:
    """Global (statistic, value) rows and per-element rows of mean and variance."""
    mean = ensemble_mean(ens)
    rows = [("M", ens.M), ("T", float(ens.T)), ("mean_l2", mean.l2_norm())]
    avg_mean = element_average(mean.as_field(ens.T))
    cen = ens.mesh.centroids
    if ens.M >= 2:
        var = ensemble_variance(ens)
        rows.append(("variance_l2", var.l2_norm()))
        var_c = var.evaluate_at(cen)
    else:
        var_c = np.full((ens.mesh.n_elements, 2), np.nan)
    elem = [(e, cen[e, 0], cen[e, 1], avg_mean[e, 0], avg_mean[e, 1], var_c[e, 0], var_c[e, 1])
            for e in range(ens.mesh.n_elements)]
    return rows, elem


def structure_rows(ens: Ensemble, offsets: Sequence[float], degrees: Sequence[float]) -> list:
    domain = ens.mesh.bounding_box()
    if not offsets:
        max_r = min(domain.width, domain.height) / 3.0
        offsets = default_offsets(1.5 * characteristic_size(ens.mesh), max_r=max_r)
    avg = element_average((ens.space, ens.coefficients()))
    results = structure_functions(domain, ens.mesh, list(avg), offsets, degrees)
    return [row for res in results for row in res.rows()]


def comparison_rows(a: Ensemble, b: Ensemble, cfg: ExperimentConfig) -> list:
    rows = [("mean_cauchy", cauchy_error(ensemble_mean(a), ensemble_mean(b)))]
    if a.M >= 2 and b.M >= 2:
        rows.append(("variance_cauchy", cauchy_error(ensemble_variance(a), ensemble_variance(b))))
    rows.extend(wasserstein_rows(a, b, cfg))
    return rows


def wasserstein_rows(a: Ensemble, b: Ensemble, cfg: ExperimentConfig) -> list:
    kw = dict(n_grid=cfg.wasserstein_grid, n_pairs=cfg.wasserstein_pairs, seed=cfg.wasserstein_seed)
    vec = wasserstein_distances(a, b, **kw)
    mag = wasserstein_distances(a, b, magnitude=True, **kw)
    return [("W1_u", vec.w1), ("W2_u", vec.w2), ("W1_speed", mag.w1), ("W2_speed", mag.w2)]


def check_comparable(a: StoredRun, b: StoredRun):
    ba, bb = a.ensemble.mesh.bounding_box(), b.ensemble.mesh.bounding_box()
    if a.config.kind != b.config.kind or not np.allclose(
            [ba.x1_left, ba.x1_right, ba.x2_left, ba.x2_right],
            [bb.x1_left, bb.x1_right, bb.x2_left, bb.x2_right], atol=1e-12):
        raise ContractError("runs belong to different experiments or domains")
    if b.ensemble.mesh.n_elements < a.ensemble.mesh.n_elements or b.ensemble.M < a.ensemble.M:
        raise ContractError("second run must be at equal or finer resolution with equal or more samples")


# --------------------------------------------------------------------------
# run_experiment
# --------------------------------------------------------------------------
MANIFEST_NAME = "manifest.csv"


def run_experiment(cfg: ExperimentConfig, dry_run: bool = False) -> Optional[Path]:
    """Sample, evolve, store and post-process; returns the run manifest path.

    With ``dry_run`` the configuration is validated and nothing is written.
    On failure a ``STALE`` marker listing the partial outputs is left behind
    and RunError carries the failing stage.
    """
    cfg.validate()
    if dry_run:
        log.info("dry run: configuration is valid; %d samples x %d steps on %s", cfg.M, cfg.n_steps,
                 "mesh file" if cfg.mesh_source == "file" else f"resolution {cfg.resolution}")
        return None
    out = Path(cfg.output)
    written: list = []
    stage = "setup"

    def record(path: Path, what: str):
        written.append((path, what))

    try:
        out.mkdir(parents=True, exist_ok=True)
        stale = out / "STALE"
        if stale.exists():
            stale.unlink()
        cfg_path = out / "config.ini"
        cfg_path.write_text(serialize_config(cfg))
        record(cfg_path, "config")

        stage = "mesh"
        mesh = build_mesh(cfg)
        log.info("mesh: %d elements", mesh.n_elements)

        stage = "monte_carlo"
        ctx, scfg = solver_settings(cfg)
        ens = run_monte_carlo(field_spec(cfg), ctx, scfg, cfg.M, mesh, k=cfg.k,
                              boundary=boundary_for(cfg, mesh), workers=cfg.workers,
                              progress=lambda m: log.info("sample %d done", m))
        ens_manifest = write_ensemble(ens, out / "ensemble")
        for mb in ens.members:
            record(out / "ensemble" / f"member_{mb.m:05d}.csv", "ensemble_member")
        record(ens_manifest, "ensemble_manifest")

        if cfg.stats:
            stage = "statistics"
            rows, elem = statistics_rows(ens)
            record(write_rows(out / "stats.csv", ["statistic", "value"], rows), "statistics")
            record(write_rows(out / "stats_elements.csv",
                              ["element", "x1", "x2", "mean_u1", "mean_u2", "var_u1", "var_u2"], elem),
                   "statistics")
            mean_path = out / "mean.csv"
            write_field_csv(ensemble_mean(ens).as_field(ens.T), mean_path, kind="mean")
            record(mean_path, "mean_field")
        if cfg.structure:
            stage = "structure"
            rows = structure_rows(ens, cfg.offsets, cfg.degrees)
            record(write_rows(out / "structure.csv", ["r", "p", "S"], rows), "structure_function")

        stage = "manifest"
        return write_run_manifest(out, written)
    except Exception as exc:
        _mark_stale(out, written, stage, exc)
        raise RunError(stage, exc, _exit_code_for(exc)) from exc


def write_run_manifest(out: Path, written: list) -> Path:
    path = out / MANIFEST_NAME
    rows = [(p.relative_to(out).as_posix(), what, file_checksum(p)) for p, what in written]
    write_rows(path, ["path", "kind", "sha256"], rows)
    return path


def _mark_stale(out: Path, written: list, stage: str, exc: Exception):
    try:
        if out.is_dir():
            lines = [f"stage={stage}", f"error={exc}"] + [p.relative_to(out).as_posix() for p, _ in written]
            (out / "STALE").write_text("\n".join(lines) + "\n")
    except OSError:
        pass


def _exit_code_for(exc: Exception) -> int:
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, MeshError):
        return EXIT_MESH
    if isinstance(exc, (SolverError, MonteCarloError)):
        return EXIT_SOLVER
    if isinstance(exc, ContractError):
        return EXIT_CONTRACT
    if isinstance(exc, GridError):
        return EXIT_OBSERVABLE
    if isinstance(exc, OSError):
        return EXIT_IO
    return EXIT_OBSERVABLE


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------
def _apply_overrides(cfg: ExperimentConfig, items: Sequence[str]) -> ExperimentConfig:
    changes = {}
    for item in items:
        key, sep, value = item.partition("=")
        key = key.strip()
        if not sep or key not in ExperimentConfig.__dataclass_fields__:
            raise ConfigError(f"bad override {item!r}; expected key=value with a known key")
        changes[key] = _parse_value(key, value)
    return replace(cfg, **changes) if changes else cfg


def _parse_floats(text: Optional[str]) -> tuple:
    if not text:
        return ()
    try:
        return tuple(float(x) for x in text.replace(",", " ").split())
    except ValueError as exc:
        raise ConfigError(f"bad number list {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hdivstat", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment end to end")
    src = run.add_mutually_exclusive_group(required=True)
    src.add_argument("--config", help="INI configuration file")
    src.add_argument("--preset", choices=sorted(PRESETS), help="named preset")
    run.add_argument("--output", help="output directory (overrides the configuration)")
    run.add_argument("--workers", type=int, help="worker processes for the sample solves")
    run.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                     help="override a configuration field")
    run.add_argument("--dry-run", action="store_true", help="validate only, write nothing")
    run.add_argument("--write-config", metavar="PATH", help="write the resolved configuration and exit")

    cmp_ = sub.add_parser("compare", help="compare two stored runs")
    cmp_.add_argument("run_a")
    cmp_.add_argument("run_b")
    cmp_.add_argument("--output", default="compare.csv")

    st = sub.add_parser("structure", help="structure functions of a stored run")
    st.add_argument("run")
    st.add_argument("--offsets", help="comma separated offsets r (default: geometric in h)")
    st.add_argument("--degrees", default="1,2,3", help="comma separated degrees p")
    st.add_argument("--output", default="structure.csv")

    ws = sub.add_parser("wasserstein", help="Wasserstein distances between two stored runs")
    ws.add_argument("run_a")
    ws.add_argument("run_b")
    ws.add_argument("--output", default="wasserstein.csv")

    vc = sub.add_parser("validate-config", help="check a configuration file")
    vc.add_argument("config")
    return ap


def _cmd_run(args) -> int:
    cfg = load_config(args.config) if args.config else preset(args.preset)
    cfg = _apply_overrides(cfg, args.set)
    if args.output:
        cfg = replace(cfg, output=args.output)
    if args.workers:
        cfg = replace(cfg, workers=args.workers)
    if args.write_config:
        Path(args.write_config).write_text(serialize_config(cfg))
        return EXIT_OK
    if cfg.long_running and not args.dry_run:
        log.warning("this preset is full scale and will run for a long time")
    manifest = run_experiment(cfg, dry_run=args.dry_run)
    print("configuration is valid" if manifest is None else f"wrote {manifest}")
    return EXIT_OK


def _cmd_compare(args) -> int:
    a, b = load_run(args.run_a), load_run(args.run_b)
    check_comparable(a, b)
    write_rows(Path(args.output), ["statistic", "value"], comparison_rows(a.ensemble, b.ensemble, b.config))
    print(f"wrote {args.output}")
    return EXIT_OK


def _cmd_structure(args) -> int:
    run = load_run(args.run)
    rows = structure_rows(run.ensemble, _parse_floats(args.offsets), _parse_floats(args.degrees))
    write_rows(Path(args.output), ["r", "p", "S"], rows)
    print(f"wrote {args.output}")
    return EXIT_OK


def _cmd_wasserstein(args) -> int:
    a, b = load_run(args.run_a), load_run(args.run_b)
    check_comparable(a, b)
    write_rows(Path(args.output), ["statistic", "value"], wasserstein_rows(a.ensemble, b.ensemble, b.config))
    print(f"wrote {args.output}")
    return EXIT_OK


def _cmd_validate(args) -> int:
    load_config(args.config)
    print(f"{args.config}: ok")
    return EXIT_OK


COMMANDS = {"run": _cmd_run, "compare": _cmd_compare, "structure": _cmd_structure,
            "wasserstein": _cmd_wasserstein, "validate-config": _cmd_validate}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except RunError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigError, MeshError, SolverError, MonteCarloError, ContractError, GridError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _exit_code_for(exc)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONTRACT


if __name__ == "__main__":
    sys.exit(main())
