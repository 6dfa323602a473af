"""Command-line interface: ``stfusion simulate | fit | predict | replicate-study``.

Every command reads one configuration file (see ``--print-schema``) and
writes its outputs plus a ``metadata.json`` carrying the configuration hash.
Exit codes: 0 success (possibly with warnings), 2 configuration or input
errors, 3 numerical failure.
"""
from __future__ import annotations

import csv
import json
import logging
import shutil
import sys
import warnings
from pathlib import Path

import click
import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, config_hash, load_config, schema_json
from .geometry import Box, PointNotFoundError, build_structured_mesh, read_mesh, write_mesh
from .inference import (NumericalFailure, Posterior, default_priors, explore_grid, load_fit_state,
                        optimize_mode, save_fit_state, write_hyper_summary, write_latent_fields)
from .linalg import NotPositiveDefiniteError
from .model import CompiledModel, FieldSpec, FusionModelSpec, linear_trend, raster_effect
from .observation import (BlockObs, ColumnSchema, IngestError, ObservationBatch, PointObs,
                          ingest_blocks, ingest_points)
from .prediction import (PredictionSurface, forecast_one_day, lattice, predict_at, write_ascii_grid,
                         write_predictions)
from .priors import make_prior
from .simulation import (SimConfig, StudyPlan, TrueParams, dump_replicate, generate_replicate,
                         replicate_seed, run_study)

log = logging.getLogger("stfusion")

EXIT_INPUT = 2
EXIT_NUMERICAL = 3


class _Failure(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


# --------------------------------------------------------------------------
# configuration plumbing

def _load(ctx_opts) -> RunConfig:
    overrides = {}
    if ctx_opts.get("seed") is not None:
        overrides["seed"] = ctx_opts["seed"]
    if ctx_opts.get("threads") is not None:
        overrides["threads"] = ctx_opts["threads"]
    if ctx_opts.get("out") is not None:
        overrides["output_dir"] = str(ctx_opts["out"])
    try:
        return load_config(ctx_opts.get("config"), overrides)
    except ConfigError as exc:
        raise _Failure(f"invalid configuration: {exc}", EXIT_INPUT) from None


def _metadata(cfg: RunConfig, command: str, **extra) -> dict:
    return {"command": command, "version": __version__, "config_hash": config_hash(cfg),
            "seed": cfg.seed, "threads": cfg.threads, **extra}


def _write_metadata(out: Path, meta: dict) -> None:
    (out / "metadata.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def sim_config(cfg: RunConfig) -> SimConfig:
    s = cfg.simulation
    return SimConfig(
        true_params=TrueParams(**{k: tuple(v) for k, v in s.true_params.model_dump().items()}),
        domain=Box(*s.domain), trend=tuple(s.trend), T_total=s.T_total, t_train=tuple(s.t_train),
        n_sensors_response=s.n_sensors_response, n_sensors_misaligned=s.n_sensors_misaligned,
        grid_shape=tuple(s.grid_shape), mc_points_per_cell=s.mc_points_per_cell, n_test=s.n_test,
        seed=cfg.seed, generation_edge=s.generation_edge, generation_buffer=s.generation_buffer,
        fit_edge=s.fit_edge, fit_buffer=s.fit_buffer, fit_buffer_edge=s.fit_buffer_edge)


def _require(cfg: RunConfig, *sections: str) -> None:
    missing = [s for s in sections if getattr(cfg, s) is None]
    if missing:
        raise _Failure(f"the configuration needs a {', '.join(missing)} section for this command", EXIT_INPUT)


def _data_extent(batch: ObservationBatch) -> Box:
    _, xy, _, _ = batch.point_arrays
    _, cells, _, _ = batch.block_arrays
    xs = np.concatenate([xy[:, 0], cells[:, 0], cells[:, 1]])
    ys = np.concatenate([xy[:, 1], cells[:, 2], cells[:, 3]])
    return Box(float(xs.min()), float(xs.max()), float(ys.min()), float(ys.max()))


def _build_mesh(cfg: RunConfig, batch: ObservationBatch):
    m = cfg.mesh
    domain = Box(*m.domain) if m.domain is not None else _data_extent(batch)
    buffer = m.buffer_width if m.buffer_width is not None else 3.0 * m.edge_length
    if m.file is not None:
        try:
            return read_mesh(m.file, interior_bbox=domain, buffer_width=buffer)
        except (OSError, ValueError) as exc:
            raise _Failure(f"cannot read mesh: {exc}", EXIT_INPUT) from None
    return build_structured_mesh(domain, m.edge_length, buffer, m.buffer_edge_length)


def load_observations(cfg: RunConfig) -> tuple[ObservationBatch, int]:
    """Ingest, filter and standardise the configured data files."""
    _require(cfg, "model", "data")
    names = cfg.model.variables
    ids = {n: i for i, n in enumerate(names, 1)}
    schema = ColumnSchema(variables=ids, max_time=cfg.data.T)
    try:
        points = ingest_points(cfg.data.points, schema) if cfg.data.points else []
        blocks = ingest_blocks(cfg.data.blocks, schema) if cfg.data.blocks else []
    except IngestError as exc:
        raise _Failure(str(exc), EXIT_INPUT) from None
    except OSError as exc:
        raise _Failure(f"cannot read data: {exc}", EXIT_INPUT) from None
    if cfg.model.point_only:
        blocks = []
    dropped = {ids[n] for n in cfg.model.drop_blocks_of}
    blocks = [b for b in blocks if b.variable_id not in dropped]
    std = {ids[n]: s for n, s in cfg.model.standardize.items()}
    if std:
        points = [PointObs(o.variable_id, o.location, o.time_index,
                           (o.value - std[o.variable_id].center) / std[o.variable_id].scale)
                  if o.variable_id in std else o for o in points]
        blocks = [BlockObs(o.variable_id, o.cell, o.time_index,
                           (o.value - std[o.variable_id].center) / std[o.variable_id].scale)
                  if o.variable_id in std else o for o in blocks]
    batch = ObservationBatch(points, blocks, {i: n for n, i in ids.items()})
    if len(batch) == 0:
        raise _Failure("no observations left to fit", EXIT_INPUT)
    T = cfg.data.T or batch.max_time
    log.info("observations: %d point rows, %d block rows, T = %d", len(batch.points), len(batch.blocks), T)
    return batch, T


def _read_raster_csv(path):
    """Cells, values and times of a covariate raster in the block CSV layout.

    The ``variable`` column, if present, is ignored.
    """
    cells, values, times = [], [], []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        need = {"xmin", "xmax", "ymin", "ymax", "time", "value"}
        missing = need - set(reader.fieldnames or [])
        if missing:
            raise ValueError(f"missing column(s) {sorted(missing)}")
        for row in reader:
            try:
                cells.append(tuple(float(row[k]) for k in ("xmin", "xmax", "ymin", "ymax")))
                values.append(float(row["value"]))
                times.append(int(row["time"]))
            except ValueError as exc:
                raise ValueError(f"line {reader.line_num}: {exc}") from None
    return cells, values, times


def _fixed_effects(cfg: RunConfig):
    out = []
    for e in cfg.model.fixed_effects:
        if e.kind == "linear_trend":
            out.append(linear_trend(e.name, e.easting, e.northing, e.offset))
            continue
        try:
            out.append(raster_effect(e.name, *_read_raster_csv(e.path)))
        except (ValueError, OSError) as exc:
            raise _Failure(f"fixed effect {e.name!r} ({e.path}): {exc}", EXIT_INPUT) from None
    return out


def build_model(cfg: RunConfig):
    batch, T = load_observations(cfg)
    mesh = _build_mesh(cfg, batch)
    try:
        spec = FusionModelSpec([FieldSpec(n) for n in cfg.model.variables], batch, mesh, T,
                               _fixed_effects(cfg), block_fallback=cfg.model.block_fallback)
        model = CompiledModel(spec)
        priors = default_priors(model)
        if cfg.model.priors:
            unknown = set(cfg.model.priors) - set(model.layout.names)
            if unknown:
                raise ValueError(f"priors given for unknown hyperparameters {sorted(unknown)}; "
                                 f"known: {model.layout.names}")
            priors = priors.updated({k: make_prior(p.kind, **p.params) for k, p in cfg.model.priors.items()})
    except (ValueError, TypeError, PointNotFoundError) as exc:
        raise _Failure(f"invalid model: {exc}", EXIT_INPUT) from None
    post = Posterior(model, priors, dense_threshold=cfg.inference.dense_threshold)
    return spec, post


# --------------------------------------------------------------------------
# commands

_common = [
    click.option("--config", "config", type=click.Path(exists=True, dir_okay=False, path_type=Path),
                 help="YAML or JSON run configuration."),
    click.option("--seed", type=int, default=None, help="Override the configured seed."),
    click.option("--threads", type=click.IntRange(min=1), default=None, help="Worker processes."),
    click.option("--out", type=click.Path(file_okay=False, path_type=Path), default=None,
                 help="Output directory (overrides output_dir)."),
]


def _with_common(f):
    for opt in reversed(_common):
        f = opt(f)
    return f


def _run(fn):
    """Translate library errors to exit codes."""
    try:
        fn()
    except _Failure as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(exc.code)
    except (NumericalFailure, NotPositiveDefiniteError) as exc:
        click.echo(f"numerical failure: {exc}", err=True)
        sys.exit(EXIT_NUMERICAL)


def _print_schema(ctx, _param, value):
    if value and not ctx.resilient_parsing:
        click.echo(schema_json())
        ctx.exit(0)


@click.group()
@click.version_option(__version__)
@click.option("--print-schema", is_flag=True, expose_value=False, is_eager=True, callback=_print_schema,
              help="Print the configuration JSON schema and exit.")
@click.option("-v", "--verbose", count=True, help="More logging (repeatable).")
def main(verbose):
    """Spatio-temporal fusion of point and gridded observations."""
    logging.basicConfig(level=logging.WARNING - 10 * min(verbose, 2), format="%(levelname)s %(message)s",
                        stream=sys.stderr)
    logging.captureWarnings(True)


@main.command()
@_with_common
def simulate(**opts):
    """Simulate one synthetic dataset and write it in the observation formats."""
    def go():
        cfg = _load(opts)
        sim = sim_config(cfg)
        out = Path(cfg.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        ds = generate_replicate(sim, replicate_seed(sim.seed, 0), replicate=0)
        dump_replicate(ds, out)
        with open(out / "true_params.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["param", "value"])
            for k, v in sim.true_params.as_table().items():
                w.writerow([k, repr(float(v))])
        _write_metadata(out, _metadata(cfg, "simulate", T_total=sim.T_total,
                                       n_point_rows=int(sum(len(ds.sensors_of(v)) for v in (1, 2, 3)) * sim.T_total),
                                       n_block_rows=int(3 * len(sim.cells) * sim.T_total)))
        click.echo(f"wrote simulated data to {out}")

    _run(go)


@main.command()
@_with_common
def fit(**opts):
    """Fit the fusion model to the configured data files."""
    def go():
        cfg = _load(opts)
        spec, post = build_model(cfg)
        out = Path(cfg.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        inf = cfg.inference
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            mode = optimize_mode(post, method=inf.optimizer, max_evals=inf.max_evals)
            result = explore_grid(post, mode, design=inf.design, f0=inf.ccd_radius_factor,
                                  compute_latent_sd=inf.latent_sd, seed=cfg.seed)
        for w in caught:
            log.warning("%s", w.message)
        write_mesh(out / "mesh.txt", spec.mesh)
        write_hyper_summary(out / "hyper_summary.csv", result)
        write_latent_fields(out / "latent_fields.csv", result)
        save_fit_state(out / "fit_state.npz", result)
        if cfg.data.time_map is not None:
            shutil.copyfile(cfg.data.time_map, out / "time_map.csv")
        meta = _metadata(cfg, "fit", converged=bool(mode.converged), optimizer=mode.method,
                         n_evals=int(mode.n_evals), optimizer_message=mode.message,
                         hessian_ok=bool(result.hessian_ok), n_design_points=len(result.grid),
                         log_marginal_likelihood=result.log_marginal_likelihood,
                         n_point_rows=len(spec.observations.points), n_block_rows=len(spec.observations.blocks),
                         n_mesh_vertices=int(spec.mesh.n_vertices), T=int(spec.T))
        _write_metadata(out, meta)
        if not mode.converged:
            click.echo("warning: the mode search did not converge; see metadata.json", err=True)
        click.echo(f"wrote fit to {out}")

    _run(go)


def _read_targets(path) -> list:
    targets = []
    try:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            missing = {"easting", "northing", "time"} - set(reader.fieldnames or [])
            if missing:
                raise _Failure(f"{path}: missing column(s) {sorted(missing)}", EXIT_INPUT)
            for row in reader:
                try:
                    targets.append(((float(row["easting"]), float(row["northing"])), int(row["time"])))
                except ValueError as exc:
                    raise _Failure(f"{path}: line {reader.line_num}: {exc}", EXIT_INPUT) from None
    except OSError as exc:
        raise _Failure(f"cannot read targets: {exc}", EXIT_INPUT) from None
    return targets


def _unstandardise(surface: PredictionSurface, cfg: RunConfig) -> PredictionSurface:
    s = cfg.model.standardize.get(cfg.model.variables[-1])
    if s is None:
        return surface
    c, k = s.center, s.scale
    return PredictionSurface(surface.targets, surface.mean * k + c, surface.sd * k,
                             surface.q025 * k + c, surface.q975 * k + c)


def _predict_inside(result, spec, targets, quantiles):
    """Predict at targets inside the mesh; others are skipped with a warning."""
    inside = np.ones(len(targets), dtype=bool)
    try:
        spec.mesh.locate_many(np.array([p for p, _ in targets], dtype=float).reshape(-1, 2))
    except PointNotFoundError as exc:
        inside[exc.indices] = False
    skipped = int((~inside).sum())
    if skipped:
        log.warning("skipped %d target(s) outside the mesh", skipped)
    keep = [t for t, ok in zip(targets, inside) if ok]
    now = [t for t in keep if t[1] <= spec.T]
    ahead = [t for t in keep if t[1] > spec.T]
    surfaces = []
    if now:
        surfaces.append(predict_at(result, now, spec, quantiles=quantiles))
    if ahead:
        surfaces.append(forecast_one_day(result, ahead, spec, quantiles=quantiles))
    if not surfaces:
        return None, skipped
    if len(surfaces) == 1:
        return surfaces[0], skipped
    a, b = surfaces
    return PredictionSurface(a.targets + b.targets, *(np.concatenate([getattr(a, f), getattr(b, f)])
                                                      for f in ("mean", "sd", "q025", "q975"))), skipped


@main.command()
@_with_common
@click.option("--fit", "fit_dir", type=click.Path(exists=True, file_okay=False, path_type=Path), required=True,
              help="Directory written by the fit command.")
@click.option("--targets", type=click.Path(exists=True, dir_okay=False, path_type=Path), default=None,
              help="CSV with easting,northing,time (overrides prediction.targets).")
def predict(fit_dir, targets, **opts):
    """Predict the response at target points and optionally on a raster lattice."""
    def go():
        cfg = _load(opts)
        spec, post = build_model(cfg)
        try:
            result = load_fit_state(fit_dir / "fit_state.npz", post)
        except (OSError, ValueError, KeyError) as exc:
            raise _Failure(f"cannot load fit: {exc}", EXIT_INPUT) from None
        out = Path(cfg.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        q = cfg.prediction.quantiles
        target_path = targets or cfg.prediction.targets
        meta = _metadata(cfg, "predict", fit_dir=str(fit_dir))
        if target_path is not None:
            tlist = _read_targets(target_path)
            bad = [t for _, t in tlist if not 1 <= t <= spec.T + 1]
            if bad:
                raise _Failure(f"target times must lie in 1..{spec.T + 1}", EXIT_INPUT)
            surface, skipped = _predict_inside(result, spec, tlist, q)
            meta["n_targets_skipped"] = skipped
            if surface is not None:
                write_predictions(out / "predictions.csv", _unstandardise(surface, cfg))
        if cfg.prediction.raster_cellsize is not None:
            xy, ncols, nrows, xll, yll = lattice(spec.mesh.interior_bbox, cfg.prediction.raster_cellsize)
            for t in cfg.prediction.raster_times or [spec.T]:
                if not 1 <= t <= spec.T + 1:
                    raise _Failure(f"raster time {t} outside 1..{spec.T + 1}", EXIT_INPUT)
                surface, _ = _predict_inside(result, spec, [((x, y), t) for x, y in xy], q)
                surface = _unstandardise(surface, cfg)
                grid = np.full(nrows * ncols, np.nan)
                index = {tuple(p): i for i, (p, _) in enumerate(surface.targets)}
                for i, p in enumerate(map(tuple, xy)):
                    if p in index:
                        grid[i] = surface.mean[index[p]]
                write_ascii_grid(out / f"mean_t{t:03d}.asc", grid.reshape(nrows, ncols), xll, yll,
                                 cfg.prediction.raster_cellsize)
                sd = np.full(nrows * ncols, np.nan)
                for i, p in enumerate(map(tuple, xy)):
                    if p in index:
                        sd[i] = surface.sd[index[p]]
                write_ascii_grid(out / f"sd_t{t:03d}.asc", sd.reshape(nrows, ncols), xll, yll,
                                 cfg.prediction.raster_cellsize)
        if target_path is None and cfg.prediction.raster_cellsize is None:
            raise _Failure("nothing to predict: give --targets or prediction.raster_cellsize", EXIT_INPUT)
        _write_metadata(out, meta)
        click.echo(f"wrote predictions to {out}")

    _run(go)


@main.command("replicate-study")
@_with_common
@click.option("--keep-data", is_flag=True, help="Also dump every replicate's data under <out>/data.")
def replicate_study(keep_data, **opts):
    """Run the simulation study and write the parameter and RMSPE tables."""
    def go():
        cfg = _load(opts)
        sim = sim_config(cfg)
        s = cfg.simulation
        plan = StudyPlan(models=tuple(s.models), scenarios=tuple(s.scenarios),
                         t_values=tuple(s.t_values) if s.t_values else None, n_replicates=s.n_replicates,
                         max_evals=cfg.inference.max_evals, design=cfg.inference.design,
                         optimizer=cfg.inference.optimizer)
        out = Path(cfg.output_dir)
        out.mkdir(parents=True, exist_ok=True)

        def progress(replicate):
            log.info("replicate %d of %d done", replicate + 1, plan.n_replicates)

        tables = run_study(sim, plan, threads=cfg.threads,
                           keep_data_dir=(out / "data") if keep_data else None, progress=progress)
        tables.write(out)
        for f in tables.failures:
            log.warning("failed fit: %s", f)
        # the manifest excludes the thread count so it is identical across --threads
        meta = _metadata(cfg, "replicate-study", n_failures=len(tables.failures))
        meta.pop("threads")
        _write_metadata(out, meta)
        click.echo(f"wrote study tables to {out}")

    _run(go)


if __name__ == "__main__":  # pragma: no cover
    main()
