"""Synthetic point/grid fusion study.

Each replicate draws three latent Matérn fields per day on a fine
generation mesh, links the days with AR(1) dynamics, composes the
response from the covariate fields and a linear trend, and observes every
variable at sensors (points) and on a regular grid (Monte Carlo block
means).  Scenarios then cut training windows from the final days.
"""
from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .geometry import Box, Mesh, assemble_fem, build_structured_mesh, interpolation_matrix
from .inference import (FitResult, NumericalFailure, Posterior, default_priors, explore_grid,
                        optimize_mode)
from .linalg import NotPositiveDefiniteError
from .model import CompiledModel, FieldSpec, FusionModelSpec, HyperVector, linear_trend
from .observation import BlockObs, ObservationBatch, PointObs, write_blocks, write_points
from .spde import MaternParams, build_precision, sample_field
from .temporal import simulate_ar1_path

log = logging.getLogger(__name__)

MODELS = ("point", "grid", "joint", "joint_missing_grid_covariates")
SCENARIOS = ("last_day", "one_day_ahead")
VARIABLE_NAMES = {1: "y1", 2: "y2", 3: "y3"}


@dataclass(frozen=True)
class TrueParams:
    alpha: tuple = (0.5, 0.8, 1.0)
    beta: tuple = (-0.3, -0.4)
    theta: tuple = (-0.2,)
    range: tuple = (4.0, 3.0, 2.0)
    sigma2: tuple = (1.0, 0.5, 0.3)
    tau2_point: tuple = (0.09, 0.04, 0.01)
    tau2_block: tuple = (0.25, 0.16, 0.09)
    ar: tuple = (0.4, 0.5, 0.6)

    def hyper(self) -> HyperVector:
        n = len(self.range)
        return HyperVector(self.range, [math.sqrt(s) for s in self.sigma2], self.ar,
                           dict(zip(range(1, n + 1), self.tau2_point)),
                           dict(zip(range(1, n + 1), self.tau2_block)), self.beta)

    def as_table(self) -> dict[str, float]:
        """True value of every reported parameter, keyed by summary name."""
        out = {}
        for k in range(len(self.range)):
            i = k + 1
            out[f"alpha_{i}"] = self.alpha[k]
            out[f"range_{i}"] = self.range[k]
            out[f"sigma2_{i}"] = self.sigma2[k]
            out[f"ar_{i}"] = self.ar[k]
            out[f"tau2p_{i}"] = self.tau2_point[k]
            out[f"tau2g_{i}"] = self.tau2_block[k]
        for k, b in enumerate(self.beta, 1):
            out[f"beta_{k}"] = b
        for k, t in enumerate(self.theta, 1):
            out[f"theta_{k}"] = t
        return out


@dataclass(frozen=True)
class SimConfig:
    """Settings of the synthetic study.

    ``grid_shape`` is (cells along easting, cells along northing).  The
    generation mesh is fine and heavily buffered so that the simulated
    fields are close to stationary inside the domain; the fit mesh is the
    coarse mesh used by every fitted model.
    """

    true_params: TrueParams = TrueParams()
    domain: Box = Box(0.0, 10.0, 0.0, 5.0)
    trend: tuple = (0.2, 0.3)
    T_total: int = 100
    t_train: tuple = (3, 7, 10, 30)
    n_sensors_response: int = 22
    n_sensors_misaligned: int = 10
    grid_shape: tuple = (10, 5)
    mc_points_per_cell: int = 2500
    n_test: int = 20
    seed: int = 20240601
    generation_edge: float = 0.3
    generation_buffer: float = 8.0
    fit_edge: float = 1.0
    fit_buffer: float = 3.0
    fit_buffer_edge: float = 1.5

    def __post_init__(self):
        object.__setattr__(self, "domain", Box(*self.domain))
        object.__setattr__(self, "t_train", tuple(int(t) for t in self.t_train))
        if not self.t_train:
            raise ValueError("t_train needs at least one value")
        if max(self.t_train) >= self.T_total:
            raise ValueError(f"t_train values must be below T_total = {self.T_total}")
        if min(self.t_train) < 1:
            raise ValueError("t_train values must be positive")
        for name in ("n_sensors_response", "n_sensors_misaligned", "mc_points_per_cell", "n_test", "T_total"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if len(self.grid_shape) != 2 or min(self.grid_shape) < 1:
            raise ValueError("grid_shape needs two positive counts")
        if not (self.domain.width > 0 and self.domain.height > 0):
            raise ValueError("domain must have positive area")

    @property
    def cells(self) -> np.ndarray:
        """Grid cells as rows ``xmin, xmax, ymin, ymax`` (easting fastest)."""
        nx, ny = self.grid_shape
        xs = np.linspace(self.domain.xmin, self.domain.xmax, nx + 1)
        ys = np.linspace(self.domain.ymin, self.domain.ymax, ny + 1)
        return np.array([(xs[i], xs[i + 1], ys[j], ys[j + 1]) for j in range(ny) for i in range(nx)])

    def fit_mesh(self) -> Mesh:
        return build_structured_mesh(self.domain, self.fit_edge, self.fit_buffer, self.fit_buffer_edge)

    def generation_mesh(self) -> Mesh:
        return build_structured_mesh(self.domain, self.generation_edge, self.generation_buffer)


def replicate_seed(base_seed: int, replicate: int) -> np.random.SeedSequence:
    """Independent stream for one replicate, derived from the base seed."""
    return np.random.SeedSequence([int(base_seed), int(replicate)])


@dataclass(eq=False)
class SimDataset:
    """One replicate: every daily observation plus held-out test targets.

    Days are numbered 1..T_total.  ``test_truth`` holds the noise-free
    response predictor at the test locations for every day.
    """

    cfg: SimConfig
    replicate: int
    sensors_response: np.ndarray
    sensors_misaligned: np.ndarray
    test_locations: np.ndarray
    point_values: dict  # variable -> (n_sensors x T_total)
    block_values: dict  # variable -> (n_cells x T_total)
    test_truth: np.ndarray  # (n_test x T_total)
    latent: dict = field(default_factory=dict, repr=False)  # variable -> (T_total x n_gen)

    def sensors_of(self, variable: int) -> np.ndarray:
        return self.sensors_misaligned if variable == 1 else self.sensors_response

    def training_days(self, scenario: str, t: int) -> np.ndarray:
        T = self.cfg.T_total
        if scenario == "last_day":
            return np.arange(T - t + 1, T + 1)
        if scenario == "one_day_ahead":
            return np.arange(T - t, T)
        raise ValueError(f"unknown scenario {scenario!r}")

    def batch(self, model: str, scenario: str, t: int) -> ObservationBatch:
        """Training observations of one model variant, times relabelled 1..t."""
        if model not in MODELS:
            raise ValueError(f"unknown model {model!r}; expected one of {MODELS}")
        days = self.training_days(scenario, t)
        cells = self.cfg.cells
        points, blocks = [], []
        for v in (1, 2, 3):
            use_points = not (model == "grid" and v == 3)
            use_blocks = model in ("grid", "joint") or (model == "joint_missing_grid_covariates" and v == 3)
            for ti, day in enumerate(days, 1):
                if use_points:
                    sensors = self.sensors_of(v)
                    vals = self.point_values[v][:, day - 1]
                    points += [PointObs(v, (float(x), float(y)), ti, float(val))
                               for (x, y), val in zip(sensors, vals)]
                if use_blocks:
                    vals = self.block_values[v][:, day - 1]
                    blocks += [BlockObs(v, tuple(map(float, c)), ti, float(val)) for c, val in zip(cells, vals)]
        return ObservationBatch(points, blocks, VARIABLE_NAMES)

    def test_targets(self, scenario: str, t: int):
        """``(locations, time index in the training frame, truth)``."""
        T = self.cfg.T_total
        time_index = t if scenario == "last_day" else t + 1
        return self.test_locations, time_index, self.test_truth[:, T - 1]


def _uniform_points(rng, box: Box, n: int) -> np.ndarray:
    return np.column_stack([rng.uniform(box.xmin, box.xmax, n), rng.uniform(box.ymin, box.ymax, n)])


def generate_replicate(cfg: SimConfig, replicate_seed_value, *, replicate: int = 0,
                       generation_mesh: Mesh | None = None, keep_latent: bool = False) -> SimDataset:
    """Simulate one replicate.

    ``replicate_seed_value`` is an int, a ``SeedSequence`` or a
    ``Generator``; use :func:`replicate_seed` to derive distinct streams.
    """
    rng = np.random.default_rng(replicate_seed_value)
    tp = cfg.true_params
    mesh = generation_mesh or cfg.generation_mesh()
    fem = assemble_fem(mesh)
    T = cfg.T_total
    n_fields = len(tp.range)

    sensors_resp = _uniform_points(rng, cfg.domain, cfg.n_sensors_response)
    sensors_mis = _uniform_points(rng, cfg.domain, cfg.n_sensors_misaligned)
    tests = _uniform_points(rng, cfg.domain, cfg.n_test)

    # latent fields on the generation mesh: eta[k] has shape (T, n_gen)
    eta = {}
    for k in range(n_fields):
        prec = build_precision(fem, MaternParams(tp.range[k], math.sqrt(tp.sigma2[k])))
        daily = sample_field(prec, rng, size=T)
        eta[k + 1] = np.array(simulate_ar1_path(daily, tp.ar[k]))

    cells = cfg.cells
    mc = np.vstack([_uniform_points(rng, Box(*c), cfg.mc_points_per_cell) for c in cells])
    owner = np.repeat(np.arange(len(cells)), cfg.mc_points_per_cell)
    # averaging interpolated values over the MC points is a fixed linear map
    mc_interp = interpolation_matrix(mesh, mc)
    avg = sp.csr_matrix((np.full(len(mc), 1.0 / cfg.mc_points_per_cell), (owner, np.arange(len(mc)))),
                        shape=(len(cells), len(mc)))
    block_map = (avg @ mc_interp).tocsr()
    trend = linear_trend("trend", *cfg.trend)
    block_trend = avg @ trend(mc, 1)

    def response_predictor(W, trend_values):
        out = tp.alpha[2] + tp.theta[0] * trend_values[:, None] + (W @ eta[3].T)
        for k, b in enumerate(tp.beta, 1):
            out = out + b * (W @ eta[k].T)
        return out

    point_values, block_values = {}, {}
    for v in range(1, n_fields + 1):
        sensors = sensors_mis if v == 1 else sensors_resp
        Wp = interpolation_matrix(mesh, sensors)
        if v == n_fields:
            lp_point = response_predictor(Wp, trend(sensors, 1))
            lp_block = response_predictor(block_map, block_trend)
        else:
            lp_point = tp.alpha[v - 1] + Wp @ eta[v].T
            lp_block = tp.alpha[v - 1] + block_map @ eta[v].T
        point_values[v] = lp_point + rng.normal(0.0, math.sqrt(tp.tau2_point[v - 1]), lp_point.shape)
        block_values[v] = lp_block + rng.normal(0.0, math.sqrt(tp.tau2_block[v - 1]), lp_block.shape)

    truth = response_predictor(interpolation_matrix(mesh, tests), trend(tests, 1))
    return SimDataset(cfg, replicate, sensors_resp, sensors_mis, tests, point_values, block_values,
                      np.asarray(truth), eta if keep_latent else {})


# --------------------------------------------------------------------------
# Fitting a replicate

def rmspe(predictions: Sequence[float], truths: Sequence[float]) -> float:
    """Root mean squared prediction error."""
    p = np.asarray(predictions, dtype=float)
    t = np.asarray(truths, dtype=float)
    if p.shape != t.shape:
        raise ValueError("predictions and truths must have equal lengths")
    if p.size == 0:
        raise ValueError("rmspe needs at least one value")
    return float(math.sqrt(np.mean((p - t) ** 2)))


def study_spec(ds: SimDataset, model: str, scenario: str, t: int, mesh: Mesh | None = None) -> FusionModelSpec:
    mesh = mesh or ds.cfg.fit_mesh()
    return FusionModelSpec(
        fields=[FieldSpec(VARIABLE_NAMES[k]) for k in (1, 2, 3)],
        observations=ds.batch(model, scenario, t),
        mesh=mesh, T=t,
        fixed_effects=[linear_trend("trend", *ds.cfg.trend)],
    )


@dataclass
class ReplicateFit:
    model: str
    scenario: str
    t: int
    fit: FitResult | None
    rmspe: float
    coverage: float
    predictions: np.ndarray
    truths: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    error: str = ""

    def summary(self) -> dict:
        """Posterior mean and 95% interval of every reported parameter."""
        if self.fit is None:
            return {}
        out = {}
        for name, s in {**self.fit.hyper_summary, **self.fit.linear_summary}.items():
            out[name] = (s.mean, s.q025, s.q975)
        return out


def fit_replicate(ds: SimDataset, model: str, scenario: str, t: int, *, mesh: Mesh | None = None,
                  init: HyperVector | None = None, max_evals: int = 3000, design: str = "ccd",
                  seed: int = 0, optimizer: str = "quasi-newton") -> ReplicateFit:
    """Fit one model variant to one replicate and score it on the test set."""
    from .prediction import coverage_95, forecast_accumulator, nowcast_accumulator

    spec = study_spec(ds, model, scenario, t, mesh)
    locations, time_index, truth = ds.test_targets(scenario, t)
    try:
        compiled = CompiledModel(spec)
        post = Posterior(compiled, default_priors(compiled))
        mode = optimize_mode(post, init, method=optimizer, max_evals=max_evals)
        targets = [((float(x), float(y)), time_index) for x, y in locations]
        build = nowcast_accumulator if scenario == "last_day" else forecast_accumulator
        acc = build(spec, targets)
        result = explore_grid(post, mode, design=design, compute_latent_sd=False, seed=seed, on_point=acc)
        surface = acc.surface(result)
    except (NumericalFailure, NotPositiveDefiniteError, np.linalg.LinAlgError) as exc:
        log.warning("replicate %d %s/%s/t=%d failed: %s", ds.replicate, model, scenario, t, exc)
        nan = np.full(len(truth), np.nan)
        return ReplicateFit(model, scenario, t, None, math.nan, math.nan, nan, truth, nan, nan, str(exc))
    return ReplicateFit(model, scenario, t, result, rmspe(surface.mean, truth), coverage_95(surface, truth),
                        surface.mean, truth, surface.q025, surface.q975)


# --------------------------------------------------------------------------
# Study runner

@dataclass
class StudyTables:
    params: list  # rows: param, model, t, mean, q025, q975, rmse
    rmspe: list  # rows: replicate, model, t, scenario, rmspe
    failures: list = field(default_factory=list)
    fits: list = field(default_factory=list, repr=False)

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "study_params.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["param", "model", "t", "mean", "q025", "q975", "rmse"])
            for row in self.params:
                w.writerow([row[0], row[1], row[2], *(_fmt(v) for v in row[3:])])
        with open(out / "study_rmspe.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["replicate", "model", "t", "scenario", "rmspe"])
            for row in self.rmspe:
                w.writerow([*row[:4], _fmt(row[4])])


def _fmt(value: float) -> str:
    return "nan" if not math.isfinite(value) else format(value, ".10g")


@dataclass(frozen=True)
class StudyPlan:
    models: tuple = ("point", "grid", "joint")
    scenarios: tuple = SCENARIOS
    t_values: tuple | None = None  # defaults to cfg.t_train
    n_replicates: int = 2
    max_evals: int = 3000
    design: str = "ccd"
    optimizer: str = "quasi-newton"
    keep_fits: bool = False


def run_replicate(cfg: SimConfig, plan: StudyPlan, replicate: int, keep_data_dir=None) -> list[ReplicateFit]:
    """All fits of one replicate, in a fixed order."""
    ds = generate_replicate(cfg, replicate_seed(cfg.seed, replicate), replicate=replicate)
    if keep_data_dir is not None:
        dump_replicate(ds, Path(keep_data_dir) / f"replicate_{replicate:03d}")
    mesh = cfg.fit_mesh()
    out = []
    for t in plan.t_values or cfg.t_train:
        for model in plan.models:
            warm = None
            for scenario in plan.scenarios:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore")
                    res = fit_replicate(ds, model, scenario, t, mesh=mesh, init=warm,
                                        max_evals=plan.max_evals, design=plan.design, seed=replicate,
                                        optimizer=plan.optimizer)
                if res.fit is not None:
                    warm = res.fit.mode.hyper
                if not plan.keep_fits:
                    res.fit_summary = res.summary()
                    res.fit = None
                out.append(res)
    return out


def _run_replicate_task(args):
    from threadpoolctl import threadpool_limits

    cfg, plan, replicate, keep = args
    with threadpool_limits(1):
        return run_replicate(cfg, plan, replicate, keep)


def run_study(cfg: SimConfig, plan: StudyPlan | None = None, *, threads: int = 1,
              keep_data_dir=None, progress=None) -> StudyTables:
    """Simulate and fit ``plan.n_replicates`` replicates and tabulate results.

    Replicates run in up to ``threads`` worker processes; results are
    gathered in replicate order so the tables do not depend on ``threads``.
    """
    plan = plan or StudyPlan()
    if plan.n_replicates < 1:
        raise ValueError("n_replicates must be at least 1")
    tasks = [(cfg, plan, r, keep_data_dir) for r in range(plan.n_replicates)]
    if threads > 1:
        import multiprocessing
        from concurrent.futures import ProcessPoolExecutor

        # forking after BLAS/numba threads have started can deadlock the workers
        ctx = multiprocessing.get_context("spawn")
        with ProcessPoolExecutor(max_workers=threads, mp_context=ctx) as pool:
            per_rep = list(pool.map(_run_replicate_task, tasks))
    else:
        per_rep = []
        for task in tasks:
            per_rep.append(_run_replicate_task(task))
            if progress:
                progress(task[2])
    return tabulate(cfg, plan, per_rep)


def tabulate(cfg: SimConfig, plan: StudyPlan, per_rep: list) -> StudyTables:
    truth = cfg.true_params.as_table()
    rmspe_rows, failures, fits = [], [], []
    collected: dict = {}
    for r, results in enumerate(per_rep):
        for res in results:
            rmspe_rows.append((r, res.model, res.t, res.scenario, res.rmspe))
            fits.append((r, res))
            if res.error:
                failures.append((r, res.model, res.t, res.scenario, res.error))
                continue
            if res.scenario != plan.scenarios[0]:
                continue
            summary = res.fit.summary() if res.fit is not None else getattr(res, "fit_summary", {})
            for name, vals in summary.items():
                collected.setdefault((name, res.model, res.t), []).append(vals)
    param_rows = []
    for (name, model, t), vals in sorted(collected.items(), key=lambda kv: (kv[0][2], kv[0][1], kv[0][0])):
        arr = np.array(vals)
        rmse = math.sqrt(np.mean((arr[:, 0] - truth[name]) ** 2)) if name in truth else math.nan
        param_rows.append((name, model, t, *arr.mean(axis=0), rmse))
    return StudyTables(param_rows, rmspe_rows, failures, fits if plan.keep_fits else [])


def dump_replicate(ds: SimDataset, out_dir) -> None:
    """Write one replicate's full data in the observation CSV formats."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    T = ds.cfg.T_total
    points, blocks = [], []
    cells = ds.cfg.cells
    for v in sorted(ds.point_values):
        for day in range(1, T + 1):
            points += [PointObs(v, (float(x), float(y)), day, float(val))
                       for (x, y), val in zip(ds.sensors_of(v), ds.point_values[v][:, day - 1])]
            blocks += [BlockObs(v, tuple(map(float, c)), day, float(val))
                       for c, val in zip(cells, ds.block_values[v][:, day - 1])]
    write_points(out / "points.csv", points, VARIABLE_NAMES)
    write_blocks(out / "blocks.csv", blocks, VARIABLE_NAMES)
    truth = [PointObs(3, (float(x), float(y)), day, float(ds.test_truth[i, day - 1]))
             for day in range(1, T + 1) for i, (x, y) in enumerate(ds.test_locations)]
    write_points(out / "test_truth.csv", truth, VARIABLE_NAMES)
