"""Posterior predictive surfaces of the response, now-casts and one-day-ahead forecasts."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .geometry import Box, Point2, assemble_fem
from .inference import FitResult, mixture_quantiles
from .linalg import SparseCholesky
from .model import _assemble_rows, _fixed_effect_rows, _linear_rows, field_scales
from .observation import expand_in_time, point_weights
from .spde import build_precision

NODATA = -9999.0


@dataclass(frozen=True, eq=False)
class PredictionSurface:
    targets: list
    mean: np.ndarray
    sd: np.ndarray
    q025: np.ndarray
    q975: np.ndarray

    def __post_init__(self):
        n = len(self.targets)
        for name in ("mean", "sd", "q025", "q975"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape != (n,):
                raise ValueError(f"{name} must have one value per target")
            object.__setattr__(self, name, arr)
        if np.any(self.sd < 0):
            raise ValueError("standard deviations must be non-negative")

    def __len__(self):
        return len(self.targets)


def _split_targets(targets):
    xy = np.array([tuple(p) for p, _ in targets], dtype=float).reshape(-1, 2)
    times = np.array([int(t) for _, t in targets], dtype=np.int64)
    return xy, times


def _row_variances(factor: SparseCholesky, rows: sp.csr_matrix, chunk: int = 256) -> np.ndarray:
    """``diag(A Q^-1 A^T)`` using solves in chunks of targets."""
    out = np.empty(rows.shape[0])
    for start in range(0, rows.shape[0], chunk):
        block = rows[start:start + chunk]
        solved = factor.solve(block.T.tocsc())
        out[start:start + chunk] = np.asarray(block.multiply(solved.T).sum(axis=1)).ravel()
    return np.clip(out, 0.0, None)


class SurfaceAccumulator:
    """Collects per-design-point predictive moments of linear combinations of the latents.

    Pass an instance to :func:`~stfusion.inference.explore_grid` as
    ``on_point`` to reuse each factorisation, or call :meth:`surface` on a
    finished fit, which re-factorises every design point.
    """

    def __init__(self, targets, build_rows, extra_variance=None):
        self.targets = list(targets)
        self.build_rows = build_rows
        self.extra_variance = extra_variance
        self.means, self.variances = [], []

    def __call__(self, point, factor: SparseCholesky) -> None:
        rows = self.build_rows(point.hyper)
        var = _row_variances(factor, rows)
        if self.extra_variance is not None:
            var = var + self.extra_variance(point.hyper)
        self.means.append(rows @ point.mean)
        self.variances.append(var)

    def surface(self, fit: FitResult, quantiles: str = "mixture") -> PredictionSurface:
        if len(self.means) != len(fit.grid):
            self.means, self.variances = [], []
            for g in fit.grid:
                self(g, fit.posterior.factorize(g.hyper))
        w = fit.weights
        means, variances = np.array(self.means), np.array(self.variances)
        mean = w @ means
        var = np.clip(w @ (variances + means**2) - mean**2, 0.0, None)
        sd = np.sqrt(var)
        if quantiles == "mixture":
            q = mixture_quantiles(w, means, np.sqrt(variances))
        elif quantiles == "gaussian":
            q = np.vstack([mean - 1.959963984540054 * sd, mean + 1.959963984540054 * sd])
        else:
            raise ValueError(f"unknown quantile mode {quantiles!r}")
        return PredictionSurface(self.targets, mean, sd, np.minimum(q[0], mean), np.maximum(q[1], mean))


def predict_at(fit: FitResult, targets: Sequence, spec=None, *, quantiles: str = "mixture") -> PredictionSurface:
    """Posterior predictive of the response's linear predictor at ``targets``.

    ``targets`` is a sequence of ``(point, time_index)`` pairs with
    ``1 <= time_index <= T``.  Points outside the mesh hull raise
    :class:`~stfusion.geometry.PointNotFoundError`.
    """
    return nowcast_accumulator(spec or fit.model.spec, targets).surface(fit, quantiles)


def nowcast_accumulator(spec, targets: Sequence) -> SurfaceAccumulator:
    """Accumulator for :func:`predict_at` built before the fit."""
    targets = [(Point2(*p), int(t)) for p, t in targets]
    xy, times = _split_targets(targets)
    if len(times) and (times.min() < 1 or times.max() > spec.T):
        raise ValueError(f"target times must lie in 1..{spec.T}; use forecast_one_day beyond T")
    W = point_weights(spec.mesh, xy)
    B = expand_in_time(W, times, spec.T)
    L = _linear_rows(spec, spec.response, _fixed_effect_rows(spec, "point", xy, W, times))

    def rows(h):
        return _assemble_rows(spec, B, L, field_scales(spec, spec.response, h))

    return SurfaceAccumulator(targets, rows)


def forecast_one_day(fit: FitResult, targets: Sequence, spec=None, *, quantiles: str = "mixture") -> PredictionSurface:
    """Predictive distribution one day past the fitted window.

    Each field at ``T + 1`` is ``a * eta_T`` plus an independent innovation
    with covariance ``(1 - a^2) Q_space^-1``; both enter the response
    through the same linear predictor as :func:`predict_at`.
    """
    return forecast_accumulator(spec or fit.model.spec, targets).surface(fit, quantiles)


def forecast_accumulator(spec, targets: Sequence) -> SurfaceAccumulator:
    """Accumulator for :func:`forecast_one_day` built before the fit."""
    targets = [(Point2(*p), int(t)) for p, t in targets]
    xy, times = _split_targets(targets)
    if np.any(times != spec.T + 1):
        raise ValueError(f"only one-step forecasts (time {spec.T + 1}) are supported")
    W = point_weights(spec.mesh, xy)
    B = expand_in_time(W, np.full(len(times), spec.T), spec.T)
    L = _linear_rows(spec, spec.response, _fixed_effect_rows(spec, "point", xy, W, times))
    fem = assemble_fem(spec.mesh)
    Wt = W.T.tocsc()

    def rows(h):
        scales = field_scales(spec, spec.response, h)
        return _assemble_rows(spec, B, L, {k: s * h.ar[k] for k, s in scales.items()})

    def innovation(h):
        total = np.zeros(len(targets))
        for k, s in field_scales(spec, spec.response, h).items():
            Q = build_precision(fem, h.matern(k)).Q
            solved = SparseCholesky(Q).solve(Wt)
            total += s * s * (1.0 - h.ar[k] ** 2) * np.asarray(W.multiply(solved.T).sum(axis=1)).ravel()
        return total

    return SurfaceAccumulator(targets, rows, innovation)


def coverage_95(surface: PredictionSurface, truths) -> float:
    """Fraction of ``truths`` inside the 95% prediction intervals."""
    truths = np.asarray(truths, dtype=float)
    if truths.shape != (len(surface),):
        raise ValueError("one truth per target is required")
    if truths.size == 0:
        raise ValueError("coverage needs at least one target")
    return float(np.mean((truths >= surface.q025) & (truths <= surface.q975)))


def lattice(box: Box, cellsize: float):
    """Cell centres of a regular lattice over ``box``, north row first.

    Returns ``(xy, ncols, nrows, xllcorner, yllcorner)``.
    """
    box = Box(*box)
    if not cellsize > 0:
        raise ValueError("cellsize must be positive")
    ncols = max(1, int(round(box.width / cellsize)))
    nrows = max(1, int(round(box.height / cellsize)))
    xs = box.xmin + (np.arange(ncols) + 0.5) * cellsize
    ys = box.ymin + (np.arange(nrows)[::-1] + 0.5) * cellsize
    gx, gy = np.meshgrid(xs, ys)
    return np.column_stack([gx.ravel(), gy.ravel()]), ncols, nrows, box.xmin, box.ymin


# --------------------------------------------------------------------------
# Output formats

def write_predictions(path, surface: PredictionSurface) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["easting", "northing", "time", "mean", "sd", "q025", "q975"])
        for i, (p, t) in enumerate(surface.targets):
            w.writerow([repr(float(p[0])), repr(float(p[1])), t, repr(float(surface.mean[i])),
                        repr(float(surface.sd[i])), repr(float(surface.q025[i])), repr(float(surface.q975[i]))])


def _fmt_cell(v: float, nodata: float) -> str:
    # shortest repr that round-trips the double exactly
    return repr(float(nodata if not math.isfinite(v) else v))


def write_ascii_grid(path, values, xllcorner: float, yllcorner: float, cellsize: float,
                     nodata: float = NODATA) -> None:
    """ESRI ASCII grid; ``values`` is (nrows x ncols) with the north row first.

    Values are written with Python's shortest round-trip ``repr`` so a
    reader parsing them as doubles recovers the exact bits; non-finite
    values become ``nodata``.
    """
    values = np.asarray(values, dtype=float)
    if values.ndim != 2:
        raise ValueError("values must be a 2-D array")
    nrows, ncols = values.shape
    with open(path, "w") as fh:
        fh.write(f"ncols {ncols}\nnrows {nrows}\nxllcorner {float(xllcorner)!r}\nyllcorner {float(yllcorner)!r}\n"
                 f"cellsize {float(cellsize)!r}\nNODATA_value {float(nodata)!r}\n")
        for row in values:
            fh.write(" ".join(_fmt_cell(v, nodata) for v in row) + "\n")


def read_ascii_grid(path):
    """Read an ESRI ASCII grid; returns ``(values, header)`` with NaN for nodata."""
    lines = Path(path).read_text().split("\n")
    header = {}
    i = 0
    while i < len(lines) and lines[i].split() and lines[i].split()[0].lower() in (
            "ncols", "nrows", "xllcorner", "yllcorner", "xllcenter", "yllcenter", "cellsize", "nodata_value"):
        key, val = lines[i].split()[:2]
        header[key.lower()] = float(val)
        i += 1
    for key in ("ncols", "nrows", "cellsize"):
        if key not in header:
            raise ValueError(f"{path}: missing {key} in header")
    ncols, nrows = int(header["ncols"]), int(header["nrows"])
    data = np.array(" ".join(lines[i:]).split(), dtype=float)
    if data.size != ncols * nrows:
        raise ValueError(f"{path}: expected {ncols * nrows} values, found {data.size}")
    values = data.reshape(nrows, ncols)
    if "nodata_value" in header:
        values = np.where(values == header["nodata_value"], np.nan, values)
    return values, header
