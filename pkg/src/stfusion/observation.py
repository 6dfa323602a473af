"""Point and block observations and the sparse operators that map latent
node values to them.

Point rows carry the barycentric weights of the location.  Block rows
spread equal weight ``1/H`` over the ``H`` mesh vertices inside the
(closed) cell; a cell with no vertex falls back to the point operator at
its centroid.
"""
from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import scipy.sparse as sp

from .geometry import Box, Mesh, Point2, interpolation_matrix

log = logging.getLogger(__name__)

POINT_COLUMNS = ("variable", "easting", "northing", "time", "value")
BLOCK_COLUMNS = ("variable", "xmin", "xmax", "ymin", "ymax", "time", "value")


@dataclass(frozen=True)
class PointObs:
    variable_id: int
    location: Point2
    time_index: int
    value: float

    def __post_init__(self):
        object.__setattr__(self, "location", Point2(*self.location))


@dataclass(frozen=True)
class BlockObs:
    variable_id: int
    cell: Box
    time_index: int
    value: float

    def __post_init__(self):
        object.__setattr__(self, "cell", Box(*self.cell))


@dataclass(frozen=True, eq=False)
class ObservationBatch:
    points: tuple = ()
    blocks: tuple = ()
    variable_names: Mapping[int, str] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "points", tuple(self.points))
        object.__setattr__(self, "blocks", tuple(self.blocks))
        object.__setattr__(self, "variable_names", dict(self.variable_names))
        used = {o.variable_id for o in self.points} | {o.variable_id for o in self.blocks}
        unnamed = sorted(used - set(self.variable_names))
        if unnamed:
            raise ValueError(f"variable ids without a name: {unnamed}")
        for b in self.blocks:
            if not b.cell.area > 0:
                raise ValueError(f"block cell {tuple(b.cell)} has no area")

    @classmethod
    def from_arrays(cls, variable_names, points=None, blocks=None) -> "ObservationBatch":
        """Build from column arrays.

        ``points`` is ``(var, xy, time, value)`` and ``blocks`` is
        ``(var, cells, time, value)`` with ``cells`` of shape (m, 4) holding
        ``xmin, xmax, ymin, ymax``.
        """
        pts, blks = [], []
        if points is not None:
            var, xy, t, y = points
            pts = [PointObs(int(v), Point2(float(p[0]), float(p[1])), int(tt), float(val))
                   for v, p, tt, val in zip(var, np.asarray(xy), t, y)]
        if blocks is not None:
            var, cells, t, y = blocks
            blks = [BlockObs(int(v), Box(*map(float, c)), int(tt), float(val))
                    for v, c, tt, val in zip(var, np.asarray(cells), t, y)]
        return cls(pts, blks, variable_names)

    @cached_property
    def point_arrays(self):
        """``(var, xy, time, value)`` column arrays of the point records."""
        m = len(self.points)
        var = np.fromiter((o.variable_id for o in self.points), dtype=np.int64, count=m)
        xy = np.array([o.location for o in self.points], dtype=float).reshape(m, 2)
        t = np.fromiter((o.time_index for o in self.points), dtype=np.int64, count=m)
        y = np.fromiter((o.value for o in self.points), dtype=float, count=m)
        return var, xy, t, y

    @cached_property
    def block_arrays(self):
        """``(var, cells, time, value)`` column arrays of the block records."""
        m = len(self.blocks)
        var = np.fromiter((o.variable_id for o in self.blocks), dtype=np.int64, count=m)
        cells = np.array([o.cell for o in self.blocks], dtype=float).reshape(m, 4)
        t = np.fromiter((o.time_index for o in self.blocks), dtype=np.int64, count=m)
        y = np.fromiter((o.value for o in self.blocks), dtype=float, count=m)
        return var, cells, t, y

    def select(self, points=True, blocks=True, point_vars=None, block_vars=None) -> "ObservationBatch":
        """Sub-batch keeping the given supports and variables."""
        pts = [o for o in self.points if points and (point_vars is None or o.variable_id in point_vars)]
        blk = [o for o in self.blocks if blocks and (block_vars is None or o.variable_id in block_vars)]
        return ObservationBatch(pts, blk, self.variable_names)

    @property
    def max_time(self) -> int:
        times = [o.time_index for o in self.points] + [o.time_index for o in self.blocks]
        return max(times, default=0)

    def __len__(self):
        return len(self.points) + len(self.blocks)


@dataclass(frozen=True, eq=False)
class ObsOperator:
    A: sp.csr_matrix
    kind: str  # "point" or "block"


def point_weights(mesh: Mesh, xy) -> sp.csr_matrix:
    """(m x n) barycentric interpolation weights of the points ``xy``."""
    xy = np.asarray(xy, dtype=float).reshape(-1, 2)
    if len(xy) == 0:
        return sp.csr_matrix((0, mesh.n_vertices))
    return interpolation_matrix(mesh, xy)


def block_weights(mesh: Mesh, cells, fallback: bool = True, tol: float = 1e-9) -> sp.csr_matrix:
    """(m x n) equal weights over mesh vertices inside each closed cell."""
    cells = np.asarray(cells, dtype=float).reshape(-1, 4)
    n = mesh.n_vertices
    if len(cells) == 0:
        return sp.csr_matrix((0, n))
    x, y = mesh.vertices[:, 0], mesh.vertices[:, 1]
    scale = tol * max(1.0, float(np.abs(mesh.vertices).max()))
    rows, cols, vals = [], [], []
    empty = []
    for i, (x0, x1, y0, y1) in enumerate(cells):
        inside = np.flatnonzero((x >= x0 - scale) & (x <= x1 + scale) & (y >= y0 - scale) & (y <= y1 + scale))
        if inside.size == 0:
            empty.append(i)
            continue
        rows.append(np.full(inside.size, i))
        cols.append(inside)
        vals.append(np.full(inside.size, 1.0 / inside.size))
    if empty:
        if not fallback:
            raise ValueError(f"block cell(s) {empty[:10]} contain no mesh vertex")
        log.warning("%d block cell(s) contain no mesh vertex; using the cell centroid", len(empty))
        c = cells[empty]
        centroids = np.column_stack([(c[:, 0] + c[:, 1]) / 2, (c[:, 2] + c[:, 3]) / 2])
        Wc = point_weights(mesh, centroids).tocoo()
        rows.append(np.asarray(empty)[Wc.row])
        cols.append(Wc.col)
        vals.append(Wc.data)
    W = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(len(cells), n))
    W.sum_duplicates()
    return W


def expand_in_time(W: sp.spmatrix, times, T: int) -> sp.csr_matrix:
    """Place row ``i`` of ``W`` in the column block of its 1-based time."""
    W = sp.csr_matrix(W)
    times = np.asarray(times, dtype=np.int64)
    m, n = W.shape
    if len(times) != m:
        raise ValueError("one time index per row is required")
    if m and (times.min() < 1 or times.max() > T):
        bad = np.flatnonzero((times < 1) | (times > T))
        raise ValueError(f"time index out of 1..{T} for rows {bad[:10].tolist()}")
    coo = W.tocoo()
    cols = coo.col + (times[coo.row] - 1) * n
    return sp.csr_matrix((coo.data, (coo.row, cols)), shape=(m, n * T))


def _point_inputs(obs):
    if isinstance(obs, ObservationBatch):
        _, xy, t, _ = obs.point_arrays
        return xy, t
    obs = list(obs)
    xy = np.array([o.location for o in obs], dtype=float).reshape(-1, 2)
    t = np.array([o.time_index for o in obs], dtype=np.int64)
    return xy, t


def point_operator(mesh: Mesh, obs: Sequence[PointObs], T: int) -> ObsOperator:
    xy, t = _point_inputs(obs)
    return ObsOperator(expand_in_time(point_weights(mesh, xy), t, T), "point")


def block_operator(mesh: Mesh, obs: Sequence[BlockObs], T: int, fallback: bool = True) -> ObsOperator:
    if isinstance(obs, ObservationBatch):
        _, cells, t, _ = obs.block_arrays
    else:
        obs = list(obs)
        cells = np.array([o.cell for o in obs], dtype=float).reshape(-1, 4)
        t = np.array([o.time_index for o in obs], dtype=np.int64)
    return ObsOperator(expand_in_time(block_weights(mesh, cells, fallback), t, T), "block")


# --------------------------------------------------------------------------
# CSV input/output

class IngestError(ValueError):
    """Raised when rows of an observation file fail validation.

    ``problems`` lists ``(line_number, message)`` pairs.
    """

    def __init__(self, path, problems):
        self.path = str(path)
        self.problems = list(problems)
        lines = "; ".join(f"line {ln}: {msg}" for ln, msg in self.problems[:20])
        more = "" if len(self.problems) <= 20 else f" (+{len(self.problems) - 20} more)"
        super().__init__(f"{self.path}: {lines}{more}")


@dataclass
class ColumnSchema:
    """How to read an observation CSV.

    ``columns`` maps the logical column names (``variable``, ``easting``...)
    to headers in the file.  ``variables`` maps variable names to ids;
    integer ids are accepted as-is.  Locations outside ``bounds`` and time
    indices beyond ``max_time`` are rejected.
    """

    variables: Mapping[str, int] = field(default_factory=dict)
    bounds: Box | None = None
    max_time: int | None = None
    columns: Mapping[str, str] = field(default_factory=dict)

    def header(self, logical: str) -> str:
        return self.columns.get(logical, logical)


def _parse_variable(raw: str, schema: ColumnSchema) -> int:
    raw = raw.strip()
    if raw in schema.variables:
        return int(schema.variables[raw])
    try:
        vid = int(raw)
    except ValueError:
        raise ValueError(f"unknown variable {raw!r}") from None
    if schema.variables and vid not in set(schema.variables.values()):
        raise ValueError(f"unknown variable id {vid}")
    return vid


def _read_rows(path, logical_columns, schema: ColumnSchema):
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            warnings.warn(f"{path} is empty", stacklevel=3)
            return [], []
        wanted = [schema.header(c) for c in logical_columns]
        missing = [w for w in wanted if w not in reader.fieldnames]
        if missing:
            raise IngestError(path, [(1, f"missing column(s) {missing}")])
        rows = []
        for row in reader:
            rows.append((reader.line_num, {c: row[schema.header(c)] for c in logical_columns}))
    if not rows:
        warnings.warn(f"{path} has no data rows", stacklevel=3)
    return rows, []


def _check_time(t: int, schema: ColumnSchema):
    if t < 1 or (schema.max_time is not None and t > schema.max_time):
        raise ValueError(f"time index {t} out of range")


def ingest_points(path, schema: ColumnSchema | None = None) -> list[PointObs]:
    schema = schema or ColumnSchema()
    rows, problems = _read_rows(path, POINT_COLUMNS, schema)
    out = []
    for line, r in rows:
        try:
            vid = _parse_variable(r["variable"], schema)
            x, y = float(r["easting"]), float(r["northing"])
            t = int(r["time"])
            value = float(r["value"])
            if not all(np.isfinite([x, y, value])):
                raise ValueError("non-finite value")
            if schema.bounds is not None and not schema.bounds.contains((x, y))[0]:
                raise ValueError(f"location ({x}, {y}) outside the domain")
            _check_time(t, schema)
        except (ValueError, TypeError) as exc:
            problems.append((line, str(exc)))
            continue
        out.append(PointObs(vid, Point2(x, y), t, value))
    if problems:
        raise IngestError(path, problems)
    return out


def ingest_blocks(path, schema: ColumnSchema | None = None) -> list[BlockObs]:
    schema = schema or ColumnSchema()
    rows, problems = _read_rows(path, BLOCK_COLUMNS, schema)
    out = []
    for line, r in rows:
        try:
            vid = _parse_variable(r["variable"], schema)
            cell = Box(float(r["xmin"]), float(r["xmax"]), float(r["ymin"]), float(r["ymax"]))
            t = int(r["time"])
            value = float(r["value"])
            if not all(np.isfinite(list(cell) + [value])):
                raise ValueError("non-finite value")
            if not (cell.width > 0 and cell.height > 0):
                raise ValueError("cell has zero area")
            b = schema.bounds
            if b is not None and (cell.xmax <= b.xmin or cell.xmin >= b.xmax
                                  or cell.ymax <= b.ymin or cell.ymin >= b.ymax):
                raise ValueError("cell does not intersect the domain")
            _check_time(t, schema)
        except (ValueError, TypeError) as exc:
            problems.append((line, str(exc)))
            continue
        out.append(BlockObs(vid, cell, t, value))
    if problems:
        raise IngestError(path, problems)
    return out


def read_time_map(path) -> dict[int, str]:
    """Sidecar ``time,date`` file mapping time indices to labels."""
    with open(path, newline="") as fh:
        return {int(r["time"]): r["date"] for r in csv.DictReader(fh)}


def _name(vid: int, names: Mapping[int, str]) -> str:
    return names.get(vid, str(vid))


def write_points(path, points: Sequence[PointObs], names: Mapping[int, str] | None = None) -> None:
    names = names or {}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(POINT_COLUMNS)
        for o in points:
            w.writerow([_name(o.variable_id, names), repr(float(o.location[0])),
                        repr(float(o.location[1])), o.time_index, repr(float(o.value))])


def write_blocks(path, blocks: Sequence[BlockObs], names: Mapping[int, str] | None = None) -> None:
    names = names or {}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(BLOCK_COLUMNS)
        for o in blocks:
            w.writerow([_name(o.variable_id, names), *(repr(float(v)) for v in o.cell),
                        o.time_index, repr(float(o.value))])
