"""Triangulated study domains and P1 finite-element matrices.

The mesh is a structured split-square triangulation of a rectangle grown
by a buffer on every side.  Vertex lines always pass through the edges of
the interior rectangle, so grid cells aligned with the study domain pick
up whole rows of vertices.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp


class Point2(NamedTuple):
    easting: float
    northing: float


class Box(NamedTuple):
    """Axis-aligned rectangle ``[xmin, xmax] x [ymin, ymax]``."""

    xmin: float
    xmax: float
    ymin: float
    ymax: float

    @property
    def width(self) -> float:
        return self.xmax - self.xmin

    @property
    def height(self) -> float:
        return self.ymax - self.ymin

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def diagonal(self) -> float:
        return math.hypot(self.width, self.height)

    def grow(self, amount: float) -> "Box":
        return Box(self.xmin - amount, self.xmax + amount,
                   self.ymin - amount, self.ymax + amount)

    def contains(self, xy, closed: bool = True) -> np.ndarray:
        xy = np.atleast_2d(np.asarray(xy, dtype=float))
        x, y = xy[:, 0], xy[:, 1]
        if closed:
            return (x >= self.xmin) & (x <= self.xmax) & (y >= self.ymin) & (y <= self.ymax)
        return (x > self.xmin) & (x < self.xmax) & (y > self.ymin) & (y < self.ymax)


class PointNotFoundError(LookupError):
    """Raised when points fall outside the triangulated hull.

    The offending positions (indices into the query array) are kept on
    ``indices``.
    """

    def __init__(self, indices):
        self.indices = np.asarray(indices, dtype=int)
        shown = ", ".join(str(i) for i in self.indices[:10])
        more = "" if self.indices.size <= 10 else f" (+{self.indices.size - 10} more)"
        super().__init__(f"{self.indices.size} point(s) outside the mesh hull: index {shown}{more}")


@dataclass(frozen=True, eq=False)
class Mesh:
    vertices: np.ndarray
    triangles: np.ndarray
    interior_bbox: Box
    buffer_width: float = 0.0

    def __post_init__(self):
        v = np.ascontiguousarray(self.vertices, dtype=float)
        t = np.ascontiguousarray(self.triangles, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 2:
            raise ValueError("vertices must have shape (n, 2)")
        if t.ndim != 2 or t.shape[1] != 3:
            raise ValueError("triangles must have shape (m, 3)")
        if not np.all(np.isfinite(v)):
            raise ValueError("vertex coordinates must be finite")
        if t.size and (t.min() < 0 or t.max() >= len(v)):
            raise ValueError("triangle vertex index out of range")
        v.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)
        object.__setattr__(self, "interior_bbox", Box(*self.interior_bbox))
        if np.any(self.signed_areas <= 0):
            raise ValueError("every triangle must have positive signed area")

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @cached_property
    def signed_areas(self) -> np.ndarray:
        p = self.vertices[self.triangles]
        e1 = p[:, 1] - p[:, 0]
        e2 = p[:, 2] - p[:, 0]
        return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])

    @property
    def area(self) -> float:
        return float(self.signed_areas.sum())

    @property
    def hull_bbox(self) -> Box:
        lo = self.vertices.min(axis=0)
        hi = self.vertices.max(axis=0)
        return Box(lo[0], hi[0], lo[1], hi[1])

    @cached_property
    def interior_vertices(self) -> np.ndarray:
        """Indices of vertices inside the closed interior bounding box."""
        return np.flatnonzero(self.interior_bbox.contains(self.vertices))

    @cached_property
    def _trifinder(self):
        from matplotlib.tri import Triangulation

        tri = Triangulation(self.vertices[:, 0], self.vertices[:, 1], self.triangles)
        return tri.get_trifinder()

    def locate_many(self, xy, tol: float = 1e-9):
        """Containing triangles and barycentric weights for many points.

        Returns ``(tri_index, weights)`` with ``weights`` of shape (m, 3)
        ordered like the vertices of each triangle.  Points outside the
        hull raise :class:`PointNotFoundError`.
        """
        xy = np.atleast_2d(np.asarray(xy, dtype=float))
        idx = np.asarray(self._trifinder(xy[:, 0], xy[:, 1]), dtype=np.int64)
        missing = np.flatnonzero(idx < 0)
        if missing.size:
            # the trapezoid map can miss points lying exactly on the hull
            for i in missing:
                w = _barycentric(self.vertices[self.triangles], xy[i])
                ok = np.flatnonzero(np.all(w >= -tol, axis=1))
                if ok.size:
                    idx[i] = ok[0]
            missing = np.flatnonzero(idx < 0)
            if missing.size:
                raise PointNotFoundError(missing)
        corners = self.vertices[self.triangles[idx]]
        w = _barycentric_rows(corners, xy)
        w = np.clip(w, 0.0, None)
        w /= w.sum(axis=1, keepdims=True)
        return idx, w


def _barycentric(corners: np.ndarray, p) -> np.ndarray:
    """Barycentric coordinates of one point with respect to many triangles."""
    return _barycentric_rows(corners, np.broadcast_to(np.asarray(p, float), (len(corners), 2)))


def _barycentric_rows(corners: np.ndarray, xy: np.ndarray) -> np.ndarray:
    a, b, c = corners[:, 0], corners[:, 1], corners[:, 2]
    det = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (c[:, 0] - a[:, 0]) * (b[:, 1] - a[:, 1])
    l1 = ((xy[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (c[:, 0] - a[:, 0]) * (xy[:, 1] - a[:, 1])) / det
    l2 = ((b[:, 0] - a[:, 0]) * (xy[:, 1] - a[:, 1]) - (xy[:, 0] - a[:, 0]) * (b[:, 1] - a[:, 1])) / det
    return np.column_stack([1.0 - l1 - l2, l1, l2])


def _axis(lo: float, hi: float, buffer: float, h: float, hb: float) -> np.ndarray:
    inner = np.linspace(lo, hi, max(1, math.ceil((hi - lo) / h - 1e-12)) + 1)
    if buffer <= 1e-9 * (hi - lo):
        # a buffer below coordinate resolution would create slivers
        return inner
    nb = max(1, math.ceil(buffer / hb - 1e-12))
    left = np.linspace(lo - buffer, lo, nb + 1)[:-1]
    right = np.linspace(hi, hi + buffer, nb + 1)[1:]
    return np.concatenate([left, inner, right])


def build_structured_mesh(bbox, target_edge_length: float, buffer_width: float | None = None,
                          buffer_edge_length: float | None = None) -> Mesh:
    """Split-square triangulation of ``bbox`` grown by ``buffer_width``.

    Parameters
    ----------
    bbox : Box or 4-tuple
        Study domain ``(xmin, xmax, ymin, ymax)``.
    target_edge_length : float
        Upper bound on the spacing between neighbouring vertex lines.
    buffer_width : float, optional
        Extension on all four sides; defaults to 20% of the bbox diagonal.
    buffer_edge_length : float, optional
        Spacing inside the buffer; defaults to ``target_edge_length``.  A
        coarser buffer keeps the boundary away at a fraction of the cost.

    Every square is cut along the same diagonal, so each interior vertex
    touches six triangles and the lumped mass is uniform on a uniform
    lattice.  (Alternating the diagonals leaves the stiffness unchanged but
    makes the lumped mass, and hence the field variance, oscillate.)
    """
    bbox = Box(*bbox)
    if not (bbox.width > 0 and bbox.height > 0):
        raise ValueError(f"degenerate bounding box {tuple(bbox)}")
    if not target_edge_length > 0:
        raise ValueError("target_edge_length must be positive")
    if buffer_width is None:
        buffer_width = 0.2 * bbox.diagonal
    if buffer_width < 0:
        raise ValueError("buffer_width must be non-negative")
    hb = target_edge_length if buffer_edge_length is None else buffer_edge_length
    if not hb > 0:
        raise ValueError("buffer_edge_length must be positive")

    xs = _axis(bbox.xmin, bbox.xmax, buffer_width, target_edge_length, hb)
    ys = _axis(bbox.ymin, bbox.ymax, buffer_width, target_edge_length, hb)
    nx, ny = len(xs), len(ys)
    gx, gy = np.meshgrid(xs, ys)
    vertices = np.column_stack([gx.ravel(), gy.ravel()])

    j, i = np.meshgrid(np.arange(ny - 1), np.arange(nx - 1), indexing="ij")
    i, j = i.ravel(), j.ravel()
    v00 = j * nx + i
    v10 = v00 + 1
    v01 = v00 + nx
    v11 = v01 + 1
    tris = np.empty((2 * len(v00), 3), dtype=np.int64)
    tris[0::2] = np.column_stack([v00, v10, v11])
    tris[1::2] = np.column_stack([v00, v11, v01])
    return Mesh(vertices, tris, bbox, float(buffer_width))


@dataclass(frozen=True, eq=False)
class FemMatrices:
    C: sp.csc_matrix  # lumped (diagonal) mass matrix
    G: sp.csc_matrix  # stiffness matrix

    @property
    def n(self) -> int:
        return self.C.shape[0]


def assemble_fem(mesh: Mesh) -> FemMatrices:
    """Assemble lumped mass and stiffness matrices of P1 elements."""
    tri = mesh.triangles
    p = mesh.vertices[tri]
    area = mesh.signed_areas
    n = mesh.n_vertices

    # gradient of the hat function of local vertex k is rot90(p[k+2] - p[k+1]) / (2A)
    e = np.stack([p[:, 2] - p[:, 1], p[:, 0] - p[:, 2], p[:, 1] - p[:, 0]], axis=1)
    grads = np.stack([-e[..., 1], e[..., 0]], axis=-1) / (2.0 * area[:, None, None])
    local_g = np.einsum("tid,tjd->tij", grads, grads) * area[:, None, None]

    rows = np.repeat(tri, 3, axis=1).ravel()
    cols = np.tile(tri, (1, 3)).ravel()
    G = sp.coo_matrix((local_g.ravel(), (rows, cols)), shape=(n, n)).tocsc()
    G.sum_duplicates()
    G = 0.5 * (G + G.T)

    lumped = np.bincount(tri.ravel(), weights=np.repeat(area / 3.0, 3), minlength=n)
    C = sp.diags(lumped, format="csc")
    return FemMatrices(C=C, G=G.tocsc())


def locate(mesh: Mesh, p) -> tuple[int, np.ndarray]:
    """Triangle containing ``p`` and its barycentric weights."""
    idx, w = mesh.locate_many(np.asarray(p, dtype=float).reshape(1, 2))
    return int(idx[0]), w[0]


def interpolation_matrix(mesh: Mesh, xy) -> sp.csr_matrix:
    """Sparse (m x n) matrix evaluating a P1 field at the points ``xy``."""
    xy = np.atleast_2d(np.asarray(xy, dtype=float))
    idx, w = mesh.locate_many(xy)
    m = len(xy)
    rows = np.repeat(np.arange(m), 3)
    A = sp.csr_matrix((w.ravel(), (rows, mesh.triangles[idx].ravel())), shape=(m, mesh.n_vertices))
    A.sum_duplicates()
    return A


def write_mesh(path, mesh: Mesh) -> None:
    with open(path, "w") as fh:
        fh.write(f"vertices {mesh.n_vertices} triangles {mesh.n_triangles}\n")
        for x, y in mesh.vertices.tolist():
            fh.write(f"{x!r} {y!r}\n")
        for i, j, k in mesh.triangles.tolist():
            fh.write(f"{i} {j} {k}\n")


def read_mesh(path, interior_bbox=None, buffer_width: float = 0.0) -> Mesh:
    lines = Path(path).read_text().split("\n")
    head = lines[0].split()
    if len(head) != 4 or head[0] != "vertices" or head[2] != "triangles":
        raise ValueError(f"{path}: bad mesh header {lines[0]!r}")
    nv, nt = int(head[1]), int(head[3])
    body = [ln for ln in lines[1:] if ln.strip()]
    if len(body) != nv + nt:
        raise ValueError(f"{path}: expected {nv + nt} data lines, found {len(body)}")
    verts = np.array([[float(s) for s in ln.split()] for ln in body[:nv]])
    tris = np.array([[int(s) for s in ln.split()] for ln in body[nv:]], dtype=np.int64)
    if interior_bbox is None:
        lo, hi = verts.min(axis=0), verts.max(axis=0)
        interior_bbox = Box(lo[0], hi[0], lo[1], hi[1])
    return Mesh(verts, tris.reshape(-1, 3), Box(*interior_bbox), buffer_width)
