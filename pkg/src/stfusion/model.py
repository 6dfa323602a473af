"""The fusion model: K covariate fields, one response field, shared copies.

Latent vector layout (all blocks stacked in this order)::

    [eta_1 (n*T), ..., eta_{K+1} (n*T), alpha_1..alpha_{K+1}, theta_1..theta_l]

Each ``eta_k`` is time-major (all nodes at time 1 first).  Intercepts and
fixed-effect coefficients are linear parameters with independent
``N(0, LINEAR_PRIOR_VARIANCE)`` priors; the copy coefficients ``beta`` are
hyperparameters, so for fixed hyperparameters the model is Gaussian.

:class:`CompiledModel` precomputes every sparse product that does not
depend on the hyperparameters.  The prior and posterior precisions are
then weighted sums of fixed matrices over one fixed sparsity pattern.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

from .geometry import Mesh, assemble_fem
from .linalg import PatternSum, SparseCholesky
from .observation import ObservationBatch, block_weights, expand_in_time, point_weights
from .spde import MaternParams, precision_coefficients, precision_terms
from .temporal import Ar1Params, ar1_coefficients, ar1_logdet, ar1_terms

LINEAR_PRIOR_VARIANCE = 10.0


@dataclass(frozen=True)
class FieldSpec:
    name: str
    nu: float = 1.0


@dataclass(frozen=True, eq=False)
class FixedEffect:
    """A covariate known everywhere, ``evaluator(xy, times) -> values``."""

    name: str
    evaluator: Callable[[np.ndarray, np.ndarray], np.ndarray]

    def __call__(self, xy, times) -> np.ndarray:
        xy = np.asarray(xy, dtype=float).reshape(-1, 2)
        times = np.broadcast_to(np.asarray(times, dtype=np.int64), (len(xy),))
        out = np.asarray(self.evaluator(xy, times), dtype=float)
        if out.shape != (len(xy),):
            raise ValueError(f"fixed effect {self.name!r} returned shape {out.shape}")
        return out


def linear_trend(name: str = "trend", easting: float = 0.0, northing: float = 0.0,
                 offset: float = 0.0) -> FixedEffect:
    def evaluate(xy, _times):
        return offset + easting * xy[:, 0] + northing * xy[:, 1]

    return FixedEffect(name, evaluate)


def raster_effect(name: str, cells, values, times=None) -> FixedEffect:
    """Nearest-cell lookup in a raster given as rectangles and values.

    If ``times`` is given, each time index uses its own cells, and times
    missing from the raster fall back to the nearest earlier time.
    """
    cells = np.asarray(cells, dtype=float).reshape(-1, 4)
    values = np.asarray(values, dtype=float)
    if len(values) != len(cells) or len(cells) == 0:
        raise ValueError("raster needs one value per cell and at least one cell")
    times = np.ones(len(cells), dtype=np.int64) if times is None else np.asarray(times, dtype=np.int64)
    layers = sorted(set(times.tolist()))
    centres = np.column_stack([(cells[:, 0] + cells[:, 1]) / 2, (cells[:, 2] + cells[:, 3]) / 2])

    def evaluate(xy, ts):
        out = np.empty(len(xy))
        for t in np.unique(ts):
            pos = max(np.searchsorted(layers, t, side="right") - 1, 0)
            sel = np.flatnonzero(times == layers[pos])
            rows = np.flatnonzero(ts == t)
            d = ((xy[rows, None, :] - centres[None, sel, :]) ** 2).sum(axis=-1)
            out[rows] = values[sel[np.argmin(d, axis=1)]]
        return out

    return FixedEffect(name, evaluate)


@dataclass(frozen=True, eq=False)
class FusionModelSpec:
    """Everything that defines the model apart from hyperparameter values.

    Variable ids run from 1 to K+1; variable ``k`` is observed through
    field ``k`` and variable K+1 is the response.
    """

    fields: Sequence[FieldSpec]
    observations: ObservationBatch
    mesh: Mesh
    T: int
    fixed_effects: Sequence[FixedEffect] = ()
    block_fallback: bool = True

    def __post_init__(self):
        object.__setattr__(self, "fields", tuple(self.fields))
        object.__setattr__(self, "fixed_effects", tuple(self.fixed_effects))
        if len(self.fields) < 1:
            raise ValueError("at least the response field is required")
        if int(self.T) != self.T or self.T < 1:
            raise ValueError("T must be a positive integer")
        for f in self.fields:
            if f.nu != 1.0:
                raise ValueError(f"field {f.name!r}: only nu = 1 is supported")
        obs = self.observations
        ids = {o.variable_id for o in obs.points} | {o.variable_id for o in obs.blocks}
        bad = sorted(i for i in ids if not 1 <= i <= len(self.fields))
        if bad:
            raise ValueError(f"observations reference unknown variable id(s) {bad}")
        if obs.max_time > self.T:
            raise ValueError(f"observation time {obs.max_time} beyond T = {self.T}")

    @property
    def K(self) -> int:
        return len(self.fields) - 1

    @property
    def response(self) -> int:
        return len(self.fields)

    @property
    def n_linear(self) -> int:
        return len(self.fields) + len(self.fixed_effects)


# --------------------------------------------------------------------------
# Hyperparameters

@dataclass(frozen=True)
class HyperVector:
    """Hyperparameters on their natural scale.

    ``range``, ``sd`` and ``ar`` have one entry per field; the noise
    variances are keyed by variable id and only present for observed
    sources; ``beta`` has one entry per covariate field.
    """

    range: tuple
    sd: tuple
    ar: tuple
    tau2_point: dict = field(default_factory=dict)
    tau2_block: dict = field(default_factory=dict)
    beta: tuple = ()

    def __post_init__(self):
        for name in ("range", "sd", "ar", "beta"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        for name in ("tau2_point", "tau2_block"):
            object.__setattr__(self, name, {int(k): float(v) for k, v in getattr(self, name).items()})
        if not (len(self.range) == len(self.sd) == len(self.ar)):
            raise ValueError("range, sd and ar need one entry per field")
        if len(self.beta) != len(self.range) - 1:
            raise ValueError("beta needs one entry per covariate field")
        if not all(v > 0 for v in self.range + self.sd):
            raise ValueError("ranges and standard deviations must be positive")
        if not all(abs(a) < 1 for a in self.ar):
            raise ValueError("AR(1) coefficients must lie in (-1, 1)")
        if not all(v > 0 for v in (*self.tau2_point.values(), *self.tau2_block.values())):
            raise ValueError("noise variances must be positive")

    def matern(self, k: int) -> MaternParams:
        return MaternParams(self.range[k], self.sd[k])

    def ar1(self, k: int, T: int) -> Ar1Params:
        return Ar1Params(self.ar[k], T)


_TRANSFORMS = {
    "log": (np.log, np.exp),
    "arctanh": (np.arctanh, np.tanh),
    "identity": (lambda v: v, lambda u: u),
}


@dataclass(frozen=True)
class HyperLayout:
    """Ordered names of the hyperparameters of a model and their transforms.

    Names are ``range_k``, ``sd_k``, ``ar_k`` per field, ``tau2p_k`` and
    ``tau2g_k`` per observed point/block source, and ``beta_k`` per
    covariate.  Internal coordinates use log for positive quantities,
    arctanh for AR coefficients and the identity for ``beta``.
    """

    n_fields: int
    point_sources: tuple
    block_sources: tuple

    @property
    def names(self) -> list[str]:
        out = []
        for k in range(1, self.n_fields + 1):
            out += [f"range_{k}", f"sd_{k}", f"ar_{k}"]
        out += [f"tau2p_{v}" for v in self.point_sources]
        out += [f"tau2g_{v}" for v in self.block_sources]
        out += [f"beta_{k}" for k in range(1, self.n_fields)]
        return out

    @property
    def transforms(self) -> list[str]:
        return [_transform_of(n) for n in self.names]

    def __len__(self):
        return len(self.names)

    def to_array(self, h: HyperVector) -> np.ndarray:
        out = []
        for k in range(self.n_fields):
            out += [h.range[k], h.sd[k], h.ar[k]]
        out += [h.tau2_point[v] for v in self.point_sources]
        out += [h.tau2_block[v] for v in self.block_sources]
        out += list(h.beta)
        return np.array(out, dtype=float)

    def from_array(self, values) -> HyperVector:
        v = np.asarray(values, dtype=float)
        if v.shape != (len(self),):
            raise ValueError(f"expected {len(self)} hyperparameters, got shape {v.shape}")
        f = self.n_fields
        per = v[: 3 * f].reshape(f, 3)
        i = 3 * f
        tp = dict(zip(self.point_sources, v[i: i + len(self.point_sources)]))
        i += len(self.point_sources)
        tg = dict(zip(self.block_sources, v[i: i + len(self.block_sources)]))
        i += len(self.block_sources)
        return HyperVector(per[:, 0], per[:, 1], per[:, 2], tp, tg, v[i:])

    def to_internal(self, h: HyperVector) -> np.ndarray:
        return np.array([_TRANSFORMS[t][0](x) for t, x in zip(self.transforms, self.to_array(h))])

    def natural(self, u) -> np.ndarray:
        return np.array([_TRANSFORMS[t][1](x) for t, x in zip(self.transforms, np.asarray(u, float))])

    def from_internal(self, u) -> HyperVector:
        return self.from_array(self.natural(u))

    def log_jacobian(self, u) -> float:
        """``log |d natural / d internal|`` at internal coordinates ``u``."""
        total = 0.0
        for t, x in zip(self.transforms, np.asarray(u, dtype=float)):
            if t == "log":
                total += x
            elif t == "arctanh":
                total += math.log1p(-math.tanh(x) ** 2) if abs(x) < 18 else -2 * abs(x) + math.log(4)
        return total


def _transform_of(name: str) -> str:
    kind = name.rsplit("_", 1)[0]
    return {"ar": "arctanh", "beta": "identity"}.get(kind, "log")


# --------------------------------------------------------------------------
# Observation groups and design rows

@dataclass(frozen=True, eq=False)
class ObsGroup:
    """Rows of one variable on one support."""

    variable: int
    support: str  # "point" or "block"
    spatial: sp.csr_matrix  # (m x n)
    times: np.ndarray
    B: sp.csr_matrix  # (m x nT)
    L: sp.csr_matrix  # (m x n_linear)
    y: np.ndarray
    rows: np.ndarray  # positions within the stacked data vector

    @property
    def m(self) -> int:
        return len(self.y)


def _fixed_effect_rows(spec: FusionModelSpec, support: str, geometry, spatial, times) -> np.ndarray:
    """(m x l) fixed-effect values on the support of each row."""
    l = len(spec.fixed_effects)
    m = len(times)
    if l == 0 or m == 0:
        return np.zeros((m, l))
    if support == "point":
        return np.column_stack([fe(geometry, times) for fe in spec.fixed_effects])
    # blocks: apply the same vertex average to the fixed effect
    out = np.empty((m, l))
    verts = spec.mesh.vertices
    for t in np.unique(times):
        rows = np.flatnonzero(times == t)
        at_vertices = np.column_stack([fe(verts, np.full(len(verts), t)) for fe in spec.fixed_effects])
        out[rows] = spatial[rows] @ at_vertices
    return out


def _linear_rows(spec: FusionModelSpec, variable: int, fixed: np.ndarray) -> sp.csr_matrix:
    m = fixed.shape[0]
    L = np.zeros((m, spec.n_linear))
    L[:, variable - 1] = 1.0
    if variable == spec.response and fixed.shape[1]:
        L[:, len(spec.fields):] = fixed
    return sp.csr_matrix(L)


def support_operator(spec: FusionModelSpec, support: str, geometry) -> sp.csr_matrix:
    """Spatial (m x n) operator for point coordinates or block cells."""
    if support == "point":
        return point_weights(spec.mesh, geometry)
    if support == "block":
        return block_weights(spec.mesh, geometry, fallback=spec.block_fallback)
    raise ValueError(f"unknown support {support!r}")


def build_groups(spec: FusionModelSpec) -> list[ObsGroup]:
    """Split the observations into (variable, support) groups in a fixed order."""
    obs = spec.observations
    pvar, pxy, pt, py = obs.point_arrays
    bvar, bcells, bt, by = obs.block_arrays
    groups = []
    offset = 0
    for v in range(1, len(spec.fields) + 1):
        for support, var, geom, t, y in (("point", pvar, pxy, pt, py), ("block", bvar, bcells, bt, by)):
            sel = np.flatnonzero(var == v)
            if sel.size == 0:
                continue
            W = support_operator(spec, support, geom[sel])
            fixed = _fixed_effect_rows(spec, support, geom[sel], W, t[sel])
            groups.append(ObsGroup(
                variable=v, support=support, spatial=W, times=t[sel],
                B=expand_in_time(W, t[sel], spec.T), L=_linear_rows(spec, v, fixed),
                y=np.asarray(y[sel], dtype=float), rows=np.arange(offset, offset + sel.size)))
            offset += sel.size
    return groups


def field_scales(spec: FusionModelSpec, variable: int, h: HyperVector) -> dict[int, float]:
    """Weight of each field (0-based) in the linear predictor of ``variable``."""
    if variable == spec.response:
        scales = {k: h.beta[k] for k in range(spec.K)}
        scales[spec.K] = 1.0
        return scales
    return {variable - 1: 1.0}


def design_rows(spec: FusionModelSpec, h: HyperVector, support: str, geometry, times,
                variable: int | None = None) -> sp.csr_matrix:
    """Rows of the full design matrix for arbitrary targets.

    ``geometry`` holds point coordinates (m x 2) or block cells (m x 4)
    as ``xmin, xmax, ymin, ymax``.  The default variable is the response.
    """
    variable = spec.response if variable is None else variable
    times = np.asarray(times, dtype=np.int64)
    W = support_operator(spec, support, geometry)
    B = expand_in_time(W, times, spec.T)
    fixed = _fixed_effect_rows(spec, support, np.asarray(geometry, dtype=float), W, times)
    return _assemble_rows(spec, B, _linear_rows(spec, variable, fixed), field_scales(spec, variable, h))


def _assemble_rows(spec, B, L, scales) -> sp.csr_matrix:
    zero = sp.csr_matrix((B.shape[0], B.shape[1]))
    blocks = [scales[k] * B if k in scales else zero for k in range(len(spec.fields))]
    return sp.hstack(blocks + [L], format="csr")


@dataclass(frozen=True, eq=False)
class GaussianSystem:
    """Explicit Gaussian model for fixed hyperparameters.

    ``y = A x + e`` with ``x ~ N(0, Q^-1)`` and ``e ~ N(0, diag(1/D))``.
    """

    Q: sp.csc_matrix
    A: sp.csr_matrix
    D: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        N = self.Q.shape[0]
        if self.Q.shape != (N, N) or self.A.shape[1] != N:
            raise ValueError("precision and design dimensions disagree")
        if not (len(self.D) == len(self.y) == self.A.shape[0]):
            raise ValueError("design, noise and data lengths disagree")

    @property
    def posterior_precision(self) -> sp.csc_matrix:
        return (self.Q + self.A.T @ sp.diags(self.D) @ self.A).tocsc()

    @property
    def rhs(self) -> np.ndarray:
        return self.A.T @ (self.D * self.y)


# --------------------------------------------------------------------------
# Compiled model

class CompiledModel:
    """Hyperparameter-independent pieces of the Gaussian system.

    Parameters
    ----------
    spec : FusionModelSpec
        Model definition including the data.
    """

    def __init__(self, spec: FusionModelSpec):
        self.spec = spec
        mesh = spec.mesh
        self.n = mesh.n_vertices
        self.T = spec.T
        self.n_fields = len(spec.fields)
        self.block_size = self.n * self.T
        self.lin_offset = self.n_fields * self.block_size
        self.dim = self.lin_offset + spec.n_linear
        self.fem = assemble_fem(mesh)
        self.groups = build_groups(spec)
        self.n_obs = sum(g.m for g in self.groups)
        self.y = np.concatenate([g.y for g in self.groups]) if self.groups else np.zeros(0)
        self.layout = HyperLayout(
            self.n_fields,
            tuple(g.variable for g in self.groups if g.support == "point"),
            tuple(g.variable for g in self.groups if g.support == "block"),
        )

        space = precision_terms(self.fem)
        time = ar1_terms(self.T)
        N = self.dim
        prior_terms, self._prior_codes = [], []
        for f in range(self.n_fields):
            off = f * self.block_size
            for ti, tm in enumerate(time):
                for si, sm in enumerate(space):
                    prior_terms.append(_embed(sp.kron(tm, sm, format="coo"), off, off, N))
                    self._prior_codes.append((f, ti, si))
        lin = np.arange(self.lin_offset, N)
        self._linear_prior = sp.coo_matrix(
            (np.full(len(lin), 1.0 / LINEAR_PRIOR_VARIANCE), (lin, lin)), shape=(N, N))

        data_terms, self._data_codes = [], []
        self._group_bty, self._group_lty = [], []
        for gi, g in enumerate(self.groups):
            active = sorted(field_scales(spec, g.variable, _unit_hyper(self.n_fields)))
            BtB = (g.B.T @ g.B).tocoo()
            BtL = (g.B.T @ g.L).tocoo()
            LtL = (g.L.T @ g.L).tocoo()
            for a, i in enumerate(active):
                for j in active[a:]:
                    term = _embed(BtB, i * self.block_size, j * self.block_size, N)
                    if i != j:
                        term = _sym(term)
                    data_terms.append(term)
                    self._data_codes.append(("ff", gi, i, j))
                data_terms.append(_sym(_embed(BtL, i * self.block_size, self.lin_offset, N)))
                self._data_codes.append(("fl", gi, i, -1))
            data_terms.append(_embed(LtL, self.lin_offset, self.lin_offset, N))
            self._data_codes.append(("ll", gi, -1, -1))
            self._group_bty.append(g.B.T @ g.y)
            self._group_lty.append(g.L.T @ g.y)

        self._prior_sum = PatternSum(prior_terms + [self._linear_prior])
        self._post_sum = PatternSum(prior_terms + [self._linear_prior] + data_terms)
        self._space_factor = SparseCholesky.symbolic(self.fem.C + self.fem.G)
        self._log_mass = float(np.log(self.fem.C.diagonal()).sum())

    # -- coefficient bookkeeping ------------------------------------------
    def _prior_coefs(self, h: HyperVector) -> list[float]:
        space = [precision_coefficients(h.matern(f)) for f in range(self.n_fields)]
        time = [ar1_coefficients(h.ar[f]) for f in range(self.n_fields)]
        return [time[f][ti] * space[f][si] for f, ti, si in self._prior_codes] + [1.0]

    def noise_precisions(self, h: HyperVector) -> np.ndarray:
        """Per-group noise precision ``1 / tau2``."""
        return np.array([1.0 / (h.tau2_point if g.support == "point" else h.tau2_block)[g.variable]
                         for g in self.groups])

    def _data_coefs(self, h: HyperVector) -> list[float]:
        prec = self.noise_precisions(h)
        scales = [field_scales(self.spec, g.variable, h) for g in self.groups]
        out = []
        for kind, gi, i, j in self._data_codes:
            if kind == "ff":
                out.append(prec[gi] * scales[gi][i] * scales[gi][j])
            elif kind == "fl":
                out.append(prec[gi] * scales[gi][i])
            else:
                out.append(prec[gi])
        return out

    # -- matrices -----------------------------------------------------------
    def prior_precision(self, h: HyperVector) -> sp.csc_matrix:
        return self._prior_sum.evaluate(self._prior_coefs(h))

    def posterior_precision(self, h: HyperVector) -> sp.csc_matrix:
        return self._post_sum.evaluate(self._prior_coefs(h) + self._data_coefs(h))

    def posterior_pattern(self) -> sp.csc_matrix:
        return self._post_sum.pattern()

    def rhs(self, h: HyperVector) -> np.ndarray:
        """``A^T D y``."""
        b = np.zeros(self.dim)
        prec = self.noise_precisions(h)
        for gi, g in enumerate(self.groups):
            for k, s in field_scales(self.spec, g.variable, h).items():
                b[k * self.block_size:(k + 1) * self.block_size] += prec[gi] * s * self._group_bty[gi]
            b[self.lin_offset:] += prec[gi] * self._group_lty[gi]
        return b

    def design_matrix(self, h: HyperVector) -> sp.csr_matrix:
        rows = [_assemble_rows(self.spec, g.B, g.L, field_scales(self.spec, g.variable, h))
                for g in self.groups]
        if not rows:
            return sp.csr_matrix((0, self.dim))
        return sp.vstack(rows, format="csr")

    def noise_vector(self, h: HyperVector) -> np.ndarray:
        prec = self.noise_precisions(h)
        return np.concatenate([np.full(g.m, prec[gi]) for gi, g in enumerate(self.groups)]) \
            if self.groups else np.zeros(0)

    def noise_summary(self, h: HyperVector) -> tuple[float, float]:
        """``(log|D|, y^T D y)``."""
        prec = self.noise_precisions(h)
        logdet = sum(g.m * math.log(p) for g, p in zip(self.groups, prec))
        quad = sum(p * float(g.y @ g.y) for g, p in zip(self.groups, prec))
        return logdet, quad

    def prior_logdet(self, h: HyperVector) -> float:
        """log-determinant of the prior precision, computed field by field."""
        total = self.spec.n_linear * math.log(1.0 / LINEAR_PRIOR_VARIANCE)
        for f in range(self.n_fields):
            params = h.matern(f)
            tau2 = precision_coefficients(params)[2]
            K = (params.kappa ** 2 * self.fem.C + self.fem.G).tocsc()
            space = self.n * math.log(tau2) + 2.0 * self._space_factor.refactor(K).logdet() - self._log_mass
            total += self.T * space + self.n * ar1_logdet(h.ar[f], self.T)
        return total

    # -- derivatives with respect to internal hyperparameter coordinates ----
    def _index(self) -> dict[str, int]:
        return {name: i for i, name in enumerate(self.layout.names)}

    def coefficient_derivatives(self, h: HyperVector) -> np.ndarray:
        """``d c_i / d u_j`` for every posterior-precision term ``i``.

        ``u`` are the internal coordinates of :class:`HyperLayout` (log
        range, log sd, arctanh ar, log noise variances, raw beta).
        """
        idx = self._index()
        n_terms = len(self._prior_codes) + 1 + len(self._data_codes)
        out = np.zeros((n_terms, len(idx)))
        space = [precision_coefficients(h.matern(f)) for f in range(self.n_fields)]
        time = [ar1_coefficients(h.ar[f]) for f in range(self.n_fields)]
        range_slope = (-2.0, 0.0, 2.0)
        for row, (f, ti, si) in enumerate(self._prior_codes):
            c = time[f][ti] * space[f][si]
            a = h.ar[f]
            d_time = (2 * a / (1 - a * a), 2 * a / (1 - a * a), -(1 + a * a) / (1 - a * a))[ti]
            out[row, idx[f"range_{f + 1}"]] = c * range_slope[si]
            out[row, idx[f"sd_{f + 1}"]] = -2.0 * c
            out[row, idx[f"ar_{f + 1}"]] = space[f][si] * d_time
        base = len(self._prior_codes) + 1
        prec = self.noise_precisions(h)
        for r, (kind, gi, i, j) in enumerate(self._data_codes):
            g = self.groups[gi]
            noise = idx[("tau2p_" if g.support == "point" else "tau2g_") + str(g.variable)]
            scales = field_scales(self.spec, g.variable, h)
            copies = g.variable == self.spec.response
            if kind == "ff":
                out[base + r, noise] = -prec[gi] * scales[i] * scales[j]
                if copies and i < self.spec.K:
                    out[base + r, idx[f"beta_{i + 1}"]] += prec[gi] * scales[j]
                if copies and j < self.spec.K:
                    out[base + r, idx[f"beta_{j + 1}"]] += prec[gi] * scales[i]
            elif kind == "fl":
                out[base + r, noise] = -prec[gi] * scales[i]
                if copies and i < self.spec.K:
                    out[base + r, idx[f"beta_{i + 1}"]] = prec[gi]
            else:
                out[base + r, noise] = -prec[gi]
        return out

    def data_gradient(self, h: HyperVector, mean: np.ndarray) -> np.ndarray:
        """Gradient of ``log|D| - y^T D y + 2 b^T mean`` with ``mean`` held fixed."""
        idx = self._index()
        out = np.zeros(len(idx))
        prec = self.noise_precisions(h)
        lin = mean[self.lin_offset:]
        for gi, g in enumerate(self.groups):
            noise = idx[("tau2p_" if g.support == "point" else "tau2g_") + str(g.variable)]
            scales = field_scales(self.spec, g.variable, h)
            proj = {k: float(self._group_bty[gi] @ mean[k * self.block_size:(k + 1) * self.block_size])
                    for k in scales}
            b_dot = sum(s * proj[k] for k, s in scales.items()) + float(self._group_lty[gi] @ lin)
            out[noise] += -g.m + prec[gi] * float(g.y @ g.y) - 2.0 * prec[gi] * b_dot
            if g.variable == self.spec.response:
                for k in range(self.spec.K):
                    out[idx[f"beta_{k + 1}"]] += 2.0 * prec[gi] * proj[k]
        return out

    def prior_logdet_gradient(self, h: HyperVector) -> np.ndarray:
        idx = self._index()
        out = np.zeros(len(idx))
        mass = self.fem.C.diagonal()
        for f in range(self.n_fields):
            params = h.matern(f)
            k2 = params.kappa ** 2
            K = (k2 * self.fem.C + self.fem.G).tocsc()
            trace = float(mass @ self._space_factor.refactor(K).inverse_diagonal())
            out[idx[f"range_{f + 1}"]] = self.T * (2.0 * self.n - 4.0 * k2 * trace)
            out[idx[f"sd_{f + 1}"]] = -2.0 * self.T * self.n
            out[idx[f"ar_{f + 1}"]] = 2.0 * h.ar[f] * self.n * (self.T - 1)
        return out

    def term_contract(self, slot_values) -> np.ndarray:
        """Per-term contraction of posterior-precision terms with union-slot values."""
        return self._post_sum.contract(slot_values)

    @property
    def union_entries(self) -> tuple[np.ndarray, np.ndarray]:
        return self._post_sum.union_rows, self._post_sum.union_cols

    def system(self, h: HyperVector) -> GaussianSystem:
        return GaussianSystem(self.prior_precision(h), self.design_matrix(h), self.noise_vector(h), self.y)

    # -- latent vector helpers ----------------------------------------------
    def field_block(self, x: np.ndarray, k: int) -> np.ndarray:
        """Values of field ``k`` (0-based) as an (T x n) array."""
        return np.asarray(x)[k * self.block_size:(k + 1) * self.block_size].reshape(self.T, self.n)

    def linear_block(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x)[self.lin_offset:]

    @property
    def linear_names(self) -> list[str]:
        names = [f"alpha_{k}" for k in range(1, self.n_fields + 1)]
        return names + [f"theta_{i}" for i in range(1, len(self.spec.fixed_effects) + 1)]


def _unit_hyper(n_fields: int) -> HyperVector:
    one = (1.0,) * n_fields
    return HyperVector(one, one, (0.0,) * n_fields, beta=(1.0,) * (n_fields - 1))


def _embed(M, r0: int, c0: int, N: int) -> sp.coo_matrix:
    M = sp.coo_matrix(M)
    return sp.coo_matrix((M.data, (M.row + r0, M.col + c0)), shape=(N, N))


def _sym(M: sp.coo_matrix) -> sp.coo_matrix:
    return sp.coo_matrix((np.concatenate([M.data, M.data]),
                          (np.concatenate([M.row, M.col]), np.concatenate([M.col, M.row]))),
                         shape=M.shape)


def assemble_system(spec: FusionModelSpec, h: HyperVector) -> GaussianSystem:
    """Explicit Gaussian system ``(Q, A, D, y)`` for hyperparameters ``h``."""
    return CompiledModel(spec).system(h)


def linear_predictor(spec: FusionModelSpec, h: HyperVector, latents, target) -> float:
    """Evaluate ``alpha + theta^T x + sum_k beta_k eta_k + eta_{K+1}`` on a target.

    ``target`` is a point-like record (``location``, ``time_index``) or a
    block-like record (``cell``, ``time_index``).  The variable defaults to
    the response unless the record carries a ``variable_id``.
    """
    variable = getattr(target, "variable_id", None)
    if hasattr(target, "cell"):
        row = design_rows(spec, h, "block", np.array([tuple(target.cell)]), [target.time_index], variable)
    else:
        row = design_rows(spec, h, "point", np.array([tuple(target.location)]), [target.time_index], variable)
    latents = np.asarray(latents, dtype=float)
    if row.shape[1] != latents.shape[0]:
        raise ValueError(f"latent vector has length {latents.shape[0]}, expected {row.shape[1]}")
    return float((row @ latents)[0])

