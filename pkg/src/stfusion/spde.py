"""Matérn fields through the SPDE/GMRF representation (alpha = 2)."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.special import gamma, kv

from .geometry import FemMatrices
from .linalg import SparseCholesky


@dataclass(frozen=True)
class MaternParams:
    range: float
    sd: float
    nu: float = 1.0

    def __post_init__(self):
        for name in ("range", "sd", "nu"):
            value = getattr(self, name)
            if not (np.isfinite(value) and value > 0):
                raise ValueError(f"Matérn {name} must be positive, got {value}")

    @property
    def kappa(self) -> float:
        return kappa_from_range(self.range, self.nu)


class UnsupportedSmoothnessError(ValueError):
    pass


def kappa_from_range(rho: float, nu: float = 1.0) -> float:
    """Scale parameter giving correlation near 0.1 at distance ``rho``."""
    if not (rho > 0 and nu > 0):
        raise ValueError("range and smoothness must be positive")
    return math.sqrt(8.0 * nu) / rho


def matern_correlation(d, params: MaternParams):
    """Matérn correlation at distance(s) ``d``; equals 1 at ``d = 0``."""
    d = np.asarray(d, dtype=float)
    if np.any(d < 0):
        raise ValueError("distances must be non-negative")
    nu = params.nu
    z = params.kappa * d
    with np.errstate(invalid="ignore", over="ignore"):
        r = (2.0 ** (1.0 - nu) / gamma(nu)) * z**nu * kv(nu, z)
    r = np.where(z == 0, 1.0, r)
    # kv underflows to 0 for very large arguments
    r = np.where(np.isfinite(r), r, 0.0)
    return r if r.ndim else float(r)


def matern_marginal_variance(kappa: float, nu: float = 1.0, d_dim: int = 2) -> float:
    """Marginal variance of the unit-noise SPDE solution."""
    if d_dim != 2:
        raise ValueError("only two-dimensional domains are supported")
    if not (kappa > 0 and nu > 0):
        raise ValueError("kappa and nu must be positive")
    return gamma(nu) / (gamma(nu + d_dim / 2) * (4 * math.pi) ** (d_dim / 2) * kappa ** (2 * nu))


def precision_terms(fem: FemMatrices):
    """The three fixed matrices the alpha = 2 precision is a combination of.

    ``Q = tau2 * (kappa**4 * C + 2 * kappa**2 * G + G C^-1 G)``.
    """
    Cinv = sp.diags(1.0 / fem.C.diagonal())
    GCG = (fem.G @ Cinv @ fem.G).tocsc()
    return fem.C.tocsc(), fem.G.tocsc(), GCG


def precision_coefficients(params: MaternParams) -> tuple[float, float, float]:
    """Weights of ``(C, G, G C^-1 G)`` for the given range and sd."""
    if params.nu != 1.0:
        raise UnsupportedSmoothnessError(f"only nu = 1 is supported, got {params.nu}")
    k2 = params.kappa**2
    tau2 = matern_marginal_variance(params.kappa, params.nu) / params.sd**2
    return tau2 * k2 * k2, 2.0 * tau2 * k2, tau2


@dataclass(frozen=True, eq=False)
class SpatialPrecision:
    Q: sp.csc_matrix
    params: MaternParams
    fem: FemMatrices

    @property
    def n(self) -> int:
        return self.Q.shape[0]

    def logdet(self) -> float:
        return spatial_logdet(self.fem, self.params)


def build_precision(fem: FemMatrices, params: MaternParams) -> SpatialPrecision:
    """Sparse Matérn precision on the mesh behind ``fem``."""
    c = precision_coefficients(params)
    C, G, GCG = precision_terms(fem)
    Q = (c[0] * C + c[1] * G + c[2] * GCG).tocsc()
    Q = 0.5 * (Q + Q.T)
    return SpatialPrecision(Q.tocsc(), params, fem)


def spatial_logdet(fem: FemMatrices, params: MaternParams) -> float:
    """log|Q| using ``Q = tau2 K C^-1 K`` with ``K = kappa^2 C + G``."""
    c = precision_coefficients(params)
    tau2 = c[2]
    K = (params.kappa**2 * fem.C + fem.G).tocsc()
    n = fem.n
    return n * math.log(tau2) + 2.0 * SparseCholesky(K).logdet() - float(np.log(fem.C.diagonal()).sum())


def sample_field(prec: SpatialPrecision, seed, size: int | None = None) -> np.ndarray:
    """Draw from N(0, Q^-1) by a backward solve with the Cholesky factor.

    ``seed`` may be an int or a ``numpy.random.Generator``.  With ``size``
    the result has shape (size, n).
    """
    rng = np.random.default_rng(seed)
    factor = SparseCholesky(prec.Q)
    if size is None:
        return factor.solve_Lt(rng.standard_normal(prec.n))
    z = rng.standard_normal((prec.n, size))
    return factor.solve_Lt(z).T
