"""Stationary AR(1) dynamics and separable space-time precisions."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .spde import SpatialPrecision


@dataclass(frozen=True)
class Ar1Params:
    a: float
    T: int

    def __post_init__(self):
        if not abs(self.a) < 1:
            raise ValueError(f"AR(1) coefficient must satisfy |a| < 1, got {self.a}")
        if int(self.T) != self.T or self.T < 1:
            raise ValueError(f"number of time points must be a positive integer, got {self.T}")


@dataclass(frozen=True, eq=False)
class SpatioTemporalPrecision:
    """Precision over node values stacked time-major (all nodes at t=1 first)."""

    Q_st: sp.csc_matrix
    n: int
    T: int


def ar1_terms(T: int):
    """Fixed matrices ``(I, M, N)`` with ``Q_time = (I + a^2 M - a N) / (1 - a^2)``.

    ``M`` is the identity without its two corner entries and ``N`` has ones
    on the first off-diagonals.
    """
    eye = sp.identity(T, format="csc")
    inner = np.ones(T)
    inner[0] = inner[-1] = 0.0
    if T == 1:
        # a single stationary draw has precision 1 = (1 - a^2) / (1 - a^2)
        inner[0] = -1.0
    M = sp.diags(inner, format="csc")
    off = np.ones(max(T - 1, 0))
    N = sp.diags([off, off], [-1, 1], shape=(T, T), format="csc")
    return eye, M, N


def ar1_coefficients(a: float) -> tuple[float, float, float]:
    s = 1.0 / (1.0 - a * a)
    return s, a * a * s, -a * s


def ar1_precision(params: Ar1Params) -> sp.csc_matrix:
    """Tridiagonal precision of a unit-variance stationary AR(1) sequence."""
    c = ar1_coefficients(params.a)
    eye, M, N = ar1_terms(params.T)
    return (c[0] * eye + c[1] * M + c[2] * N).tocsc()


def ar1_logdet(a: float, T: int) -> float:
    return -(T - 1) * math.log1p(-a * a)


def kron_assemble(Q_time, Q_space) -> SpatioTemporalPrecision:
    if isinstance(Q_space, SpatialPrecision):
        Q_space = Q_space.Q
    Q_time = sp.csc_matrix(Q_time)
    T, n = Q_time.shape[0], Q_space.shape[0]
    return SpatioTemporalPrecision(sp.kron(Q_time, Q_space, format="csc"), n, T)


def simulate_ar1_path(spatial_samples, a: float) -> list[np.ndarray]:
    """Run ``eta_t = a eta_{t-1} + sqrt(1 - a^2) mu_t`` from ``eta_1 = mu_1``."""
    if not abs(a) < 1:
        raise ValueError(f"AR(1) coefficient must satisfy |a| < 1, got {a}")
    innov = [np.asarray(m, dtype=float) for m in spatial_samples]
    if not innov:
        return []
    scale = math.sqrt(1.0 - a * a)
    out = [innov[0].copy()]
    for mu in innov[1:]:
        out.append(a * out[-1] + scale * mu)
    return out
