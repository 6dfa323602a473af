"""Prior densities for hyperparameters, on their natural scale."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq


def _check_tail(alpha):
    if not 0 < alpha < 1:
        raise ValueError(f"tail probability must lie in (0, 1), got {alpha}")


@dataclass(frozen=True)
class Prior:
    kind = "abstract"

    def logpdf(self, value: float) -> float:
        raise NotImplementedError

    @property
    def is_fixed(self) -> bool:
        return False


@dataclass(frozen=True)
class PcRange(Prior):
    """P(range < range0) = alpha; an inverse-exponential density on the range."""

    range0: float
    alpha: float
    kind = "pc_range"

    def __post_init__(self):
        _check_tail(self.alpha)
        if not self.range0 > 0:
            raise ValueError("range0 must be positive")

    @property
    def rate(self) -> float:
        return -math.log(self.alpha) * self.range0

    def logpdf(self, value):
        if not value > 0:
            return -math.inf
        lam = self.rate
        return math.log(lam) - 2.0 * math.log(value) - lam / value


@dataclass(frozen=True)
class PcSd(Prior):
    """P(sd > sd0) = alpha; exponential on the standard deviation."""

    sd0: float
    alpha: float
    kind = "pc_sd"

    def __post_init__(self):
        _check_tail(self.alpha)
        if not self.sd0 > 0:
            raise ValueError("sd0 must be positive")

    @property
    def rate(self) -> float:
        return -math.log(self.alpha) / self.sd0

    def logpdf(self, value):
        if value < 0:
            return -math.inf
        return math.log(self.rate) - self.rate * value


@dataclass(frozen=True)
class PcNoiseVariance(Prior):
    """``PcSd`` placed on the square root of a noise variance."""

    sd0: float
    alpha: float
    kind = "pc_noise"

    def __post_init__(self):
        _check_tail(self.alpha)
        if not self.sd0 > 0:
            raise ValueError("sd0 must be positive")

    def logpdf(self, value):
        if not value > 0:
            return -math.inf
        sd = math.sqrt(value)
        # d sd / d variance = 1 / (2 sd)
        return PcSd(self.sd0, self.alpha).logpdf(sd) - math.log(2.0 * sd)


@dataclass(frozen=True)
class PcAr1(Prior):
    """PC prior on an AR(1) correlation.

    With ``base=0`` the distance is ``sqrt(-log(1 - a^2))`` and
    ``P(|a| > threshold) = alpha``.  With ``base=1`` the distance is
    ``sqrt(1 - a)`` and ``P(a > threshold) = alpha``.
    """

    threshold: float
    alpha: float
    base: int = 0
    kind = "pc_ar1_cor"

    def __post_init__(self):
        _check_tail(self.alpha)
        if not -1 < self.threshold < 1:
            raise ValueError("threshold must lie in (-1, 1)")
        if self.base not in (0, 1):
            raise ValueError("base must be 0 or 1")
        if self.base == 0 and self.threshold <= 0:
            raise ValueError("base-0 threshold must be positive")

    @property
    def rate(self) -> float:
        if self.base == 0:
            return -math.log(self.alpha) / math.sqrt(-math.log1p(-self.threshold**2))
        dmax, du = math.sqrt(2.0), math.sqrt(1.0 - self.threshold)

        def excess(lam):
            return -math.expm1(-lam * du) / -math.expm1(-lam * dmax) - self.alpha

        if excess(1e-8) * excess(1e3) > 0:
            raise ValueError("no rate satisfies the requested base-1 tail probability")
        return brentq(excess, 1e-8, 1e3, xtol=1e-12)

    def logpdf(self, value):
        a = float(value)
        if not -1 < a < 1:
            return -math.inf
        lam = self.rate
        if self.base == 0:
            d = math.sqrt(-math.log1p(-a * a))
            jac = 1.0 if d == 0 else abs(a) / ((1.0 - a * a) * d)
            return math.log(0.5 * lam) - lam * d + math.log(jac)
        d = math.sqrt(1.0 - a)
        norm = -math.expm1(-lam * math.sqrt(2.0))
        return math.log(lam / norm) - lam * d - math.log(2.0 * d)


@dataclass(frozen=True)
class Normal(Prior):
    mean: float = 0.0
    variance: float = 10.0
    kind = "normal"

    def __post_init__(self):
        if not self.variance > 0:
            raise ValueError("variance must be positive")

    def logpdf(self, value):
        return -0.5 * (math.log(2 * math.pi * self.variance) + (value - self.mean) ** 2 / self.variance)


@dataclass(frozen=True)
class LogNormal(Prior):
    meanlog: float = 0.0
    sdlog: float = 1.0
    kind = "lognormal"

    def __post_init__(self):
        if not self.sdlog > 0:
            raise ValueError("sdlog must be positive")

    def logpdf(self, value):
        if not value > 0:
            return -math.inf
        z = (math.log(value) - self.meanlog) / self.sdlog
        return -0.5 * z * z - math.log(value * self.sdlog * math.sqrt(2 * math.pi))


@dataclass(frozen=True)
class Fixed(Prior):
    value: float
    kind = "fixed"

    @property
    def is_fixed(self) -> bool:
        return True

    def logpdf(self, value):
        return 0.0


PRIOR_KINDS = {
    "pc_range": PcRange,
    "pc_sd": PcSd,
    "pc_noise": PcNoiseVariance,
    "pc_ar1_cor": PcAr1,
    "normal": Normal,
    "lognormal": LogNormal,
    "fixed": Fixed,
}


def make_prior(kind: str, **params) -> Prior:
    try:
        cls = PRIOR_KINDS[kind]
    except KeyError:
        raise ValueError(f"unknown prior kind {kind!r}; expected one of {sorted(PRIOR_KINDS)}") from None
    return cls(**params)


def pc_prior_logdensity(kind: str, params: dict, value: float) -> float:
    """Log density of ``value`` under the prior ``kind`` with ``params``."""
    return make_prior(kind, **params).logpdf(value)


def prior_cdf_check(prior: Prior, lo: float, hi: float, n: int = 200001) -> float:
    """Probability mass on ``[lo, hi]`` by trapezoidal quadrature of the density."""
    x = np.linspace(lo, hi, n)
    dens = np.exp([prior.logpdf(v) for v in x])
    return float(np.trapezoid(dens, x))
