"""Hyperparameter and latent posterior inference for the Gaussian fusion model.

For fixed hyperparameters the latent vector has a Gaussian posterior, so
the marginal likelihood of the hyperparameters is available in closed
form through two sparse Cholesky factorisations.  The hyperparameter
posterior is explored around its mode with a central composite design and
latent marginals are Gaussian mixtures over the design points.
"""
from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
import scipy.sparse as sp
from scipy.linalg import hadamard
from scipy.optimize import minimize
from scipy.special import ndtr, ndtri

from .linalg import NotPositiveDefiniteError, SparseCholesky
from .model import CompiledModel, FusionModelSpec, GaussianSystem, HyperVector
from .priors import Fixed, Normal, PcAr1, PcNoiseVariance, PcRange, PcSd, Prior

log = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)


# --------------------------------------------------------------------------
# Priors

@dataclass
class PriorSpec:
    """One prior per hyperparameter name (see :class:`HyperLayout`)."""

    priors: Mapping[str, Prior]

    def __getitem__(self, name: str) -> Prior:
        return self.priors[name]

    def updated(self, overrides: Mapping[str, Prior]) -> "PriorSpec":
        unknown = set(overrides) - set(self.priors)
        if unknown:
            raise KeyError(f"no hyperparameter(s) named {sorted(unknown)}")
        return PriorSpec({**self.priors, **overrides})


def variable_scales(model: CompiledModel) -> dict[int, float]:
    """Standard deviation of all observations of each variable (1 if unobserved)."""
    out = {}
    for v in range(1, model.n_fields + 1):
        ys = [g.y for g in model.groups if g.variable == v]
        y = np.concatenate(ys) if ys else np.zeros(0)
        sd = float(np.std(y)) if y.size > 1 else 0.0
        out[v] = sd if sd > 0 else 1.0
    return out


def default_priors(model: CompiledModel) -> PriorSpec:
    """Weakly informative defaults scaled to the domain and the data.

    Range: P(range < 0.1 x domain diagonal) = 0.05.  Field sd:
    P(sd > 2 x data sd) = 0.05.  Noise sd: P(sd > data sd) = 0.05.
    AR(1): P(|a| > 0.8) = 0.5 (fixed at 0 when there is one time point).
    Copy coefficients: N(0, 10).
    """
    diag = model.spec.mesh.interior_bbox.diagonal
    scale = variable_scales(model)
    pri: dict[str, Prior] = {}
    for k in range(1, model.n_fields + 1):
        pri[f"range_{k}"] = PcRange(0.1 * diag, 0.05)
        pri[f"sd_{k}"] = PcSd(2.0 * scale[k], 0.05)
        pri[f"ar_{k}"] = PcAr1(0.8, 0.5) if model.T > 1 else Fixed(0.0)
    for v in model.layout.point_sources:
        pri[f"tau2p_{v}"] = PcNoiseVariance(scale[v], 0.05)
    for v in model.layout.block_sources:
        pri[f"tau2g_{v}"] = PcNoiseVariance(scale[v], 0.05)
    for k in range(1, model.n_fields):
        pri[f"beta_{k}"] = Normal(0.0, 10.0)
    return PriorSpec(pri)


# --------------------------------------------------------------------------
# Objective

class NumericalFailure(RuntimeError):
    """Raised when no hyperparameter value gives a usable factorisation."""


class Posterior:
    """Log marginal likelihood and log posterior of the hyperparameters.

    Optimisation coordinates (``u``) are the internal coordinates of the
    free (non-fixed) hyperparameters.

    Parameters
    ----------
    model : CompiledModel or FusionModelSpec
    priors : PriorSpec, optional
        Defaults to :func:`default_priors`.
    dense_threshold : int
        Latent dimensions up to this size use dense Cholesky factors.
    """

    def __init__(self, model, priors: PriorSpec | None = None, dense_threshold: int = 0):
        if isinstance(model, FusionModelSpec):
            model = CompiledModel(model)
        self.model = model
        self.layout = model.layout
        self.priors = priors if priors is not None else default_priors(model)
        missing = set(self.layout.names) - set(self.priors.priors)
        if missing:
            raise KeyError(f"no prior for {sorted(missing)}")
        self._list = [self.priors[n] for n in self.layout.names]
        self.free = np.array([not p.is_fixed for p in self._list])
        self.free_names = [n for n, f in zip(self.layout.names, self.free) if f]
        dense = True if model.dim <= dense_threshold else None
        self._factor = SparseCholesky.symbolic(model.posterior_pattern(), dense=dense)
        self._selinv_pattern = None
        self._selinv_positions = None
        self.n_evals = 0

    # coordinates -------------------------------------------------------------
    def full_internal(self, u_free) -> np.ndarray:
        full = np.empty(len(self.layout))
        full[self.free] = u_free
        fixed_vals = [p.value for p in self._list if p.is_fixed]
        if fixed_vals:
            nat = np.zeros(len(self.layout))
            nat[~self.free] = fixed_vals
            full[~self.free] = self._internal_of(nat)[~self.free]
        return full

    def _internal_of(self, natural) -> np.ndarray:
        return self.layout.to_internal(self.layout.from_array(_clip_natural(self.layout, natural)))

    def to_free(self, h: HyperVector) -> np.ndarray:
        return self.layout.to_internal(self.with_fixed(h))[self.free]

    def with_fixed(self, h: HyperVector) -> HyperVector:
        """``h`` with fixed-prior entries replaced by their fixed values."""
        nat = self.layout.to_array(h)
        for i, p in enumerate(self._list):
            if p.is_fixed:
                nat[i] = p.value
        return self.layout.from_array(nat)

    def hyper(self, u_free) -> HyperVector:
        return self.layout.from_internal(self.full_internal(u_free))

    # densities ----------------------------------------------------------------
    def log_prior(self, h: HyperVector) -> float:
        """Log prior density of ``h`` on the natural scale."""
        nat = self.layout.to_array(h)
        return float(sum(p.logpdf(v) for p, v in zip(self._list, nat) if not p.is_fixed))

    def factorize(self, h: HyperVector) -> SparseCholesky:
        return self._factor.refactor(self.model.posterior_precision(h))

    def log_marginal_likelihood(self, h: HyperVector, return_mean: bool = False):
        """``log p(y | h)``, optionally with the conditional latent mean."""
        m = self.model
        factor = self.factorize(h)
        b = m.rhs(h)
        mean = factor.solve(b)
        logdet_d, quad = m.noise_summary(h)
        value = 0.5 * (m.prior_logdet(h) + logdet_d - factor.logdet()
                       - m.n_obs * LOG_2PI - quad + float(b @ mean))
        self.n_evals += 1
        return (value, mean) if return_mean else value

    def lml_gradient(self, h: HyperVector):
        """``(log p(y | h), gradient)`` in full internal coordinates."""
        m = self.model
        factor = self.factorize(h)
        b = m.rhs(h)
        mean = factor.solve(b)
        logdet_d, quad = m.noise_summary(h)
        value = 0.5 * (m.prior_logdet(h) + logdet_d - factor.logdet()
                       - m.n_obs * LOG_2PI - quad + float(b @ mean))
        selinv = factor.selected_inverse()
        if self._selinv_pattern is None or not selinv.same_pattern(self._selinv_pattern):
            rows, cols = m.union_entries
            self._selinv_pattern = selinv
            self._selinv_positions = None if selinv._dense is not None else selinv.positions(rows, cols)
        rows, cols = m.union_entries
        sigma = selinv.entries(rows, cols, self._selinv_positions)
        traces = m.term_contract(sigma) + m.term_contract(mean[rows] * mean[cols])
        dc = m.coefficient_derivatives(h)
        grad = 0.5 * (m.prior_logdet_gradient(h) + m.data_gradient(h, mean) - traces @ dc)
        self.n_evals += 1
        return value, grad

    def _prior_and_jacobian(self, full) -> float:
        h = self.layout.from_internal(full)
        return self.log_prior(h) + float(sum(_jac_terms(self.layout.transforms, full)[self.free]))

    def log_posterior_and_gradient(self, u_free):
        """Log posterior and its gradient in optimisation coordinates."""
        full = self.full_internal(np.asarray(u_free, dtype=float))
        h = self.layout.from_internal(full)
        value, grad = self.lml_gradient(h)
        value += self._prior_and_jacobian(full)
        step = 1e-6
        for i in np.flatnonzero(self.free):
            up, down = full.copy(), full.copy()
            up[i] += step
            down[i] -= step
            grad[i] += (self._prior_and_jacobian(up) - self._prior_and_jacobian(down)) / (2 * step)
        return value, grad[self.free]

    def log_posterior(self, u_free) -> float:
        """Unnormalised log posterior density in optimisation coordinates."""
        u_free = np.asarray(u_free, dtype=float)
        if not np.all(np.isfinite(u_free)):
            return -math.inf
        full = self.full_internal(u_free)
        try:
            h = self.layout.from_internal(full)
            lp = self.log_prior(h)
            if not math.isfinite(lp):
                return -math.inf
            value = self.log_marginal_likelihood(h) + lp
        except (NotPositiveDefiniteError, ValueError, FloatingPointError, OverflowError) as exc:
            log.debug("objective infeasible at %s: %s", np.round(u_free, 4), exc)
            return -math.inf
        jac = sum(_jac_terms(self.layout.transforms, full)[self.free])
        return value + jac if math.isfinite(value) else -math.inf


def _jac_terms(transforms, full) -> np.ndarray:
    out = np.zeros(len(full))
    for i, (t, x) in enumerate(zip(transforms, full)):
        if t == "log":
            out[i] = x
        elif t == "arctanh":
            out[i] = math.log(4.0) - 2.0 * abs(x) - 2.0 * math.log1p(math.exp(-2.0 * abs(x)))
    return out


def _clip_natural(layout, natural) -> np.ndarray:
    nat = np.array(natural, dtype=float)
    for i, t in enumerate(layout.transforms):
        if t == "log":
            nat[i] = max(nat[i], 1e-300)
        elif t == "arctanh":
            nat[i] = np.clip(nat[i], -1 + 1e-12, 1 - 1e-12)
    return nat


def log_marginal_likelihood(spec: FusionModelSpec, h: HyperVector, priors: PriorSpec | None = None,
                            include_prior: bool = True) -> float:
    """Exact ``log p(y | h)``, plus ``log p(h)`` on the natural scale if requested.

    Returns ``-inf`` when the posterior precision cannot be factorised.
    """
    post = Posterior(spec, priors)
    try:
        value = post.log_marginal_likelihood(h)
    except NotPositiveDefiniteError as exc:
        log.warning("factorisation failed: %s", exc)
        return -math.inf
    return value + post.log_prior(h) if include_prior else value


# --------------------------------------------------------------------------
# Conditional latent posterior

def conditional_latent_posterior(system: GaussianSystem, dense_threshold: int = 0):
    """Mean and marginal sd of ``x | y`` for an explicit Gaussian system.

    Marginal variances come from the selected inverse of the sparse
    factor, or from a dense inverse when the dimension is at most
    ``dense_threshold``.
    """
    Qp = system.posterior_precision
    if Qp.shape[0] <= dense_threshold:
        dense = Qp.toarray()
        try:
            cov = np.linalg.inv(dense)
            np.linalg.cholesky(dense)
        except np.linalg.LinAlgError as exc:
            raise NotPositiveDefiniteError(str(exc)) from None
        return cov @ system.rhs, np.sqrt(np.clip(np.diag(cov), 0, None))
    factor = SparseCholesky(Qp)
    return factor.solve(system.rhs), np.sqrt(np.clip(factor.inverse_diagonal(), 0, None))


# --------------------------------------------------------------------------
# Mode search

@dataclass
class ModeResult:
    hyper: HyperVector
    u: np.ndarray  # free optimisation coordinates
    log_posterior: float
    converged: bool
    n_evals: int
    message: str = ""
    method: str = "quasi-newton"


def initial_hyper(model: CompiledModel) -> HyperVector:
    """Starting values derived from the domain size and the data spread."""
    scale = variable_scales(model)
    diag = model.spec.mesh.interior_bbox.diagonal
    f = model.n_fields
    return HyperVector(
        range=[0.3 * diag] * f,
        sd=[0.7 * scale[k] for k in range(1, f + 1)],
        ar=[0.5 if model.T > 1 else 0.0] * f,
        tau2_point={v: 0.1 * scale[v] ** 2 for v in model.layout.point_sources},
        tau2_block={v: 0.2 * scale[v] ** 2 for v in model.layout.block_sources},
        beta=[0.0] * (f - 1),
    )


def _initial_simplex(names, u0, step=0.5, beta_step=0.3):
    steps = np.array([beta_step if n.startswith("beta") else step for n in names])
    simplex = np.tile(u0, (len(u0) + 1, 1))
    simplex[1:] += np.diag(steps)
    return simplex


def _nelder_mead(posterior, u, max_evals, xatol, fatol, restarts):
    def objective(x):
        v = posterior.log_posterior(x)
        return -v if math.isfinite(v) else 1e300

    evals, converged, message = 0, False, ""
    step = 0.5
    for attempt in range(restarts + 1):
        budget = max_evals - evals
        if budget <= len(u) + 1:
            break
        res = minimize(objective, u, method="Nelder-Mead", options={
            "maxfev": budget, "xatol": xatol, "fatol": fatol, "adaptive": True,
            "initial_simplex": _initial_simplex(posterior.free_names, u, step, 0.6 * step)})
        evals += res.nfev
        moved = np.max(np.abs(res.x - u))
        u = res.x
        converged, message = bool(res.success), str(res.message)
        if not converged or (attempt > 0 and moved < 10 * xatol):
            break
        # rebuild a smaller simplex around the best point
        step = 0.1
    return u, converged, evals, message


def _quasi_newton(posterior, u, max_evals, gtol):
    calls = [0]

    def objective(x):
        calls[0] += 1
        try:
            v, g = posterior.log_posterior_and_gradient(x)
        except (NotPositiveDefiniteError, ValueError, FloatingPointError, OverflowError):
            v, g = -math.inf, None
        if not math.isfinite(v) or g is None or not np.all(np.isfinite(g)):
            return 1e300, np.zeros_like(x)
        return -v, -g

    res = minimize(objective, u, jac=True, method="BFGS", options={"gtol": gtol, "maxiter": max_evals})
    u = res.x
    _, grad = objective(u)
    converged = bool(res.success) or float(np.max(np.abs(grad))) < 10 * gtol
    return u, converged, calls[0], str(res.message)


def optimize_mode(posterior: Posterior, init: HyperVector | None = None, *, method: str = "quasi-newton",
                  max_evals: int = 4000, xatol: float = 1e-4, fatol: float = 1e-6, gtol: float = 1e-3,
                  restarts: int = 1) -> ModeResult:
    """Locate the posterior mode of the hyperparameters.

    ``method="quasi-newton"`` runs BFGS on the analytic gradient and stops
    when every gradient component is below ``gtol``.  ``method="nelder-mead"``
    is derivative free; it stops when the simplex is smaller than ``xatol``
    and the objective spread is below ``fatol``, and is restarted around
    the best point ``restarts`` times.  Exhausting ``max_evals`` returns the
    best point with ``converged=False``.
    """
    init = init if init is not None else initial_hyper(posterior.model)
    u = posterior.to_free(init)
    if not math.isfinite(posterior.log_posterior(u)):
        raise NumericalFailure("the objective is not finite at the initial hyperparameters")
    if u.size == 0:
        return ModeResult(posterior.hyper(u), u, posterior.log_posterior(u), True, 1, "", method)
    if method == "quasi-newton":
        u, converged, evals, message = _quasi_newton(posterior, u, max_evals, gtol)
    elif method == "nelder-mead":
        u, converged, evals, message = _nelder_mead(posterior, u, max_evals, xatol, fatol, restarts)
    else:
        raise ValueError(f"unknown optimiser {method!r}")
    if not converged:
        warnings.warn(f"mode search stopped before convergence after {evals} evaluations: {message}",
                      stacklevel=2)
    return ModeResult(posterior.hyper(u), u, posterior.log_posterior(u), converged, evals, message, method)


# --------------------------------------------------------------------------
# Grid exploration

@dataclass
class GridPoint:
    hyper: HyperVector
    u: np.ndarray
    log_posterior: float
    weight: float
    mean: np.ndarray = field(repr=False)
    var: np.ndarray | None = field(default=None, repr=False)
    linear_var: np.ndarray | None = field(default=None, repr=False)


@dataclass
class HyperSummary:
    mean: float
    q025: float
    q975: float
    sd: float = math.nan


@dataclass
class FitResult:
    """Posterior summaries of a fitted model.

    Latent arrays are indexed as the stacked latent vector of
    :class:`CompiledModel`; use :meth:`field_mean` and :meth:`field_sd` for
    per-field (T x n) views.
    """

    posterior: Posterior
    mode: ModeResult
    grid: list
    hyper_summary: dict
    linear_summary: dict
    latent_mean: np.ndarray
    latent_sd: np.ndarray | None
    log_marginal_likelihood: float
    hessian_ok: bool = True

    @property
    def model(self) -> CompiledModel:
        return self.posterior.model

    @property
    def weights(self) -> np.ndarray:
        return np.array([g.weight for g in self.grid])

    def field_mean(self, k: int) -> np.ndarray:
        return self.model.field_block(self.latent_mean, k)

    def field_sd(self, k: int) -> np.ndarray:
        if self.latent_sd is None:
            raise ValueError("latent standard deviations were not computed")
        return self.model.field_block(self.latent_sd, k)


def numerical_hessian(f, x, step: float = 0.02) -> np.ndarray:
    """Central-difference Hessian of a scalar function."""
    x = np.asarray(x, dtype=float)
    p = x.size
    f0 = f(x)
    H = np.empty((p, p))
    e = np.eye(p) * step
    fp = np.array([f(x + e[i]) for i in range(p)])
    fm = np.array([f(x - e[i]) for i in range(p)])
    for i in range(p):
        H[i, i] = (fp[i] - 2 * f0 + fm[i]) / step**2
        for j in range(i):
            v = (f(x + e[i] + e[j]) - f(x + e[i] - e[j]) - f(x - e[i] + e[j]) + f(x - e[i] - e[j])) / (4 * step**2)
            H[i, j] = H[j, i] = v
    return H


def gradient_hessian(grad, x, step: float = 1e-3) -> np.ndarray:
    """Symmetrised central differences of an analytic gradient."""
    x = np.asarray(x, dtype=float)
    p = x.size
    H = np.empty((p, p))
    for i in range(p):
        e = np.zeros(p)
        e[i] = step
        H[:, i] = (grad(x + e) - grad(x - e)) / (2 * step)
    return 0.5 * (H + H.T)


def ccd_design(p: int, f0: float = 1.1) -> tuple[np.ndarray, float]:
    """Central composite design in standardised coordinates.

    Returns ``(points, radius)``: the centre, ``2p`` axial points and a
    two-level factorial (full for ``p <= 6``, otherwise a Hadamard-based
    fraction), all non-centre points on the sphere of radius ``f0 sqrt(p)``.
    """
    if p == 0:
        return np.zeros((1, 0)), 0.0
    radius = f0 * math.sqrt(p)
    axial = np.vstack([np.eye(p), -np.eye(p)]) * radius
    if p <= 6:
        corners = np.array(np.meshgrid(*[[-1.0, 1.0]] * p, indexing="ij")).reshape(p, -1).T
    else:
        size = 1 << p.bit_length()  # smallest power of two above p
        corners = hadamard(size)[:, 1:p + 1].astype(float)
    corners = corners / math.sqrt(p) * radius
    return np.vstack([np.zeros((1, p)), axial, corners]), radius


def _mixture_moments(weights, means, variances):
    mean = np.tensordot(weights, means, axes=1)
    second = np.tensordot(weights, variances + means**2, axes=1)
    return mean, np.clip(second - mean**2, 0, None)


def mixture_quantiles(weights, means, sds, probs=(0.025, 0.975), n_grid: int = 1000) -> np.ndarray:
    """Quantiles of Gaussian mixtures, one mixture per column.

    ``means`` and ``sds`` have shape (n_components, m).  The mixture CDF is
    evaluated on ``n_grid`` points spanning the component tails and
    inverted by linear interpolation.
    """
    w = np.asarray(weights, dtype=float)
    mu = np.atleast_2d(np.asarray(means, dtype=float))
    sd = np.maximum(np.atleast_2d(np.asarray(sds, dtype=float)), 1e-300)
    probs = np.asarray(probs, dtype=float)
    lo = (mu - 6 * sd).min(axis=0)
    hi = (mu + 6 * sd).max(axis=0)
    out = np.empty((len(probs), mu.shape[1]))
    for j in range(mu.shape[1]):
        if np.allclose(mu[:, j], mu[0, j]) and np.allclose(sd[:, j], sd[0, j]):
            out[:, j] = mu[0, j] + sd[0, j] * ndtri(probs)
            continue
        x = np.linspace(lo[j], hi[j], n_grid)
        cdf = w @ ndtr((x[None, :] - mu[:, j, None]) / sd[:, j, None])
        out[:, j] = np.interp(probs, cdf, x)
    return out


def _evaluate_point(posterior: Posterior, u, compute_latent_sd: bool, on_point=None):
    """Log posterior, conditional mean and variances at one design point."""
    model = posterior.model
    h = posterior.hyper(u)
    factor = posterior.factorize(h)
    b = model.rhs(h)
    mean = factor.solve(b)
    logdet_d, quad = model.noise_summary(h)
    lml = 0.5 * (model.prior_logdet(h) + logdet_d - factor.logdet()
                 - model.n_obs * LOG_2PI - quad + float(b @ mean))
    lp = lml + posterior._prior_and_jacobian(posterior.full_internal(u))
    idx = np.arange(model.lin_offset, model.dim)
    if compute_latent_sd:
        var = factor.inverse_diagonal()
        linear_var = var[idx]
    else:
        var = None
        rhs = sp.csc_matrix((np.ones(len(idx)), (idx, np.arange(len(idx)))), shape=(model.dim, len(idx)))
        linear_var = np.asarray(factor.solve(rhs))[idx, np.arange(len(idx))]
    point = GridPoint(h, np.asarray(u, dtype=float), lp, 0.0, mean, var, linear_var)
    if on_point is not None and math.isfinite(lp):
        on_point(point, factor)
    return point


def explore_grid(posterior: Posterior, mode: ModeResult, *, design: str = "ccd", f0: float = 1.1,
                 compute_latent_sd: bool = True, n_samples: int = 20000, seed: int = 0,
                 hessian_step: float = 1e-3, on_point=None) -> FitResult:
    """Integrate over the hyperparameter posterior around ``mode``.

    The design lives in standardised coordinates ``z`` with
    ``u = mode + V diag(lambda)^-1/2 z`` from the eigen-decomposition of the
    negative Hessian.  ``design="mode"`` uses the mode alone.
    Hyperparameter summaries come from a split-Gaussian approximation whose
    per-direction scales are read off the axial design points; it is
    sampled with ``seed``.  ``on_point(grid_point, factor)`` is called for
    every retained design point while its factorisation is live.
    """
    p = mode.u.size
    u0 = np.asarray(mode.u, dtype=float)
    hessian_ok = True
    if design not in ("ccd", "mode"):
        raise ValueError(f"unknown grid design {design!r}")
    if p and design == "ccd":
        H = -gradient_hessian(lambda x: posterior.log_posterior_and_gradient(x)[1], u0, hessian_step)
        evals, vecs = np.linalg.eigh(H)
        if not np.all(np.isfinite(evals)) or evals.min() <= 0:
            warnings.warn("Hessian at the mode is not positive definite; using identity scaling", stacklevel=2)
            hessian_ok = False
            evals, vecs = np.ones(p), np.eye(p)
        transform = vecs / np.sqrt(evals)[None, :]
        z, radius = ccd_design(p, f0)
    else:
        transform = np.eye(p)
        z, radius = np.zeros((1, p)), 0.0

    points, kept = [], []
    for k, zi in enumerate(z):
        try:
            g = _evaluate_point(posterior, u0 + transform @ zi, compute_latent_sd, on_point)
        except NotPositiveDefiniteError:
            continue
        if math.isfinite(g.log_posterior):
            points.append(g)
            kept.append(k)
    if not points or kept[0] != 0:
        raise NumericalFailure("the mode itself gave no valid factorisation")

    # centre weight 1, equal weights on the sphere, times the density
    n_pts = len(z)
    other = 1.0 / ((n_pts - 1) * math.exp(-radius**2 / 2) * (f0**2 - 1)) if n_pts > 1 else 1.0
    lps = np.array([g.log_posterior for g in points])
    base = np.array([1.0 if k == 0 else other for k in kept])
    w = base * np.exp(lps - lps.max())
    w /= w.sum()
    for g, wi in zip(points, w):
        g.weight = float(wi)

    means = np.array([g.mean for g in points])
    if compute_latent_sd:
        latent_mean, latent_var = _mixture_moments(w, means, np.array([g.var for g in points]))
        latent_sd = np.sqrt(latent_var)
    else:
        latent_mean, latent_sd = np.tensordot(w, means, axes=1), None

    model = posterior.model
    lin_means = means[:, model.lin_offset:]
    lin_vars = np.array([g.linear_var for g in points])
    lin_mean, lin_var = _mixture_moments(w, lin_means, lin_vars)
    q = mixture_quantiles(w, lin_means, np.sqrt(lin_vars))
    linear_summary = {name: HyperSummary(float(lin_mean[i]), float(q[0, i]), float(q[1, i]),
                                         float(math.sqrt(lin_var[i])))
                      for i, name in enumerate(model.linear_names)}

    # split-Gaussian scales from the axial points (indices 1..2p of the design)
    scales = np.ones((p, 2))
    if p and design == "ccd":
        lp_by_index = dict(zip(kept, lps))
        for i in range(p):
            for s, k in enumerate((1 + i, 1 + p + i)):
                drop = lps[0] - lp_by_index.get(k, -math.inf)
                if math.isfinite(drop) and drop > 1e-8:
                    scales[i, s] = np.clip(radius / math.sqrt(2 * drop), 0.2, 5.0)
    hyper_summary = _hyper_summary(posterior, u0, transform.T, scales, n_samples, seed)

    lml_mode = points[0].log_posterior - posterior._prior_and_jacobian(posterior.full_internal(u0))
    return FitResult(posterior, mode, points, hyper_summary, linear_summary, latent_mean, latent_sd,
                     lml_mode, hessian_ok)


def _hyper_summary(posterior: Posterior, u0, directions, scales, n_samples, seed) -> dict:
    layout = posterior.layout
    p = u0.size
    rng = np.random.default_rng(seed)
    if p:
        z = rng.standard_normal((n_samples, p))
        z = np.where(z >= 0, z * scales[:, 0], z * scales[:, 1])
        u = u0 + z @ directions
    else:
        u = np.zeros((n_samples, 0))
    full = np.tile(posterior.full_internal(np.zeros(p) if p == 0 else u0), (n_samples, 1))
    full[:, posterior.free] = u
    nat = np.column_stack([_TRANSFORMS_INV[t](full[:, i]) for i, t in enumerate(layout.transforms)])
    out = {}
    for i, name in enumerate(layout.names):
        out[name] = _summarise(nat[:, i])
        if name.startswith("sd_"):
            out["sigma2_" + name[3:]] = _summarise(nat[:, i] ** 2)
    return out


_TRANSFORMS_INV = {"log": np.exp, "arctanh": np.tanh, "identity": lambda u: u}


def _summarise(samples) -> HyperSummary:
    q = np.quantile(samples, [0.025, 0.975])
    return HyperSummary(float(np.mean(samples)), float(q[0]), float(q[1]), float(np.std(samples)))


# --------------------------------------------------------------------------
# Convenience and serialisation

def fit(spec: FusionModelSpec, priors: PriorSpec | None = None, init: HyperVector | None = None,
        *, max_evals: int = 4000, design: str = "ccd", compute_latent_sd: bool = True, seed: int = 0,
        optimizer: str = "quasi-newton", priors_override: Mapping[str, Prior] | None = None,
        f0: float = 1.1, dense_threshold: int = 0) -> FitResult:
    """Mode search followed by grid exploration."""
    model = CompiledModel(spec)
    priors = priors or default_priors(model)
    if priors_override:
        priors = priors.updated(priors_override)
    post = Posterior(model, priors, dense_threshold=dense_threshold)
    mode = optimize_mode(post, init, method=optimizer, max_evals=max_evals)
    return explore_grid(post, mode, design=design, f0=f0, compute_latent_sd=compute_latent_sd, seed=seed)


def write_hyper_summary(path, fit: FitResult) -> None:
    rows = [(k, v) for k, v in fit.hyper_summary.items()]
    rows += list(fit.linear_summary.items())
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["param", "mean", "q025", "q975"])
        for name, s in rows:
            w.writerow([name, repr(s.mean), repr(s.q025), repr(s.q975)])


def write_latent_fields(path, fit: FitResult, names=None) -> None:
    model = fit.model
    names = names or [f.name for f in model.spec.fields]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["field", "node", "time", "mean", "sd"])
        for k in range(model.n_fields):
            mean = fit.field_mean(k)
            sd = fit.field_sd(k) if fit.latent_sd is not None else np.full_like(mean, np.nan)
            for t in range(model.T):
                for node in range(model.n):
                    w.writerow([names[k], node + 1, t + 1, repr(float(mean[t, node])), repr(float(sd[t, node]))])


def save_fit_state(path, fit: FitResult) -> None:
    """Store the design points so predictions can be made without refitting.

    The model itself is not stored; :func:`load_fit_state` rebuilds the
    posterior from the same specification and checks the dimensions.
    """
    np.savez_compressed(
        path,
        names=np.array(fit.posterior.layout.names),
        free=fit.posterior.free,
        u=np.array([g.u for g in fit.grid]),
        weights=fit.weights,
        log_posterior=np.array([g.log_posterior for g in fit.grid]),
        means=np.array([g.mean for g in fit.grid]),
        mode_u=fit.mode.u,
        mode_info=np.array([fit.mode.log_posterior, float(fit.mode.converged), fit.mode.n_evals]),
        lml=np.array([fit.log_marginal_likelihood]),
    )


def load_fit_state(path, posterior: Posterior) -> FitResult:
    """Rebuild a :class:`FitResult` for prediction from :func:`save_fit_state` output.

    Hyperparameter summaries and latent standard deviations are not restored.
    """
    with np.load(path) as z:
        if list(z["names"]) != posterior.layout.names or not np.array_equal(z["free"], posterior.free):
            raise ValueError(f"{path}: stored fit does not match the model built from the configuration")
        if z["means"].shape[1] != posterior.model.dim:
            raise ValueError(f"{path}: stored latent dimension {z['means'].shape[1]} differs from "
                             f"the model's {posterior.model.dim}")
        grid = [GridPoint(posterior.hyper(u), u, float(lp), float(w), mean)
                for u, lp, w, mean in zip(z["u"], z["log_posterior"], z["weights"], z["means"])]
        lp_mode, converged, n_evals = z["mode_info"]
        mode = ModeResult(posterior.hyper(z["mode_u"]), z["mode_u"], float(lp_mode), bool(converged),
                          int(n_evals))
        latent_mean = np.tensordot(z["weights"], z["means"], axes=1)
        return FitResult(posterior, mode, grid, {}, {}, latent_mean, None, float(z["lml"][0]))
