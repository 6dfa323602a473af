"""scikit-learn style wrapper around the fusion model."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .geometry import Box, build_structured_mesh
from .inference import Posterior, default_priors, explore_grid, optimize_mode
from .model import CompiledModel, FieldSpec, FusionModelSpec
from .observation import ObservationBatch
from .prediction import forecast_one_day, predict_at


def check_observations(obs) -> ObservationBatch:
    """Validate the ``X`` argument of :meth:`FusionRegressor.fit`."""
    if not isinstance(obs, ObservationBatch):
        raise TypeError(f"expected an ObservationBatch, got {type(obs).__name__}")
    if len(obs) == 0:
        raise ValueError("the observation batch is empty")
    return obs


def check_targets(X, T: int) -> tuple[np.ndarray, np.ndarray]:
    """Validate prediction targets given as rows ``easting, northing, time``."""
    X = check_array(X, dtype=float, ensure_2d=True)
    if X.shape[1] != 3:
        raise ValueError(f"targets need 3 columns (easting, northing, time), got {X.shape[1]}")
    times = X[:, 2]
    if np.any(times != np.round(times)):
        raise ValueError("target times must be integers")
    times = times.astype(np.int64)
    if times.min() < 1 or times.max() > T + 1:
        raise ValueError(f"target times must lie in 1..{T + 1}")
    return X[:, :2], times


class FusionRegressor(RegressorMixin, BaseEstimator):
    """Latent-field fusion of point and block observations.

    ``fit`` takes an :class:`~stfusion.observation.ObservationBatch` whose
    highest variable id is the response; ``predict`` takes an array of
    ``easting, northing, time`` rows.  Times up to ``T`` are now-casts and
    ``T + 1`` is a one-day forecast.

    Parameters
    ----------
    n_fields : int
        Number of latent fields (covariates plus response).
    domain : tuple, optional
        ``xmin, xmax, ymin, ymax``; defaults to the data extent.
    edge_length, buffer_width, buffer_edge_length : float
        Structured mesh settings.
    T : int, optional
        Length of the time axis; defaults to the latest observed time.
    priors : mapping, optional
        Overrides of the default priors keyed by hyperparameter name.
    optimizer, max_evals, design, ccd_radius_factor :
        Inference settings (see :func:`~stfusion.inference.optimize_mode`
        and :func:`~stfusion.inference.explore_grid`).
    random_state : int
        Seed of the hyperparameter summary sampler.
    """

    def __init__(self, n_fields: int = 1, domain=None, edge_length: float = 1.0, buffer_width=None,
                 buffer_edge_length=None, T=None, priors=None, optimizer: str = "quasi-newton",
                 max_evals: int = 4000, design: str = "ccd", ccd_radius_factor: float = 1.1,
                 random_state: int = 0):
        self.n_fields = n_fields
        self.domain = domain
        self.edge_length = edge_length
        self.buffer_width = buffer_width
        self.buffer_edge_length = buffer_edge_length
        self.T = T
        self.priors = priors
        self.optimizer = optimizer
        self.max_evals = max_evals
        self.design = design
        self.ccd_radius_factor = ccd_radius_factor
        self.random_state = random_state

    def _mesh(self, obs: ObservationBatch):
        if self.domain is not None:
            box = Box(*self.domain)
        else:
            _, xy, _, _ = obs.point_arrays
            _, cells, _, _ = obs.block_arrays
            xs = np.concatenate([xy[:, 0], cells[:, 0], cells[:, 1]])
            ys = np.concatenate([xy[:, 1], cells[:, 2], cells[:, 3]])
            box = Box(xs.min(), xs.max(), ys.min(), ys.max())
        buffer = 3.0 * self.edge_length if self.buffer_width is None else self.buffer_width
        return build_structured_mesh(box, self.edge_length, buffer, self.buffer_edge_length)

    def fit(self, X, y=None):
        """Fit to an observation batch; ``y`` is ignored (values live in ``X``)."""
        obs = check_observations(X)
        T = self.T or obs.max_time
        fields = [FieldSpec(f"field_{k}") for k in range(1, self.n_fields + 1)]
        self.spec_ = FusionModelSpec(fields, obs, self._mesh(obs), T)
        model = CompiledModel(self.spec_)
        priors = default_priors(model)
        if self.priors:
            priors = priors.updated(dict(self.priors))
        post = Posterior(model, priors)
        mode = optimize_mode(post, method=self.optimizer, max_evals=self.max_evals)
        self.fit_ = explore_grid(post, mode, design=self.design, f0=self.ccd_radius_factor,
                                 seed=self.random_state)
        self.converged_ = mode.converged
        self.hyperparameters_ = {k: v.mean for k, v in self.fit_.hyper_summary.items()}
        self.coefficients_ = {k: v.mean for k, v in self.fit_.linear_summary.items()}
        return self

    def _surfaces(self, X):
        check_is_fitted(self, "fit_")
        xy, times = check_targets(X, self.spec_.T)
        now = np.flatnonzero(times <= self.spec_.T)
        ahead = np.flatnonzero(times > self.spec_.T)
        out = {k: np.empty(len(times)) for k in ("mean", "sd", "q025", "q975")}
        for idx, fn in ((now, predict_at), (ahead, forecast_one_day)):
            if idx.size:
                s = fn(self.fit_, [(tuple(xy[i]), int(times[i])) for i in idx])
                for k in out:
                    out[k][idx] = getattr(s, k)
        return out

    def predict(self, X, return_std: bool = False):
        """Posterior predictive mean (and sd) of the response at ``X``."""
        s = self._surfaces(X)
        return (s["mean"], s["sd"]) if return_std else s["mean"]

    def predict_interval(self, X) -> np.ndarray:
        """95% predictive intervals as an (n, 2) array."""
        s = self._surfaces(X)
        return np.column_stack([s["q025"], s["q975"]])
