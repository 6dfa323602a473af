import dataclasses

import numpy as np
import pytest

from oracles import random_instance
from stfusion.geometry import Box, PointNotFoundError, assemble_fem
from stfusion.inference import ModeResult, Posterior, explore_grid, optimize_mode
from stfusion.model import assemble_system, design_rows
from stfusion.prediction import (PredictionSurface, coverage_95, forecast_one_day, lattice, predict_at,
                                 read_ascii_grid, write_ascii_grid, write_predictions)
from stfusion.spde import build_precision


def fit_at(spec, h):
    """A fit that puts all weight on the known hyperparameters ``h``."""
    post = Posterior(spec)
    u = post.to_free(h)
    mode = ModeResult(post.hyper(u), u, post.log_posterior(u), True, 1)
    return explore_grid(post, mode, design="mode")


def dense_posterior(spec, h):
    sysm = assemble_system(spec, h)
    cov = np.linalg.inv(sysm.posterior_precision.toarray())
    return cov @ sysm.rhs, cov


TARGETS = [((0.3, 0.2), 1), ((1.1, 0.7), 2), ((1.9, 0.05), 2), ((0.0, 0.5), 1)]


def test_nowcast_matches_dense(small_instance):
    spec, h = small_instance
    fit = fit_at(spec, h)
    surf = predict_at(fit, TARGETS)
    mean, cov = dense_posterior(spec, h)
    xy = np.array([p for p, _ in TARGETS])
    A = design_rows(spec, h, "point", xy, [t for _, t in TARGETS]).toarray()
    assert np.allclose(surf.mean, A @ mean, atol=1e-10)
    assert np.allclose(surf.sd, np.sqrt(np.diag(A @ cov @ A.T)), rtol=1e-8)
    assert np.allclose(surf.q975 - surf.mean, 1.959963984540054 * surf.sd, rtol=1e-8)


def test_forecast_matches_dense(small_instance):
    spec, h = small_instance
    fit = fit_at(spec, h)
    T = spec.T
    targets = [(p, T + 1) for p, _ in TARGETS]
    surf = forecast_one_day(fit, targets)
    mean, cov = dense_posterior(spec, h)
    xy = np.array([p for p, _ in TARGETS])
    # propagate: scale each field's row at T by its AR coefficient
    base = design_rows(spec, h, "point", xy, [T] * len(xy)).toarray()
    bs = spec.mesh.n_vertices * T
    A = base.copy()
    for k in range(len(spec.fields)):
        A[:, k * bs:(k + 1) * bs] *= h.ar[k]
    W = design_rows(spec, dataclasses.replace(h, beta=(0.0,) * spec.K), "point", xy, [T] * len(xy)).toarray()
    w_resp = W[:, spec.K * bs + (T - 1) * spec.mesh.n_vertices: (spec.K + 1) * bs]
    fem = assemble_fem(spec.mesh)
    innov = np.zeros(len(xy))
    scales = list(h.beta) + [1.0]
    for k in range(len(spec.fields)):
        C = np.linalg.inv(build_precision(fem, h.matern(k)).Q.toarray())
        innov += scales[k] ** 2 * (1 - h.ar[k] ** 2) * np.diag(w_resp @ C @ w_resp.T)
    assert np.allclose(surf.mean, A @ mean, atol=1e-10)
    assert np.allclose(surf.sd, np.sqrt(np.diag(A @ cov @ A.T) + innov), rtol=1e-8)


def test_forecast_with_no_persistence(small_instance):
    spec, h = small_instance
    h0 = dataclasses.replace(h, ar=(0.0,) * len(spec.fields))
    fit = fit_at(spec, h0)
    surf = forecast_one_day(fit, [((1.0, 0.5), spec.T + 1)])
    lin = fit.latent_mean[fit.model.lin_offset:]
    # alpha of the response plus the trend coefficient times 0.1 + 0.3 - 0.1
    assert surf.mean[0] == pytest.approx(lin[spec.K] + 0.3 * lin[-1], abs=1e-10)


def test_forecast_wider_than_last_day(small_instance):
    spec, h = small_instance
    fit = fit_at(spec, h)
    now = predict_at(fit, [(p, spec.T) for p, _ in TARGETS])
    ahead = forecast_one_day(fit, [(p, spec.T + 1) for p, _ in TARGETS])
    assert np.all(ahead.sd >= now.sd)


def test_target_validation(small_instance):
    spec, h = small_instance
    fit = fit_at(spec, h)
    with pytest.raises(ValueError):
        predict_at(fit, [((1.0, 0.5), spec.T + 1)])
    with pytest.raises(ValueError):
        forecast_one_day(fit, [((1.0, 0.5), spec.T)])
    with pytest.raises(PointNotFoundError):
        predict_at(fit, [((50.0, 0.5), 1)])
    with pytest.raises(ValueError):
        predict_at(fit, TARGETS, quantiles="bogus")


# noise-only data leaves the mode search on a flat ridge
@pytest.mark.filterwarnings("ignore:mode search stopped")
def test_mixture_surface_uses_all_points(small_instance):
    spec, _ = small_instance
    post = Posterior(spec)
    fit = explore_grid(post, optimize_mode(post))
    surf = predict_at(fit, TARGETS)
    means = []
    for g in fit.grid:
        means.append(design_rows(spec, g.hyper, "point", np.array([p for p, _ in TARGETS]),
                                 [t for _, t in TARGETS]) @ g.mean)
    assert np.allclose(surf.mean, fit.weights @ np.array(means), atol=1e-10)
    assert np.all(surf.q025 <= surf.mean) and np.all(surf.mean <= surf.q975)


def surface(mean, lo, hi):
    n = len(mean)
    return PredictionSurface([((0.0, 0.0), 1)] * n, mean, np.ones(n), lo, hi)


def test_coverage():
    s = surface([0, 0, 0, 0], [-1, -1, -1, -1], [1, 1, 1, 1])
    assert coverage_95(s, [0, 1, -1, 1.0001]) == 0.75
    with pytest.raises(ValueError):
        coverage_95(s, [0, 0])
    empty = PredictionSurface([], [], [], [], [])
    with pytest.raises(ValueError):
        coverage_95(empty, [])


def test_surface_validation():
    with pytest.raises(ValueError):
        PredictionSurface([((0, 0), 1)], [0.0], [-1.0], [0.0], [0.0])
    with pytest.raises(ValueError):
        PredictionSurface([((0, 0), 1)], [0.0, 1.0], [1.0], [0.0], [0.0])


def test_lattice():
    xy, ncols, nrows, x0, y0 = lattice(Box(0, 4, 0, 2), 0.5)
    assert (ncols, nrows, x0, y0) == (8, 4, 0, 0)
    assert np.allclose(xy[0], (0.25, 1.75))  # north-west cell first
    assert np.allclose(xy[-1], (3.75, 0.25))
    with pytest.raises(ValueError):
        lattice(Box(0, 1, 0, 1), 0)


def test_ascii_grid_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    values = rng.standard_normal((3, 5)) * 1e3
    values[1, 2] = np.nan
    path = tmp_path / "g.asc"
    write_ascii_grid(path, values, 0.1, -2.5, 0.3)
    back, header = read_ascii_grid(path)
    assert np.array_equal(np.isnan(back), np.isnan(values))
    assert np.array_equal(back[~np.isnan(back)], values[~np.isnan(values)])
    assert header["xllcorner"] == 0.1 and header["cellsize"] == 0.3 and header["ncols"] == 5
    assert path.read_text().splitlines()[0] == "ncols 5"


def test_ascii_grid_errors(tmp_path):
    with pytest.raises(ValueError):
        write_ascii_grid(tmp_path / "x.asc", np.zeros(3), 0, 0, 1)
    p = tmp_path / "bad.asc"
    p.write_text("ncols 2\nnrows 2\ncellsize 1\n1 2 3\n")
    with pytest.raises(ValueError):
        read_ascii_grid(p)


def test_write_predictions(tmp_path):
    s = PredictionSurface([((1.5, 2.0), 3)], [0.25], [0.5], [-0.7], [1.2])
    write_predictions(tmp_path / "p.csv", s)
    lines = (tmp_path / "p.csv").read_text().splitlines()
    assert lines[0] == "easting,northing,time,mean,sd,q025,q975"
    assert lines[1] == "1.5,2.0,3,0.25,0.5,-0.7,1.2"


def test_instance_with_two_fields_predicts():
    spec, h = random_instance(4, n_fields=2, T=3)
    surf = predict_at(fit_at(spec, h), [((1.0, 0.5), 3)])
    assert np.isfinite(surf.mean).all() and surf.sd[0] > 0
