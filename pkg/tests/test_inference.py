import dataclasses
import math

import numpy as np
import pytest
from scipy.sparse.linalg import spsolve
from scipy.special import ndtri
from scipy.stats import norm

from oracles import dense_marginal_loglik, random_instance
from stfusion.geometry import build_structured_mesh
from stfusion.inference import (ModeResult, Posterior, ccd_design, default_priors, explore_grid,
                                gradient_hessian, load_fit_state, log_marginal_likelihood,
                                mixture_quantiles, numerical_hessian, optimize_mode, save_fit_state)
from stfusion.model import CompiledModel, FieldSpec, FusionModelSpec, HyperLayout, HyperVector, assemble_system
from stfusion.observation import ObservationBatch, PointObs
from stfusion.priors import Fixed


@pytest.mark.parametrize("seed", range(5))
def test_marginal_likelihood_matches_dense(seed):
    spec, h = random_instance(seed, T=2 if seed % 2 else 3, n_fields=1 + seed % 3)
    value = log_marginal_likelihood(spec, h, include_prior=False)
    assert value == pytest.approx(dense_marginal_loglik(spec, h), rel=1e-9)


def test_dense_and_sparse_paths_agree(small_instance):
    spec, h = small_instance
    sparse = Posterior(spec).log_marginal_likelihood(h)
    dense = Posterior(spec, dense_threshold=10**6).log_marginal_likelihood(h)
    assert sparse == pytest.approx(dense, rel=1e-10)


def test_gradient_matches_finite_differences(small_instance):
    spec, h = small_instance
    post = Posterior(spec)
    u = post.to_free(h)
    value, grad = post.log_posterior_and_gradient(u)
    assert value == pytest.approx(post.log_posterior(u), rel=1e-10)
    eps = 1e-5
    fd = np.array([(post.log_posterior(u + eps * e) - post.log_posterior(u - eps * e)) / (2 * eps)
                   for e in np.eye(len(u))])
    assert np.allclose(grad, fd, rtol=1e-4, atol=1e-4)


def test_huge_noise_leaves_only_the_noise_term(small_instance):
    spec, h = small_instance
    big = 1e12
    loud = dataclasses.replace(h, tau2_point={v: big for v in h.tau2_point},
                               tau2_block={v: big for v in h.tau2_block})
    y = CompiledModel(spec).y
    noise_only = -0.5 * (len(y) * math.log(2 * math.pi * big) + float(y @ y) / big)
    assert log_marginal_likelihood(spec, loud, include_prior=False) == pytest.approx(noise_only, rel=1e-9)


def test_duplicate_observation_equals_halved_noise():
    mesh = build_structured_mesh((0, 2, 0, 1), 0.5, 0.5)
    record = PointObs(1, (0.7, 0.4), 1, 1.3)

    def mean(records, tau2):
        spec = FusionModelSpec([FieldSpec("y")], ObservationBatch(records, [], {1: "y"}), mesh, 1)
        sysm = assemble_system(spec, HyperVector((1.0,), (1.0,), (0.0,), {1: tau2}))
        return spsolve(sysm.posterior_precision.tocsc(), sysm.rhs)

    assert np.allclose(mean([record, record], 0.2), mean([record], 0.1), atol=1e-12)


class QuadraticPosterior:
    """Stand-in exposing the attributes the mode search uses."""

    def __init__(self, centre, curvature):
        self.centre = np.asarray(centre, float)
        self.A = np.asarray(curvature, float)
        self.free_names = [f"x{i}" for i in range(len(centre))]

    def to_free(self, h):
        return np.asarray(h, float)

    def hyper(self, u):
        return np.asarray(u, float)

    def log_posterior(self, u):
        d = np.asarray(u) - self.centre
        return -0.5 * float(d @ self.A @ d)

    def log_posterior_and_gradient(self, u):
        d = np.asarray(u) - self.centre
        return -0.5 * float(d @ self.A @ d), -(self.A @ d)


@pytest.mark.parametrize("method", ["quasi-newton", "nelder-mead"])
def test_optimiser_finds_quadratic_optimum(method):
    post = QuadraticPosterior([1.0, -2.0, 0.5], [[3, 1, 0], [1, 2, 0.5], [0, 0.5, 1]])
    res = optimize_mode(post, np.zeros(3), method=method)
    assert res.converged and res.method == method
    assert np.allclose(res.u, post.centre, atol=1e-3)


def test_optimiser_budget_exhaustion_warns():
    post = QuadraticPosterior(np.arange(6.0), np.eye(6))
    with pytest.warns(UserWarning, match="before convergence"):
        res = optimize_mode(post, np.zeros(6), method="nelder-mead", max_evals=20, restarts=0)
    assert not res.converged


def test_unknown_optimiser():
    with pytest.raises(ValueError):
        optimize_mode(QuadraticPosterior([0.0], [[1.0]]), np.ones(1), method="newton")


def test_hessians_of_quadratic():
    A = np.array([[2.0, 0.3], [0.3, 1.0]])
    post = QuadraticPosterior([0.2, 0.1], A)
    x = np.array([0.5, -0.5])
    assert np.allclose(-numerical_hessian(post.log_posterior, x), A, atol=1e-8)
    assert np.allclose(-gradient_hessian(lambda u: post.log_posterior_and_gradient(u)[1], x), A, atol=1e-10)


@pytest.mark.parametrize("p,expected", [(1, 5), (2, 9), (3, 15), (6, 77), (7, 23), (12, 41)])
def test_ccd_point_counts(p, expected):
    pts, radius = ccd_design(p, 1.1)
    assert pts.shape == (expected, p)
    assert radius == pytest.approx(1.1 * math.sqrt(p))
    assert np.allclose(np.linalg.norm(pts[1:], axis=1), radius)
    assert np.allclose(pts[0], 0)


def test_ccd_fractional_part_is_balanced():
    pts, _ = ccd_design(9, 1.1)
    corners = pts[1 + 18:]
    assert np.allclose(corners.sum(axis=0), 0)
    # columns of a Hadamard fraction are mutually orthogonal
    G = corners.T @ corners
    assert np.allclose(G - np.diag(np.diag(G)), 0)


def test_mixture_quantiles():
    q = mixture_quantiles([1.0], [[2.0]], [[0.5]], probs=(0.025, 0.975))
    assert np.allclose(q[:, 0], 2.0 + 0.5 * ndtri([0.025, 0.975]))
    # symmetric two-component mixture: median at the centre
    q = mixture_quantiles([0.5, 0.5], [[-1.0], [1.0]], [[0.3], [0.3]], probs=(0.5, 0.975))
    assert q[0, 0] == pytest.approx(0.0, abs=0.02)
    x = np.linspace(-5, 5, 200001)
    cdf = 0.5 * norm.cdf(x, -1, 0.3) + 0.5 * norm.cdf(x, 1, 0.3)
    assert q[1, 0] == pytest.approx(np.interp(0.975, cdf, x), abs=0.01)


def two_parameter_problem():
    """One field, one time point, range fixed: only sd and noise are free."""
    rng = np.random.default_rng(7)
    mesh = build_structured_mesh((0, 4, 0, 4), 0.8, 1.0)
    xy = rng.uniform(0, 4, (40, 2))
    y = np.sin(xy[:, 0]) + 0.5 * np.cos(xy[:, 1]) + 0.3 * rng.standard_normal(40)
    batch = ObservationBatch([PointObs(1, p, 1, v) for p, v in zip(xy, y)], [], {1: "y"})
    spec = FusionModelSpec([FieldSpec("y")], batch, mesh, 1)
    model = CompiledModel(spec)
    priors = default_priors(model).updated({"range_1": Fixed(2.0)})
    return Posterior(model, priors)


@pytest.fixture(scope="module")
def two_parameter_fit():
    post = two_parameter_problem()
    mode = optimize_mode(post)
    return post, mode, explore_grid(post, mode)


def test_weights_and_shapes(two_parameter_fit):
    post, mode, fit = two_parameter_fit
    assert post.free_names == ["sd_1", "tau2p_1"]
    assert mode.converged
    assert len(fit.grid) == 9
    assert fit.weights.sum() == pytest.approx(1.0)
    assert fit.latent_sd.shape == fit.latent_mean.shape
    assert {"sd_1", "sigma2_1", "tau2p_1", "range_1"} <= set(fit.hyper_summary)
    assert fit.hyper_summary["range_1"].mean == pytest.approx(2.0)
    s = fit.hyper_summary["sd_1"]
    assert s.q025 < s.mean < s.q975


def test_single_point_design(two_parameter_fit):
    post, mode, _ = two_parameter_fit
    fit = explore_grid(post, mode, design="mode")
    assert len(fit.grid) == 1 and fit.weights[0] == 1.0
    assert np.allclose(fit.latent_mean, fit.grid[0].mean)


def test_grid_matches_brute_force_integration(two_parameter_fit):
    post, mode, fit = two_parameter_fit
    # dense tensor grid over +-5 marginal sds in the internal coordinates
    H = -gradient_hessian(lambda u: post.log_posterior_and_gradient(u)[1], mode.u)
    half = 5.0 * np.sqrt(np.diag(np.linalg.inv(H)))
    axes = [np.linspace(m - w, m + w, 41) for m, w in zip(mode.u, half)]
    lps, means, vars_ = [], [], []
    for a in axes[0]:
        for b in axes[1]:
            u = np.array([a, b])
            h = post.hyper(u)
            factor = post.factorize(h)
            lps.append(post.log_posterior(u))
            means.append(factor.solve(post.model.rhs(h)))
            vars_.append(factor.inverse_diagonal())
    lps = np.array(lps)
    w = np.exp(lps - lps.max())
    w /= w.sum()
    means, vars_ = np.array(means), np.array(vars_)
    mean = w @ means
    sd = np.sqrt(w @ (vars_ + means**2) - mean**2)
    nodes = np.arange(0, post.model.n, 7)
    assert np.allclose(fit.latent_mean[nodes], mean[nodes], atol=0.05 * sd[nodes].max())
    assert np.allclose(fit.latent_sd[nodes], sd[nodes], rtol=0.05)
    alpha = post.model.lin_offset
    assert fit.linear_summary["alpha_1"].sd == pytest.approx(sd[alpha], rel=0.05)


def test_save_and_load_state(two_parameter_fit, tmp_path):
    post, _, fit = two_parameter_fit
    path = tmp_path / "state.npz"
    save_fit_state(path, fit)
    back = load_fit_state(path, post)
    assert np.allclose(back.weights, fit.weights)
    assert np.allclose(back.latent_mean, fit.latent_mean)
    assert back.mode.converged == fit.mode.converged
    other = Posterior(post.model)  # range no longer fixed
    with pytest.raises(ValueError):
        load_fit_state(path, other)


def test_default_priors_cover_layout(small_instance):
    spec, _ = small_instance
    model = CompiledModel(spec)
    pri = default_priors(model)
    assert set(pri.priors) == set(model.layout.names)
    with pytest.raises(KeyError):
        pri.updated({"nope": Fixed(1.0)})
    single = HyperLayout(1, (1,), ())
    assert single.names[-1] == "tau2p_1"


def test_mode_result_fields():
    r = ModeResult(None, np.zeros(0), 0.0, True, 1)
    assert r.method == "quasi-newton"
