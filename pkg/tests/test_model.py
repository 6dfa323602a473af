import dataclasses

import numpy as np
import pytest
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

from oracles import dense_gls_mean, random_instance
from stfusion.model import (CompiledModel, FusionModelSpec, HyperLayout, HyperVector, assemble_system,
                            design_rows, linear_predictor, raster_effect)
from stfusion.observation import ObservationBatch, PointObs


def posterior_mean(spec, h):
    sysm = assemble_system(spec, h)
    return spsolve(sysm.posterior_precision.tocsc(), sysm.rhs)


def with_observations(spec, points, blocks):
    return dataclasses.replace(spec, observations=ObservationBatch(points, blocks,
                                                                   spec.observations.variable_names))


@pytest.mark.parametrize("seed", range(4))
def test_posterior_mean_matches_covariance_form(seed):
    spec, h = random_instance(seed)
    assert np.allclose(posterior_mean(spec, h), dense_gls_mean(spec, h), rtol=1e-8, atol=1e-10)


def test_layout_dimensions(small_instance):
    spec, h = small_instance
    model = CompiledModel(spec)
    assert model.dim == 3 * model.n * spec.T + 3 + 1
    assert model.n_obs == len(spec.observations)
    assert model.linear_names == ["alpha_1", "alpha_2", "alpha_3", "theta_1"]
    assert model.layout.names[:3] == ["range_1", "sd_1", "ar_1"]
    assert model.layout.names[-2:] == ["beta_1", "beta_2"]


def test_compiled_matches_direct_assembly(small_instance):
    spec, h = small_instance
    model = CompiledModel(spec)
    sysm = model.system(h)
    direct = (sysm.Q + sysm.A.T @ sp.diags(sysm.D) @ sysm.A).toarray()
    assert np.allclose(model.posterior_precision(h).toarray(), direct, atol=1e-10)
    assert np.allclose(model.rhs(h), sysm.rhs)
    assert model.prior_logdet(h) == pytest.approx(np.linalg.slogdet(sysm.Q.toarray())[1], rel=1e-10)


def test_hyper_layout_round_trip(small_instance):
    spec, h = small_instance
    layout = CompiledModel(spec).layout
    u = layout.to_internal(h)
    back = layout.from_internal(u)
    assert np.allclose(layout.to_array(back), layout.to_array(h))
    assert layout.transforms.count("arctanh") == 3
    with pytest.raises(ValueError):
        layout.from_array(np.ones(3))


def test_log_jacobian(small_instance):
    spec, h = small_instance
    layout = CompiledModel(spec).layout
    u = layout.to_internal(h)
    eps = 1e-6
    jac = [(layout.natural(u + eps * e) - layout.natural(u - eps * e))[i] / (2 * eps)
           for i, e in enumerate(np.eye(len(u)))]
    assert layout.log_jacobian(u) == pytest.approx(np.log(np.abs(jac)).sum(), abs=1e-6)


def test_zero_copy_coefficients_decouple_covariates(small_instance):
    spec, h = small_instance
    h0 = dataclasses.replace(h, beta=(0.0, 0.0))
    model = CompiledModel(spec)
    # change only the response observations
    obs = spec.observations
    resp = spec.response
    shifted = with_observations(
        spec, [dataclasses.replace(o, value=o.value + 5.0) if o.variable_id == resp else o for o in obs.points],
        obs.blocks)
    a, b = posterior_mean(spec, h0), posterior_mean(shifted, h0)
    cov_end = (spec.K) * model.block_size
    assert np.allclose(a[:cov_end], b[:cov_end], atol=1e-10)
    assert not np.allclose(a[cov_end:], b[cov_end:])


def test_linear_predictor_consistent_with_design(small_instance):
    spec, h = small_instance
    model = CompiledModel(spec)
    x = np.random.default_rng(0).normal(size=model.dim)
    A = model.design_matrix(h)
    # the first group holds the point records of variable 1
    g = model.groups[0]
    first = [o for o in spec.observations.points if o.variable_id == g.variable][0]
    assert linear_predictor(spec, h, x, first) == pytest.approx((A @ x)[g.rows[0]])
    resp = [o for o in spec.observations.blocks if o.variable_id == spec.response][0]
    gr = [g for g in model.groups if g.variable == spec.response and g.support == "block"][0]
    assert linear_predictor(spec, h, x, resp) == pytest.approx((A @ x)[gr.rows[0]])
    with pytest.raises(ValueError):
        linear_predictor(spec, h, x[:-1], first)


def test_response_row_combines_fields(small_instance):
    spec, h = small_instance
    model = CompiledModel(spec)
    row = design_rows(spec, h, "point", np.array([[1.0, 0.5]]), [2]).toarray()[0]
    bs = model.block_size
    w = row[2 * bs:3 * bs]
    assert np.allclose(row[:bs], h.beta[0] * w)
    assert np.allclose(row[bs:2 * bs], h.beta[1] * w)
    assert row[model.lin_offset + 2] == 1.0
    # trend 0.1 + 0.3 x - 0.2 y at (1, 0.5)
    assert row[-1] == pytest.approx(0.3)


def test_order_of_observations_is_irrelevant(small_instance):
    spec, h = small_instance
    rng = np.random.default_rng(1)
    obs = spec.observations
    perm = with_observations(spec, [obs.points[i] for i in rng.permutation(len(obs.points))],
                             [obs.blocks[i] for i in rng.permutation(len(obs.blocks))])
    assert np.allclose(posterior_mean(spec, h), posterior_mean(perm, h), atol=1e-10)


def test_mean_is_linear_in_data(small_instance):
    spec, h = small_instance
    obs = spec.observations

    def scaled(c):
        return with_observations(spec, [dataclasses.replace(o, value=c * o.value) for o in obs.points],
                                 [dataclasses.replace(o, value=c * o.value) for o in obs.blocks])
    assert np.allclose(posterior_mean(scaled(2.5), h), 2.5 * posterior_mean(spec, h), atol=1e-10)


def test_huge_block_noise_approaches_point_only(small_instance):
    spec, h = small_instance
    loud = dataclasses.replace(h, tau2_block={v: 1e10 for v in h.tau2_block})
    point_only = with_observations(spec, spec.observations.points, [])
    h_pts = dataclasses.replace(h, tau2_block={})
    assert np.allclose(posterior_mean(spec, loud), posterior_mean(point_only, h_pts), atol=1e-6)


def test_spec_validation(small_instance):
    spec, _ = small_instance
    with pytest.raises(ValueError):
        dataclasses.replace(spec, T=1)
    with pytest.raises(ValueError):
        dataclasses.replace(spec, fields=spec.fields[:2])
    bad = ObservationBatch([PointObs(1, (0.5, 0.5), 1, 0.0)], [], {1: "a"})
    with pytest.raises(ValueError):
        FusionModelSpec([], bad, spec.mesh, 1)


def test_hyper_vector_validation():
    with pytest.raises(ValueError):
        HyperVector((1.0,), (1.0,), (1.0,))
    with pytest.raises(ValueError):
        HyperVector((1.0, 1.0), (1.0, 1.0), (0.0, 0.0))
    with pytest.raises(ValueError):
        HyperVector((1.0,), (1.0,), (0.0,), tau2_point={1: 0.0})
    assert HyperLayout(1, (1,), ()).names == ["range_1", "sd_1", "ar_1", "tau2p_1"]


def test_raster_effect_nearest_cell_and_time_fallback():
    cells = [(0, 1, 0, 1), (1, 2, 0, 1), (0, 1, 0, 1), (1, 2, 0, 1)]
    fe = raster_effect("elev", cells, [1.0, 2.0, 10.0, 20.0], times=[1, 1, 3, 3])
    xy = np.array([[0.2, 0.5], [1.7, 0.5], [0.2, 0.5], [1.7, 0.5]])
    assert np.allclose(fe(xy, [1, 1, 2, 4]), [1.0, 2.0, 1.0, 20.0])
    with pytest.raises(ValueError):
        raster_effect("x", cells, [1.0])
