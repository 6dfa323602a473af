import math

import numpy as np
import pytest

from stfusion.simulation import (SimConfig, StudyPlan, TrueParams, fit_replicate, generate_replicate,
                                 replicate_seed, rmspe, run_study, study_spec)

SMALL = SimConfig(T_total=6, t_train=(2, 3), mc_points_per_cell=40, generation_edge=0.5,
                  generation_buffer=2.0, n_test=8)


@pytest.fixture(scope="module")
def dataset():
    return generate_replicate(SMALL, replicate_seed(SMALL.seed, 0), keep_latent=True)


def test_rmspe():
    assert rmspe([1.0, 2.0], [4.0, 6.0]) == pytest.approx(math.sqrt(25 / 2))
    assert rmspe([3.0], [3.0]) == 0.0
    with pytest.raises(ValueError):
        rmspe([1.0], [1.0, 2.0])
    with pytest.raises(ValueError):
        rmspe([], [])


def test_true_params_table():
    table = TrueParams().as_table()
    assert table["sigma2_2"] == 0.5 and table["theta_1"] == -0.2 and table["beta_2"] == -0.4
    h = TrueParams().hyper()
    assert h.sd[0] == pytest.approx(1.0) and h.tau2_block[3] == 0.09


def test_shapes(dataset):
    cfg = SMALL
    assert dataset.sensors_response.shape == (22, 2)
    assert dataset.sensors_misaligned.shape == (10, 2)
    assert dataset.point_values[1].shape == (10, 6)
    assert dataset.point_values[3].shape == (22, 6)
    assert dataset.block_values[2].shape == (50, 6)
    assert dataset.test_truth.shape == (8, 6)
    assert cfg.cells.shape == (50, 4)
    assert np.all(cfg.domain.contains(dataset.test_locations))


def test_observation_counts(dataset):
    t = 3
    joint = dataset.batch("joint", "last_day", t)
    assert len(joint.points) == t * (10 + 22 + 22)
    assert len(joint.blocks) == t * 3 * 50
    grid = dataset.batch("grid", "last_day", t)
    assert {o.variable_id for o in grid.points} == {1, 2}
    assert len(grid.blocks) == t * 150
    point = dataset.batch("point", "last_day", t)
    assert len(point.blocks) == 0
    missing = dataset.batch("joint_missing_grid_covariates", "last_day", t)
    assert {o.variable_id for o in missing.blocks} == {3}
    with pytest.raises(ValueError):
        dataset.batch("both", "last_day", t)


def test_training_windows(dataset):
    last = dataset.training_days("last_day", 3)
    ahead = dataset.training_days("one_day_ahead", 3)
    assert list(last) == [4, 5, 6] and list(ahead) == [3, 4, 5]
    # the forecast target day is never in its own training window
    assert SMALL.T_total not in ahead
    _, idx_last, truth_last = dataset.test_targets("last_day", 3)
    _, idx_ahead, truth_ahead = dataset.test_targets("one_day_ahead", 3)
    assert (idx_last, idx_ahead) == (3, 4)
    assert np.array_equal(truth_last, truth_ahead)
    with pytest.raises(ValueError):
        dataset.training_days("tomorrow", 3)


def test_training_values_match_days(dataset):
    b = dataset.batch("point", "one_day_ahead", 2)
    first = [o for o in b.points if o.variable_id == 2 and o.time_index == 1]
    assert np.allclose([o.value for o in first], dataset.point_values[2][:, 3])


def test_sensor_sets_differ(dataset):
    assert not np.allclose(dataset.sensors_response[:10], dataset.sensors_misaligned)


def test_determinism(dataset):
    again = generate_replicate(SMALL, replicate_seed(SMALL.seed, 0))
    other = generate_replicate(SMALL, replicate_seed(SMALL.seed, 1))
    assert np.array_equal(again.point_values[3], dataset.point_values[3])
    assert np.array_equal(again.block_values[1], dataset.block_values[1])
    assert not np.allclose(other.point_values[3], dataset.point_values[3])


def test_noise_levels(dataset):
    # residuals around the latent predictor at the misaligned sensors
    from stfusion.geometry import interpolation_matrix
    mesh = SMALL.generation_mesh()
    W = interpolation_matrix(mesh, dataset.sensors_misaligned)
    clean = 0.5 + W @ dataset.latent[1].T
    resid = dataset.point_values[1] - clean
    assert resid.std() == pytest.approx(0.3, rel=0.35)


def test_config_validation():
    with pytest.raises(ValueError):
        SimConfig(T_total=5, t_train=(5,))
    with pytest.raises(ValueError):
        SimConfig(grid_shape=(0, 5))
    with pytest.raises(ValueError):
        SimConfig(t_train=())


def test_study_spec(dataset):
    spec = study_spec(dataset, "joint", "last_day", 2)
    assert spec.T == 2 and len(spec.fields) == 3 and len(spec.fixed_effects) == 1


@pytest.mark.filterwarnings("ignore::UserWarning")
def test_fit_replicate_smoke(dataset):
    res = fit_replicate(dataset, "joint", "last_day", 2, design="mode")
    assert res.error == "" and np.isfinite(res.rmspe)
    assert 0.0 <= res.coverage <= 1.0
    assert np.all(res.lower <= res.predictions) and np.all(res.predictions <= res.upper)
    assert "beta_1" in res.summary()


def test_run_study_is_reproducible(tmp_path):
    cfg = SimConfig(T_total=4, t_train=(2,), mc_points_per_cell=20, generation_edge=0.6,
                    generation_buffer=2.0, n_test=5)
    plan = StudyPlan(models=("point",), scenarios=("last_day",), n_replicates=2, design="mode")
    a, b = run_study(cfg, plan), run_study(cfg, plan)
    a.write(tmp_path / "a")
    b.write(tmp_path / "b")
    for name in ("study_params.csv", "study_rmspe.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert [r[:4] for r in a.rmspe] == [(0, "point", 2, "last_day"), (1, "point", 2, "last_day")]
    names = {row[0] for row in a.params}
    assert {"alpha_3", "beta_1", "sigma2_3", "tau2p_3"} <= names
    with pytest.raises(ValueError):
        run_study(cfg, StudyPlan(n_replicates=0))
