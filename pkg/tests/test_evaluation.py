import numpy as np
import pytest

from distdiff import config as cfglib
from distdiff.evaluation import (
    checker_black_cells,
    checker_cell_index,
    gen_checkerboard,
    gen_two_gaussians,
    make_dataset,
    metric_mmd2,
    metric_posterior_std,
)
from distdiff.gaussian_oracle import TWO_GAUSSIANS, GaussianPosteriorDenoiser, GaussianSpec, MixturePosteriorDenoiser, posterior_single
from distdiff.schedule import FLOW_MATCHING


def test_two_gaussians_moments():
    ds = gen_two_gaussians(50_000, seed=1)
    pts = ds.points
    left = pts[:, 0] < 0
    assert abs(left.mean() - 0.5) < 0.01
    np.testing.assert_allclose(pts[left].mean(axis=0), [-3, 3], atol=0.02)
    np.testing.assert_allclose(pts[~left].var(axis=0), [0.25, 0.25], rtol=0.03)
    np.testing.assert_array_equal(pts, gen_two_gaussians(50_000, seed=1).points)


def test_checkerboard_support():
    pts = gen_checkerboard(20_000, seed=0).points
    assert np.all(np.abs(pts) <= 4.0)
    ij = checker_cell_index(pts)
    assert np.all((ij.sum(axis=1) % 2) == 0)
    counts = np.bincount(ij[:, 0] * 4 + ij[:, 1], minlength=16)
    assert np.count_nonzero(counts) == 8
    assert counts[counts > 0].min() > 2000
    assert len(checker_black_cells()) == 8


def test_dataset_errors():
    with pytest.raises(ValueError):
        make_dataset("moons")
    with pytest.raises(ValueError):
        gen_checkerboard(0)


def test_mmd2_metric_sanity():
    a = gen_two_gaussians(2000, seed=1).points
    b = gen_two_gaussians(2000, seed=2).points
    c = gen_checkerboard(2000, seed=3).points
    same, diff = metric_mmd2(a, b), metric_mmd2(a, c)
    assert abs(same) < 2e-3
    assert diff > 50 * max(abs(same), 1e-5)


def test_posterior_std_oracle_against_closed_form_gaussian():
    tgt = GaussianSpec([0.5, -0.5], 2.0)
    t = np.array([0.2, 0.5, 0.8])
    curve = metric_posterior_std(None, tgt, t, n_eval=2000, n_draws=8)
    exact = [np.sqrt(posterior_single(tgt, FLOW_MATCHING, ti, [0.0, 0.0]).var) for ti in t]
    # E[sample std with ddof=1 over 8 draws] = c4(8) * sd
    c4 = 0.9650304561473718
    np.testing.assert_allclose(curve.oracle, c4 * np.array(exact), rtol=0.02)
    assert curve.model is None


def test_posterior_std_identical_model_gives_identical_curve():
    curve = metric_posterior_std(MixturePosteriorDenoiser(TWO_GAUSSIANS), TWO_GAUSSIANS, [0.1, 0.5, 0.9], n_eval=256)
    np.testing.assert_array_equal(curve.model, curve.oracle)


def test_posterior_std_zero_for_mean_predictor():
    class Mean:
        noise_dim = 2

        def __call__(self, t, x_t, xi):
            return np.zeros_like(x_t)

    curve = metric_posterior_std(Mean(), TWO_GAUSSIANS, [0.5], n_eval=64)
    assert curve.model[0] == 0.0 and curve.oracle[0] > 0.3
    with pytest.raises(TypeError):
        metric_posterior_std(Mean(), "mixture", [0.5])


def test_gaussian_oracle_std_shrinks_with_f():
    tgt = GaussianSpec([0.0], 1.0)
    full = metric_posterior_std(GaussianPosteriorDenoiser(tgt, 1.0, 1.0), tgt, [0.5], n_eval=500)
    shrunk = metric_posterior_std(GaussianPosteriorDenoiser(tgt, 0.5, 1.0), tgt, [0.5], n_eval=500)
    assert shrunk.model[0] / full.model[0] == pytest.approx(np.sqrt(1 / 7), rel=1e-12)


# ---- config files ---------------------------------------------------------------


def test_config_round_trip(tmp_path):
    cfg = cfglib.update(cfglib.RunConfig(), {"score.lam": "0.5", "train.steps": 10, "net.preset": "paper", "score.weight": "sigmoid"})
    path = tmp_path / "c.ini"
    path.write_text(cfglib.dumps(cfg))
    back = cfglib.load(path)
    assert back == cfg
    assert back.train_config().digest() == cfg.train_config().digest()
    assert cfglib.as_dict(back)["score"]["lam"] == 0.5


@pytest.mark.parametrize(
    "overrides,needle",
    [
        ({"train.stepz": 1}, "train.stepz"),
        ({"model.width": 1}, "unknown section"),
        ({"steps": 1}, "section.key"),
        ({"train.steps": "ten"}, "train.steps"),
        ({"net.hidden_dim": 0}, "net.hidden_dim"),
    ],
)
def test_config_errors_name_the_key(overrides, needle):
    with pytest.raises(cfglib.ConfigError, match=needle):
        cfglib.update(cfglib.RunConfig(), overrides)


def test_config_cross_field_errors():
    cfg = cfglib.update(cfglib.RunConfig(), {"train.population": 1})
    with pytest.raises(cfglib.ConfigError):
        cfg.train_config()


def test_config_file_errors(tmp_path):
    p = tmp_path / "bad.ini"
    p.write_text("no section header\n")
    with pytest.raises(cfglib.ConfigError):
        cfglib.load(p)
