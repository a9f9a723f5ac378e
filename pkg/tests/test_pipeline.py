import numpy as np
import pytest

from stagedgp import core, gp, pipeline
from stagedgp.errors import ArgumentError, ArtifactError, StageError


def step(x):
    return np.where(x < 0, 0.0, 10.0 + x)


@pytest.fixture(scope="module")
def step_fit():
    x = np.linspace(-1, 1, 50)
    ed = core.ExperimentalDesign(x[:, None], step(x))
    return x, ed, pipeline.fit_pipeline(ed, pipeline.PipelineConfig(), seed=0)


@pytest.fixture(scope="module")
def sin_fit():
    # a gently curved branch; a full period is a bent manifold that a Gaussian mixture splits
    x = np.linspace(-1, 1, 30)
    ed = core.ExperimentalDesign(x[:, None], np.sin(x))
    return x, ed, pipeline.fit_pipeline(ed, pipeline.PipelineConfig(), seed=0)


def _test_grid():
    # cell midpoints: no probe sits exactly on the discontinuity
    return (np.arange(2000) + 0.5) / 1000 - 1


def test_step_clusters(step_fit):
    x, _, fp = step_fit
    assert fp.n_clusters == 2
    pos = fp.labels[np.argmax(x)]
    np.testing.assert_array_equal(fp.labels == pos, x >= 0)
    for k in (1, 2):
        np.testing.assert_array_equal(
            fp.local_gps[k - 1].training_inputs[:, 0],
            fp.standardizer.standardize_inputs(x[fp.labels == k][:, None])[:, 0],
        )


def test_step_hard_interior(step_fit):
    _, _, fp = step_fit
    xt = np.concatenate([np.linspace(-0.9, -0.2, 30), np.linspace(0.2, 0.9, 30)])
    pb = pipeline.predict_batch(fp, xt[:, None], "hard")
    np.testing.assert_allclose(pb.mean, step(xt), atol=1e-3)


def test_step_direct_much_worse(step_fit):
    _, _, fp = step_fit
    xt = _test_grid()
    yt = step(xt)
    hard = core.nmse(yt, pipeline.predict_batch(fp, xt[:, None], "hard").mean)
    direct = core.nmse(yt, pipeline.predict_batch(fp, xt[:, None], "direct").mean)
    assert direct >= 5 * hard


def test_step_categorical_avoids_gap(step_fit):
    x, _, fp = step_fit
    xt = _test_grid()
    pb = pipeline.predict_batch(fp, xt[:, None], "categorical")
    pos = fp.labels[np.argmax(x)]
    ok = (pb.label == pos) == (xt >= 0)
    in_gap = (pb.mean > 1) & (pb.mean < 9)
    assert np.mean(~in_gap[ok]) >= 0.99


def test_categorical_interpolates_training_points():
    x = np.linspace(-1, 1, 40)
    ed = core.ExperimentalDesign(x[:, None], step(x))
    cfg = pipeline.PipelineConfig(categorical_gp=gp.GpConfig(kernel="gaussian", nugget=0.0))
    fp = pipeline.fit_pipeline(ed, cfg, seed=1)
    pb = pipeline.predict_batch(fp, x[:, None], "categorical")
    np.testing.assert_array_equal(pb.label, fp.labels)
    np.testing.assert_allclose(pb.mean, step(x), atol=1e-6)


def test_soft_properties(step_fit):
    _, _, fp = step_fit
    xt = np.linspace(-1, 1, 301)[:, None]
    soft = pipeline.predict_batch(fp, xt, "soft")
    hard = pipeline.predict_batch(fp, xt, "hard")
    np.testing.assert_allclose(soft.class_probs.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(soft.class_probs >= 0)
    Xs = fp.standardizer.standardize_inputs(xt)
    M, V = pipeline._local_predictions(fp, Xs)
    M = fp.standardizer.destandardize_outputs(M)
    assert np.all(soft.mean >= M.min(axis=1) - 1e-9) and np.all(soft.mean <= M.max(axis=1) + 1e-9)
    np.testing.assert_allclose(soft.mean, np.sum(soft.class_probs * M, axis=1), atol=1e-9)
    sure = soft.class_probs.max(axis=1) > 1 - 1e-9
    np.testing.assert_allclose(soft.mean[sure], hard.mean[sure], atol=1e-6)
    assert np.all(soft.variance >= 0)


def test_soft_mixture_arithmetic(step_fit):
    # equal weights on local means 0 and 10 give mean 5 and the law-of-total-variance spread
    _, _, fp = step_fit
    probs = np.array([[0.5, 0.5]])
    M, V = np.array([[0.0, 10.0]]), np.array([[1.0, 3.0]])
    mean = np.sum(probs * M, axis=1)
    var = np.sum(probs * (V + M * M), axis=1) - mean**2
    assert mean[0] == 5.0 and var[0] == pytest.approx(2.0 + 25.0)


def test_sin_single_cluster_reduces(sin_fit):
    x, _, fp = sin_fit
    assert fp.n_clusters == 1 and fp.classifier is None
    xt = np.linspace(-1, 1, 200)[:, None]
    direct = pipeline.predict_batch(fp, xt, "direct")
    for mode in ("hard", "soft", "categorical"):
        pb = pipeline.predict_batch(fp, xt, mode)
        np.testing.assert_allclose(pb.mean, direct.mean, atol=1e-10)
        np.testing.assert_allclose(pb.variance, direct.variance, atol=1e-9)
        np.testing.assert_allclose(pb.class_probs, 1.0)


def test_direct_baseline_sin(sin_fit):
    _, ed, _ = sin_fit
    base = pipeline.fit_direct_baseline(ed, seed=0)
    xt = np.linspace(-1, 1, 1000)
    mean, _ = pipeline.predict_direct(base, xt[:, None])
    assert core.nmse(np.sin(xt), mean) < 1e-3
    again = pipeline.fit_direct_baseline(ed, seed=0)
    np.testing.assert_array_equal(pipeline.predict_direct(again, xt[:, None])[0], mean)


def test_deterministic(step_fit):
    _, ed, fp = step_fit
    fp2 = pipeline.fit_pipeline(ed, pipeline.PipelineConfig(), seed=0)
    assert pipeline.dumps(fp) == pipeline.dumps(fp2)
    xt = np.linspace(-1, 1, 50)[:, None]
    for mode in pipeline.PREDICT_MODES:
        a, b = pipeline.predict_batch(fp, xt, mode), pipeline.predict_batch(fp2, xt, mode)
        np.testing.assert_array_equal(a.mean, b.mean)
        np.testing.assert_array_equal(a.variance, b.variance)


def test_single_point_wrappers(step_fit):
    _, _, fp = step_fit
    p = pipeline.predict_hard(fp, [0.5])
    assert p.mean == pytest.approx(10.5, abs=1e-3) and p.class_probs.sum() == pytest.approx(1)
    assert pipeline.predict_soft(fp, [0.5]).label == p.label
    assert pipeline.predict_categorical(fp, [0.5]).mean == pytest.approx(10.5, abs=1e-2)


def test_serialization_roundtrip(step_fit, tmp_path):
    _, _, fp = step_fit
    path = tmp_path / "model.json"
    pipeline.save(fp, path)
    fp2 = pipeline.load(path)
    assert pipeline.dumps(fp2) == pipeline.dumps(fp)
    xt = np.linspace(-1, 1, 77)[:, None]
    for mode in pipeline.PREDICT_MODES:
        a, b = pipeline.predict_batch(fp, xt, mode), pipeline.predict_batch(fp2, xt, mode)
        np.testing.assert_array_equal(a.mean, b.mean)
        np.testing.assert_array_equal(a.variance, b.variance)
        np.testing.assert_array_equal(a.label, b.label)


def test_artifact_rejects_foreign_versions(step_fit):
    _, _, fp = step_fit
    d = pipeline.to_dict(fp)
    for key, bad in (("version", 99), ("schema", "0" * 16), ("format", "other")):
        with pytest.raises(ArtifactError):
            pipeline.from_dict({**d, key: bad})
    with pytest.raises(ArtifactError):
        pipeline.loads("{not json")


def test_too_few_points():
    x = np.linspace(0, 1, 9)
    with pytest.raises(ArgumentError):
        pipeline.fit_pipeline(core.ExperimentalDesign(x[:, None], x))


def test_stage_errors_are_tagged():
    x = np.linspace(0, 1, 12)
    cfg = pipeline.PipelineConfig(gp=gp.GpConfig(budget=2))
    with pytest.raises(StageError) as info:
        pipeline.fit_pipeline(core.ExperimentalDesign(x[:, None], np.sin(x)), cfg)
    assert info.value.stage == "regression"


def test_merge_small_clusters():
    labels = np.array([1] * 10 + [2] * 8 + [3] * 2)
    means = np.array([[0.0, 0.0], [5.0, 5.0], [4.0, 4.5]])
    covs = np.array([np.eye(2)] * 3)
    out = pipeline.merge_small_clusters(labels, means, covs, 3)
    np.testing.assert_array_equal(out, [1] * 10 + [2] * 10)


def test_predict_mode_validation(step_fit):
    _, _, fp = step_fit
    with pytest.raises(ArgumentError):
        pipeline.predict_batch(fp, [[0.1]], "bogus")
    with pytest.raises(ArgumentError):
        pipeline.predict_batch(fp, [[0.1, 0.2]], "hard")
