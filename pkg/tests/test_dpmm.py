import numpy as np
import pytest
from scipy import integrate, stats

from stagedgp import bench, core, dpmm
from stagedgp.errors import ArgumentError


def _blobs(seed):
    rng = np.random.default_rng(seed)
    return np.concatenate([rng.normal(0, 0.1, 100), rng.normal(10, 0.1, 100)])[:, None]


def _benchmark_data(name, n, seed):
    prob = bench.make_problem(name)
    X = prob.design(n, seed)
    ed = core.ExperimentalDesign(X, prob.evaluate(X))
    return core.fit_standardizer(ed).standardize(ed.joint())


def test_stick_breaking_examples():
    np.testing.assert_allclose(dpmm.stick_breaking_weights([0.5, 0.5]), [0.5, 0.25, 0.25])
    np.testing.assert_allclose(dpmm.stick_breaking_weights([1.0, 0.3]), [1, 0, 0])
    np.testing.assert_allclose(dpmm.stick_breaking_weights([0.0, 0.0]), [0, 0, 1])
    with pytest.raises(ArgumentError):
        dpmm.stick_breaking_weights([0.5, 1.2])


def test_stick_breaking_sums_to_one():
    v = np.random.default_rng(0).random(19)
    assert dpmm.stick_breaking_weights(v).sum() == pytest.approx(1.0)


@pytest.mark.parametrize("seed", range(20))
def test_two_blobs_recovered(seed):
    data = _blobs(seed)
    _, res = dpmm.fit(data, dpmm.DpmmConfig(truncation=10), seed)
    assert res.n_clusters == 2
    truth = np.repeat([0, 1], 100)
    lab = res.labels
    assert np.array_equal(lab == lab[0], truth == 0)


def test_single_blob():
    data = np.random.default_rng(1).normal(size=(200, 1))
    _, res = dpmm.fit(data, dpmm.DpmmConfig(truncation=10), 0)
    assert res.n_clusters == 1


def test_deterministic():
    data = _blobs(3)
    _, a = dpmm.fit(data, dpmm.DpmmConfig(truncation=10), 5)
    _, b = dpmm.fit(data, dpmm.DpmmConfig(truncation=10), 5)
    np.testing.assert_array_equal(a.labels, b.labels)
    np.testing.assert_array_equal(a.responsibilities, b.responsibilities)
    assert a.elbo == b.elbo


def test_result_invariants():
    data = _benchmark_data("manhattan", 200, 4)
    cfg = dpmm.DpmmConfig()
    state, res = dpmm.fit(data, cfg, 4)
    np.testing.assert_allclose(state.phi.sum(axis=1), 1, atol=1e-10)
    np.testing.assert_allclose(res.responsibilities.sum(axis=1), 1, atol=1e-10)
    np.testing.assert_array_equal(res.labels, np.argmax(res.responsibilities, axis=1) + 1)
    assert res.weights.sum() <= 1 + 1e-9
    assert np.all(res.weights >= cfg.prune_weight)
    assert np.all(np.diff(res.weights) <= 0)
    assert res.n_clusters <= cfg.truncation


def test_non_finite_data():
    with pytest.raises(ArgumentError):
        dpmm.fit(np.array([[0.0], [np.nan], [1.0]]))


@pytest.mark.parametrize("name", ["manhattan", "truss"])
def test_elbo_monotone_on_benchmarks(name):
    data = _benchmark_data(name, 200, 11)
    cfg = dpmm.DpmmConfig().resolved(data.shape[1])
    for seed in range(10):
        state = dpmm.run_inference(data, cfg, np.random.default_rng(seed))
        assert np.all(np.diff(state.elbo_trace) >= -1e-8)


def test_single_sweep_from_random_state_does_not_decrease():
    rng = np.random.default_rng(2)
    data = rng.normal(size=(60, 2))
    cfg = dpmm.DpmmConfig(truncation=6).resolved(2)
    phi = rng.dirichlet(np.ones(6), size=60)
    st = dpmm.VariationalState(
        gamma=dpmm._update_gamma(phi, cfg.alpha), tau=dpmm._update_tau(data, phi, cfg), phi=phi
    )
    before = dpmm.elbo(st, data, cfg)
    assert dpmm.elbo(dpmm.sweep(st, data, cfg), data, cfg) >= before - 1e-8


def test_elbo_permutation_exchangeable():
    data = _blobs(4)
    cfg = dpmm.DpmmConfig(truncation=10).resolved(1)
    state, _ = dpmm.fit(data, dpmm.DpmmConfig(truncation=10), 0)
    perm = np.random.default_rng(0).permutation(len(data))
    permuted = dpmm.VariationalState(gamma=state.gamma, tau=state.tau, phi=state.phi[perm])
    assert dpmm.elbo(permuted, data[perm], cfg) == pytest.approx(dpmm.elbo(state, data, cfg), abs=1e-8)


def test_elbo_dimension_mismatch():
    data = _blobs(0)
    state, _ = dpmm.fit(data, dpmm.DpmmConfig(truncation=10), 0)
    with pytest.raises(ArgumentError):
        dpmm.elbo(state, data[:50], dpmm.DpmmConfig(truncation=10).resolved(1))


def _predictive_density(x, state):
    # q(mu, s2) is normal-inverse-gamma in 1-D; integrate the variance numerically
    w = dpmm.expected_weights(state.gamma)
    tau = state.tau
    total = 0.0
    for k in range(len(w)):
        m, kap, nu, psi = tau.mean[k, 0], tau.kappa[k], tau.dof[k], tau.scatter[k, 0, 0]
        prior = stats.invgamma(nu / 2, scale=psi / 2)
        f = lambda s2: stats.norm.pdf(x, m, np.sqrt(s2 * (1 + 1 / kap))) * prior.pdf(s2)
        lo, hi = prior.ppf(1e-12), prior.ppf(1 - 1e-12)
        total += w[k] * integrate.quad(f, lo, hi, limit=200, points=[prior.mean()])[0]
    return total


def test_elbo_below_predictive_loglik():
    rng = np.random.default_rng(9)
    data = np.concatenate([rng.normal(-2, 0.5, 25), rng.normal(2, 0.5, 25)])[:, None]
    cfg = dpmm.DpmmConfig(truncation=6)
    state, _ = dpmm.fit(data, cfg, 0)
    loglik = sum(np.log(_predictive_density(x, state)) for x in data[:, 0])
    assert state.elbo_trace[-1] <= loglik


def test_predict_responsibility():
    data = _blobs(6)
    _, res = dpmm.fit(data, dpmm.DpmmConfig(truncation=10), 0)
    for k in range(res.n_clusters):
        p = dpmm.predict_responsibility(res, res.cluster_means[k])
        assert p[k] > 0.999
    for w in np.random.default_rng(0).normal(5, 5, size=(10, 1)):
        assert dpmm.predict_responsibility(res, w).sum() == pytest.approx(1.0)


def test_predict_responsibility_single_cluster():
    data = np.random.default_rng(1).normal(size=(200, 1))
    _, res = dpmm.fit(data, dpmm.DpmmConfig(truncation=10), 0)
    np.testing.assert_allclose(dpmm.predict_responsibility(res, [0.3]), [1.0])


def test_duplicated_points_share_responsibilities():
    rng = np.random.default_rng(3)
    base = rng.normal(size=(40, 2))
    data = np.vstack([base, base[:5]])
    _, res = dpmm.fit(data, dpmm.DpmmConfig(truncation=8), 1)
    np.testing.assert_allclose(res.responsibilities[:5], res.responsibilities[40:], atol=1e-12)


@pytest.mark.slow
def test_cluster_count_grows_with_nested_designs():
    prob = bench.make_problem("manhattan")
    hits = 0
    for seed in range(20):
        X = prob.design(400, seed + 1)
        y = prob.evaluate(X)
        ks = []
        for n in (100, 200, 400):
            ed = core.ExperimentalDesign(X[:n], y[:n])
            z = core.fit_standardizer(ed).standardize(ed.joint())
            ks.append(dpmm.fit(z, dpmm.DpmmConfig(), seed)[1].n_clusters)
        hits += ks[0] <= ks[1] <= ks[2]
    assert hits >= 15
