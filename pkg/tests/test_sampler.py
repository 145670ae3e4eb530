import math

import numpy as np
import pytest
from scipy import stats

from underreport.areal_data import Graph
from underreport.diagnostics import psrf
from underreport.errors import DataValidationError, NumericalError
from underreport.model import Model, ModelConfig
from underreport.sampler import SamplerConfig, read_draws, run_chain, run_fit, write_draws

from conftest import batch_means_se, tiny_dataset

SHORT = SamplerConfig(n_chains=2, n_iter=3000, burn_in=1000, thin=5, seed=7)


@pytest.fixture(scope="module")
def cluster_model(sim_clustering):
    ds, truth = sim_clustering
    return Model(ds, ModelConfig(mechanism="clustering", k=3, offset="population"), labels=truth["labels"])


@pytest.fixture(scope="module")
def pogit_model(sim_pogit):
    ds, _ = sim_pogit
    return Model(ds, ModelConfig(mechanism="pogit", offset="population"))


@pytest.fixture(scope="module")
def cluster_fit(cluster_model):
    return run_fit(SHORT, cluster_model)


@pytest.fixture(scope="module")
def pogit_fit(pogit_model):
    return run_fit(SHORT, pogit_model)


def test_config_validation():
    with pytest.raises(DataValidationError, match="burn_in"):
        SamplerConfig(n_iter=100, burn_in=100).validate()
    with pytest.raises(DataValidationError, match="thin"):
        SamplerConfig(n_iter=100, burn_in=10, thin=0).validate()
    with pytest.raises(DataValidationError, match="at least 2 draws"):
        SamplerConfig(n_iter=100, burn_in=99, thin=1).validate()
    with pytest.raises(DataValidationError):
        SamplerConfig(n_chains=0).validate()
    p = SamplerConfig.paper_protocol(seed=3)
    assert (p.n_iter, p.burn_in, p.thin, p.n_draws) == (3_000_000, 1_000_000, 3_000, 666)


def test_draw_counts(cluster_fit, cluster_model):
    assert cluster_fit.n_chains == 2
    for ch in cluster_fit.chains:
        assert ch.draws.shape == (SHORT.n_draws, cluster_model.layout.size)
        assert ch.loglik.shape == (SHORT.n_draws, cluster_model.data.n_areas)
    assert SHORT.n_draws == 400


def test_deterministic(cluster_model):
    a = run_chain(SHORT, cluster_model, 99)
    b = run_chain(SHORT, cluster_model, 99)
    assert a.draws.tobytes() == b.draws.tobytes()
    assert a.loglik.tobytes() == b.loglik.tobytes()
    c = run_chain(SHORT, cluster_model, 100)
    assert not np.array_equal(a.draws, c.draws)


def test_chains_distinct_and_seeded(cluster_fit):
    assert cluster_fit.meta["seeds"] == [7, 8]
    assert not np.array_equal(cluster_fit.chains[0].draws, cluster_fit.chains[1].draws)


def test_threads_do_not_change_draws(cluster_model, cluster_fit, monkeypatch):
    monkeypatch.setenv("UNDERREPORT_THREADS", "2")
    again = run_fit(SHORT, cluster_model)
    for a, b in zip(again.chains, cluster_fit.chains):
        assert a.draws.tobytes() == b.draws.tobytes()


@pytest.mark.parametrize("which", ["cluster", "pogit"])
def test_stored_values_match_model(which, request):
    model = request.getfixturevalue(f"{which}_model")
    post = request.getfixturevalue(f"{which}_fit")
    ch = post.chains[0]
    for m in range(0, ch.draws.shape[0], 40):
        x = ch.draws[m]
        assert ch.logpost[m] == pytest.approx(model.log_posterior(x), rel=1e-9, abs=1e-8)
        np.testing.assert_allclose(ch.loglik[m], model.area_loglik(x), rtol=1e-10, atol=1e-10)
    assert ch.max_drift < 1e-8


@pytest.mark.parametrize("which", ["cluster", "pogit"])
def test_invariants_every_draw(which, request):
    model = request.getfixturevalue(f"{which}_model")
    post = request.getfixturevalue(f"{which}_fit")
    lay = model.layout
    for ch in post.chains:
        s = ch.draws[:, lay["s"]]
        assert np.max(np.abs(s.sum(axis=1))) < 1e-9
        assert np.all(ch.draws[:, lay["sigma2_u"]] > 0)
        assert np.all(ch.draws[:, lay["sigma2_s"]] > 0)
        if which == "cluster":
            g = ch.draws[:, lay["gamma"]]
            assert np.all(g[:, 0] > 0) and np.all(g[:, 0] <= model.config.gamma1_upper)
            assert np.all(np.diff(g, axis=1) >= 0)
            assert np.all(g[:, -1] < model.config.gamma_upper)


@pytest.mark.parametrize("which", ["cluster", "pogit"])
def test_acceptance_rates_in_band(which, request):
    model = request.getfixturevalue(f"{which}_model")
    cfg = SamplerConfig(n_chains=1, n_iter=6000, burn_in=3000, thin=10, seed=1)
    ch = run_chain(cfg, model, 1)
    rate = ch.acceptance[np.isfinite(ch.acceptance)]
    assert rate.size == model.layout.size
    assert np.all((rate >= 0.1) & (rate <= 0.6)), (rate.min(), rate.max())


def test_single_chain_psrf_refused(cluster_model):
    cfg = SamplerConfig(n_chains=1, n_iter=500, burn_in=100, thin=2)
    post = run_fit(cfg, cluster_model)
    with pytest.raises(ValueError, match="two chains"):
        psrf(post.column("beta0"))


def test_draw_store_round_trip(tmp_path, cluster_fit, cluster_model):
    write_draws(cluster_fit, tmp_path, cluster_model.data.area_ids)
    back = read_draws(tmp_path)
    assert back.param_names == cluster_fit.param_names
    assert back.meta["seeds"] == cluster_fit.meta["seeds"]
    assert back.meta["model_hash"] == cluster_model.digest()
    for a, b in zip(back.chains, cluster_fit.chains):
        np.testing.assert_array_equal(a.draws, b.draws)
        np.testing.assert_array_equal(a.loglik, b.loglik)
        np.testing.assert_array_equal(a.logpost, b.logpost)
    (tmp_path / "draws.json").write_text('{"format_version": 99}')
    with pytest.raises(DataValidationError, match="unsupported"):
        read_draws(tmp_path)


def test_nonfinite_initial_state_raises(cluster_model, monkeypatch):
    bad = cluster_model.initial_state()
    bad[cluster_model.layout["sigma2_u"]] = -1.0
    monkeypatch.setattr(cluster_model, "initial_state", lambda: bad)
    with pytest.raises(NumericalError, match="initial state"):
        run_chain(SHORT, cluster_model, 1)


def test_island_effect_stays_zero():
    ds = tiny_dataset(y=(3, 0, 5, 2, 4), n_pop=(1000, 2000, 1500, 800, 900), edges=((0, 1), (1, 2), (2, 3)))
    m = Model(ds, ModelConfig(mechanism="clustering", k=2), labels=[1, 2, 1, 2, 1])
    ch = run_chain(SamplerConfig(n_chains=1, n_iter=2000, burn_in=500, thin=5), m, 3)
    assert np.all(ch.draws[:, m.layout["s"]][:, 4] == 0.0)
    assert np.max(np.abs(ch.draws[:, m.layout["s"]][:, :4].sum(axis=1))) < 1e-9


def test_two_components_centred_separately():
    ds = tiny_dataset(y=(3, 0, 5, 2), n_pop=(1000, 2000, 1500, 800), edges=((0, 1), (2, 3)))
    m = Model(ds, ModelConfig(mechanism="clustering", k=1), labels=[1, 1, 1, 1])
    ch = run_chain(SamplerConfig(n_chains=1, n_iter=2000, burn_in=500, thin=5), m, 3)
    s = ch.draws[:, m.layout["s"]]
    assert np.max(np.abs(s[:, :2].sum(axis=1))) < 1e-9
    assert np.max(np.abs(s[:, 2:].sum(axis=1))) < 1e-9
    assert s[:, 0].std() > 0


# ---------------------------------------------------------------- prior-only runs

PRIOR_CFG = SamplerConfig(n_chains=2, n_iter=120_000, burn_in=10_000, thin=20, seed=11)


@pytest.fixture(scope="module")
def prior_fit_k3():
    m = Model(tiny_dataset(), ModelConfig(mechanism="clustering", k=3, use_likelihood=False),
              labels=[1, 2, 3, 1])
    return m, run_fit(PRIOR_CFG, m)


def test_prior_only_beta0(prior_fit_k3):
    _, post = prior_fit_k3
    b0 = post.column("beta0").ravel()
    se = batch_means_se(b0)
    assert abs(b0.mean() + 8.0) < 3 * se
    assert abs(((b0 + 8.0) ** 2).mean() - 1.0) < 3 * batch_means_se((b0 + 8.0) ** 2)


def test_prior_only_gamma_matches_forward_simulation(prior_fit_k3):
    m, post = prior_fit_k3
    b1, bk = m.config.gamma1_upper, m.config.gamma_upper
    rng = np.random.default_rng(0)
    n = 20_000
    g = np.empty((n, 3))
    g[:, 0] = rng.uniform(0, b1, n)
    for j in (1, 2):
        g[:, j] = rng.uniform(g[:, j - 1], bk)
    for j in range(3):
        draws = post.column(f"gamma[{j + 1}]").ravel()
        # thin further so the KS test sees near-independent draws
        res = stats.ks_2samp(draws[::5], g[:, j])
        assert res.pvalue > 0.01, (j, res)


def test_gamma_single_cluster_support():
    m = Model(tiny_dataset(), ModelConfig(mechanism="clustering", k=1, use_likelihood=False),
              labels=[1, 1, 1, 1])
    ch = run_chain(SamplerConfig(n_chains=1, n_iter=20_000, burn_in=2_000, thin=5), m, 5)
    g = ch.draws[:, m.layout["gamma"]][:, 0]
    assert g.min() > 0 and g.max() <= 0.05
    assert abs(g.mean() - 0.025) < 3 * batch_means_se(g)


def test_prior_only_variance_halfnormal(prior_fit_k3):
    _, post = prior_fit_k3
    for nm in ("sigma2_u", "sigma2_s"):
        v = post.column(nm).ravel()
        assert abs(v.mean() - math.sqrt(2 / math.pi)) < 3 * batch_means_se(v)
