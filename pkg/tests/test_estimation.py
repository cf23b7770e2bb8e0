import math

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from convlos.convolution import ConvolutiveLongStay, conv_pdf
from convlos.distributions import ContDistSpec, CountDistSpec, cont_pdf
from convlos.errors import ComponentStarvationError, ConfigError, DegeneratePointError
from convlos.estimation import (
    FitConfig,
    Layout,
    MultiStart,
    QuantileSplit,
    UserSupplied,
    em2d_e_step,
    em_e_step,
    em_m_step,
    fit,
    fit_em,
    fit_em2d,
    fit_mle,
    initialize,
    quantile_split,
)
from convlos.links import DesignMatrix, ParameterMap
from convlos.mixture import MixtureModel, mix_loglik, mix_sample

from conftest import lognormal_pdf, negbin_pmf, normal_pdf

ALL_BUT_M = ("pi", "mu_S", "sigma_S", "r", "p", "sigma")


def _positive_sample(model, n, seed):
    y, _ = mix_sample(model, n, np.random.default_rng(seed))
    return y[y > 0]


# --------------------------------------------------------------------------- #
# E-steps
# --------------------------------------------------------------------------- #


def test_e_step_matches_transcription(truth_model):
    y = [0.4, 2.5, 7.0]
    got = em_e_step(truth_model, y)
    for i, v in enumerate(y):
        short = 0.7 * lognormal_pdf(v, -1, 0.5)
        long = 0.3 * math.fsum(normal_pdf(v - k, 4, 1) * negbin_pmf(k, 2, 0.4) for k in range(200))
        assert got[i, 1] == pytest.approx(long / (short + long), abs=1e-12)
    np.testing.assert_allclose(got.sum(axis=1), 1.0, atol=1e-12)


def test_e_step_equal_factors_gives_half(truth_model):
    y = 3.0
    c = float(conv_pdf(truth_model.long, y))
    # a short component with the same density at y: solve for mu with sigma fixed
    sigma = 1.0
    mu = math.log(y) - math.sqrt(max(-2 * math.log(c * y * sigma * math.sqrt(2 * math.pi)), 0.0)) * sigma
    model = MixtureModel(0.5, ContDistSpec.lognormal(mu, sigma), truth_model.long)
    assert float(cont_pdf(model.short, y)) == pytest.approx(c, rel=1e-12)
    np.testing.assert_allclose(em_e_step(model, [y]), [[0.5, 0.5]], atol=1e-12)


def test_e_step_pi_one(truth_model):
    model = MixtureModel(1.0, truth_model.short, truth_model.long)
    np.testing.assert_array_equal(em_e_step(model, [0.1, 5.0])[:, 1], 1.0)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_zero_density_names_row():
    model = MixtureModel(1.0, ContDistSpec.lognormal(0, 1),
                         ConvolutiveLongStay(CountDistSpec.binomial(2, 0.5), ContDistSpec.normal(0, 0.1)))
    with pytest.raises(DegeneratePointError) as info:
        em_e_step(model, [1.0, 1e300])
    assert info.value.row == 1


def test_e1_marginalises_to_class_posterior(truth_model):
    y = _positive_sample(truth_model, 500, 3)
    resp, grid, post = em2d_e_step(truth_model, y)
    np.testing.assert_allclose(resp, em_e_step(truth_model, y), atol=1e-10)
    np.testing.assert_allclose(post.sum(axis=1), 1.0, atol=1e-10)


def test_e2_point_mass_count():
    model = MixtureModel(0.5, ContDistSpec.lognormal(0, 1),
                         ConvolutiveLongStay(CountDistSpec.multinomial([0, 0, 1.0, 0]),
                                             ContDistSpec.normal(1, 1)))
    _, grid, post = em2d_e_step(model, [0.7, 3.2, 9.0])
    k0 = int(np.flatnonzero(grid == 2)[0])
    np.testing.assert_allclose(post[:, k0], 1.0, atol=1e-15)


# --------------------------------------------------------------------------- #
# M-step
# --------------------------------------------------------------------------- #


def test_m_step_short_closed_form(truth_model):
    y = np.array([0.2, 0.5, 1.1, 3.0])
    resp = np.array([[1.0, 0.0]] * 3 + [[0.0, 1.0]])
    model = em_m_step(y, resp, truth_model)
    logs = np.log(y[:3])
    assert model.short.mu == pytest.approx(logs.mean(), abs=1e-14)
    assert model.short.sigma == pytest.approx(logs.std(), abs=1e-14)
    assert model.pi == pytest.approx(0.25, abs=1e-15)


def test_m_step_half_weights(truth_model):
    y = np.array([0.5, 2.0, 4.0, 6.0])
    model = em_m_step(y, np.full((4, 2), 0.5), truth_model)
    assert model.pi == pytest.approx(0.5, abs=1e-15)


def test_m_step_starvation(truth_model):
    y = np.array([0.5, 2.0, 4.0])
    resp = np.array([[1.0, 0.0]] * 3)
    with pytest.raises(ComponentStarvationError):
        em_m_step(y, resp, truth_model)


# --------------------------------------------------------------------------- #
# Initialisation
# --------------------------------------------------------------------------- #


def test_quantile_split_short_group_below_a_day(truth_model):
    y = _positive_sample(truth_model, 4000, 8)
    init = quantile_split(y, truth_model, 1.0)
    assert init.warning is None
    assert math.exp(init.model.short.mu + init.model.short.sigma**2 / 2) < 1.0


def test_quantile_split_fallback_warns(truth_model):
    y = np.array([0.2, 0.3, 0.5, 0.7])
    init = quantile_split(y, truth_model, 1.0)
    assert init.warning is not None
    result = fit_em(y, truth_model, FitConfig(max_iters=3))
    assert result.warnings


def test_multistart_is_deterministic(truth_model):
    y = _positive_sample(truth_model, 300, 1)
    strategy = MultiStart(k=3)
    a = initialize(y, truth_model, strategy, start=2, seed=9)
    b = initialize(y, truth_model, strategy, start=2, seed=9)
    c = initialize(y, truth_model, strategy, start=2, seed=10)
    assert a.model == b.model
    assert a.model != c.model


def test_config_validation():
    with pytest.raises(ConfigError):
        FitConfig(method="SGD")
    with pytest.raises(ConfigError):
        FitConfig(max_iters=0)
    with pytest.raises(ConfigError):
        FitConfig(loglik_tol=0)
    cfg = FitConfig.from_dict({"method": "EM2D", "init": {"strategy": "MultiStart", "k": 2}})
    assert cfg.init == MultiStart(2) and FitConfig.from_dict(cfg.to_dict()) == cfg


# --------------------------------------------------------------------------- #
# Fitting
# --------------------------------------------------------------------------- #


@pytest.mark.parametrize("method", ["EM", "EM2D"])
def test_traces_are_non_decreasing(truth_model, method):
    y = _positive_sample(truth_model, 400, 2)
    result = fit(y, truth_model, FitConfig(method=method, max_iters=60))
    assert min(np.diff(result.loglik_trace)) >= -1e-9
    assert result.loglik == pytest.approx(mix_loglik(result.theta_hat, y), abs=1e-9)
    np.testing.assert_allclose(result.responsibilities.sum(axis=1), 1.0, atol=1e-12)
    if method == "EM2D":
        np.testing.assert_allclose(result.count_posterior.sum(axis=1), 1.0, atol=1e-10)


@settings(max_examples=8, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(st.integers(0, 10_000), st.sampled_from(["EM", "EM2D"]))
def test_ascent_property_random_data(seed, method):
    rng = np.random.default_rng(seed)
    model = MixtureModel(float(rng.uniform(0.1, 0.6)), ContDistSpec.lognormal(float(rng.uniform(-2, 0)), 0.6),
                         ConvolutiveLongStay(CountDistSpec.poisson(float(rng.uniform(0.5, 4))),
                                             ContDistSpec.normal(3, 1)))
    y = _positive_sample(model, 120, seed)
    template = MixtureModel(0.3, ContDistSpec.lognormal(-1, 0.5),
                            ConvolutiveLongStay(CountDistSpec.poisson(1.0), ContDistSpec.normal(3, 1)))
    result = fit(y, template, FitConfig(method=method, max_iters=40))
    assert min(np.diff(result.loglik_trace), default=0.0) >= -1e-9


def test_single_point_grid_oracle(truth_model):
    y = [6.3]
    result = fit_mle(y, truth_model, FitConfig(method="MLE", fixed=ALL_BUT_M))
    grid = np.arange(0.0, 10.0, 1e-3)
    dens = [float(conv_pdf(ConvolutiveLongStay(truth_model.long.count, ContDistSpec.normal(m, 1.0)), 6.3))
            for m in grid]
    assert result.theta_hat.long.cont.mu == pytest.approx(grid[int(np.argmax(dens))], abs=2e-3)
    fixed = {k: v for k, v in (("pi", 0.3), ("sigma", 1.0))}
    assert result.theta_hat.pi == fixed["pi"] and result.theta_hat.long.cont.sigma == fixed["sigma"]


def test_lognormal_only_data():
    truth = ContDistSpec.lognormal(0.5, 0.8)
    rng = np.random.default_rng(4)
    y = np.exp(rng.normal(0.5, 0.8, 10_000))
    template = MixtureModel(0.3, ContDistSpec.lognormal(0, 1),
                            ConvolutiveLongStay(CountDistSpec.negbin(2, 0.4), ContDistSpec.normal(4, 1)))
    result = fit_mle(y, template, FitConfig(method="MLE", init=UserSupplied(template)))
    assert result.theta_hat.pi < 0.02
    assert result.theta_hat.short.mu == pytest.approx(truth.mu, abs=0.05)
    assert result.theta_hat.short.sigma == pytest.approx(truth.sigma, abs=0.05)


def test_fits_are_reproducible(truth_model):
    y = _positive_sample(truth_model, 500, 6)
    cfg = FitConfig(method="EM", init=MultiStart(k=3), seed=4, max_iters=30)
    a, b = fit(y, truth_model, cfg), fit(y, truth_model, cfg)
    assert a.loglik_trace == b.loglik_trace
    assert a.theta_hat == b.theta_hat
    assert a.n_restarts_used == 3 and len(a.restart_logliks) == 3


def test_fitted_parameters_stay_in_domain(truth_model):
    y = _positive_sample(truth_model, 300, 12)
    for method in ("MLE", "EM", "EM2D"):
        m = fit(y, truth_model, FitConfig(method=method, max_iters=50)).theta_hat
        assert 0 <= m.pi <= 1 and m.short.sigma > 0 and m.long.cont.sigma > 0
        assert m.long.count.r > 0 and 0 < m.long.count.p < 1


def test_constant_covariate_matches_plain_fit(truth_model):
    y = _positive_sample(truth_model, 800, 13)
    matrix = DesignMatrix(np.column_stack([np.ones(y.size), np.zeros(y.size)]), ("intercept", "x"))
    with_map = truth_model.with_maps({"m": ParameterMap("m", [4.0, 0.0], ("intercept", "x"), "identity")})
    a = fit_em2d(y, truth_model, FitConfig(method="EM2D"))
    b = fit_em2d(y, with_map, FitConfig(method="EM2D"), matrix=matrix)
    assert b.loglik == pytest.approx(a.loglik, abs=1e-5)
    assert b.theta_hat.parameter_maps["m"].beta[0] == pytest.approx(a.theta_hat.long.cont.mu, abs=1e-3)


def test_layout_round_trip(truth_model):
    mapped = truth_model.with_maps({"p": ParameterMap("p", [0.2, -0.6], ("intercept", "x"))})
    layout = Layout(mapped)
    assert layout.unpack(layout.pack(mapped)).parameter_maps["p"].beta.tolist() == pytest.approx([0.2, -0.6])


def test_result_serialises(truth_model):
    y = _positive_sample(truth_model, 200, 14)
    doc = fit_em(y, truth_model, FitConfig(max_iters=5)).to_dict(include_posteriors=True)
    assert doc["method"] == "EM" and len(doc["responsibilities"]) == y.size
    assert doc["loglik_trace"][-1] == doc["loglik"]
