"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL verdict line that pytest echoes in its terminal
summary; run ``pytest tests/test_acceptance.py -v`` to see them.
"""

import math
import time

import numpy as np
import pytest
from scipy import integrate

from convlos.cli import main, simulate_positive
from convlos.convolution import ConvolutiveLongStay, conv_cdf, conv_pdf
from convlos.distributions import (
    ContDistSpec,
    CountDistSpec,
    cont_pdf,
    count_pmf,
    count_support_max,
)
from convlos.estimation import FitConfig, UserSupplied, em2d_e_step, em_e_step, fit
from convlos.gof import baseline_models, compare
from convlos.links import DesignMatrix, ParameterMap
from convlos.mixture import MixtureModel, mix_cdf, mix_loglik, mix_pdf, save_model

from conftest import (
    ACCEPTANCE_LINES,
    binomial_pmf,
    cmp_pmf,
    lognormal_pdf,
    negbin_pmf,
    normal_pdf,
    poisson_pmf,
)

TARGETS = ("pi", "mu_S", "sigma_S", "r", "p", "m", "sigma")
TRUTH = MixtureModel(0.3, ContDistSpec.lognormal(-1.0, 0.5),
                     ConvolutiveLongStay(CountDistSpec.negbin(2.0, 0.4), ContDistSpec.normal(4.0, 1.0)))
LOGLIK_TOL = FitConfig().loglik_tol
N_BOOT = 20
BOOT_TOL = 1e-4


def verdict(number, title, ok, detail):
    line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


# --------------------------------------------------------------------------- #
# 1. density correctness
# --------------------------------------------------------------------------- #

COUNTS = {
    "negbin": (CountDistSpec.negbin(2.0, 0.4), lambda k: negbin_pmf(k, 2.0, 0.4), 300),
    "poisson": (CountDistSpec.poisson(3.0), lambda k: poisson_pmf(k, 3.0), 120),
    "cmp": (CountDistSpec.cmp(2.0, 0.7), None, 150),
    "binomial": (CountDistSpec.binomial(10, 0.3), lambda k: binomial_pmf(k, 10, 0.3), 11),
    "multinomial": (CountDistSpec.multinomial([0.1, 0.2, 0.3, 0.4]),
                    lambda k: [0.1, 0.2, 0.3, 0.4][k], 4),
}
CONTS = {
    "normal": (ContDistSpec.normal(4.0, 1.0), lambda x: normal_pdf(x, 4.0, 1.0)),
    "lognormal": (ContDistSpec.lognormal(1.0, 0.5), lambda x: lognormal_pdf(x, 1.0, 0.5)),
}


def _pmf_table(name):
    _, pmf, size = COUNTS[name]
    if name == "cmp":
        z = math.fsum(math.exp(j * math.log(2.0) - 0.7 * math.lgamma(j + 1)) for j in range(400))
        return [math.exp(k * math.log(2.0) - 0.7 * math.lgamma(k + 1)) / z for k in range(size)]
    return [pmf(k) for k in range(size)]


def _explicit_negbin_normal(y, r, p, m, s):
    total = []
    for k in range(400):
        coef = math.exp(math.lgamma(r + k) - math.lgamma(r) - math.lgamma(k + 1))
        total.append(coef * p**r * (1 - p) ** k * math.exp(-((y - k - m) ** 2) / (2 * s * s))
                     / (s * math.sqrt(2 * math.pi)))
    return math.fsum(total)


def test_criterion_1_density_correctness():
    started = time.perf_counter()
    y = np.linspace(0.05, 25.0, 100)
    worst = 0.0
    for cname, (count, _, _) in COUNTS.items():
        table = _pmf_table(cname)
        for ename, (cont, pdf) in CONTS.items():
            model = ConvolutiveLongStay(count, cont)
            oracle = np.array([math.fsum(pdf(v - k) * w for k, w in enumerate(table)) for v in y])
            worst = max(worst, float(np.abs(conv_pdf(model, y) - oracle).max()))
    nb = ConvolutiveLongStay(CountDistSpec.negbin(2.0, 0.4), ContDistSpec.normal(4.0, 1.0))
    explicit = np.array([_explicit_negbin_normal(v, 2.0, 0.4, 4.0, 1.0) for v in y])
    worst_eq = float(np.abs(conv_pdf(nb, y) - explicit).max())
    elapsed = time.perf_counter() - started
    verdict(1, "density correctness", worst <= 1e-10 and worst_eq <= 1e-12 and elapsed < 10,
            f"oracle max err {worst:.2e} (<=1e-10), explicit NegBin*Normal {worst_eq:.2e} (<=1e-12), "
            f"{elapsed:.1f}s (<10s)")


# --------------------------------------------------------------------------- #
# 2. normalisation
# --------------------------------------------------------------------------- #


def _integral(pdf, lo, hi, points=()):
    value, _ = integrate.quad(lambda t: float(pdf(t)), lo, hi, limit=1000, points=points or None,
                              epsabs=1e-12, epsrel=1e-12)
    return value


def test_criterion_2_normalisation():
    started = time.perf_counter()
    errors = {}
    errors["normal"] = _integral(lambda t: cont_pdf(ContDistSpec.normal(4, 1), t), -40, 50) - 1
    errors["lognormal"] = _integral(lambda t: cont_pdf(ContDistSpec.lognormal(1, 0.5), t), 0, 400,
                                    points=(1, 3, 10)) - 1
    for name, (count, _, _) in COUNTS.items():
        k = np.arange(count_support_max(count, 1e-15) + 1)
        errors[name] = math.fsum(count_pmf(count, k)) - 1
    for cname, (count, _, _) in COUNTS.items():
        for ename, (cont, _) in CONTS.items():
            model = ConvolutiveLongStay(count, cont)
            lo = -10.0 if ename == "normal" else 0.0
            marks = tuple(range(1, 40, 3))
            errors[f"{cname}*{ename}"] = _integral(lambda t: conv_pdf(model, t), lo, 160, marks) - 1
    # a normal recovery time leaves a sliver of long-stay mass on y <= 0
    below_zero = TRUTH.pi * float(conv_cdf(TRUTH.long, 0.0))
    errors["mixture"] = _integral(lambda t: mix_pdf(TRUTH, t) if t > 0 else 0.0, 0, 160,
                                  (0.2, 0.5, 1, 2, 4, 8, 16)) + below_zero - 1
    worst = max(errors, key=lambda k: abs(errors[k]))
    elapsed = time.perf_counter() - started
    ok = abs(errors[worst]) <= 2e-6 and elapsed < 30
    verdict(2, "normalisation", ok,
            f"{len(errors)} densities, worst |mass-1| {abs(errors[worst]):.2e} ({worst}) (<=2e-6), "
            f"{elapsed:.1f}s (<30s)")


# --------------------------------------------------------------------------- #
# 3. CMP reduction
# --------------------------------------------------------------------------- #


def test_criterion_3_cmp_reduction():
    k = np.arange(101)
    worst = 0.0
    for lam in (0.5, 2.0, 10.0):
        diff = count_pmf(CountDistSpec.cmp(lam, 1.0), k) - count_pmf(CountDistSpec.poisson(lam), k)
        worst = max(worst, float(np.abs(diff).max()))
    verdict(3, "CMP(nu=1) equals Poisson", worst <= 1e-12, f"max |diff| {worst:.2e} (<=1e-12)")


# --------------------------------------------------------------------------- #
# 4. ascent
# --------------------------------------------------------------------------- #


def _random_model(rng):
    return MixtureModel(
        float(rng.uniform(0.15, 0.7)),
        ContDistSpec.lognormal(float(rng.uniform(-2, 0)), float(rng.uniform(0.3, 1.0))),
        ConvolutiveLongStay(CountDistSpec.negbin(float(rng.uniform(0.5, 5)), float(rng.uniform(0.2, 0.8))),
                            ContDistSpec.normal(float(rng.uniform(2, 6)), float(rng.uniform(0.5, 2)))))


def test_criterion_4_em_ascent():
    rng = np.random.default_rng(404)
    worst, runs = 0.0, 0
    for _ in range(50):
        y, _ = simulate_positive(_random_model(rng), 200, rng)
        start = _random_model(rng)
        for method in ("EM", "EM2D"):
            result = fit(y, start, FitConfig(method=method, max_iters=100, init=UserSupplied(start)))
            worst = min(worst, float(np.diff(result.loglik_trace).min(initial=0.0)))
            runs += 1
    verdict(4, "EM and 2d-EM ascent", worst >= -1e-9,
            f"{runs} runs, most negative step {worst:.2e} (>=-1e-9)")


# --------------------------------------------------------------------------- #
# 5. E-step equivalence
# --------------------------------------------------------------------------- #


def test_criterion_5_e_step_equivalence():
    rng = np.random.default_rng(505)
    cases = []
    for count in (CountDistSpec.negbin(2, 0.4), CountDistSpec.poisson(3), CountDistSpec.cmp(2, 0.7),
                  CountDistSpec.binomial(6, 0.5), CountDistSpec.multinomial([0.2, 0.5, 0.3])):
        for cont in (ContDistSpec.normal(4, 1), ContDistSpec.lognormal(1, 0.5)):
            model = MixtureModel(0.4, ContDistSpec.lognormal(-1, 0.5), ConvolutiveLongStay(count, cont))
            y, _ = simulate_positive(model, 1000, rng)
            cases.append((model, y, None))
    x = rng.integers(0, 2, 1000).astype(float)
    matrix = DesignMatrix(np.column_stack([np.ones(x.size), x]), ("intercept", "x"))
    covariate = TRUTH.with_maps({"m": ParameterMap("m", [4.0, 1.5], ("intercept", "x"), "identity"),
                                 "p": ParameterMap("p", [0.2, -0.6], ("intercept", "x"))})
    y, _ = simulate_positive(covariate, x.size, rng, matrix)
    cases.append((covariate, y, matrix))
    worst = max(float(np.abs(em2d_e_step(m, y, d)[0] - em_e_step(m, y, d)).max()) for m, y, d in cases)
    verdict(5, "E-1 equals classical responsibilities", worst <= 1e-10,
            f"{len(cases)} model/data pairs, max |diff| {worst:.2e} (<=1e-10)")


# --------------------------------------------------------------------------- #
# 6 and 10. recovery and optimality
# --------------------------------------------------------------------------- #


def _values(model):
    return np.array([model.value(t) for t in TARGETS])


@pytest.fixture(scope="module")
def recovery():
    started = time.perf_counter()
    rng = np.random.default_rng(606)
    y, _ = simulate_positive(TRUTH, 20_000, rng)
    fits = {method: fit(y, TRUTH, FitConfig(method=method)) for method in ("MLE", "EM", "EM2D")}
    warm = UserSupplied(fits["MLE"].theta_hat)
    boot = []
    for _ in range(N_BOOT):
        sample = y[rng.integers(0, y.size, y.size)]
        boot.append(_values(fit(sample, TRUTH, FitConfig(method="MLE", init=warm)).theta_hat))
    se = np.std(boot, axis=0, ddof=1)
    return y, fits, se, time.perf_counter() - started


def test_criterion_6_parameter_recovery(recovery):
    y, fits, se, elapsed = recovery
    truth = _values(TRUTH)
    z = {m: np.abs(_values(r.theta_hat) - truth) / se for m, r in fits.items()}
    worst_z = max(float(v.max()) for v in z.values())
    lls = [r.loglik for r in fits.values()]
    spread = max(lls) - min(lls)
    ok = worst_z <= 3 and spread <= 10 * LOGLIK_TOL and elapsed < 600
    detail = ", ".join(f"{m} max|err|/SE {float(v.max()):.2f}" for m, v in z.items())
    verdict(6, "parameter recovery", ok,
            f"{detail} (<=3); loglik spread {spread:.1e} (<={10 * LOGLIK_TOL:.0e}); {elapsed:.0f}s (<600s)")


def test_criterion_10_finite_difference_optimality(recovery):
    y, fits, _, _ = recovery
    model = fits["MLE"].theta_hat
    theta = _values(model)

    def loglik(vec):
        return mix_loglik(model.with_values(dict(zip(TARGETS, vec))), y)

    scaled = []
    for j, value in enumerate(theta):
        h = 1e-5 * max(1.0, abs(value))
        up, down = theta.copy(), theta.copy()
        up[j] += h
        down[j] -= h
        grad = (loglik(up) - loglik(down)) / (2 * h)
        scaled.append(abs(grad) * max(1.0, abs(value)))
    worst = max(scaled)
    verdict(10, "finite-difference optimality", worst <= 1e-3,
            f"max scaled |d loglik/d theta| {worst:.2e} ({TARGETS[int(np.argmax(scaled))]}) (<=1e-3)")


# --------------------------------------------------------------------------- #
# 7. covariate recovery
# --------------------------------------------------------------------------- #


def test_criterion_7_covariate_recovery():
    rng = np.random.default_rng(707)
    n = 30_000
    x = rng.integers(0, 2, n).astype(float)
    matrix = DesignMatrix(np.column_stack([np.ones(n), x]), ("intercept", "x"))
    cols = ("intercept", "x")
    truth = TRUTH.with_maps({"m": ParameterMap("m", [4.0, 1.5], cols, "identity"),
                             "p": ParameterMap("p", [0.2, -0.6], cols, "logit_inverse")})
    y, _ = simulate_positive(truth, n, rng, matrix)
    template = TRUTH.with_maps({"m": ParameterMap("m", [0.0, 0.0], cols, "identity"),
                                "p": ParameterMap("p", [0.0, 0.0], cols, "logit_inverse")})

    def coefs(model):
        return np.concatenate([model.parameter_maps["m"].beta, model.parameter_maps["p"].beta])

    result = fit(y, template, FitConfig(method="EM2D"), matrix)
    warm = UserSupplied(result.theta_hat)
    boot = []
    for _ in range(N_BOOT):
        idx = rng.integers(0, n, n)
        # replicates only feed the spread estimate, so a looser stop is enough
        config = FitConfig(method="EM2D", init=warm, loglik_tol=BOOT_TOL)
        boot.append(coefs(fit(y[idx], template, config, matrix.take(idx)).theta_hat))
    se = np.std(boot, axis=0, ddof=1)
    z = np.abs(coefs(result.theta_hat) - np.array([4.0, 1.5, 0.2, -0.6])) / se
    verdict(7, "covariate recovery", float(z.max()) <= 3,
            f"beta_m {np.round(coefs(result.theta_hat)[:2], 3).tolist()}, "
            f"beta_p {np.round(coefs(result.theta_hat)[2:], 3).tolist()}, max|err|/SE {z.max():.2f} (<=3)")


# --------------------------------------------------------------------------- #
# 8. goodness of fit ordering
# --------------------------------------------------------------------------- #


def test_criterion_8_gof_ordering():
    rng = np.random.default_rng(808)
    y, _ = simulate_positive(TRUTH, 10_000, rng)
    result = fit(y, TRUTH, FitConfig(method="EM2D"))
    table = compare(y, [("proposed", lambda t: mix_cdf(result.theta_hat, t))] + baseline_models(y))
    ours = table.distance("proposed")
    baselines = {r.label: r.distance for r in table if r.label != "proposed"}
    ok = ours < 0.03 and all(ours < d for d in baselines.values())
    listing = ", ".join(f"{k} {v:.4f}" for k, v in baselines.items())
    verdict(8, "goodness-of-fit ordering", ok, f"proposed {ours:.4f} (<0.03) vs {listing}")


# --------------------------------------------------------------------------- #
# 9. determinism
# --------------------------------------------------------------------------- #


def _without_timestamp(path):
    return b"".join(line for line in path.read_bytes().splitlines(keepends=True)
                    if b'"timestamp":' not in line)


def test_criterion_9_determinism(tmp_path):
    save_model(TRUTH, tmp_path / "truth.json")
    outputs = []
    for run in ("a", "b"):
        sim = tmp_path / f"sim_{run}.csv"
        report = tmp_path / f"fit_{run}.json"
        codes = (main(["--command", "simulate", "--model", str(tmp_path / "truth.json"), "--n", "3000",
                       "--seed", "9", "--out", str(sim)]),
                 main(["--command", "fit", "--data", str(sim), "--method", "EM2D", "--seed", "9",
                       "--baselines", "--out", str(report)]))
        outputs.append((codes, sim.read_bytes(), _without_timestamp(report)))
    (codes_a, sim_a, fit_a), (codes_b, sim_b, fit_b) = outputs
    ok = codes_a == codes_b == (0, 0) and sim_a == sim_b and fit_a == fit_b
    verdict(9, "determinism", ok,
            f"simulate identical={sim_a == sim_b}, fit report identical={fit_a == fit_b}, exit codes {codes_a}")


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-v"]))
