import json
import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, special, stats

from freqlens.freqloss import LossConfig
from freqlens.specstats import (
    Chi2Spec,
    ScalingTable,
    adaptive_quad,
    bessel_i,
    build_scaling_table,
    estimate_chi2_spec,
    focal_expectation,
    log_bessel_i,
    loss_scale,
    median_bandwidth,
    mmd,
    nc_chi2_pdf,
    nc_chi2_sample,
    pearson,
    reg_inc_beta,
)


def _series_oracle(nu: float, x: float, terms: int = 30) -> float:
    """Independent ascending-series oracle for I_nu(x)."""
    total = mpmath.mpf(0)
    with mpmath.workdps(60):
        for m in range(terms):
            total += (mpmath.mpf(x) / 2) ** (2 * m + nu) / (
                mpmath.factorial(m) * mpmath.gamma(m + nu + 1)
            )
    return float(total)


def test_bessel_trivial_and_series_values():
    assert bessel_i(0.0, 0.0) == 1.0
    assert bessel_i(3.0, 0.0) == 0.0
    assert bessel_i(0.0, 1.0) == pytest.approx(1.2660658, abs=1e-7)
    assert bessel_i(0.0, 1.0) == pytest.approx(_series_oracle(0.0, 1.0), rel=1e-12)


def test_bessel_recurrence_identity():
    # I_{nu-1}(x) - I_{nu+1}(x) == (2 nu / x) I_nu(x)
    nu, x = 2.0, 3.0
    lhs = bessel_i(nu - 1, x) - bessel_i(nu + 1, x)
    rhs = (2 * nu / x) * bessel_i(nu, x)
    assert abs(lhs - rhs) < 1e-9


@pytest.mark.parametrize("nu", [0.0, 0.5, 1.0, 2.0, 3.5, 7.0, 15.0, 31.0, 63.0, 127.0])
def test_bessel_matches_scipy_across_regimes(nu):
    for x in (1e-6, 0.5, 3.0, 11.9, 12.1, 20.0, 51.6, 100.0, 400.0):
        ref = special.iv(nu, x)
        if not np.isfinite(ref) or ref == 0.0:
            continue
        assert bessel_i(nu, x) == pytest.approx(ref, rel=1e-10)


def test_bessel_overlap_region_vs_series_oracle():
    with mpmath.workdps(80):
        for nu in (0.0, 1.0, 2.0, 7.0, 50.0, 127.0):
            for x in (12.5, 16.0, 25.0, 40.0):
                ref = float(mpmath.besseli(nu, x))
                assert bessel_i(nu, x) == pytest.approx(ref, rel=1e-10)


def test_bessel_derivative_identity():
    # I0'(x) == I1(x), checked by central differences.
    h = 1e-6
    for x in (0.5, 2.0, 7.0, 15.0):
        fd = (bessel_i(0.0, x + h) - bessel_i(0.0, x - h)) / (2 * h)
        assert abs(fd - bessel_i(1.0, x)) < 1e-6 * max(1.0, bessel_i(1.0, x))


def test_bessel_rejects_negative_arguments():
    with pytest.raises(ValueError):
        bessel_i(1.0, -0.5)
    with pytest.raises(ValueError):
        bessel_i(-1.0, 0.5)


def test_log_bessel_extreme_orders_no_overflow():
    # Values that would overflow or underflow in linear space stay usable.
    assert np.isfinite(log_bessel_i(127.0, 5.0))
    assert log_bessel_i(127.0, 5.0) == pytest.approx(-375.1357, abs=1e-3)
    assert np.isfinite(log_bessel_i(0.0, 800.0))


def test_nc_chi2_pdf_central_case():
    spec = Chi2Spec(k=2.0, lambda_nc=0.0)
    assert nc_chi2_pdf(spec, 0.0) == pytest.approx(0.5)
    for x in (0.1, 1.0, 4.0):
        assert nc_chi2_pdf(spec, x) == pytest.approx(0.5 * math.exp(-x / 2), rel=1e-12)


def test_nc_chi2_pdf_matches_scipy():
    for k, lam in [(4.0, 2.0), (16.0, 8.0), (256.0, 10.0)]:
        spec = Chi2Spec(k=k, lambda_nc=lam)
        for x in np.linspace(0.5, k + lam + 5 * math.sqrt(2 * (k + 2 * lam)), 9):
            assert nc_chi2_pdf(spec, x) == pytest.approx(
                stats.ncx2.pdf(x, k, lam), rel=1e-10
            )


def test_nc_chi2_normalization_and_mean_scipy_oracle():
    spec = Chi2Spec(k=4.0, lambda_nc=2.0)
    total, _ = integrate.quad(lambda x: nc_chi2_pdf(spec, x), 0, 120, limit=200)
    mean, _ = integrate.quad(lambda x: x * nc_chi2_pdf(spec, x), 0, 150, limit=200)
    assert total == pytest.approx(1.0, abs=1e-6)
    assert mean == pytest.approx(6.0, abs=1e-4)


def test_nc_chi2_sampler_moments():
    spec = Chi2Spec(k=6.0, lambda_nc=3.0)
    draws = nc_chi2_sample(spec, 200_000, np.random.default_rng(4))
    assert draws.mean() == pytest.approx(spec.mean, abs=4 * math.sqrt(spec.variance / draws.size))
    assert draws.var() == pytest.approx(spec.variance, rel=0.03)


def test_adaptive_quad_known_integrals():
    assert adaptive_quad(lambda x: x * x, 0.0, 1.0) == pytest.approx(1 / 3, abs=1e-12)
    assert adaptive_quad(math.exp, 0.0, 1.0) == pytest.approx(math.e - 1.0, abs=1e-10)
    assert adaptive_quad(lambda x: abs(x - 0.3), 0.0, 1.0) == pytest.approx(
        0.5 * (0.3**2 + 0.7**2), abs=1e-9
    )
    assert adaptive_quad(lambda x: math.exp(-x), 0.0, 60.0) == pytest.approx(1.0, abs=1e-9)


def test_focal_expectation_gamma_zero_vs_monte_carlo():
    spec = Chi2Spec(k=4.0, lambda_nc=2.0)
    value = focal_expectation(spec, gamma=0.0, variant="paper")
    draws = nc_chi2_sample(spec, 1_000_000, np.random.default_rng(7))
    lhat = np.clip(draws / loss_scale(spec), 1e-6, 1 - 1e-6)
    mc = np.log(lhat).mean()
    assert value == pytest.approx(mc, rel=0.01)


@pytest.mark.parametrize("variant", ["paper", "complement"])
def test_focal_expectation_gamma_two_vs_monte_carlo(variant):
    spec = Chi2Spec(k=4.0, lambda_nc=2.0)
    value = focal_expectation(spec, gamma=2.0, variant=variant)
    draws = nc_chi2_sample(spec, 1_000_000, np.random.default_rng(8))
    lhat = np.clip(draws / loss_scale(spec), 1e-6, 1 - 1e-6)
    mc = ((1 - lhat) ** 2 * np.log(lhat)).mean() if variant == "paper" else (
        lhat**2 * np.log1p(-lhat)
    ).mean()
    assert value == pytest.approx(mc, rel=0.01)


def test_focal_expectation_degenerate_mapping():
    spec = Chi2Spec(k=4.0, lambda_nc=2.0)
    eps = 1e-6
    value = focal_expectation(spec, gamma=2.0, variant="paper", loss_map=lambda x: 1.0 - eps)
    assert abs(value) < 1e-12


def test_focal_expectation_validation():
    spec = Chi2Spec(k=4.0, lambda_nc=2.0)
    with pytest.raises(ValueError):
        focal_expectation(spec, gamma=-1.0)
    with pytest.raises(ValueError):
        focal_expectation(spec, gamma=2.0, variant="bogus")


def test_build_scaling_table_entries():
    spec = Chi2Spec(k=16.0, lambda_nc=8.0)
    cfg = LossConfig()
    table = build_scaling_table([0.3, 0.15, 0.0], spec, 2.0, cfg)
    assert set(table.entries) == {0.3, 0.15, 0.0}
    assert all(np.isfinite(v) and v > 0 for v in table.entries.values())
    paper = build_scaling_table([0.3, 0.15], spec, 2.0,
                                LossConfig(coefficient_mode="paper"))
    for r in (0.3, 0.15):
        assert table.lookup(r) == pytest.approx(2.0 * paper.lookup(r), rel=1e-12)


def test_scaling_table_zero_ratio_is_expected_lhat():
    spec = Chi2Spec(k=4.0, lambda_nc=0.0)
    cfg = LossConfig()
    table = build_scaling_table([0.0], spec, 2.0, cfg)
    draws = nc_chi2_sample(spec, 500_000, np.random.default_rng(10))
    mc = np.clip(draws / loss_scale(spec), cfg.clamp_eps, 1 - cfg.clamp_eps).mean()
    assert table.lookup(0.0) == pytest.approx(mc, rel=0.01)


def test_scaling_table_json_round_trip():
    spec = Chi2Spec(k=256.0, lambda_nc=10.0)
    table = build_scaling_table([0.3, 0.0], spec, 2.0, LossConfig())
    text = table.to_json()
    payload = json.loads(text)
    assert payload["k"] == 256.0 and payload["coefficient_mode"] == "derived"
    back = ScalingTable.from_json(text)
    assert back.entries == table.entries
    assert back.lookup(0.3 + 1e-14) == table.lookup(0.3)
    with pytest.raises(KeyError):
        back.lookup(0.15)


def test_estimate_chi2_spec():
    draws = nc_chi2_sample(Chi2Spec(k=4.0, lambda_nc=2.0), 100_000, np.random.default_rng(11))
    est = estimate_chi2_spec(draws, k_fixed=4.0)
    assert est.lambda_nc == pytest.approx(2.0, abs=0.1)
    assert estimate_chi2_spec(np.zeros(10), k_fixed=4.0).lambda_nc == 0.0
    assert estimate_chi2_spec(np.full(10, 4.0), k_fixed=4.0).lambda_nc == 0.0
    scaled = estimate_chi2_spec(draws / 10.0, k_fixed=4.0, scale=10.0)
    assert scaled.lambda_nc == pytest.approx(est.lambda_nc, rel=1e-9)
    with pytest.raises(ValueError):
        estimate_chi2_spec([], k_fixed=4.0)


def test_mmd_identical_split_near_zero():
    rng = np.random.default_rng(12)
    pooled = rng.normal(size=(500, 6))
    assert abs(mmd(pooled, pooled.copy())) < 1e-3  # identical samples: exactly 0
    assert abs(mmd(pooled[::2], pooled[1::2])) < 0.02  # same-distribution halves


def test_mmd_separated_gaussians_and_monotonicity():
    rng = np.random.default_rng(13)
    a = rng.normal(size=(500, 8))
    values = []
    for gap in (1.0, 3.0, 5.0):
        b = rng.normal(size=(500, 8)) + gap
        values.append(mmd(a, b))
    assert values[-1] > 0.5
    assert values[0] < values[1] < values[2]


def test_mmd_symmetry_and_validation():
    rng = np.random.default_rng(14)
    a, b = rng.normal(size=(40, 3)), rng.normal(size=(50, 3)) + 0.5
    bw = median_bandwidth(np.vstack([a, b]))
    assert mmd(a, b, bw) == mmd(b, a, bw)
    with pytest.raises(ValueError):
        mmd(a, rng.normal(size=(10, 4)))


def test_pearson_exact_cases():
    r, p = pearson([1.0, 2.0, 3.0], [2.0, 4.0, 6.0])
    assert r == pytest.approx(1.0) and p == 0.0
    r, _ = pearson([1.0, 2.0, 3.0, 4.0], [-1.0, -2.0, -3.0, -4.0])
    assert r == pytest.approx(-1.0)
    with pytest.raises(ValueError):
        pearson([1.0, 1.0, 1.0], [1.0, 2.0, 3.0])
    with pytest.raises(ValueError):
        pearson([1.0, 2.0], [1.0, 2.0])


def test_pearson_matches_scipy():
    rng = np.random.default_rng(15)
    for _ in range(25):
        n = int(rng.integers(5, 60))
        x = rng.normal(size=n)
        y = 0.4 * x + rng.normal(size=n)
        r, p = pearson(x, y)
        ref = stats.pearsonr(x, y)
        assert r == pytest.approx(ref.statistic, abs=1e-12)
        assert p == pytest.approx(ref.pvalue, abs=1e-8)


def test_pearson_null_p_values_uniform():
    # Null-distribution oracle: independent normals give uniform p-values.
    rng = np.random.default_rng(16)
    pvals = np.array([pearson(rng.normal(size=20), rng.normal(size=20))[1] for _ in range(1000)])
    sorted_p = np.sort(pvals)
    grid = (np.arange(1, 1001)) / 1000.0
    ks = np.max(np.maximum(np.abs(sorted_p - grid), np.abs(sorted_p - grid + 1e-3)))
    assert ks < 0.05


@given(st.floats(0.1, 5.0), st.floats(-3.0, 3.0))
@settings(max_examples=30, deadline=None)
def test_pearson_affine_invariance(scale, shift):
    x = np.array([0.3, 1.2, -0.7, 2.2, 0.9, -1.4])
    y = np.array([1.0, 0.2, 0.5, 1.9, -0.3, 0.8])
    r0, p0 = pearson(x, y)
    r1, p1 = pearson(scale * x + shift, y)
    assert r1 == pytest.approx(r0, abs=1e-10)
    assert p1 == pytest.approx(p0, abs=1e-10)
    assert -1.0 <= r1 <= 1.0


def test_reg_inc_beta_matches_scipy():
    rng = np.random.default_rng(17)
    for _ in range(200):
        a = float(rng.uniform(0.2, 50.0))
        b = float(rng.uniform(0.2, 50.0))
        x = float(rng.uniform(0.0, 1.0))
        assert abs(reg_inc_beta(a, b, x) - special.betainc(a, b, x)) < 1e-8
    assert reg_inc_beta(2.0, 3.0, 0.0) == 0.0
    assert reg_inc_beta(2.0, 3.0, 1.0) == 1.0


def test_chi2_spec_validation():
    with pytest.raises(ValueError):
        Chi2Spec(k=0.0, lambda_nc=1.0)
    with pytest.raises(ValueError):
        Chi2Spec(k=2.0, lambda_nc=-1.0)
