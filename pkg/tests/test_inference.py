import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ecgtrend.cohort import normalize_rows, population_mean_raw
from ecgtrend.fda import build_basis, smooth
from ecgtrend.inference import (
    ConfidenceBand,
    SizerConfig,
    confidence_band,
    derivative_band,
    find_significant_extrema,
    kernel_weights,
    level_band,
    local_poly_fit,
    normal_quantile,
    pointwise_variance,
    test_constancy as constancy,
    write_band_csv,
)
from ecgtrend.synth import CohortModel, MeanTemplate, gen_amplitude_cohort

M = 1200
CFG = SizerConfig()


def _dense_oracle(y, grid, h):
    """Per grid point: raw-offset design, full weight matrix, normal equations."""
    t = np.arange(1, y.size + 1, dtype=float)
    beta, se = [], []
    for tj in grid:
        w = np.exp(-0.5 * ((t - tj) / h) ** 2)
        x = np.column_stack([np.ones_like(t), t - tj, (t - tj) ** 2])
        xtw = x.T * w
        a = xtw @ x
        b = np.linalg.solve(a, xtw @ y)
        r = y - x @ b
        a_inv = np.linalg.inv(a)
        bmat = (x.T * w**2) @ x
        nu = np.trace(a_inv @ bmat)
        s2 = np.sum(w * r * r) / (w.sum() - nu)
        cov = s2 * a_inv @ bmat @ a_inv
        beta.append(b)
        se.append(np.sqrt(np.diag(cov)))
    return np.array(beta), np.array(se)


def _cohort(kind, seed, n=16, sigma=0.05, amplitude=None, offset=None):
    kw = {"kind": kind}
    if amplitude is not None:
        kw.update(amplitude=amplitude, offset=offset)
    c = gen_amplitude_cohort(CohortModel(mu=MeanTemplate(**kw), sigma=sigma, seed=seed), n, M)
    return normalize_rows(c.x)[0]


def _features(y, basis):
    curves = smooth(y, basis).values
    mean = curves.mean(axis=0)
    band = confidence_band(mean, pointwise_variance(curves, mean), y.shape[0])
    slope = derivative_band(local_poly_fit(population_mean_raw(y), CFG))
    return band, slope, find_significant_extrema(band, slope, CFG.bandwidth)


@pytest.fixture(scope="module")
def basis():
    return build_basis(M)


# -- variance and mean band -------------------------------------------------


def test_pointwise_variance_examples():
    assert np.allclose(pointwise_variance(np.array([[0.0, 0.0], [2.0, 2.0]])).sigma2, [2.0, 2.0])
    assert np.all(pointwise_variance(np.ones((4, 5))).sigma2 == 0.0)
    with pytest.raises(ValueError):
        pointwise_variance(np.ones((1, 5)))


def test_pointwise_variance_monte_carlo(basis):
    c = gen_amplitude_cohort(CohortModel(sigma=0.1, u_sigma=0.0, seed=3), 500, M)
    est = pointwise_variance(c.x).sigma2
    assert est.mean() == pytest.approx(0.01, rel=0.1)


def test_band_half_width_example():
    band = confidence_band(np.ones(3), np.full(3, 0.01), 16, 0.05)
    assert np.allclose(band.half_width, 0.1 * 1.959963984540054 / 4)
    assert band.half_width[0] == pytest.approx(0.049, abs=1e-4)
    collapsed = confidence_band(np.arange(3.0), np.zeros(3), 16)
    assert np.array_equal(collapsed.lower, collapsed.upper)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 40), st.floats(0.001, 0.5))
def test_band_half_width_recomputed(seed, n, alpha):
    rng = np.random.default_rng(seed)
    s2 = rng.uniform(0, 1, 20)
    band = confidence_band(rng.normal(size=20), s2, n, alpha)
    from scipy.stats import norm

    assert np.allclose(band.half_width, np.sqrt(s2) * norm.ppf(1 - alpha / 2) / np.sqrt(n), rtol=1e-14)
    assert np.all(band.lower <= band.center) and np.all(band.center <= band.upper)


def test_normal_quantile():
    assert normal_quantile(0.05) == pytest.approx(1.96, abs=1e-3)


def test_constancy_examples():
    grid = np.arange(1, 1201, dtype=float)
    inside = ConfidenceBand(grid, np.ones(M), np.full(M, 0.9), np.full(M, 1.1), 0.05, 1.96)
    assert constancy(inside) == []
    lower = np.full(M, 0.9)
    lower[609:700] = 1.01
    band = ConfidenceBand(grid, np.ones(M), lower, np.full(M, 1.2), 0.05, 1.96)
    assert constancy(band) == [(610.0, 700.0)]


def test_constancy_power_on_bump(basis):
    hits = 0
    for seed in range(20):
        band, _, _ = _features(_cohort("bump", seed, amplitude=0.08, offset=80), basis)
        hits += any(lo <= 800 and hi >= 600 for lo, hi in constancy(band))
    assert hits / 20 >= 0.9


# -- kernel weights ---------------------------------------------------------


@settings(max_examples=60, deadline=None)
@given(st.floats(1, 1200), st.floats(0.5, 1e4), st.sampled_from(["gaussian", "epanechnikov", "biweight"]))
def test_kernel_weights_normalized(tj, h, kernel):
    w = kernel_weights(tj, h, M, kernel)
    assert np.all(w >= 0) and abs(w.sum() - 1.0) < 1e-12


def test_kernel_weights_symmetry_and_flat_limit():
    w = kernel_weights(600, 20, M)
    d = np.arange(1, 200)
    assert np.allclose(w[600 - 1 - d], w[600 - 1 + d], rtol=1e-14)
    flat = kernel_weights(600, 100 * M, M)
    assert np.max(np.abs(flat - 1.0 / M)) < 1e-6
    with pytest.raises(ValueError):
        kernel_weights(600, 0, M)


# -- local quadratic fit ----------------------------------------------------


def test_quadratic_reproduction_at_each_point():
    t = np.arange(1, M + 1, dtype=float)
    for tj in (1.0, 300.0, 601.0, 1200.0):
        y = 2 + 3 * (t - tj) + 4 * (t - tj) ** 2
        fit = local_poly_fit(y, SizerConfig(grid=(tj,)))
        assert np.allclose(fit.beta[0], [2, 3, 4], rtol=0, atol=1e-10)


def test_global_quadratic_reproduced_everywhere():
    t = np.arange(1, M + 1, dtype=float)
    y = 0.5 - 0.01 * t + 2e-5 * t**2
    fit = local_poly_fit(y, CFG)
    g = fit.grid
    assert np.max(np.abs(fit.beta0 - (0.5 - 0.01 * g + 2e-5 * g**2))) < 1e-10
    assert np.max(np.abs(fit.beta1 - (-0.01 + 4e-5 * g))) < 1e-10
    assert np.max(np.abs(fit.beta2 - 2e-5)) < 1e-10


def test_constant_series():
    fit = local_poly_fit(np.full(M, 1.7), CFG)
    assert np.max(np.abs(fit.beta0 - 1.7)) < 1e-12
    assert np.max(np.abs(fit.beta[:, 1:])) < 1e-12


def test_matches_dense_oracle():
    rng = np.random.default_rng(0)
    y = np.cumsum(rng.normal(size=300)) * 0.01 + 1
    cfg = SizerConfig(bandwidth=12, stride=7)
    fit = local_poly_fit(y, cfg)
    beta, se = _dense_oracle(y, fit.grid, 12)
    assert np.max(np.abs(fit.beta - beta)) < 1e-10
    assert np.allclose(fit.se[:, :2], se[:, :2], rtol=1e-8)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(-10, 10), st.floats(0.01, 100))
def test_shift_and_scale_equivariance(seed, shift, scale):
    y = np.random.default_rng(seed).normal(size=400)
    base = local_poly_fit(y, CFG)
    shifted = local_poly_fit(y + shift, CFG)
    assert np.max(np.abs(shifted.beta0 - base.beta0 - shift)) < 1e-11 * max(1, abs(shift))
    assert np.max(np.abs(shifted.beta[:, 1:] - base.beta[:, 1:])) < 1e-12
    scaled = local_poly_fit(scale * y, CFG)
    assert np.allclose(scaled.beta, scale * base.beta, rtol=1e-10, atol=1e-12 * scale)
    assert np.allclose(scaled.se[:, :2], scale * base.se[:, :2], rtol=1e-10)


def test_effective_size_guard():
    with pytest.raises(ValueError, match="effective sample size"):
        local_poly_fit(np.ones(100), SizerConfig(bandwidth=0.5))


# -- derivative band --------------------------------------------------------


def test_linear_series_band_collapses():
    band = derivative_band(local_poly_fit(3.0 * np.arange(1, M + 1), CFG))
    assert np.allclose(band.center, 3.0, atol=1e-10)
    assert np.max(band.upper - band.lower) < 1e-9


def test_derivative_band_covers_zero_under_noise():
    frac = []
    for seed in range(100):
        y = 1 + 0.05 / 4 * np.random.default_rng(seed).normal(size=M)
        band = derivative_band(local_poly_fit(y, CFG))
        frac.append(np.mean(band.excludes(0.0) == 0))
    assert np.mean(frac) >= 0.93


def test_derivative_band_signs_around_dip(basis):
    y = _cohort("dip", 1, amplitude=0.05, offset=60)
    slope = derivative_band(local_poly_fit(population_mean_raw(y), CFG))
    side = slope.excludes(0.0)
    g = slope.grid
    assert np.any(side[(g > 590) & (g < 655)] == -1)
    assert np.any(side[(g > 665) & (g < 730)] == 1)


def test_level_band_is_centered_on_beta0():
    fit = local_poly_fit(np.random.default_rng(1).normal(size=300), CFG)
    band = level_band(fit)
    assert np.allclose(band.upper - band.center, band.center - band.lower)


# -- extrema ----------------------------------------------------------------


def _slope_band(center, half):
    g = np.arange(1, 5 * center.size, 5, dtype=float)
    return ConfidenceBand(g, center, center - half, center + half, 0.05, 1.96)


def test_straddling_band_gives_empty_report():
    band = _slope_band(np.sin(np.linspace(0, 6, 240)), 5.0)
    report = find_significant_extrema(None, band, 20)
    assert report.extrema == [] and report.significant_intervals == []


def test_min_and_max_patterns():
    g = np.arange(1, 1201, 5, dtype=float)
    center = np.cos(2 * np.pi * (g - 1) / 400)  # zero crossings at 101, 301, 501, ...
    report = find_significant_extrema(None, _slope_band(center, 0.5), 20)
    assert report.kinds()[:2] == ["max", "min"]
    first = report.extrema[0]
    assert first.beat == pytest.approx(101, abs=1.0)
    assert first.left_interval[1] < first.beat < first.right_interval[0]


def test_flanking_horizon():
    g = np.arange(1, 1201, 5, dtype=float)
    center = np.where(g < 600, -1.0, 1.0)
    center[(g > 400) & (g < 800)] = np.linspace(-0.1, 0.1, np.sum((g > 400) & (g < 800)))
    band = _slope_band(center, 0.5)
    assert find_significant_extrema(None, band, 20).extrema == []  # gap of 400 beats > 3h
    assert find_significant_extrema(None, band, 100).kinds() == ["min"]


def test_bump_located_within_h(basis):
    _, _, report = _features(_cohort("bump", 2, amplitude=0.08, offset=80), basis)
    maxima = [e.beat for e in report.extrema if e.kind == "max"]
    assert any(abs(b - 680) <= 20 for b in maxima)


def test_joint_dip_and_bump_after_acme(basis):
    _, _, r_rep = _features(_cohort("dip", 10, amplitude=0.05, offset=60), basis)
    _, _, t_rep = _features(_cohort("bump", 11, amplitude=0.08, offset=80), basis)
    assert any(e.kind == "min" and 600 < e.beat and abs(e.beat - 660) <= 20 for e in r_rep.extrema)
    assert any(e.kind == "max" and 600 < e.beat and abs(e.beat - 680) <= 20 for e in t_rep.extrema)


def test_report_invariant_under_scaling(basis):
    y = _cohort("dip", 12, amplitude=0.05, offset=60)
    raw = population_mean_raw(y)
    a = find_significant_extrema(None, derivative_band(local_poly_fit(raw, CFG)), 20)
    b = find_significant_extrema(None, derivative_band(local_poly_fit(7.5 * raw, CFG)), 20)
    assert a.kinds() == b.kinds()
    assert np.allclose([e.beat for e in a.extrema], [e.beat for e in b.extrema], atol=1e-9)


def test_report_json_and_band_csv(basis, tmp_path):
    band, slope, report = _features(_cohort("bump", 2, amplitude=0.08, offset=80), basis)
    doc = json.loads(report.to_json())
    assert set(doc) == {"significant_intervals", "extrema"}
    e = doc["extrema"][0]
    assert set(e) == {"beat", "kind", "crossing_beat", "left_interval", "right_interval"}
    assert set(e["left_interval"]) == {"lo", "hi"}
    path = tmp_path / "b.csv"
    write_band_csv(slope, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "t,center,lower,upper" and len(lines) == slope.grid.size + 1
