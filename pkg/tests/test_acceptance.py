"""Acceptance gate: the eight criteria at their stated tolerances and runtimes.

Each test prints one ``[PASS]`` or ``[FAIL]`` line.  Run directly with
``python3 tests/test_acceptance.py`` or through pytest.
"""
import json
import sys
import time

import numpy as np
import pytest

from ecgtrend.cli import main as cli_main
from ecgtrend.cohort import normalize, normalize_rows, population_mean_raw
from ecgtrend.fda import build_basis, fpca, smooth
from ecgtrend.inference import (
    SizerConfig,
    confidence_band,
    derivative_band,
    find_significant_extrema,
    local_poly_fit,
    pointwise_variance,
    test_constancy as constancy,
)
from ecgtrend.ingest import DEFAULT_RESOLUTION_MV, DetectorConfig, extract_beat_series
from ecgtrend.synth import CohortModel, EcgModel, MeanTemplate, gen_amplitude_cohort, gen_ecg, v_profile

M = 1200
N = 16
SIGMA = 0.05
SIZER = SizerConfig(bandwidth=20, stride=5)


def _report(capsys, tag, ok, detail):
    with capsys.disabled():
        print(f"\n[{'PASS' if ok else 'FAIL'}] {tag} {detail}")


def _normalized(kind, seed, amplitude=0.0, offset=0.0, n=N):
    mu = MeanTemplate(kind, 1.0, amplitude, offset) if kind != "constant" else MeanTemplate("constant")
    c = gen_amplitude_cohort(CohortModel(mu=mu, sigma=SIGMA, seed=seed), n, M)
    return normalize_rows(c.x)[0], c


def _mean_band(y, basis):
    curves = smooth(y, basis).values
    mean = curves.mean(axis=0)
    return confidence_band(mean, pointwise_variance(curves, mean), y.shape[0], 0.05)


def test_ac1_normalization(capsys):
    start = time.perf_counter()
    rng = np.random.default_rng(1)
    c = gen_amplitude_cohort(CohortModel(mu=MeanTemplate("bump", amplitude=0.08, offset=80), sigma=0.1, seed=1), 1000, M)
    rows = c.x * rng.lognormal(0, 1, (1000, 1))
    worst_mean = worst_scale = 0.0
    for x in rows:
        y, _ = normalize(x)
        worst_mean = max(worst_mean, abs(y.mean() - 1.0))
        for k in (0.5, 3.0, 100.0):
            yk, _ = normalize(k * x)
            worst_scale = max(worst_scale, np.max(np.abs(yk - y) / np.abs(y)))
    elapsed = time.perf_counter() - start
    ok = worst_mean <= 1e-12 and worst_scale <= 1e-12 and elapsed < 5
    _report(capsys, "AC1", ok, f"normalization: max |mean-1|={worst_mean:.1e}, max scale rel diff={worst_scale:.1e}, {elapsed:.2f}s")
    assert ok


def test_ac2_spline_reproduction(capsys):
    start = time.perf_counter()
    basis = build_basis(M, 135, 3)
    x = (basis.grid - 1) / (M - 1)
    rng = np.random.default_rng(2)
    worst = 0.0
    for coeffs in [(0, 0, 0, 1), (1, 1, 1, 1), *rng.normal(size=(20, 4))]:
        y = np.polyval(np.asarray(coeffs, dtype=float)[::-1], x)
        worst = max(worst, np.max(np.abs(smooth(y, basis).values - y)) / np.max(np.abs(y)))
    pou = np.max(np.abs(basis.design.sum(axis=1) - 1.0))
    elapsed = time.perf_counter() - start
    ok = worst < 1e-8 and pou < 1e-12 and elapsed < 5
    _report(capsys, "AC2", ok, f"spline reproduction: cubic rel err={worst:.1e}, partition of unity err={pou:.1e}, K={basis.K}, {elapsed:.2f}s")
    assert ok


def _normal_equations(y, grid, h):
    # independent route: raw offsets, explicit weight vector, dense solve
    t = np.arange(1, y.size + 1, dtype=float)
    out = np.empty((grid.size, 3))
    for j, tj in enumerate(grid):
        w = np.exp(-0.5 * ((t - tj) / h) ** 2)
        x = np.column_stack([np.ones_like(t), t - tj, (t - tj) ** 2])
        out[j] = np.linalg.solve((x.T * w) @ x, (x.T * w) @ y)
    return out


def test_ac3_local_polynomial_oracle(capsys):
    start = time.perf_counter()
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(50):
        y = 1.0 + 0.05 * rng.normal(size=M) + 0.02 * np.sin(np.arange(M) / rng.uniform(20, 200))
        fit = local_poly_fit(y, SIZER)
        worst = max(worst, np.max(np.abs(fit.beta - _normal_equations(y, fit.grid, SIZER.bandwidth))))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-10 and elapsed < 30
    _report(capsys, "AC3", ok, f"local quadratic vs dense normal equations: max |diff|={worst:.1e} over 50 series, {elapsed:.2f}s")
    assert ok


COVERAGE_BEATS = np.array([100, 300, 600, 680, 1000])


def test_ac4_band_coverage(capsys):
    start = time.perf_counter()
    basis = build_basis(M)
    reps = 5000
    covered = np.zeros(COVERAGE_BEATS.size)
    idx = COVERAGE_BEATS - 1
    for seed in range(reps):
        y, c = _normalized("bump", seed, 0.08, 80)
        band = _mean_band(y, basis)
        truth = c.mu_normalized[idx]
        covered += (band.lower[idx] <= truth) & (truth <= band.upper[idx])
    coverage = covered / reps
    elapsed = time.perf_counter() - start
    ok = bool(np.all((coverage >= 0.93) & (coverage <= 0.97))) and elapsed < 120
    detail = ", ".join(f"t={t}:{c:.4f}" for t, c in zip(COVERAGE_BEATS, coverage))
    _report(capsys, "AC4", ok, f"mean band coverage over {reps} replicates (n={N}): {detail}, {elapsed:.1f}s")
    assert ok


def test_ac5_false_positive_control(capsys):
    start = time.perf_counter()
    reps = 1000
    fractions = np.empty(reps)
    any_extremum = 0
    for seed in range(reps):
        y, _ = _normalized("constant", seed)
        slope = derivative_band(local_poly_fit(population_mean_raw(y), SIZER))
        fractions[seed] = np.mean(slope.excludes(0.0) != 0)
        any_extremum += bool(find_significant_extrema(None, slope, SIZER.bandwidth).extrema)
    elapsed = time.perf_counter() - start
    ok = fractions.mean() <= 0.07 and elapsed < 180
    _report(
        capsys,
        "AC5",
        ok,
        f"constant mean: grid fraction excluding zero={fractions.mean():.4f} (<= 0.07); "
        f"runs with a certified extremum={any_extremum / reps:.3f} (documented, no bound), {elapsed:.1f}s",
    )
    assert ok


def test_ac6_feature_recovery(capsys):
    start = time.perf_counter()
    basis = build_basis(M)
    reps = 200
    found = {"r": 0, "t": 0}
    for seed in range(reps):
        for channel, kind, amp, off, target, want in (
            ("r", "dip", 0.05, 60, 660, "min"),
            ("t", "bump", 0.08, 80, 680, "max"),
        ):
            y, _ = _normalized(kind, 2 * seed + (channel == "t"), amp, off)
            band = _mean_band(y, basis)
            slope = derivative_band(local_poly_fit(population_mean_raw(y), SIZER))
            report = find_significant_extrema(band, slope, SIZER.bandwidth)
            located = any(e.kind == want and abs(e.beat - target) <= 20 for e in report.extrema)
            rejects = any(hi > 600 for _, hi in constancy(band))
            found[channel] += located and rejects
    elapsed = time.perf_counter() - start
    rate_r, rate_t = found["r"] / reps, found["t"] / reps
    ok = rate_r >= 0.9 and rate_t >= 0.9 and elapsed < 180
    _report(capsys, "AC6", ok, f"feature recovery over {reps} replicates: R min@660+-20 {rate_r:.3f}, T max@680+-20 {rate_t:.3f}, {elapsed:.1f}s")
    assert ok


def test_ac7_pca_structure(capsys):
    start = time.perf_counter()
    rng = np.random.default_rng(7)
    n = 500
    x = np.linspace(0, 1, M)
    phi1, phi2 = np.sqrt(2) * np.cos(np.pi * x), np.sqrt(2) * np.cos(2 * np.pi * x)  # orthonormal pair
    curves = 1.0 + rng.normal(0, 0.03, (n, 1)) * phi1 + rng.normal(0, 0.01, (n, 1)) * phi2
    basis = build_basis(M)
    fits = smooth(curves, basis)
    pca = fpca(fits, 2)
    s = fits.values
    grid_variance = np.sum((s - s.mean(axis=0)) ** 2) / (M * (n - 1))
    identity_err = abs(grid_variance - pca.total_variance)
    corr = abs(np.corrcoef(pca.loadings[:, 0], pca.loadings[:, 1])[0, 1])
    frac = pca.explained_fraction
    elapsed = time.perf_counter() - start
    ok = abs(frac[0] - 0.9) <= 0.02 and abs(frac[1] - 0.1) <= 0.02 and corr < 1e-10 and identity_err < 1e-10 and elapsed < 30
    _report(
        capsys,
        "AC7",
        ok,
        f"PCA: explained {frac[0]:.4f}/{frac[1]:.4f}, loading corr={corr:.1e}, variance identity err={identity_err:.1e}, {elapsed:.2f}s",
    )
    assert ok


def test_ac8_detector_fidelity(capsys, tmp_path):
    start = time.perf_counter()
    q, noise = DEFAULT_RESOLUTION_MV, 0.008
    beats = np.arange(1, 1101)
    rr = v_profile(beats, 600, rest=800.0, depth=0.5)
    rng = np.random.default_rng(8)
    r_mv = 2.0 + 0.5 * rng.uniform(-1, 1, beats.size)
    t_mv = 0.5 + 0.2 * rng.uniform(-1, 1, beats.size)
    model = EcgModel(rr_ms=tuple(rr), r_mv=tuple(r_mv), t_mv=tuple(t_mv), noise_pp_mv=noise, seed=8)
    record, ann = gen_ecg(model, 600.0)
    series = extract_beat_series(record, DetectorConfig(), "ac8")

    peaks = np.array([b.r_peak for b in series.beats])
    truth = np.array([a.r_peak for a in ann])
    nearest = np.abs(peaks[None, :] - truth[:, None]).min(axis=1)
    detected = np.mean(nearest <= 2)

    lookup = {a.r_peak: k for k, a in enumerate(ann)}
    r_err = t_err = 0.0
    for b in series.beats:
        if b.valid and b.r_peak in lookup:
            k = lookup[b.r_peak]
            r_err = max(r_err, abs(b.r_amplitude - r_mv[k]))
            t_err = max(t_err, abs(b.t_amplitude - t_mv[k]))
    tol = q + noise

    sim = tmp_path / "sim"
    args = ["--set", "sim_subjects=3", "--set", "sim_emit_ecg=true", "--set", "sim_max_beats=1600"]
    codes = [
        cli_main(["simulate", "--out", str(sim), *args]),
        cli_main(["ingest", str(sim / "ecg"), "--out", str(tmp_path / "beats")]),
        cli_main(["analyze", str(tmp_path / "beats"), "--out", str(tmp_path / "an")]),
    ]
    cohort_rr = np.loadtxt(tmp_path / "an" / "cohort_rr.csv", delimiter=",", skiprows=1)
    acme_positions = (np.argmin(cohort_rr[:, 1:], axis=0) + 1).tolist()
    manifest = json.loads((tmp_path / "an" / "manifest.json").read_text())
    elapsed = time.perf_counter() - start

    ok = (
        detected >= 0.99
        and r_err <= tol
        and t_err <= tol
        and codes == [0, 0, 0]
        and len(acme_positions) == 3
        and all(p == 600 for p in acme_positions)
        and elapsed < 60
    )
    _report(
        capsys,
        "AC8",
        ok,
        f"detector: {detected:.4f} of {truth.size} peaks within +-2 samples; max |R err|={r_err:.4f}, max |T err|={t_err:.4f} "
        f"(tol {tol:.4f} mV); end-to-end exit codes {codes}, registered acme positions {acme_positions} "
        f"({len(manifest['subjects'])} subjects), {elapsed:.1f}s",
    )
    assert ok


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
