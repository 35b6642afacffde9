"""Synthetic amplitude cohorts and ECG records with ground truth.

Two generators live here.  ``gen_amplitude_cohort`` draws beat-indexed
series from the multiplicative model

    X_i(t) = U_i * (mu(t) + Z_i(t))

and ``gen_ecg`` renders a sampled, quantized ECG trace from a sum of
Gaussian wavelets per beat, together with the per-beat annotations the
detector is checked against.

Seeds are split with ``numpy.random.SeedSequence(seed).spawn(n)``: subject
``i`` always draws from child ``i``, so a subject's data does not depend on
how many other subjects are generated after it.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from ecgtrend.ingest import DEFAULT_RESOLUTION_MV, DEFAULT_SAMPLING_RATE, EcgRecord

__all__ = [
    "MeanTemplate",
    "CohortModel",
    "SyntheticCohort",
    "EcgModel",
    "BeatAnnotation",
    "gen_amplitude_cohort",
    "gen_subject_series",
    "gen_ecg",
    "raised_cosine",
    "v_profile",
]

_MAX_RESAMPLE = 20


def raised_cosine(u):
    """Unit-height raised cosine supported on ``|u| <= 1/2``."""
    u = np.asarray(u, dtype=float)
    out = 0.5 * (1.0 + np.cos(2.0 * np.pi * u))
    return np.where(np.abs(u) <= 0.5, out, 0.0)


def v_profile(t, acme, rest=800.0, depth=0.5, recovery_tau=200.0):
    """V-shaped RR profile with its unique global minimum at ``acme``.

    Linear descent from ``rest`` at beat 1 down to ``rest * (1 - depth)`` at
    the acme, then exponential recovery toward ``rest``.
    """
    t = np.asarray(t, dtype=float)
    low = rest * (1.0 - depth)
    drop = rest - low
    span = max(float(acme) - 1.0, 1.0)
    before = rest - drop * np.clip((t - 1.0) / span, 0.0, 1.0)
    after = low + drop * (1.0 - np.exp(-(t - acme) / recovery_tau))
    return np.where(t <= acme, before, after)


@dataclass(frozen=True)
class MeanTemplate:
    """Deterministic population mean ``mu(t)`` positioned relative to the acme.

    ``kind`` is one of ``constant``, ``v_shape``, ``dip`` or ``bump``.  For
    ``dip``/``bump`` the ``amplitude`` is a fraction of ``level`` and the
    feature is a raised cosine of full support ``width`` centred ``offset``
    beats after the acme.  For ``v_shape`` the ``amplitude`` is the depth
    ratio at the acme (0.5 halves the rest value).
    """

    kind: str = "constant"
    level: float = 1.0
    amplitude: float = 0.05
    offset: float = 60.0
    width: float = 150.0
    recovery_tau: float = 200.0

    def __post_init__(self):
        if self.kind not in ("constant", "v_shape", "dip", "bump"):
            raise ValueError(f"unknown mean template kind {self.kind!r}")
        if self.level <= 0:
            raise ValueError("template level must be positive")
        if self.width <= 0:
            raise ValueError("template width must be positive")

    def __call__(self, t, acme):
        t = np.asarray(t, dtype=float)
        if self.kind == "constant":
            return np.full(t.shape, float(self.level))
        if self.kind == "v_shape":
            return v_profile(t, acme, self.level, self.amplitude, self.recovery_tau)
        sign = -1.0 if self.kind == "dip" else 1.0
        shape = raised_cosine((t - (acme + self.offset)) / self.width)
        return self.level * (1.0 + sign * self.amplitude * shape)

    def extrema(self, acme):
        """Ground-truth extrema as ``(beat, kind)`` pairs."""
        if self.kind == "dip":
            return [(float(acme + self.offset), "min")]
        if self.kind == "bump":
            return [(float(acme + self.offset), "max")]
        if self.kind == "v_shape":
            return [(float(acme), "min")]
        return []


@dataclass(frozen=True)
class CohortModel:
    """Generator settings for ``X_i(t) = U_i (mu(t) + Z_i(t))``.

    ``sigma`` is the noise standard deviation in the units of ``mu``; it may
    be a scalar or a length-m array for time-varying noise.  ``u_sigma`` is
    the log-scale standard deviation of the lognormal subject factor (median
    1).  ``noise`` selects ``gaussian`` or ``student_t`` (rescaled to unit
    variance, ``df`` degrees of freedom).
    """

    mu: MeanTemplate = field(default_factory=MeanTemplate)
    sigma: float | np.ndarray = 0.05
    u_sigma: float = 0.25
    noise: str = "gaussian"
    df: float = 5.0
    acme: int | None = None
    seed: int = 0

    def __post_init__(self):
        if np.any(np.asarray(self.sigma) < 0):
            raise ValueError("sigma must be nonnegative")
        if self.u_sigma < 0:
            raise ValueError("u_sigma must be nonnegative")
        if self.noise not in ("gaussian", "student_t"):
            raise ValueError(f"unknown noise law {self.noise!r}")
        if self.noise == "student_t" and self.df <= 2:
            raise ValueError("student_t noise needs df > 2 for finite variance")


@dataclass
class SyntheticCohort:
    """Generated cohort with the ground truth it was drawn from."""

    x: np.ndarray
    mu: np.ndarray
    u: np.ndarray
    acme: int
    extrema: list
    seed: int

    @property
    def mu_normalized(self):
        """The normalized mean ``mu(t) / mean_t mu(t)``."""
        return self.mu / self.mu.mean()


def _noise(rng, model, size):
    if model.noise == "gaussian":
        return rng.standard_normal(size)
    scale = np.sqrt(model.df / (model.df - 2.0))
    return rng.standard_t(model.df, size) / scale


def gen_subject_series(model, m, acme, rng):
    """Draw one subject's series of length ``m`` with the acme at beat ``acme``.

    Returns ``(x, mu, u)``.  Nonpositive draws are rejected and redrawn.
    """
    t = np.arange(1, m + 1, dtype=float)
    mu = model.mu(t, acme)
    if np.any(mu <= 0):
        raise ValueError("mean template must be strictly positive")
    sigma = np.broadcast_to(np.asarray(model.sigma, dtype=float), (m,))
    for attempt in range(_MAX_RESAMPLE):
        u = float(np.exp(model.u_sigma * rng.standard_normal()))
        x = u * (mu + sigma * _noise(rng, model, m))
        if np.all(x > 0):
            return x, mu, u
        warnings.warn(
            f"nonpositive generated value (attempt {attempt + 1}); resampling; "
            "sigma is large relative to mu",
            RuntimeWarning,
            stacklevel=2,
        )
    raise ValueError("could not generate strictly positive series; sigma too large relative to mu")


def gen_amplitude_cohort(model, n, m):
    """Generate an ``n x m`` cohort from the multiplicative model.

    Parameters
    ----------
    model : CohortModel
    n : int
        Number of subjects, ``n >= 1``.
    m : int
        Series length, ``m >= 2``.

    Returns
    -------
    SyntheticCohort
    """
    if n < 1 or m < 2:
        raise ValueError("need n >= 1 and m >= 2")
    acme = model.acme if model.acme is not None else m // 2
    children = np.random.SeedSequence(model.seed).spawn(n)
    x = np.empty((n, m))
    u = np.empty(n)
    mu = None
    for i, child in enumerate(children):
        x[i], mu, u[i] = gen_subject_series(model, m, acme, np.random.default_rng(child))
    return SyntheticCohort(x=x, mu=mu, u=u, acme=acme, extrema=model.mu.extrema(acme), seed=model.seed)


# --------------------------------------------------------------------------
# ECG waveform


@dataclass(frozen=True)
class EcgModel:
    """Beat-by-beat ECG template.

    Per-beat profiles (``rr_ms``, ``r_mv``, ``t_mv``) may be scalars or
    sequences; a sequence shorter than the number of beats holds its last
    value.  ``r_mv`` is the designed QRS excursion (max minus min) and
    ``t_mv`` the T apex height over the baseline.  Wavelets are
    ``(center_ms, width_ms, relative_amplitude)`` for Q, R and S; the QRS
    wavelets are negligible beyond ``qrs_half_ms`` of the R apex, which is
    annotated as the true QRS support.  P and T positions scale with the
    preceding RR interval.

    ``noise_pp_mv`` is the peak-to-peak range of additive uniform noise.
    ``drop_qrs`` lists beat numbers (0-based) whose QRS is masked out.
    """

    rr_ms: float | tuple = 800.0
    r_mv: float | tuple = 2.5
    t_mv: float | tuple = 0.6
    q_wave: tuple = (-22.0, 5.0, -0.10)
    r_wave: tuple = (0.0, 8.0, 1.0)
    s_wave: tuple = (22.0, 5.0, -0.20)
    qrs_half_ms: float = 40.0
    p_mv: float = 0.12
    p_width_ms: float = 10.0
    p_position: float = -0.22
    t_position: float = 0.30
    t_width: float = 0.05
    first_beat_ms: float = 400.0
    noise_pp_mv: float = 0.0
    sampling_rate: float = DEFAULT_SAMPLING_RATE
    resolution_mv: float = DEFAULT_RESOLUTION_MV
    drop_qrs: tuple = ()
    seed: int = 0


@dataclass(frozen=True)
class BeatAnnotation:
    """Ground truth for one generated beat (sample indices are 0-based)."""

    r_peak: int
    qrs_onset: int
    qrs_offset: int
    t_apex: int | None
    rr_samples: int | None
    r_amplitude: float
    t_amplitude: float | None
    baseline: float
    present: bool = True


def _profile(values, k):
    arr = np.atleast_1d(np.asarray(values, dtype=float))
    return float(arr[min(k, arr.size - 1)])


def _gauss(t, center, width):
    return np.exp(-0.5 * ((t - center) / width) ** 2)


def _qrs_unit(model, t_ms):
    out = np.zeros_like(t_ms)
    for c, w, a in (model.q_wave, model.r_wave, model.s_wave):
        out += a * _gauss(t_ms, c, w)
    return out


def gen_ecg(model, duration):
    """Render an ECG record of ``duration`` seconds with annotations.

    Returns
    -------
    record : EcgRecord
        Samples quantized to ``model.resolution_mv``.
    annotations : list of BeatAnnotation
        One entry per generated beat, including masked ones
        (``present=False``).
    """
    if duration < 2.0:
        raise ValueError("duration must be at least 2 s")
    fs = float(model.sampling_rate)
    n_samples = int(round(duration * fs))
    ms_per_sample = 1000.0 / fs
    qrs_half = int(round(model.qrs_half_ms / ms_per_sample))

    # excursion of the unit QRS, used to hit the designed r_mv exactly
    grid = np.arange(-model.qrs_half_ms, model.qrs_half_ms + ms_per_sample, ms_per_sample)
    unit = _qrs_unit(model, grid)
    unit_excursion = unit.max() - unit.min()

    peaks, rrs = [], []
    t_ms = model.first_beat_ms
    k = 0
    while True:
        r = int(round(t_ms / ms_per_sample))
        if r + qrs_half >= n_samples:
            break
        peaks.append(r)
        rr = _profile(model.rr_ms, k)
        rrs.append(rr)
        t_ms += _profile(model.rr_ms, k + 1)
        k += 1

    clean = np.zeros(n_samples)
    half_window = int(round(1500.0 / ms_per_sample))
    for k, r in enumerate(peaks):
        rr_prev = rrs[k] if k == 0 else (r - peaks[k - 1]) * ms_per_sample
        lo, hi = max(0, r - half_window), min(n_samples, r + half_window)
        tt = (np.arange(lo, hi) - r) * ms_per_sample
        beat = model.p_mv * _gauss(tt, model.p_position * rr_prev, model.p_width_ms)
        beat += _profile(model.t_mv, k) * _gauss(tt, model.t_position * rr_prev, model.t_width * rr_prev)
        if k not in model.drop_qrs:
            beat += _profile(model.r_mv, k) / unit_excursion * _qrs_unit(model, tt)
        clean[lo:hi] += beat

    rng = np.random.default_rng(model.seed)
    noisy = clean + model.noise_pp_mv * (rng.random(n_samples) - 0.5)
    q = model.resolution_mv
    samples = np.round(noisy / q) * q

    annotations = []
    prev = None
    for k, r in enumerate(peaks):
        onset, offset = r - qrs_half, r + qrs_half
        present = k not in model.drop_qrs
        baseline = 0.5 * (clean[max(onset, 0)] + clean[min(offset, n_samples - 1)])
        window = clean[max(onset, 0) : offset + 1]
        r_amp = float(window.max() - window.min())
        t_apex = t_amp = rr_samples = None
        if prev is not None:
            rr_samples = r - prev
            a = r + int(round(0.15 * rr_samples))
            b = r + int(round(0.50 * rr_samples))
            if b < n_samples:
                t_apex = a + int(np.argmax(clean[a : b + 1]))
                t_amp = float(clean[t_apex] - baseline)
        annotations.append(
            BeatAnnotation(
                r_peak=r,
                qrs_onset=onset,
                qrs_offset=offset,
                t_apex=t_apex,
                rr_samples=rr_samples,
                r_amplitude=r_amp,
                t_amplitude=t_amp,
                baseline=float(baseline),
                present=present,
            )
        )
        if present:
            prev = r
    record = EcgRecord(samples=samples, sampling_rate=fs, resolution=q, lead="V5")
    return record, annotations
