"""Beat extraction from a raw ECG lead.

The detector is a derivative-threshold scheme: the first difference of the
signal is squared, integrated over a 150 ms moving window, and compared with
an adaptive threshold built from running 2 s statistics of that integrated
energy.  Each supra-threshold run yields one candidate R peak, refined to the
signal maximum within the QRS search window.

Per beat the following observables are measured:

* R amplitude: maximum minus minimum of the signal between QRS onset and
  offset;
* baseline: mean of the signal values at onset and offset;
* T amplitude: maximum of the signal between 15% and 50% of the preceding RR
  interval after the R peak, minus the baseline.

Sample indices are 0-based throughout this module.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import maximum_filter1d, median_filter, uniform_filter1d

from ecgtrend.errors import InputError

__all__ = [
    "DEFAULT_SAMPLING_RATE",
    "DEFAULT_RESOLUTION_MV",
    "EcgRecord",
    "Beat",
    "BeatSeries",
    "DetectorConfig",
    "detect_r_peaks",
    "locate_qrs_bounds",
    "compute_r_amplitude",
    "compute_baseline",
    "compute_t_amplitude",
    "t_window",
    "clean_rr",
    "extract_beat_series",
    "read_ecg_csv",
    "write_ecg_csv",
    "read_beat_series_csv",
    "write_beat_series_csv",
]

logger = logging.getLogger(__name__)

DEFAULT_SAMPLING_RATE = 500.0
DEFAULT_RESOLUTION_MV = 2.441e-3  # 2.441 uV per quantum
T_WINDOW = (0.15, 0.50)


def nearest_int(value):
    """Round half up, so 0.5 always goes to 1 (unlike banker's rounding)."""
    return int(math.floor(value + 0.5))


@dataclass(frozen=True)
class EcgRecord:
    """A single uniformly sampled ECG lead.

    ``samples`` are in millivolts and ``resolution`` is millivolts per
    quantum.
    """

    samples: np.ndarray
    sampling_rate: float = DEFAULT_SAMPLING_RATE
    resolution: float = DEFAULT_RESOLUTION_MV
    lead: str = "V5"

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=float)
        if samples.ndim != 1 or samples.size == 0:
            raise ValueError("samples must be a nonempty 1-d sequence")
        if not np.all(np.isfinite(samples)):
            raise ValueError("samples must be finite")
        if self.sampling_rate <= 0:
            raise ValueError("sampling_rate must be positive")
        if self.resolution <= 0:
            raise ValueError("resolution must be positive")
        object.__setattr__(self, "samples", samples)

    @classmethod
    def from_quanta(cls, quanta, sampling_rate=DEFAULT_SAMPLING_RATE, resolution=DEFAULT_RESOLUTION_MV, lead="V5"):
        quanta = np.asarray(quanta)
        if not np.issubdtype(quanta.dtype, np.integer):
            if not np.all(quanta == np.round(quanta)):
                raise ValueError("quanta must be integers")
        return cls(np.asarray(quanta, dtype=float) * resolution, sampling_rate, resolution, lead)

    @property
    def duration(self):
        return self.samples.size / self.sampling_rate

    def ms_to_samples(self, ms):
        return nearest_int(ms * self.sampling_rate / 1000.0)


@dataclass(frozen=True)
class Beat:
    """Observables for one detected beat.

    ``rr`` is the interval from the previous R peak in milliseconds (None for
    the first beat).  Amplitudes are None when the beat is invalid.  Beats
    read back from a BeatSeries CSV carry no sample indices.
    """

    r_peak: int | None
    qrs_onset: int | None = None
    qrs_offset: int | None = None
    r_amplitude: float | None = None
    t_amplitude: float | None = None
    rr: float | None = None
    valid: bool = True

    def __post_init__(self):
        if self.valid and None not in (self.qrs_onset, self.r_peak, self.qrs_offset):
            if not self.qrs_onset < self.r_peak < self.qrs_offset:
                raise ValueError("need qrs_onset < r_peak < qrs_offset")
        if self.r_amplitude is not None and self.r_amplitude < 0:
            raise ValueError("r_amplitude must be nonnegative")
        if self.rr is not None and self.rr <= 0:
            raise ValueError("rr must be positive")


@dataclass
class BeatSeries:
    """Ordered beats of one subject."""

    beats: list
    subject_id: str = ""

    def __post_init__(self):
        peaks = [b.r_peak for b in self.beats if b.r_peak is not None]
        if len(peaks) > 1 and np.any(np.diff(peaks) <= 0):
            raise ValueError("r_peak indices must be strictly increasing")

    def __len__(self):
        return len(self.beats)

    @property
    def invalid_fraction(self):
        if not self.beats:
            return 0.0
        return sum(not b.valid for b in self.beats) / len(self.beats)

    @property
    def valid(self):
        return np.array([b.valid for b in self.beats], dtype=bool)

    @property
    def rr_ms(self):
        return np.array([np.nan if b.rr is None else b.rr for b in self.beats])

    @property
    def r_mv(self):
        return np.array([np.nan if b.r_amplitude is None else b.r_amplitude for b in self.beats])

    @property
    def t_mv(self):
        return np.array([np.nan if b.t_amplitude is None else b.t_amplitude for b in self.beats])


@dataclass(frozen=True)
class DetectorConfig:
    """Detector and cleaning parameters.

    Times are in milliseconds.  ``derivative_threshold_factor`` scales the
    running 2 s median of the integrated derivative energy;
    ``peak_fraction`` scales its running 2 s maximum; the adaptive threshold
    is the larger of the two, floored at ``min_slope`` (mV/s) squared.
    """

    derivative_threshold_factor: float = 2.0
    peak_fraction: float = 0.25
    min_slope: float = 10.0
    refractory: float = 200.0
    qrs_search_halfwidth: float = 80.0
    integration_window: float = 150.0
    threshold_window: float = 2000.0
    bound_fraction: float = 0.05
    bound_smoothing: float = 50.0
    rr_normal_range: tuple = (300.0, 2000.0)
    clean_block: int = 30
    max_invalid_fraction: float = 0.05

    def __post_init__(self):
        if self.refractory <= 0:
            raise ValueError("refractory must be positive")
        if self.qrs_search_halfwidth <= 0:
            raise ValueError("qrs_search_halfwidth must be positive")
        low, high = self.rr_normal_range
        if not low < high:
            raise ValueError("rr_normal_range must satisfy low < high")
        if self.clean_block < 3:
            raise ValueError("clean_block must be at least 3")
        if self.derivative_threshold_factor < 0 or not 0 <= self.peak_fraction < 1:
            raise ValueError("threshold factors out of range")
        if not 0 < self.bound_fraction < 1:
            raise ValueError("bound_fraction must lie in (0, 1)")


def _refine_peak(x, idx, half):
    """Climb to a sample that is the maximum of its own +-half window."""
    n = x.size
    for _ in range(16):
        lo, hi = max(0, idx - half), min(n, idx + half + 1)
        new = lo + int(np.argmax(x[lo:hi]))
        if new == idx:
            break
        idx = new
    return idx


def detect_r_peaks(record, cfg=DetectorConfig()):
    """Detect R peaks; returns a sorted integer array of sample indices.

    An empty array means no QRS activity crossed the threshold.
    """
    if record.duration < 2.0:
        raise ValueError("record shorter than 2 s")
    x = record.samples
    fs = record.sampling_rate
    slope = np.diff(x, prepend=x[0]) * fs
    energy = uniform_filter1d(slope**2, size=max(1, record.ms_to_samples(cfg.integration_window)), mode="nearest")
    window = max(1, record.ms_to_samples(cfg.threshold_window))
    threshold = np.maximum(
        cfg.derivative_threshold_factor * median_filter(energy, size=window, mode="nearest"),
        cfg.peak_fraction * maximum_filter1d(energy, size=window, mode="nearest"),
    )
    threshold = np.maximum(threshold, cfg.min_slope**2)
    above = energy > threshold
    if not above.any():
        return np.array([], dtype=int)

    edges = np.diff(above.astype(np.int8), prepend=0, append=0)
    starts = np.flatnonzero(edges == 1)
    stops = np.flatnonzero(edges == -1)
    half = record.ms_to_samples(cfg.qrs_search_halfwidth)
    candidates = []
    for s, e in zip(starts, stops):
        center = s + int(np.argmax(energy[s:e]))
        candidates.append(_refine_peak(x, center, half))

    refractory = record.ms_to_samples(cfg.refractory)
    kept = []
    for idx in sorted(set(candidates)):
        if kept and idx - kept[-1] < refractory:
            if x[idx] > x[kept[-1]]:
                kept[-1] = idx
            continue
        kept.append(idx)
    return np.asarray(kept, dtype=int)


def locate_qrs_bounds(record, r_peak, cfg=DetectorConfig()):
    """QRS onset and offset around ``r_peak``.

    The squared central derivative is smoothed over ``bound_smoothing`` ms.
    On each side the bound is the first sample beyond the outermost point
    whose energy reaches ``bound_fraction`` of the local maximum, capped at
    the search half-width.  Scanning from the window edge inward (rather than
    outward from the peak) keeps the Q/S troughs, where the derivative
    vanishes, from truncating the complex.
    """
    x = record.samples
    half = record.ms_to_samples(cfg.qrs_search_halfwidth)
    if r_peak - half < 1 or r_peak + half > x.size - 2:
        raise ValueError("r_peak too close to the record boundary for the QRS search window")
    seg = x[r_peak - half - 1 : r_peak + half + 2]
    slope = 0.5 * (seg[2:] - seg[:-2])
    energy = uniform_filter1d(slope**2, size=max(1, record.ms_to_samples(cfg.bound_smoothing)), mode="nearest")
    level = cfg.bound_fraction * energy.max()
    if level <= 0:
        return r_peak - half, r_peak + half
    above = np.flatnonzero(energy >= level)
    left = above[above < half]
    right = above[above > half]
    onset = left[0] - 1 if left.size else half - 1
    offset = right[-1] + 1 if right.size else half + 1
    onset = min(max(onset, 0), half - 1)
    offset = max(min(offset, 2 * half), half + 1)
    return int(r_peak - half + onset), int(r_peak - half + offset)


def compute_r_amplitude(record, onset, offset):
    """Maximum minus minimum of the signal over ``[onset, offset]``."""
    if not 0 <= onset < offset < record.samples.size:
        raise ValueError("need 0 <= onset < offset < len(samples)")
    window = record.samples[onset : offset + 1]
    return float(window.max() - window.min())


def compute_baseline(record, onset, offset):
    """Local baseline: mean of the signal at QRS onset and offset."""
    n = record.samples.size
    if not (0 <= onset < n and 0 <= offset < n):
        raise ValueError("onset/offset outside record")
    return 0.5 * (float(record.samples[onset]) + float(record.samples[offset]))


def t_window(r_peak, preceding_rr):
    """Inclusive sample window searched for the T apex."""
    lo, hi = T_WINDOW
    return r_peak + nearest_int(lo * preceding_rr), r_peak + nearest_int(hi * preceding_rr)


def compute_t_amplitude(record, r_peak, preceding_rr, baseline):
    """T apex over the baseline, searched 15-50% of the preceding RR after the R peak.

    ``preceding_rr`` is in samples.
    """
    if preceding_rr is None or preceding_rr <= 0:
        raise ValueError("preceding RR interval undefined")
    a, b = t_window(r_peak, preceding_rr)
    if b >= record.samples.size:
        raise ValueError("T window exceeds the record end")
    return float(record.samples[a : b + 1].max()) - baseline


def clean_rr(rr, cfg=DetectorConfig()):
    """Replace out-of-range RR values with the median of their 30-beat block.

    Blocks are consecutive non-overlapping partitions of ``clean_block``
    beats (the last may be shorter); medians use the original values.
    """
    rr = np.asarray(rr, dtype=float)
    if rr.size == 0:
        raise ValueError("empty RR series")
    low, high = cfg.rr_normal_range
    out = rr.copy()
    for start in range(0, rr.size, cfg.clean_block):
        block = rr[start : start + cfg.clean_block]
        bad = (block < low) | (block > high) | ~np.isfinite(block)
        if bad.all():
            raise InputError(f"all RR values out of range in block starting at beat {start}")
        if bad.any():
            out[start : start + block.size][bad] = np.median(block[np.isfinite(block)])
    return out


def extract_beat_series(record, cfg=DetectorConfig(), subject_id=""):
    """Run detection, delineation and measurement on one record."""
    peaks = detect_r_peaks(record, cfg)
    if peaks.size == 0:
        raise InputError("no beats detected")
    n = record.samples.size
    ms = 1000.0 / record.sampling_rate
    rr_ms = np.full(peaks.size, np.nan)
    rr_ms[1:] = np.diff(peaks) * ms
    if peaks.size > 1:
        rr_ms[1:] = clean_rr(rr_ms[1:], cfg)

    beats = []
    for k, r in enumerate(peaks):
        rr = None if k == 0 else float(rr_ms[k])
        try:
            onset, offset = locate_qrs_bounds(record, int(r), cfg)
            base = compute_baseline(record, onset, offset)
            r_amp = compute_r_amplitude(record, onset, offset)
            if k == 0:
                raise ValueError("first beat has no preceding RR interval")
            t_amp = compute_t_amplitude(record, int(r), int(peaks[k] - peaks[k - 1]), base)
        except ValueError as exc:
            logger.debug("beat %d at sample %d invalid: %s", k, r, exc)
            beats.append(Beat(r_peak=int(r), rr=rr, valid=False))
            continue
        beats.append(Beat(int(r), onset, offset, r_amp, t_amp, rr, True))

    series = BeatSeries(beats, subject_id)
    if series.invalid_fraction > cfg.max_invalid_fraction:
        raise InputError(
            f"{series.invalid_fraction:.1%} of beats invalid (limit {cfg.max_invalid_fraction:.0%}); unusable recording"
        )
    logger.info("%s: %d beats, %.2f%% invalid, %d samples", subject_id or "record", len(beats), 100 * series.invalid_fraction, n)
    return series


# --------------------------------------------------------------------------
# CSV formats


def read_ecg_csv(path, resolution=DEFAULT_RESOLUTION_MV, lead="V5"):
    """Read a raw ECG CSV with header ``t_s,quanta`` or ``t_s,mv``.

    The sampling rate comes from the first two timestamps; every interval
    must match it to 1 ppm.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise InputError(f"{path}: empty file") from None
        if header not in (["t_s", "quanta"], ["t_s", "mv"]):
            raise InputError(f"{path}: header must be 't_s,quanta' or 't_s,mv', got {','.join(header)!r}")
        quanta = header[1] == "quanta"
        times, values = [], []
        for row_no, row in enumerate(reader, start=2):
            if len(row) != 2:
                raise InputError(f"{path}: row {row_no}: expected 2 fields, got {len(row)}")
            try:
                times.append(float(row[0]))
                values.append(int(row[1]) if quanta else float(row[1]))
            except ValueError:
                raise InputError(f"{path}: row {row_no}: cannot parse {','.join(row)!r}") from None
    if len(times) < 2:
        raise InputError(f"{path}: need at least two samples")
    t = np.asarray(times)
    dt = t[1] - t[0]
    if dt <= 0:
        raise InputError(f"{path}: timestamps must increase")
    drift = np.abs(np.diff(t) - dt) / dt
    if drift.max() > 1e-6:
        bad = int(np.argmax(drift > 1e-6)) + 3
        raise InputError(f"{path}: row {bad}: sampling not uniform to 1 ppm")
    fs = 1.0 / dt
    if abs(fs - round(fs)) <= 1e-6 * fs:
        fs = float(round(fs))
    v = np.asarray(values)
    if quanta:
        return EcgRecord.from_quanta(v, fs, resolution, lead)
    return EcgRecord(v.astype(float), fs, resolution, lead)


def write_ecg_csv(record, path, quanta=True):
    """Write ``record`` as ``t_s,quanta`` (default) or ``t_s,mv``."""
    t = np.arange(record.samples.size) / record.sampling_rate
    with open(path, "w", newline="") as fh:
        if quanta:
            q = np.round(record.samples / record.resolution).astype(np.int64)
            fh.write("t_s,quanta\n")
            fh.writelines(f"{ti:.9f},{qi}\n" for ti, qi in zip(t.tolist(), q.tolist()))
        else:
            fh.write("t_s,mv\n")
            fh.writelines(f"{ti:.9f},{vi!r}\n" for ti, vi in zip(t.tolist(), record.samples.tolist()))


def _fmt(value):
    return "" if value is None or (isinstance(value, float) and math.isnan(value)) else repr(float(value))


def write_beat_series_csv(series, path):
    """Write ``beat,rr_ms,r_mv,t_mv,valid``; beats are numbered from 1."""
    with open(path, "w", newline="") as fh:
        fh.write("beat,rr_ms,r_mv,t_mv,valid\n")
        for k, b in enumerate(series.beats, start=1):
            fh.write(f"{k},{_fmt(b.rr)},{_fmt(b.r_amplitude)},{_fmt(b.t_amplitude)},{int(b.valid)}\n")


def read_beat_series_csv(path, subject_id=None):
    path = Path(path)
    beats = []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader, [])]
        if header != ["beat", "rr_ms", "r_mv", "t_mv", "valid"]:
            raise InputError(f"{path}: header must be 'beat,rr_ms,r_mv,t_mv,valid'")
        for row_no, row in enumerate(reader, start=2):
            if len(row) != 5:
                raise InputError(f"{path}: row {row_no}: expected 5 fields, got {len(row)}")
            try:
                rr, r, t = (float(v) if v.strip() else None for v in row[1:4])
                valid = row[4].strip() in ("1", "true", "True")
                beats.append(Beat(r_peak=None, r_amplitude=r, t_amplitude=t, rr=rr, valid=valid))
            except ValueError as exc:
                raise InputError(f"{path}: row {row_no}: {exc}") from None
    if not beats:
        raise InputError(f"{path}: no beats")
    return BeatSeries(beats, subject_id if subject_id is not None else path.stem)
