"""Landmark registration and temporal-mean normalization of a cohort.

Beat numbers in this module are 1-based, matching how the registered window
is described: positions ``1..m`` with the acme at position ``m/2``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import median_filter

from ecgtrend.errors import StatisticalAbort

__all__ = [
    "AmplitudeSeries",
    "RegisteredCohort",
    "NormalizedCohort",
    "CohortBundle",
    "find_acme",
    "register",
    "normalize",
    "normalize_rows",
    "population_mean_raw",
    "channels_from_beats",
    "build_cohort",
    "write_cohort_csv",
    "write_cohort_metadata",
]

logger = logging.getLogger(__name__)

CHANNELS = ("rr", "r", "t")


@dataclass(frozen=True)
class AmplitudeSeries:
    """Beat-indexed series ``X_i(t)`` of one subject."""

    values: np.ndarray
    subject_id: str = ""
    positive: bool = True

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 1 or values.size == 0:
            raise ValueError("series must be a nonempty 1-d sequence")
        if not np.all(np.isfinite(values)):
            raise ValueError(f"{self.subject_id or 'series'}: values must be finite")
        if self.positive and np.any(values <= 0):
            raise ValueError(f"{self.subject_id or 'series'}: amplitudes must be strictly positive")
        object.__setattr__(self, "values", values)

    def __len__(self):
        return self.values.size


@dataclass(frozen=True)
class RegisteredCohort:
    """``n x m`` windows aligned so the acme sits at ``acme_index`` (1-based)."""

    matrix: np.ndarray
    acme_index: int
    subject_ids: tuple

    def __post_init__(self):
        if self.matrix.ndim != 2:
            raise ValueError("matrix must be 2-d")
        if not 1 <= self.acme_index <= self.matrix.shape[1]:
            raise ValueError("acme_index outside [1, m]")

    @property
    def m(self):
        return self.matrix.shape[1]


@dataclass(frozen=True)
class NormalizedCohort:
    """Rows ``Y_i(t) = X_i(t) / D_i`` with their temporal means ``D_i``."""

    matrix: np.ndarray
    d: np.ndarray
    acme_index: int
    subject_ids: tuple

    @property
    def n(self):
        return self.matrix.shape[0]

    @property
    def m(self):
        return self.matrix.shape[1]


def find_acme(rr, smooth_window=0):
    """1-based beat number of the global RR minimum (earliest on ties).

    With ``smooth_window > 1`` the argmin is taken on a running median of
    that many beats instead of the raw series.
    """
    values = rr.values if isinstance(rr, AmplitudeSeries) else np.asarray(rr, dtype=float)
    if values.size == 0:
        raise ValueError("empty RR series")
    if smooth_window and smooth_window > 1:
        values = median_filter(values, size=int(smooth_window), mode="nearest")
    return int(np.argmin(values)) + 1


def register(series, acme, m=1200):
    """Window of ``m`` beats with the acme at position ``m/2``.

    The window spans beats ``acme - m/2 + 1 .. acme + m/2``.
    """
    values = series.values if isinstance(series, AmplitudeSeries) else np.asarray(series, dtype=float)
    if m < 2 or m % 2:
        raise ValueError("m must be an even count >= 2")
    half = m // 2
    first, last = acme - half + 1, acme + half
    if first < 1 or last > values.size:
        raise ValueError(
            f"acme too close to record edge: beat {acme} needs {half - 1} beats before and {half} after "
            f"(series length {values.size})"
        )
    return values[first - 1 : last].copy()


def normalize(window):
    """Divide by the temporal mean; returns ``(normalized, D)``."""
    window = np.asarray(window, dtype=float)
    d = window.mean()
    if not d > 0:
        raise ValueError("temporal mean must be positive")
    return window / d, float(d)


def normalize_rows(matrix):
    """Row-wise ``normalize``; returns ``(normalized matrix, D vector)``."""
    matrix = np.asarray(matrix, dtype=float)
    d = matrix.mean(axis=1)
    if np.any(~(d > 0)):
        raise ValueError("every row needs a positive temporal mean")
    return matrix / d[:, None], d


def population_mean_raw(cohort):
    """Column means of the normalized cohort, the non-smooth raw mean."""
    matrix = cohort.matrix if isinstance(cohort, NormalizedCohort) else np.asarray(cohort, dtype=float)
    if matrix.shape[0] < 2:
        raise ValueError("need at least 2 subjects")
    return matrix.mean(axis=0)


def channels_from_beats(series):
    """Amplitude series per channel from a BeatSeries, valid beats only.

    The same beat selection is used for every channel so their indices stay
    aligned with the RR series used for registration.
    """
    valid = series.valid & np.isfinite(series.rr_ms) & np.isfinite(series.r_mv) & np.isfinite(series.t_mv)
    sid = series.subject_id
    return {
        "rr": AmplitudeSeries(series.rr_ms[valid], sid),
        "r": AmplitudeSeries(series.r_mv[valid], sid),
        "t": AmplitudeSeries(series.t_mv[valid], sid),
    }


@dataclass
class CohortBundle:
    """Per-channel normalized cohorts plus the registration log."""

    channels: dict
    registered: dict
    acme_beats: dict = field(default_factory=dict)
    excluded: dict = field(default_factory=dict)


def build_cohort(subjects, m=1200, acme_smoothing=0, length_bounds=(1500, 3000), channels=CHANNELS):
    """Register and normalize every subject's channels.

    Parameters
    ----------
    subjects : sequence of dict
        ``{channel: AmplitudeSeries}`` per subject, all channels of a subject
        sharing one beat index; ``rr`` is required.
    m : int
        Window length.
    acme_smoothing : int
        Running-median length for the acme search (0 uses the raw RR).
    length_bounds : (int, int)
        Accepted series lengths; subjects outside are excluded.

    Subjects that cannot be registered are excluded with a warning, never
    padded.
    """
    rows = {c: [] for c in channels}
    ids, acmes, excluded = [], {}, {}
    low, high = length_bounds
    for chans in subjects:
        rr = chans["rr"]
        sid = rr.subject_id
        if not low <= len(rr) <= high:
            excluded[sid] = f"length {len(rr)} outside [{low}, {high}]"
            logger.warning("excluding %s: %s", sid, excluded[sid])
            continue
        acme = find_acme(rr, acme_smoothing)
        try:
            windows = {c: register(chans[c], acme, m) for c in channels}
        except ValueError as exc:
            excluded[sid] = str(exc)
            logger.warning("excluding %s: %s", sid, exc)
            continue
        for c in channels:
            rows[c].append(windows[c])
        ids.append(sid)
        acmes[sid] = acme
    if len(ids) < 2:
        raise StatisticalAbort(f"only {len(ids)} subject(s) survive registration; need at least 2")
    ids = tuple(ids)
    registered, normalized = {}, {}
    for c in channels:
        mat = np.vstack(rows[c])
        registered[c] = RegisteredCohort(mat, m // 2, ids)
        y, d = normalize_rows(mat)
        normalized[c] = NormalizedCohort(y, d, m // 2, ids)
    return CohortBundle(normalized, registered, acmes, excluded)


def write_cohort_csv(cohort, path):
    """``beat`` column (1..m) followed by one column per subject."""
    m = cohort.matrix.shape[1]
    with open(path, "w", newline="") as fh:
        fh.write(",".join(["beat", *cohort.subject_ids]) + "\n")
        for t in range(m):
            fh.write(",".join([str(t + 1), *(repr(float(v)) for v in cohort.matrix[:, t])]) + "\n")


def write_cohort_metadata(bundle, channel, path):
    """Sidecar text: acme beats, D_i values and excluded subjects."""
    cohort = bundle.channels[channel]
    lines = [f"channel={channel}", f"m={cohort.m}", f"acme_index={cohort.acme_index}"]
    for sid, d in zip(cohort.subject_ids, cohort.d):
        lines.append(f"subject={sid} acme_beat={bundle.acme_beats[sid]} D={float(d)!r}")
    for sid, reason in sorted(bundle.excluded.items()):
        lines.append(f"excluded={sid} reason={reason}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
