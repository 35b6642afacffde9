"""Trend extraction for cohorts of beat-indexed ECG amplitude series."""

__version__ = "0.1.0"
