"""ECG preprocessing: band-pass filtering, rate-scaled beat windows, normalization."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import signal as sps

log = logging.getLogger(__name__)

REF_FS = 360.0
REF_LENGTH = 150
REF_PRE = 50
BAND = (0.4, 50.0)
FILTER_ORDER = 4


@dataclass
class RawRecording:
    samples: np.ndarray
    fs: float
    r_peaks: np.ndarray
    beat_labels: np.ndarray
    record_id: str = ""
    database_id: str = ""

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        self.r_peaks = np.asarray(self.r_peaks, dtype=np.int64)
        self.beat_labels = np.asarray(self.beat_labels, dtype=np.int64)
        if self.r_peaks.shape != self.beat_labels.shape:
            raise ValueError("beat_labels must align with r_peaks")
        if np.any(np.diff(self.r_peaks) <= 0):
            raise ValueError("r_peaks must be strictly increasing")
        if self.r_peaks.size and (self.r_peaks[0] < 0 or self.r_peaks[-1] >= self.samples.size):
            raise ValueError("r_peaks fall outside the recording")


@dataclass
class BeatWindow:
    samples: np.ndarray
    fs: float
    label: int
    provenance: tuple[str, str, int]


def design_bandpass(fs: float) -> np.ndarray:
    """Second-order sections of the 4th-order 0.4-50 Hz Butterworth band-pass."""
    if fs <= 2 * BAND[1]:
        raise ValueError(f"sampling rate {fs} Hz too low: the 50 Hz band edge needs fs > 100 Hz")
    return sps.butter(FILTER_ORDER, BAND, btype="bandpass", fs=fs, output="sos")


def bandpass(samples, fs: float) -> np.ndarray:
    """Zero-phase (forward then backward) band-pass filtering.

    Both ends are reflect-padded by three times the filter order before
    filtering and trimmed afterwards. The output is the mean of the
    forward-backward and backward-forward runs.
    """
    sos = design_bandpass(fs)
    x = np.asarray(samples, dtype=np.float64)
    pad = min(3 * FILTER_ORDER, x.size - 1)

    def run(v):
        return sps.sosfiltfilt(sos, v, padtype="even" if pad > 0 else None, padlen=max(pad, 0))

    # the edge initial conditions make forward-backward differ from
    # backward-forward near the ends; averaging both orders keeps the
    # result exactly symmetric under time reversal
    return 0.5 * (run(x) + run(x[::-1])[::-1])


def window_length(fs: float) -> int:
    """Rate-scaled beat length, 150 samples at 360 Hz, rounded half to even."""
    if fs <= 0:
        raise ValueError("sampling rate must be positive")
    return int(round(REF_LENGTH * fs / REF_FS))


def pre_samples(fs: float) -> int:
    return int(round(REF_PRE * fs / REF_FS))


def window_bounds(fs: float, r_index: int) -> tuple[int, int]:
    """Inclusive ``(start, stop)`` sample indices of the beat around ``r_index``."""
    pre = pre_samples(fs)
    post = window_length(fs) - pre - 1
    return r_index - pre, r_index + post


def normalize(samples) -> np.ndarray:
    """Min-max scale to [-1, 1]; a flat window maps to zeros."""
    x = np.asarray(samples, dtype=np.float64)
    lo, hi = x.min(), x.max()
    if hi == lo:
        return np.zeros_like(x)
    out = 2.0 * (x - lo) / (hi - lo) - 1.0
    # rounding can leave the extremes a ulp off
    out[x == lo] = -1.0
    out[x == hi] = 1.0
    return out


def extract_beat(rec: RawRecording, r_index: int, samples: np.ndarray | None = None) -> BeatWindow | None:
    """Cut the beat at ``r_index``; returns ``None`` (logged) if it does not fit."""
    data = rec.samples if samples is None else samples
    start, stop = window_bounds(rec.fs, int(r_index))
    if start < 0 or stop >= data.size:
        log.info("skipping beat at %d in %s/%s: window [%d, %d] outside recording of %d samples",
                 r_index, rec.database_id, rec.record_id, start, stop, data.size)
        return None
    label = 0
    hits = np.nonzero(rec.r_peaks == r_index)[0]
    if hits.size:
        label = int(rec.beat_labels[hits[0]])
    return BeatWindow(data[start : stop + 1].copy(), rec.fs, label,
                      (rec.database_id, rec.record_id, int(r_index)))


def process_recording(rec: RawRecording) -> list[BeatWindow]:
    """Filter the whole recording, then cut and normalize every annotated beat."""
    filtered = bandpass(rec.samples, rec.fs)
    beats = []
    for r in rec.r_peaks:
        beat = extract_beat(rec, int(r), filtered)
        if beat is not None:
            beat.samples = normalize(beat.samples)
            beats.append(beat)
    return beats
