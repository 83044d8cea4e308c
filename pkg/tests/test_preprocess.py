import logging

import numpy as np
import pytest
from hypothesis import given, strategies as st

from pvcnet.preprocess import (RawRecording, bandpass, design_bandpass, extract_beat, normalize,
                               pre_samples, process_recording, window_bounds, window_length)


def analytic_gain(f, fs, lo=0.4, hi=50.0, order=4):
    """Two-pass gain of the bilinear Butterworth band-pass: |H|**2 with prewarped edges."""
    warp = lambda v: 2 * fs * np.tan(np.pi * v / fs)  # noqa: E731
    w, wl, wh = warp(f), warp(lo), warp(hi)
    return 1 / (1 + ((w * w - wl * wh) / (w * (wh - wl))) ** (2 * order))


def steady_amplitude(f, fs=360.0, seconds=100):
    t = np.arange(int(seconds * fs)) / fs
    y = bandpass(np.sin(2 * np.pi * f * t), fs)
    mid = slice(int(40 * fs), int(60 * fs))  # whole number of periods
    return abs(2 * np.mean(y[mid] * np.exp(-2j * np.pi * f * t[mid])))


class TestBandpass:
    def test_dc_removed(self):
        y = bandpass(np.full(7200, 3.0), 360)
        assert np.max(np.abs(y[1800:-1800])) <= 1e-3 * 3.0

    def test_passband(self):
        assert 0.9 <= steady_amplitude(5.0) <= 1.0

    def test_mains_attenuated(self):
        assert steady_amplitude(60.0) <= 0.5

    @pytest.mark.parametrize("f", [1.0, 5.0, 30.0, 40.0, 60.0, 100.0])
    def test_matches_transfer_function(self, f):
        assert steady_amplitude(f) == pytest.approx(analytic_gain(f, 360.0), abs=1e-9)

    def test_frozen_gains(self):
        assert analytic_gain(60.0, 360.0) == pytest.approx(0.150615932578034, abs=1e-14)
        assert analytic_gain(40.0, 360.0) == pytest.approx(0.882982579652973, abs=1e-14)

    def test_length_preserved(self):
        assert bandpass(np.random.default_rng(0).normal(size=37), 250).shape == (37,)

    def test_linear(self):
        rng = np.random.default_rng(1)
        x, y = rng.normal(size=1000), rng.normal(size=1000)
        lhs = bandpass(2.5 * x - 0.7 * y, 360)
        np.testing.assert_allclose(lhs, 2.5 * bandpass(x, 360) - 0.7 * bandpass(y, 360), rtol=0, atol=1e-9)

    def test_time_reversal(self):
        x = np.random.default_rng(2).normal(size=1000)
        np.testing.assert_allclose(bandpass(x[::-1], 360), bandpass(x, 360)[::-1], rtol=0, atol=1e-9)

    @pytest.mark.parametrize("fs", [100, 50])
    def test_rate_too_low(self, fs):
        with pytest.raises(ValueError, match="too low"):
            design_bandpass(fs)

    def test_order(self):
        # four second-order sections: order 4 low half plus order 4 high half
        assert design_bandpass(360).shape == (4, 6)


class TestWindowing:
    @pytest.mark.parametrize("fs, length", [
        (360, 150), (720, 300),
        # round-half-even values; the reference table lists 108, 52 and 105
        (257, 107), (128, 53), (250, 104),
    ])
    def test_window_length(self, fs, length):
        assert window_length(fs) == length

    def test_reference_pre_samples(self):
        assert pre_samples(360) == 50
        assert window_bounds(360, 1000) == (950, 1099)

    def test_scaled_bounds(self):
        assert pre_samples(128) == 18
        assert window_bounds(128, 500) == (482, 534)

    def test_invalid_rate(self):
        with pytest.raises(ValueError):
            window_length(0)

    @given(st.floats(1, 2000), st.floats(1, 2000))
    def test_monotone(self, a, b):
        lo, hi = sorted((a, b))
        assert window_length(lo) <= window_length(hi)


class TestNormalize:
    def test_hand(self):
        np.testing.assert_array_equal(normalize([0, 5, 10]), [-1, 0, 1])

    def test_flat(self):
        np.testing.assert_array_equal(normalize([3, 3, 3]), [0, 0, 0])

    @given(st.lists(st.floats(-1e6, 1e6), min_size=2, max_size=60).filter(lambda v: min(v) != max(v)))
    def test_exact_extremes(self, values):
        out = normalize(values)
        assert out.min() == -1.0 and out.max() == 1.0


def recording(fs=360.0, n=3000, peaks=(30, 1000, 2000, 2950), labels=(0, 1, 0, 1)):
    t = np.arange(n) / fs
    return RawRecording(np.sin(2 * np.pi * 1.3 * t) + 0.2 * np.sin(2 * np.pi * 9 * t),
                        fs, np.array(peaks), np.array(labels), "r1", "db")


class TestExtraction:
    def test_window_and_label(self):
        beat = extract_beat(recording(), 1000)
        assert beat.samples.size == 150
        assert beat.label == 1
        assert beat.provenance == ("db", "r1", 1000)
        np.testing.assert_array_equal(beat.samples, recording().samples[950:1100])

    def test_too_early_skipped(self, caplog):
        with caplog.at_level(logging.INFO, logger="pvcnet.preprocess"):
            assert extract_beat(recording(), 30) is None
        assert "outside recording" in caplog.text

    def test_scaled_rate(self):
        rec = recording(fs=128, n=1000, peaks=(500,), labels=(0,))
        beat = extract_beat(rec, 500)
        assert beat.samples.size == 53
        np.testing.assert_array_equal(beat.samples, rec.samples[482:535])

    def test_process_recording(self):
        beats = process_recording(recording())
        assert [b.provenance[2] for b in beats] == [1000, 2000]
        for b in beats:
            assert b.samples.size == 150
            assert b.samples.min() == -1 and b.samples.max() == 1

    @pytest.mark.parametrize("peaks, labels", [((5, 3), (0, 0)), ((5,), (0, 1)), ((4000,), (0,))])
    def test_invalid_recording(self, peaks, labels):
        with pytest.raises(ValueError):
            RawRecording(np.zeros(3000), 360, np.array(peaks), np.array(labels))
