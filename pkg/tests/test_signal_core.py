"""Preprocessing pipeline: resampling, filtering, epoching, rejection,
normalization. Expected values come from analytically generated signals
or hand computation."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from shiftprobe import signal_core as sc
from shiftprobe.signal_core import (
    ChannelLayout,
    MultichannelEpoch,
    PipelineError,
    RawRecording,
    Recording,
    bandpass,
    clip,
    epoch_split,
    normalize_per_channel,
    preprocess,
    reject_bad_epochs,
    resample,
)


def rms(x):
    return np.sqrt(np.mean(np.square(x)))


def tiny_layout(n):
    return ChannelLayout(tuple(f"ch{i}" for i in range(n)))


class TestChannelLayout:
    def test_default_is_the_19_channel_order(self):
        layout = ChannelLayout()
        assert layout.names == (
            "Fp1", "Fp2", "F3", "F4", "C3", "C4", "P3", "P4", "O1", "O2",
            "F7", "F8", "T7", "T8", "P7", "P8", "Fz", "Cz", "Pz",
        )
        assert layout.n_channels == 19

    def test_duplicate_names_rejected(self):
        with pytest.raises(ValueError):
            ChannelLayout(("a", "a"))

    def test_index_lookup(self):
        assert ChannelLayout().index("Cz") == 17
        with pytest.raises(KeyError):
            ChannelLayout().index("nope")


class TestResample:
    def test_constant_signal_rate_invariant(self):
        x = np.full((2, 2560), 5.0)
        y = resample(x, 256.0, 128.0)
        assert y.shape == (2, 1280)
        np.testing.assert_allclose(y, 5.0, rtol=1e-9)

    def test_10hz_sine_256_to_128(self):
        t_in = np.arange(1024) / 256.0
        t_out = np.arange(512) / 128.0
        y = resample(np.sin(2 * np.pi * 10 * t_in), 256.0, 128.0)
        ref = np.sin(2 * np.pi * 10 * t_out)
        core = slice(50, -50)  # exclude filter edge samples
        assert rms(y[core]) / rms(ref[core]) == pytest.approx(1.0, abs=0.01)
        np.testing.assert_allclose(y[core], ref[core], atol=0.02)

    def test_50hz_sine_retained_below_new_nyquist(self):
        t_in = np.arange(2560) / 256.0
        t_out = np.arange(1280) / 128.0
        y = resample(np.sin(2 * np.pi * 50 * t_in), 256.0, 128.0)
        ref = np.sin(2 * np.pi * 50 * t_out)
        core = slice(100, -100)
        assert rms(y[core]) / rms(ref[core]) == pytest.approx(1.0, abs=0.02)

    def test_output_length_is_rounded_ratio(self):
        for t_in, fs_in, fs_out in [(1000, 250.0, 128.0), (999, 256.0, 128.0), (35, 128.0, 256.0)]:
            y = resample(np.zeros(t_in), fs_in, fs_out)
            assert len(y) == int(np.floor(t_in * fs_out / fs_in + 0.5))

    def test_round_trip_preserves_band_limited_signal(self):
        t = np.arange(1280) / 128.0
        x = np.sin(2 * np.pi * 7 * t) + 0.5 * np.sin(2 * np.pi * 31 * t)
        back = resample(resample(x, 128.0, 256.0), 256.0, 128.0)
        n = len(x)
        core = slice(n // 10, -n // 10)  # central 80%
        assert rms(back[core] - x[core]) / rms(x[core]) < 0.02

    def test_nonfinite_rejected(self):
        bad = np.array([1.0, np.nan, 2.0])
        with pytest.raises(ValueError, match="finite"):
            resample(bad, 256.0, 128.0)


class TestBandpass:
    def test_constant_rejected_by_highpass_edge(self):
        out = bandpass(np.full(1280, 3.0), 0.5, 45.0, 128.0)
        assert np.abs(out).max() < 0.03  # < 1% of input

    def test_10hz_in_passband(self):
        t = np.arange(1280) / 128.0
        x = np.sin(2 * np.pi * 10 * t)
        y = bandpass(x, 0.5, 45.0, 128.0)
        core = slice(200, -200)
        assert 0.94 <= rms(y[core]) / rms(x[core]) <= 1.06

    def test_60hz_in_stopband(self):
        t = np.arange(2560) / 256.0
        x = np.sin(2 * np.pi * 60 * t)
        y = bandpass(x, 0.5, 45.0, 256.0)
        core = slice(400, -400)
        assert rms(y[core]) / rms(x[core]) <= 0.1

    def test_linearity(self):
        gen = np.random.default_rng(0)
        x = gen.normal(size=1280)
        y = gen.normal(size=1280)
        a, b = 2.5, -1.25
        lhs = bandpass(a * x + b * y, 0.5, 45.0, 128.0)
        rhs = a * bandpass(x, 0.5, 45.0, 128.0) + b * bandpass(y, 0.5, 45.0, 128.0)
        np.testing.assert_allclose(lhs, rhs, rtol=1e-9, atol=1e-12)

    def test_output_length_equals_input(self):
        for n in (130, 1280, 5000):
            assert bandpass(np.random.default_rng(1).normal(size=n), 0.5, 45.0, 128.0).shape == (n,)

    def test_invalid_edges_rejected(self):
        with pytest.raises(ValueError):
            bandpass(np.zeros(100), 45.0, 0.5, 128.0)
        with pytest.raises(ValueError):
            bandpass(np.zeros(100), 0.5, 70.0, 128.0)  # above Nyquist


class TestEpochSplit:
    def test_35s_gives_3_epochs(self):
        layout = tiny_layout(2)
        epochs = epoch_split(np.zeros((2, 35 * 128)), 128.0, layout)
        assert len(epochs) == 3
        assert all(ep.n_samples == 1280 for ep in epochs)

    def test_exact_multiple_no_remainder(self):
        epochs = epoch_split(np.zeros((1, 20 * 128)), 128.0, tiny_layout(1))
        assert len(epochs) == 2

    def test_too_short_returns_empty_with_warning(self):
        with pytest.warns(UserWarning):
            epochs = epoch_split(np.zeros((1, 9 * 128)), 128.0, tiny_layout(1))
        assert epochs == []

    def test_total_samples_bounded_by_input(self):
        t = 12345
        epochs = epoch_split(np.zeros((1, t)), 128.0, tiny_layout(1))
        assert len(epochs) * 1280 <= t


def _recording_from_arrays(arrays, fs=128.0, layout=None, **kw):
    layout = layout or tiny_layout(arrays[0].shape[0])
    eps = [MultichannelEpoch(layout, fs, a) for a in arrays]
    return Recording(id="r", epochs=eps, **kw)


class TestRejectBadEpochs:
    def test_single_loud_epoch_rejected(self):
        gen = np.random.default_rng(7)
        layout = ChannelLayout(("Cz", "x"))
        arrays = [gen.normal(size=(2, 1280)) for _ in range(10)]
        arrays[4] = arrays[4].copy()
        arrays[4][0] *= 10.0  # boost Cz power in one epoch
        rec = _recording_from_arrays(arrays, layout=layout)
        mask = reject_bad_epochs(rec)
        # independent oracle: recompute powers and the threshold directly
        powers = np.array([np.mean(a[0] ** 2) for a in arrays])
        expected = powers <= powers.mean() + 2.0 * powers.std()
        assert not expected[4]
        np.testing.assert_array_equal(mask, expected)

    def test_identical_epochs_all_valid(self):
        layout = ChannelLayout(("Cz",))
        arrays = [np.ones((1, 100)) for _ in range(5)]
        mask = reject_bad_epochs(_recording_from_arrays(arrays, layout=layout))
        assert mask.all()

    def test_two_epochs_hand_computed_threshold(self):
        # powers {1, 1.1}: threshold = 1.05 + 2*0.05 = 1.15, both valid
        layout = ChannelLayout(("Cz",))
        arrays = [np.full((1, 4), 1.0), np.full((1, 4), np.sqrt(1.1))]
        mask = reject_bad_epochs(_recording_from_arrays(arrays, layout=layout))
        assert mask.all()

    def test_missing_channel_rejected(self):
        rec = _recording_from_arrays([np.ones((1, 10))] * 2)
        with pytest.raises(KeyError):
            reject_bad_epochs(rec, ref_channel="Cz")


class TestClip:
    def test_examples(self):
        assert clip(np.array([900.0]))[0] == 800.0
        assert clip(np.array([-900.0]))[0] == -800.0
        assert clip(np.array([100.0]))[0] == 100.0

    @given(st.lists(st.floats(-2000, 2000), min_size=1, max_size=50))
    def test_idempotent(self, values):
        x = np.array(values)
        once = clip(x)
        np.testing.assert_array_equal(clip(once), once)
        assert np.abs(once).max() <= 800.0


class TestNormalize:
    def test_valid_epoch_statistics(self):
        gen = np.random.default_rng(1)
        arrays = [gen.normal(3.0, 2.0, size=(2, 640)) for _ in range(4)]
        rec = _recording_from_arrays(arrays)
        out = normalize_per_channel(rec)
        pooled = np.concatenate([ep.data for ep in out.valid_epochs()], axis=1)
        np.testing.assert_allclose(pooled.mean(axis=1), 0.0, atol=1e-9)
        np.testing.assert_allclose(pooled.std(axis=1), 1.0, atol=1e-9)

    def test_constant_channel_maps_to_zero(self):
        arrays = [np.full((1, 100), 7.0) for _ in range(3)]
        out = normalize_per_channel(_recording_from_arrays(arrays))
        for ep in out.epochs:
            np.testing.assert_array_equal(ep.data, 0.0)

    def test_invalid_epoch_excluded_from_statistics(self):
        gen = np.random.default_rng(2)
        arrays = [gen.normal(size=(1, 100)) for _ in range(4)]
        outlier = 100.0 * np.ones((1, 100))
        with_outlier = _recording_from_arrays(
            arrays + [outlier], valid_mask=np.array([1, 1, 1, 1, 0], bool)
        )
        without = _recording_from_arrays(list(arrays))
        a = normalize_per_channel(with_outlier)
        b = normalize_per_channel(without)
        for ep_a, ep_b in zip(a.epochs[:4], b.epochs):
            np.testing.assert_allclose(ep_a.data, ep_b.data, rtol=1e-12)

    def test_zero_valid_epochs_rejected(self):
        rec = _recording_from_arrays([np.ones((1, 10))], valid_mask=np.array([False]))
        with pytest.raises(ValueError):
            normalize_per_channel(rec)


def synth_raw(seconds=65.0, fs=256.0, seed=0, layout=None):
    layout = layout or ChannelLayout()
    gen = np.random.default_rng(seed)
    t = np.arange(int(seconds * fs)) / fs
    data = np.stack(
        [np.sin(2 * np.pi * (8 + ch % 5) * t) + 0.3 * gen.normal(size=len(t))
         for ch in range(layout.n_channels)]
    )
    return RawRecording(id="raw0", layout=layout, fs=fs, data=data, grade="normal", age=40.0)


class TestPreprocess:
    def test_pipeline_composition(self):
        rec = preprocess(synth_raw(seconds=65.0))
        assert len(rec.epochs) == 6
        assert rec.fs == 128.0
        assert all(ep.n_samples == 1280 for ep in rec.epochs)
        pooled = np.concatenate([ep.data for ep in rec.valid_epochs()], axis=1)
        np.testing.assert_allclose(pooled.mean(axis=1), 0.0, atol=1e-9)
        np.testing.assert_allclose(pooled.std(axis=1), 1.0, atol=1e-9)
        assert np.abs(pooled).max() <= 800.0

    def test_deterministic(self):
        a = preprocess(synth_raw())
        b = preprocess(synth_raw())
        for ea, eb in zip(a.epochs, b.epochs):
            np.testing.assert_array_equal(ea.data, eb.data)

    def test_too_short_recording_raises_with_stage(self):
        with pytest.raises(PipelineError, match="too short"), pytest.warns(UserWarning):
            preprocess(synth_raw(seconds=5.0))

    def test_channel_reorder_applied(self):
        layout = ChannelLayout()
        reversed_layout = ChannelLayout(tuple(reversed(layout.names)))
        raw = synth_raw()
        flipped = RawRecording(
            id=raw.id, layout=reversed_layout, fs=raw.fs, data=raw.data[::-1].copy(),
            grade=raw.grade, age=raw.age,
        )
        a, b = preprocess(raw), preprocess(flipped)
        for ea, eb in zip(a.epochs, b.epochs):
            np.testing.assert_allclose(ea.data, eb.data, atol=1e-12)

    def test_unmappable_layout_rejected(self):
        raw = synth_raw(layout=ChannelLayout(("only", "two")))
        with pytest.raises(PipelineError, match="reorder"):
            preprocess(raw)


class TestLabels:
    def test_grade_and_age_validation(self):
        with pytest.raises(ValueError):
            Recording(id="x", epochs=[], grade="odd")
        with pytest.raises(ValueError):
            Recording(id="x", epochs=[], age=150.0)
