"""The four data shifts: grammar, parameter validation, signal behavior."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from shiftprobe import shifts
from shiftprobe.encoders import periodogram_psd
from shiftprobe.shifts import (
    ShiftKind,
    ShiftSpec,
    apply,
    apply_bandpass_shift,
    apply_broadband_noise,
    apply_impedance_noise,
    apply_quantization,
    default_grid,
    parse_shift,
)


def rms(x):
    return np.sqrt(np.mean(np.square(x)))


class TestGrammar:
    @pytest.mark.parametrize(
        "token",
        ["BP(0.5,30)", "BP(1,25)", "QP(8)", "IN(sigma=0.01,seed=7)",
         "BN(sigma=0.1,seed=7)", "none"],
    )
    def test_round_trip(self, token):
        assert parse_shift(token).token() == token

    def test_whitespace_and_case_tolerated(self):
        assert parse_shift(" bp( 0.5 , 30 ) ").token() == "BP(0.5,30)"
        assert parse_shift("NoShift").kind is ShiftKind.NO_SHIFT

    @pytest.mark.parametrize("bad", ["BP(30)", "QP(7)", "IN(sigma=0.1)", "XX(1)", "BN(0.1,7)"])
    def test_malformed_rejected(self, bad):
        with pytest.raises(ValueError):
            parse_shift(bad)

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            ShiftSpec(ShiftKind.BAND_PASS, band=(30.0, 1.0))
        with pytest.raises(ValueError):
            ShiftSpec(ShiftKind.QUANTIZATION, digits=7)
        with pytest.raises(ValueError):
            ShiftSpec(ShiftKind.BROADBAND_NOISE, sigma=-1.0, seed=1)
        with pytest.raises(ValueError):
            ShiftSpec(ShiftKind.BROADBAND_NOISE, sigma=0.1)  # missing seed
        with pytest.raises(ValueError):
            ShiftSpec(ShiftKind.NO_SHIFT, sigma=0.1)

    def test_default_grid_is_identity_plus_12_cells(self):
        grid = default_grid(7)
        assert len(grid) == 13
        assert grid[0].kind is ShiftKind.NO_SHIFT
        tokens = [s.token() for s in grid[1:]]
        assert tokens == [
            "BP(0.5,30)", "BP(1,30)", "BP(1,25)",
            "QP(12)", "QP(8)", "QP(6)",
            "IN(sigma=0.001,seed=7)", "IN(sigma=0.01,seed=7)", "IN(sigma=0.1,seed=7)",
            "BN(sigma=0.001,seed=7)", "BN(sigma=0.01,seed=7)", "BN(sigma=0.1,seed=7)",
        ]


class TestBandpassShift:
    def test_35hz_attenuated_by_30hz_cutoff(self):
        t = np.arange(2560) / 128.0
        x = np.sin(2 * np.pi * 35 * t)
        y = apply_bandpass_shift(x, 0.5, 30.0, 128.0)
        core = slice(400, -400)
        assert rms(y[core]) / rms(x[core]) <= 0.1  # >= 20 dB down

    def test_10hz_preserved_by_1_25_band(self):
        t = np.arange(2560) / 128.0
        x = np.sin(2 * np.pi * 10 * t)
        y = apply_bandpass_shift(x, 1.0, 25.0, 128.0)
        core = slice(400, -400)
        assert 0.94 <= rms(y[core]) / rms(x[core]) <= 1.06

    def test_nested_passbands_compose(self):
        gen = np.random.default_rng(0)
        x = gen.normal(size=(2, 5120))
        both = apply_bandpass_shift(apply_bandpass_shift(x, 0.5, 30.0, 128.0), 1.0, 25.0, 128.0)
        narrow = apply_bandpass_shift(x, 1.0, 25.0, 128.0)
        core = (slice(None), slice(600, -600))
        assert rms(both[core] - narrow[core]) / rms(narrow[core]) < 0.02


class TestQuantization:
    def test_truncation_examples(self):
        assert apply_quantization(np.array([1.23456789]), 6)[0] == pytest.approx(1.234567, abs=1e-12)
        assert apply_quantization(np.array([-1.23456789]), 6)[0] == pytest.approx(-1.234567, abs=1e-12)

    def test_short_decimal_is_fixed_point_at_d12(self):
        vals = np.array([0.3, 0.1, 1.234567, -42.125, 800.0])
        np.testing.assert_array_equal(apply_quantization(vals, 12), vals)

    @pytest.mark.parametrize("digits", [6, 8, 12])
    def test_idempotent_and_error_bounded(self, digits):
        x = np.random.default_rng(3).uniform(-800, 800, 20000)
        once = apply_quantization(x, digits)
        twice = apply_quantization(once, digits)
        np.testing.assert_array_equal(once, twice)
        assert np.abs(once - x).max() < 10.0 ** (-digits)

    @given(st.floats(-800, 800), st.sampled_from([6, 8, 12]))
    @settings(max_examples=200)
    def test_idempotence_property(self, value, digits):
        once = apply_quantization(np.array([value]), digits)
        twice = apply_quantization(once, digits)
        assert once[0] == twice[0]
        assert abs(once[0] - value) < 10.0 ** (-digits)

    def test_invalid_digits(self):
        with pytest.raises(ValueError):
            apply_quantization(np.zeros(3), 7)


class TestImpedanceNoise:
    def test_deterministic_given_seed(self):
        x = np.zeros((2, 1280))
        a = apply_impedance_noise(x, 0.01, 7, 128.0, "rec")
        b = apply_impedance_noise(x, 0.01, 7, 128.0, "rec")
        np.testing.assert_array_equal(a, b)
        c = apply_impedance_noise(x, 0.01, 8, 128.0, "rec")
        assert not np.array_equal(a, c)

    def test_difference_signal_is_low_frequency(self):
        x = np.zeros((1, 60 * 128))
        out = apply_impedance_noise(x, 0.01, 7, 128.0, "rec")
        freqs, psd = periodogram_psd(out[0] - x[0], 128.0)
        assert psd[freqs < 1.5].sum() / psd.sum() >= 0.95

    def test_sigma_scales_noise_linearly(self):
        x = np.zeros((2, 1280))
        small = apply_impedance_noise(x, 0.001, 7, 128.0, "rec")
        big = apply_impedance_noise(x, 0.1, 7, 128.0, "rec")
        np.testing.assert_allclose(big, 100.0 * small, rtol=1e-9)


class TestBroadbandNoise:
    def test_sample_variance_matches_sigma_squared(self):
        x = np.zeros((1, 100_000))
        out = apply_broadband_noise(x, 0.01, 9, "rec")
        assert (out - x).var() == pytest.approx(1e-4, rel=0.05)

    def test_zero_input_mean_within_gaussian_bound(self):
        n = 100_000
        out = apply_broadband_noise(np.zeros((1, n)), 0.01, 9, "rec")
        assert abs(out.mean()) <= 3 * 0.01 / np.sqrt(n)

    def test_same_seed_scales_with_sigma(self):
        x = np.zeros((1, 1000))
        a = apply_broadband_noise(x, 0.01, 9, "rec")
        b = apply_broadband_noise(x, 0.02, 9, "rec")
        np.testing.assert_allclose(b, 2.0 * a, rtol=1e-12)

    def test_channels_draw_independent_streams(self):
        out = apply_broadband_noise(np.zeros((2, 1000)), 1.0, 9, "rec")
        assert abs(np.corrcoef(out[0], out[1])[0, 1]) < 0.2


class TestApplyDispatch:
    def test_identity_is_exact(self):
        x = np.random.default_rng(1).normal(size=(2, 33))
        out = apply(ShiftSpec(ShiftKind.NO_SHIFT), x)
        np.testing.assert_array_equal(out, x)
        assert out is not x

    def test_full_grid_is_applicable(self):
        x = np.random.default_rng(2).normal(size=(2, 2560))
        for spec in default_grid(7):
            out = apply(spec, x, fs=256.0, recording_id="r")
            assert out.shape == x.shape
            assert np.all(np.isfinite(out))

    def test_noise_commutes_with_constant_offset(self):
        x = np.random.default_rng(3).normal(size=(1, 1280))
        c = 5.0
        for spec in (
            ShiftSpec(ShiftKind.BROADBAND_NOISE, sigma=0.1, seed=5),
            ShiftSpec(ShiftKind.IMPEDANCE_NOISE, sigma=0.1, seed=5),
        ):
            a = apply(spec, x + c, fs=128.0, recording_id="r")
            b = apply(spec, x, fs=128.0, recording_id="r") + c
            np.testing.assert_allclose(a, b, rtol=1e-12)

    def test_noise_preserves_shape_and_channel_count(self):
        x = np.zeros((5, 640))
        for spec in default_grid(3)[7:]:
            assert apply(spec, x, fs=128.0).shape == x.shape

    def test_missing_fs_rejected_where_needed(self):
        with pytest.raises(ValueError):
            apply(ShiftSpec(ShiftKind.BAND_PASS, band=(0.5, 30.0)), np.zeros((1, 100)))
