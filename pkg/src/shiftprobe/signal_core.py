"""Multichannel epoch/recording types and the standard preprocessing pipeline.

The pipeline takes a raw multichannel recording and produces normalized
10-second epochs: reorder channels -> resample to 128 Hz -> bandpass
0.5-45 Hz -> split into epochs -> reject high-power epochs -> clip to
+/-800 uV -> z-normalize per channel over the valid epochs.

All operations are pure functions of their inputs; nothing here keeps
global state, so recordings can be processed by independent workers.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from fractions import Fraction

import numpy as np
from scipy import signal as sps

DEFAULT_CHANNELS: tuple[str, ...] = (
    "Fp1", "Fp2", "F3", "F4", "C3", "C4", "P3", "P4", "O1", "O2",
    "F7", "F8", "T7", "T8", "P7", "P8", "Fz", "Cz", "Pz",
)

TARGET_FS = 128.0
BAND_LOW_HZ = 0.5
BAND_HIGH_HZ = 45.0
EPOCH_SECONDS = 10.0
CLIP_LIMIT = 800.0
BAD_EPOCH_CHANNEL = "Cz"
BAD_EPOCH_SDS = 2.0

# Hamming-window FIR design: transition width ~ 3.3 / numtaps (normalized).
_HAMMING_TRANSITION = 3.3


class PipelineError(ValueError):
    """Raised when a preprocessing stage fails; carries the stage name."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"{stage}: {message}")
        self.stage = stage


@dataclass(frozen=True)
class ChannelLayout:
    """Ordered channel labels. The default is the standard 19-channel order."""

    names: tuple[str, ...] = DEFAULT_CHANNELS

    def __post_init__(self):
        if len(self.names) < 1:
            raise ValueError("layout needs at least one channel")
        if len(set(self.names)) != len(self.names):
            raise ValueError("channel names must be unique")
        object.__setattr__(self, "names", tuple(self.names))

    @property
    def n_channels(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"channel {name!r} not in layout") from None


@dataclass
class MultichannelEpoch:
    """One fixed-duration window of a recording: an (M, N) sample matrix."""

    layout: ChannelLayout
    fs: float
    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            raise ValueError("epoch data must be 2-D (channels x samples)")
        if self.data.shape[0] != self.layout.n_channels:
            raise ValueError(
                f"epoch has {self.data.shape[0]} rows for a "
                f"{self.layout.n_channels}-channel layout"
            )
        if not np.all(np.isfinite(self.data)):
            raise ValueError("epoch contains non-finite values")

    @property
    def n_samples(self) -> int:
        return self.data.shape[1]


@dataclass
class RawRecording:
    """A continuous multichannel signal before preprocessing."""

    id: str
    layout: ChannelLayout
    fs: float
    data: np.ndarray  # (M, T)
    grade: str | None = None
    age: float | None = None
    domain: str = "A"

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2 or self.data.shape[0] != self.layout.n_channels:
            raise ValueError("raw data must be (n_channels, n_samples)")
        _check_labels(self.grade, self.age)


@dataclass
class Recording:
    """An epoched recording with optional labels and a per-epoch validity mask."""

    id: str
    epochs: list[MultichannelEpoch]
    grade: str | None = None
    age: float | None = None
    valid_mask: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))
    domain: str = "A"

    def __post_init__(self):
        _check_labels(self.grade, self.age)
        if self.epochs:
            layout, fs = self.epochs[0].layout, self.epochs[0].fs
            for ep in self.epochs:
                if ep.layout != layout or ep.fs != fs:
                    raise ValueError("all epochs must share layout and sampling rate")
        self.valid_mask = np.asarray(self.valid_mask, dtype=bool)
        if self.valid_mask.size == 0 and self.epochs:
            self.valid_mask = np.ones(len(self.epochs), dtype=bool)
        if self.valid_mask.size != len(self.epochs):
            raise ValueError("valid_mask length must equal epoch count")

    @property
    def layout(self) -> ChannelLayout:
        return self.epochs[0].layout

    @property
    def fs(self) -> float:
        return self.epochs[0].fs

    def valid_epochs(self) -> list[MultichannelEpoch]:
        return [ep for ep, ok in zip(self.epochs, self.valid_mask) if ok]


def _check_labels(grade: str | None, age: float | None) -> None:
    if grade is not None and grade not in ("normal", "abnormal"):
        raise ValueError(f"grade must be 'normal' or 'abnormal', got {grade!r}")
    if age is not None and not (0.0 <= age <= 120.0):
        raise ValueError(f"age must lie in [0, 120] years, got {age}")


# ---------------------------------------------------------------------------
# FIR design and filtering
# ---------------------------------------------------------------------------

def design_lowpass(cutoff_hz: float, fs: float, transition_hz: float) -> np.ndarray:
    """Symmetric windowed-sinc (Hamming) low-pass with unity DC gain.

    The tap count is chosen so the Hamming transition band is about
    `transition_hz` wide; it is forced odd so the filter is zero-phase
    when applied with a centered convolution.
    """
    if not (0.0 < cutoff_hz < fs / 2.0):
        raise ValueError(f"cutoff {cutoff_hz} Hz outside (0, fs/2)")
    numtaps = int(np.ceil(_HAMMING_TRANSITION * fs / transition_hz))
    if numtaps % 2 == 0:
        numtaps += 1
    n = np.arange(numtaps) - (numtaps - 1) / 2.0
    h = (2.0 * cutoff_hz / fs) * np.sinc(2.0 * cutoff_hz / fs * n)
    h *= np.hamming(numtaps)
    return h / h.sum()


def design_bandpass(f_low: float, f_high: float, fs: float) -> np.ndarray:
    """Windowed-sinc band-pass as a difference of two unity-gain low-passes.

    f_low == 0 degenerates to a pure low-pass. Transition width follows
    max(1 Hz, 0.25 * f_low).
    """
    if not (0.0 <= f_low < f_high < fs / 2.0):
        raise ValueError(
            f"invalid band edges ({f_low}, {f_high}) Hz at fs={fs} Hz: "
            "need 0 <= f_low < f_high < fs/2"
        )
    transition = max(1.0, 0.25 * f_low)
    if f_low == 0.0:
        return design_lowpass(f_high, fs, transition)
    hi = design_lowpass(f_high, fs, transition)
    lo = design_lowpass(f_low, fs, transition)
    return hi - lo


def _filter_zero_phase(x: np.ndarray, taps: np.ndarray) -> np.ndarray:
    """Apply a symmetric FIR along the last axis, edge-padded to keep length."""
    half = (len(taps) - 1) // 2
    squeeze = x.ndim == 1
    x2 = np.atleast_2d(np.asarray(x, dtype=np.float64))
    pad = np.pad(x2, ((0, 0), (half, half)), mode="edge")
    out = sps.fftconvolve(pad, taps[None, :], mode="valid", axes=1)
    return out[0] if squeeze else out


def bandpass(x: np.ndarray, f_low: float, f_high: float, fs: float) -> np.ndarray:
    """Zero-phase FIR band-pass; output has the same length as the input.

    Args:
        x: (n_samples,) or (n_channels, n_samples) signal.
        f_low: low cutoff in Hz; 0 means pure low-pass.
        f_high: high cutoff in Hz, below Nyquist.
        fs: sampling rate in Hz.
    """
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("bandpass input contains non-finite values")
    taps = design_bandpass(f_low, f_high, fs)
    return _filter_zero_phase(x, taps)


def resample(x: np.ndarray, fs_in: float, fs_out: float) -> np.ndarray:
    """Polyphase windowed-sinc resampling along the last axis.

    The anti-alias low-pass cuts off at 0.45 * min(fs_in, fs_out) so all
    content below the new Nyquist survives. Output length is
    round(T * fs_out / fs_in).
    """
    if fs_in <= 0 or fs_out <= 0:
        raise ValueError("sampling rates must be positive")
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("resample input contains non-finite values")
    squeeze = x.ndim == 1
    x2 = np.atleast_2d(x)
    t_in = x2.shape[1]
    t_out = int(np.floor(t_in * fs_out / fs_in + 0.5))
    if fs_in == fs_out:
        out = x2.copy()
    else:
        ratio = Fraction(fs_out / fs_in).limit_denominator(1000)
        up, down = ratio.numerator, ratio.denominator
        fs_min = min(fs_in, fs_out)
        taps = design_lowpass(0.45 * fs_min, fs_in * up, 0.1 * fs_min)
        out = sps.resample_poly(x2, up, down, axis=1, window=taps, padtype="edge")
    if out.shape[1] > t_out:
        out = out[:, :t_out]
    elif out.shape[1] < t_out:
        out = np.pad(out, ((0, 0), (0, t_out - out.shape[1])), mode="edge")
    return out[0] if squeeze else out


# ---------------------------------------------------------------------------
# Epoching, artifact rejection, normalization
# ---------------------------------------------------------------------------

def epoch_split(
    x: np.ndarray, fs: float, layout: ChannelLayout, duration_s: float = EPOCH_SECONDS
) -> list[MultichannelEpoch]:
    """Cut a continuous (M, T) signal into non-overlapping fixed-length epochs.

    The trailing remainder shorter than `duration_s` is discarded. A signal
    shorter than one epoch yields an empty list (with a warning).
    """
    x = np.asarray(x, dtype=np.float64)
    n = int(round(duration_s * fs))
    count = x.shape[1] // n
    if count == 0:
        warnings.warn(
            f"signal of {x.shape[1]} samples is shorter than one "
            f"{duration_s:g}-second epoch; returning no epochs",
            stacklevel=2,
        )
        return []
    return [
        MultichannelEpoch(layout=layout, fs=fs, data=x[:, i * n : (i + 1) * n].copy())
        for i in range(count)
    ]


def epoch_power(epoch: MultichannelEpoch, channel: str) -> float:
    """Total power of one channel: mean of squared samples."""
    row = epoch.data[epoch.layout.index(channel)]
    return float(np.mean(row * row))


def reject_bad_epochs(
    recording: Recording,
    ref_channel: str = BAD_EPOCH_CHANNEL,
    k: float = BAD_EPOCH_SDS,
) -> np.ndarray:
    """Mark epochs whose reference-channel power exceeds mean + k * sd.

    The test is one-sided: artifacts raise power, so only the upper tail is
    rejected. Returns the boolean validity mask (True = keep).
    """
    if len(recording.epochs) < 2:
        raise ValueError("bad-epoch rejection needs at least 2 epochs")
    powers = np.array([epoch_power(ep, ref_channel) for ep in recording.epochs])
    threshold = powers.mean() + k * powers.std()
    return powers <= threshold


def clip(x: np.ndarray, limit: float = CLIP_LIMIT) -> np.ndarray:
    """Clamp every sample to [-limit, +limit]."""
    return np.clip(np.asarray(x, dtype=np.float64), -limit, limit)


def normalize_per_channel(recording: Recording) -> Recording:
    """Z-score each channel using statistics from the valid epochs only.

    The per-channel mean/sd are computed over the concatenation of valid
    epochs and then applied to every epoch. A channel with sd below 1e-12
    is divided by 1 instead.
    """
    valid = recording.valid_epochs()
    if not valid:
        raise ValueError("normalization needs at least one valid epoch")
    pooled = np.concatenate([ep.data for ep in valid], axis=1)
    mean = pooled.mean(axis=1, keepdims=True)
    sd = pooled.std(axis=1, keepdims=True)
    sd = np.where(sd < 1e-12, 1.0, sd)
    epochs = [
        MultichannelEpoch(ep.layout, ep.fs, (ep.data - mean) / sd)
        for ep in recording.epochs
    ]
    return replace(recording, epochs=epochs)


def reorder_channels(
    x: np.ndarray, layout: ChannelLayout, target: ChannelLayout
) -> np.ndarray:
    """Reindex rows of (M, T) data from `layout` order into `target` order."""
    try:
        idx = [layout.index(name) for name in target.names]
    except KeyError as exc:
        raise ValueError(f"raw layout cannot be mapped onto target order: {exc}") from exc
    return np.asarray(x, dtype=np.float64)[idx]


def preprocess(
    raw: RawRecording,
    target_layout: ChannelLayout | None = None,
    target_fs: float = TARGET_FS,
    f_low: float = BAND_LOW_HZ,
    f_high: float = BAND_HIGH_HZ,
    epoch_s: float = EPOCH_SECONDS,
    clip_limit: float = CLIP_LIMIT,
) -> Recording:
    """Run the full pipeline on one raw recording.

    Stages run in the fixed order: reorder, resample, bandpass, epoch,
    reject bad epochs, clip, normalize. A stage failure raises
    PipelineError naming the stage.
    """
    target_layout = target_layout or ChannelLayout()

    def run_stage(stage, fn):
        try:
            return fn()
        except PipelineError:
            raise
        except Exception as exc:
            raise PipelineError(stage, str(exc)) from exc

    data = run_stage("reorder", lambda: reorder_channels(raw.data, raw.layout, target_layout))
    data = run_stage("resample", lambda: resample(data, raw.fs, target_fs))
    data = run_stage("bandpass", lambda: bandpass(data, f_low, f_high, target_fs))
    epochs = run_stage(
        "epoch_split", lambda: epoch_split(data, target_fs, target_layout, epoch_s)
    )
    if not epochs:
        raise PipelineError("epoch_split", f"recording {raw.id!r} too short to epoch")
    rec = Recording(
        id=raw.id, epochs=epochs, grade=raw.grade, age=raw.age, domain=raw.domain
    )
    if len(epochs) >= 2:
        rec.valid_mask = run_stage("reject_bad_epochs", lambda: reject_bad_epochs(rec))
    clipped = run_stage(
        "clip",
        lambda: [MultichannelEpoch(ep.layout, ep.fs, clip(ep.data, clip_limit)) for ep in rec.epochs],
    )
    rec = replace(rec, epochs=clipped)
    return run_stage("normalize", lambda: normalize_per_channel(rec))
