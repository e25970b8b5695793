"""Acquisition-style data shifts for raw multichannel signals.

Four deterministic, seedable transforms emulate instrumentation
variability: hardware band-pass settings (BP), decimal quantization of
the digitizer (QP), low-frequency impedance noise (IN), and additive
broadband Gaussian noise (BN). Shifts are applied to raw signals before
preprocessing.

Shift specs have a compact text form used in configs and on the CLI:

    BP(0.5,30)  QP(8)  IN(sigma=0.01,seed=7)  BN(sigma=0.1,seed=7)  none

Noise draws come from counter-based streams keyed by
(seed, kind, recording_id, epoch_index, channel), so outputs do not
depend on scheduling or iteration order.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.signal import fftconvolve

from . import rng
from .signal_core import bandpass, design_bandpass

IMPEDANCE_CUTOFF_HZ = 1.0

BP_GRID: tuple[tuple[float, float], ...] = ((0.5, 30.0), (1.0, 30.0), (1.0, 25.0))
QP_GRID: tuple[int, ...] = (12, 8, 6)
SIGMA_GRID: tuple[float, ...] = (0.001, 0.01, 0.1)


class ShiftKind(Enum):
    NO_SHIFT = "none"
    BAND_PASS = "BP"
    QUANTIZATION = "QP"
    IMPEDANCE_NOISE = "IN"
    BROADBAND_NOISE = "BN"


_NOISE_KINDS = (ShiftKind.IMPEDANCE_NOISE, ShiftKind.BROADBAND_NOISE)


@dataclass(frozen=True)
class ShiftSpec:
    """One transform plus its parameters and (for noise kinds) RNG seed."""

    kind: ShiftKind
    band: tuple[float, float] | None = None
    digits: int | None = None
    sigma: float | None = None
    seed: int | None = None

    def __post_init__(self):
        k = self.kind
        if k is ShiftKind.BAND_PASS:
            if self.band is None or self.digits is not None or self.sigma is not None:
                raise ValueError("BP takes exactly a (f_low, f_high) band")
            f_lo, f_hi = self.band
            if not (0.0 <= f_lo < f_hi):
                raise ValueError(f"invalid BP band {self.band}")
            object.__setattr__(self, "band", (float(f_lo), float(f_hi)))
        elif k is ShiftKind.QUANTIZATION:
            if self.digits not in (6, 8, 12):
                raise ValueError(f"QP digits must be one of 6, 8, 12; got {self.digits}")
            if self.band is not None or self.sigma is not None:
                raise ValueError("QP takes only a digit count")
        elif k in _NOISE_KINDS:
            if self.sigma is None or self.sigma <= 0:
                raise ValueError(f"{k.value} needs sigma > 0")
            if self.seed is None:
                raise ValueError(f"{k.value} needs an RNG seed")
            if self.band is not None or self.digits is not None:
                raise ValueError(f"{k.value} takes only sigma and seed")
        elif k is ShiftKind.NO_SHIFT:
            if any(v is not None for v in (self.band, self.digits, self.sigma, self.seed)):
                raise ValueError("the identity shift takes no parameters")

    def token(self) -> str:
        """Canonical text form."""
        if self.kind is ShiftKind.NO_SHIFT:
            return "none"
        if self.kind is ShiftKind.BAND_PASS:
            return f"BP({self.band[0]:g},{self.band[1]:g})"
        if self.kind is ShiftKind.QUANTIZATION:
            return f"QP({self.digits})"
        return f"{self.kind.value}(sigma={self.sigma:g},seed={self.seed})"

    def sort_key(self) -> tuple:
        """Report row order: none, BP, QP (coarser digits last), IN, BN by strength."""
        order = {
            ShiftKind.NO_SHIFT: 0,
            ShiftKind.BAND_PASS: 1,
            ShiftKind.QUANTIZATION: 2,
            ShiftKind.IMPEDANCE_NOISE: 3,
            ShiftKind.BROADBAND_NOISE: 4,
        }[self.kind]
        if self.kind is ShiftKind.BAND_PASS:
            return (order, self.band[0], -self.band[1])
        if self.kind is ShiftKind.QUANTIZATION:
            return (order, -self.digits)
        if self.kind in _NOISE_KINDS:
            return (order, self.sigma)
        return (order,)


_TOKEN_RE = re.compile(r"^\s*(BP|QP|IN|BN)\s*\(\s*([^)]*)\s*\)\s*$", re.IGNORECASE)


def parse_shift(text: str) -> ShiftSpec:
    """Parse the shift grammar; raises ValueError on malformed input."""
    stripped = text.strip()
    if stripped.lower() in ("none", "noshift", "no-shift"):
        return ShiftSpec(ShiftKind.NO_SHIFT)
    match = _TOKEN_RE.match(stripped)
    if not match:
        raise ValueError(f"cannot parse shift spec {text!r}")
    head = match.group(1).upper()
    args = [a.strip() for a in match.group(2).split(",") if a.strip()]
    if head == "BP":
        if len(args) != 2:
            raise ValueError(f"BP needs two band edges, got {text!r}")
        return ShiftSpec(ShiftKind.BAND_PASS, band=(float(args[0]), float(args[1])))
    if head == "QP":
        if len(args) != 1:
            raise ValueError(f"QP needs one digit count, got {text!r}")
        return ShiftSpec(ShiftKind.QUANTIZATION, digits=int(args[0]))
    kv = {}
    for arg in args:
        if "=" not in arg:
            raise ValueError(f"{head} arguments must be sigma=..., seed=...; got {text!r}")
        key, value = (part.strip() for part in arg.split("=", 1))
        kv[key.lower()] = value
    if set(kv) != {"sigma", "seed"}:
        raise ValueError(f"{head} needs sigma= and seed=, got {text!r}")
    kind = ShiftKind.IMPEDANCE_NOISE if head == "IN" else ShiftKind.BROADBAND_NOISE
    return ShiftSpec(kind, sigma=float(kv["sigma"]), seed=int(kv["seed"]))


def default_grid(noise_seed: int) -> list[ShiftSpec]:
    """The identity plus the standard 12-cell shift grid."""
    grid = [ShiftSpec(ShiftKind.NO_SHIFT)]
    grid += [ShiftSpec(ShiftKind.BAND_PASS, band=b) for b in BP_GRID]
    grid += [ShiftSpec(ShiftKind.QUANTIZATION, digits=d) for d in QP_GRID]
    for kind in _NOISE_KINDS:
        grid += [ShiftSpec(kind, sigma=s, seed=noise_seed) for s in SIGMA_GRID]
    return grid


# ---------------------------------------------------------------------------
# Transforms
# ---------------------------------------------------------------------------

def apply_bandpass_shift(x: np.ndarray, f_low: float, f_high: float, fs: float) -> np.ndarray:
    """Emulate a hardware band-pass filter setting."""
    return bandpass(x, f_low, f_high, fs)


# Relative nudge so values an ulp below an integer multiple of 10^-D snap up;
# keeps truncation exactly idempotent without breaking the |err| < 10^-D bound.
_TRUNC_GUARD = 1.0 + 4.0 * np.finfo(np.float64).eps


def apply_quantization(x: np.ndarray, digits: int) -> np.ndarray:
    """Truncate every value toward zero at `digits` decimal places."""
    if digits not in (6, 8, 12):
        raise ValueError(f"digits must be one of 6, 8, 12; got {digits}")
    x = np.asarray(x, dtype=np.float64)
    scale = 10.0 ** digits
    return np.sign(x) * np.trunc(np.abs(x) * scale * _TRUNC_GUARD) / scale


def _noise_matrix(
    shape: tuple[int, int], seed: int, kind: str, recording_id: str, epoch_index: int
) -> np.ndarray:
    """Standard-normal draws with one independent stream per channel."""
    m, t = shape
    out = np.empty((m, t))
    for ch in range(m):
        gen = rng.stream(seed, kind, recording_id, epoch_index, ch)
        out[ch] = gen.standard_normal(t)
    return out


def _lowpassed_noise(
    shape: tuple[int, int], taps: np.ndarray, seed: int, recording_id: str, epoch_index: int
) -> np.ndarray:
    """Filtered white noise with no edge transients.

    Draws len(taps) - 1 extra samples per channel so a valid-mode
    convolution yields exactly `shape[1]` fully filtered samples.
    """
    m, t = shape
    white = _noise_matrix((m, t + len(taps) - 1), seed, "IN", recording_id, epoch_index)
    return fftconvolve(white, taps[None, :], mode="valid", axes=1)


def _as_2d(x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return x[None, :], True
    return x, False


def apply_impedance_noise(
    x: np.ndarray,
    sigma: float,
    seed: int,
    fs: float,
    recording_id: str = "",
    epoch_index: int = 0,
) -> np.ndarray:
    """Add narrow-band low-frequency noise (electrode-impedance style).

    Per-channel white Gaussian noise is low-passed at 1 Hz and scaled by
    sigma before addition, so the disturbance lives below ~1 Hz.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    x2, squeeze = _as_2d(x)
    taps = design_bandpass(0.0, IMPEDANCE_CUTOFF_HZ, fs)
    eps = sigma * _lowpassed_noise(x2.shape, taps, seed, recording_id, epoch_index)
    out = x2 + eps
    return out[0] if squeeze else out


def apply_broadband_noise(
    x: np.ndarray,
    sigma: float,
    seed: int,
    recording_id: str = "",
    epoch_index: int = 0,
) -> np.ndarray:
    """Add i.i.d. Gaussian noise with standard deviation sigma per sample."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    x2, squeeze = _as_2d(x)
    white = _noise_matrix(x2.shape, seed, "BN", recording_id, epoch_index)
    out = x2 + sigma * white
    return out[0] if squeeze else out


def apply(
    spec: ShiftSpec,
    x: np.ndarray,
    fs: float | None = None,
    recording_id: str = "",
    epoch_index: int = 0,
) -> np.ndarray:
    """Dispatch a shift spec onto a signal. The identity shift copies exactly."""
    if spec.kind is ShiftKind.NO_SHIFT:
        return np.asarray(x, dtype=np.float64).copy()
    if spec.kind is ShiftKind.BAND_PASS:
        if fs is None:
            raise ValueError("band-pass shift needs the sampling rate")
        return apply_bandpass_shift(x, spec.band[0], spec.band[1], fs)
    if spec.kind is ShiftKind.QUANTIZATION:
        return apply_quantization(x, spec.digits)
    if spec.kind is ShiftKind.IMPEDANCE_NOISE:
        if fs is None:
            raise ValueError("impedance noise needs the sampling rate")
        return apply_impedance_noise(x, spec.sigma, spec.seed, fs, recording_id, epoch_index)
    return apply_broadband_noise(x, spec.sigma, spec.seed, recording_id, epoch_index)
