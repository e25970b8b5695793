"""Epoch encoders: spectral band powers (PSDE) and the reduced neural encoder.

The PSDE maps an epoch to per-channel power in 7 canonical frequency
bands (log-compressed), giving M x 7 features (133 for the 19-channel
layout). The neural encoder is the reduced convolutional network from
`nnet`, evaluated deterministically (no dropout) for embedding work.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import signal as sps

from .nnet import EncoderArch, NetworkParams, Tensor, encoder_forward, wrap_params
from .signal_core import MultichannelEpoch

ORIGIN_UNSHIFTED = "Z"
ORIGIN_SHIFTED = "Zt"

WELCH_SEGMENT_SECONDS = 2.0


@dataclass(frozen=True)
class BandDefinition:
    name: str
    f_low: float
    f_high: float

    def __post_init__(self):
        if not (0.0 <= self.f_low < self.f_high):
            raise ValueError(f"invalid band {self.name}: [{self.f_low}, {self.f_high})")


BANDS: tuple[BandDefinition, ...] = (
    BandDefinition("delta", 2.0, 4.0),
    BandDefinition("theta", 4.0, 8.0),
    BandDefinition("alpha_low", 8.0, 10.0),
    BandDefinition("alpha_high", 10.0, 13.0),
    BandDefinition("beta_low", 13.0, 16.0),
    BandDefinition("beta_high", 16.0, 25.0),
    BandDefinition("gamma", 25.0, 40.0),
)

ALPHA_BANDS = ("alpha_low", "alpha_high")


@dataclass
class Embedding:
    vector: np.ndarray
    origin: str
    recording_id: str
    epoch_index: int
    encoder_id: str

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float64)
        if self.vector.ndim != 1 or not np.all(np.isfinite(self.vector)):
            raise ValueError("embedding vector must be 1-D and finite")
        if self.origin not in (ORIGIN_UNSHIFTED, ORIGIN_SHIFTED):
            raise ValueError(f"origin must be {ORIGIN_UNSHIFTED!r} or {ORIGIN_SHIFTED!r}")


@dataclass
class EmbeddingSet:
    embeddings: list[Embedding]

    def __post_init__(self):
        if self.embeddings:
            d = self.embeddings[0].vector.size
            enc = self.embeddings[0].encoder_id
            for e in self.embeddings:
                if e.vector.size != d:
                    raise ValueError("embeddings in a set must share dimension")
                if e.encoder_id != enc:
                    raise ValueError("embeddings in a set must share encoder_id")

    def __len__(self) -> int:
        return len(self.embeddings)

    @property
    def dim(self) -> int:
        return self.embeddings[0].vector.size

    def matrix(self) -> np.ndarray:
        return np.stack([e.vector for e in self.embeddings])


# ---------------------------------------------------------------------------
# Spectral estimation
# ---------------------------------------------------------------------------

def periodogram_psd(x: np.ndarray, fs: float) -> tuple[np.ndarray, np.ndarray]:
    """Plain one-sided periodogram density (boxcar window, no detrending).

    Satisfies Parseval: sum(psd) * df == mean(x**2) up to rounding.
    """
    return sps.periodogram(x, fs=fs, window="boxcar", detrend=False)


def welch_psd(x: np.ndarray, fs: float) -> tuple[np.ndarray, np.ndarray]:
    """Welch density with 2 s Hann segments at 50% overlap."""
    nperseg = min(int(round(WELCH_SEGMENT_SECONDS * fs)), len(x))
    return sps.welch(
        x, fs=fs, window="hann", nperseg=nperseg, noverlap=nperseg // 2,
        detrend=False, scaling="density",
    )


def band_power(x: np.ndarray, fs: float, band: BandDefinition) -> float:
    """Signal power inside [f_low, f_high), integrated from the Welch density."""
    if not (0.0 <= band.f_low < band.f_high <= fs / 2.0):
        raise ValueError(f"band {band.name} outside (0, fs/2) at fs={fs}")
    freqs, psd = welch_psd(np.asarray(x, dtype=np.float64), fs)
    mask = (freqs >= band.f_low) & (freqs < band.f_high)
    if not mask.any():
        raise ValueError(f"band {band.name} is empty at this frequency resolution")
    df = freqs[1] - freqs[0]
    return float(psd[mask].sum() * df)


def psd_encode(
    epoch: MultichannelEpoch,
    bands: tuple[BandDefinition, ...] = BANDS,
    origin: str = ORIGIN_UNSHIFTED,
    recording_id: str = "",
    epoch_index: int = 0,
    encoder_id: str = "psde",
) -> Embedding:
    """Per-channel log(1 + band power) features, concatenated channel-major."""
    feats = np.empty(epoch.data.shape[0] * len(bands))
    for ch in range(epoch.data.shape[0]):
        for bi, band in enumerate(bands):
            feats[ch * len(bands) + bi] = band_power(epoch.data[ch], epoch.fs, band)
    if not np.all(np.isfinite(feats)):
        raise ValueError("non-finite band power encountered")
    return Embedding(
        vector=np.log1p(feats), origin=origin, recording_id=recording_id,
        epoch_index=epoch_index, encoder_id=encoder_id,
    )


def neural_encode(
    params: NetworkParams,
    arch: EncoderArch,
    epoch: MultichannelEpoch,
    origin: str = ORIGIN_UNSHIFTED,
    recording_id: str = "",
    epoch_index: int = 0,
    encoder_id: str = "neural",
) -> Embedding:
    """Deterministic forward pass of the reduced encoder (dropout off)."""
    vec = neural_encode_batch(params, arch, epoch.data[None, :, :])[0]
    return Embedding(
        vector=vec, origin=origin, recording_id=recording_id,
        epoch_index=epoch_index, encoder_id=encoder_id,
    )


def neural_encode_batch(
    params: NetworkParams, arch: EncoderArch, x: np.ndarray, dtype=np.float64
) -> np.ndarray:
    """Embed a (B, M, N) stack; returns (B, embed_dim) float64."""
    x = np.asarray(x, dtype=dtype)
    if x.ndim != 3 or x.shape[1] != arch.n_channels or x.shape[2] != arch.n_samples:
        raise ValueError(
            f"expected (B, {arch.n_channels}, {arch.n_samples}) batch, got {x.shape}"
        )
    wrapped = wrap_params(params, trainable=set(), dtype=dtype)
    return encoder_forward(wrapped, arch, Tensor(x)).data.astype(np.float64)


# ---------------------------------------------------------------------------
# Embedding persistence
# ---------------------------------------------------------------------------

def save_embeddings(path: str | Path, emb_set: EmbeddingSet) -> None:
    if not emb_set.embeddings:
        raise ValueError("cannot save an empty embedding set")
    d = emb_set.dim
    header = ["encoder_id", "recording_id", "epoch_index", "origin"] + [f"v{i}" for i in range(d)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for e in emb_set.embeddings:
            writer.writerow(
                [e.encoder_id, e.recording_id, e.epoch_index, e.origin]
                + [f"{v:.17g}" for v in e.vector]
            )


def load_embeddings(path: str | Path) -> EmbeddingSet:
    embeddings = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        d = len(header) - 4
        for row in reader:
            embeddings.append(
                Embedding(
                    vector=np.array([float(v) for v in row[4 : 4 + d]]),
                    origin=row[3],
                    recording_id=row[1],
                    epoch_index=int(row[2]),
                    encoder_id=row[0],
                )
            )
    return EmbeddingSet(embeddings)
