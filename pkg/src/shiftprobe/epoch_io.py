"""File formats for epochs and datasets.

SPB1 is a small binary container for a stack of equally-shaped epochs:

    magic "SPB1" | u32 M | u32 N | f32 fs | u32 epoch_count |
    epoch_count * M * N little-endian f32, row-major (channel-major)

Channel names travel in a sidecar text file (same path + ".channels",
one name per line). Single epochs can also be exchanged as CSV with one
row per channel. Datasets are described by a manifest CSV with columns
recording_id, path, grade, age, domain.
"""

from __future__ import annotations

import csv
import struct
from pathlib import Path

import numpy as np

from .signal_core import ChannelLayout, MultichannelEpoch, RawRecording, Recording

_MAGIC = b"SPB1"
_HEADER = struct.Struct("<IIfI")


def sidecar_path(path: str | Path) -> Path:
    return Path(str(path) + ".channels")


def save_spb(
    path: str | Path,
    epochs: np.ndarray,
    fs: float,
    channel_names: tuple[str, ...] | list[str],
) -> None:
    """Write an (E, M, N) float array as SPB1 plus its channel-name sidecar."""
    epochs = np.asarray(epochs, dtype=np.float64)
    if epochs.ndim != 3:
        raise ValueError("epochs must be a 3-D (epochs, channels, samples) array")
    e, m, n = epochs.shape
    if m != len(channel_names):
        raise ValueError(f"{m} data channels but {len(channel_names)} names")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(_HEADER.pack(m, n, float(fs), e))
        fh.write(np.ascontiguousarray(epochs, dtype="<f4").tobytes())
    sidecar_path(path).write_text("\n".join(channel_names) + "\n")


def load_spb(path: str | Path) -> tuple[np.ndarray, float, tuple[str, ...]]:
    """Read an SPB1 file; returns (epochs (E, M, N) float64, fs, channel names)."""
    path = Path(path)
    blob = path.read_bytes()
    if blob[:4] != _MAGIC:
        raise ValueError(f"{path}: not an SPB1 file (bad magic {blob[:4]!r})")
    m, n, fs, e = _HEADER.unpack_from(blob, 4)
    offset = 4 + _HEADER.size
    expected = e * m * n * 4
    payload = blob[offset : offset + expected]
    if len(payload) != expected:
        raise ValueError(f"{path}: truncated payload ({len(payload)} of {expected} bytes)")
    data = np.frombuffer(payload, dtype="<f4").reshape(e, m, n).astype(np.float64)
    sidecar = sidecar_path(path)
    if not sidecar.exists():
        raise FileNotFoundError(f"missing channel sidecar {sidecar}")
    names = tuple(line for line in sidecar.read_text().splitlines() if line.strip())
    if len(names) != m:
        raise ValueError(f"{sidecar}: {len(names)} names for {m} channels")
    return data, float(fs), names


def save_epoch_csv(path: str | Path, epoch: MultichannelEpoch) -> None:
    """Write one epoch as CSV, rows = channels."""
    np.savetxt(path, epoch.data, delimiter=",", fmt="%.9g")


def load_epoch_csv(path: str | Path, fs: float, layout: ChannelLayout) -> MultichannelEpoch:
    data = np.atleast_2d(np.loadtxt(path, delimiter=",", dtype=np.float64))
    return MultichannelEpoch(layout=layout, fs=fs, data=data)


# ---------------------------------------------------------------------------
# Recording-level helpers
# ---------------------------------------------------------------------------

def save_raw_recording(path: str | Path, raw: RawRecording) -> None:
    """Store a continuous recording as a single-epoch SPB1 file."""
    save_spb(path, raw.data[None, :, :], raw.fs, raw.layout.names)


def load_raw_recording(
    path: str | Path,
    recording_id: str,
    grade: str | None = None,
    age: float | None = None,
    domain: str = "A",
) -> RawRecording:
    data, fs, names = load_spb(path)
    if data.shape[0] != 1:
        raise ValueError(f"{path}: raw recording file must hold exactly one segment")
    return RawRecording(
        id=recording_id, layout=ChannelLayout(names), fs=fs, data=data[0],
        grade=grade, age=age, domain=domain,
    )


def save_recording(path: str | Path, rec: Recording) -> None:
    """Store the valid epochs of a preprocessed recording."""
    epochs = rec.valid_epochs()
    if not epochs:
        raise ValueError(f"recording {rec.id!r} has no valid epochs to save")
    stack = np.stack([ep.data for ep in epochs])
    save_spb(path, stack, rec.fs, rec.layout.names)


def load_recording(
    path: str | Path,
    recording_id: str,
    grade: str | None = None,
    age: float | None = None,
    domain: str = "A",
) -> Recording:
    data, fs, names = load_spb(path)
    layout = ChannelLayout(names)
    epochs = [MultichannelEpoch(layout, fs, ep) for ep in data]
    return Recording(
        id=recording_id, epochs=epochs, grade=grade, age=age, domain=domain,
        valid_mask=np.ones(len(epochs), dtype=bool),
    )


_MANIFEST_FIELDS = ("recording_id", "path", "grade", "age", "domain")


def save_manifest(path: str | Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=_MANIFEST_FIELDS)
        writer.writeheader()
        for row in rows:
            out = dict(row)
            out["grade"] = "" if out.get("grade") is None else out["grade"]
            out["age"] = "" if out.get("age") is None else f"{out['age']:.6g}"
            out.setdefault("domain", "A")
            writer.writerow({k: out.get(k, "") for k in _MANIFEST_FIELDS})


def load_manifest(path: str | Path) -> list[dict]:
    rows = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            rows.append(
                {
                    "recording_id": row["recording_id"],
                    "path": row["path"],
                    "grade": row["grade"] or None,
                    "age": float(row["age"]) if row["age"] else None,
                    "domain": row.get("domain") or "A",
                }
            )
    return rows
