"""Experiment configuration: a line-based `key = value` format with
`[section]` headers.

Sections: [data] (synthetic spec or file manifest), [encoder], [train],
[mcd], [shifts], [integrity], [output]. Unknown keys are rejected so
typos fail loudly. `serialize_config(parse_config(text))` is the
normalized form of `text`.

The shift grid is either `default` (the identity plus the standard
12-cell grid) or whitespace-separated shift tokens, e.g.

    grid = none BP(0.5,30) QP(8) BN(sigma=0.1,seed=7)

Tokens must not contain spaces.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .shifts import ShiftSpec, default_grid, parse_shift
from .training import TrainConfig


@dataclass
class DataConfig:
    source: str = "synthetic"  # "synthetic" or "files"
    manifest: str = ""  # manifest CSV when source == "files"
    n_recordings: int = 60
    epochs_per_recording: int = 6
    fs: float = 256.0
    class_balance: float = 0.5
    grade_effect: float = 1.0
    amplitude_scale: float = 1.0
    seed: int = 7
    domain_b: bool = False
    domain_b_recordings: int = 12

    def __post_init__(self):
        if self.source not in ("synthetic", "files"):
            raise ValueError(f"data source must be 'synthetic' or 'files', got {self.source!r}")


@dataclass
class EncoderConfig:
    kind: str = "neural_full"  # psde | neural_frozen | neural_full

    def __post_init__(self):
        if self.kind not in ("psde", "neural_frozen", "neural_full"):
            raise ValueError(f"unknown encoder kind {self.kind!r}")


@dataclass
class McdConfig:
    repeats: int = 20
    dropout: float = 0.5
    tau: float = 0.5
    seed: int = 11


@dataclass
class ShiftsConfig:
    grid: str = "default"
    noise_seed: int = 7

    def specs(self) -> list[ShiftSpec]:
        if self.grid.strip() == "default":
            return default_grid(self.noise_seed)
        return [parse_shift(tok) for tok in self.grid.split()]


@dataclass
class IntegrityConfig:
    method: str = "gabriel"  # gabriel | exact2d
    subsample: int = 500
    mode: str = "pooled"  # pooled | per_recording
    seed: int = 5


@dataclass
class OutputConfig:
    dir: str = "out"
    jobs: int = 1


# [train] keys surfaced in config files; the remaining TrainConfig fields
# (betas, milestones, cyclic shape) are fixed defaults.
_TRAIN_KEYS = (
    "optimizer", "task", "max_epochs", "batch_size", "lr", "weight_decay",
    "dropout_p", "patience", "min_delta", "seed",
)


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    mcd: McdConfig = field(default_factory=McdConfig)
    shifts: ShiftsConfig = field(default_factory=ShiftsConfig)
    integrity: IntegrityConfig = field(default_factory=IntegrityConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def __post_init__(self):
        regime = "full" if self.encoder.kind == "neural_full" else "frozen_encoder"
        if self.train.regime != regime:
            self.train = replace(self.train, regime=regime)

    @property
    def tasks(self) -> list[str]:
        if self.train.task == "both":
            return ["grade", "age"]
        return [self.train.task]

    def shift_grid(self) -> list[ShiftSpec]:
        return self.shifts.specs()

    def with_master_seed(self, seed: int) -> "ExperimentConfig":
        """Derive all per-component seeds from one master seed."""
        return ExperimentConfig(
            data=replace(self.data, seed=seed),
            encoder=self.encoder,
            train=replace(self.train, seed=seed + 1),
            mcd=replace(self.mcd, seed=seed + 2),
            shifts=replace(self.shifts, noise_seed=seed + 3),
            integrity=replace(self.integrity, seed=seed + 4),
            output=self.output,
        )


_SECTIONS = {
    "data": (DataConfig, None),
    "encoder": (EncoderConfig, None),
    "train": (TrainConfig, _TRAIN_KEYS),
    "mcd": (McdConfig, None),
    "shifts": (ShiftsConfig, None),
    "integrity": (IntegrityConfig, None),
    "output": (OutputConfig, None),
}


def _convert(raw: str, default):
    if isinstance(default, bool):
        low = raw.strip().lower()
        if low in ("true", "yes", "1"):
            return True
        if low in ("false", "no", "0"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw.strip()


def parse_config(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    parser.read_string(text)
    kwargs = {}
    # Special-case [train] task: "both" is a config-level alias expanded later.
    for section, (cls, allowed) in _SECTIONS.items():
        if not parser.has_section(section):
            kwargs[section] = cls()
            continue
        defaults = cls()
        values = {}
        for key, raw in parser.items(section):
            if allowed is not None and key not in allowed:
                raise ValueError(f"[{section}] does not accept key {key!r}")
            if not any(f.name == key for f in fields(cls)):
                raise ValueError(f"[{section}] does not accept key {key!r}")
            values[key] = _convert(raw, getattr(defaults, key))
        kwargs[section] = cls(**values)
    cfg = ExperimentConfig(**kwargs)
    _validate_files(cfg)
    return cfg


def _validate_files(cfg: ExperimentConfig) -> None:
    if cfg.data.source == "files":
        manifest = Path(cfg.data.manifest)
        if not manifest.exists():
            raise FileNotFoundError(f"manifest {manifest} does not exist")
        from .epoch_io import load_manifest

        for row in load_manifest(manifest):
            path = Path(row["path"])
            if not path.is_absolute():
                path = manifest.parent / path
            if not path.exists():
                raise FileNotFoundError(f"referenced epoch file {path} does not exist")
    cfg.shift_grid()  # validates shift tokens


def load_config(path: str | Path) -> ExperimentConfig:
    return parse_config(Path(path).read_text())


def serialize_config(cfg: ExperimentConfig) -> str:
    """Canonical text form; parse(serialize(cfg)) reproduces cfg."""
    out = io.StringIO()
    for section, (cls, allowed) in _SECTIONS.items():
        obj = getattr(cfg, section if section != "shifts" else "shifts")
        out.write(f"[{section}]\n")
        names = allowed if allowed is not None else [f.name for f in fields(cls)]
        for name in names:
            value = getattr(obj, name)
            if isinstance(value, bool):
                value = "true" if value else "false"
            elif isinstance(value, float):
                value = f"{value:g}"
            out.write(f"{name} = {value}\n")
        out.write("\n")
    return out.getvalue()


def save_config(path: str | Path, cfg: ExperimentConfig) -> None:
    Path(path).write_text(serialize_config(cfg))
