"""Task metrics, per-condition evaluation, and the tabular report.

AUC is the rank statistic (ties get half credit); MAE is the plain mean
absolute error. A condition row is produced per (shift, encoder, task)
by aggregating epoch-level MC-dropout predictions to recording level
within each repeat, scoring each repeat, and averaging across repeats.
Reports round-trip losslessly through JSON lines; a pivot CSV arranges
rows by shift and columns by metric for side-by-side reading.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import stats

from .shifts import ShiftSpec, parse_shift
from .uncertainty import (
    AgreementConfig,
    McdPredictionSet,
    agreement_index,
    mc_var,
)


def auc(scores, labels) -> float:
    """Rank-based AUC: P(score_pos > score_neg) with ties counted half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be equal-length vectors")
    n_pos = int(np.sum(labels == 1))
    n_neg = int(np.sum(labels == 0))
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes present")
    ranks = stats.rankdata(scores, method="average")
    pos_rank_sum = float(ranks[labels == 1].sum())
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def mae(preds, targets) -> float:
    """Mean absolute error."""
    preds = np.asarray(preds, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if preds.shape != targets.shape:
        raise ValueError("predictions and targets must have equal length")
    if preds.size == 0:
        raise ValueError("cannot average zero errors")
    return float(np.mean(np.abs(preds - targets)))


def _round6(value: float | None) -> float | None:
    """Round to 6 significant digits (the report serialization precision)."""
    if value is None:
        return None
    return float(f"{value:.6g}")


@dataclass
class EvaluationRow:
    """One report line: a shift condition scored for one encoder and task."""

    shift: ShiftSpec
    encoder_id: str
    task: str
    n_recordings: int
    domain: str = "A"
    auc: float | None = None
    auc_sd: float | None = None
    mae: float | None = None
    mae_sd: float | None = None
    phi_median: float | None = None
    phi_mean: float | None = None
    sd: float | None = None

    def __post_init__(self):
        if self.task == "grade":
            if self.auc is None or self.mae is not None:
                raise ValueError("grade rows carry auc, not mae")
        elif self.task == "age":
            if self.mae is None or self.auc is not None:
                raise ValueError("age rows carry mae, not auc")
        else:
            raise ValueError(f"unknown task {self.task!r}")
        for name in ("auc", "auc_sd", "mae", "mae_sd", "phi_median", "phi_mean", "sd"):
            value = getattr(self, name)
            if value is not None and not np.isfinite(value):
                raise ValueError(f"{name} must be finite")
            setattr(self, name, _round6(value))

    def to_json(self) -> str:
        payload = {
            "shift": self.shift.token(),
            "encoder_id": self.encoder_id,
            "task": self.task,
            "domain": self.domain,
            "n_recordings": self.n_recordings,
            "auc": self.auc,
            "auc_sd": self.auc_sd,
            "mae": self.mae,
            "mae_sd": self.mae_sd,
            "phi_median": self.phi_median,
            "phi_mean": self.phi_mean,
            "sd": self.sd,
        }
        return json.dumps(payload)

    @classmethod
    def from_json(cls, line: str) -> "EvaluationRow":
        raw = json.loads(line)
        return cls(
            shift=parse_shift(raw["shift"]),
            encoder_id=raw["encoder_id"],
            task=raw["task"],
            domain=raw.get("domain", "A"),
            n_recordings=raw["n_recordings"],
            auc=raw.get("auc"),
            auc_sd=raw.get("auc_sd"),
            mae=raw.get("mae"),
            mae_sd=raw.get("mae_sd"),
            phi_median=raw.get("phi_median"),
            phi_mean=raw.get("phi_mean"),
            sd=raw.get("sd"),
        )


def evaluate_condition(
    shift: ShiftSpec,
    encoder_id: str,
    task: str,
    recording_sets: list[McdPredictionSet],
    labels: dict[str, float],
    tau: float = 0.5,
    domain: str = "A",
) -> EvaluationRow:
    """Score recording-level MCD prediction sets against labels.

    For grade: per-repeat AUC over recordings, then mean/sd across the T
    repeats; phi statistics summarize the per-recording agreement index.
    For age: per-repeat MAE, plus the mean per-recording prediction sd.
    """
    if not recording_sets:
        raise ValueError("no recordings to evaluate")
    ids = [s.input_id for s in recording_sets]
    missing = [rid for rid in ids if rid not in labels]
    if missing:
        raise ValueError(f"labels missing for recordings {missing[:3]}")
    preds = np.stack([s.predictions for s in recording_sets])  # (n_rec, T)
    y = np.array([labels[rid] for rid in ids], dtype=np.float64)
    repeats = preds.shape[1]

    if task == "grade":
        per_repeat = np.array([auc(preds[:, t], y) for t in range(repeats)])
        agreements = np.array(
            [agreement_index(s, AgreementConfig(tau)).agreement for s in recording_sets]
        )
        return EvaluationRow(
            shift=shift, encoder_id=encoder_id, task=task, domain=domain,
            n_recordings=len(ids),
            auc=float(per_repeat.mean()), auc_sd=float(per_repeat.std()),
            phi_median=float(np.median(agreements)), phi_mean=float(agreements.mean()),
        )
    per_repeat = np.array([mae(preds[:, t], y) for t in range(repeats)])
    rec_sds = np.array([np.sqrt(mc_var(s)) for s in recording_sets])
    return EvaluationRow(
        shift=shift, encoder_id=encoder_id, task=task, domain=domain,
        n_recordings=len(ids),
        mae=float(per_repeat.mean()), mae_sd=float(per_repeat.std()),
        sd=float(rec_sds.mean()),
    )


def row_sort_key(row: EvaluationRow) -> tuple:
    return (row.task, row.encoder_id, row.domain, row.shift.sort_key())


def emit_report(rows: list[EvaluationRow], out_dir: str | Path) -> tuple[Path, Path]:
    """Write report.jsonl (one row per line) and the pivot CSV."""
    if not rows:
        raise ValueError("cannot emit an empty report")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ordered = sorted(rows, key=row_sort_key)
    report_path = out_dir / "report.jsonl"
    with open(report_path, "w") as fh:
        for row in ordered:
            fh.write(row.to_json() + "\n")
    pivot_path = out_dir / "report_pivot.csv"
    _write_pivot(ordered, pivot_path)
    return report_path, pivot_path


def parse_report(path: str | Path) -> list[EvaluationRow]:
    with open(path) as fh:
        return [EvaluationRow.from_json(line) for line in fh if line.strip()]


def _shift_label(row: EvaluationRow) -> str:
    token = row.shift.token()
    if row.domain != "A":
        return f"{token}[{row.domain}]"
    return token


def _write_pivot(rows: list[EvaluationRow], path: Path) -> None:
    """Shift rows x (metric, encoder) columns, one block per recorded metric."""
    encoders = sorted({r.encoder_id for r in rows})
    metrics = []
    if any(r.task == "grade" for r in rows):
        metrics += [("auc", "grade"), ("phi_median", "grade")]
    if any(r.task == "age" for r in rows):
        metrics += [("mae", "age"), ("sd", "age")]
    shift_labels: list[str] = []
    for row in rows:
        label = _shift_label(row)
        if label not in shift_labels:
            shift_labels.append(label)
    cells: dict[tuple[str, str, str], float | None] = {}
    for row in rows:
        label = _shift_label(row)
        for metric, task in metrics:
            if row.task == task:
                cells[(label, metric, row.encoder_id)] = getattr(row, metric)
    header = ["shift"] + [f"{metric}:{enc}" for metric, _ in metrics for enc in encoders]
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for label in shift_labels:
            fields = [label]
            for metric, _ in metrics:
                for enc in encoders:
                    value = cells.get((label, metric, enc))
                    fields.append("" if value is None else f"{value:.6g}")
            fh.write(",".join(fields) + "\n")
