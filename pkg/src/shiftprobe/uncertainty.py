"""Monte Carlo dropout inference and its summary statistics.

T stochastic forward passes per input, each with fresh Bernoulli masks on
the dropout layers, give a predictive sample. From it we take the MC mean
and (population) variance, and for classifiers the agreement index: the
fraction of passes voting above a threshold tau. Mask streams are keyed
by (seed, input id, repeat), so parallel evaluation order cannot change
any prediction.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import rng
from .training import DropoutMask, Model

DEFAULT_REPEATS = 20
DEFAULT_DROPOUT = 0.5
DEFAULT_TAU = 0.5


@dataclass
class AgreementConfig:
    tau: float = DEFAULT_TAU

    def __post_init__(self):
        if not (0.0 < self.tau < 1.0):
            raise ValueError(f"tau must lie in (0, 1), got {self.tau}")


@dataclass
class McdPredictionSet:
    """T stochastic predictions for one input (epoch- or recording-level)."""

    input_id: str
    task: str
    predictions: np.ndarray
    dropout_c: float = DEFAULT_DROPOUT
    seed: int = 0

    def __post_init__(self):
        self.predictions = np.asarray(self.predictions, dtype=np.float64)
        if self.predictions.ndim != 1 or self.predictions.size < 2:
            raise ValueError("a prediction set needs T >= 2 repeats")
        if not np.all(np.isfinite(self.predictions)):
            raise ValueError("predictions must be finite")
        if self.task == "grade" and (
            self.predictions.min() < 0.0 or self.predictions.max() > 1.0
        ):
            raise ValueError("grade predictions must be probabilities in [0, 1]")

    @property
    def repeats(self) -> int:
        return self.predictions.size


def _mcd_mask(model: Model, seed: int, input_key: tuple, repeat: int, c: float) -> DropoutMask:
    layers = {}
    for name, units in model.dropout_units().items():
        gen = rng.stream(seed, "mcd", name, *input_key, repeat)
        layers[name] = (gen.random((1, units)) >= c).astype(np.float64)
    return DropoutMask(layers=layers, p=c)


def mcd_predict(
    model: Model,
    x: np.ndarray,
    input_id: str,
    repeats: int = DEFAULT_REPEATS,
    c: float = DEFAULT_DROPOUT,
    seed: int = 0,
) -> McdPredictionSet:
    """Run T masked forward passes for one input.

    `x` is one epoch (M, N) for end-to-end models or one feature vector
    (d,) when the encoder output is precomputed. c == 0 degenerates to T
    identical deterministic passes.
    """
    if repeats < 2:
        raise ValueError("need at least 2 repeats")
    x = np.asarray(x, dtype=np.float64)[None, ...]
    preds = np.empty(repeats)
    for t in range(repeats):
        mask = None if c == 0.0 else _mcd_mask(model, seed, (input_id,), t, c)
        preds[t] = model.predict(x, mask, c)[0]
    return McdPredictionSet(
        input_id=input_id, task=model.head_arch.task, predictions=preds,
        dropout_c=c, seed=seed,
    )


def mcd_predict_batch(
    model: Model,
    inputs: np.ndarray,
    input_ids: list[str],
    repeats: int = DEFAULT_REPEATS,
    c: float = DEFAULT_DROPOUT,
    seed: int = 0,
) -> np.ndarray:
    """Vectorized MCD over a batch: returns predictions of shape (n, T).

    Row i equals mcd_predict on input i: masks are keyed per input id, so
    batching is purely an execution detail.
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    n = len(inputs)
    preds = np.empty((n, repeats))
    layer_units = model.dropout_units()
    for t in range(repeats):
        if c == 0.0:
            mask = None
        else:
            layers = {}
            for name, units in layer_units.items():
                rows = [
                    rng.stream(seed, "mcd", name, input_ids[i], t).random(units)
                    for i in range(n)
                ]
                layers[name] = (np.stack(rows) >= c).astype(np.float64)
            mask = DropoutMask(layers=layers, p=c)
        preds[:, t] = model.predict(inputs, mask, c)
    return preds


def mc_mean(pred_set: McdPredictionSet) -> float:
    """Monte Carlo estimate of the mean prediction."""
    return float(pred_set.predictions.mean())


def mc_var(pred_set: McdPredictionSet) -> float:
    """Monte Carlo estimate of the prediction variance (population form)."""
    p = pred_set.predictions
    return float(np.mean((p - p.mean()) ** 2))


@dataclass
class AgreementResult:
    phi_raw: float  # fraction of repeats voting >= tau
    agreement: float  # symmetrized: max(phi_raw, 1 - phi_raw)


def agreement_index(
    pred_set: McdPredictionSet, config: AgreementConfig | None = None
) -> AgreementResult:
    """Fraction of MC repeats predicting at or above the threshold.

    Only defined for classification. Returns both the raw vote fraction
    and its symmetrized form (confidence regardless of the winning side).
    """
    if pred_set.task != "grade":
        raise ValueError("agreement index is defined for classification only")
    tau = (config or AgreementConfig()).tau
    phi_raw = float(np.mean(pred_set.predictions >= tau))
    return AgreementResult(phi_raw=phi_raw, agreement=max(phi_raw, 1.0 - phi_raw))


def aggregate_recording(epoch_sets: list[McdPredictionSet], input_id: str | None = None) -> McdPredictionSet:
    """Average epoch-level predictions within each MC repeat.

    Repeat t of the result is the mean over epochs of each epoch's repeat
    t, so recording-level statistics stay well-defined across the T
    repeats. All sets must share T and task.
    """
    if not epoch_sets:
        raise ValueError("need at least one epoch-level prediction set")
    t0, task = epoch_sets[0].repeats, epoch_sets[0].task
    for s in epoch_sets:
        if s.repeats != t0:
            raise ValueError("mixed repeat counts across epoch sets")
        if s.task != task:
            raise ValueError("mixed tasks across epoch sets")
    stacked = np.stack([s.predictions for s in epoch_sets])
    return McdPredictionSet(
        input_id=input_id or epoch_sets[0].input_id,
        task=task,
        predictions=stacked.mean(axis=0),
        dropout_c=epoch_sets[0].dropout_c,
        seed=epoch_sets[0].seed,
    )


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def save_predictions(path: str | Path, sets: list[McdPredictionSet]) -> None:
    """Dump per-repeat predictions: recording_id, task, repeat, prediction."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["recording_id", "task", "repeat", "prediction"])
        for s in sets:
            for t, value in enumerate(s.predictions):
                writer.writerow([s.input_id, s.task, t, f"{value:.9g}"])


def save_summary(path: str | Path, sets: list[McdPredictionSet], tau: float = DEFAULT_TAU) -> None:
    """Summary CSV: recording_id, mean, var, sd, phi_raw, agreement."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["recording_id", "mean", "var", "sd", "phi_raw", "agreement"])
        for s in sets:
            mean, var = mc_mean(s), mc_var(s)
            if s.task == "grade":
                agr = agreement_index(s, AgreementConfig(tau))
                phi_raw, agreement = f"{agr.phi_raw:.9g}", f"{agr.agreement:.9g}"
            else:
                phi_raw = agreement = ""
            writer.writerow(
                [s.input_id, f"{mean:.9g}", f"{var:.9g}", f"{np.sqrt(var):.9g}", phi_raw, agreement]
            )
