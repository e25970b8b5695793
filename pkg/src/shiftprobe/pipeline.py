"""Experiment stages wired together through their on-disk formats.

Every stage reads its inputs from files and writes its outputs to files,
so running the stages individually (via the CLI subcommands) produces
exactly what the monolithic `run` produces. A run directory holds:

    data/raw/<rid>.spb(+.channels)   raw recordings
    data/manifest.csv, data/splits.csv
    data/preprocessed/<rid>.spb      valid epochs, normalized
    model/<task>.spp1, model/<task>_history.csv
    conditions/<shift-slug>/         per-condition rows, dumps, graphs
    report.jsonl, report_pivot.csv
    run_state.json, .lock

Completed stages are fingerprinted by the config; reruns with the same
config and seeds skip finished stages (re-entrancy). Work inside a stage
is parallelized over independent conditions with a deterministic merge,
so results do not depend on the worker count.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import epoch_io, rng
from .config import ExperimentConfig, serialize_config
from .encoders import (
    BANDS,
    ORIGIN_UNSHIFTED,
    Embedding,
    EmbeddingSet,
    neural_encode_batch,
    psd_encode,
    save_embeddings,
)
from .latent_topology import (
    IntegrityResult,
    cross_domain_integrity,
    integrity_score,
    save_graph,
    save_integrity_records,
)
from .metrics_report import EvaluationRow, emit_report, evaluate_condition, parse_report
from .shifts import ShiftKind, ShiftSpec, apply as apply_shift
from .signal_core import ChannelLayout, RawRecording, preprocess
from .synth import SyntheticSpec, synth_generate
from .training import Model, TrainData, build_model, load_params, save_history, save_params, train
from .uncertainty import (
    AgreementConfig,
    McdPredictionSet,
    aggregate_recording,
    mcd_predict_batch,
    save_predictions,
    save_summary,
)

PSDE_DIM = len(ChannelLayout().names) * len(BANDS)
SPLIT_FRACTIONS = (0.6, 0.2, 0.2)  # train / val / test, by recording


class StageError(RuntimeError):
    """A pipeline stage failed; the message names the stage."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"stage {stage}: {message}")
        self.stage = stage


def shift_slug(spec: ShiftSpec) -> str:
    return re.sub(r"[^A-Za-z0-9.]+", "_", spec.token()).strip("_")


def config_fingerprint(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(serialize_config(cfg).encode()).hexdigest()


class RunState:
    def __init__(self, out_dir: Path, fingerprint: str):
        self.path = out_dir / "run_state.json"
        self.fingerprint = fingerprint
        self.completed: set[str] = set()
        if self.path.exists():
            stored = json.loads(self.path.read_text())
            if stored.get("config_sha") == fingerprint:
                self.completed = set(stored.get("completed", []))

    def done(self, stage: str) -> bool:
        return stage in self.completed

    def mark(self, stage: str) -> None:
        self.completed.add(stage)
        payload = {"config_sha": self.fingerprint, "completed": sorted(self.completed)}
        tmp = self.path.with_suffix(".json.partial")
        tmp.write_text(json.dumps(payload, indent=2))
        tmp.replace(self.path)


class OutputLock:
    """Single-writer guard on a run directory."""

    def __init__(self, out_dir: Path):
        self.path = out_dir / ".lock"

    def __enter__(self):
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RuntimeError(
                f"output directory is locked by another process ({self.path}); "
                "remove the lock file if that process is gone"
            ) from None
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return self

    def __exit__(self, *exc):
        try:
            self.path.unlink()
        except FileNotFoundError:
            pass


# ---------------------------------------------------------------------------
# Stage: data
# ---------------------------------------------------------------------------

def _synthetic_spec(cfg: ExperimentConfig, domain: str) -> SyntheticSpec:
    data = cfg.data
    n = data.n_recordings if domain == "A" else data.domain_b_recordings
    return SyntheticSpec(
        n_recordings=n,
        epochs_per_recording=data.epochs_per_recording,
        fs=data.fs,
        class_balance=data.class_balance,
        grade_effect=data.grade_effect,
        amplitude_scale=data.amplitude_scale,
        seed=data.seed,
        domain=domain,
    )


def assign_splits(rows: list[dict], seed: int) -> dict[str, str]:
    """Stratified-by-grade 60/20/20 split, by recording id."""
    by_grade: dict[str, list[str]] = {}
    for row in rows:
        by_grade.setdefault(row["grade"] or "", []).append(row["recording_id"])
    splits: dict[str, str] = {}
    for grade in sorted(by_grade):
        ids = sorted(by_grade[grade])
        order = rng.stream(seed, "split", grade).permutation(len(ids))
        shuffled = [ids[i] for i in order]
        n = len(shuffled)
        n_train = int(round(SPLIT_FRACTIONS[0] * n))
        n_val = int(round(SPLIT_FRACTIONS[1] * n))
        for i, rid in enumerate(shuffled):
            if i < n_train:
                splits[rid] = "train"
            elif i < n_train + n_val:
                splits[rid] = "val"
            else:
                splits[rid] = "test"
    return splits


def stage_data(cfg: ExperimentConfig, out_dir: Path) -> None:
    """Generate (or register) raw recordings; write manifest and splits."""
    raw_dir = out_dir / "data" / "raw"
    raw_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    if cfg.data.source == "synthetic":
        recordings = synth_generate(_synthetic_spec(cfg, "A"))
        if cfg.data.domain_b:
            recordings += synth_generate(_synthetic_spec(cfg, "B"))
        for rec in recordings:
            path = raw_dir / f"{rec.id}.spb"
            epoch_io.save_raw_recording(path, rec)
            rows.append(
                {
                    "recording_id": rec.id, "path": str(path),
                    "grade": rec.grade, "age": rec.age, "domain": rec.domain,
                }
            )
    else:
        manifest_path = Path(cfg.data.manifest)
        for row in epoch_io.load_manifest(manifest_path):
            path = Path(row["path"])
            if not path.is_absolute():
                path = manifest_path.parent / path
            rows.append({**row, "path": str(path)})
    epoch_io.save_manifest(out_dir / "data" / "manifest.csv", rows)
    domain_a = [r for r in rows if r["domain"] == "A"]
    splits = assign_splits(domain_a, cfg.data.seed)
    with open(out_dir / "data" / "splits.csv", "w") as fh:
        fh.write("recording_id,split\n")
        for row in rows:
            split = splits.get(row["recording_id"], "domain_b")
            fh.write(f"{row['recording_id']},{split}\n")


def load_split_recordings(out_dir: Path) -> dict[str, list[RawRecording]]:
    """Read raw recordings grouped by split (train/val/test/domain_b)."""
    rows = epoch_io.load_manifest(out_dir / "data" / "manifest.csv")
    splits: dict[str, str] = {}
    with open(out_dir / "data" / "splits.csv") as fh:
        next(fh)
        for line in fh:
            rid, split = line.strip().split(",")
            splits[rid] = split
    grouped: dict[str, list[RawRecording]] = {}
    for row in rows:
        raw = epoch_io.load_raw_recording(
            row["path"], row["recording_id"], row["grade"], row["age"], row["domain"]
        )
        grouped.setdefault(splits[row["recording_id"]], []).append(raw)
    return grouped


# ---------------------------------------------------------------------------
# Stage: preprocess
# ---------------------------------------------------------------------------

def stage_preprocess(cfg: ExperimentConfig, out_dir: Path) -> None:
    """Preprocess train/val recordings to normalized valid epochs on disk.

    Test recordings are preprocessed inside each condition (after the
    shift), so only the training-side epochs are materialized here.
    """
    pre_dir = out_dir / "data" / "preprocessed"
    pre_dir.mkdir(parents=True, exist_ok=True)
    grouped = load_split_recordings(out_dir)
    for split in ("train", "val"):
        for raw in grouped.get(split, []):
            rec = preprocess(raw)
            epoch_io.save_recording(pre_dir / f"{raw.id}.spb", rec)


def _labels(recordings: list[RawRecording], task: str) -> dict[str, float]:
    out = {}
    for rec in recordings:
        if task == "grade" and rec.grade is not None:
            out[rec.id] = 1.0 if rec.grade == "abnormal" else 0.0
        elif task == "age" and rec.age is not None:
            out[rec.id] = float(rec.age)
    return out


def _epoch_features(model_kind: str, epochs: np.ndarray, fs: float) -> np.ndarray:
    """Per-epoch model inputs: spectral features for psde, raw epochs otherwise."""
    if model_kind != "psde":
        return epochs
    layout = ChannelLayout()
    feats = []
    for ep in epochs:
        from .signal_core import MultichannelEpoch

        emb = psd_encode(MultichannelEpoch(layout, fs, ep))
        feats.append(emb.vector)
    return np.stack(feats)


def _split_train_data(
    cfg: ExperimentConfig, out_dir: Path, split: str, task: str,
    recordings: list[RawRecording],
) -> TrainData:
    pre_dir = out_dir / "data" / "preprocessed"
    labels = _labels(recordings, task)
    inputs, targets, rec_ids = [], [], []
    for raw in recordings:
        if raw.id not in labels:
            continue
        data, fs, _names = epoch_io.load_spb(pre_dir / f"{raw.id}.spb")
        feats = _epoch_features(cfg.encoder.kind, data, fs)
        for row in feats:
            inputs.append(row)
            targets.append(labels[raw.id])
            rec_ids.append(raw.id)
    if not inputs:
        raise StageError("train", f"no labeled epochs in split {split!r}")
    return TrainData(np.stack(inputs), np.array(targets), rec_ids)


# ---------------------------------------------------------------------------
# Stage: train
# ---------------------------------------------------------------------------

def _model_paths(out_dir: Path, task: str) -> tuple[Path, Path]:
    model_dir = out_dir / "model"
    return model_dir / f"{task}.spp1", model_dir / f"{task}_history.csv"


def _encoder_id(cfg: ExperimentConfig, task: str) -> str:
    kind = cfg.encoder.kind
    if kind == "psde" or len(cfg.tasks) == 1:
        return kind
    return f"{kind}-{task}"


def _fresh_model(cfg: ExperimentConfig, task: str) -> Model:
    return build_model(
        kind=cfg.encoder.kind,
        task=task,
        seed=cfg.train.seed,
        feature_dim=PSDE_DIM,
        dropout_p=cfg.train.dropout_p,
    )


def stage_train(cfg: ExperimentConfig, out_dir: Path) -> None:
    (out_dir / "model").mkdir(parents=True, exist_ok=True)
    grouped = load_split_recordings(out_dir)
    for task in cfg.tasks:
        train_data = _split_train_data(cfg, out_dir, "train", task, grouped["train"])
        val_data = _split_train_data(cfg, out_dir, "val", task, grouped["val"])
        model = _fresh_model(cfg, task)
        train_cfg = replace(cfg.train, task=task)
        trained, history = train(train_cfg, model, train_data, val_data)
        ckpt, hist = _model_paths(out_dir, task)
        save_params(ckpt, trained.params)
        save_history(hist, history)


def load_model(cfg: ExperimentConfig, out_dir: Path, task: str) -> Model:
    ckpt, _ = _model_paths(out_dir, task)
    if not ckpt.exists():
        raise StageError("evaluate", f"missing checkpoint {ckpt}; run the train stage first")
    params = load_params(ckpt)
    model = _fresh_model(cfg, task)
    model.params = params
    model.encoder_id = _encoder_id(cfg, task)
    return model


# ---------------------------------------------------------------------------
# Stage: conditions (evaluate + integrity per shift)
# ---------------------------------------------------------------------------

def _shifted_recording(spec: ShiftSpec, raw: RawRecording) -> RawRecording:
    data = apply_shift(spec, raw.data, fs=raw.fs, recording_id=raw.id)
    return RawRecording(
        id=raw.id, layout=raw.layout, fs=raw.fs, data=data,
        grade=raw.grade, age=raw.age, domain=raw.domain,
    )


def _recording_prediction_sets(
    cfg: ExperimentConfig, model: Model, recordings: list[RawRecording], spec: ShiftSpec
) -> list[McdPredictionSet]:
    """Shift, preprocess, MCD-predict each epoch, aggregate per recording.

    Epochs from all recordings are pooled into one MCD batch per repeat;
    mask streams are keyed per epoch id, so the pooling is invisible in
    the results.
    """
    all_inputs, all_ids, owners = [], [], []
    for raw in recordings:
        rec = preprocess(_shifted_recording(spec, raw))
        epochs = np.stack([ep.data for ep in rec.valid_epochs()])
        valid_idx = [i for i, ok in enumerate(rec.valid_mask) if ok]
        inputs = _epoch_features(cfg.encoder.kind, epochs, rec.fs)
        if model.kind == "neural_frozen":
            inputs = model.embed(inputs)
        for j, i in enumerate(valid_idx):
            all_inputs.append(inputs[j])
            all_ids.append(f"{raw.id}#{i}")
            owners.append(raw.id)
    preds = mcd_predict_batch(
        model, np.stack(all_inputs), all_ids, repeats=cfg.mcd.repeats,
        c=cfg.mcd.dropout, seed=cfg.mcd.seed,
    )
    sets = []
    for raw in recordings:
        rows = [i for i, owner in enumerate(owners) if owner == raw.id]
        epoch_sets = [
            McdPredictionSet(all_ids[i], model.head_arch.task, preds[i],
                             cfg.mcd.dropout, cfg.mcd.seed)
            for i in rows
        ]
        sets.append(aggregate_recording(epoch_sets, input_id=raw.id))
    return sets


def _integrity_encoder(cfg: ExperimentConfig, model: Model):
    """Epoch-encoder closure for integrity scoring with this model's encoder."""
    if cfg.encoder.kind == "psde":
        def encode(epoch, origin, rid, idx):
            return psd_encode(epoch, origin=origin, recording_id=rid,
                              epoch_index=idx, encoder_id="psde")
        return encode

    def encode(epoch, origin, rid, idx):
        vec = neural_encode_batch(
            model.params, model.encoder_arch, epoch.data[None], dtype=model.dtype
        )[0]
        return Embedding(vec, origin, rid, idx, model.encoder_id)

    return encode


def run_condition(
    cfg: ExperimentConfig,
    out_dir: Path,
    spec: ShiftSpec,
    models: dict[str, Model],
    test_recordings: list[RawRecording],
) -> None:
    """Evaluate one shift condition and write its artifacts."""
    cond_dir = out_dir / "conditions" / shift_slug(spec)
    cond_dir.mkdir(parents=True, exist_ok=True)
    integrity_results: list[IntegrityResult] = []
    integrity_done: set[str] = set()
    for task in cfg.tasks:
        model = models[task]
        rec_sets = _recording_prediction_sets(cfg, model, test_recordings, spec)
        labels = _labels(test_recordings, task)
        row = evaluate_condition(
            spec, model.encoder_id, task, rec_sets, labels,
            tau=cfg.mcd.tau, domain="A",
        )
        (cond_dir / f"row_{task}.json").write_text(row.to_json() + "\n")
        save_predictions(cond_dir / f"predictions_{task}.csv", rec_sets)
        save_summary(cond_dir / f"summary_{task}.csv", rec_sets, tau=cfg.mcd.tau)

        enc_id = model.encoder_id
        if enc_id not in integrity_done:
            integrity_done.add(enc_id)
            result = integrity_score(
                _integrity_encoder(cfg, model), test_recordings, spec,
                method=cfg.integrity.method, subsample=cfg.integrity.subsample,
                seed=cfg.integrity.seed, mode=cfg.integrity.mode, encoder_id=enc_id,
            )
            integrity_results.append(result)
            if result.graph is not None:
                save_graph(
                    result.graph,
                    cond_dir / f"graph_edges_{enc_id}.csv",
                    cond_dir / f"graph_vertices_{enc_id}.csv",
                )
    save_integrity_records(cond_dir / "integrity.jsonl", integrity_results)


def _domain_b_condition(
    cfg: ExperimentConfig,
    out_dir: Path,
    models: dict[str, Model],
    test_recordings: list[RawRecording],
    domain_b: list[RawRecording],
) -> None:
    """Out-of-sample row: unshifted domain-B data scored by the same models."""
    cond_dir = out_dir / "conditions" / "domain_B"
    cond_dir.mkdir(parents=True, exist_ok=True)
    no_shift = ShiftSpec(ShiftKind.NO_SHIFT)
    integrity_results = []
    integrity_done: set[str] = set()
    for task in cfg.tasks:
        model = models[task]
        rec_sets = _recording_prediction_sets(cfg, model, domain_b, no_shift)
        labels = _labels(domain_b, task)
        row = evaluate_condition(
            no_shift, model.encoder_id, task, rec_sets, labels,
            tau=cfg.mcd.tau, domain="B",
        )
        (cond_dir / f"row_{task}.json").write_text(row.to_json() + "\n")
        save_predictions(cond_dir / f"predictions_{task}.csv", rec_sets)
        save_summary(cond_dir / f"summary_{task}.csv", rec_sets, tau=cfg.mcd.tau)
        enc_id = model.encoder_id
        if enc_id not in integrity_done:
            integrity_done.add(enc_id)
            encode = _integrity_encoder(cfg, model)
            emb_a = _embed_clean(encode, test_recordings)
            emb_b = _embed_clean(encode, domain_b)
            integrity_results.append(
                cross_domain_integrity(
                    emb_a, emb_b, method=cfg.integrity.method,
                    subsample=cfg.integrity.subsample, seed=cfg.integrity.seed,
                )
            )
    save_integrity_records(cond_dir / "integrity.jsonl", integrity_results)


def _embed_clean(encode, recordings: list[RawRecording]) -> EmbeddingSet:
    embeddings = []
    for raw in recordings:
        rec = preprocess(raw)
        for idx, (ep, ok) in enumerate(zip(rec.epochs, rec.valid_mask)):
            if ok:
                embeddings.append(encode(ep, ORIGIN_UNSHIFTED, raw.id, idx))
    return EmbeddingSet(embeddings)


def stage_conditions(cfg: ExperimentConfig, out_dir: Path, jobs: int = 1) -> None:
    grouped = load_split_recordings(out_dir)
    test_recordings = grouped.get("test", [])
    if not test_recordings:
        raise StageError("evaluate", "no test recordings")
    models = {task: load_model(cfg, out_dir, task) for task in cfg.tasks}
    grid = cfg.shift_grid()
    if jobs <= 1:
        for spec in grid:
            run_condition(cfg, out_dir, spec, models, test_recordings)
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            futures = [
                pool.submit(run_condition, cfg, out_dir, spec, models, test_recordings)
                for spec in grid
            ]
            for fut in futures:
                fut.result()
    if cfg.data.domain_b:
        domain_b = grouped.get("domain_b", [])
        if domain_b:
            _domain_b_condition(cfg, out_dir, models, test_recordings, domain_b)


# ---------------------------------------------------------------------------
# Stage: encode (embeddings of clean preprocessed epochs, for inspection)
# ---------------------------------------------------------------------------

def stage_encode(cfg: ExperimentConfig, out_dir: Path, split: str = "test") -> Path:
    """Write embeddings of the (unshifted) epochs of one split to CSV."""
    grouped = load_split_recordings(out_dir)
    recordings = grouped.get(split)
    if not recordings:
        raise StageError("encode", f"no recordings in split {split!r}")
    task = cfg.tasks[0]
    model = load_model(cfg, out_dir, task)
    encode = _integrity_encoder(cfg, model)
    emb_set = _embed_clean(encode, recordings)
    path = out_dir / f"embeddings_{split}_{model.encoder_id}.csv"
    save_embeddings(path, emb_set)
    return path


# ---------------------------------------------------------------------------
# Stage: report
# ---------------------------------------------------------------------------

def stage_report(cfg: ExperimentConfig, out_dir: Path) -> list[EvaluationRow]:
    rows: list[EvaluationRow] = []
    for spec in cfg.shift_grid():
        cond_dir = out_dir / "conditions" / shift_slug(spec)
        for task in cfg.tasks:
            path = cond_dir / f"row_{task}.json"
            if not path.exists():
                raise StageError("report", f"missing condition row {path}")
            rows.append(EvaluationRow.from_json(path.read_text()))
    if cfg.data.domain_b:
        for task in cfg.tasks:
            path = out_dir / "conditions" / "domain_B" / f"row_{task}.json"
            if path.exists():
                rows.append(EvaluationRow.from_json(path.read_text()))
    emit_report(rows, out_dir)
    return rows


# ---------------------------------------------------------------------------
# Orchestration
# ---------------------------------------------------------------------------

_STAGES = ("data", "preprocess", "train", "conditions", "report")


def run(cfg: ExperimentConfig, out_dir: str | Path | None = None, jobs: int | None = None) -> Path:
    """Execute the full loop; skips stages already completed for this config."""
    out_dir = Path(out_dir if out_dir is not None else cfg.output.dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    jobs = jobs if jobs is not None else cfg.output.jobs
    with OutputLock(out_dir):
        state = RunState(out_dir, config_fingerprint(cfg))
        for stage in _STAGES:
            if state.done(stage):
                continue
            try:
                if stage == "data":
                    stage_data(cfg, out_dir)
                elif stage == "preprocess":
                    stage_preprocess(cfg, out_dir)
                elif stage == "train":
                    stage_train(cfg, out_dir)
                elif stage == "conditions":
                    stage_conditions(cfg, out_dir, jobs)
                else:
                    stage_report(cfg, out_dir)
            except StageError:
                raise
            except Exception as exc:
                raise StageError(stage, str(exc)) from exc
            state.mark(stage)
    return out_dir
