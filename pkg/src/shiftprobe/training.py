"""Losses, optimizers, schedules, and the two training regimes.

Defaults follow the standard recipe: Adam (lr 1e-3, betas 0.9/0.999,
weight decay 1e-5) with a multi-step halving schedule, or SGD with a
triangular cyclic learning rate whose peak halves every cycle. Heads use
dropout p=0.5; weights start Xavier-uniform (gain 1), biases at 0.01.

Regime "full" trains encoder and head jointly; "frozen_encoder" caches
the encoder output once and fits only the head.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nnet, rng
from .nnet import (
    EncoderArch,
    HeadArch,
    NetworkParams,
    Tensor,
    bce,
    encoder_forward,
    head_forward,
    mean_all,
    sigmoid,
    smooth_l1,
    wrap_params,
)

ADAM_MILESTONES = (30, 80, 150, 200, 250, 300, 350, 400, 450)


@dataclass
class TrainConfig:
    optimizer: str = "adam"  # "adam" or "sgd_cyclic"
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 1e-5
    milestones: tuple[int, ...] = ADAM_MILESTONES
    lr_decay: float = 0.5
    sgd_base_lr: float = 1e-5
    sgd_max_lr: float = 1e-2
    momentum: float = 0.9
    sgd_step_size_up: int = 2000
    sgd_gamma: float = 0.5
    dropout_p: float = 0.5
    max_epochs: int = 500
    batch_size: int = 64
    task: str = "grade"  # "grade" or "age"
    regime: str = "full"  # "full" or "frozen_encoder"
    smooth_l1_beta: float = 1.0
    patience: int = 20
    min_delta: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.optimizer not in ("adam", "sgd_cyclic"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        # "both" is a pipeline-level alias that fans out into one concrete
        # task per trained model; train() itself requires grade or age.
        if self.task not in ("grade", "age", "both"):
            raise ValueError(f"unknown task {self.task!r}")
        if self.regime not in ("full", "frozen_encoder"):
            raise ValueError(f"unknown regime {self.regime!r}")


@dataclass
class DropoutMask:
    """Per-layer Bernoulli keep indicators, reproducible from their stream key."""

    layers: dict[str, np.ndarray]
    p: float

    def get(self, name: str) -> np.ndarray | None:
        return self.layers.get(name)


def make_dropout_mask(
    layer_units: dict[str, int], batch: int, p: float, seed: int, *key
) -> DropoutMask:
    """Draw keep masks of shape (batch, units) for each named dropout layer."""
    layers = {}
    for name, units in layer_units.items():
        gen = rng.stream(seed, "dropout", name, *key)
        layers[name] = (gen.random((batch, units)) >= p).astype(np.float64)
    return DropoutMask(layers=layers, p=p)


# ---------------------------------------------------------------------------
# Losses (plain-array forms)
# ---------------------------------------------------------------------------

def loss_bce(p, y) -> float:
    """Binary cross-entropy of probabilities vs {0,1} labels (mean over elements)."""
    p = np.clip(np.asarray(p, dtype=np.float64), nnet.PROB_EPS, 1.0 - nnet.PROB_EPS)
    y = np.asarray(y, dtype=np.float64)
    return float(np.mean(-(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))))


def loss_smooth_l1(pred, target, beta: float = 1.0) -> float:
    """Smooth-L1: quadratic for |error| < beta, linear beyond (mean over elements)."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    e = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    out = np.where(np.abs(e) < beta, 0.5 * e * e / beta, np.abs(e) - 0.5 * beta)
    return float(np.mean(out))


# ---------------------------------------------------------------------------
# Schedules and optimizers
# ---------------------------------------------------------------------------

def multistep_lr(epoch: int, base_lr: float, milestones=ADAM_MILESTONES, decay: float = 0.5) -> float:
    """Base LR multiplied by `decay` once per milestone reached."""
    hits = sum(1 for m in milestones if epoch >= m)
    return base_lr * decay**hits


def cyclic_lr(
    step: int,
    base_lr: float = 1e-5,
    max_lr: float = 1e-2,
    step_size_up: int = 2000,
    gamma: float = 0.5,
) -> float:
    """Triangular cyclic LR whose peak amplitude scales by gamma each cycle."""
    cycle = int(np.floor(1 + step / (2.0 * step_size_up)))
    x = abs(step / step_size_up - 2.0 * cycle + 1.0)
    amplitude = (max_lr - base_lr) * gamma ** (cycle - 1)
    return base_lr + amplitude * max(0.0, 1.0 - x)


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(
    params: NetworkParams,
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    weight_decay: float = 1e-5,
    eps: float = 1e-8,
) -> NetworkParams:
    """One Adam update with bias correction; weight decay enters as an L2 term."""
    b1, b2 = betas
    state.t += 1
    t = state.t
    new = dict(params.tensors)
    for name, g in grads.items():
        w = params.tensors[name]
        g = g + weight_decay * w
        m = state.m.get(name, np.zeros_like(w))
        v = state.v.get(name, np.zeros_like(w))
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        new[name] = w - lr * m_hat / (np.sqrt(v_hat) + eps)
    return NetworkParams(new, params.init_seed)


@dataclass
class SgdState:
    velocity: dict[str, np.ndarray] = field(default_factory=dict)


def sgd_cyclic_step(
    params: NetworkParams,
    grads: dict[str, np.ndarray],
    state: SgdState,
    step: int,
    base_lr: float = 1e-5,
    max_lr: float = 1e-2,
    momentum: float = 0.9,
    weight_decay: float = 1e-5,
    step_size_up: int = 2000,
    gamma: float = 0.5,
) -> NetworkParams:
    """One SGD + momentum update at the cyclic LR for this global step."""
    lr = cyclic_lr(step, base_lr, max_lr, step_size_up, gamma)
    new = dict(params.tensors)
    for name, g in grads.items():
        w = params.tensors[name]
        g = g + weight_decay * w
        vel = momentum * state.velocity.get(name, np.zeros_like(w)) + g
        state.velocity[name] = vel
        new[name] = w - lr * vel
    return NetworkParams(new, params.init_seed)


# ---------------------------------------------------------------------------
# Model container and forward passes
# ---------------------------------------------------------------------------

@dataclass
class Model:
    """An encoder/head pair with its parameters.

    kind "psde" has no encoder parameters (inputs are spectral features);
    "neural_frozen" and "neural_full" carry the reduced conv encoder.
    compute_dtype is the forward/backward precision ("float32" keeps the
    batch-heavy paths fast; master weights stay float64 either way).
    """

    kind: str
    head_arch: HeadArch
    params: NetworkParams
    encoder_arch: EncoderArch | None = None
    dropout_p: float = 0.5
    encoder_id: str = ""
    compute_dtype: str = "float32"
    # Regression heads train against standardized targets; predictions are
    # mapped back through this affine transform (identity for grade).
    output_offset: float = 0.0
    output_scale: float = 1.0

    def __post_init__(self):
        if self.kind not in ("psde", "neural_frozen", "neural_full"):
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.kind != "psde" and self.encoder_arch is None:
            raise ValueError(f"{self.kind} model needs an encoder architecture")
        if self.compute_dtype not in ("float32", "float64"):
            raise ValueError(f"unknown compute dtype {self.compute_dtype!r}")
        if not self.encoder_id:
            self.encoder_id = self.kind

    @property
    def dtype(self):
        return np.float32 if self.compute_dtype == "float32" else np.float64

    @property
    def has_encoder_dropout(self) -> bool:
        return self.kind == "neural_full"

    def dropout_units(self) -> dict[str, int]:
        """Units per dropout layer that stochastic passes may mask."""
        units = {"head": self.head_arch.droppable_units}
        if self.has_encoder_dropout:
            units["enc"] = self.encoder_arch.flat_dim
        return units

    def embed(self, inputs: np.ndarray) -> np.ndarray:
        """Deterministic embeddings for (B, M, N) epochs or (B, d) features."""
        inputs = np.asarray(inputs, dtype=np.float64)
        if self.kind == "psde":
            return inputs
        if inputs.ndim == 2:
            return inputs
        from .encoders import neural_encode_batch

        return neural_encode_batch(self.params, self.encoder_arch, inputs, dtype=self.dtype)

    def predict(
        self,
        inputs: np.ndarray,
        mask: DropoutMask | None = None,
        dropout_p: float = 0.0,
    ) -> np.ndarray:
        """Task-space predictions: probabilities for grade, years for age.

        `inputs` are epochs (B, M, N) for an end-to-end pass or features
        (B, d) when the encoder output is precomputed.
        """
        wrapped = wrap_params(self.params, trainable=set(), dtype=self.dtype)
        out = self._forward(wrapped, np.asarray(inputs, self.dtype), mask, dropout_p)
        if self.head_arch.task == "grade":
            return sigmoid(out).data.astype(np.float64)
        return out.data.astype(np.float64) * self.output_scale + self.output_offset

    def _forward(
        self,
        wrapped: dict[str, Tensor],
        inputs: np.ndarray,
        mask: DropoutMask | None,
        dropout_p: float,
    ) -> Tensor:
        enc_mask = mask.get("enc") if mask else None
        head_mask = mask.get("head") if mask else None
        if inputs.ndim == 3:
            z = encoder_forward(wrapped, self.encoder_arch, Tensor(inputs), enc_mask, dropout_p)
        else:
            z = Tensor(inputs)
        return head_forward(wrapped, self.head_arch, z, head_mask, dropout_p)


def build_model(
    kind: str,
    task: str,
    seed: int,
    encoder_arch: EncoderArch | None = None,
    feature_dim: int | None = None,
    head_hidden: int | None = None,
    dropout_p: float = 0.5,
    compute_dtype: str = "float32",
) -> Model:
    """Construct a model of the given kind with freshly initialized parameters."""
    if kind == "psde":
        if feature_dim is None:
            raise ValueError("psde model needs feature_dim")
        head = HeadArch(in_dim=feature_dim, task=task, hidden=head_hidden)
        specs = head.param_specs()
        return Model(
            kind, head, nnet.init_params(specs, seed),
            dropout_p=dropout_p, compute_dtype=compute_dtype,
        )
    arch = encoder_arch or EncoderArch()
    head = HeadArch(in_dim=arch.embed_dim, task=task, hidden=head_hidden)
    specs = {**arch.param_specs(), **head.param_specs()}
    return Model(
        kind, head, nnet.init_params(specs, seed), encoder_arch=arch,
        dropout_p=dropout_p, compute_dtype=compute_dtype,
    )


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainData:
    inputs: np.ndarray  # (n, M, N) epochs or (n, d) features
    targets: np.ndarray  # (n,) 0/1 for grade, years for age
    rec_ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.targets = np.asarray(self.targets, dtype=np.float64)
        if len(self.inputs) != len(self.targets):
            raise ValueError("inputs and targets must have equal length")


@dataclass
class HistoryRow:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float


def _loss_graph(model: Model, wrapped, inputs, targets, mask, dropout_p, beta) -> Tensor:
    out = model._forward(wrapped, inputs, mask, dropout_p)
    y = Tensor(np.asarray(targets, dtype=out.data.dtype))
    if model.head_arch.task == "grade":
        return mean_all(bce(sigmoid(out), y))
    return mean_all(smooth_l1(out, y, beta))


def grad(
    model: Model,
    inputs: np.ndarray,
    targets: np.ndarray,
    mask: DropoutMask | None,
    dropout_p: float,
    trainable: set[str],
    beta: float = 1.0,
) -> tuple[float, dict[str, np.ndarray]]:
    """Loss and exact gradients of the masked batch loss for `trainable` tensors."""
    wrapped = wrap_params(model.params, trainable=trainable, dtype=model.dtype)
    loss = _loss_graph(model, wrapped, np.asarray(inputs, model.dtype), targets, mask, dropout_p, beta)
    if not np.isfinite(loss.data):
        raise FloatingPointError(f"non-finite training loss {float(loss.data)}")
    loss.backward()
    grads = {}
    for name in trainable:
        g = wrapped[name].grad
        g = np.zeros_like(model.params.tensors[name]) if g is None else g
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in tensor {name!r}")
        grads[name] = g
    return float(loss.data), grads


def train(
    config: TrainConfig, model: Model, train_data: TrainData, val_data: TrainData
) -> tuple[Model, list[HistoryRow]]:
    """Fit the model; returns the best-validation parameters and the history.

    Early stopping: training ends once validation loss has not improved
    by `min_delta` for `patience` consecutive epochs.
    """
    if len(train_data.inputs) == 0 or len(val_data.inputs) == 0:
        raise ValueError("train and validation splits must be non-empty")
    if config.regime == "full" and model.kind != "neural_full":
        raise ValueError("regime 'full' requires a neural_full model")
    if config.task != model.head_arch.task:
        raise ValueError(
            f"config task {config.task!r} does not match model task "
            f"{model.head_arch.task!r}"
        )

    if config.regime == "frozen_encoder":
        x_train = model.embed(train_data.inputs).astype(model.dtype)
        x_val = model.embed(val_data.inputs).astype(model.dtype)
    else:
        x_train = train_data.inputs.astype(model.dtype)
        x_val = val_data.inputs.astype(model.dtype)

    # Regression trains on standardized targets (the head starts near zero
    # output, so raw-year targets would dominate the step budget); the
    # returned model folds the inverse transform into predict().
    out_offset, out_scale = 0.0, 1.0
    y_train, y_val = train_data.targets, val_data.targets
    if config.task == "age":
        out_offset = float(y_train.mean())
        out_scale = float(y_train.std()) or 1.0
        y_train = (y_train - out_offset) / out_scale
        y_val = (y_val - out_offset) / out_scale

    trainable = (
        set(model.params.names())
        if config.regime == "full"
        else {n for n in model.params.names() if n.startswith("head.")}
    )
    layer_units = model.dropout_units()
    if config.regime == "frozen_encoder":
        layer_units.pop("enc", None)

    params = model.params.copy()
    work = Model(
        model.kind, model.head_arch, params, model.encoder_arch,
        model.dropout_p, model.encoder_id,
    )
    adam_state, sgd_state = AdamState(), SgdState()
    n = len(x_train)
    global_step = 0
    best_val = np.inf
    best_params = params.copy()
    wait = 0
    history: list[HistoryRow] = []

    for epoch in range(1, config.max_epochs + 1):
        order = rng.stream(config.seed, "shuffle", epoch).permutation(n)
        batch_losses = []
        epoch_lr = multistep_lr(epoch, config.lr, config.milestones, config.lr_decay)
        for bi, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start : start + config.batch_size]
            mask = make_dropout_mask(
                layer_units, len(idx), config.dropout_p, config.seed, epoch, bi
            )
            loss_value, grads = grad(
                work, x_train[idx], y_train[idx], mask,
                config.dropout_p, trainable, config.smooth_l1_beta,
            )
            batch_losses.append(loss_value)
            if config.optimizer == "adam":
                work.params = adam_step(
                    work.params, grads, adam_state, epoch_lr,
                    config.betas, config.weight_decay,
                )
                step_lr = epoch_lr
            else:
                step_lr = cyclic_lr(
                    global_step, config.sgd_base_lr, config.sgd_max_lr,
                    config.sgd_step_size_up, config.sgd_gamma,
                )
                work.params = sgd_cyclic_step(
                    work.params, grads, sgd_state, global_step,
                    config.sgd_base_lr, config.sgd_max_lr, config.momentum,
                    config.weight_decay, config.sgd_step_size_up, config.sgd_gamma,
                )
            global_step += 1

        val_pred = work.predict(x_val)
        if work.head_arch.task == "grade":
            val_loss = loss_bce(val_pred, val_data.targets)
        else:
            val_loss = loss_smooth_l1(val_pred, val_data.targets, config.smooth_l1_beta)
        history.append(
            HistoryRow(epoch, float(np.mean(batch_losses)), val_loss, step_lr)
        )
        if not np.isfinite(val_loss):
            raise FloatingPointError(f"non-finite validation loss at epoch {epoch}")

        if val_loss < best_val - config.min_delta:
            best_val = val_loss
            best_params = work.params.copy()
            wait = 0
        else:
            wait += 1
            if wait >= config.patience:
                break

    final = Model(
        model.kind, model.head_arch, best_params, model.encoder_arch,
        model.dropout_p, model.encoder_id,
    )
    return final, history


# ---------------------------------------------------------------------------
# Checkpoints and history files
# ---------------------------------------------------------------------------

_SPP_MAGIC = b"SPP1"


def save_params(path: str | Path, params: NetworkParams) -> None:
    """Flat binary container: per tensor (name, rank, dims, f32 payload)."""
    with open(path, "wb") as fh:
        fh.write(_SPP_MAGIC)
        for name, arr in params.tensors.items():
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_params(path: str | Path) -> NetworkParams:
    blob = Path(path).read_bytes()
    if blob[:4] != _SPP_MAGIC:
        raise ValueError(f"{path}: not an SPP1 checkpoint")
    tensors: dict[str, np.ndarray] = {}
    offset = 4
    while offset < len(blob):
        (name_len,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        name = blob[offset : offset + name_len].decode("utf-8")
        offset += name_len
        (rank,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        dims = struct.unpack_from(f"<{rank}I", blob, offset)
        offset += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
        offset += count * 4
        tensors[name] = arr.reshape(dims).astype(np.float64)
    return NetworkParams(tensors)


def save_history(path: str | Path, history: list[HistoryRow]) -> None:
    with open(path, "w") as fh:
        fh.write("epoch,train_loss,val_loss,lr\n")
        for row in history:
            fh.write(f"{row.epoch},{row.train_loss:.9g},{row.val_loss:.9g},{row.lr:.9g}\n")
