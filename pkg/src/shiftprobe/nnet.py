"""Minimal reverse-mode differentiation core and the network architectures.

A Tensor wraps a float64 numpy array and records the operation that made
it; backward() walks the tape in reverse topological order. Only the
operations the reduced encoder and the task heads need are implemented:
temporal/spatial convolution, average pooling, square, floored log,
linear maps, relu, sigmoid, clamping, and the two losses.

The reduced encoder maps an (M, N) epoch to a 128-d embedding through
temporal conv (8 filters, kernel 25) -> spatial conv across channels ->
square -> mean pooling (window 75, stride 15) -> log -> linear.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import rng


class Tensor:
    """Float array plus tape bookkeeping.

    float32 and float64 are both supported; the dtype of the inputs flows
    through every operation (training uses float32 compute against
    float64 master weights, exactness tests run in float64).
    """

    __slots__ = ("data", "grad", "_parents", "_backward", "requires_grad")

    def __init__(self, data, parents=(), backward=None, requires_grad=False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self._parents = tuple(p for p in parents if p.requires_grad)
        self._backward = backward
        self.requires_grad = bool(requires_grad) or bool(self._parents)

    @property
    def shape(self):
        return self.data.shape

    def _accumulate(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += grad

    def backward(self) -> None:
        if self.data.size != 1:
            raise ValueError("backward() expects a scalar loss")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                stack.append((parent, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)


def tensor(data, requires_grad=False) -> Tensor:
    return data if isinstance(data, Tensor) else Tensor(data, requires_grad=requires_grad)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum grad down to `shape` to undo numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data, (a, b))

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    out._backward = backward
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data - b.data, (a, b))

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    out._backward = backward
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data, (a, b))

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    out._backward = backward
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data @ b.data, (a, b))

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    out._backward = backward
    return out


def square(a: Tensor) -> Tensor:
    out = Tensor(a.data * a.data, (a,))

    def backward(g):
        a._accumulate(2.0 * a.data * g)

    out._backward = backward
    return out


def log_floor(a: Tensor, floor: float) -> Tensor:
    """log(max(a, floor)); gradient is zero where the floor is active."""
    clipped = np.maximum(a.data, floor)
    out = Tensor(np.log(clipped), (a,))

    def backward(g):
        a._accumulate(np.where(a.data > floor, g / clipped, 0.0))

    out._backward = backward
    return out


def log(a: Tensor) -> Tensor:
    out = Tensor(np.log(a.data), (a,))

    def backward(g):
        a._accumulate(g / a.data)

    out._backward = backward
    return out


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0.0), (a,))

    def backward(g):
        a._accumulate(g * (a.data > 0.0))

    out._backward = backward
    return out


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out = Tensor(s, (a,))

    def backward(g):
        a._accumulate(g * s * (1.0 - s))

    out._backward = backward
    return out


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip values; gradient passes only through the interior."""
    out = Tensor(np.clip(a.data, lo, hi), (a,))

    def backward(g):
        a._accumulate(g * ((a.data > lo) & (a.data < hi)))

    out._backward = backward
    return out


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape), (a,))

    def backward(g):
        a._accumulate(g.reshape(a.shape))

    out._backward = backward
    return out


def mean_all(a: Tensor) -> Tensor:
    out = Tensor(np.asarray(a.data.mean()), (a,))

    def backward(g):
        a._accumulate(np.full(a.shape, float(g) / a.data.size))

    out._backward = backward
    return out


def conv_temporal(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Per-channel temporal convolution.

    x: (B, M, N), w: (F, K), b: (F) -> (B, F, M, N-K+1).

    The sliding windows are materialized once and shared between the
    forward pass and both weight/input gradients (they dominate cost).
    """
    batch, m, n = x.shape
    f, k = w.shape
    n_out = n - k + 1
    windows = np.ascontiguousarray(sliding_window_view(x.data, k, axis=2))
    flat = windows.reshape(-1, k)  # (B*M*N', K)
    out_data = (flat @ w.data.T).reshape(batch, m, n_out, f)
    out_data = out_data.transpose(0, 3, 1, 2) + b.data[None, :, None, None]
    out = Tensor(out_data, (x, w, b))

    def backward(g):
        if w.requires_grad:
            g_flat = g.transpose(1, 0, 2, 3).reshape(f, -1)  # (F, B*M*N')
            w._accumulate(g_flat @ flat)
        if b.requires_grad:
            b._accumulate(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            partial = (g.transpose(0, 2, 3, 1).reshape(-1, f) @ w.data).reshape(
                batch, m, n_out, k
            )
            gx = np.zeros_like(x.data)
            for j in range(k):
                gx[:, :, j : j + n_out] += partial[:, :, :, j]
            x._accumulate(gx)

    out._backward = backward
    return out


def conv_spatial(h: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Collapse filter and channel axes with one weight per (filter, channel).

    h: (B, F, M, T), w: (G, F, M), b: (G) -> (B, G, T).
    """
    out_data = np.tensordot(h.data, w.data, axes=([1, 2], [1, 2]))  # (B, T, G)
    out_data = out_data.transpose(0, 2, 1) + b.data[None, :, None]
    out = Tensor(out_data, (h, w, b))

    def backward(g):
        if w.requires_grad:
            w._accumulate(np.tensordot(g, h.data, axes=([0, 2], [0, 3])))
        if b.requires_grad:
            b._accumulate(g.sum(axis=(0, 2)))
        if h.requires_grad:
            gh = np.tensordot(g, w.data, axes=([1], [0]))  # (B, T, F, M)
            h._accumulate(gh.transpose(0, 2, 3, 1))

    out._backward = backward
    return out


def avg_pool_time(x: Tensor, width: int, stride: int) -> Tensor:
    """Mean pooling along the last axis. x: (B, G, T) -> (B, G, P)."""
    t = x.shape[-1]
    if t < width:
        raise ValueError(f"cannot pool {t} samples with window {width}")
    windows = sliding_window_view(x.data, width, axis=2)[:, :, ::stride, :]
    out = Tensor(windows.mean(axis=3), (x,))
    p = windows.shape[2]

    def backward(g):
        gx = np.zeros_like(x.data)
        for j in range(p):
            start = j * stride
            gx[:, :, start : start + width] += g[:, :, j, None] / width
        x._accumulate(gx)

    out._backward = backward
    return out


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x: (B, D) @ w: (D, O) + b: (O)."""
    return add(matmul(x, w), b)


def smooth_l1(pred: Tensor, target: Tensor, beta: float = 1.0) -> Tensor:
    """Elementwise smooth-L1: quadratic within beta of the target, linear outside."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    e = pred.data - target.data
    inside = np.abs(e) < beta
    out_data = np.where(inside, 0.5 * e * e / beta, np.abs(e) - 0.5 * beta)
    out = Tensor(out_data, (pred, target))

    def backward(g):
        de = np.where(inside, e / beta, np.sign(e))
        if pred.requires_grad:
            pred._accumulate(_unbroadcast(g * de, pred.shape))
        if target.requires_grad:
            target._accumulate(_unbroadcast(-g * de, target.shape))

    out._backward = backward
    return out


PROB_EPS = 1e-7


def bce(prob: Tensor, y: Tensor) -> Tensor:
    """Elementwise binary cross-entropy on probabilities (clamped internally)."""
    p = clamp(prob, PROB_EPS, 1.0 - PROB_EPS)
    one = Tensor(np.ones_like(p.data))
    term_pos = mul(y, log(p))
    term_neg = mul(sub(one, y), log(sub(one, p)))
    return mul(add(term_pos, term_neg), Tensor(-np.ones_like(p.data)))


def dropout(x: Tensor, keep_mask: np.ndarray | None, p: float) -> Tensor:
    """Inverted dropout: multiply by keep_mask / (1 - p). None means no-op."""
    if keep_mask is None or p == 0.0:
        return x
    scaled = (keep_mask / (1.0 - p)).astype(x.data.dtype, copy=False)
    return mul(x, Tensor(scaled))


# ---------------------------------------------------------------------------
# Architectures and parameters
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EncoderArch:
    n_channels: int = 19
    n_samples: int = 1280
    n_filters: int = 8
    kernel_len: int = 25
    pool_width: int = 75
    pool_stride: int = 15
    embed_dim: int = 128
    log_floor: float = 1e-8

    @property
    def conv_len(self) -> int:
        return self.n_samples - self.kernel_len + 1

    @property
    def pool_len(self) -> int:
        return (self.conv_len - self.pool_width) // self.pool_stride + 1

    @property
    def flat_dim(self) -> int:
        return self.n_filters * self.pool_len

    def param_specs(self) -> dict[str, tuple[tuple[int, ...], int, int]]:
        """name -> (shape, fan_in, fan_out)."""
        f, k, m = self.n_filters, self.kernel_len, self.n_channels
        return {
            "enc.tconv.w": ((f, k), k, f * k),
            "enc.tconv.b": ((f,), 0, 0),
            "enc.sconv.w": ((f, f, m), f * m, f),
            "enc.sconv.b": ((f,), 0, 0),
            "enc.out.w": ((self.flat_dim, self.embed_dim), self.flat_dim, self.embed_dim),
            "enc.out.b": ((self.embed_dim,), 0, 0),
        }


@dataclass(frozen=True)
class HeadArch:
    in_dim: int
    task: str  # "grade" or "age"
    hidden: int | None = None

    def __post_init__(self):
        if self.task not in ("grade", "age"):
            raise ValueError(f"task must be 'grade' or 'age', got {self.task!r}")

    def param_specs(self) -> dict[str, tuple[tuple[int, ...], int, int]]:
        specs: dict[str, tuple[tuple[int, ...], int, int]] = {}
        d = self.in_dim
        if self.hidden is not None:
            specs["head.hidden.w"] = ((d, self.hidden), d, self.hidden)
            specs["head.hidden.b"] = ((self.hidden,), 0, 0)
            d = self.hidden
        specs["head.out.w"] = ((d, 1), d, 1)
        specs["head.out.b"] = ((1,), 0, 0)
        return specs

    @property
    def droppable_units(self) -> int:
        """Width of the representation the head's dropout acts on."""
        return self.in_dim if self.hidden is None else self.hidden


@dataclass
class NetworkParams:
    """Named parameter tensors plus the seed they were initialized from."""

    tensors: dict[str, np.ndarray]
    init_seed: int = 0

    def copy(self) -> "NetworkParams":
        return NetworkParams({k: v.copy() for k, v in self.tensors.items()}, self.init_seed)

    def names(self) -> list[str]:
        return list(self.tensors)


BIAS_FILL = 0.01
XAVIER_GAIN = 1.0


def init_params(
    specs: dict[str, tuple[tuple[int, ...], int, int]],
    seed: int,
    gain: float = XAVIER_GAIN,
    bias_fill: float = BIAS_FILL,
) -> NetworkParams:
    """Xavier-uniform weights (per-tensor keyed streams), constant-filled biases."""
    tensors: dict[str, np.ndarray] = {}
    for name, (shape, fan_in, fan_out) in specs.items():
        if name.endswith(".b"):
            tensors[name] = np.full(shape, bias_fill)
        else:
            bound = gain * np.sqrt(6.0 / (fan_in + fan_out))
            gen = rng.stream(seed, "init", name)
            tensors[name] = gen.uniform(-bound, bound, size=shape)
    return NetworkParams(tensors, init_seed=seed)


def encoder_forward(
    params: dict[str, Tensor],
    arch: EncoderArch,
    x: Tensor,
    enc_mask: np.ndarray | None = None,
    dropout_p: float = 0.0,
) -> Tensor:
    """Forward the reduced encoder on a (B, M, N) batch; returns (B, embed_dim)."""
    h = conv_temporal(x, params["enc.tconv.w"], params["enc.tconv.b"])
    h = conv_spatial(h, params["enc.sconv.w"], params["enc.sconv.b"])
    h = square(h)
    h = avg_pool_time(h, arch.pool_width, arch.pool_stride)
    h = log_floor(h, arch.log_floor)
    h = reshape(h, (x.shape[0], arch.flat_dim))
    h = dropout(h, enc_mask, dropout_p)
    return linear(h, params["enc.out.w"], params["enc.out.b"])


def head_forward(
    params: dict[str, Tensor],
    arch: HeadArch,
    z: Tensor,
    head_mask: np.ndarray | None = None,
    dropout_p: float = 0.0,
) -> Tensor:
    """Forward a task head on (B, D) features; returns raw outputs (B,).

    Grade heads emit logits (use `sigmoid` for probabilities); age heads
    emit years directly. Dropout acts on the representation feeding the
    output layer: the hidden activations when a hidden layer exists,
    otherwise the input features.
    """
    h = z
    if arch.hidden is not None:
        h = relu(linear(h, params["head.hidden.w"], params["head.hidden.b"]))
    h = dropout(h, head_mask, dropout_p)
    out = linear(h, params["head.out.w"], params["head.out.b"])
    return reshape(out, (z.shape[0],))


def wrap_params(
    params: NetworkParams,
    trainable: set[str] | None = None,
    dtype=np.float64,
) -> dict[str, Tensor]:
    """Lift arrays into Tensors at the compute dtype; only names in
    `trainable` receive gradients. Master arrays are left untouched."""
    return {
        name: Tensor(arr.astype(dtype, copy=False), requires_grad=(trainable is None or name in trainable))
        for name, arr in params.tensors.items()
    }
