"""Shallow triple-stream convolutional classifier over 28x28x3 flow cubes.

Three parallel conv+ReLU+maxpool streams (3, 5, and 8 kernels of 3x3 over
all 3 input channels) are merged channel-wise, average-pooled to 5x5x16,
flattened to 400 features, and classified by a single 400->3 softmax layer.
Backpropagation is written out per layer; gradient correctness is pinned by
finite-difference tests.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .data import EmotionClass
from .flow import FlowCube
from .grids import Grid3

__all__ = [
    "NetworkParams",
    "Gradients",
    "ActivationTape",
    "TrainConfig",
    "TrainResult",
    "TrainingError",
    "ModelFormatError",
    "STREAM_WIDTHS",
    "INPUT_SIZE",
    "N_CLASSES",
    "init_params",
    "forward",
    "forward_batch",
    "loss",
    "backward",
    "train",
    "predict",
    "count_parameters",
    "save_model",
    "load_model",
]

INPUT_SIZE = 28
STREAM_WIDTHS = (3, 5, 8)
N_CLASSES = 3
_KERNEL = 3
_FLAT = 400  # 5 * 5 * (3 + 5 + 8)

_MODEL_MAGIC = b"STSM"
_MODEL_VERSION = 1


class TrainingError(RuntimeError):
    """Training aborted (non-finite loss)."""


class ModelFormatError(ValueError):
    """Model file is corrupt, truncated, or from another version."""


@dataclass
class NetworkParams:
    """All learnable arrays. Kernels are (kh, kw, in_channels, n_kernels)."""

    stream_kernels: tuple[np.ndarray, ...]
    stream_biases: tuple[np.ndarray, ...]
    fc_weight: np.ndarray  # (400, 3)
    fc_bias: np.ndarray  # (3,)

    def arrays(self) -> list[np.ndarray]:
        """Canonical flat order: per stream kernel then bias, then fc."""
        out: list[np.ndarray] = []
        for k, b in zip(self.stream_kernels, self.stream_biases):
            out.extend((k, b))
        out.extend((self.fc_weight, self.fc_bias))
        return out

    def copy(self) -> "NetworkParams":
        return NetworkParams(
            stream_kernels=tuple(k.copy() for k in self.stream_kernels),
            stream_biases=tuple(b.copy() for b in self.stream_biases),
            fc_weight=self.fc_weight.copy(),
            fc_bias=self.fc_bias.copy(),
        )


@dataclass(frozen=True)
class Gradients:
    """Loss gradients summed over the batch, same layout as NetworkParams."""

    stream_kernels: tuple[np.ndarray, ...]
    stream_biases: tuple[np.ndarray, ...]
    fc_weight: np.ndarray
    fc_bias: np.ndarray

    def arrays(self) -> list[np.ndarray]:
        out: list[np.ndarray] = []
        for k, b in zip(self.stream_kernels, self.stream_biases):
            out.extend((k, b))
        out.extend((self.fc_weight, self.fc_bias))
        return out


@dataclass(frozen=True)
class ActivationTape:
    """Forward intermediates retained for the backward pass."""

    windows: np.ndarray  # (N, 28, 28, 3, 3, 3) padded-input windows
    pre_activations: tuple[np.ndarray, ...]  # per stream (N, 28, 28, k)
    pool_rows: tuple[np.ndarray, ...]  # per-stream argmax rows into conv maps
    pool_cols: tuple[np.ndarray, ...]
    flat: np.ndarray  # (N, 400)
    probabilities: np.ndarray  # (N, 3)
    fc_weight: np.ndarray  # captured for the dense backward step


def init_params(seed: int) -> NetworkParams:
    """Zero biases; weights uniform, scaled by 1/sqrt(fan-in)."""
    rng = np.random.default_rng(seed)
    kernels = []
    biases = []
    conv_bound = 1.0 / np.sqrt(_KERNEL * _KERNEL * 3)
    for width in STREAM_WIDTHS:
        kernels.append(rng.uniform(-conv_bound, conv_bound, size=(_KERNEL, _KERNEL, 3, width)))
        biases.append(np.zeros(width))
    fc_bound = 1.0 / np.sqrt(_FLAT)
    fc_weight = rng.uniform(-fc_bound, fc_bound, size=(_FLAT, N_CLASSES))
    return NetworkParams(
        stream_kernels=tuple(kernels),
        stream_biases=tuple(biases),
        fc_weight=fc_weight,
        fc_bias=np.zeros(N_CLASSES),
    )


def _as_batch(x) -> np.ndarray:
    if isinstance(x, FlowCube):
        x = x.data
    if isinstance(x, Grid3):
        x = x.data
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[1:] != (INPUT_SIZE, INPUT_SIZE, 3):
        raise ValueError(f"expected {INPUT_SIZE}x{INPUT_SIZE}x3 input, got shape {arr.shape}")
    return arr


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _max_pool_with_argmax(a: np.ndarray):
    """3x3 window, stride 3, padding 1 with never-selected padding cells.

    Returns the pooled map plus argmax coordinates into the unpadded input
    (ties resolved to the first maximum in row-major window order).
    """
    padded = np.pad(a, ((0, 0), (1, 1), (1, 1), (0, 0)), constant_values=-np.inf)
    win = sliding_window_view(padded, (3, 3), axis=(1, 2))[:, ::3, ::3]
    flat = win.reshape(*win.shape[:4], 9)
    idx = flat.argmax(axis=4)
    pooled = np.take_along_axis(flat, idx[..., None], axis=4)[..., 0]
    base_r = (np.arange(win.shape[1]) * 3 - 1)[None, :, None, None]
    base_c = (np.arange(win.shape[2]) * 3 - 1)[None, None, :, None]
    rows = base_r + idx // 3
    cols = base_c + idx % 3
    return pooled, rows, cols


def forward_batch(params: NetworkParams, inputs) -> tuple[np.ndarray, ActivationTape]:
    """Probabilities plus tape for a batch of cubes, shape (N, 28, 28, 3)."""
    x = _as_batch(inputs)
    n = x.shape[0]
    padded = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    windows = sliding_window_view(padded, (_KERNEL, _KERNEL), axis=(1, 2))
    pre_acts = []
    pooled_maps = []
    pool_rows = []
    pool_cols = []
    for kernel, bias, width in zip(params.stream_kernels, params.stream_biases, STREAM_WIDTHS):
        z = np.einsum("nijcab,abck->nijk", windows, kernel, optimize=True) + bias
        assert z.shape == (n, INPUT_SIZE, INPUT_SIZE, width)
        pooled, rows, cols = _max_pool_with_argmax(np.maximum(z, 0.0))
        assert pooled.shape == (n, 10, 10, width)
        pre_acts.append(z)
        pooled_maps.append(pooled)
        pool_rows.append(rows)
        pool_cols.append(cols)
    merged = np.concatenate(pooled_maps, axis=3)
    assert merged.shape == (n, 10, 10, sum(STREAM_WIDTHS))
    averaged = merged.reshape(n, 5, 2, 5, 2, merged.shape[3]).mean(axis=(2, 4))
    assert averaged.shape == (n, 5, 5, sum(STREAM_WIDTHS))
    flat = averaged.reshape(n, _FLAT)
    logits = flat @ params.fc_weight + params.fc_bias
    assert logits.shape == (n, N_CLASSES)
    probs = _softmax(logits)
    tape = ActivationTape(
        windows=windows,
        pre_activations=tuple(pre_acts),
        pool_rows=tuple(pool_rows),
        pool_cols=tuple(pool_cols),
        flat=flat,
        probabilities=probs,
        fc_weight=params.fc_weight,
    )
    return probs, tape


def forward(params: NetworkParams, cube) -> tuple[np.ndarray, ActivationTape]:
    """Single-cube forward pass; returns a probability triple and the tape."""
    probs, tape = forward_batch(params, cube)
    return probs[0], tape


def loss(probabilities: np.ndarray, label: EmotionClass | int) -> float:
    """Cross-entropy of the true class, with the probability clamped at 1e-12."""
    p = float(np.asarray(probabilities).reshape(-1)[int(label)])
    return -float(np.log(max(p, 1e-12)))


def backward(tape: ActivationTape, labels, loss_scale: float = 1.0) -> Gradients:
    """Gradients of the summed cross-entropy over the batch.

    ``loss_scale`` multiplies the upstream loss gradient (pass 1/N for a
    mean-loss step). ReLU uses subgradient 0 at 0; max-pool routes each
    gradient to the first argmax in row-major window order.
    """
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    probs = tape.probabilities
    n = probs.shape[0]
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    d_logits = probs.copy()
    d_logits[np.arange(n), labels] -= 1.0
    if loss_scale != 1.0:
        d_logits *= loss_scale

    fc_weight_grad = tape.flat.T @ d_logits
    fc_bias_grad = d_logits.sum(axis=0)
    d_flat = d_logits @ tape.fc_weight.T
    d_avg = d_flat.reshape(n, 5, 5, sum(STREAM_WIDTHS))
    d_merged = np.repeat(np.repeat(d_avg, 2, axis=1), 2, axis=2) / 4.0

    kernel_grads = []
    bias_grads = []
    offset = 0
    sample_idx = np.arange(n)[:, None, None, None]
    for s, width in enumerate(STREAM_WIDTHS):
        d_pooled = d_merged[:, :, :, offset : offset + width]
        offset += width
        z = tape.pre_activations[s]
        d_act = np.zeros_like(z)
        channel_idx = np.arange(width)[None, None, None, :]
        np.add.at(
            d_act,
            (sample_idx, tape.pool_rows[s], tape.pool_cols[s], channel_idx),
            d_pooled,
        )
        d_z = d_act * (z > 0.0)
        kernel_grads.append(
            np.einsum("nijcab,nijk->abck", tape.windows, d_z, optimize=True)
        )
        bias_grads.append(d_z.sum(axis=(0, 1, 2)))
    return Gradients(
        stream_kernels=tuple(kernel_grads),
        stream_biases=tuple(bias_grads),
        fc_weight=fc_weight_grad,
        fc_bias=fc_bias_grad,
    )


def predict(params: NetworkParams, cube) -> EmotionClass:
    """Argmax class; exact ties resolve to the lowest class index."""
    probs, _ = forward(params, cube)
    return EmotionClass(int(np.argmax(probs)))


def count_parameters(params: NetworkParams) -> int:
    return int(sum(a.size for a in params.arrays()))


# ---------------------------------------------------------------------------
# Optimizers and training loop
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 5e-5
    max_epochs: int = 500
    batch_size: int = 32
    seed: int = 0
    optimizer: str = "adam"  # "adam" or "sgd_momentum"

    def validate(self) -> None:
        if self.learning_rate < 0:
            raise ValueError("learning rate must be >= 0")
        if self.max_epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch size must be positive")
        if self.optimizer not in ("adam", "sgd_momentum"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass(frozen=True)
class TrainResult:
    params: NetworkParams
    epoch_losses: tuple[float, ...]


class _Adam:
    def __init__(self, shapes, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.t = 0

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        self.t += 1
        for i, (p, g) in enumerate(zip(params, grads)):
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            m_hat = self.m[i] / (1.0 - self.beta1**self.t)
            v_hat = self.v[i] / (1.0 - self.beta2**self.t)
            p -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


class _SgdMomentum:
    def __init__(self, shapes, lr, momentum=0.9):
        self.lr, self.momentum = lr, momentum
        self.velocity = [np.zeros(s) for s in shapes]

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        for i, (p, g) in enumerate(zip(params, grads)):
            self.velocity[i] = self.momentum * self.velocity[i] - self.lr * g
            p += self.velocity[i]


def _labels_of(cubes) -> np.ndarray:
    return np.array([int(c.label) for c in cubes], dtype=np.int64)


def _inputs_of(cubes) -> np.ndarray:
    return np.stack([np.asarray(c.data.data, dtype=np.float64) for c in cubes])


def train(dataset: Sequence[FlowCube], config: TrainConfig | None = None) -> TrainResult:
    """Mini-batch training over shuffled epochs; bit-deterministic per seed.

    The per-batch step uses mean-loss gradients; the recorded trace is the
    mean sample loss per epoch (measured before each update).
    """
    config = config or TrainConfig()
    config.validate()
    if not dataset:
        raise ValueError("training set must be nonempty")
    x = _inputs_of(dataset)
    y = _labels_of(dataset)
    n = x.shape[0]
    params = init_params(config.seed)
    arrays = params.arrays()
    shapes = [a.shape for a in arrays]
    if config.optimizer == "adam":
        optimizer = _Adam(shapes, config.learning_rate)
    else:
        optimizer = _SgdMomentum(shapes, config.learning_rate)
    rng = np.random.default_rng(config.seed)
    losses = []
    for epoch in range(config.max_epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, config.batch_size):
            batch = order[start : start + config.batch_size]
            probs, tape = forward_batch(params, x[batch])
            batch_losses = -np.log(
                np.maximum(probs[np.arange(len(batch)), y[batch]], 1e-12)
            )
            if not np.isfinite(batch_losses).all():
                raise TrainingError(
                    f"non-finite loss at epoch {epoch + 1}, batch {start // config.batch_size + 1}"
                )
            epoch_loss += float(batch_losses.sum())
            grads = backward(tape, y[batch], loss_scale=1.0 / len(batch))
            optimizer.step(arrays, grads.arrays())
        losses.append(epoch_loss / n)
    return TrainResult(params=params, epoch_losses=tuple(losses))


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def save_model(params: NetworkParams, path: str | Path) -> None:
    """Versioned binary format: magic ``STSM``, version byte, then each
    array in canonical order as a u8 rank, u32 dims, and float64 data."""
    with Path(path).open("wb") as fh:
        fh.write(_MODEL_MAGIC)
        fh.write(bytes([_MODEL_VERSION]))
        for arr in params.arrays():
            fh.write(bytes([arr.ndim]))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise ModelFormatError("truncated model file")
    return buf


def load_model(path: str | Path) -> NetworkParams:
    with Path(path).open("rb") as fh:
        if fh.read(len(_MODEL_MAGIC)) != _MODEL_MAGIC:
            raise ModelFormatError("not a model file (bad magic bytes)")
        version = fh.read(1)
        if len(version) != 1:
            raise ModelFormatError("truncated model file")
        if version[0] != _MODEL_VERSION:
            raise ModelFormatError(
                f"model version {version[0]} not supported (expected {_MODEL_VERSION})"
            )
        template = init_params(0)
        arrays = []
        for expected in template.arrays():
            rank = _read_exact(fh, 1)[0]
            dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank))
            if dims != expected.shape:
                raise ModelFormatError(
                    f"unexpected array shape {dims}, wanted {expected.shape}"
                )
            raw = _read_exact(fh, int(np.prod(dims)) * 8)
            arrays.append(np.frombuffer(raw, dtype="<f8").reshape(dims).copy())
        if fh.read(1):
            raise ModelFormatError("trailing bytes after model data")
    n_streams = len(STREAM_WIDTHS)
    kernels = tuple(arrays[2 * i] for i in range(n_streams))
    biases = tuple(arrays[2 * i + 1] for i in range(n_streams))
    return NetworkParams(
        stream_kernels=kernels,
        stream_biases=biases,
        fc_weight=arrays[2 * n_streams],
        fc_bias=arrays[2 * n_streams + 1],
    )
