"""Anomaly-score classifier: average pool, then FC layers with batch norm, ReLU and dropout, then sigmoid.

The network is written out by hand with an explicit forward tape and a
matching reverse pass; there is no general autodiff here.

Hidden layer k computes ``dropout(relu(bn(a @ W_k + b_k)))``; the output
layer is ``sigmoid(a @ W_L + b_L)``. Inputs may carry leading group axes,
``(..., B, D)``; batch-norm statistics are always taken over axis ``-2``, so
a stack of bags ``(n_bags, 49, D)`` is normalised bag by bag.
"""
from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BadMagicError,
    FormatError,
    NumericalError,
    ShapeError,
    TruncatedPayloadError,
    UnsupportedVersionError,
)
from .kernels import pool_cells

DEFAULT_WIDTHS = (528, 512, 256, 128, 32, 1)
BN_EPS = 1e-5
VAR_FLOOR = 1e-5

CKPT_MAGIC = b"MILC"
CKPT_VERSION = 1
BN_BATCH_PER_BAG = 0


class Mode(enum.Enum):
    TRAIN = "train"
    EVAL = "eval"


def _f32(x) -> float:
    return float(np.float32(x))


@dataclass
class ClassifierParams:
    widths: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    gammas: list[np.ndarray]
    betas: list[np.ndarray]
    running_means: list[np.ndarray]
    running_vars: list[np.ndarray]
    dropout: float = 0.6
    bn_momentum: float = 0.1
    bn_batch: int = BN_BATCH_PER_BAG

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        # Scalars live in the checkpoint as float32; keep them representable so saves are stable.
        self.dropout = _f32(self.dropout)
        self.bn_momentum = _f32(self.bn_momentum)
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        _check_widths(self.widths)
        L = len(self.widths) - 1
        if len(self.weights) != L or len(self.biases) != L:
            raise ShapeError(f"expected {L} weight/bias pairs")
        for k in range(L):
            if self.weights[k].shape != (self.widths[k], self.widths[k + 1]):
                raise ShapeError(f"W_{k + 1} has shape {self.weights[k].shape}, "
                                 f"expected {(self.widths[k], self.widths[k + 1])}")
            if self.biases[k].shape != (self.widths[k + 1],):
                raise ShapeError(f"b_{k + 1} has shape {self.biases[k].shape}")
        for name in ("gammas", "betas", "running_means", "running_vars"):
            arrs = getattr(self, name)
            if len(arrs) != L - 1 or any(a.shape != (self.widths[k + 1],) for k, a in enumerate(arrs)):
                raise ShapeError(f"{name} do not match hidden widths {self.widths[1:-1]}")

    @property
    def n_hidden(self) -> int:
        return len(self.widths) - 2

    @property
    def dtype(self):
        return self.weights[0].dtype

    def arrays(self) -> list[np.ndarray]:
        """Every array in checkpoint order: per hidden layer W, b, gamma, beta, mean, var; then W_L, b_L."""
        out = []
        for k in range(self.n_hidden):
            out += [self.weights[k], self.biases[k], self.gammas[k], self.betas[k],
                    self.running_means[k], self.running_vars[k]]
        return out + [self.weights[-1], self.biases[-1]]

    def trainable(self) -> list[np.ndarray]:
        """Trainable arrays, in the same order as :meth:`Gradients.arrays`."""
        out = []
        for k in range(self.n_hidden):
            out += [self.weights[k], self.biases[k], self.gammas[k], self.betas[k]]
        return out + [self.weights[-1], self.biases[-1]]

    def astype(self, dtype) -> "ClassifierParams":
        conv = lambda xs: [np.array(x, dtype=dtype) for x in xs]  # noqa: E731
        return ClassifierParams(self.widths, conv(self.weights), conv(self.biases), conv(self.gammas),
                                conv(self.betas), conv(self.running_means), conv(self.running_vars),
                                self.dropout, self.bn_momentum, self.bn_batch)

    def copy(self) -> "ClassifierParams":
        return self.astype(self.dtype)


@dataclass
class Gradients:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    gammas: list[np.ndarray]
    betas: list[np.ndarray]

    def arrays(self) -> list[np.ndarray]:
        out = []
        for k in range(len(self.gammas)):
            out += [self.weights[k], self.biases[k], self.gammas[k], self.betas[k]]
        return out + [self.weights[-1], self.biases[-1]]


@dataclass
class _LayerRecord:
    inputs: np.ndarray
    xhat: np.ndarray
    inv_std: np.ndarray
    active: np.ndarray
    mask: np.ndarray | None


@dataclass
class ForwardTape:
    params: ClassifierParams
    mode: Mode
    layers: list[_LayerRecord] = field(default_factory=list)
    last_input: np.ndarray | None = None
    logits: np.ndarray | None = None
    scores: np.ndarray | None = None
    consumed: bool = False


def _check_widths(widths):
    if len(widths) < 2 or any(w <= 0 for w in widths):
        raise ShapeError(f"invalid layer widths {widths}")
    if widths[-1] != 1:
        raise ShapeError(f"last width must be 1, got {widths[-1]}")


def init(seed: int, widths=DEFAULT_WIDTHS, p: float = 0.6, bn_momentum: float = 0.1,
         dtype=np.float32) -> ClassifierParams:
    """Xavier-uniform weights, zero biases, identity batch norm. Pure function of ``seed``."""
    widths = tuple(int(w) for w in widths)
    _check_widths(widths)
    rng = np.random.Generator(np.random.PCG64(seed))
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype))
        biases.append(np.zeros(fan_out, dtype=dtype))
    hidden = widths[1:-1]
    return ClassifierParams(
        widths, weights, biases,
        [np.ones(w, dtype=dtype) for w in hidden],
        [np.zeros(w, dtype=dtype) for w in hidden],
        [np.zeros(w, dtype=dtype) for w in hidden],
        [np.ones(w, dtype=dtype) for w in hidden],
        p, bn_momentum,
    )


def zero_params(widths=DEFAULT_WIDTHS, p: float = 0.6, dtype=np.float32) -> ClassifierParams:
    """All weights and biases zero; every EVAL score is exactly 0.5."""
    params = init(0, widths, p, dtype=dtype)
    for w in params.weights:
        w[...] = 0
    return params


def pool(instance_data: np.ndarray) -> np.ndarray:
    """3D average pool of one (C, T, h, w) instance to a length-C vector."""
    if instance_data.ndim != 4 or min(instance_data.shape) <= 0:
        raise ShapeError(f"instance must be a non-empty rank-4 tensor, got {instance_data.shape}")
    C, T, h, w = instance_data.shape
    return instance_data.reshape(C, -1).astype(np.float64).mean(axis=1)


def pool_backward(grad: np.ndarray, shape) -> np.ndarray:
    """Input gradient of :func:`pool` given the gradient of its output."""
    C, T, h, w = shape
    g = np.asarray(grad, dtype=np.float64) / (T * h * w)
    return np.broadcast_to(g[:, None, None, None], shape).copy()


def pool_cuboid(data: np.ndarray, cell_size: int) -> np.ndarray:
    """Pool every spatial cell of a (C, T, H, W) cuboid at once; returns (n_cells, C) float64.

    Equals ``[pool(i.data) for i in split_cuboid(...)]`` without materialising the instances.
    """
    if data.shape[2] % cell_size or data.shape[3] % cell_size:
        raise ShapeError(f"spatial dims {data.shape[2:]} not divisible by cell_size {cell_size}")
    return pool_cells(data, cell_size)


def _affine(a, W, b):
    # One 2-D GEMM over all leading axes; stacked matmul is markedly slower.
    # Non-finite results are reported by the caller with the layer index.
    with np.errstate(invalid="ignore", over="ignore"):
        out = a.reshape(-1, a.shape[-1]) @ W
        out += b
    return out.reshape(a.shape[:-1] + (W.shape[1],))


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def forward(params: ClassifierParams, x: np.ndarray, mode: Mode = Mode.EVAL, rng=None):
    """Score a batch. Returns ``(scores, tape)``; scores have the shape of ``x`` minus the last axis.

    TRAIN mode uses batch statistics, updates the running statistics in place
    and draws inverted-dropout masks from ``rng`` (required when dropout > 0).
    EVAL mode is deterministic and leaves ``params`` untouched.
    """
    dtype = params.dtype
    x = np.asarray(x, dtype=dtype)
    if x.ndim < 2 or x.shape[-1] != params.widths[0]:
        raise ShapeError(f"input shape {x.shape} does not end in width {params.widths[0]}")
    train = mode is Mode.TRAIN
    B = x.shape[-2]
    if train and B < 2:
        raise ShapeError("TRAIN mode needs at least 2 rows per batch-norm group")
    p = params.dropout
    if train and p > 0 and rng is None:
        raise ValueError("TRAIN mode with dropout needs an rng")

    tape = ForwardTape(params, mode)
    a = x
    eps = dtype.type(BN_EPS)
    for k in range(params.n_hidden):
        z = _affine(a, params.weights[k], params.biases[k])
        if not np.isfinite(z).all():
            # Checked before the running statistics are touched.
            raise NumericalError(f"non-finite pre-activation in hidden layer {k + 1}")
        if train:
            mu = z.mean(axis=-2, keepdims=True)
            var = z.var(axis=-2, keepdims=True)
            inv_std = 1.0 / np.sqrt(var + eps)
            m = params.bn_momentum
            w = z.shape[-1]
            batch_mu = mu.reshape(-1, w).mean(axis=0)
            batch_var = var.reshape(-1, w).mean(axis=0) * (B / (B - 1))
            params.running_means[k][...] = (1 - m) * params.running_means[k] + m * batch_mu
            params.running_vars[k][...] = np.maximum(
                (1 - m) * params.running_vars[k] + m * batch_var, VAR_FLOOR)
        else:
            mu = params.running_means[k]
            inv_std = 1.0 / np.sqrt(params.running_vars[k] + eps)
        xhat = (z - mu) * inv_std
        y = params.gammas[k] * xhat + params.betas[k]
        active = y > 0
        h = np.maximum(y, dtype.type(0))
        mask = None
        if train and p > 0:
            keep = rng.random(h.shape, dtype=dtype) >= p
            mask = keep.astype(dtype) / dtype.type(1 - p)
            h = h * mask
        if not np.isfinite(h).all():
            raise NumericalError(f"non-finite activation in hidden layer {k + 1}")
        tape.layers.append(_LayerRecord(a, xhat, inv_std, active, mask))
        a = h
    logits = _affine(a, params.weights[-1], params.biases[-1])[..., 0]
    if not np.isfinite(logits).all():
        raise NumericalError(f"non-finite logit in output layer {params.n_hidden + 1}")
    fi = np.finfo(dtype)
    scores = np.clip(_sigmoid(logits), fi.tiny, 1 - fi.epsneg)
    tape.last_input = a
    tape.logits = logits
    tape.scores = scores
    return scores, tape


def backward(tape: ForwardTape, upstream: np.ndarray, input_grad: bool = True):
    """Reverse pass for one tape: gradients of ``sum(upstream * scores)``.

    Returns ``(Gradients, input_grad)``; the input gradient is None when
    ``input_grad`` is False (saves the widest GEMM during training). A tape
    can be consumed only once.
    """
    if tape.consumed:
        raise RuntimeError("forward tape already consumed by a backward pass")
    tape.consumed = True
    params = tape.params
    dtype = params.dtype
    s = tape.scores
    g = np.asarray(upstream, dtype=dtype)
    if g.shape != s.shape:
        raise ShapeError(f"upstream gradient shape {g.shape} != scores shape {s.shape}")
    dlogit = g * s * (1 - s)
    L = len(params.weights)
    dW = [None] * L
    db = [None] * L
    dgamma = [None] * params.n_hidden
    dbeta = [None] * params.n_hidden

    a = tape.last_input
    flat = dlogit.reshape(-1)
    dW[-1] = (a.reshape(-1, a.shape[-1]).T @ flat)[:, None]
    db[-1] = np.array([flat.sum()], dtype=dtype)
    da = dlogit[..., None] * params.weights[-1][:, 0]

    train = tape.mode is Mode.TRAIN
    for k in reversed(range(params.n_hidden)):
        rec = tape.layers[k]
        dh = da if rec.mask is None else da * rec.mask
        dy = dh * rec.active
        w = dy.shape[-1]
        dgamma[k] = (dy * rec.xhat).reshape(-1, w).sum(axis=0)
        dbeta[k] = dy.reshape(-1, w).sum(axis=0)
        dxhat = dy * params.gammas[k]
        if train:
            n = dxhat.shape[-2]
            dz = (rec.inv_std / n) * (
                n * dxhat
                - dxhat.sum(axis=-2, keepdims=True)
                - rec.xhat * (dxhat * rec.xhat).sum(axis=-2, keepdims=True)
            )
        else:
            dz = dxhat * rec.inv_std
        a = rec.inputs
        dW[k] = a.reshape(-1, a.shape[-1]).T @ dz.reshape(-1, w)
        db[k] = dz.reshape(-1, w).sum(axis=0)
        if k > 0 or input_grad:
            da = (dz.reshape(-1, w) @ params.weights[k].T).reshape(a.shape)
        else:
            da = None
    return Gradients(dW, db, dgamma, dbeta), da


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(params: ClassifierParams, path) -> None:
    n = len(params.widths)
    header = struct.pack(f"<4sII{n}IffI", CKPT_MAGIC, CKPT_VERSION, n, *params.widths,
                         params.dropout, params.bn_momentum, params.bn_batch)
    with open(path, "wb") as fh:
        fh.write(header)
        for arr in params.arrays():
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path, expected_widths=None) -> ClassifierParams:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != CKPT_MAGIC:
        raise BadMagicError(f"{path}: bad magic {raw[:4]!r}, expected {CKPT_MAGIC!r}")
    if len(raw) < 12:
        raise TruncatedPayloadError(f"{path}: truncated checkpoint header")
    version, n = struct.unpack_from("<II", raw, 4)
    if version != CKPT_VERSION:
        raise UnsupportedVersionError(f"{path}: unsupported checkpoint version {version}")
    if not 2 <= n <= 64:
        raise FormatError(f"{path}: implausible layer count {n}")
    fmt = f"<{n}IffI"
    off = 12
    if len(raw) < off + struct.calcsize(fmt):
        raise TruncatedPayloadError(f"{path}: truncated checkpoint header")
    *widths, p, momentum, bn_batch = struct.unpack_from(fmt, raw, off)
    off += struct.calcsize(fmt)
    widths = tuple(widths)
    if expected_widths is not None and tuple(expected_widths) != widths:
        raise ShapeError(f"{path}: checkpoint widths {widths} != expected {tuple(expected_widths)}")
    _check_widths(widths)
    shapes = []
    for k in range(len(widths) - 2):
        w = widths[k + 1]
        shapes += [(widths[k], w), (w,), (w,), (w,), (w,), (w,)]
    shapes += [(widths[-2], 1), (1,)]
    need = sum(int(np.prod(s)) for s in shapes) * 4
    if len(raw) - off < need:
        raise TruncatedPayloadError(f"{path}: payload has {len(raw) - off} bytes, widths {widths} need {need}")
    if len(raw) - off > need:
        raise FormatError(f"{path}: {len(raw) - off - need} trailing bytes")
    arrays = []
    for s in shapes:
        cnt = int(np.prod(s))
        arrays.append(np.frombuffer(raw, dtype="<f4", count=cnt, offset=off).reshape(s).astype(np.float32))
        off += cnt * 4
    hidden = len(widths) - 2
    pick = lambda j: [arrays[6 * k + j] for k in range(hidden)]  # noqa: E731
    return ClassifierParams(
        widths,
        pick(0) + [arrays[-2]],
        pick(1) + [arrays[-1]],
        pick(2), pick(3), pick(4), pick(5),
        p, momentum, bn_batch,
    )
