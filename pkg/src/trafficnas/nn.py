"""Numpy 1D-CNN engine: layers with hand-written backward passes, Adam, training loop.

Tensors are channels-last: ``(batch, length, channels)`` inside the block
stack and ``(batch, features)`` in the head.
"""
from __future__ import annotations

import copy
import logging
import math
import struct
from dataclasses import dataclass, field
from itertools import count
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .cost import out_len
from .space import Genome, validate

logger = logging.getLogger(__name__)

BN_EPS = 1e-5
BN_MOMENTUM = 0.9
WEIGHTS_MAGIC = b"TSW1"


class EngineError(Exception):
    pass


class ShapeMismatch(EngineError):
    pass


class StaleCache(EngineError):
    pass


class EmptySplit(EngineError):
    pass


def glorot_uniform(rng, shape, fan_in, fan_out, dtype):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Conv1D:
    def __init__(self, in_ch, filters, kernel, stride, padding, rng, dtype):
        self.in_ch, self.filters, self.kernel = in_ch, filters, kernel
        self.stride, self.padding = stride, padding
        self.W = glorot_uniform(rng, (kernel, in_ch, filters), kernel * in_ch, kernel * filters, dtype)
        self.b = np.zeros(filters, dtype=dtype)

    def arrays(self):
        return [self.W, self.b]

    def trainable(self):
        return [self.W, self.b]

    def pads(self, length):
        l_out = out_len(length, self.kernel, self.stride, self.padding)
        if self.padding == "valid":
            return l_out, 0, 0
        total = max((l_out - 1) * self.stride + self.kernel - length, 0)
        return l_out, total // 2, total - total // 2

    def forward(self, x, train, rng):
        n, length, c = x.shape
        if c != self.in_ch:
            raise ShapeMismatch(f"conv expects {self.in_ch} channels, got {c}")
        l_out, left, right = self.pads(length)
        xp = np.pad(x, ((0, 0), (left, right), (0, 0))) if left or right else x
        win = sliding_window_view(xp, self.kernel, axis=1)[:, ::self.stride][:, :l_out]
        cols = win.transpose(0, 1, 3, 2).reshape(n * l_out, self.kernel * c)
        y = cols @ self.W.reshape(self.kernel * c, self.filters) + self.b
        return y.reshape(n, l_out, self.filters), (x.shape, xp.shape, left, cols)

    def backward(self, dy, cache):
        (n, length, c), padded_shape, left, cols = cache
        l_out = dy.shape[1]
        dyf = dy.reshape(n * l_out, self.filters)
        dW = (cols.T @ dyf).reshape(self.W.shape)
        db = dyf.sum(axis=0)
        dcols = (dyf @ self.W.reshape(self.kernel * c, self.filters).T).reshape(n, l_out, self.kernel, c)
        dxp = np.zeros(padded_shape, dtype=dy.dtype)
        span = self.stride * (l_out - 1) + 1
        for j in range(self.kernel):
            dxp[:, j:j + span:self.stride] += dcols[:, :, j]
        return dxp[:, left:left + length], [dW, db]


class BatchNorm:
    def __init__(self, channels, dtype):
        self.gamma = np.ones(channels, dtype=dtype)
        self.beta = np.zeros(channels, dtype=dtype)
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)

    def arrays(self):
        return [self.gamma, self.beta, self.mean, self.var]

    def trainable(self):
        return [self.gamma, self.beta]

    def forward(self, x, train, rng):
        if not train:
            inv = 1.0 / np.sqrt(self.var + BN_EPS)
            return (x - self.mean) * (inv * self.gamma) + self.beta, None
        flat = x.reshape(-1, x.shape[-1])
        ones = np.ones(len(flat), dtype=x.dtype)
        mu = (ones @ flat) / len(flat)
        centered = flat - mu
        var = (ones @ (centered * centered)) / len(flat)
        inv = 1.0 / np.sqrt(var + BN_EPS)
        xhat = centered * inv
        self.mean *= BN_MOMENTUM
        self.mean += (1 - BN_MOMENTUM) * mu
        self.var *= BN_MOMENTUM
        self.var += (1 - BN_MOMENTUM) * var
        y = xhat * self.gamma + self.beta
        return y.reshape(x.shape), (xhat, inv, ones)

    def backward(self, dy, cache):
        xhat, inv, ones = cache
        dyf = dy.reshape(xhat.shape)
        m = len(xhat)
        dgamma = ones @ (dyf * xhat)
        dbeta = ones @ dyf
        dx = (inv * self.gamma / m) * (m * dyf - dbeta - xhat * dgamma)
        return dx.reshape(dy.shape), [dgamma, dbeta]


class ReLU:
    def arrays(self):
        return []

    trainable = arrays

    def forward(self, x, train, rng):
        mask = x > 0
        return x * mask, mask

    def backward(self, dy, mask):
        return dy * mask, []


class Pool1D:
    """Non-overlapping max or average pooling; a trailing remainder is dropped."""

    def __init__(self, kind, size):
        self.kind, self.size = kind, size

    def arrays(self):
        return []

    trainable = arrays

    def forward(self, x, train, rng):
        n, length, c = x.shape
        l_out = length // self.size
        xr = x[:, :l_out * self.size].reshape(n, l_out, self.size, c)
        if self.kind == "avg":
            return xr.mean(axis=2), (x.shape, None)
        y = xr[:, :, 0].copy()
        for j in range(1, self.size):
            np.maximum(y, xr[:, :, j], out=y)
        return y, (x.shape, (xr, y))

    def backward(self, dy, cache):
        shape, saved = cache
        n, length, c = shape
        l_out = dy.shape[1]
        dx = np.zeros(shape, dtype=dy.dtype)
        dxr = dx[:, :l_out * self.size].reshape(n, l_out, self.size, c)
        if self.kind == "avg":
            dxr += (dy / self.size)[:, :, None, :]
            return dx, []
        xr, y = saved
        # route each output gradient to the first window position holding the max
        free = np.ones(y.shape, dtype=bool)
        for j in range(self.size):
            hit = free & (xr[:, :, j] == y)
            dxr[:, :, j] = dy * hit
            free &= ~hit
        return dx, []


class Dropout:
    def __init__(self, rate):
        self.rate = rate

    def arrays(self):
        return []

    trainable = arrays

    def forward(self, x, train, rng):
        if not train or self.rate == 0:
            return x, None
        mask = (rng.random(x.shape) >= self.rate).astype(x.dtype) / (1.0 - self.rate)
        return x * mask, mask

    def backward(self, dy, mask):
        return (dy if mask is None else dy * mask), []


class GlobalAvgPool:
    def arrays(self):
        return []

    trainable = arrays

    def forward(self, x, train, rng):
        return x.mean(axis=1), x.shape

    def backward(self, dy, shape):
        return np.broadcast_to(dy[:, None, :] / shape[1], shape).copy(), []


class Flatten:
    def arrays(self):
        return []

    trainable = arrays

    def forward(self, x, train, rng):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dy, shape):
        return dy.reshape(shape), []


class Dense:
    def __init__(self, n_in, n_out, rng, dtype):
        self.W = glorot_uniform(rng, (n_in, n_out), n_in, n_out, dtype)
        self.b = np.zeros(n_out, dtype=dtype)

    def arrays(self):
        return [self.W, self.b]

    def trainable(self):
        return [self.W, self.b]

    def forward(self, x, train, rng):
        if x.shape[1] != self.W.shape[0]:
            raise ShapeMismatch(f"dense expects {self.W.shape[0]} features, got {x.shape[1]}")
        return x @ self.W + self.b, x

    def backward(self, dy, x):
        return dy @ self.W.T, [x.T @ dy, dy.sum(axis=0)]


@dataclass
class ForwardCache:
    token: int
    train: bool
    layer_caches: list
    max_activation: int


_tokens = count(1)


class Network:
    """A genome instantiated with weights; ``arrays()`` follows the stored-parameter order."""

    def __init__(self, genome: Genome, seed=0, dtype=np.float32, input_len: int = 784):
        validate(genome, input_len)
        self.genome = genome
        self.input_len = input_len
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        layers = []
        length, channels = input_len, 1
        for b in genome.blocks:
            conv = Conv1D(channels, b.filters, b.kernel, b.stride, b.padding, rng, self.dtype)
            layers += [conv, BatchNorm(b.filters, self.dtype), ReLU()]
            length, channels = out_len(length, b.kernel, b.stride, b.padding), b.filters
            if b.pool != "none":
                layers.append(Pool1D(b.pool, b.pool_size))
                length //= b.pool_size
            if b.dropout > 0:
                layers.append(Dropout(b.dropout))
        if genome.head.pooling == "global_avg":
            layers.append(GlobalAvgPool())
            features = channels
        else:
            layers.append(Flatten())
            features = length * channels
        if genome.head.dense_units:
            layers += [Dense(features, genome.head.dense_units, rng, self.dtype), ReLU()]
            features = genome.head.dense_units
        layers.append(Dense(features, genome.head.num_classes, rng, self.dtype))
        self.layers = layers
        self._last_train_token = None

    @property
    def num_classes(self) -> int:
        return self.genome.head.num_classes

    def arrays(self) -> list[np.ndarray]:
        return [a for layer in self.layers for a in layer.arrays()]

    def trainable(self) -> list[np.ndarray]:
        return [a for layer in self.layers for a in layer.trainable()]

    def get_weights(self) -> list[np.ndarray]:
        return [a.copy() for a in self.arrays()]

    def set_weights(self, weights: Sequence[np.ndarray]) -> None:
        arrays = self.arrays()
        if len(weights) != len(arrays):
            raise ShapeMismatch(f"expected {len(arrays)} arrays, got {len(weights)}")
        for dst, src in zip(arrays, weights):
            src = np.asarray(src)
            if src.size != dst.size:
                raise ShapeMismatch(f"array of {src.size} values where {dst.size} expected")
            dst[...] = src.reshape(dst.shape)

    def _as_batch(self, batch) -> np.ndarray:
        x = np.asarray(batch, dtype=self.dtype)
        if x.ndim == 2:
            x = x[:, :, None]
        if x.ndim != 3 or x.shape[1:] != (self.input_len, 1):
            raise ShapeMismatch(f"batch must be (n, {self.input_len}[, 1]), got {np.shape(batch)}")
        return x

    def forward(self, batch, mode: str = "infer", rng: Optional[np.random.Generator] = None):
        """Return ``(logits, cache)``; ``mode`` is ``"train"`` or ``"infer"``."""
        if mode not in ("train", "infer"):
            raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
        train = mode == "train"
        if train and rng is None:
            rng = np.random.default_rng(0)
        x = self._as_batch(batch)
        n = x.shape[0]
        caches = []
        largest = x[0].size if n else self.input_len
        for layer in self.layers:
            x, c = layer.forward(x, train, rng)
            caches.append(c)
            largest = max(largest, x.size // max(n, 1))
        token = next(_tokens)
        if train:
            self._last_train_token = token
        return x, ForwardCache(token, train, caches, largest)

    def backward(self, cache: ForwardCache, dlogits) -> list[np.ndarray]:
        """Gradients aligned with :meth:`trainable`."""
        if not cache.train or cache.token != self._last_train_token:
            raise StaleCache("backward needs the cache of the latest train-mode forward")
        dy = np.asarray(dlogits, dtype=self.dtype)
        grads = []
        for layer, c in zip(reversed(self.layers), reversed(cache.layer_caches)):
            dy, g = layer.backward(dy, c)
            grads.append(g)
        return [g for layer_grads in reversed(grads) for g in layer_grads]

    def logits(self, samples, batch_size: int = 512) -> np.ndarray:
        x = self._as_batch(samples)
        out = [self.forward(x[i:i + batch_size], "infer")[0] for i in range(0, len(x), batch_size)]
        if not out:
            return np.zeros((0, self.num_classes), dtype=self.dtype)
        return np.concatenate(out)

    def predict(self, samples, batch_size: int = 512) -> np.ndarray:
        return predict_from_logits(self.logits(samples, batch_size))

    def evaluate(self, samples, labels, batch_size: int = 512) -> tuple[float, float]:
        logits = self.logits(samples, batch_size)
        loss, _ = loss_softmax_xent(logits.astype(np.float64), labels)
        acc = float(np.mean(predict_from_logits(logits) == np.asarray(labels)))
        return loss, acc


def predict_from_logits(logits) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. ties go to the lowest class index
    return np.argmax(np.asarray(logits), axis=1)


def loss_softmax_xent(logits, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy of softmax(logits) and its gradient w.r.t. the logits."""
    logits = np.asarray(logits)
    labels = np.asarray(labels, dtype=np.int64)
    n = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    loss = float(-log_p[np.arange(n), labels].mean())
    dlogits = np.exp(log_p)
    dlogits[np.arange(n), labels] -= 1
    return loss, dlogits / n


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, weights) -> "AdamState":
        return cls([np.zeros_like(w) for w in weights], [np.zeros_like(w) for w in weights])


def adam_step(weights: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState, lr: float):
    """In-place bias-corrected Adam update; returns ``(weights, state)``."""
    if len(weights) != len(state.m):
        raise ShapeMismatch("optimizer state does not match the weights")
    state.t += 1
    c1 = 1 - state.beta1 ** state.t
    c2 = 1 - state.beta2 ** state.t
    for w, g, m, v in zip(weights, grads, state.m, state.v):
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * (g * g)
        w -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(w.dtype)
    return weights, state


@dataclass
class TrainConfig:
    max_epochs: int = 100
    lr0: float = 1e-3
    batch_size: int = 128
    plateau_factor: float = 0.1
    plateau_patience: int = 10
    min_lr: float = 1e-6
    early_stop_patience: int = 15
    min_delta: float = 1e-4
    multi_start: int = 5
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.plateau_factor < 1:
            raise ValueError("plateau_factor must lie in (0, 1)")
        if self.plateau_patience < 1 or self.early_stop_patience < 1:
            raise ValueError("patience values must be >= 1")
        if self.multi_start < 1 or self.max_epochs < 1 or self.batch_size < 1:
            raise ValueError("multi_start, max_epochs and batch_size must be >= 1")


class ReduceLROnPlateau:
    def __init__(self, lr, factor=0.1, patience=10, min_lr=1e-6, min_delta=1e-4):
        self.lr, self.factor, self.patience = lr, factor, patience
        self.min_lr, self.min_delta = min_lr, min_delta
        self.best = math.inf
        self.wait = 0

    def step(self, val_loss: float) -> float:
        if val_loss < self.best - self.min_delta:
            self.best = val_loss
            self.wait = 0
        else:
            self.wait += 1
            if self.wait >= self.patience:
                self.lr = max(self.lr * self.factor, self.min_lr)
                self.wait = 0
        return self.lr


class EarlyStopping:
    def __init__(self, patience=15, min_delta=1e-4):
        self.patience, self.min_delta = patience, min_delta
        self.best = math.inf
        self.wait = 0

    def step(self, val_loss: float) -> bool:
        """Record one epoch; True when it is the new best."""
        if val_loss < self.best - self.min_delta:
            self.best = val_loss
            self.wait = 0
            return True
        self.wait += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.wait >= self.patience


@dataclass
class TrainOutcome:
    best_weights: list
    best_val_accuracy: float
    best_val_loss: float
    epochs_run: int
    lr_schedule_log: list = field(default_factory=list)
    history: list = field(default_factory=list)
    seed: int = 0


def train(net: Network, train_set, val_set, cfg: TrainConfig, seed: Optional[int] = None,
          on_epoch: Optional[Callable[[dict], None]] = None) -> TrainOutcome:
    """Mini-batch Adam with plateau LR reduction and early stopping on validation loss.

    ``train_set`` and ``val_set`` are ``(samples, labels)`` pairs. The network
    is left holding the weights of the epoch with the lowest validation loss.
    """
    x_tr, y_tr = train_set
    x_val, y_val = val_set
    if len(y_tr) == 0 or len(y_val) == 0:
        raise EmptySplit("training and validation sets must be non-empty")
    x_tr = net._as_batch(x_tr)
    y_tr = np.asarray(y_tr, dtype=np.int64)
    seed = cfg.seed if seed is None else seed
    shuffle_rng, dropout_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))

    params = net.trainable()
    opt = AdamState.zeros_like(params)
    plateau = ReduceLROnPlateau(cfg.lr0, cfg.plateau_factor, cfg.plateau_patience, cfg.min_lr, cfg.min_delta)
    stopper = EarlyStopping(cfg.early_stop_patience, cfg.min_delta)
    lr = cfg.lr0
    best_weights, best_acc, best_loss = net.get_weights(), 0.0, math.inf
    history, lr_log = [], []
    epoch = 0
    for epoch in range(1, cfg.max_epochs + 1):
        order = shuffle_rng.permutation(len(y_tr))
        total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            logits, cache = net.forward(x_tr[idx], "train", dropout_rng)
            loss, dlogits = loss_softmax_xent(logits, y_tr[idx])
            grads = net.backward(cache, dlogits)
            adam_step(params, grads, opt, lr)
            total += loss * len(idx)
        train_loss = total / len(y_tr)
        val_loss, val_acc = net.evaluate(x_val, y_val)
        if not math.isfinite(val_loss):
            val_loss = math.inf
        record = {"epoch": epoch, "lr": lr, "train_loss": train_loss,
                  "val_loss": val_loss, "val_acc": val_acc}
        history.append(record)
        lr_log.append((epoch, lr))
        logger.debug("epoch=%d lr=%.3g train_loss=%.5f val_loss=%.5f val_acc=%.4f",
                     epoch, lr, train_loss, val_loss, val_acc)
        if on_epoch is not None:
            on_epoch(record)
        if stopper.step(val_loss):
            best_weights, best_acc, best_loss = net.get_weights(), val_acc, val_loss
        lr = plateau.step(val_loss)
        if stopper.should_stop:
            break
    net.set_weights(best_weights)
    return TrainOutcome(best_weights, best_acc, best_loss, epoch, lr_log, history, seed)


def format_epoch(record: dict) -> str:
    return (f"epoch={record['epoch']} lr={record['lr']:.3g} train_loss={record['train_loss']:.5f} "
            f"val_loss={record['val_loss']:.5f} val_acc={record['val_acc']:.4f}")


def multi_start_train(genome: Genome, splits, cfg: TrainConfig, seed: Optional[int] = None,
                      dtype=np.float32, input_len: int = 784):
    """Train ``cfg.multi_start`` times from seeds ``seed + i``; keep the best by validation.

    Ranking: higher validation accuracy, then lower validation loss, then lower
    start index. Returns ``(network, outcome)``.
    """
    train_set, val_set = splits[0], splits[1]
    base = cfg.seed if seed is None else seed
    best = None
    for i in range(cfg.multi_start):
        net = Network(genome, seed=base + i, dtype=dtype, input_len=input_len)
        outcome = train(net, train_set, val_set, cfg, seed=base + i)
        key = (-outcome.best_val_accuracy, outcome.best_val_loss)
        if best is None or key < best[0]:
            best = (key, net, outcome)
    return best[1], best[2]


def save_model(path, net: Network) -> None:
    out = bytearray(net.genome.to_text().encode())
    arrays = net.arrays()
    out += WEIGHTS_MAGIC + struct.pack("<I", len(arrays))
    for a in arrays:
        out += struct.pack("<I", a.size) + np.ascontiguousarray(a, dtype="<f4").tobytes()
    Path(path).write_bytes(bytes(out))


def load_model(path, input_len: int = 784) -> Network:
    raw = Path(path).read_bytes()
    cut = raw.find(WEIGHTS_MAGIC)
    if cut < 0:
        raise EngineError(f"{path}: no weights section")
    genome = Genome.from_text(raw[:cut].decode())
    net = Network(genome, seed=0, input_len=input_len)
    pos = cut + len(WEIGHTS_MAGIC)
    (n_arrays,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    weights = []
    for _ in range(n_arrays):
        (size,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        weights.append(np.frombuffer(raw, dtype="<f4", count=size, offset=pos).copy())
        pos += 4 * size
    if pos != len(raw):
        raise EngineError(f"{path}: {len(raw) - pos} trailing bytes after the weights")
    net.set_weights(weights)
    return net


def clone(net: Network) -> Network:
    return copy.deepcopy(net)
