"""Numpy classifiers with exact gradients: softmax regression and a ReLU MLP.

Parameter layout (row-major, concatenated):

* ``logreg``: W (input x classes), b (classes)
* ``mlp``: W1 (input x hidden), b1 (hidden), W2 (hidden x classes), b2 (classes)

The layout id is ``"<kind>:<input>:<hidden>:<classes>"`` with hidden = 0 for
``logreg``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .params import LayoutMismatchError, ParamVector

DEFAULT_HIDDEN = 64
DEFAULT_LR = 0.01
DEFAULT_BATCH_SIZE = 32


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    input_dim: int
    num_classes: int
    hidden_dim: int = 0
    init_seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in ("logreg", "mlp"):
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.kind == "mlp" and self.hidden_dim == 0:
            object.__setattr__(self, "hidden_dim", DEFAULT_HIDDEN)
        if self.kind == "logreg":
            object.__setattr__(self, "hidden_dim", 0)
        if self.input_dim <= 0 or self.num_classes <= 0 or (self.kind == "mlp" and self.hidden_dim <= 0):
            raise ValueError("model dimensions must be positive")

    @property
    def layout_id(self) -> str:
        return f"{self.kind}:{self.input_dim}:{self.hidden_dim}:{self.num_classes}"

    @property
    def shapes(self) -> list[tuple[int, ...]]:
        d, h, c = self.input_dim, self.hidden_dim, self.num_classes
        if self.kind == "logreg":
            return [(d, c), (c,)]
        return [(d, h), (h,), (h, c), (c,)]

    @property
    def num_params(self) -> int:
        return sum(int(np.prod(s)) for s in self.shapes)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "input_dim": self.input_dim, "num_classes": self.num_classes,
                "hidden_dim": self.hidden_dim, "init_seed": self.init_seed}

    @classmethod
    def from_dict(cls, d: dict) -> ModelSpec:
        return cls(d["kind"], int(d["input_dim"]), int(d["num_classes"]),
                   int(d.get("hidden_dim", 0)), int(d.get("init_seed", 0)))


@dataclass(frozen=True)
class TrainConfig:
    local_epochs: int = 1
    batch_size: int = DEFAULT_BATCH_SIZE
    learning_rate: float = DEFAULT_LR
    shuffle_seed: int = 0

    def __post_init__(self) -> None:
        if self.local_epochs < 1 or self.batch_size < 1 or not self.learning_rate >= 0:
            raise ValueError("local_epochs and batch_size must be positive, learning_rate nonnegative")

    def to_dict(self) -> dict:
        return {"local_epochs": self.local_epochs, "batch_size": self.batch_size,
                "learning_rate": self.learning_rate, "shuffle_seed": self.shuffle_seed}

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        return cls(int(d["local_epochs"]), int(d["batch_size"]), float(d["learning_rate"]),
                   int(d.get("shuffle_seed", 0)))


def _unpack(spec: ModelSpec, params: ParamVector) -> list[np.ndarray]:
    if params.layout_id != spec.layout_id or len(params) != spec.num_params:
        raise LayoutMismatchError(
            f"parameters {params.layout_id!r}[{len(params)}] do not fit model "
            f"{spec.layout_id!r}[{spec.num_params}]"
        )
    out, start = [], 0
    for shape in spec.shapes:
        size = int(np.prod(shape))
        out.append(params.values[start : start + size].reshape(shape))
        start += size
    return out


def _pack(spec: ModelSpec, arrays: list[np.ndarray]) -> ParamVector:
    return ParamVector(np.concatenate([a.reshape(-1) for a in arrays]), spec.layout_id)


def init_params(spec: ModelSpec) -> ParamVector:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.Generator(np.random.PCG64(spec.init_seed))
    arrays = []
    for shape in spec.shapes:
        if len(shape) == 2:
            limit = np.sqrt(6.0 / (shape[0] + shape[1]))
            arrays.append(rng.uniform(-limit, limit, size=shape))
        else:
            arrays.append(np.zeros(shape))
    return _pack(spec, arrays)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _logits(spec: ModelSpec, arrays: list[np.ndarray], x: np.ndarray):
    if spec.kind == "logreg":
        w, b = arrays
        return x @ w + b, None
    w1, b1, w2, b2 = arrays
    pre = x @ w1 + b1
    hidden = np.maximum(pre, 0.0)
    return hidden @ w2 + b2, (pre, hidden)


def forward_loss_grad(spec: ModelSpec, params: ParamVector, x: np.ndarray,
                      y: np.ndarray) -> tuple[float, ParamVector]:
    """Mean softmax cross-entropy over the batch and its gradient."""
    if len(y) == 0:
        raise ValueError("empty batch")
    arrays = _unpack(spec, params)
    x = np.asarray(x, dtype=np.float64)
    n = len(y)
    logits, cache = _logits(spec, arrays, x)
    logp = _log_softmax(logits)
    loss = -float(logp[np.arange(n), y].mean())
    g = np.exp(logp)
    g[np.arange(n), y] -= 1.0
    g /= n
    if spec.kind == "logreg":
        grads = [x.T @ g, g.sum(axis=0)]
    else:
        _, _, w2, _ = arrays
        pre, hidden = cache
        dh = (g @ w2.T) * (pre > 0)
        grads = [x.T @ dh, dh.sum(axis=0), hidden.T @ g, g.sum(axis=0)]
    return loss, _pack(spec, grads)


EpochHook = Callable[[int, ParamVector], None]


def train_local(spec: ModelSpec, params: ParamVector, x: np.ndarray, y: np.ndarray,
                cfg: TrainConfig, per_epoch_hook: Optional[EpochHook] = None) -> ParamVector:
    """Plain mini-batch SGD for ``cfg.local_epochs`` epochs.

    The hook is called after every epoch with the 1-based epoch number and
    the current parameters.
    """
    rng = np.random.Generator(np.random.PCG64(cfg.shuffle_seed))
    n = len(y)
    if n == 0:
        raise ValueError("empty training batch")
    current = params
    for epoch in range(1, cfg.local_epochs + 1):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            _, grad = forward_loss_grad(spec, current, x[idx], y[idx])
            current = current.replace(current.values - cfg.learning_rate * grad.values)
        if per_epoch_hook is not None:
            per_epoch_hook(epoch, current)
    return current


def predict(spec: ModelSpec, params: ParamVector, x: np.ndarray) -> np.ndarray:
    logits, _ = _logits(spec, _unpack(spec, params), np.asarray(x, dtype=np.float64))
    # argmax returns the first maximum: ties go to the lowest class index
    return np.argmax(logits, axis=1)


def evaluate(spec: ModelSpec, params: ParamVector, x: np.ndarray,
             y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and a ``confusion[true, pred]`` count matrix."""
    if len(y) == 0:
        raise ValueError("empty test batch")
    logits, _ = _logits(spec, _unpack(spec, params), np.asarray(x, dtype=np.float64))
    logp = _log_softmax(logits)
    loss = -float(logp[np.arange(len(y)), y].mean())
    pred = np.argmax(logits, axis=1)
    c = spec.num_classes
    confusion = np.bincount(np.asarray(y) * c + pred, minlength=c * c).reshape(c, c)
    return loss, confusion.astype(np.int64)
