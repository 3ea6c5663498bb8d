"""Server-side aggregation: FedAvg, FedOpt, FedAvgM and FedYogi.

Every strategy starts from the sample-weighted mean of the client models
and the pseudo-gradient ``delta = mean - x``; the optimizers then step
the global model along ``delta``. With ``server_lr = 1`` FedOpt reduces to
FedAvg, as does FedAvgM with ``momentum = 0``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .params import EmptyInputError, ParamVector, check_compatible, weighted_mean

STRATEGIES = ("fedavg", "fedavgm", "fedopt", "fedyogi")


@dataclass(frozen=True)
class FitResult:
    client_id: int
    params: ParamVector
    num_examples: int
    train_loss: float = 0.0


@dataclass(frozen=True)
class EvalResult:
    client_id: int
    num_examples: int
    loss: float
    confusion: np.ndarray

    @property
    def correct(self) -> int:
        return int(np.trace(self.confusion))


@dataclass(frozen=True)
class StrategyConfig:
    kind: str = "fedavg"
    server_lr: float = 1.0
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.99
    tau: float = 1e-3

    def __post_init__(self) -> None:
        if self.kind not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.kind!r}; expected one of {STRATEGIES}")
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        for name in ("momentum", "beta1", "beta2"):
            if not 0 <= getattr(self, name) < 1:
                raise ValueError(f"{name} must lie in [0, 1)")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "server_lr": self.server_lr, "momentum": self.momentum,
                "beta1": self.beta1, "beta2": self.beta2, "tau": self.tau}

    @classmethod
    def from_dict(cls, d: dict) -> StrategyConfig:
        return cls(**{k: d[k] for k in ("kind", "server_lr", "momentum", "beta1", "beta2", "tau") if k in d})


@dataclass(frozen=True)
class StrategyState:
    config: StrategyConfig
    params: ParamVector
    round: int = 0
    m: Optional[np.ndarray] = field(default=None, repr=False)
    v: Optional[np.ndarray] = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "layout_id": self.params.layout_id,
            "params": self.params.values.tolist(),
            "round": self.round,
            "m": None if self.m is None else self.m.tolist(),
            "v": None if self.v is None else self.v.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> StrategyState:
        def arr(key):
            return None if d.get(key) is None else np.asarray(d[key], dtype=np.float64)

        return cls(StrategyConfig.from_dict(d["config"]), ParamVector(arr("params"), d["layout_id"]),
                   int(d["round"]), arr("m"), arr("v"))


def init_state(config: StrategyConfig, params: ParamVector) -> StrategyState:
    n = len(params)
    m = v = None
    if config.kind in ("fedavgm", "fedyogi"):
        m = np.zeros(n)
    if config.kind == "fedyogi":
        v = np.full(n, config.tau**2)
    return StrategyState(config, params, 0, m, v)


def aggregate(state: StrategyState, results: Sequence[FitResult]) -> StrategyState:
    """One server step from the round's client results; returns the next state."""
    if not results:
        raise EmptyInputError("no fit results to aggregate")
    check_compatible([state.params, *(r.params for r in results)])
    ordered = sorted(results, key=lambda r: r.client_id)
    mean = weighted_mean([(r.params, r.num_examples) for r in ordered])
    cfg = state.config
    x = state.params.values
    delta = mean.values - x
    m, v = state.m, state.v
    if cfg.kind == "fedavg":
        new = mean.values
    elif cfg.kind == "fedopt":
        new = x + cfg.server_lr * delta
    elif cfg.kind == "fedavgm":
        m = cfg.momentum * m + delta
        new = x + cfg.server_lr * m
    else:
        m = cfg.beta1 * m + (1 - cfg.beta1) * delta
        d2 = delta * delta
        v = v - (1 - cfg.beta2) * d2 * np.sign(v - d2)
        new = x + cfg.server_lr * m / (np.sqrt(v) + cfg.tau)
    return replace(state, params=state.params.replace(new), round=state.round + 1, m=m, v=v)


def aggregate_eval(results: Sequence[EvalResult]) -> tuple[float, float]:
    """Test-size weighted (loss, accuracy) over all reporting clients."""
    if not results:
        raise EmptyInputError("no evaluation results to aggregate")
    n = sum(r.num_examples for r in results)
    if n <= 0:
        raise EmptyInputError("evaluation results contain no test samples")
    loss = sum(r.num_examples * r.loss for r in results) / n
    accuracy = sum(r.correct for r in results) / n
    return float(loss), float(accuracy)

