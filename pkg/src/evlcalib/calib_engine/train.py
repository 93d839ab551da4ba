"""Adam training of the toy regressor on (CalibInput, label) pairs."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from ..errors import DivergenceDetected, EmptyInputError
from ..geometry import EulerPose
from . import network as net
from .network import PredictorModel


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 32
    epochs: int = 10
    max_steps: int | None = None
    trans_unit_m: float = net.TRANS_UNIT_M
    rot_unit_deg: float = net.ROT_UNIT_DEG
    rng_seed: int = 0

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if (self.trans_unit_m, self.rot_unit_deg) != (net.TRANS_UNIT_M, net.ROT_UNIT_DEG):
            raise ValueError("loss units are fixed by the network head (0.1 m, 1 deg)")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


@dataclass
class Dataset:
    """Stacked inputs (N, 2, H, W) float32 and labels (N, 6) in loss units."""

    x: np.ndarray
    y: np.ndarray

    @classmethod
    def from_pairs(cls, inputs, labels: list[EulerPose]) -> "Dataset":
        return cls(net.stack_inputs(list(inputs)).astype(np.float32),
                   net.label_units(list(labels)).astype(np.float32))

    def __len__(self):
        return len(self.x)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.x[idx], self.y[idx])


@dataclass
class TrainResult:
    model: PredictorModel
    train_loss: list[float] = field(default_factory=list)  # index 0 is before training
    val_loss: list[float] = field(default_factory=list)
    step_loss: list[float] = field(default_factory=list)
    steps: int = 0


class Adam:
    def __init__(self, params: dict[str, np.ndarray], cfg: TrainConfig):
        self.cfg = cfg
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1 ** self.t
        bc2 = 1.0 - c.beta2 ** self.t
        for k, g in grads.items():
            self.m[k] = c.beta1 * self.m[k] + (1 - c.beta1) * g
            self.v[k] = c.beta2 * self.v[k] + (1 - c.beta2) * g * g
            upd = c.learning_rate * (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + c.epsilon)
            params[k] = (params[k] - upd).astype(params[k].dtype)


def dataset_loss(model: PredictorModel, data: Dataset, batch: int = 256) -> float:
    if len(data) == 0:
        return float("nan")
    total = 0.0
    for lo in range(0, len(data), batch):
        out = net.forward_raw(model, data.x[lo:lo + batch]).astype(np.float64)
        total += float(np.sum((out - data.y[lo:lo + batch]) ** 2))
    return total / (len(data) * 6)


def train(model: PredictorModel, data: Dataset, cfg: TrainConfig,
          val: Dataset | None = None, log=None) -> TrainResult:
    """Mini-batch Adam; shuffling comes from ``cfg.rng_seed`` only."""
    if len(data) == 0:
        raise EmptyInputError("training set is empty")
    model = model.copy()
    opt = Adam(model.params, cfg)
    rng = np.random.default_rng(cfg.rng_seed)
    res = TrainResult(model)
    res.train_loss.append(dataset_loss(model, data))
    if val is not None:
        res.val_loss.append(dataset_loss(model, val))
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(data))
        batch_losses = []
        for lo in range(0, len(data), cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            L, grads = net.loss_and_grad(model, data.x[idx], data.y[idx])
            if not np.isfinite(L):
                raise DivergenceDetected(f"loss became {L} at step {res.steps}")
            opt.step(model.params, grads)
            if not model.is_finite():
                raise DivergenceDetected(f"parameters became non-finite at step {res.steps}")
            res.steps += 1
            res.step_loss.append(L)
            batch_losses.append(L)
            if cfg.max_steps is not None and res.steps >= cfg.max_steps:
                break
        res.train_loss.append(float(np.mean(batch_losses)))
        if val is not None:
            res.val_loss.append(dataset_loss(model, val))
        if log:
            log(epoch + 1, res.train_loss[-1], res.val_loss[-1] if val is not None else None)
        if cfg.max_steps is not None and res.steps >= cfg.max_steps:
            break
    return res
