"""Policy training: minibatch AdamW over the closed-loop loss with
warmup-delayed early stopping on the dev set."""
from __future__ import annotations

import io
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from ._io import atomic_write, fmt
from .closedloop import LossWeights, check_dims, fast_batch_loss
from .errors import ConfigError, NumericalError
from .kernels import TERM_NAMES
from .plant import LinearSSM
from .policy import Checkpoint, MlpPolicy
from .scenarios import Dataset, batch_indices

__all__ = [
    "TrainConfig", "OptimizerState", "TrainHistory", "EpochRecord", "EarlyStopping",
    "adamw_step", "train", "param_blocks", "save_history", "load_history",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    warmup_epochs: int = 50
    lr: float = 1e-3
    batch_size: int = 64
    patience: int = 5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    min_delta: float = 1e-9
    lr_warmup: bool = False     # alternative reading of "warmup": linear LR ramp
    max_grad_norm: float = 0.0  # 0 disables clipping
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)

    def validate(self, prefix="trainer"):
        if self.epochs < 0:
            raise ConfigError(f"{prefix}.epochs: must be >= 0, got {self.epochs}")
        if self.warmup_epochs < 0 or (self.epochs > 0 and self.warmup_epochs > self.epochs):
            raise ConfigError(f"{prefix}.warmup_epochs: must lie in [0, epochs], got {self.warmup_epochs}")
        if not self.lr > 0:
            raise ConfigError(f"{prefix}.lr: must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError(f"{prefix}.batch_size: must be >= 1, got {self.batch_size}")
        if self.patience < 1:
            raise ConfigError(f"{prefix}.patience: must be >= 1, got {self.patience}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError(f"{prefix}.beta1/beta2: must lie in [0, 1)")
        if not self.eps > 0:
            raise ConfigError(f"{prefix}.eps: must be positive, got {self.eps}")
        if self.weight_decay < 0:
            raise ConfigError(f"{prefix}.weight_decay: must be >= 0, got {self.weight_decay}")
        if self.max_grad_norm < 0:
            raise ConfigError(f"{prefix}.max_grad_norm: must be >= 0, got {self.max_grad_norm}")
        return self


@dataclass
class OptimizerState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros(n), np.zeros(n), 0)


def param_blocks(policy: MlpPolicy) -> list:
    """``[(name, slice), ...]`` over the flat parameter vector."""
    blocks = []
    pos = 0
    for l, (o, i) in enumerate(policy.shapes):
        blocks.append((f"layer{l}.weight", slice(pos, pos + o * i)))
        pos += o * i
        blocks.append((f"layer{l}.bias", slice(pos, pos + o)))
        pos += o
    return blocks


def _first_bad_block(x, blocks):
    for name, sl in blocks or [("params", slice(None))]:
        if not np.all(np.isfinite(x[sl])):
            return name
    return None


def adamw_step(params, grads, state: OptimizerState, lr, beta1=0.9, beta2=0.999, eps=1e-8,
               weight_decay=0.01, blocks=None):
    """One AdamW update with decoupled weight decay.

    Returns ``(new_params, new_state)``; inputs are not modified.
    """
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape or state.m.shape != params.shape or state.v.shape != params.shape:
        raise ValueError(f"shape mismatch: params {params.shape}, grads {grads.shape}, "
                         f"moments {state.m.shape}/{state.v.shape}")
    bad = _first_bad_block(grads, blocks)
    if bad is not None:
        raise NumericalError(f"non-finite gradient in {bad}")
    t = state.t + 1
    m = beta1 * state.m + (1.0 - beta1) * grads
    v = beta2 * state.v + (1.0 - beta2) * grads * grads
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    new = params - lr * (m_hat / (np.sqrt(v_hat) + eps)) - lr * weight_decay * params
    bad = _first_bad_block(new, blocks)
    if bad is not None:
        raise NumericalError(f"update produced non-finite values in {bad}")
    return new, OptimizerState(m, v, t)


class EarlyStopping:
    """Patience counter on dev loss that only starts after ``warmup`` epochs."""

    def __init__(self, patience, warmup=0, min_delta=1e-9):
        self.patience = patience
        self.warmup = warmup
        self.min_delta = min_delta
        self.best = math.inf
        self.best_epoch = None
        self.bad = 0

    def update(self, epoch, dev_loss) -> tuple:
        """Feed the dev loss of (1-based) ``epoch``; returns ``(improved, stop)``."""
        if epoch <= self.warmup:
            return False, False
        if dev_loss < self.best - self.min_delta:
            self.best = dev_loss
            self.best_epoch = epoch
            self.bad = 0
            return True, False
        self.bad += 1
        return False, self.bad >= self.patience


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    dev_loss: float
    dev_terms: dict
    wall_time: float = 0.0


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)
    best_epoch: int | None = None
    stop_reason: str = ""

    @property
    def dev_losses(self):
        return [r.dev_loss for r in self.records]

    @property
    def train_losses(self):
        return [r.train_loss for r in self.records]

    def __len__(self):
        return len(self.records)


def _clip(grad, max_norm):
    if max_norm <= 0:
        return grad
    norm = float(np.sqrt(np.dot(grad, grad)))
    if norm > max_norm:
        return grad * (max_norm / norm)
    return grad


def _take(arrays, idx):
    return tuple(a[idx] for a in arrays)


def train(model: LinearSSM, policy: MlpPolicy, train_set: Dataset, dev_set: Dataset,
          config: TrainConfig = TrainConfig(), threads=1, backend=None, progress=None):
    """Train ``policy`` (a copy; the argument is not modified).

    Returns ``(Checkpoint, TrainHistory)``.  The checkpoint holds the
    parameters from the post-warmup epoch with the lowest dev loss, or the
    final parameters when no post-warmup epoch ran.
    """
    config.validate()
    if len(train_set) == 0 or len(dev_set) == 0:
        raise ValueError("training and dev sets must be non-empty")
    check_dims(model, policy)
    w = config.weights
    theta = policy.flat()
    blocks = param_blocks(policy)
    state = OptimizerState.zeros(theta.size)
    stopper = EarlyStopping(config.patience, config.warmup_epochs, config.min_delta)
    history = TrainHistory()
    best_theta = theta.copy()
    best_dev = math.nan
    train_arrays = train_set.arrays
    dev_arrays = dev_set.arrays
    n = len(train_set)
    steps_per_epoch = -(-n // config.batch_size)
    warm_steps = config.warmup_epochs * steps_per_epoch
    history.stop_reason = "epoch budget"

    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        order = batch_indices(n, config.batch_size, shuffle_seed=[config.seed, epoch])
        total = 0.0
        current = policy.with_flat(theta)
        for b, idx in enumerate(order):
            res = fast_batch_loss(model, current, _take(train_arrays, idx), w,
                                  threads=threads, backend=backend)
            if not math.isfinite(res.loss):
                raise NumericalError(f"non-finite training loss at epoch {epoch}, batch {b}")
            total += res.loss * len(idx)
            grad = _clip(res.grad, config.max_grad_norm)
            lr = config.lr
            if config.lr_warmup and warm_steps > 0:
                lr *= min(1.0, (state.t + 1) / warm_steps)
            theta, state = adamw_step(theta, grad, state, lr, config.beta1, config.beta2,
                                      config.eps, config.weight_decay, blocks)
            current = policy.with_flat(theta)
        dev = fast_batch_loss(model, current, dev_arrays, w, want_grad=False,
                              threads=threads, backend=backend)
        if not math.isfinite(dev.loss):
            raise NumericalError(f"non-finite dev loss at epoch {epoch}")
        rec = EpochRecord(epoch, total / n, dev.loss, dev.terms, time.perf_counter() - t0)
        history.records.append(rec)
        improved, stop = stopper.update(epoch, dev.loss)
        if improved:
            best_theta = theta.copy()
            best_dev = dev.loss
        if progress is not None:
            progress(rec)
        log.info("epoch %d train %.6g dev %.6g (%.2fs)", epoch, rec.train_loss, rec.dev_loss, rec.wall_time)
        if stop:
            history.stop_reason = "early stop"
            break

    if stopper.best_epoch is not None:
        history.best_epoch = stopper.best_epoch
    elif history.records:
        best_theta = theta.copy()
        best_dev = history.records[-1].dev_loss
        history.best_epoch = history.records[-1].epoch
    meta = {"epoch": history.best_epoch or 0, "dev_loss": best_dev if history.records else None,
            "seed": config.seed, "stop_reason": history.stop_reason}
    return Checkpoint(policy.with_flat(best_theta), meta), history


HISTORY_COLUMNS = ["epoch", "train_loss", "dev_loss"] + [f"dev_{t}" for t in TERM_NAMES]


def save_history(history: TrainHistory, path) -> None:
    """CSV with a ``#`` preamble.  Wall times are left out so reruns are
    byte-identical."""
    buf = io.StringIO()
    buf.write(f"# best_epoch={history.best_epoch}\n# stop_reason={history.stop_reason}\n")
    buf.write(",".join(HISTORY_COLUMNS) + "\n")
    for r in history.records:
        row = [str(r.epoch), fmt(r.train_loss), fmt(r.dev_loss)] + [fmt(r.dev_terms[t]) for t in TERM_NAMES]
        buf.write(",".join(row) + "\n")
    atomic_write(path, buf.getvalue())


def load_history(path) -> TrainHistory:
    hist = TrainHistory()
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                key, _, val = line[1:].strip().partition("=")
                if key == "best_epoch":
                    hist.best_epoch = None if val == "None" else int(val)
                elif key == "stop_reason":
                    hist.stop_reason = val
                continue
            if line.startswith("epoch"):
                continue
            f = line.split(",")
            hist.records.append(EpochRecord(int(f[0]), float(f[1]), float(f[2]),
                                            dict(zip(TERM_NAMES, map(float, f[3:])))))
    return hist
