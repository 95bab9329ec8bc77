"""Mini-batch training loop: Adam, BCE + L2 objective, early stopping on
validation loss, reproducibility manifest.

Determinism contract: (seed, config, data) fully determine the returned
parameters.  Batch shuffling is reseeded per epoch from seed + epoch, the
last partial batch is kept, and the reported train loss for an epoch is the
full-pass objective (mean BCE plus L2 penalty) under the epoch-end
parameters, so it can be recomputed independently from the checkpoint.
Validation loss is the plain mean BCE on the validation split.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .errors import ConfigError, TrainingError
from .model import (
    FeatureBatch,
    FusionModelParams,
    ModelDims,
    backward,
    batch_objective,
    bce_with_logits,
    forward_batch,
    l2_penalty,
    params_content_hash,
    variant_uses,
)


def bce_loss(prob: float, label: int) -> float:
    """Binary cross-entropy of a single predicted probability in (0, 1)."""
    p = float(prob)
    if not 0.0 < p < 1.0:
        raise ConfigError(f"bce_loss requires a probability in (0, 1), got {p}")
    y = float(label)
    return -(y * np.log(p) + (1.0 - y) * np.log1p(-p))


@dataclass(frozen=True)
class AdamConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError("Adam betas must lie in [0, 1)")
        if self.eps <= 0:
            raise ConfigError("Adam eps must be positive")


@dataclass(frozen=True)
class TrainConfig:
    """Every hyperparameter and seed governing a training run."""

    variant: str = "ts_notes_expert"
    learning_rate: float = 1e-4
    l2: float = 1e-5
    batch_size: int = 32
    patience: int = 5
    max_epochs: int = 100
    seed: int = 0
    dims: ModelDims = field(default_factory=ModelDims)
    decay_rate: float = 0.1
    adam: AdamConfig = field(default_factory=AdamConfig)
    grad_clip_norm: Optional[float] = 5.0
    min_improvement: float = 1e-6

    def __post_init__(self):
        variant_uses(self.variant)  # validates the name
        if self.learning_rate <= 0 or self.l2 < 0:
            raise ConfigError("learning_rate must be > 0 and l2 >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be >= 1")
        if self.decay_rate < 0:
            raise ConfigError("decay_rate must be >= 0")
        if self.grad_clip_norm is not None and self.grad_clip_norm <= 0:
            raise ConfigError("grad_clip_norm must be positive or None")

    def to_json_dict(self) -> dict:
        return {
            "variant": self.variant,
            "learning_rate": self.learning_rate,
            "l2": self.l2,
            "batch_size": self.batch_size,
            "patience": self.patience,
            "max_epochs": self.max_epochs,
            "seed": self.seed,
            "dims": self.dims.to_json_dict(),
            "decay_rate": self.decay_rate,
            "adam": {"beta1": self.adam.beta1, "beta2": self.adam.beta2,
                     "eps": self.adam.eps},
            "grad_clip_norm": self.grad_clip_norm,
            "min_improvement": self.min_improvement,
        }

    def with_overrides(self, **kwargs) -> "TrainConfig":
        return replace(self, **kwargs)


@dataclass
class AdamState:
    """First/second moment estimates plus the shared step counter."""

    step: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]

    @classmethod
    def init_like(cls, params: FusionModelParams) -> "AdamState":
        return cls(step=0,
                   m={name: np.zeros_like(arr) for name, arr in params.items()},
                   v={name: np.zeros_like(arr) for name, arr in params.items()})


def adam_step(params: FusionModelParams, grads: dict[str, np.ndarray],
              state: AdamState, config: TrainConfig,
              tolerant: bool = False) -> tuple[FusionModelParams, AdamState]:
    """One Adam update with bias correction; parameters updated in place.

    A non-finite gradient raises TrainingError, or skips the step (counter
    untouched) when ``tolerant``.
    """
    for name, grad in grads.items():
        if not np.all(np.isfinite(grad)):
            if tolerant:
                return params, state
            raise TrainingError(f"non-finite gradient for {name}")
    beta1, beta2, eps = config.adam.beta1, config.adam.beta2, config.adam.eps
    state.step += 1
    correction1 = 1.0 - beta1 ** state.step
    correction2 = 1.0 - beta2 ** state.step
    for name, arr in params.items():
        grad = grads[name]
        state.m[name] = beta1 * state.m[name] + (1.0 - beta1) * grad
        state.v[name] = beta2 * state.v[name] + (1.0 - beta2) * grad**2
        m_hat = state.m[name] / correction1
        v_hat = state.v[name] / correction2
        arr -= config.learning_rate * m_hat / (np.sqrt(v_hat) + eps)
    return params, state


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm.

    Returns the pre-clip norm.
    """
    total = np.sqrt(sum(float(np.sum(g**2)) for g in grads.values()))
    if total > max_norm and total > 0:
        scale = max_norm / total
        for name in grads:
            grads[name] = grads[name] * scale
    return total


class EarlyStopping:
    """Stop after ``patience`` consecutive epochs without validation-loss
    improvement; remembers the best epoch's parameters.

    Improvement means val_loss < best - min_improvement.
    """

    def __init__(self, patience: int, min_improvement: float = 1e-6):
        self.patience = patience
        self.min_improvement = min_improvement
        self.best_loss: Optional[float] = None
        self.best_epoch = 0
        self.best_params: Optional[FusionModelParams] = None
        self.stale_epochs = 0

    def update(self, epoch: int, val_loss: float,
               params: Optional[FusionModelParams] = None) -> bool:
        """Record an epoch; returns True when training should stop."""
        if self.best_loss is None or val_loss < self.best_loss - self.min_improvement:
            self.best_loss = val_loss
            self.best_epoch = epoch
            self.best_params = params.copy() if params is not None else None
            self.stale_epochs = 0
            return False
        self.stale_epochs += 1
        return self.stale_epochs >= self.patience


@dataclass
class TrainManifest:
    """Reproducibility record for one training run.

    ``wall_time_s`` is volatile and excluded from the serialized form by
    default so manifests from identical runs compare byte-equal.
    """

    config: dict
    train_losses: list[float]
    val_losses: list[float]
    epochs_run: int
    best_epoch: int
    checkpoint_sha256: str
    wall_time_s: float = 0.0

    def to_json_dict(self, include_timing: bool = False) -> dict:
        obj = {
            "config": self.config,
            "train_losses": self.train_losses,
            "val_losses": self.val_losses,
            "epochs_run": self.epochs_run,
            "best_epoch": self.best_epoch,
            "checkpoint_sha256": self.checkpoint_sha256,
        }
        if include_timing:
            obj["wall_time_s"] = self.wall_time_s
        return obj


def validation_loss(params: FusionModelParams, batch: FeatureBatch) -> float:
    """Plain mean BCE on a held-out batch."""
    trace = forward_batch(params, batch)
    return float(np.mean(bce_with_logits(trace.logits, batch.labels)))


def train(train_batch: FeatureBatch, val_batch: FeatureBatch,
          config: TrainConfig,
          epoch_callback: Optional[Callable[[int, float, float], None]] = None,
          ) -> tuple[FusionModelParams, TrainManifest]:
    """Train one variant on pre-assembled tensors.

    Returns the parameters of the epoch with the lowest validation loss
    and the manifest describing the run.
    """
    if train_batch.n == 0:
        raise TrainingError("empty training split")
    if val_batch.n == 0:
        raise TrainingError("empty validation split")
    started = time.monotonic()
    params = FusionModelParams.initialize(config.variant, config.dims, config.seed)
    state = AdamState.init_like(params)
    stopper = EarlyStopping(config.patience, config.min_improvement)
    train_losses: list[float] = []
    val_losses: list[float] = []
    epochs_run = 0
    for epoch in range(1, config.max_epochs + 1):
        rng = np.random.default_rng(config.seed + epoch)
        order = rng.permutation(train_batch.n)
        for start in range(0, train_batch.n, config.batch_size):
            batch = train_batch.subset(order[start:start + config.batch_size])
            trace = forward_batch(params, batch)
            grads = backward(trace, batch.labels, config.l2, params)
            if config.grad_clip_norm is not None:
                clip_gradients(grads, config.grad_clip_norm)
            params, state = adam_step(params, grads, state, config)
        epochs_run = epoch
        train_loss = batch_objective(params, train_batch, config.l2)
        val_loss = validation_loss(params, val_batch)
        if not (np.isfinite(train_loss) and np.isfinite(val_loss)):
            raise TrainingError(f"training diverged at epoch {epoch}")
        train_losses.append(train_loss)
        val_losses.append(val_loss)
        if epoch_callback is not None:
            epoch_callback(epoch, train_loss, val_loss)
        if stopper.update(epoch, val_loss, params):
            break
    best = stopper.best_params if stopper.best_params is not None else params
    manifest = TrainManifest(
        config=config.to_json_dict(),
        train_losses=train_losses,
        val_losses=val_losses,
        epochs_run=epochs_run,
        best_epoch=stopper.best_epoch,
        checkpoint_sha256=params_content_hash(best),
        wall_time_s=time.monotonic() - started,
    )
    return best, manifest
