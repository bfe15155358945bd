"""Losses, optimizers, and the two training phases plus the baseline.

Phase 1 regresses optic-disc centers with MSE + RMSprop; phase 2 trains
the decoder on top of a frozen encoder with negative-log soft Dice +
Adam.  The baseline trains the identical full architecture from random
initialization with the same loss and optimizer as phase 2.

A run is a pure function of (samples, config, seed): shuffling and
dropout draw from one seeded generator, and the best-validation
parameter snapshot is restored before returning.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from . import data as D
from . import evaluate as E
from .errors import ContractError, ParameterError, ShapeError, StateError
from .model import ModelConfig, UNetModel, build_baseline, forward_localize, forward_segment
from .tensor import Tensor

PHASES = ("localize", "segment", "baseline")


@dataclass(frozen=True)
class TrainConfig:
    phase: str
    optimizer: str = ""        # rmsprop | adam; empty picks the phase default
    learning_rate: float = 1e-3
    batch_size: int = 8
    epochs: int = 30
    seed: int = 0
    patience: int = 20         # epochs without val improvement; 0 disables

    def validate(self):
        if self.phase not in PHASES:
            raise ParameterError(f"phase must be one of {PHASES}, got {self.phase!r}")
        if self.optimizer not in ("", "rmsprop", "adam"):
            raise ParameterError(f"unknown optimizer {self.optimizer!r}")
        if self.learning_rate <= 0:
            raise ParameterError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ParameterError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ParameterError(f"epochs must be >= 1, got {self.epochs}")
        if self.patience < 0:
            raise ParameterError(f"patience must be >= 0, got {self.patience}")

    def resolved_optimizer(self) -> str:
        if self.optimizer:
            return self.optimizer
        return "rmsprop" if self.phase == "localize" else "adam"


# -- losses -------------------------------------------------------------------


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean over every entry of the squared difference."""
    if pred.shape != target.shape:
        raise ShapeError(f"pred {pred.shape} vs target {target.shape}")
    diff = pred - target
    return (diff * diff).mean()


def neg_log_soft_dice_loss(pred: Tensor, target: Tensor, eps: float = 1e-6) -> Tensor:
    """-log of the batch-aggregated soft Dice between probabilities and a
    binary target; eps guards both empty masks and the log."""
    if pred.shape != target.shape:
        raise ShapeError(f"pred {pred.shape} vs target {target.shape}")
    tv = target.values
    if not np.all((tv == 0.0) | (tv == 1.0)):
        raise ParameterError("soft Dice target must be binary")
    numerator = 2.0 * (pred * target).sum() + eps
    denominator = pred.sum() + target.sum() + eps
    return -((numerator / denominator).log())


# -- optimizers ---------------------------------------------------------------


class RmsProp:
    """acc <- rho acc + (1-rho) g^2;  w <- w - lr g / sqrt(acc + eps)."""

    def __init__(self, params: list, lr: float, rho: float = 0.9, eps: float = 1e-8):
        self.lr = lr
        self.rho = rho
        self.eps = eps
        # frozen parameters carry no optimizer state
        self.params = [p for p in params if not p.frozen]
        self.acc = [np.zeros_like(p.values) for p in self.params]

    def step(self):
        for p, acc in zip(self.params, self.acc):
            g = p.grad
            if g.shape != acc.shape:
                raise ContractError(f"gradient shape drifted: {g.shape} vs {acc.shape}")
            acc *= self.rho
            acc += (1.0 - self.rho) * g * g
            p.values[...] -= self.lr * g / np.sqrt(acc + self.eps)


class Adam:
    """Bias-corrected first/second moment update."""

    def __init__(self, params: list, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.params = [p for p in params if not p.frozen]
        self.m = [np.zeros_like(p.values) for p in self.params]
        self.v = [np.zeros_like(p.values) for p in self.params]
        self.t = 0

    def step(self):
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if g.shape != m.shape:
                raise ContractError(f"gradient shape drifted: {g.shape} vs {m.shape}")
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.values[...] -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def make_optimizer(cfg: TrainConfig, params: list):
    name = cfg.resolved_optimizer()
    if name == "rmsprop":
        return RmsProp(params, lr=cfg.learning_rate)
    return Adam(params, lr=cfg.learning_rate)


# -- training loops -----------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_metric: float


@dataclass
class TrainResult:
    model: UNetModel
    history: list          # list[EpochRecord]
    best_epoch: int
    best_metric: float


def write_history_csv(history: list, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_metric"])
        for rec in history:
            writer.writerow([rec.epoch, repr(rec.train_loss), repr(rec.val_metric)])


def _run_epochs(model, cfg, train_samples, val_samples, forward_batch, val_metric,
                lower_is_better: bool) -> TrainResult:
    """Shared epoch loop: shuffle, step, validate, early-stop, restore best."""
    rng = np.random.default_rng(cfg.seed)
    optimizer = make_optimizer(cfg, model.parameters())
    n = len(train_samples)
    history = []
    best_metric = math.inf if lower_is_better else -math.inf
    best_state = None
    best_epoch = -1
    stale = 0

    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            chunk = [train_samples[i] for i in perm[start:start + cfg.batch_size]]
            loss = forward_batch(model, chunk, rng)
            model.zero_grad()
            loss.backward()
            optimizer.step()
            total += loss.item() * len(chunk)
        train_loss = total / n

        metric = val_metric(model, val_samples)
        history.append(EpochRecord(epoch=epoch, train_loss=train_loss, val_metric=metric))
        improved = metric < best_metric if lower_is_better else metric > best_metric
        if improved:
            best_metric = metric
            best_epoch = epoch
            best_state = model.state_dict()
            stale = 0
        else:
            stale += 1
            if cfg.patience and stale >= cfg.patience:
                break

    if best_state is not None:
        model.load_state(best_state)
    return TrainResult(model=model, history=history, best_epoch=best_epoch,
                       best_metric=best_metric)


def _localizer_batch(model, chunk, rng):
    images = Tensor(D.stack_images(chunk))
    targets = Tensor(D.stack_centroids(chunk))
    pred = forward_localize(model, images, "train", rng)
    return mse_loss(pred, targets)


def _segmenter_batch(model, chunk, rng):
    images = Tensor(D.stack_images(chunk))
    targets = Tensor(D.stack_masks(chunk))
    pred = forward_segment(model, images, "train", rng)
    return neg_log_soft_dice_loss(pred, targets)


def _val_mse(model, samples):
    return E.mse_localization_report(model, samples).mse


def _val_mean_dice(model, samples):
    return float(np.mean(E.segmentation_dice_scores(model, samples)))


def train_localizer(train_samples: list, cfg: TrainConfig, model: UNetModel,
                    val_samples: list | None = None) -> TrainResult:
    """Phase 1: minimize centroid MSE with RMSprop; returns the
    best-validation checkpoint (validation defaults to the training set)."""
    cfg.validate()
    if cfg.phase != "localize":
        raise ParameterError(f"train_localizer needs phase=localize, got {cfg.phase}")
    if model.head is None:
        raise StateError("model has no localizer head")
    if not train_samples:
        raise ParameterError("training set is empty")
    val = val_samples if val_samples else train_samples
    return _run_epochs(model, cfg, train_samples, val, _localizer_batch, _val_mse,
                       lower_is_better=True)


def train_segmenter(train_samples: list, cfg: TrainConfig, model: UNetModel,
                    val_samples: list | None = None) -> TrainResult:
    """Phase 2: minimize negative-log soft Dice with Adam over the decoder
    of an extended model whose encoder is frozen."""
    cfg.validate()
    if cfg.phase != "segment":
        raise ParameterError(f"train_segmenter needs phase=segment, got {cfg.phase}")
    if model.decoder is None or not model.encoder_frozen:
        raise StateError("model must be extended from a trained localizer")
    if not train_samples:
        raise ParameterError("training set is empty")
    val = val_samples if val_samples else train_samples
    return _run_epochs(model, cfg, train_samples, val, _segmenter_batch, _val_mean_dice,
                       lower_is_better=False)


def train_baseline(train_samples: list, cfg: TrainConfig, model_cfg: ModelConfig,
                   init_rng, val_samples: list | None = None) -> TrainResult:
    """Conventional scheme: the full U-net from random initialization,
    nothing frozen, same loss/optimizer/data as phase 2."""
    cfg.validate()
    if cfg.phase != "baseline":
        raise ParameterError(f"train_baseline needs phase=baseline, got {cfg.phase}")
    if not train_samples:
        raise ParameterError("training set is empty")
    model = build_baseline(model_cfg, init_rng)
    val = val_samples if val_samples else train_samples
    return _run_epochs(model, cfg, train_samples, val, _segmenter_batch, _val_mean_dice,
                       lower_is_better=False)
