"""Training loop, early stopping, k-fold splitting, and post-prune retraining.

Optimization is adaptive-moment gradient descent (rate 1e-3, moment decays
0.9/0.999) on the mean binary cross-entropy over all nine output maps.
Training order is reshuffled every epoch from the run seed; the returned
weights are the ones with the best validation loss. A run is a pure
function of (initial weights, data, config): same inputs, same history.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from . import network
from .errors import ContractViolation, TrainingDivergedError
from .network import ModelSpec, ModelWeights
from .tensor_core import BCE_EPS, Workspace

__all__ = [
    "TrainConfig",
    "TrainHistory",
    "train",
    "retrain_after_prune",
    "kfold_split",
    "stack_samples",
]

RETRAIN_EPOCHS = 100


@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int = 200
    batch_size: int = 8
    learning_rate: float = 1e-3
    patience: int = 20
    min_delta: float = 1e-4
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.max_epochs < 0:
            raise ContractViolation("max_epochs must be >= 0")
        if self.batch_size < 1 or self.patience < 1:
            raise ContractViolation("batch_size and patience must be >= 1")


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    stop_reason: str = "max_epochs"
    best_epoch: int = -1

    @property
    def epochs_run(self) -> int:
        return len(self.train_loss)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("epoch,train_loss,val_loss\n")
        for i, (tr, va) in enumerate(zip(self.train_loss, self.val_loss)):
            buf.write(f"{i},{tr:.8f},{va:.8f}\n")
        return buf.getvalue()


def stack_samples(samples):
    """Stack a sample list into NHWC image and mask batches."""
    images = np.stack([s.image.transpose(1, 2, 0) for s in samples])
    masks = np.stack([s.masks.transpose(1, 2, 0) for s in samples])
    return np.ascontiguousarray(images, dtype=np.float32), \
        np.ascontiguousarray(masks, dtype=np.float32)


class _Adam:
    def __init__(self, weights: ModelWeights, config: TrainConfig):
        self.config = config
        self.t = 0
        self.m = [(np.zeros_like(k.weights), np.zeros_like(k.biases))
                  for k in weights.kernels]
        self.v = [(np.zeros_like(k.weights), np.zeros_like(k.biases))
                  for k in weights.kernels]

    def step(self, weights: ModelWeights, grads):
        cfg = self.config
        self.t += 1
        corr1 = 1.0 - cfg.beta1 ** self.t
        corr2 = 1.0 - cfg.beta2 ** self.t
        for kern, (dw, db), m, v in zip(weights.kernels, grads, self.m, self.v):
            for param, grad, mm, vv in ((kern.weights, dw, m[0], v[0]),
                                        (kern.biases, db, m[1], v[1])):
                mm *= cfg.beta1
                mm += (1.0 - cfg.beta1) * grad
                vv *= cfg.beta2
                vv += (1.0 - cfg.beta2) * grad * grad
                mhat = mm / corr1
                vhat = vv / corr2
                param -= cfg.learning_rate * mhat / (np.sqrt(vhat) + cfg.adam_eps)


def _bce_mean_and_grad(pred, target):
    """Mean BCE over the batch and its gradient, NHWC, float32-safe."""
    p = np.clip(pred, BCE_EPS, 1.0 - BCE_EPS)
    loss = float(-(target * np.log(p) + (1.0 - target) * np.log1p(-p)).mean())
    grad = (p - target) / (p * (1.0 - p) * p.size)
    return loss, grad.astype(np.float32, copy=False)


def _val_loss(spec, weights, images, masks, batch_size, ws):
    total = 0.0
    n = len(images)
    for start in range(0, n, batch_size):
        xb = images[start:start + batch_size]
        yb = masks[start:start + batch_size]
        out = network.forward_nhwc(spec, weights, xb, ws)
        p = np.clip(out, BCE_EPS, 1.0 - BCE_EPS)
        bce = -(yb * np.log(p) + (1.0 - yb) * np.log1p(-p)).mean()
        total += float(bce) * len(xb)
    return total / n


def train(spec: ModelSpec, weights: ModelWeights, train_set, val_set,
          config: TrainConfig):
    """Train a copy of ``weights``; returns (best weights, history).

    Stops at ``max_epochs`` or once the validation loss has not improved by
    at least ``min_delta`` for ``patience`` consecutive epochs; the weights
    returned are from the best-validation epoch either way.
    """
    if not train_set or not val_set:
        raise ContractViolation("train and validation sets must be non-empty")
    weights.check_matches(spec)
    work = weights.copy()
    if config.max_epochs == 0:
        return work, TrainHistory(stop_reason="max_epochs")

    images, masks = stack_samples(train_set)
    val_images, val_masks = stack_samples(val_set)
    rng = np.random.default_rng(config.seed)
    adam = _Adam(work, config)
    ws = Workspace()
    history = TrainHistory()
    best = work.copy()
    best_val = np.inf       # strict minimum: owns best_epoch and weights
    plateau_ref = np.inf    # min_delta-gated reference: owns early stop
    since_improve = 0

    for epoch in range(config.max_epochs):
        order = rng.permutation(len(images))
        epoch_loss = 0.0
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            xb = np.ascontiguousarray(images[idx])
            yb = masks[idx]
            tape = []
            out = network.forward_nhwc(spec, work, xb, ws, tape=tape)
            loss, grad = _bce_mean_and_grad(out, yb)
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, batch {start // config.batch_size}"
                )
            grads = network.backward_nhwc(spec, work, tape, grad, ws)
            adam.step(work, grads)
            epoch_loss += loss * len(idx)
        history.train_loss.append(epoch_loss / len(images))
        vloss = _val_loss(spec, work, val_images, val_masks,
                          config.batch_size, ws)
        if not np.isfinite(vloss):
            raise TrainingDivergedError(f"non-finite validation loss at epoch {epoch}")
        history.val_loss.append(vloss)
        if vloss < best_val:
            best_val = vloss
            history.best_epoch = epoch
            best = work.copy()
        if vloss < plateau_ref - config.min_delta:
            plateau_ref = vloss
            since_improve = 0
        else:
            since_improve += 1
            if since_improve >= config.patience:
                history.stop_reason = "converged"
                break
    else:
        history.stop_reason = "max_epochs"
    return best, history


def retrain_after_prune(spec: ModelSpec, weights: ModelWeights, train_set,
                        val_set, config: TrainConfig | None = None):
    """Recover accuracy after pruning: same loop, default budget 100 epochs."""
    if config is None:
        config = TrainConfig(max_epochs=RETRAIN_EPOCHS)
    return train(spec, weights, train_set, val_set, config)


def kfold_split(dataset, k: int, seed: int):
    """K disjoint near-equal test folds covering the dataset.

    Returns a list of (train, test) pairs; fold sizes differ by at most one.
    """
    n = len(dataset)
    if k < 2:
        raise ContractViolation("k must be >= 2")
    if k > n:
        raise ContractViolation(f"k={k} exceeds dataset size {n}")
    order = np.random.default_rng(seed).permutation(n)
    base = n // k
    extra = n % k
    folds = []
    pos = 0
    for i in range(k):
        size = base + (1 if i < extra else 0)
        test_idx = set(order[pos:pos + size].tolist())
        pos += size
        test = [dataset[j] for j in sorted(test_idx)]
        train_part = [dataset[j] for j in range(n) if j not in test_idx]
        folds.append((train_part, test))
    return folds
