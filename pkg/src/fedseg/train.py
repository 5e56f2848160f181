"""Mini-batch SGD training for SegModel on preprocessed cases."""

from __future__ import annotations

import numpy as np

from .errors import NumericError, UsageError
from .model import SegModel
from .statedict import StateDict
from .tensor import dice_bce_loss


class SgdTrainer:
    """SGD with momentum 0.9 and a constant learning rate.

    Velocity buffers are local training state and are never exchanged with
    the federation; only model parameters travel over the wire.
    """

    def __init__(self, model: SegModel, lr: float, momentum: float = 0.9):
        if lr < 0:
            raise UsageError("lr must be non-negative")
        self.model = model
        self.lr = lr
        self.momentum = momentum
        self.velocity = {name: np.zeros_like(t.data)
                         for name, t in model.params.items()}

    def reset_velocity(self):
        for v in self.velocity.values():
            v[...] = 0.0

    def step(self, images: np.ndarray, masks: np.ndarray) -> float:
        """One SGD step on a batch [B,P,P]; returns the batch loss."""
        for t in self.model.params.tensors():
            t.zero_grad()
        logits = self.model.logits(images[:, None])
        loss = dice_bce_loss(logits, masks[:, None].astype(np.float64))
        value = float(loss.data)
        if not np.isfinite(value):
            raise NumericError("non-finite loss")
        loss.backward()
        if self.lr == 0.0:
            return value
        for name, t in self.model.params.items():
            g = t.grad if t.grad is not None else np.zeros_like(t.data)
            v = self.velocity[name]
            v *= self.momentum
            v += g
            t.data -= self.lr * v
        return value


def train_epoch(trainer: SgdTrainer, images: np.ndarray, masks: np.ndarray,
                batch_size: int, seed: int) -> float:
    """One seeded-shuffle pass over the cases; returns the mean batch loss.

    images/masks: [n, P, P] preprocessed arrays.
    """
    n = images.shape[0]
    if n == 0:
        raise UsageError("cannot train on zero cases")
    order = np.random.default_rng(seed).permutation(n)
    losses = []
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        try:
            losses.append(trainer.step(images[idx], masks[idx]))
        except NumericError as e:
            raise NumericError(
                f"{e} (batch starting at {start})") from e
    return float(np.mean(losses))


def model_loss_fn(plan, images: np.ndarray, masks: np.ndarray):
    """Closure mapping a StateDict to the scalar loss, for grad checking."""

    def f(params: StateDict):
        model = SegModel(plan, params)
        logits = model.logits(images[:, None])
        return dice_bce_loss(logits, masks[:, None].astype(np.float64))

    return f
