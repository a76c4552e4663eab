"""Training recipe: binary cross-entropy, Adam at lr 1e-4, 20 epochs.

The loop is deliberately plain: seeded shuffling into fixed-size mini
batches, one optimizer step per batch, per-epoch mean loss recorded. No
schedules, no early stopping, no augmentation. Divergence (NaN loss) aborts
with a diagnostic instead of being masked.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Callable

import torch
from torch import nn

from .errors import TrainingError, ValidationError

PROB_CLAMP = 1e-7


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    epochs: int = 20
    batch_size: int = 8
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    shuffle: bool = True

    def validate(self) -> None:
        if self.lr <= 0:
            raise ValidationError(f"lr must be > 0, got {self.lr!r}")
        if self.epochs < 1:
            raise ValidationError(f"epochs must be >= 1, got {self.epochs!r}")
        if self.batch_size < 1:
            raise ValidationError(f"batch_size must be >= 1, got {self.batch_size!r}")

    def with_seed(self, seed: int) -> "TrainConfig":
        return replace(self, seed=int(seed))


@dataclass
class TrainHistory:
    epoch_losses: list[float] = field(default_factory=list)
    wall_time_s: float = 0.0


def bce_loss(p, y) -> torch.Tensor:
    """Elementwise binary cross-entropy with probabilities clamped to
    [1e-7, 1 - 1e-7] before the logs."""
    p = torch.as_tensor(p, dtype=torch.float64) if not torch.is_tensor(p) else p
    y = torch.as_tensor(y, dtype=p.dtype) if not torch.is_tensor(y) else y.to(p.dtype)
    p = torch.clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    return -(y * torch.log(p) + (1.0 - y) * torch.log1p(-p))


def make_optimizer(parameters, config: TrainConfig) -> torch.optim.Adam:
    """Adam with the standard bias-corrected moment updates."""
    return torch.optim.Adam(
        parameters,
        lr=config.lr,
        betas=(config.beta1, config.beta2),
        eps=config.eps,
        weight_decay=config.weight_decay,
    )

def train_module(
    module: nn.Module,
    inputs: tuple[torch.Tensor, ...],
    labels: torch.Tensor,
    config: TrainConfig,
    forward: Callable[..., torch.Tensor] | None = None,
) -> TrainHistory:
    """Run the standard recipe over (inputs, labels), updating ``module``.

    ``forward`` maps (module, *batch_inputs) to probabilities; by default the
    module is called directly. Only parameters with requires_grad participate
    in updates, so frozen encoders stay bitwise intact. Given the same seed
    the shuffle order, and therefore the result, is identical across runs.
    """
    config.validate()
    n = int(labels.shape[0])
    if n == 0:
        raise TrainingError("training split is empty")
    unique = torch.unique(labels)
    if unique.numel() < 2:
        raise TrainingError(
            f"training split contains a single class ({unique.tolist()}); "
            "binary cross-entropy is degenerate"
        )
    if forward is None:
        forward = lambda m, *batch: m(*batch)

    trainable = [p for p in module.parameters() if p.requires_grad]
    if not trainable:
        raise TrainingError("module has no trainable parameters")
    optimizer = make_optimizer(trainable, config)
    shuffle_gen = torch.Generator().manual_seed(int(config.seed) & 0x7FFFFFFFFFFFFFFF)

    history = TrainHistory()
    start = time.perf_counter()
    module.train()
    for epoch in range(config.epochs):
        order = (
            torch.randperm(n, generator=shuffle_gen) if config.shuffle else torch.arange(n)
        )
        epoch_loss = 0.0
        n_batches = 0
        for lo in range(0, n, config.batch_size):
            idx = order[lo : lo + config.batch_size]
            batch = tuple(t[idx] for t in inputs)
            optimizer.zero_grad()
            probs = forward(module, *batch)
            loss = bce_loss(probs, labels[idx]).mean()
            if not torch.isfinite(loss):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}, batch {n_batches}; aborting"
                )
            loss.backward()
            optimizer.step()
            epoch_loss += float(loss.detach())
            n_batches += 1
        history.epoch_losses.append(epoch_loss / n_batches)
    module.eval()
    history.wall_time_s = time.perf_counter() - start
    return history
