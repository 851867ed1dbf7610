"""Training loop with best-validation checkpointing."""
from __future__ import annotations

import copy
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from ..errors import NumericalError, ValidationError
from .loss import masked_imae_loss
from .models import glorot_init
from .samples import SampleSet

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-7
    n_samples: int = 10000
    p_min: float = 0.1
    p_max: float = 0.9
    val_fraction: float = 0.1
    rng_seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValidationError("epochs and batch_size must be >= 1")
        if not (0.0 < self.p_min <= self.p_max < 1.0):
            raise ValidationError("p range must lie inside (0, 1)")
        if not (0.0 <= self.val_fraction < 1.0):
            raise ValidationError("val_fraction must be in [0, 1)")
        self.betas = tuple(self.betas)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


@dataclass
class TrainResult:
    model: nn.Module
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_loss: float = math.inf


def _batches(n: int, size: int, rng: np.random.Generator | None):
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for k in range(0, n, size):
        yield order[k:k + size]


def _tensors(samples: SampleSet, idx):
    return (torch.from_numpy(samples.x[idx]), torch.from_numpy(samples.target[idx]),
            torch.from_numpy(samples.mask[idx]))


def evaluate_loss(model: nn.Module, samples: SampleSet, batch_size: int = 64) -> float:
    """Cell-count-agnostic mean of per-batch losses, eval mode."""
    model.eval()
    total, weight = 0.0, 0
    with torch.no_grad():
        for idx in _batches(len(samples), batch_size, None):
            x, t, m = _tensors(samples, idx)
            n_valid = int(m.flatten(1).any(1).sum())
            if n_valid:
                total += float(masked_imae_loss(model(x), t, m)) * n_valid
                weight += n_valid
    return total / weight if weight else math.nan


def train(model: nn.Module, samples: SampleSet, cfg: TrainConfig = TrainConfig(),
          init: bool = True, progress=None) -> TrainResult:
    """Adam on batch-averaged masked IMAE; the best-validation weights are kept.

    Without a validation split the training loss selects the checkpoint.
    ``progress`` is called as ``progress(epoch_record)`` after each epoch.
    """
    if len(samples) == 0:
        raise ValidationError("no training samples")
    torch.manual_seed(cfg.rng_seed)
    rng = np.random.default_rng(cfg.rng_seed)
    if init:
        glorot_init(model)

    n = len(samples)
    n_val = int(round(cfg.val_fraction * n)) if n > 1 else 0
    perm = rng.permutation(n)
    val = samples.subset(np.sort(perm[:n_val])) if n_val else None
    tr = samples.subset(np.sort(perm[n_val:]))

    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=cfg.betas, eps=cfg.eps)
    result = TrainResult(model)
    best_state = None
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        model.train()
        total, weight = 0.0, 0
        for idx in _batches(len(tr), cfg.batch_size, rng):
            x, t, m = _tensors(tr, idx)
            loss = masked_imae_loss(model(x), t, m)
            if not torch.isfinite(loss):
                raise NumericalError(f"loss became {loss.item()} in epoch {epoch}; training diverged")
            opt.zero_grad()
            loss.backward()
            opt.step()
            n_valid = int(m.flatten(1).any(1).sum())
            total += loss.item() * n_valid
            weight += n_valid
        train_loss = total / weight if weight else math.nan
        val_loss = evaluate_loss(model, val) if val is not None else math.nan
        score = val_loss if val is not None else train_loss
        rec = {"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss,
               "seconds": time.perf_counter() - t0}
        result.history.append(rec)
        log.info("epoch %d train %.6f val %.6f", epoch, train_loss, val_loss)
        if progress is not None:
            progress(rec)
        if math.isfinite(score) and score < result.best_loss:
            result.best_loss, result.best_epoch = score, epoch
            best_state = copy.deepcopy(model.state_dict())
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return result
