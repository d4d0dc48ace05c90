"""Group-based reconstruction training.

The training paradigm: per sample, draw a random subset of token groups
(two-stage: first the count, then the members), zero every image region
whose group was not retained, and supervise the pipeline to reconstruct
that masked target from the retained groups alone.  A holistic mode
(plain encode -> decode reconstruction) serves for pretraining, and a
two-step semi-supervised strategy combines both.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np

from . import tensor as T
from .model import OwtModel, RetainedSelection, forward_holistic, forward_owt
from .phantoms import PhantomSample
from .tensor import DiffTensor


class ConfigError(ValueError):
    """Inconsistent training configuration."""


class DataError(ValueError):
    """Input data violates its contract (labels out of range, empty split)."""


class DivergenceError(RuntimeError):
    """Training loss became non-finite."""


@dataclass
class TgrConfig:
    base_lr: float = 1e-4
    effective_batch: int = 96
    epochs: int = 1200
    warmup_epochs: int = 60
    seed: int = 0
    loss_perceptual_weight: float = 0.0
    semi_stage1_epochs: int = 600
    weight_decay: float = 0.05

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ConfigError("base_lr must be positive")
        if not self.warmup_epochs < self.epochs:
            raise ConfigError("warmup_epochs must be below epochs")


@dataclass
class MaskedTarget:
    image: np.ndarray                 # [H, W, C]; non-retained groups exactly 0
    retained_groups: tuple[int, ...]


def draw_selection(groups: int, rng: np.random.Generator) -> RetainedSelection:
    """Two-stage draw: size floor((g+1) * U(0,1)), redrawn while zero, then a
    uniformly ordered random subset of that size.

    The drawn size never reaches g+1 (the floor caps at g for U < 1);
    keeping every group is an inference-time choice, not a training draw.
    """
    if groups < 1:
        raise ConfigError("need at least one semantic group")
    total = groups + 1
    while True:
        keep = int(math.floor(total * rng.random()))
        if keep >= 1:
            break
    members = rng.permutation(total)[:keep]
    return RetainedSelection(tuple(int(m) for m in members))


def mask_target(image: np.ndarray, labels: np.ndarray, sel: RetainedSelection,
                groups: int | None = None) -> MaskedTarget:
    """Zero every pixel whose group is not retained; background is group 0."""
    if labels.min(initial=0) < 0:
        raise DataError("negative group label")
    if groups is not None:
        validate_labels(labels, groups)
    keep = np.isin(labels, sel.retained_groups)
    out = np.where(keep[..., None], image, 0.0).astype(image.dtype)
    return MaskedTarget(image=out, retained_groups=sel.retained_groups)


def validate_labels(labels: np.ndarray, groups: int) -> None:
    if labels.max(initial=0) > groups:
        raise DataError(f"label {int(labels.max())} out of range 0..{groups}")


# ---------------------------------------------------------------------------
# loss


@lru_cache(maxsize=16)
def _pool_indices(height: int, width: int) -> np.ndarray:
    """Flat indices grouping each 2x2 cell, for average pooling via matmul."""
    idx = np.arange(height * width).reshape(height, width)
    cells = idx.reshape(height // 2, 2, width // 2, 2).transpose(0, 2, 1, 3)
    return np.ascontiguousarray(cells.reshape(-1, 4)).reshape(-1)


def _avgpool2(x: DiffTensor, height: int, width: int) -> DiffTensor:
    perm = _pool_indices(height, width)
    cells = T.permute_flat(x, perm, (height * width // 4, 4))
    quarter = DiffTensor(np.full((4, 1), 0.25, dtype=x.data.dtype))
    return T.reshape(T.matmul(cells, quarter), (height // 2, width // 2))


def _finite_differences(x: DiffTensor, height: int, width: int) -> tuple[DiffTensor, DiffTensor]:
    idx = np.arange(height * width).reshape(height, width)
    left = T.gather_flat(x, idx[:, :-1].reshape(-1), (height, width - 1))
    right = T.gather_flat(x, idx[:, 1:].reshape(-1), (height, width - 1))
    top = T.gather_flat(x, idx[:-1, :].reshape(-1), (height - 1, width))
    bottom = T.gather_flat(x, idx[1:, :].reshape(-1), (height - 1, width))
    dx = T.add(right, T.scale(left, -1.0))
    dy = T.add(bottom, T.scale(top, -1.0))
    return dx, dy


def _pyramid_features(img: DiffTensor, height: int, width: int,
                      levels: int = 3) -> list[DiffTensor]:
    """Deterministic multi-scale gradient features (perceptual stand-in)."""
    feats: list[DiffTensor] = []
    cur = T.reshape(img, (height, width))
    h, w = height, width
    for level in range(levels):
        dx, dy = _finite_differences(cur, h, w)
        feats.append(dx)
        feats.append(dy)
        if level + 1 < levels:
            cur = _avgpool2(cur, h, w)
            h, w = h // 2, w // 2
    return feats


def reconstruction_loss(pred: DiffTensor, target: np.ndarray | DiffTensor,
                        perceptual_weight: float = 0.0) -> DiffTensor:
    """Mean squared error, optionally plus a multi-scale gradient term."""
    tgt = target if isinstance(target, DiffTensor) else DiffTensor(
        np.asarray(target, dtype=pred.data.dtype))
    if pred.shape != tgt.shape:
        raise T.DimensionError(f"loss shapes differ: {pred.shape} vs {tgt.shape}")
    diff = T.add(pred, T.scale(tgt, -1.0))
    loss = T.mean_all(T.mul(diff, diff))
    if perceptual_weight > 0.0:
        H, W = pred.shape[0], pred.shape[1]
        fp = _pyramid_features(pred, H, W)
        ft = _pyramid_features(tgt, H, W)
        terms = []
        for a, b in zip(fp, ft):
            d = T.add(a, T.scale(b, -1.0))
            terms.append(T.mean_all(T.mul(d, d)))
        perc = terms[0]
        for t in terms[1:]:
            perc = T.add(perc, t)
        loss = T.add(loss, T.scale(perc, perceptual_weight / len(terms)))
    return loss


def lr_at(step: int, cfg: TgrConfig, steps_per_epoch: int = 1) -> float:
    """Linear warmup from zero, then cosine decay to zero at the last epoch."""
    if step < 0:
        raise ConfigError("step must be nonnegative")
    peak = cfg.base_lr * cfg.effective_batch / 256.0
    warmup_steps = cfg.warmup_epochs * steps_per_epoch
    total_steps = cfg.epochs * steps_per_epoch
    if warmup_steps > 0 and step < warmup_steps:
        return peak * step / warmup_steps
    if step >= total_steps:
        return 0.0
    progress = (step - warmup_steps) / max(1, total_steps - warmup_steps)
    return peak * 0.5 * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------------------
# steps and loops


def _sample_loss(sample: PhantomSample, model: OwtModel, cfg: TgrConfig,
                 rng: np.random.Generator, mode: str) -> DiffTensor:
    img = DiffTensor(sample.image)
    if mode == "holistic":
        pred = forward_holistic(img, model)
        return reconstruction_loss(pred, sample.image, cfg.loss_perceptual_weight)
    validate_labels(sample.labels, model.config.groups)
    sel = draw_selection(model.config.groups, rng)
    target = mask_target(sample.image, sample.labels, sel)
    pred, _, _ = forward_owt(img, sel, model)
    return reconstruction_loss(pred, target.image, cfg.loss_perceptual_weight)


def train_step(batch: list[PhantomSample], model: OwtModel, opt: T.OptimizerState,
               cfg: TgrConfig, rng: np.random.Generator, *, mode: str = "tgr",
               steps_per_epoch: int = 1, forced_selection: RetainedSelection | None = None) -> float:
    """One optimizer update: per-sample selection draws, mean loss, backward.

    Grads are zeroed after the update; the step index for the schedule is
    the optimizer's step counter.
    """
    losses = []
    for sample in batch:
        if forced_selection is not None and mode == "tgr":
            img = DiffTensor(sample.image)
            target = mask_target(sample.image, sample.labels, forced_selection)
            pred, _, _ = forward_owt(img, forced_selection, model)
            losses.append(reconstruction_loss(pred, target.image, cfg.loss_perceptual_weight))
        else:
            losses.append(_sample_loss(sample, model, cfg, rng, mode))
    total = losses[0]
    for term in losses[1:]:
        total = T.add(total, term)
    total = T.scale(total, 1.0 / len(losses))
    T.backward(total)
    lr = lr_at(opt.step_count, cfg, steps_per_epoch)
    T.adamw_step(model.named_parameters(), opt, lr)
    model.zero_grads()
    return total.item()


class TrainLog:
    """CSV sink: one row per step (step, epoch, lr, loss, wall_ms)."""

    COLUMNS = ("step", "epoch", "lr", "loss", "wall_ms")

    def __init__(self, path=None):
        self.path = path
        self.rows: list[tuple] = []
        self._t0 = time.monotonic()

    def record(self, step: int, epoch: int, lr: float, loss: float) -> None:
        wall_ms = (time.monotonic() - self._t0) * 1000.0
        self.rows.append((step, epoch, f"{lr:.10g}", f"{loss:.10g}", f"{wall_ms:.1f}"))

    def write(self) -> None:
        if self.path is None:
            return
        with open(self.path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.COLUMNS)
            writer.writerows(self.rows)


def run_training(samples: list[PhantomSample], model: OwtModel, cfg: TgrConfig,
                 *, mode: str = "tgr", log: TrainLog | None = None,
                 epochs: int | None = None, opt: T.OptimizerState | None = None,
                 on_epoch=None) -> T.OptimizerState:
    """Epoch loop over shuffled batches.  Raises DivergenceError on NaN loss.

    ``on_epoch(epoch)`` fires after each completed epoch (checkpoint hook).
    """
    if mode not in ("tgr", "holistic"):
        raise ConfigError(f"unknown training mode {mode!r}")
    if not samples:
        raise DataError("empty training set")
    n_epochs = cfg.epochs if epochs is None else epochs
    batch = min(cfg.effective_batch, len(samples))
    steps_per_epoch = max(1, len(samples) // batch)
    rng = np.random.default_rng(cfg.seed)
    if opt is None:
        opt = T.OptimizerState(base_lr=cfg.base_lr, weight_decay=cfg.weight_decay)
    for epoch in range(n_epochs):
        order = rng.permutation(len(samples))
        for b in range(steps_per_epoch):
            chunk = [samples[i] for i in order[b * batch:(b + 1) * batch]]
            loss = train_step(chunk, model, opt, cfg, rng, mode=mode,
                              steps_per_epoch=steps_per_epoch)
            if not math.isfinite(loss):
                if log is not None:
                    log.write()
                raise DivergenceError(f"loss became {loss} at step {opt.step_count}")
            if log is not None:
                log.record(opt.step_count, epoch, lr_at(opt.step_count - 1, cfg, steps_per_epoch), loss)
        if on_epoch is not None:
            on_epoch(epoch)
    if log is not None:
        log.write()
    return opt


def train_semi(samples: list[PhantomSample], labeled_fraction: float, model: OwtModel,
               cfg: TgrConfig, *, log: TrainLog | None = None) -> OwtModel:
    """Two-step strategy: holistic pretraining on every image (no labels used),
    then group-based reconstruction on the labeled subset only."""
    if not 0.0 < labeled_fraction <= 1.0:
        raise ConfigError(f"labeled_fraction {labeled_fraction} outside (0, 1]")
    rng = np.random.default_rng(cfg.seed)
    n_labeled = int(round(labeled_fraction * len(samples)))
    if n_labeled < 1:
        raise DataError("labeled subset is empty")
    labeled_idx = rng.permutation(len(samples))[:n_labeled]
    # stage 1 runs its own warmup/cosine schedule over its own epoch count
    stage1_cfg = replace(cfg, epochs=cfg.semi_stage1_epochs,
                         warmup_epochs=min(cfg.warmup_epochs, cfg.semi_stage1_epochs // 10))
    run_training(samples, model, stage1_cfg, mode="holistic", log=log)
    labeled = [samples[i] for i in labeled_idx]
    run_training(labeled, model, cfg, mode="tgr", log=log)
    return model


# ---------------------------------------------------------------------------
# adaptive token allocation


def allocate_tokens(volumes, budget: int) -> list[int]:
    """Distribute ``budget`` tokens across groups, proportional to the fourth
    root of their volumes, by largest remainder, at least one per group."""
    vols = np.asarray(volumes, dtype=np.float64)
    if (vols <= 0).any():
        raise ConfigError("volumes must be positive")
    if budget < len(vols):
        raise ConfigError(f"budget {budget} below one token per group ({len(vols)})")
    weights = vols ** 0.25
    raw = budget * weights / weights.sum()
    counts = np.maximum(1, np.floor(raw).astype(int))
    # largest-remainder top-up / trim until the budget is met exactly
    while counts.sum() < budget:
        remainders = raw - counts
        counts[int(np.argmax(remainders))] += 1
    while counts.sum() > budget:
        excess = counts - raw
        candidates = np.where(counts > 1, excess, -np.inf)
        counts[int(np.argmax(candidates))] -= 1
    return counts.tolist()
