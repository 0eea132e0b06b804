"""Training with the per-sample Euclidean density loss, and MAE/MSE count evaluation."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data import Scene, crop_scene, crop_to_multiple, iter_batches, stack_scenes
from .density import KernelSpec
from .model import CCNNConfig, ModelParams, build, forward, save_checkpoint
from .tensor import AdamState, GradTape, adam_step, euclidean_loss

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 1
    batch_size: int = 8
    lr: float = 1e-5
    seed: int = 0
    kernel: KernelSpec = field(default_factory=KernelSpec)
    model: CCNNConfig = field(default_factory=CCNNConfig)
    checkpoint_every: int = 0  # epochs; 0 disables periodic val/checkpoint
    log_path: str | None = None
    crop_size: tuple[int, int] = (192, 192)
    max_steps: int | None = None
    init_std: float = 0.01

    def validate(self) -> "TrainConfig":
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.lr > 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if self.max_steps is not None and self.max_steps < 1:
            raise ValueError(f"max_steps must be >= 1, got {self.max_steps}")
        self.model.validate()
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        """Accepts either a training config or a bare model config (as printed by ``variant``)."""
        if "front_branches" in d or "backend" in d:
            return cls(model=CCNNConfig.from_dict(d)).validate()
        d = dict(d)
        kw = {}
        if "model" in d:
            kw["model"] = CCNNConfig.from_dict(d.pop("model"))
        if "kernel" in d:
            kw["kernel"] = KernelSpec(**d.pop("kernel"))
        if "crop_size" in d:
            kw["crop_size"] = tuple(d.pop("crop_size"))
        known = {"epochs", "batch_size", "lr", "seed", "checkpoint_every", "log_path", "max_steps", "init_std"}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d, **kw).validate()


@dataclass
class Metrics:
    mae: float
    mse: float
    per_scene: list[tuple[str, float, float]] = field(default_factory=list)

    @property
    def n(self) -> int:
        return len(self.per_scene)

    def record(self, split: str) -> dict:
        return {"split": split, "mae": self.mae, "mse": self.mse, "n": self.n}


def count_metrics(ids: Sequence[str], predicted, actual) -> Metrics:
    """MAE and root-mean-squared count error ("MSE" by crowd-counting convention)."""
    pred = np.asarray(predicted, dtype=np.float64)
    gt = np.asarray(actual, dtype=np.float64)
    if pred.shape != gt.shape or pred.size == 0:
        raise ValueError("need equally many (>= 1) predicted and ground-truth counts")
    err = pred - gt
    return Metrics(
        mae=float(np.abs(err).mean()),
        mse=float(np.sqrt((err**2).mean())),
        per_scene=[(i, float(p), float(g)) for i, p, g in zip(ids, pred, gt)],
    )


def evaluate(params: ModelParams, scenes: Sequence[Scene]) -> Metrics:
    """Full-resolution evaluation, batch size 1, each scene cropped to the model's divisor."""
    if not scenes:
        raise ValueError("evaluate needs at least one scene")
    f = params.config.downsampling
    ids, pred, gt = [], [], []
    for s in scenes:
        s = crop_to_multiple(s, f)
        ids.append(s.id)
        pred.append(float(forward(params, s.image[None]).sum(dtype=np.float64)))
        gt.append(s.count)
    return count_metrics(ids, pred, gt)


def constant_baseline(train_scenes: Sequence[Scene], scenes: Sequence[Scene]) -> Metrics:
    """Metrics of always predicting the mean training count."""
    mean = float(np.mean([s.count for s in train_scenes]))
    return count_metrics([s.id for s in scenes], [mean] * len(scenes), [s.count for s in scenes])


@dataclass
class TrainResult:
    params: ModelParams
    history: list[dict]  # one {epoch, step, loss} per optimizer step
    epoch_losses: list[float]
    val_metrics: list[dict]

    @property
    def steps(self) -> int:
        return len(self.history)


def _fit_crop(scenes: Sequence[Scene], crop: tuple[int, int]) -> list[Scene]:
    return [s if s.image.shape[1:] == tuple(crop) else crop_scene(s, *crop) for s in scenes]


def train(train_scenes: Sequence[Scene], val_scenes: Sequence[Scene], cfg: TrainConfig,
          params: ModelParams | None = None, checkpoint_path=None,
          callback: Callable[[int, float, ModelParams], bool] | None = None) -> TrainResult:
    """Minimise the batch-mean Euclidean density loss with Adam.

    ``callback(step, loss, params)`` runs after every update; returning True
    stops training early.
    """
    cfg.validate()
    if not train_scenes:
        raise ValueError("training set is empty")
    params = params or build(cfg.model, cfg.seed, cfg.init_std)
    factor = params.config.downsampling
    scenes = _fit_crop(train_scenes, cfg.crop_size)
    images, gt, _ = stack_scenes(scenes, factor, cfg.kernel)
    rng = np.random.default_rng(cfg.seed + 1)

    flat = params.flatten()
    state = AdamState.for_params(flat, lr=cfg.lr)
    history, epoch_losses, val_metrics = [], [], []
    sink = open(cfg.log_path, "a") if cfg.log_path else None
    step = 0
    try:
        for epoch in range(1, cfg.epochs + 1):
            losses = []
            for idx in iter_batches(len(scenes), cfg.batch_size, rng):
                tape = GradTape()
                pred = forward(params, images[idx], tape)
                loss = euclidean_loss(pred, gt[idx], tape)
                value = float(loss)
                if not math.isfinite(value):
                    raise TrainingDiverged(f"loss diverged ({value}) at epoch {epoch}, step {step + 1}")
                grads = params.flat_grads(tape.backward(loss))
                flat, state = adam_step(flat, grads, state)
                params.assign(flat)
                step += 1
                losses.append(value)
                rec = {"epoch": epoch, "step": step, "loss": value}
                history.append(rec)
                if sink:
                    sink.write(json.dumps(rec) + "\n")
                stop = callback is not None and callback(step, value, params)
                if stop or (cfg.max_steps is not None and step >= cfg.max_steps):
                    epoch_losses.append(float(np.mean(losses)))
                    return TrainResult(params, history, epoch_losses, val_metrics)
            epoch_losses.append(float(np.mean(losses)))
            log.info("epoch %d mean loss %.5f", epoch, epoch_losses[-1])
            if cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
                if val_scenes:
                    rec = {**evaluate(params, val_scenes).record("val"), "epoch": epoch}
                    val_metrics.append(rec)
                    if sink:
                        sink.write(json.dumps(rec) + "\n")
                if checkpoint_path:
                    save_checkpoint(params, checkpoint_path)
    finally:
        if sink:
            sink.close()
    return TrainResult(params, history, epoch_losses, val_metrics)
