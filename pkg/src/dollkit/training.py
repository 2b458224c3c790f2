"""End-to-end pre-training on DoLL masks and adapter fine-tuning."""
from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .errors import ChannelMismatchError, ConfigError, DivergenceError
from .evaluation import evaluate_model
from .models import (OPTIMIZERS, SegModel, TrainConfig, augment, make_optimizer, model_from_arrays,
                     parameter_digest, save_model)
from .formats import read_checkpoint

EPS = 1e-7


@dataclass
class FinetuneConfig:
    freeze_backbone: bool = True
    iterations: int = 2000
    learning_rate: float = 0.001
    batch_size: int = 8
    seed: int = 0
    eval_every: int = 50
    momentum: float = 0.9
    optimizer: str = "adam"     # sgd leaves the fresh head stuck at all-background
    flip: bool = False
    rotation: bool = False
    random_crop: bool = False

    def validate(self):
        for name in ("iterations", "batch_size", "eval_every"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"finetune.{name}", "must be positive")
        if not self.learning_rate > 0:
            raise ConfigError("finetune.learning_rate", "must be > 0")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError("finetune.optimizer", f"expected one of {OPTIMIZERS}")
        return self

    def to_dict(self):
        return asdict(self)

    def as_train_config(self) -> TrainConfig:
        return TrainConfig(epochs=1, learning_rate=self.learning_rate, batch_size=self.batch_size,
                           seed=self.seed, random_crop=self.random_crop, flip=self.flip,
                           rotation=self.rotation, momentum=self.momentum,
                           optimizer=self.optimizer)


@dataclass
class Checkpoint:
    model: SegModel
    step: int
    val_metric: float
    metric_name: str
    config_digest: str = ""
    extra: dict = field(default_factory=dict)

    def digest(self, prefix: str = "") -> str:
        return parameter_digest(self.model, prefix)

    def save(self, path, seed: int = 0):
        save_model(self.model, path, self.config_digest or "0" * 64, seed,
                   {"step": self.step, "val_metric": self.val_metric, "metric_name": self.metric_name,
                    **self.extra})

    @classmethod
    def load(cls, path):
        arrays, header = read_checkpoint(path)
        extra = dict(header["extra"])
        return cls(model_from_arrays(arrays, header), extra.pop("step"), extra.pop("val_metric"),
                   extra.pop("metric_name"), header["config_digest"], extra)


def doll_bce(probs: torch.Tensor, targets: torch.Tensor, reduction: str = "mean") -> torch.Tensor:
    """Sum over channels of per-pixel binary cross entropy, probabilities clipped to [eps, 1-eps].

    ``reduction="sum"`` sums over every pixel; ``"mean"`` divides that sum by
    batch x height x width (channels stay summed).
    """
    p = probs.clamp(EPS, 1 - EPS)
    loss = -(targets * torch.log(p) + (1 - targets) * torch.log(1 - p))
    total = loss.sum()
    if reduction == "sum":
        return total
    n = loss.shape[0] * loss.shape[-1] * loss.shape[-2]
    return total / n


def _batches(rng, n, batch_size):
    while True:
        order = rng.permutation(n)
        for s in range(0, n - batch_size + 1 if n >= batch_size else 1, batch_size):
            yield order[s:s + batch_size]


@torch.no_grad()
def _loss_on(model, x, y, batch=64):
    model.eval()
    total = 0.0
    for s in range(0, len(x), batch):
        p = torch.sigmoid(model(torch.from_numpy(x[s:s + batch])))
        total += doll_bce(p, torch.from_numpy(y[s:s + batch]).float(), "sum").item()
    return total / (len(x) * x.shape[-1] * x.shape[-2])


def pretrain(segmodel: SegModel, images, masks, val_images, val_masks, cfg: TrainConfig,
             config_digest: str = "", probe_size: int = 16, log=None):
    """Train backbone and head together against DoLL planes.

    Returns (checkpoint with lowest validation loss, history rows).
    """
    cfg.validate()
    images = np.ascontiguousarray(images, np.float32)
    masks = np.ascontiguousarray(masks, np.float32)
    val_images = np.ascontiguousarray(val_images, np.float32)
    val_masks = np.ascontiguousarray(val_masks, np.float32)
    if masks.shape[1] != segmodel.out_channels:
        raise ChannelMismatchError(f"model has {segmodel.out_channels} output channels, masks have {masks.shape[1]}")
    model = copy.deepcopy(segmodel).freeze_backbone(False)
    rng = np.random.default_rng(cfg.seed)
    opt = make_optimizer(model.parameters(), cfg)
    probe_x, probe_y = images[:probe_size], masks[:probe_size]
    history = [{"epoch": 0, "split": "probe", "metric": "bce", "value": _loss_on(model, probe_x, probe_y)}]
    best = None
    n = len(images)
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        order = rng.permutation(n)
        for s in range(0, n, cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            xb, yb = augment(rng, images[idx], masks[idx], cfg)
            p = torch.sigmoid(model(torch.from_numpy(np.ascontiguousarray(xb))))
            loss = doll_bce(p, torch.from_numpy(np.ascontiguousarray(yb)))
            if not torch.isfinite(loss):
                raise DivergenceError(epoch, cfg.learning_rate, loss.item())
            opt.zero_grad()
            loss.backward()
            opt.step()
        probe = _loss_on(model, probe_x, probe_y)
        val = _loss_on(model, val_images, val_masks)
        history += [{"epoch": epoch, "split": "probe", "metric": "bce", "value": probe},
                    {"epoch": epoch, "split": "val", "metric": "bce", "value": val}]
        if log:
            log(f"[pretrain] epoch {epoch}/{cfg.epochs} probe {probe:.4f} val {val:.4f}")
        if best is None or val < best.val_metric:
            best = Checkpoint(copy.deepcopy(model), epoch, val, "val_bce", config_digest)
    best.model.eval()
    return best, history


def finetune(segmodel: SegModel, train_images, train_masks, val_images, val_masks, cfg: FinetuneConfig,
             config_digest: str = "", log=None):
    """Supervised downstream training; returns (checkpoint with the best val mIoU, history rows).

    With ``freeze_backbone`` only head parameters enter the optimizer and the
    backbone (including its normalisation statistics) is left untouched.
    """
    cfg.validate()
    if len(train_images) == 0 or len(val_images) == 0:
        raise ValueError("downstream train and val splits must be non-empty")
    if train_masks.shape[1] != segmodel.out_channels:
        raise ChannelMismatchError(
            f"model has {segmodel.out_channels} output channels, task has {train_masks.shape[1]}")
    x = np.ascontiguousarray(train_images, np.float32)
    y = np.ascontiguousarray(train_masks, np.float32)
    model = copy.deepcopy(segmodel).freeze_backbone(cfg.freeze_backbone)
    params = [p for n, p in model.named_parameters()
              if not (cfg.freeze_backbone and n.startswith("backbone."))]
    tcfg = cfg.as_train_config()
    opt = make_optimizer(params, tcfg)
    rng = np.random.default_rng(cfg.seed)
    batches = _batches(rng, len(x), min(cfg.batch_size, len(x)))

    def evaluate(it):
        rep = evaluate_model(model, val_images, val_masks)
        return {"iteration": it, "split": "val", "metric": "miou", "value": rep.miou}

    history = [evaluate(0)]
    best = Checkpoint(copy.deepcopy(model), 0, history[0]["value"], "val_miou", config_digest)
    for it in range(1, cfg.iterations + 1):
        model.train()
        idx = next(batches)
        xb, yb = augment(rng, x[idx], y[idx], tcfg)
        p = torch.sigmoid(model(torch.from_numpy(np.ascontiguousarray(xb))))
        loss = doll_bce(p, torch.from_numpy(np.ascontiguousarray(yb)))
        if not torch.isfinite(loss):
            raise DivergenceError(it, cfg.learning_rate, loss.item())
        opt.zero_grad()
        loss.backward()
        opt.step()
        if it % cfg.eval_every == 0 or it == cfg.iterations:
            row = evaluate(it)
            history.append(row)
            if log:
                log(f"[finetune] iter {it}/{cfg.iterations} loss {loss.item():.4f} val mIoU {row['value']:.4f}")
            if row["value"] > best.val_metric:
                best = Checkpoint(copy.deepcopy(model), it, row["value"], "val_miou", config_digest)
    best.model.freeze_backbone(False).eval()
    return best, history
