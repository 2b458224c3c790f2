"""Small differentiable model zoo.

Weak learners are shallow CNNs (plus one MLP) that end in per-class sigmoid
logits.  Segmentation models are U-Net shaped: an ``Encoder`` backbone shared
with the CNN classifiers, and a light decoder head.  Parameter names start with
``backbone.`` or ``head.``, which is what the freeze boundary keys on.
"""
from __future__ import annotations

import copy
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from sklearn.metrics import roc_auc_score

from .errors import ConfigError, DivergenceError, NumericError
from .formats import ArtifactHeader, digest_arrays, read_checkpoint, write_checkpoint

CLASSIFIER_ARCHS = {
    "cnn-s": {"widths": (8, 16, 32), "depth": 1},
    "cnn-m": {"widths": (12, 24, 48), "depth": 2},
    "cnn-d": {"widths": (8, 16, 24, 32), "depth": 1},
    "cnn-w": {"widths": (16, 32, 48), "depth": 1},
    "mlp": {"hidden": 32},
}
SEG_ARCHS = {
    "unet-s": {"widths": (8, 16, 32), "depth": 2},
    "unet-m": {"widths": (12, 24, 48), "depth": 2},
}
# segmentation arch -> classifier arch whose trunk is weight-compatible
BACKBONE_DONOR = {"unet-s": None, "unet-m": "cnn-m"}


OPTIMIZERS = ("sgd", "adam")


@dataclass
class TrainConfig:
    epochs: int = 10
    learning_rate: float = 0.01
    batch_size: int = 32
    seed: int = 0
    random_crop: bool = False
    flip: bool = False
    rotation: bool = False
    momentum: float = 0.9
    weight_decay: float = 0.0
    optimizer: str = "sgd"

    def validate(self, prefix="train"):
        for name in ("epochs", "batch_size"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{prefix}.{name}", "must be positive")
        if not self.learning_rate > 0:
            raise ConfigError(f"{prefix}.learning_rate", "must be > 0")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"{prefix}.optimizer", f"expected one of {OPTIMIZERS}")
        return self

    def to_dict(self):
        return asdict(self)


def _conv_block(cin, cout):
    return nn.Sequential(nn.Conv2d(cin, cout, 3, padding=1, bias=False), nn.BatchNorm2d(cout),
                         nn.ReLU(inplace=True))


class Encoder(nn.Module):
    def __init__(self, in_channels, widths, depth):
        super().__init__()
        stages, cin = [], in_channels
        for w in widths:
            layers = [_conv_block(cin if i == 0 else w, w) for i in range(depth)]
            stages.append(nn.Sequential(*layers))
            cin = w
        self.stages = nn.ModuleList(stages)
        self.widths = tuple(widths)

    def forward(self, x):
        feats = []
        for i, stage in enumerate(self.stages):
            if i:
                x = F.max_pool2d(x, 2)
            x = stage(x)
            feats.append(x)
        return feats


class Classifier(nn.Module):
    def __init__(self, arch_id, n_classes, input_channels=1, image_size=64):
        super().__init__()
        if arch_id not in CLASSIFIER_ARCHS:
            raise ConfigError("arch_id", f"unknown classifier arch {arch_id!r}")
        spec = CLASSIFIER_ARCHS[arch_id]
        self.arch_id, self.n_classes = arch_id, n_classes
        self.input_channels, self.image_size = input_channels, image_size
        if arch_id == "mlp":
            self.encoder = nn.Sequential(nn.Flatten(),
                                         nn.Linear(input_channels * image_size ** 2, spec["hidden"]),
                                         nn.ReLU(inplace=True))
            self.fc = nn.Linear(spec["hidden"], n_classes)
        else:
            self.encoder = Encoder(input_channels, spec["widths"], spec["depth"])
            self.fc = nn.Linear(spec["widths"][-1], n_classes)

    def forward(self, x):
        h = self.encoder(x)
        if isinstance(h, list):
            h = h[-1].mean(dim=(2, 3))
        return self.fc(h)


class SegHead(nn.Module):
    """Decoder: upsample, concatenate the skip feature, 3x3 conv; then 1x1 to classes."""

    def __init__(self, widths, out_channels):
        super().__init__()
        ups = []
        for deep, skip in zip(widths[:0:-1], widths[-2::-1]):
            ups.append(nn.Sequential(nn.Conv2d(deep + skip, skip, 3, padding=1), nn.ReLU(inplace=True)))
        self.ups = nn.ModuleList(ups)
        self.out = nn.Conv2d(widths[0], out_channels, 1)

    def forward(self, feats):
        x = feats[-1]
        for up, skip in zip(self.ups, feats[-2::-1]):
            x = F.interpolate(x, size=skip.shape[-2:], mode="bilinear", align_corners=False)
            x = up(torch.cat([x, skip], dim=1))
        return self.out(x)


class SegModel(nn.Module):
    def __init__(self, arch_id, out_channels, in_channels=1):
        super().__init__()
        if arch_id not in SEG_ARCHS:
            raise ConfigError("arch_id", f"unknown segmentation arch {arch_id!r}")
        if out_channels < 1:
            raise ConfigError("out_channels", "must be >= 1")
        spec = SEG_ARCHS[arch_id]
        self.arch_id, self.out_channels, self.in_channels = arch_id, out_channels, in_channels
        self.backbone = Encoder(in_channels, spec["widths"], spec["depth"])
        self.head = SegHead(spec["widths"], out_channels)
        self.frozen_backbone = False

    def forward(self, x):
        if self.frozen_backbone:
            with torch.no_grad():
                feats = self.backbone(x)
        else:
            feats = self.backbone(x)
        return self.head(feats)

    def train(self, mode=True):
        super().train(mode)
        if self.frozen_backbone:
            # running BN statistics belong to the backbone and stay frozen
            self.backbone.eval()
        return self

    def freeze_backbone(self, frozen=True):
        self.frozen_backbone = frozen
        self.backbone.requires_grad_(not frozen)
        self.train(self.training)
        return self

    def param_tags(self):
        return {name: name.split(".", 1)[0] for name in self.state_dict()}


# --- construction --------------------------------------------------------

def _seeded_init(module, seed):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        for m in module.modules():
            if isinstance(m, (nn.Conv2d, nn.Linear)):
                m.reset_parameters()
    return module


def build_classifier(arch_id, n_classes, input_channels=1, image_size=64, seed=0) -> Classifier:
    return _seeded_init(Classifier(arch_id, n_classes, input_channels, image_size), seed)


def build_segmodel(arch_id, out_channels, in_channels=1, seed=0) -> SegModel:
    return _seeded_init(SegModel(arch_id, out_channels, in_channels), seed)


def replace_head(segmodel: SegModel, out_channels: int, seed: int = 0, reset_decoder: bool = False) -> SegModel:
    """New model sharing the backbone weights, with a re-initialised output projection.

    The pretrained decoder is kept unless ``reset_decoder``; only the 1x1 class
    projection depends on the task's channel count.
    """
    if out_channels < 1:
        raise ConfigError("out_channels", "must be >= 1")
    new = SegModel(segmodel.arch_id, out_channels, segmodel.in_channels)
    new.backbone.load_state_dict(segmodel.backbone.state_dict())
    if reset_decoder:
        _seeded_init(new.head, seed)
    else:
        new.head.ups.load_state_dict(segmodel.head.ups.state_dict())
        _seeded_init(new.head.out, seed)
    return new


def transplant_backbone(classifier: Classifier, segmodel: SegModel) -> SegModel:
    """Copy a CNN classifier's trunk into ``segmodel.backbone`` (shapes must agree)."""
    if not isinstance(classifier.encoder, Encoder):
        raise ConfigError("arch_id", f"{classifier.arch_id} has no convolutional trunk")
    segmodel.backbone.load_state_dict(classifier.encoder.state_dict())
    return segmodel


def state_arrays(module: nn.Module, prefix: str = "") -> dict:
    return {k: v.detach().cpu().numpy() for k, v in module.state_dict().items() if k.startswith(prefix)}


def parameter_digest(module: nn.Module, prefix: str = "") -> str:
    return digest_arrays(state_arrays(module, prefix))


def count_parameters(module: nn.Module, prefix: str = "") -> int:
    return sum(p.numel() for n, p in module.named_parameters() if n.startswith(prefix))


# --- inference -----------------------------------------------------------

def _as_batch(model, images) -> torch.Tensor:
    x = torch.as_tensor(np.asarray(images), dtype=next(model.parameters()).dtype)
    if x.ndim == 2:
        x = x[None, None]
    elif x.ndim == 3:
        x = x[None]
    want = model.input_channels if isinstance(model, Classifier) else model.in_channels
    if x.ndim != 4 or x.shape[1] != want:
        raise ValueError(f"expected images with {want} channel(s), got shape {tuple(np.shape(images))}")
    if isinstance(model, Classifier) and model.arch_id == "mlp" and x.shape[-1] != model.image_size:
        raise ValueError(f"mlp expects {model.image_size}px images, got {x.shape[-1]}px")
    return x


@torch.no_grad()
def predict(classifier: Classifier, images, batch_size: int = 256) -> np.ndarray:
    """Per-class probabilities; a single image gives a length-C vector."""
    single = np.ndim(images) in (2, 3)
    x = _as_batch(classifier, images)
    classifier.eval()
    out = torch.cat([torch.sigmoid(classifier(x[i:i + batch_size])) for i in range(0, len(x), batch_size)])
    out = out.numpy()
    return out[0] if single else out


@torch.no_grad()
def predict_masks(segmodel: SegModel, images, batch_size: int = 128) -> np.ndarray:
    x = _as_batch(segmodel, images)
    segmodel.eval()
    return torch.cat([torch.sigmoid(segmodel(x[i:i + batch_size]))
                      for i in range(0, len(x), batch_size)]).numpy()


def class_loss(logits: torch.Tensor, class_index: int) -> torch.Tensor:
    """Per-sample -log sigmoid(z_c): BCE against a positive target."""
    return F.softplus(-logits[:, class_index])


def loss_gradients(classifier: Classifier, x: torch.Tensor, class_index: int) -> torch.Tensor:
    """d(-log p_c)/dx for every sample of a batch (samples are independent in eval mode)."""
    classifier.eval()
    x = x.detach().clone().requires_grad_(True)
    loss = class_loss(classifier(x), class_index).sum()
    (grad,) = torch.autograd.grad(loss, x)
    return grad


def loss_gradient(classifier: Classifier, image, class_index: int) -> np.ndarray:
    if not 0 <= class_index < classifier.n_classes:
        raise ValueError(f"class_index {class_index} outside [0, {classifier.n_classes})")
    image = np.asarray(image)
    grad = loss_gradients(classifier, _as_batch(classifier, image), class_index)[0].numpy()
    if not np.all(np.isfinite(grad)):
        raise NumericError(f"non-finite input gradient for class {class_index}")
    return grad.reshape(image.shape)


# --- training ------------------------------------------------------------

def augment(rng: np.random.Generator, x: np.ndarray, masks: np.ndarray | None, cfg: TrainConfig):
    """Per-sample random flip / quarter-turn rotation / padded crop, mirrored onto masks."""
    x = x.copy()
    masks = None if masks is None else masks.copy()
    for i in range(len(x)):
        ops = []
        if cfg.flip and rng.random() < 0.5:
            ops.append(lambda a: a[..., ::-1])
        if cfg.rotation:
            k = int(rng.integers(4))
            ops.append(lambda a, k=k: np.rot90(a, k, axes=(-2, -1)))
        if cfg.random_crop:
            pad = max(1, x.shape[-1] // 16)
            dy, dx = rng.integers(-pad, pad + 1, size=2)
            ops.append(lambda a, dy=dy, dx=dx: _shift(a, int(dy), int(dx)))
        for op in ops:
            x[i] = op(x[i])
            if masks is not None:
                masks[i] = op(masks[i])
    return x, masks


def _shift(a, dy, dx):
    """Translate with edge replication (a crop of the padded image)."""
    h, w = a.shape[-2:]
    padded = np.pad(a, [(0, 0)] * (a.ndim - 2) + [(abs(dy),) * 2, (abs(dx),) * 2], mode="edge")
    y0, x0 = abs(dy) - dy, abs(dx) - dx
    return padded[..., y0:y0 + h, x0:x0 + w]


def make_optimizer(params, cfg: TrainConfig):
    if cfg.optimizer == "adam":
        return torch.optim.Adam(params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    return torch.optim.SGD(params, lr=cfg.learning_rate, momentum=cfg.momentum,
                           weight_decay=cfg.weight_decay)


def per_class_auc(labels: np.ndarray, probs: np.ndarray) -> list:
    out = []
    for c in range(labels.shape[1]):
        y = labels[:, c]
        out.append(float(roc_auc_score(y, probs[:, c])) if 0 < y.sum() < len(y) else float("nan"))
    return out


def fit_classifier(model: Classifier, x_train, y_train, x_val, y_val, cfg: TrainConfig, log=None):
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    opt = make_optimizer(model.parameters(), cfg)
    n = len(x_train)
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xb, _ = augment(rng, x_train[idx], None, cfg)
            logits = model(torch.from_numpy(np.ascontiguousarray(xb)))
            # sum of per-class BCEs, averaged over the batch
            loss = F.binary_cross_entropy_with_logits(
                logits, torch.from_numpy(y_train[idx]), reduction="sum") / len(idx)
            if not torch.isfinite(loss):
                raise DivergenceError(epoch, cfg.learning_rate, loss.item())
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        if log:
            log(f"[{model.arch_id}] epoch {epoch}/{cfg.epochs} loss {total / n:.4f}")
    aucs = per_class_auc(y_val, predict(model, x_val))
    model.eval()
    return model, aucs


def train_classifier(corpus, arch_id: str, train_cfg: TrainConfig, log=None):
    """Train one weak learner on ``corpus``'s train split; returns (classifier, val AUC per class)."""
    x_tr, y_tr, _ = corpus.arrays("train")
    x_va, y_va, _ = corpus.arrays("val")
    model = build_classifier(arch_id, y_tr.shape[1], x_tr.shape[1], x_tr.shape[-1], seed=train_cfg.seed)
    return fit_classifier(model, x_tr, y_tr, x_va, y_va, train_cfg, log=log)


# --- persistence ---------------------------------------------------------

def save_model(model, path, config_digest: str, seed: int = 0, extra: dict | None = None) -> None:
    if isinstance(model, Classifier):
        kind = "classifier"
        meta = {"n_classes": model.n_classes, "input_channels": model.input_channels,
                "image_size": model.image_size}
        tags = {k: ("head" if k.startswith("fc.") else "backbone") for k in model.state_dict()}
    else:
        kind = "segmodel"
        meta = {"out_channels": model.out_channels, "in_channels": model.in_channels}
        tags = model.param_tags()
    header = {"artifact": ArtifactHeader(kind, config_digest).to_dict(), "arch_id": model.arch_id,
              "tags": tags, "seed": seed, "config_digest": config_digest, "model": meta,
              "extra": extra or {}}
    write_checkpoint(path, state_arrays(model), header)


def model_from_arrays(arrays: dict, header: dict):
    kind, meta = header["artifact"]["kind"], header["model"]
    if kind == "classifier":
        model = Classifier(header["arch_id"], meta["n_classes"], meta["input_channels"], meta["image_size"])
    else:
        model = SegModel(header["arch_id"], meta["out_channels"], meta["in_channels"])
    model.load_state_dict({k: torch.from_numpy(v) for k, v in arrays.items()})
    model.eval()
    return model


def load_model(path):
    arrays, header = read_checkpoint(path)
    return model_from_arrays(arrays, header), header


def clone_model(model):
    return copy.deepcopy(model)


