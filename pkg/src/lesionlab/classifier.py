"""Frozen-backbone transfer classifier with patience-based early stopping.

Two backbones share one interface: the full 50-layer pretrained residual
network, and a small randomly initialized 4-block residual net on 64x64
inputs so tests never download weights.
"""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .checkpoint import load_container, save_container
from .errors import Diverged, EmptySplit, ShapeMismatch, WeightsUnavailable
from .gan import apply_augment, draw_augment_params
from .pixels import PixelArray


@dataclass(frozen=True)
class ClassifierConfig:
    num_classes: int
    backbone: str = "resnet50"  # "resnet50" | "tiny"
    freeze_base: bool = True
    head_hidden: int = 256
    dropout: float = 0.3
    lr: float = 1e-5
    batch_size: int = 64
    max_epochs: int = 30
    patience: int = 5
    seed: int = 0

    def validate(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.patience > self.max_epochs:
            raise ValueError("patience must not exceed max_epochs")

    @property
    def input_size(self) -> int:
        return 64 if self.backbone == "tiny" else 224

    def to_dict(self) -> dict:
        return {
            "num_classes": self.num_classes, "backbone": self.backbone,
            "freeze_base": self.freeze_base, "head_hidden": self.head_hidden,
            "dropout": self.dropout, "lr": self.lr, "batch_size": self.batch_size,
            "max_epochs": self.max_epochs, "patience": self.patience, "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ClassifierConfig":
        return cls(**d)


@dataclass
class TrainingHistory:
    epochs: list = field(default_factory=list)  # (train_loss, train_acc, val_loss, val_acc)
    best_epoch: int = 0
    stopped_early: bool = False

    def val_losses(self) -> list[float]:
        return [e[2] for e in self.epochs]

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "train_loss", "train_acc", "val_loss", "val_acc"])
            for i, row in enumerate(self.epochs, start=1):
                writer.writerow([i, *row])


class _ResidualBlock(nn.Module):
    def __init__(self, in_ch, out_ch, stride):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, stride=1, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.shortcut = (
            nn.Sequential(nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False), nn.BatchNorm2d(out_ch))
            if stride != 1 or in_ch != out_ch
            else nn.Identity()
        )

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class TinyBackbone(nn.Module):
    """Four residual blocks on 64x64 inputs; output 128 feature maps."""

    out_features = 128

    def __init__(self):
        super().__init__()
        self.stem = nn.Sequential(nn.Conv2d(3, 16, 3, padding=1, bias=False), nn.BatchNorm2d(16), nn.ReLU(inplace=True))
        self.blocks = nn.Sequential(
            _ResidualBlock(16, 32, stride=2),
            _ResidualBlock(32, 64, stride=2),
            _ResidualBlock(64, 128, stride=2),
            _ResidualBlock(128, 128, stride=2),
        )

    def forward(self, x):
        return self.blocks(self.stem(x))


class LesionClassifier(nn.Module):
    """Backbone + global-average-pool head: dense(256) -> dropout -> dense(K)."""

    def __init__(self, config: ClassifierConfig, pretrained: bool = True):
        super().__init__()
        self.config = config
        if config.backbone == "tiny":
            self.backbone = TinyBackbone()
            feat = TinyBackbone.out_features
        elif config.backbone == "resnet50":
            try:
                from torchvision.models import resnet50

                if pretrained:
                    from torchvision.models import ResNet50_Weights

                    net = resnet50(weights=ResNet50_Weights.IMAGENET1K_V1)
                else:
                    net = resnet50(weights=None)
            except Exception as exc:
                raise WeightsUnavailable(f"cannot build pretrained backbone: {exc}") from exc
            net.avgpool = nn.Identity()
            net.fc = nn.Identity()
            # Keep only the convolutional trunk; pooling happens in the head.
            self.backbone = nn.Sequential(
                net.conv1, net.bn1, net.relu, net.maxpool,
                net.layer1, net.layer2, net.layer3, net.layer4,
            )
            feat = 2048
        else:
            raise ValueError(f"unknown backbone {config.backbone!r}")

        self.head = nn.Sequential(
            nn.AdaptiveAvgPool2d(1),
            nn.Flatten(),
            nn.Linear(feat, config.head_hidden),
            nn.ReLU(inplace=True),
            nn.Dropout(config.dropout),
            nn.Linear(config.head_hidden, config.num_classes),
        )
        if config.freeze_base:
            for p in self.backbone.parameters():
                p.requires_grad_(False)

    def train(self, mode: bool = True):
        # A frozen backbone must not even update batch-norm running stats.
        super().train(mode)
        if self.config.freeze_base:
            self.backbone.eval()
        return self

    def forward(self, x):
        size = self.config.input_size
        if x.ndim != 4 or x.shape[1:] != (3, size, size):
            raise ShapeMismatch(f"expected Nx3x{size}x{size}, got {tuple(x.shape)}")
        if self.config.freeze_base:
            with torch.no_grad():
                feats = self.backbone(x)
        else:
            feats = self.backbone(x)
        return self.head(feats)


def build_model(config: ClassifierConfig, pretrained: bool = True) -> LesionClassifier:
    config.validate()
    torch.manual_seed(config.seed)
    model = LesionClassifier(config, pretrained=pretrained)
    return model


def backbone_checksum(model: LesionClassifier) -> str:
    """SHA-256 over the backbone's parameter and buffer bytes."""
    h = hashlib.sha256()
    for name, tensor in sorted(model.backbone.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def trainable_parameter_count(model: LesionClassifier) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def classifier_augment(img: PixelArray, seed: int) -> PixelArray:
    """Random flip / rotation / color jitter, no affine component."""
    rng = np.random.default_rng(seed)
    return apply_augment(img, draw_augment_params(rng, affine=False))


def early_stopping_scan(val_losses: list[float], patience: int) -> tuple[int, int, bool]:
    """Replay the stopping rule over a recorded validation-loss series.

    Returns (stop_epoch, best_epoch, stopped_early), epochs 1-indexed.
    Training stops once the loss has failed to improve for `patience`
    consecutive epochs.
    """
    best = math.inf
    best_epoch = 0
    since_best = 0
    for epoch, loss in enumerate(val_losses, start=1):
        if loss < best:
            best = loss
            best_epoch = epoch
            since_best = 0
        else:
            since_best += 1
        if since_best >= patience:
            return epoch, best_epoch, True
    return len(val_losses), best_epoch, False


@dataclass
class ModelCheckpoint:
    weights: dict  # state_dict as numpy arrays
    config: ClassifierConfig
    class_name_order: list[str]
    history: TrainingHistory

    def build(self) -> LesionClassifier:
        model = LesionClassifier(self.config, pretrained=False)
        state = {k: torch.from_numpy(v.copy()) for k, v in self.weights.items()}
        model.load_state_dict(state)
        model.eval()
        return model

    def save(self, path):
        header = {
            "kind": "classifier",
            "config": self.config.to_dict(),
            "class_name_order": self.class_name_order,
            "history": {
                "epochs": self.history.epochs,
                "best_epoch": self.history.best_epoch,
                "stopped_early": self.history.stopped_early,
            },
        }
        save_container(path, header, self.weights)

    @classmethod
    def load(cls, path) -> "ModelCheckpoint":
        header, arrays = load_container(path)
        hist = TrainingHistory(
            epochs=[tuple(e) for e in header["history"]["epochs"]],
            best_epoch=header["history"]["best_epoch"],
            stopped_early=header["history"]["stopped_early"],
        )
        return cls(
            weights=arrays,
            config=ClassifierConfig.from_dict(header["config"]),
            class_name_order=header["class_name_order"],
            history=hist,
        )


def _to_tensor(images: np.ndarray) -> torch.Tensor:
    # N x H x W x 3 float -> N x 3 x H x W
    if images.ndim != 4 or images.shape[-1] != 3:
        raise ShapeMismatch(f"expected NxHxWx3 images, got {images.shape}")
    return torch.from_numpy(np.ascontiguousarray(images.transpose(0, 3, 1, 2), dtype=np.float32))


def _epoch_pass(model, X, y, batch_size, optimizer=None, order=None):
    n = len(y)
    idx = np.arange(n) if order is None else order
    losses, correct = [], 0
    for start in range(0, n, batch_size):
        sel = idx[start : start + batch_size]
        xb = _to_tensor(X[sel])
        yb = torch.from_numpy(y[sel].astype(np.int64))
        if optimizer is not None:
            optimizer.zero_grad()
            logits = model(xb)
            loss = F.cross_entropy(logits, yb)
            loss.backward()
            optimizer.step()
        else:
            with torch.no_grad():
                logits = model(xb)
                loss = F.cross_entropy(logits, yb)
        losses.append(float(loss.detach()) * len(sel))
        correct += int((logits.argmax(dim=1) == yb).sum())
    return sum(losses) / n, correct / n


def train_classifier(
    split_data: dict,
    config: ClassifierConfig,
    class_name_order: list[str],
    pretrained: bool = True,
) -> tuple[ModelCheckpoint, TrainingHistory]:
    """Cross-entropy training with best-epoch weight restoration.

    split_data maps "train"/"validation" to (images NxHxWx3, labels N)
    pairs of backbone-normalized float arrays.
    """
    config.validate()
    for name in ("train", "validation"):
        if name not in split_data or len(split_data[name][1]) == 0:
            raise EmptySplit(f"split {name!r} is empty")

    model = build_model(config, pretrained=pretrained)
    train_params = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.Adam(train_params, lr=config.lr)
    Xtr, ytr = split_data["train"]
    Xval, yval = split_data["validation"]

    history = TrainingHistory()
    best_loss = math.inf
    best_state = None
    since_best = 0
    rng = np.random.default_rng(config.seed)

    for epoch in range(1, config.max_epochs + 1):
        model.train()
        order = rng.permutation(len(ytr))
        train_loss, train_acc = _epoch_pass(model, Xtr, ytr, config.batch_size, optimizer, order)
        model.eval()
        val_loss, val_acc = _epoch_pass(model, Xval, yval, config.batch_size)
        if not all(math.isfinite(v) for v in (train_loss, val_loss)):
            raise Diverged(f"non-finite loss at epoch {epoch}")
        history.epochs.append((train_loss, train_acc, val_loss, val_acc))

        if val_loss < best_loss:
            best_loss = val_loss
            history.best_epoch = epoch
            since_best = 0
            best_state = {k: v.detach().cpu().numpy().copy() for k, v in model.state_dict().items()}
        else:
            since_best += 1
        if since_best >= config.patience:
            history.stopped_early = True
            break

    ckpt = ModelCheckpoint(
        weights=best_state,
        config=config,
        class_name_order=list(class_name_order),
        history=history,
    )
    return ckpt, history


def predict_proba(ckpt: ModelCheckpoint, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Softmax class probabilities, rows in ckpt.class_name_order."""
    model = ckpt.build()
    out = []
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            logits = model(_to_tensor(images[start : start + batch_size]))
            out.append(F.softmax(logits, dim=1).numpy())
    return np.concatenate(out, axis=0)
