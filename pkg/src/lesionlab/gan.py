"""Per-class DCGAN: networks, augmentation, and the adversarial loop.

One model is trained per minority class on 128x128 images in [-1, 1].
Discriminator targets are smoothed to 0.9 (real) / 0.4 (fake); the
generator trains against a hard 1.0 target.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
import torch
from torch import nn

from .checkpoint import load_container, save_container
from .errors import BadSpec, Diverged, InsufficientData, ShapeMismatch
from .pixels import PixelArray, RangeTag

_EPS = 1e-7


@dataclass(frozen=True)
class GeneratorSpec:
    nz: int = 100
    base_channels: int = 512
    out_size: int = 128
    out_channels: int = 3

    def validate(self):
        stages = int(math.log2(self.out_size / 4))
        if 4 * 2**stages != self.out_size or stages < 1:
            raise BadSpec(f"out_size {self.out_size} is not 4 doubled an integral number of times")
        if self.base_channels < 2 ** (stages - 1):
            raise BadSpec("base_channels too small for the stage count")
        if self.nz <= 0:
            raise BadSpec("nz must be positive")
        return stages


@dataclass(frozen=True)
class DiscriminatorSpec:
    in_size: int = 128
    base_channels: int = 64

    def validate(self):
        if self.in_size != 128:
            raise BadSpec(f"discriminator expects 128x128 inputs, got {self.in_size}")
        if self.base_channels <= 0:
            raise BadSpec("base_channels must be positive")


@dataclass(frozen=True)
class GanTrainConfig:
    lr_g: float = 1e-5
    lr_d: float = 1e-5
    batch_size: int = 64
    epochs: int = 300
    real_label: float = 0.9
    fake_label: float = 0.4
    seed: int = 0
    checkpoint_every: int = 0
    nz: int = 100
    g_base_channels: int = 512
    d_base_channels: int = 64

    def validate(self):
        if not (0 < self.fake_label < self.real_label <= 1):
            raise BadSpec("labels must satisfy 0 < fake < real <= 1")
        if self.lr_g <= 0 or self.lr_d <= 0:
            raise BadSpec("learning rates must be positive")

    def to_dict(self) -> dict:
        return {
            "lr_g": self.lr_g, "lr_d": self.lr_d, "batch_size": self.batch_size,
            "epochs": self.epochs, "real_label": self.real_label,
            "fake_label": self.fake_label, "seed": self.seed,
            "checkpoint_every": self.checkpoint_every, "nz": self.nz,
            "g_base_channels": self.g_base_channels,
            "d_base_channels": self.d_base_channels,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GanTrainConfig":
        return cls(**d)


class Generator(nn.Module):
    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        stages = spec.validate()
        self.spec = spec
        self.project = nn.Linear(spec.nz, spec.base_channels * 4 * 4)
        self.entry = nn.Sequential(nn.BatchNorm2d(spec.base_channels), nn.ReLU(inplace=True))
        blocks = []
        ch = spec.base_channels
        for i in range(stages):
            out_ch = spec.out_channels if i == stages - 1 else ch // 2
            blocks.append(nn.ConvTranspose2d(ch, out_ch, 4, stride=2, padding=1, bias=False))
            if i < stages - 1:
                blocks.append(nn.BatchNorm2d(out_ch))
                blocks.append(nn.ReLU(inplace=True))
            ch = out_ch
        blocks.append(nn.Tanh())
        self.blocks = nn.Sequential(*blocks)

    def forward(self, z):
        if z.ndim != 2 or z.shape[1] != self.spec.nz:
            raise ShapeMismatch(f"latent batch must be Nx{self.spec.nz}, got {tuple(z.shape)}")
        x = self.project(z).view(-1, self.spec.base_channels, 4, 4)
        return self.blocks(self.entry(x))


class Discriminator(nn.Module):
    def __init__(self, spec: DiscriminatorSpec):
        super().__init__()
        spec.validate()
        self.spec = spec
        bc = spec.base_channels
        channels = [3, bc, 2 * bc, 4 * bc, 8 * bc]
        layers = []
        for i in range(4):
            layers.append(nn.Conv2d(channels[i], channels[i + 1], 4, stride=2, padding=1, bias=False))
            if i > 0:
                layers.append(nn.BatchNorm2d(channels[i + 1]))
            layers.append(nn.LeakyReLU(0.2, inplace=True))
        layers.append(nn.Conv2d(channels[-1], 1, 8, stride=1, padding=0, bias=False))
        layers.append(nn.Sigmoid())
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        if x.ndim != 4 or x.shape[1:] != (3, self.spec.in_size, self.spec.in_size):
            raise ShapeMismatch(
                f"expected Nx3x{self.spec.in_size}x{self.spec.in_size}, got {tuple(x.shape)}"
            )
        return self.net(x).view(-1)


def build_generator(spec: GeneratorSpec = GeneratorSpec(), seed: int = 0) -> Generator:
    torch.manual_seed(seed)
    return Generator(spec)


def build_discriminator(spec: DiscriminatorSpec = DiscriminatorSpec(), seed: int = 0) -> Discriminator:
    torch.manual_seed(seed)
    return Discriminator(spec)


def sample_latent(batch_size: int, nz: int, seed: int) -> torch.Tensor:
    rng = np.random.default_rng(seed)
    return torch.from_numpy(rng.standard_normal((batch_size, nz)).astype(np.float32))


def bce_with_smoothing(prediction: float, target: float) -> float:
    """Binary cross-entropy with an epsilon clamp on the prediction."""
    p = min(max(float(prediction), _EPS), 1.0 - _EPS)
    t = float(target)
    return -(t * math.log(p) + (1.0 - t) * math.log(1.0 - p))


def _bce_torch(pred: torch.Tensor, target_value: float) -> torch.Tensor:
    p = pred.clamp(_EPS, 1.0 - _EPS)
    t = torch.full_like(p, target_value)
    return -(t * p.log() + (1 - t) * (1 - p).log()).mean()


# --- augmentation ---

@dataclass(frozen=True)
class AugmentParams:
    flip_h: bool = False
    flip_v: bool = False
    angle_deg: float = 0.0
    translate: tuple[float, float] = (0.0, 0.0)  # fractions of width/height
    scale: float = 1.0
    brightness: float = 0.0  # additive, in units of the tag's span
    contrast: float = 1.0

    def is_identity_warp(self) -> bool:
        return self.angle_deg == 0.0 and self.translate == (0.0, 0.0) and self.scale == 1.0


def draw_augment_params(rng: np.random.Generator, affine: bool = True) -> AugmentParams:
    return AugmentParams(
        flip_h=bool(rng.random() < 0.5),
        flip_v=bool(rng.random() < 0.5),
        angle_deg=float(rng.uniform(-15, 15)),
        translate=(float(rng.uniform(-0.05, 0.05)), float(rng.uniform(-0.05, 0.05))) if affine else (0.0, 0.0),
        scale=float(rng.uniform(0.9, 1.1)) if affine else 1.0,
        brightness=float(rng.uniform(-0.05, 0.05)),
        contrast=float(rng.uniform(0.9, 1.1)),
    )


_TAG_BOUNDS = {
    RangeTag.UNIT_0_1: (0.0, 1.0),
    RangeTag.SIGNED_M1_1: (-1.0, 1.0),
}


def apply_augment(img: PixelArray, params: AugmentParams) -> PixelArray:
    if img.range_tag not in _TAG_BOUNDS:
        raise ShapeMismatch(f"augmentation expects unit or signed images, got {img.range_tag}")
    lo, hi = _TAG_BOUNDS[img.range_tag]
    v = img.values
    if params.flip_h:
        v = v[:, ::-1, :]
    if params.flip_v:
        v = v[::-1, :, :]
    if not params.is_identity_warp():
        h, w = v.shape[:2]
        m = cv2.getRotationMatrix2D((w / 2, h / 2), params.angle_deg, params.scale)
        m[0, 2] += params.translate[0] * w
        m[1, 2] += params.translate[1] * h
        v = cv2.warpAffine(
            np.ascontiguousarray(v), m, (w, h),
            flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_REFLECT_101,
        )
    v = np.ascontiguousarray(v, dtype=np.float32)
    mid = (lo + hi) / 2
    v = (v - mid) * params.contrast + mid + params.brightness * (hi - lo)
    return PixelArray(np.clip(v, lo, hi), img.range_tag)


def gan_augment(img: PixelArray, seed: int) -> PixelArray:
    """Random flip / rotation / color jitter / affine draw, seeded."""
    rng = np.random.default_rng(seed)
    return apply_augment(img, draw_augment_params(rng, affine=True))


# --- checkpoints ---

@dataclass
class GanCheckpoint:
    class_name: str
    generator_weights: dict
    discriminator_weights: dict
    config: GanTrainConfig
    loss_history: list = field(default_factory=list)  # [(loss_G, loss_D), ...]
    epoch: int = 0

    @property
    def ckpt_id(self) -> str:
        return f"gan_{self.class_name}_{self.epoch}"

    def build_generator(self) -> Generator:
        spec = GeneratorSpec(nz=self.config.nz, base_channels=self.config.g_base_channels)
        gen = Generator(spec)
        state = {k: torch.from_numpy(v.copy()) for k, v in self.generator_weights.items()}
        gen.load_state_dict(state)
        gen.eval()
        return gen

    def build_discriminator(self) -> Discriminator:
        disc = Discriminator(DiscriminatorSpec(base_channels=self.config.d_base_channels))
        state = {k: torch.from_numpy(v.copy()) for k, v in self.discriminator_weights.items()}
        disc.load_state_dict(state)
        disc.eval()
        return disc

    def save(self, path):
        arrays = {}
        for prefix, weights in (("g", self.generator_weights), ("d", self.discriminator_weights)):
            for k, v in weights.items():
                arrays[f"{prefix}/{k}"] = v
        header = {
            "kind": "gan",
            "class_name": self.class_name,
            "config": self.config.to_dict(),
            "loss_history": self.loss_history,
            "epoch": self.epoch,
        }
        save_container(path, header, arrays)

    @classmethod
    def load(cls, path) -> "GanCheckpoint":
        header, arrays = load_container(path)
        gen, disc = {}, {}
        for name, arr in arrays.items():
            prefix, key = name.split("/", 1)
            (gen if prefix == "g" else disc)[key] = arr
        return cls(
            class_name=header["class_name"],
            generator_weights=gen,
            discriminator_weights=disc,
            config=GanTrainConfig.from_dict(header["config"]),
            loss_history=[tuple(x) for x in header["loss_history"]],
            epoch=header["epoch"],
        )


def _state_to_numpy(module: nn.Module) -> dict:
    return {k: v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()}


def generate(ckpt: GanCheckpoint, count: int, seed: int, batch_size: int = 64) -> np.ndarray:
    """Sample `count` images from a checkpointed generator.

    Returns count x H x W x 3 float32 in [-1, 1], deterministic per seed.
    """
    if count == 0:
        return np.zeros((0, 128, 128, 3), dtype=np.float32)
    gen = ckpt.build_generator()
    out = []
    done = 0
    with torch.no_grad():
        while done < count:
            n = min(batch_size, count - done)
            chunk_seed = int(np.random.SeedSequence([seed, done]).generate_state(1)[0])
            z = sample_latent(n, ckpt.config.nz, seed=chunk_seed)
            imgs = gen(z).permute(0, 2, 3, 1).numpy()
            out.append(imgs)
            done += n
    return np.concatenate(out, axis=0).astype(np.float32)


def train_dcgan(
    class_images: list[PixelArray],
    config: GanTrainConfig,
    class_name: str = "",
    out_dir=None,
    freeze_generator: bool = False,
    loss_hook=None,
) -> GanCheckpoint:
    """Alternating D/G updates with smoothed discriminator targets.

    Classes smaller than one batch are cycled with fresh augmentation draws.
    Raises Diverged (carrying the last finite checkpoint) on non-finite loss.
    """
    config.validate()
    if not class_images:
        raise InsufficientData(f"class {class_name!r} has no images")
    for img in class_images:
        if img.range_tag is not RangeTag.SIGNED_M1_1 or (img.height, img.width) != (128, 128):
            raise ShapeMismatch("training images must be 128x128 in [-1, 1]")

    torch.manual_seed(config.seed)
    gen = Generator(GeneratorSpec(nz=config.nz, base_channels=config.g_base_channels))
    disc = Discriminator(DiscriminatorSpec(base_channels=config.d_base_channels))
    opt_g = torch.optim.Adam(gen.parameters(), lr=config.lr_g, betas=(0.5, 0.999))
    opt_d = torch.optim.Adam(disc.parameters(), lr=config.lr_d, betas=(0.5, 0.999))

    base = np.stack([img.values for img in class_images])  # N,H,W,3
    n_images = len(class_images)
    steps_per_epoch = max(1, n_images // config.batch_size)
    rng = np.random.default_rng(config.seed)

    loss_history: list[tuple[float, float]] = []
    last_good: GanCheckpoint | None = None

    def snapshot(epoch: int) -> GanCheckpoint:
        return GanCheckpoint(
            class_name=class_name,
            generator_weights=_state_to_numpy(gen),
            discriminator_weights=_state_to_numpy(disc),
            config=config,
            loss_history=list(loss_history),
            epoch=epoch,
        )

    for epoch in range(1, config.epochs + 1):
        g_losses, d_losses = [], []
        for _ in range(steps_per_epoch):
            idx = rng.integers(0, n_images, size=config.batch_size)
            item_seeds = rng.integers(0, 2**31 - 1, size=config.batch_size)
            batch = np.empty((config.batch_size, 128, 128, 3), dtype=np.float32)
            for j, (i, s) in enumerate(zip(idx, item_seeds)):
                aug = gan_augment(PixelArray(base[i], RangeTag.SIGNED_M1_1), int(s))
                batch[j] = aug.values
            real = torch.from_numpy(batch).permute(0, 3, 1, 2).contiguous()

            z = torch.from_numpy(
                rng.standard_normal((config.batch_size, config.nz)).astype(np.float32)
            )

            # Discriminator step: smoothed real/fake targets.
            opt_d.zero_grad()
            d_real = disc(real)
            loss_real = _bce_torch(d_real, config.real_label)
            fake = gen(z)
            d_fake = disc(fake.detach())
            loss_fake = _bce_torch(d_fake, config.fake_label)
            if loss_hook is not None:
                loss_hook("d_real", config.real_label)
                loss_hook("d_fake", config.fake_label)
            loss_d = loss_real + loss_fake
            loss_d.backward()
            opt_d.step()

            # Generator step against a hard 1.0 target.
            if freeze_generator:
                with torch.no_grad():
                    loss_g = _bce_torch(disc(gen(z)), 1.0)
            else:
                opt_g.zero_grad()
                loss_g = _bce_torch(disc(gen(z)), 1.0)
                loss_g.backward()
                opt_g.step()
            if loss_hook is not None:
                loss_hook("g", 1.0)

            g_losses.append(float(loss_g.detach()))
            d_losses.append(float(loss_d.detach()))

        epoch_g = float(np.mean(g_losses))
        epoch_d = float(np.mean(d_losses))
        if not (math.isfinite(epoch_g) and math.isfinite(epoch_d)):
            raise Diverged(
                f"non-finite loss at epoch {epoch} (G={epoch_g}, D={epoch_d})",
                checkpoint=last_good,
            )
        loss_history.append((epoch_g, epoch_d))
        last_good = snapshot(epoch)

        if out_dir is not None and config.checkpoint_every and epoch % config.checkpoint_every == 0:
            Path(out_dir).mkdir(parents=True, exist_ok=True)
            last_good.save(Path(out_dir) / f"gan_{class_name}_{epoch}.ckpt")

    final = last_good if last_good is not None else snapshot(0)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        final.save(out_dir / f"gan_{class_name}_{final.epoch}.ckpt")
        with open(out_dir / f"gan_{class_name}_losses.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "loss_G", "loss_D"])
            for i, (lg, ld) in enumerate(final.loss_history, start=1):
                writer.writerow([i, lg, ld])
    return final
