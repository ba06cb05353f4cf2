"""GAN-fingerprint removal: a plain convolutional autoencoder trained on real faces only.

Encoder (psi) maps an image X to a 28x28xc latent map, decoder (gamma) maps it back to
X'. Training minimises the MSE between X and X' on [0, 1]-scaled pixels; at test time
fakes pushed through the network lose high-frequency content the decoder never learned
to produce.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from fakebench.datamodel import DatasetManifest, FaceImage, Label
from fakebench.utils import images_to_tensor, seed_everything, tensor_to_images

logger = logging.getLogger(__name__)

ALLOWED_BOTTLENECKS = (4, 8, 16, 32, 64, 128)
CHECKPOINT_FORMAT = "fakebench.ganprintr/1"
BOTTLENECK_BIAS_INIT = 0.1


@dataclass(frozen=True)
class AutoencoderSpec:
    input_size: int = 224
    in_channels: int = 3
    encoder_channels: tuple[int, ...] = (32, 64, 128)
    bottleneck_channels: int = 8

    def __post_init__(self) -> None:
        object.__setattr__(self, "encoder_channels", tuple(self.encoder_channels))
        if self.bottleneck_channels not in ALLOWED_BOTTLENECKS:
            raise ValueError(
                f"bottleneck_channels must be one of {ALLOWED_BOTTLENECKS}, got {self.bottleneck_channels}"
            )
        if self.input_size % (2 ** len(self.encoder_channels)):
            raise ValueError("input_size must be divisible by 2**len(encoder_channels)")

    @property
    def latent_size(self) -> int:
        return self.input_size // 2 ** len(self.encoder_channels)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    learning_rate: float = 1e-3
    batch_size: int = 32
    seed: int = 0
    # Train on random square crops of this size (None = whole images). The network is
    # fully convolutional, so weights trained on crops apply unchanged to 224x224 input.
    crop_size: int | None = None
    deterministic: bool = True
    # cosine-anneal the learning rate to zero over the run (False = constant rate)
    cosine_decay: bool = False

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


class GANprintRNet(nn.Module):
    """3x3 conv + ReLU + 2x2 max-pool stages down to a c-channel bottleneck, mirrored back up.

    Decoder stages upsample by nearest neighbour and then convolve; the final 3x3
    convolution feeds a sigmoid so outputs live in [0, 1].
    """

    def __init__(self, in_channels: int = 3, encoder_channels: Sequence[int] = (32, 64, 128), bottleneck: int = 8):
        super().__init__()
        stages = []
        prev = in_channels
        for ch in encoder_channels:
            stages.append(nn.Sequential(nn.Conv2d(prev, ch, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2)))
            prev = ch
        stages.append(nn.Sequential(nn.Conv2d(prev, bottleneck, 3, padding=1), nn.ReLU()))
        self.encoder = nn.ModuleList(stages)
        # a small positive bias keeps the narrow ReLU bottleneck from dying early in training
        nn.init.constant_(stages[-1][0].bias, BOTTLENECK_BIAS_INIT)

        rev = list(reversed(encoder_channels))
        dec = [nn.Sequential(nn.Conv2d(bottleneck, rev[0], 3, padding=1), nn.ReLU())]
        for a, b in zip(rev, rev[1:]):
            dec.append(nn.Sequential(nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv2d(a, b, 3, padding=1), nn.ReLU()))
        dec.append(
            nn.Sequential(nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv2d(rev[-1], in_channels, 3, padding=1), nn.Sigmoid())
        )
        self.decoder = nn.ModuleList(dec)

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        for stage in self.encoder:
            x = stage(x)
        return x

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        for stage in self.decoder:
            z = stage(z)
        return z

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.decode(self.encode(x))

    def activations(self, x: torch.Tensor) -> tuple[list[torch.Tensor], list[torch.Tensor]]:
        """Outputs of every encoder stage and every decoder stage."""
        enc, dec = [], []
        for stage in self.encoder:
            x = stage(x)
            enc.append(x)
        for stage in self.decoder:
            x = stage(x)
            dec.append(x)
        return enc, dec


@dataclass
class GANprintRModel:
    spec: AutoencoderSpec
    net: GANprintRNet
    seed: int
    history: list[dict[str, float]] = field(default_factory=list)
    initial_val_loss: float | None = None
    data_hash: str = ""
    train_config: TrainConfig | None = None

    @property
    def trained(self) -> bool:
        return bool(self.history)

    @property
    def encoder(self) -> nn.ModuleList:
        return self.net.encoder

    @property
    def decoder(self) -> nn.ModuleList:
        return self.net.decoder

    def save(self, path: str | Path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        torch.save(
            {
                "format": CHECKPOINT_FORMAT,
                "spec": asdict(self.spec),
                "seed": self.seed,
                "epoch": len(self.history),
                "state_dict": self.net.state_dict(),
                "history": self.history,
                "initial_val_loss": self.initial_val_loss,
                "data_hash": self.data_hash,
                "train_config": asdict(self.train_config) if self.train_config else None,
            },
            path,
        )

    @classmethod
    def load(cls, path: str | Path) -> "GANprintRModel":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"GANprintR checkpoint not found: {path}")
        blob = torch.load(path, map_location="cpu", weights_only=True)
        if blob.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: not a GANprintR checkpoint")
        spec = AutoencoderSpec(**blob["spec"])
        model = build_autoencoder(spec, blob["seed"])
        model.net.load_state_dict(blob["state_dict"])
        model.history = list(blob["history"])
        model.initial_val_loss = blob["initial_val_loss"]
        model.data_hash = blob["data_hash"]
        if blob["train_config"]:
            model.train_config = TrainConfig(**blob["train_config"])
        return model


def build_autoencoder(spec: AutoencoderSpec = AutoencoderSpec(), seed: int = 0) -> GANprintRModel:
    torch.manual_seed(seed)
    net = GANprintRNet(spec.in_channels, spec.encoder_channels, spec.bottleneck_channels)
    net.eval()
    return GANprintRModel(spec=spec, net=net, seed=seed)


def reconstruction_loss(x, x_rec) -> float:
    """MSE between two uint8 rasters after scaling intensities to [0, 1]."""
    a = np.asarray(x, dtype=np.float64) / 255.0
    b = np.asarray(x_rec, dtype=np.float64) / 255.0
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def _stack_images(source: DatasetManifest | Sequence[FaceImage]) -> tuple[np.ndarray, str]:
    if isinstance(source, DatasetManifest):
        labels = source.labels
        images = source.images()
        fingerprint = source.fingerprint()
    else:
        images = list(source)
        labels = {im.label for im in images}
        fingerprint = ""
    if Label.FAKE in labels:
        raise ValueError("GANprintR must be trained on real images only; found FAKE-labelled entries")
    if not images:
        raise ValueError("empty training set")
    return np.stack([im.pixels for im in images]), fingerprint


def _crop_batch(x: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    n, h, w, _ = x.shape
    ys = rng.integers(0, h - size + 1, n)
    xs = rng.integers(0, w - size + 1, n)
    return np.stack([x[i, y : y + size, c : c + size] for i, (y, c) in enumerate(zip(ys, xs))])


def _evaluate_loss(net: nn.Module, x: np.ndarray, batch_size: int) -> float:
    total, count = 0.0, 0
    net.eval()
    with torch.no_grad():
        for i in range(0, len(x), batch_size):
            xb = images_to_tensor(x[i : i + batch_size])
            total += nn.functional.mse_loss(net(xb), xb, reduction="sum").item()
            count += xb.numel()
    return total / count


def train_autoencoder(
    model: GANprintRModel,
    real_train: DatasetManifest | Sequence[FaceImage],
    real_val: DatasetManifest | Sequence[FaceImage],
    cfg: TrainConfig = TrainConfig(),
    checkpoint: str | Path | None = None,
) -> GANprintRModel:
    """Adam on the pixel MSE; records per-epoch train/val loss in ``model.history``.

    Validation uses fixed crops (when ``cfg.crop_size`` is set) drawn once from the
    seed, so the loss curve is comparable across epochs.
    """
    x_train, train_hash = _stack_images(real_train)
    x_val, _ = _stack_images(real_val)
    seed_everything(cfg.seed, cfg.deterministic)
    rng = np.random.default_rng(cfg.seed)
    if cfg.crop_size:
        if cfg.crop_size % 2 ** len(model.spec.encoder_channels):
            raise ValueError("crop_size must be divisible by the total pooling factor")
        x_val = _crop_batch(x_val, cfg.crop_size, np.random.default_rng(cfg.seed + 1))

    net = model.net
    opt = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, cfg.epochs) if cfg.cosine_decay else None
    model.initial_val_loss = _evaluate_loss(net, x_val, cfg.batch_size)
    logger.info("GANprintR c=%d initial val loss %.6f", model.spec.bottleneck_channels, model.initial_val_loss)
    model.history = []
    for epoch in range(cfg.epochs):
        net.train()
        order = rng.permutation(len(x_train))
        running, seen = 0.0, 0
        for i in range(0, len(order), cfg.batch_size):
            batch = x_train[order[i : i + cfg.batch_size]]
            if cfg.crop_size:
                batch = _crop_batch(batch, cfg.crop_size, rng)
            xb = images_to_tensor(batch)
            opt.zero_grad()
            loss = nn.functional.mse_loss(net(xb), xb)
            loss.backward()
            opt.step()
            running += loss.item() * len(batch)
            seen += len(batch)
        if sched is not None:
            sched.step()
        val = _evaluate_loss(net, x_val, cfg.batch_size)
        if not math.isfinite(val):
            raise FloatingPointError(f"validation loss diverged at epoch {epoch + 1}")
        model.history.append({"epoch": epoch + 1, "train_loss": running / seen, "val_loss": val})
        logger.info("GANprintR epoch %d train %.6f val %.6f", epoch + 1, running / seen, val)
    net.eval()
    model.data_hash = train_hash
    model.train_config = cfg
    if checkpoint is not None:
        model.save(checkpoint)
    return model


def _check_ready(model: GANprintRModel, pixels: np.ndarray) -> None:
    if not model.trained:
        raise RuntimeError("GANprintR model is untrained")
    s = model.spec.input_size
    if pixels.shape[-3:] != (s, s, model.spec.in_channels):
        raise ValueError(f"expected {s}x{s}x{model.spec.in_channels} input, got {pixels.shape}")


def apply_ganprintr(model: GANprintRModel, image: FaceImage) -> FaceImage:
    return apply_ganprintr_batch(model, [image])[0]


def apply_ganprintr_batch(model: GANprintRModel, images: Sequence[FaceImage], batch_size: int = 16) -> list[FaceImage]:
    """Reconstruct each image; outputs are clamped to [0, 255] and rounded."""
    out: list[FaceImage] = []
    model.net.eval()
    for i in range(0, len(images), batch_size):
        chunk = images[i : i + batch_size]
        px = np.stack([im.pixels for im in chunk])
        _check_ready(model, px)
        with torch.no_grad():
            rec = tensor_to_images(model.net(images_to_tensor(px)))
        out.extend(im.with_pixels(r) for im, r in zip(chunk, rec))
    return out
