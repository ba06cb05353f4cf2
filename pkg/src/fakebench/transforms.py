"""Evaluation-time manipulations: resolution round-trip, Gaussian low-pass, JPEG, GANprintR."""

from __future__ import annotations

import enum
import io
from dataclasses import dataclass
from typing import TYPE_CHECKING, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from fakebench.datamodel import FaceImage

if TYPE_CHECKING:
    from fakebench.ganprintr import GANprintRModel

MIN_DOWNSIZED_PX = 8


class TransformKind(str, enum.Enum):
    IDENTITY = "identity"
    DOWNSIZE = "downsize"
    LOWPASS = "lowpass"
    JPEG = "jpeg"
    GANPRINTR = "ganprintr"


@dataclass(frozen=True)
class TransformSpec:
    kind: TransformKind = TransformKind.IDENTITY
    ratio: float = 1.0 / 3.0
    kernel: int = 9
    sigma: float = 1.7
    quality: int = 60
    checkpoint: str | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", TransformKind(self.kind))
        if not 0.0 < self.ratio <= 1.0:
            raise ValueError(f"ratio must lie in (0, 1], got {self.ratio}")
        if self.kernel < 3 or self.kernel % 2 == 0:
            raise ValueError(f"kernel must be odd and >= 3, got {self.kernel}")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if not 1 <= self.quality <= 100:
            raise ValueError(f"quality must lie in [1, 100], got {self.quality}")
        if self.kind is TransformKind.GANPRINTR and not self.checkpoint:
            raise ValueError("GANPRINTR transform needs a checkpoint path")

    @property
    def tag(self) -> str:
        """Short label used in results tables."""
        k = self.kind
        if k is TransformKind.DOWNSIZE:
            return f"downsize({self.ratio:.4g})"
        if k is TransformKind.LOWPASS:
            return f"lowpass({self.kernel},{self.sigma:g})"
        if k is TransformKind.JPEG:
            return f"jpeg({self.quality})"
        if k is TransformKind.GANPRINTR:
            return "ganprintr"
        return "identity"


def _pixels(image) -> np.ndarray:
    return image.pixels if isinstance(image, FaceImage) else np.asarray(image, dtype=np.uint8)


def _wrap(image, pixels: np.ndarray):
    return image.with_pixels(pixels) if isinstance(image, FaceImage) else pixels


def downsize(image, ratio: float = 1.0 / 3.0):
    """Bilinear down to floor(ratio*H) x floor(ratio*W), then bilinear back up."""
    if not 0.0 < ratio <= 1.0:
        raise ValueError(f"ratio must lie in (0, 1], got {ratio}")
    px = _pixels(image)
    h, w = px.shape[:2]
    if ratio == 1.0:
        return _wrap(image, px.copy())
    small = (int(np.floor(ratio * w + 1e-9)), int(np.floor(ratio * h + 1e-9)))
    if min(small) < MIN_DOWNSIZED_PX:
        raise ValueError(f"downsized image {small} is below {MIN_DOWNSIZED_PX} px")
    pil = Image.fromarray(px)
    out = pil.resize(small, Image.Resampling.BILINEAR).resize((w, h), Image.Resampling.BILINEAR)
    return _wrap(image, np.asarray(out, dtype=np.uint8))


def _gaussian_1d(size: int, sigma: float) -> np.ndarray:
    if size < 3 or size % 2 == 0:
        raise ValueError("kernel size must be odd and >= 3")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    ax = np.arange(size, dtype=np.float64) - size // 2
    g = np.exp(-(ax**2) / (2.0 * sigma**2))
    return g / g.sum()


def gaussian_kernel(size: int = 9, sigma: float = 1.7) -> np.ndarray:
    """Normalised 2-D Gaussian (outer product of the normalised 1-D kernel)."""
    g = _gaussian_1d(size, sigma)
    return np.outer(g, g)


def gaussian_lowpass(image, kernel: int = 9, sigma: float = 1.7):
    """Per-channel separable Gaussian filter with reflect padding, rounded back to 8 bit."""
    g = _gaussian_1d(kernel, sigma)
    x = _pixels(image).astype(np.float64)
    y = ndimage.correlate1d(x, g, axis=0, mode="reflect")
    y = ndimage.correlate1d(y, g, axis=1, mode="reflect")
    return _wrap(image, np.clip(np.rint(y), 0, 255).astype(np.uint8))


def jpeg_compress(image, quality: int = 60):
    """Baseline JPEG encode/decode round-trip through libjpeg (IJG quality scaling)."""
    if not 1 <= quality <= 100:
        raise ValueError(f"quality must lie in [1, 100], got {quality}")
    buf = io.BytesIO()
    try:
        Image.fromarray(_pixels(image)).save(buf, format="JPEG", quality=int(quality), optimize=False, progressive=False)
        buf.seek(0)
        with Image.open(buf) as im:
            out = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except OSError as exc:
        raise RuntimeError(f"JPEG codec failure: {exc}") from exc
    return _wrap(image, out)


def apply_transform(
    spec: TransformSpec, images: Sequence[FaceImage], model: "GANprintRModel | None" = None
) -> list[FaceImage]:
    """Apply ``spec`` to a batch. GANPRINTR loads ``spec.checkpoint`` unless a model is given."""
    kind = spec.kind
    if kind is TransformKind.IDENTITY:
        return [im.with_pixels(im.pixels.copy()) for im in images]
    if kind is TransformKind.DOWNSIZE:
        return [downsize(im, spec.ratio) for im in images]
    if kind is TransformKind.LOWPASS:
        return [gaussian_lowpass(im, spec.kernel, spec.sigma) for im in images]
    if kind is TransformKind.JPEG:
        return [jpeg_compress(im, spec.quality) for im in images]
    from fakebench.ganprintr import GANprintRModel, apply_ganprintr_batch

    if model is None:
        model = GANprintRModel.load(spec.checkpoint)
    return apply_ganprintr_batch(model, images)
