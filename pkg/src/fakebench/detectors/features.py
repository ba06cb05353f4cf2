"""Hand-built inputs of the steganalysis and local-artifacts detectors."""

from __future__ import annotations

from dataclasses import dataclass

import cv2
import numpy as np
import torch

from fakebench.datamodel import FaceImage
from fakebench.landmarks import LEFT_EYE, RIGHT_EYE, LandmarkSet


@dataclass(frozen=True)
class CooccurrenceFeature:
    """Horizontal (offset (0, 1)) co-occurrence counts, one 256x256 matrix per channel."""

    counts: np.ndarray  # (3, 256, 256) int64

    def log_scaled(self) -> np.ndarray:
        return np.log1p(self.counts).astype(np.float32)


def _pixels(image) -> np.ndarray:
    px = image.pixels if isinstance(image, FaceImage) else np.asarray(image)
    if px.dtype != np.uint8 or px.ndim != 3:
        raise ValueError("co-occurrence needs an 8-bit HxWxC image")
    return px


def cooccurrence(image) -> CooccurrenceFeature:
    px = _pixels(image).astype(np.int64)
    mats = [
        np.bincount((px[:, :-1, c] * 256 + px[:, 1:, c]).ravel(), minlength=65536).reshape(256, 256)
        for c in range(px.shape[2])
    ]
    return CooccurrenceFeature(np.stack(mats))


def cooccurrence_batch(pixels: np.ndarray) -> torch.Tensor:
    """(N, H, W, 3) uint8 -> (N, 3, 256, 256) float32 of log(1 + count) / log(1 + H(W-1))."""
    n, h, w, _ = pixels.shape
    px = torch.from_numpy(np.ascontiguousarray(pixels)).long()
    idx = px[:, :, :-1, :] * 256 + px[:, :, 1:, :]  # (N, H, W-1, 3)
    idx = idx.permute(0, 3, 1, 2).reshape(n * 3, -1)
    offsets = torch.arange(n * 3).unsqueeze(1) * 65536
    counts = torch.bincount((idx + offsets).ravel(), minlength=n * 3 * 65536).float()
    return torch.log1p(counts.view(n, 3, 256, 256)) / float(np.log1p(h * (w - 1)))


# -- eye colour features ------------------------------------------------------------

_PER_EYE = (
    "mean_r", "mean_g", "mean_b",
    "std_r", "std_g", "std_b",
    "detail_r", "detail_g", "detail_b",
    "highlight_frac", "pupil_frac",
)  # fmt: skip
EYE_FEATURE_NAMES = tuple(
    [f"left_{n}" for n in _PER_EYE] + [f"right_{n}" for n in _PER_EYE] + [f"diff_{n}" for n in _PER_EYE]
)
EYE_FEATURE_DIM = len(EYE_FEATURE_NAMES)  # 33
HIGHLIGHT_LUMA = 0.85
PUPIL_LUMA = 0.15


def _polygon_area(pts: np.ndarray) -> float:
    x, y = pts[:, 0], pts[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, 1)) - np.dot(y, np.roll(x, 1))))


def _eye_stats(img: np.ndarray, detail: np.ndarray, polygon: np.ndarray) -> np.ndarray:
    if _polygon_area(polygon) < 1e-6:
        raise ValueError("degenerate eye polygon (zero area)")
    mask = np.zeros(img.shape[:2], np.uint8)
    cv2.fillPoly(mask, [np.round(polygon * 16).astype(np.int32)], 1, lineType=cv2.LINE_8, shift=4)
    sel = mask.astype(bool)
    if not sel.any():
        raise ValueError("eye polygon covers no pixel")
    px = img[sel]  # (n, 3) in [0, 1]
    luma = px @ np.array([0.299, 0.587, 0.114])
    return np.concatenate(
        [
            px.mean(axis=0),
            px.std(axis=0),
            np.sqrt(np.mean(detail[sel] ** 2, axis=0)),
            [np.mean(luma > HIGHLIGHT_LUMA), np.mean(luma < PUPIL_LUMA)],
        ]
    )


def eye_color_features(image: FaceImage | np.ndarray, landmarks: LandmarkSet) -> np.ndarray:
    """33-dim vector: 11 colour statistics per eye and their left-minus-right differences.

    Per eye (pixels inside the 6-point lid contour, intensities in [0, 1]): channel
    means, channel standard deviations, RMS of the 3x3 high-pass residual per channel,
    the fraction of specular-highlight pixels and the fraction of pupil pixels.
    """
    px = image.pixels if isinstance(image, FaceImage) else np.asarray(image)
    img = px.astype(np.float64) / 255.0
    detail = img - cv2.blur(img, (3, 3), borderType=cv2.BORDER_REFLECT)
    left = _eye_stats(img, detail, landmarks.points[LEFT_EYE])
    right = _eye_stats(img, detail, landmarks.points[RIGHT_EYE])
    return np.concatenate([left, right, left - right])
