"""Desk-scale proxy corpus: procedurally rendered aligned faces plus stamped fingerprints.

Real images are untouched renders. Fake images are renders of *other* subjects with a
fixed, low-amplitude spectral signature added, standing in for the periodic traces a
GAN's upsampling layers leave behind. Two signature families are available so that
cross-"GAN" experiments can be emulated.
"""

from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import cv2
import numpy as np
from scipy import ndimage

from fakebench.datamodel import DatasetManifest, FaceImage, Label, ManifestEntry, write_rgb
from fakebench.landmarks import LEFT_EYE, RIGHT_EYE, LandmarkSet, canonical_shape, place_shape, write_pts
from fakebench.metrics import psnr
from fakebench.preprocess import AlignmentTarget

SIZE = 224

SKIN_LIGHT = np.array([236.0, 204.0, 178.0])
SKIN_DARK = np.array([112.0, 76.0, 56.0])
IRIS_PALETTE = np.array(
    [[96, 60, 32], [70, 108, 160], [78, 118, 72], [128, 98, 52], [110, 116, 122], [52, 36, 24]], dtype=float
)
HAIR_PALETTE = np.array([[30, 22, 18], [70, 46, 28], [150, 112, 66], [20, 20, 24], [110, 60, 30]], dtype=float)


class FingerprintKind(str, enum.Enum):
    PERIODIC_HF = "PERIODIC_HF"
    NOISE_SIGNATURE = "NOISE_SIGNATURE"


# (row, column) DFT bins of the periodic signature on the 224 grid; conjugates implied.
# Spread from the bottleneck scale up to the Nyquist corner so that both the resize
# round-trip and the autoencoder remove it only partially, depending on their bandwidth.
PERIODIC_BINS = (
    (112, 112),
    (0, 112),
    (112, 0),
    (84, 84),
    (84, -28),
    (28, 84),
    (56, 56),
    (56, -56),
    (0, 56),
    (28, 28),
)
# The noise signature lives at vertical frequencies |fy| in NOISE_BAND with almost no
# horizontal variation (|fx| <= NOISE_MAX_FX), both as fractions of Nyquist: a banding
# trace from a different "generator" than the periodic one.
NOISE_BAND = (0.15, 0.45)
NOISE_MAX_FX = 0.04

OPTICAL_BLUR = 1.1  # Gaussian sigma (px) applied to every render before sensor noise
FINE_TEXTURE = 0.6


@dataclass(frozen=True)
class Fingerprint:
    kind: FingerprintKind
    pattern: np.ndarray  # (H, W, 3) float64, unit RMS
    band: np.ndarray  # (H, W) bool mask of DFT bins carrying the signature

    def stamp(self, pixels: np.ndarray, amplitude: float) -> np.ndarray:
        out = pixels.astype(np.float64) + amplitude * self.pattern
        return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def make_fingerprint(kind: FingerprintKind | str, size: int = SIZE, seed: int = 0) -> Fingerprint:
    kind = FingerprintKind(kind)
    rng = np.random.default_rng([seed, 7919 if kind is FingerprintKind.PERIODIC_HF else 104729])
    yy, xx = np.mgrid[:size, :size].astype(np.float64)
    band = np.zeros((size, size), dtype=bool)
    pattern = np.zeros((size, size, 3))
    if kind is FingerprintKind.PERIODIC_HF:
        scale = size / SIZE
        for ky, kx in PERIODIC_BINS:
            ky, kx = int(round(ky * scale)), int(round(kx * scale))
            band[ky % size, kx % size] = band[-ky % size, -kx % size] = True
            phases = rng.uniform(0, 2 * np.pi, 3)
            weights = rng.uniform(0.6, 1.0, 3)
            arg = 2 * np.pi * (ky * yy + kx * xx) / size
            for c in range(3):
                pattern[..., c] += weights[c] * np.cos(arg + phases[c])
    else:
        fy = np.abs(np.fft.fftfreq(size))[:, None] * 2
        fx = np.abs(np.fft.fftfreq(size))[None, :] * 2
        band = (fy >= NOISE_BAND[0]) & (fy <= NOISE_BAND[1]) & (fx <= NOISE_MAX_FX)
        for c in range(3):
            spec = np.fft.fft2(rng.standard_normal((size, size)))
            pattern[..., c] = np.real(np.fft.ifft2(spec * band))
    pattern -= pattern.mean(axis=(0, 1), keepdims=True)
    pattern /= np.sqrt(np.mean(pattern**2))
    return Fingerprint(kind, pattern, band)


# -- procedural faces -----------------------------------------------------------------


@dataclass(frozen=True)
class SubjectStyle:
    skin: np.ndarray
    hair: np.ndarray
    iris: np.ndarray
    lip: np.ndarray
    background: tuple[np.ndarray, np.ndarray]
    shape: dict


def random_style(rng: np.random.Generator) -> SubjectStyle:
    tone = rng.uniform(0, 1)
    skin = SKIN_LIGHT + tone * (SKIN_DARK - SKIN_LIGHT) + rng.normal(0, 6, 3)
    hair = HAIR_PALETTE[rng.integers(len(HAIR_PALETTE))] + rng.normal(0, 8, 3)
    iris = IRIS_PALETTE[rng.integers(len(IRIS_PALETTE))] + rng.normal(0, 10, 3)
    lip = skin * np.array([0.92, 0.62, 0.62]) + rng.normal(0, 5, 3)
    bg = (rng.uniform(40, 220, 3), rng.uniform(40, 220, 3))
    shape = dict(
        jaw_width=rng.uniform(0.95, 1.12),
        jaw_height=rng.uniform(1.5, 1.72),
        eye_width=rng.uniform(0.40, 0.50),
        eye_height=rng.uniform(0.09, 0.13),
        mouth_width=rng.uniform(0.75, 1.0),
        mouth_y=rng.uniform(1.08, 1.22),
        nose_length=rng.uniform(0.55, 0.72),
    )
    return SubjectStyle(np.clip(skin, 0, 255), np.clip(hair, 0, 255), np.clip(iris, 0, 255), np.clip(lip, 0, 255), bg, shape)


def _poly(points: np.ndarray) -> np.ndarray:
    return np.round(points * 16).astype(np.int32)  # 4 fractional bits for cv2


def _fill(canvas: np.ndarray, points: np.ndarray, color) -> None:
    cv2.fillPoly(canvas, [_poly(points)], [float(c) for c in color], lineType=cv2.LINE_AA, shift=4)


def _line(canvas: np.ndarray, points: np.ndarray, color, thickness: int, closed: bool = False) -> None:
    cv2.polylines(canvas, [_poly(points)], closed, [float(c) for c in color], thickness, cv2.LINE_AA, shift=4)


def _smooth_noise(rng: np.random.Generator, sigma: float, shape=(SIZE, SIZE)) -> np.ndarray:
    n = ndimage.gaussian_filter(rng.standard_normal(shape), sigma)
    return n / (n.std() + 1e-12)


def render_face(
    style: SubjectStyle,
    rng: np.random.Generator,
    target: AlignmentTarget = AlignmentTarget(),
    jitter: bool = True,
) -> tuple[np.ndarray, LandmarkSet]:
    """Render one aligned face; returns (uint8 pixels, exact landmarks)."""
    le = np.array(target.left_eye_anchor)
    re_ = np.array(target.right_eye_anchor)
    if jitter:
        centre = (le + re_) / 2 + rng.normal(0, 1.5, 2)
        angle = np.deg2rad(rng.normal(0, 2.0))
        half = (re_ - le) / 2 * rng.uniform(0.96, 1.04)
        rot = np.array([[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]])
        le, re_ = centre - rot @ half, centre + rot @ half
    mouth_open = max(0.0, rng.normal(0.0, 0.04)) if jitter else 0.0
    shape = canonical_shape(mouth_open=mouth_open, **style.shape)
    lm = place_shape(shape, le, re_)
    pts = lm.points
    iod = lm.interocular
    eye_dir = (re_ - le) / np.linalg.norm(re_ - le)
    up = np.array([eye_dir[1], -eye_dir[0]])  # image "up" relative to the face

    ys = np.linspace(0, 1, SIZE)[:, None, None]
    img = (style.background[0] * (1 - ys) + style.background[1] * ys) * np.ones((1, SIZE, 1))

    eye_mid = (le + re_) / 2
    head_c = eye_mid + up * 0.25 * iod
    cv2.ellipse(img, tuple(np.round(head_c * 16).astype(int)), (int(1.3 * iod * 16), int(1.45 * iod * 16)),
                float(np.degrees(np.arctan2(eye_dir[1], eye_dir[0]))), 0, 360, [float(c) for c in style.hair], -1, cv2.LINE_AA, 4)

    forehead = np.array([eye_mid + up * 0.95 * iod + eye_dir * iod * x for x in np.linspace(1.0, -1.0, 9)])
    forehead[:, :] += np.outer(1 - np.linspace(-1, 1, 9) ** 2, up) * 0.1 * iod
    face_poly = np.vstack([pts[0:17], forehead])
    face_mask = np.zeros((SIZE, SIZE), np.float64)
    _fill(face_mask, face_poly, [1.0])
    skin = np.zeros_like(img)
    skin[:] = style.skin
    light = rng.uniform(-1, 1, 2) if jitter else np.zeros(2)
    xs = (np.arange(SIZE) - SIZE / 2) / SIZE
    shading = 1 + 0.12 * (light[0] * xs[None, :] + light[1] * xs[:, None])
    skin *= shading[..., None]
    skin += (2.5 * _smooth_noise(rng, 3.0) + FINE_TEXTURE * _smooth_noise(rng, 1.0))[..., None]
    img = img * (1 - face_mask[..., None]) + skin * face_mask[..., None]

    brow_th = max(2, int(round(0.07 * iod)))
    brow = style.hair * 0.8
    _line(img, pts[17:22], brow, brow_th)
    _line(img, pts[22:27], brow, brow_th)

    nose_col = style.skin * 0.78
    _line(img, pts[27:31], style.skin * 0.9, 2)
    _line(img, pts[31:36], nose_col, 2)

    for sl in (slice(36, 42), slice(42, 48)):
        eye = pts[sl]
        centre = eye.mean(axis=0)
        mask = np.zeros((SIZE, SIZE), np.float64)
        _fill(mask, eye, [1.0])
        layer = np.zeros_like(img)
        layer[:] = (238, 232, 226)
        r_iris = 0.115 * iod
        c16 = tuple(np.round(centre * 16).astype(int))
        cv2.circle(layer, c16, int(r_iris * 16), [float(c) for c in style.iris], -1, cv2.LINE_AA, 4)
        cv2.circle(layer, c16, int(0.45 * r_iris * 16), (18.0, 16.0, 18.0), -1, cv2.LINE_AA, 4)
        hl = centre + np.array([-0.35, -0.4]) * r_iris
        cv2.circle(layer, tuple(np.round(hl * 16).astype(int)), int(max(1.2, 0.22 * r_iris) * 16), (252.0, 252.0, 252.0), -1, cv2.LINE_AA, 4)
        img = img * (1 - mask[..., None]) + layer * mask[..., None]
        _line(img, eye, (55, 38, 36), 1, closed=True)

    _fill(img, pts[48:60], style.lip)
    _line(img, pts[60:68], style.lip * 0.55, 1, closed=True)

    img = ndimage.gaussian_filter(img, sigma=(OPTICAL_BLUR, OPTICAL_BLUR, 0))
    noise_sigma = rng.uniform(1.0, 1.6) if jitter else 1.3
    img += rng.normal(0, noise_sigma, img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8), lm


def render_subjects(
    n_images: int,
    seed: int,
    images_per_subject: int = 4,
    subject_prefix: str = "s",
    label: Label = Label.REAL,
    source: str = "",
) -> list[FaceImage]:
    """Render ``n_images`` faces grouped into subjects sharing a style."""
    rng = np.random.default_rng(seed)
    out = []
    subject = -1
    style = None
    for i in range(n_images):
        if i % images_per_subject == 0:
            subject += 1
            style = random_style(rng)
        pixels, lm = render_face(style, rng)
        out.append(FaceImage(pixels, label, f"{subject_prefix}{subject:05d}", source, lm.points))
    return out


# -- corpus generation ----------------------------------------------------------------


@dataclass(frozen=True)
class ProxyCorpusSpec:
    n_real: int
    n_fake: int
    fingerprint: FingerprintKind = FingerprintKind.PERIODIC_HF
    amplitude: float = 3.0
    eye_artifact: float = 2.0
    seed: int = 0
    fingerprint_seed: int = 0
    images_per_subject: int = 4
    real_source: str = "PROXY_REAL"
    fake_source: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "fingerprint", FingerprintKind(self.fingerprint))
        if self.n_real < 0 or self.n_fake < 0:
            raise ValueError("counts must be non-negative")
        if self.amplitude < 0 or self.eye_artifact < 0:
            raise ValueError("amplitude and eye_artifact must be non-negative")
        if not self.fake_source:
            object.__setattr__(self, "fake_source", f"PROXY_{self.fingerprint.value}")


def _digest(pixels: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(pixels).tobytes()).hexdigest()


def _write_set(root: Path, images: Sequence[FaceImage], nested: bool) -> DatasetManifest:
    entries = []
    for k, im in enumerate(images):
        rel = f"{im.subject_id}/{k:05d}.png" if nested else f"{k:05d}.png"
        write_rgb(root / rel, im.pixels)
        if im.landmarks is not None:
            write_pts((root / rel).with_suffix(".pts"), im.landmarks)
        entries.append(ManifestEntry(rel, im.label, im.subject_id if nested else "", im.source))
    return DatasetManifest(str(root), tuple(entries))


def generate_proxy_corpus(
    spec: ProxyCorpusSpec,
    out_root: str | Path,
    base_images: tuple[Sequence[FaceImage], Sequence[FaceImage]] | None = None,
) -> tuple[DatasetManifest, DatasetManifest]:
    """Write a real set and a stamped fake set under ``out_root``.

    ``base_images`` is an optional (real_bases, fake_bases) pair of preprocessed
    224x224 faces; when omitted, disjoint subjects are rendered procedurally.
    Returns (real manifest, fake manifest).
    """
    out_root = Path(out_root)
    if base_images is None:
        # separate seeds and subject prefixes keep the two identity pools disjoint
        real_bases = render_subjects(spec.n_real, spec.seed, spec.images_per_subject, "r")
        fake_bases = render_subjects(spec.n_fake, spec.seed + 1_000_003, spec.images_per_subject, "f")
    else:
        real_bases, fake_bases = list(base_images[0])[: spec.n_real], list(base_images[1])[: spec.n_fake]
        if len(real_bases) < spec.n_real or len(fake_bases) < spec.n_fake:
            raise ValueError("not enough base images for the requested counts")
    overlap = {_digest(im.pixels) for im in real_bases} & {_digest(im.pixels) for im in fake_bases}
    if overlap:
        raise ValueError(f"real and fake base sets overlap ({len(overlap)} shared image(s))")

    fp = make_fingerprint(spec.fingerprint, seed=spec.fingerprint_seed)
    rng = np.random.default_rng([spec.seed, spec.fingerprint_seed, 31337])
    reals = [FaceImage(im.pixels, Label.REAL, im.subject_id, spec.real_source, im.landmarks) for im in real_bases]
    fakes = [
        FaceImage(stamp_fake(im, fp, spec.amplitude, spec.eye_artifact, rng), Label.FAKE, "", spec.fake_source, im.landmarks)
        for im in fake_bases
    ]
    real_m = _write_set(out_root / "real", reals, nested=True)
    fake_m = _write_set(out_root / "fake", fakes, nested=False)
    return real_m, fake_m


def stamp_eye_artifact(
    pixels: np.ndarray, landmarks: np.ndarray, amplitude: float, rng: np.random.Generator
) -> np.ndarray:
    """Add white colour noise of std ``amplitude`` inside one randomly chosen eye contour.

    Generated faces often render the two eyes inconsistently; this fine-grained,
    one-sided texture is the cue the eye-colour detector keys on.
    """
    if amplitude == 0:
        return pixels.copy()
    eye = LEFT_EYE if rng.random() < 0.5 else RIGHT_EYE
    mask = np.zeros(pixels.shape[:2], np.float64)
    _fill(mask, np.asarray(landmarks)[eye], [1.0])
    out = pixels.astype(np.float64) + mask[..., None] * rng.normal(0.0, amplitude, pixels.shape)
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def stamp_fake(
    image: FaceImage, fingerprint: Fingerprint, amplitude: float, eye_artifact: float, rng: np.random.Generator
) -> np.ndarray:
    """Fingerprint plus (when landmarks are known) the one-eye texture artifact."""
    px = fingerprint.stamp(image.pixels, amplitude)
    if eye_artifact > 0 and image.landmarks is not None:
        px = stamp_eye_artifact(px, image.landmarks, eye_artifact, rng)
    return px


def stamp_psnr(bases: Sequence[FaceImage], fingerprint: Fingerprint, amplitude: float) -> float:
    """Mean PSNR between clean bases and their stamped versions."""
    return float(np.mean([psnr(im.pixels, fingerprint.stamp(im.pixels, amplitude)) for im in bases]))
