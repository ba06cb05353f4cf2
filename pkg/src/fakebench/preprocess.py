"""Background and head-pose removal: frontal filtering plus eye-anchored 224x224 crops."""

from __future__ import annotations

import logging
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np

from fakebench.datamodel import DatasetManifest, FaceImage, ManifestEntry, write_rgb
from fakebench.landmarks import LandmarkBackend, LandmarkSet, detect_landmarks, write_pts

logger = logging.getLogger(__name__)

OUTPUT_SIZE = 224
DEFAULT_FRONTAL_THRESHOLD = 0.15
# eye centres as fractions of the output size; not given by the source protocol
EYE_Y_FRACTION = 0.36
EYE_HALF_SPAN_FRACTION = 0.18


@dataclass(frozen=True)
class AlignmentTarget:
    output_size: int = OUTPUT_SIZE
    left_eye_anchor: tuple[float, float] = (
        OUTPUT_SIZE * (0.5 - EYE_HALF_SPAN_FRACTION),
        OUTPUT_SIZE * EYE_Y_FRACTION,
    )
    right_eye_anchor: tuple[float, float] = (
        OUTPUT_SIZE * (0.5 + EYE_HALF_SPAN_FRACTION),
        OUTPUT_SIZE * EYE_Y_FRACTION,
    )

    def __post_init__(self) -> None:
        (lx, ly), (rx, ry) = self.left_eye_anchor, self.right_eye_anchor
        centre = self.output_size / 2.0
        if abs(ly - ry) > 1e-9:
            raise ValueError("eye anchors must share the same y coordinate")
        if abs((lx + rx) / 2.0 - centre) > 1e-9:
            raise ValueError("eye anchors must be symmetric about the output centre")
        if rx <= lx:
            raise ValueError("right eye anchor must lie to the right of the left one")

    @classmethod
    def from_fractions(
        cls, output_size: int = OUTPUT_SIZE, eye_half_span: float = EYE_HALF_SPAN_FRACTION, eye_y: float = EYE_Y_FRACTION
    ) -> "AlignmentTarget":
        s = float(output_size)
        return cls(output_size, (s * (0.5 - eye_half_span), s * eye_y), (s * (0.5 + eye_half_span), s * eye_y))


def yaw_proxy(landmarks: LandmarkSet) -> float:
    """|d(nose, left eye) - d(nose, right eye)| in inter-ocular units."""
    iod = landmarks.interocular
    if iod <= 0:
        return float("inf")
    dl = np.linalg.norm(landmarks.nose_tip - landmarks.left_eye_center)
    dr = np.linalg.norm(landmarks.nose_tip - landmarks.right_eye_center)
    return float(abs(dl - dr) / iod)


def estimate_frontal(landmarks: LandmarkSet, threshold: float = DEFAULT_FRONTAL_THRESHOLD) -> bool:
    return yaw_proxy(landmarks) <= threshold


def similarity_matrix(landmarks: LandmarkSet, target: AlignmentTarget) -> np.ndarray:
    """2x3 rotation + uniform scale + translation taking eye centres to the anchors."""
    src_l, src_r = landmarks.left_eye_center, landmarks.right_eye_center
    dst_l, dst_r = np.asarray(target.left_eye_anchor), np.asarray(target.right_eye_anchor)
    v, w = src_r - src_l, dst_r - dst_l
    norm_v = np.linalg.norm(v)
    if norm_v < 1e-6:
        raise ValueError("degenerate landmarks: eye centres coincide")
    # complex-number form: w = z * v with z = s * exp(i*theta)
    z = complex(*w) / complex(*v)
    a, b = z.real, z.imag
    rot = np.array([[a, -b], [b, a]])
    t = dst_l - rot @ src_l
    return np.hstack([rot, t[:, None]])


def align_face(
    image: FaceImage, landmarks: LandmarkSet, target: AlignmentTarget = AlignmentTarget()
) -> FaceImage:
    """Warp ``image`` so both eye centres land on the target anchors (bilinear)."""
    m = similarity_matrix(landmarks, target)
    size = target.output_size
    out = cv2.warpAffine(
        image.pixels, m, (size, size), flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_REPLICATE
    )
    aligned = FaceImage(out, image.label, image.subject_id, image.source, None, image.path)
    aligned.landmarks = landmarks.transformed(m).points
    return aligned


@dataclass
class ExclusionReport:
    total: int = 0
    kept: int = 0
    excluded: Counter = field(default_factory=Counter)
    excluded_paths: dict[str, list[str]] = field(default_factory=dict)

    def add(self, reason: str, path: str) -> None:
        self.excluded[reason] += 1
        self.excluded_paths.setdefault(reason, []).append(path)

    def to_text(self) -> str:
        lines = [f"total\t{self.total}", f"kept\t{self.kept}"]
        for reason in sorted(self.excluded):
            lines.append(f"excluded.{reason}\t{self.excluded[reason]}")
        for reason in sorted(self.excluded_paths):
            for p in self.excluded_paths[reason]:
                lines.append(f"path.{reason}\t{p}")
        return "\n".join(lines) + "\n"


def _process_one(
    manifest: DatasetManifest,
    entry: ManifestEntry,
    backend: LandmarkBackend | None,
    target: AlignmentTarget,
    frontal_threshold: float,
) -> tuple[str, FaceImage | None]:
    try:
        image = manifest.load_image(entry)
    except Exception as exc:  # decoding failures are data, not errors
        logger.warning("cannot load %s: %s", entry.path, exc)
        return "undecodable", None
    landmarks = detect_landmarks(image, backend)
    if landmarks is None:
        return "no-face", None
    if not estimate_frontal(landmarks, frontal_threshold):
        return "non-frontal", None
    try:
        return "ok", align_face(image, landmarks, target)
    except ValueError:
        return "degenerate-landmarks", None


def preprocess_corpus(
    manifest: DatasetManifest,
    out_root: str | Path,
    backend: LandmarkBackend | None = None,
    target: AlignmentTarget = AlignmentTarget(),
    frontal_threshold: float = DEFAULT_FRONTAL_THRESHOLD,
    workers: int = 1,
) -> tuple[DatasetManifest, ExclusionReport]:
    """Detect, gate and align every image, writing PNG crops plus .pts sidecars.

    Output paths mirror the input layout (extension forced to .png). Results are
    merged in input order regardless of ``workers``.
    """
    out_root = Path(out_root)
    report = ExclusionReport(total=len(manifest))

    def work(entry: ManifestEntry):
        return _process_one(manifest, entry, backend, target, frontal_threshold)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(work, manifest.entries))
    else:
        results = [work(e) for e in manifest.entries]

    kept = []
    for entry, (reason, aligned) in zip(manifest.entries, results):
        if aligned is None:
            report.add(reason, entry.path)
            continue
        rel = Path(entry.path).with_suffix(".png").as_posix()
        write_rgb(out_root / rel, aligned.pixels)
        write_pts((out_root / rel).with_suffix(".pts"), aligned.landmarks)
        kept.append(ManifestEntry(rel, entry.label, entry.subject_id, entry.source))
    report.kept = len(kept)
    return DatasetManifest(str(out_root), tuple(kept)), report
