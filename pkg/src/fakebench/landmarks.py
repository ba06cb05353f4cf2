"""68-point (iBUG ordering) landmark sets and pluggable detector backends."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import numpy as np

from fakebench.datamodel import FaceImage

N_POINTS = 68
LEFT_EYE = slice(36, 42)  # image-left eye (the subject's right)
RIGHT_EYE = slice(42, 48)
NOSE_TIP = 30


@dataclass(frozen=True)
class LandmarkSet:
    points: np.ndarray  # (68, 2) float64 (x, y)

    def __post_init__(self) -> None:
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.shape != (N_POINTS, 2):
            raise ValueError(f"expected 68x2 landmarks, got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("landmarks must be finite")
        object.__setattr__(self, "points", pts)

    @property
    def left_eye_center(self) -> np.ndarray:
        return self.points[LEFT_EYE].mean(axis=0)

    @property
    def right_eye_center(self) -> np.ndarray:
        return self.points[RIGHT_EYE].mean(axis=0)

    @property
    def nose_tip(self) -> np.ndarray:
        return self.points[NOSE_TIP]

    @property
    def interocular(self) -> float:
        return float(np.linalg.norm(self.right_eye_center - self.left_eye_center))

    def bbox(self) -> tuple[float, float, float, float]:
        (x0, y0), (x1, y1) = self.points.min(axis=0), self.points.max(axis=0)
        return float(x0), float(y0), float(x1), float(y1)

    def bbox_area(self) -> float:
        x0, y0, x1, y1 = self.bbox()
        return (x1 - x0) * (y1 - y0)

    def clamped(self, height: int, width: int) -> "LandmarkSet":
        pts = self.points.copy()
        pts[:, 0] = np.clip(pts[:, 0], 0, width - 1)
        pts[:, 1] = np.clip(pts[:, 1], 0, height - 1)
        return LandmarkSet(pts)

    def transformed(self, matrix: np.ndarray) -> "LandmarkSet":
        """Apply a 2x3 affine matrix."""
        m = np.asarray(matrix, dtype=np.float64)
        return LandmarkSet(self.points @ m[:, :2].T + m[:, 2])


def _arc(x0: float, x1: float, y_mid: float, lift: float, n: int) -> np.ndarray:
    xs = np.linspace(x0, x1, n)
    t = np.linspace(-1.0, 1.0, n)
    return np.stack([xs, y_mid - lift * (1.0 - t**2)], axis=1)


def _eye(cx: float, width: float, height: float) -> np.ndarray:
    # left corner, two upper-lid points, right corner, two lower-lid points (iBUG order)
    w, h, third = width / 2.0, height, width / 6.0
    return np.array([[cx - w, 0], [cx - third, -h], [cx + third, -h], [cx + w, 0], [cx + third, h], [cx - third, h]])


def canonical_shape(
    jaw_width: float = 1.05,
    jaw_height: float = 1.65,
    eye_width: float = 0.46,
    eye_height: float = 0.11,
    mouth_width: float = 0.9,
    mouth_y: float = 1.15,
    mouth_open: float = 0.0,
    nose_length: float = 0.65,
) -> np.ndarray:
    """Mean-like 68-point face in a frame where the eye centres sit at (-0.5, 0) and (0.5, 0).

    Units are inter-ocular distances, y points down.
    """
    pts = np.zeros((N_POINTS, 2))
    theta = np.pi * (1.0 - np.arange(17) / 16.0)
    pts[0:17] = np.stack([jaw_width * np.cos(theta), 0.1 + jaw_height * np.sin(theta)], axis=1)
    pts[17:22] = _arc(-0.95, -0.15, -0.33, 0.1, 5)
    pts[22:27] = _arc(0.15, 0.95, -0.33, 0.1, 5)
    pts[27:31] = np.stack([np.zeros(4), np.linspace(0.08, nose_length, 4)], axis=1)
    nx = np.linspace(-0.24, 0.24, 5)
    pts[31:36] = np.stack([nx, nose_length + 0.1 + 0.05 * (1 - (nx / 0.24) ** 2)], axis=1)
    pts[36:42] = _eye(-0.5, eye_width, eye_height)
    pts[42:48] = _eye(0.5, eye_width, eye_height)
    half = mouth_width / 2.0
    # outer lip: 48 left corner, 49-53 upper lip to 54 right corner, 55-59 lower lip back
    upper_x = np.linspace(-half, half, 7)
    upper_y = mouth_y - 0.08 * np.sin(np.linspace(0, np.pi, 7)) - 0.03 * np.cos(np.linspace(0, 2 * np.pi, 7))
    pts[48:55] = np.stack([upper_x, upper_y], axis=1)
    pts[48, 1] = pts[54, 1] = mouth_y
    lower_x = np.linspace(half, -half, 7)[1:6]
    lower_y = mouth_y + (0.14 + mouth_open) * np.sin(np.linspace(0, np.pi, 7)[1:6])
    pts[55:60] = np.stack([lower_x, lower_y], axis=1)
    # inner lip: 60 left, 61-63 upper, 64 right, 65-67 lower
    inner_half = half * 0.8
    ix = np.linspace(-inner_half, inner_half, 5)
    pts[60:65] = np.stack([ix, mouth_y - 0.02 * np.sin(np.linspace(0, np.pi, 5))], axis=1)
    ix_low = np.linspace(inner_half, -inner_half, 5)[1:4]
    pts[65:68] = np.stack([ix_low, mouth_y + mouth_open * np.sin(np.linspace(0, np.pi, 5)[1:4])], axis=1)
    return pts


def place_shape(shape: np.ndarray, left_eye: np.ndarray, right_eye: np.ndarray) -> LandmarkSet:
    """Map a canonical shape so its eye centres land on the given image points."""
    le, re_ = np.asarray(left_eye, float), np.asarray(right_eye, float)
    v = re_ - le
    scale = np.linalg.norm(v)
    c, s = v / scale
    rot = scale * np.array([[c, -s], [s, c]])
    centre = (le + re_) / 2.0
    return LandmarkSet(shape @ rot.T + centre)


# -- .pts files (300-W / iBUG annotation format) -------------------------------------


def read_pts(path: str | Path) -> np.ndarray:
    lines = [ln.strip() for ln in Path(path).read_text().splitlines() if ln.strip()]
    try:
        start, end = lines.index("{"), lines.index("}")
    except ValueError as exc:
        raise ValueError(f"{path}: malformed .pts file") from exc
    pts = np.array([[float(v) for v in ln.split()] for ln in lines[start + 1 : end]])
    if pts.shape != (N_POINTS, 2):
        raise ValueError(f"{path}: expected 68 points, got {len(pts)}")
    return pts


def write_pts(path: str | Path, points: np.ndarray) -> None:
    body = "\n".join(f"{x:.3f} {y:.3f}" for x, y in np.asarray(points))
    Path(path).write_text(f"version: 1\nn_points: {N_POINTS}\n{{\n{body}\n}}\n")


# -- detector backends ----------------------------------------------------------------


class LandmarkBackend(Protocol):
    def detect_all(self, image: FaceImage) -> list[LandmarkSet]: ...


class AnnotationBackend:
    """Reads landmarks stored next to the image.

    Follows the 300-W convention: ``img.pts`` for a single face, ``img_1.pts``,
    ``img_2.pts``... for several. Landmarks already attached to the FaceImage win.
    """

    def detect_all(self, image: FaceImage) -> list[LandmarkSet]:
        if image.landmarks is not None:
            return [LandmarkSet(image.landmarks)]
        if image.path is None:
            return []
        path = Path(image.path)
        found = []
        single = path.with_suffix(".pts")
        if single.exists():
            found.append(LandmarkSet(read_pts(single)))
        k = 1
        while (multi := path.with_name(f"{path.stem}_{k}.pts")).exists():
            found.append(LandmarkSet(read_pts(multi)))
            k += 1
        return found


class DlibBackend:
    """dlib HOG face detector + ensemble-of-regression-trees 68-point predictor.

    Needs the ``dlib`` package and a ``shape_predictor_68_face_landmarks.dat`` model.
    """

    def __init__(self, predictor_path: str | Path, upsample: int = 1):
        try:
            import dlib  # type: ignore[import-not-found]
        except ImportError as exc:
            raise ImportError("DlibBackend requires the optional 'dlib' package") from exc
        if not Path(predictor_path).exists():
            raise FileNotFoundError(f"dlib shape predictor not found: {predictor_path}")
        self._dlib = dlib
        self._detector = dlib.get_frontal_face_detector()
        self._predictor = dlib.shape_predictor(str(predictor_path))
        self._upsample = upsample

    def detect_all(self, image: FaceImage) -> list[LandmarkSet]:
        rects = self._detector(image.pixels, self._upsample)
        out = []
        for r in rects:
            shape = self._predictor(image.pixels, r)
            out.append(LandmarkSet(np.array([[p.x, p.y] for p in shape.parts()], dtype=float)))
        return out


def detect_landmarks(image: FaceImage, backend: LandmarkBackend | None = None) -> LandmarkSet | None:
    """Landmarks of the largest detected face, or None when no face is found."""
    backend = backend or AnnotationBackend()
    faces = backend.detect_all(image)
    if not faces:
        return None
    h, w = image.pixels.shape[:2]
    return max(faces, key=lambda f: f.bbox_area()).clamped(h, w)
