"""Face images, dataset manifests and the dev/eval + train/val split logic."""

from __future__ import annotations

import enum
import hashlib
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np
from PIL import Image

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".webp", ".tif", ".tiff")
DEFAULT_SUBJECT_PATTERN = r"^(?P<subject>[^/]+)/"


class Label(str, enum.Enum):
    REAL = "REAL"
    FAKE = "FAKE"

    @classmethod
    def _missing_(cls, value):
        if isinstance(value, str) and value.upper() in cls.__members__:
            return cls[value.upper()]
        return None


@dataclass
class FaceImage:
    """Decoded RGB raster plus its labels.

    ``landmarks`` is an optional (68, 2) array of iBUG points carried along so that
    pixel-wise transforms keep the geometry available to the local-artifacts detector.
    """

    pixels: np.ndarray
    label: Label
    subject_id: str = ""
    source: str = ""
    landmarks: np.ndarray | None = None
    path: str | None = None

    def __post_init__(self) -> None:
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValueError(f"expected an HxWx3 raster, got shape {px.shape}")
        if px.dtype != np.uint8:
            raise ValueError(f"expected 8-bit pixels, got {px.dtype}")
        self.pixels = px
        self.label = Label(self.label)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.pixels.shape  # type: ignore[return-value]

    def with_pixels(self, pixels: np.ndarray) -> "FaceImage":
        """Copy of this image with new pixels and the same labels and landmarks."""
        return FaceImage(pixels, self.label, self.subject_id, self.source, self.landmarks, self.path)


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    label: Label
    subject_id: str
    source: str


@dataclass(frozen=True)
class DatasetManifest:
    """Immutable listing of images under ``root``; entry paths are relative to it."""

    root: str
    entries: tuple[ManifestEntry, ...]
    skipped: tuple[str, ...] = field(default=(), compare=False)

    def __post_init__(self) -> None:
        paths = [e.path for e in self.entries]
        if len(set(paths)) != len(paths):
            raise ValueError("manifest paths must be unique")

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[ManifestEntry]:
        return iter(self.entries)

    @property
    def paths(self) -> list[str]:
        return [e.path for e in self.entries]

    @property
    def subjects(self) -> set[str]:
        return {e.subject_id for e in self.entries}

    @property
    def labels(self) -> set[Label]:
        return {e.label for e in self.entries}

    def subset(self, entries: Iterable[ManifestEntry]) -> "DatasetManifest":
        return DatasetManifest(self.root, tuple(entries))

    def resolve(self, entry: ManifestEntry) -> Path:
        return Path(self.root) / entry.path

    def load_image(self, entry: ManifestEntry) -> FaceImage:
        path = self.resolve(entry)
        landmarks = None
        sidecar = path.with_suffix(".pts")
        if sidecar.exists():
            # local import: landmarks depends on datamodel
            from fakebench.landmarks import read_pts

            landmarks = read_pts(sidecar)
        return FaceImage(read_rgb(path), entry.label, entry.subject_id, entry.source, landmarks, str(path))

    def images(self) -> list[FaceImage]:
        return [self.load_image(e) for e in self.entries]

    def serialize(self) -> str:
        lines = [f"#root\t{self.root}"]
        lines += [f"{e.path}\t{e.label.value}\t{e.subject_id}\t{e.source}" for e in self.entries]
        return "\n".join(lines) + "\n"

    def fingerprint(self) -> str:
        """SHA-256 of the entry listing (root excluded so relocated copies match)."""
        body = self.serialize().split("\n", 1)[1]
        return hashlib.sha256(body.encode("utf-8")).hexdigest()

    def save(self, path: str | Path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(self.serialize(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "DatasetManifest":
        text = Path(path).read_text(encoding="utf-8").splitlines()
        if not text or not text[0].startswith("#root\t"):
            raise ValueError(f"{path}: not a manifest file (missing #root header)")
        root = text[0].split("\t", 1)[1]
        entries = []
        for lineno, line in enumerate(text[1:], start=2):
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise ValueError(f"{path}:{lineno}: expected 4 tab-separated fields")
            entries.append(ManifestEntry(parts[0], Label(parts[1]), parts[2], parts[3]))
        return cls(root, tuple(entries))

    @classmethod
    def from_images(cls, root: str | Path, rel_paths: Sequence[str], images: Sequence[FaceImage]) -> "DatasetManifest":
        entries = tuple(
            ManifestEntry(p, im.label, im.subject_id, im.source) for p, im in zip(rel_paths, images)
        )
        return cls(str(root), entries)


@dataclass(frozen=True)
class SplitSpec:
    dev_fraction: float = 0.70
    train_fraction_within_dev: float = 0.75
    seed: int = 0
    subject_disjoint: bool = False

    def __post_init__(self) -> None:
        for name in ("dev_fraction", "train_fraction_within_dev"):
            value = getattr(self, name)
            if not 0.0 < value < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {value}")


class SplitError(ValueError):
    pass


def read_rgb(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def write_rgb(path: str | Path, pixels: np.ndarray) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(pixels, dtype=np.uint8), mode="RGB").save(path)


def _decodable(path: Path) -> bool:
    try:
        with Image.open(path) as im:
            im.verify()
        with Image.open(path) as im:
            im.load()
        return True
    except Exception:  # PIL raises a zoo of exception types on bad data
        return False


def load_manifest(
    root: str | Path,
    label: Label | str,
    source: str,
    subject_pattern: str | None = DEFAULT_SUBJECT_PATTERN,
) -> DatasetManifest:
    """Index every decodable image below ``root``.

    ``subject_pattern`` is a regex applied to the root-relative POSIX path; its
    ``subject`` group becomes the subject id (no match gives an empty id). The default
    takes the first directory component, matching the ``<root>/<subject>/<image>``
    layout of real-face corpora. Undecodable files are skipped and listed in
    ``manifest.skipped``.
    """
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root does not exist: {root}")
    label = Label(label)
    regex = re.compile(subject_pattern) if subject_pattern else None
    entries, skipped = [], []
    for path in sorted(p for p in root.rglob("*") if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES):
        rel = path.relative_to(root).as_posix()
        if not _decodable(path):
            logger.warning("skipping undecodable image %s", path)
            skipped.append(rel)
            continue
        subject = ""
        if regex is not None:
            m = regex.search(rel)
            if m:
                subject = m.group("subject")
        entries.append(ManifestEntry(rel, label, subject, source))
    if not entries:
        logger.warning("no images found under %s", root)
    if skipped:
        logger.warning("%d undecodable file(s) skipped under %s", len(skipped), root)
    return DatasetManifest(str(root), tuple(entries), tuple(skipped))


def _floor(x: float) -> int:
    return math.floor(x + 1e-9)


def split_sizes(n: int, spec: SplitSpec) -> tuple[int, int, int]:
    """(train, val, eval) sizes for an i.i.d. split of ``n`` items.

    Dev takes the floor of its share and eval the remainder; inside dev the val share
    is floored and train keeps the remainder, so 100 items give (53, 17, 30).
    """
    n_dev = _floor(spec.dev_fraction * n)
    n_val = _floor((1.0 - spec.train_fraction_within_dev) * n_dev)
    return n_dev - n_val, n_val, n - n_dev


def make_splits(
    manifest: DatasetManifest, spec: SplitSpec
) -> tuple[DatasetManifest, DatasetManifest, DatasetManifest]:
    """Partition a manifest into (train, val, eval).

    With ``spec.subject_disjoint`` subjects are shuffled and assigned whole to dev or
    eval, filling dev greedily up to its target size; train/val is then drawn i.i.d.
    inside dev.
    """
    if len(manifest) == 0:
        raise SplitError("cannot split an empty manifest")
    rng = np.random.default_rng(spec.seed)
    entries = list(manifest.entries)
    n = len(entries)
    n_dev_target = _floor(spec.dev_fraction * n)

    if spec.subject_disjoint:
        by_subject: dict[str, list[ManifestEntry]] = {}
        for e in entries:
            by_subject.setdefault(e.subject_id, []).append(e)
        if len(by_subject) < 2 or "" in by_subject:
            raise SplitError(
                "subject-disjoint split needs at least two distinct, non-empty subject ids"
            )
        subjects = sorted(by_subject)
        order = rng.permutation(len(subjects))
        dev, evl = [], []
        for i in order:
            group = by_subject[subjects[i]]
            if len(dev) + len(group) <= n_dev_target or not dev:
                dev.extend(group)
            else:
                evl.extend(group)
        if not evl:
            raise SplitError("subject-disjoint split left the evaluation partition empty")
    else:
        perm = rng.permutation(n)
        dev = [entries[i] for i in perm[:n_dev_target]]
        evl = [entries[i] for i in perm[n_dev_target:]]

    n_val = _floor((1.0 - spec.train_fraction_within_dev) * len(dev))
    perm = rng.permutation(len(dev))
    val_idx = set(perm[:n_val].tolist())
    train = [e for i, e in enumerate(dev) if i not in val_idx]
    val = [e for i, e in enumerate(dev) if i in val_idx]

    keyed = {e.path: k for k, e in enumerate(entries)}
    ordered = lambda part: manifest.subset(sorted(part, key=lambda e: keyed[e.path]))  # noqa: E731
    return ordered(train), ordered(val), ordered(evl)


def balance(
    real: DatasetManifest, fake: DatasetManifest, seed: int
) -> tuple[DatasetManifest, DatasetManifest]:
    """Subsample the larger manifest so both classes have min(|real|, |fake|) entries."""
    if len(real) == 0 or len(fake) == 0:
        raise ValueError("balance() needs non-empty real and fake manifests")
    n = min(len(real), len(fake))
    rng = np.random.default_rng(seed)

    def take(m: DatasetManifest) -> DatasetManifest:
        if len(m) == n:
            return m
        keep = np.sort(rng.choice(len(m), size=n, replace=False))
        return m.subset(m.entries[i] for i in keep)

    return take(real), take(fake)
