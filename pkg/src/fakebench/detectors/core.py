"""Common trainable-scorer interface over the three detectors.

Scores are probabilities of FAKE: higher means more likely fake.
"""

from __future__ import annotations

import copy
import enum
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from sklearn.neighbors import NearestNeighbors
from sklearn.preprocessing import StandardScaler
from torch import nn

from fakebench.datamodel import DatasetManifest, FaceImage, Label
from fakebench.detectors.backbones import build_backbone
from fakebench.detectors.features import EYE_FEATURE_DIM, cooccurrence_batch, eye_color_features
from fakebench.landmarks import detect_landmarks
from fakebench.utils import images_to_tensor, seed_everything

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "fakebench.detector/1"


class DetectorKind(str, enum.Enum):
    HOLISTIC_CNN = "holistic"
    STEGANALYSIS = "steg"
    LOCAL_ARTIFACTS = "artifacts"


@dataclass(frozen=True)
class DetectorConfig:
    seed: int = 0
    deterministic: bool = True
    backbone: str = "tiny_separable"  # HOLISTIC_CNN only
    weights: str | None = None
    warmup_epochs: int = 3
    epochs: int = 20
    learning_rate: float = 1e-3
    batch_size: int = 32
    dropout: float = 0.5
    k: int = 5

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.warmup_epochs < 0:
            raise ValueError("epochs must be >= 1 and warmup_epochs >= 0")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")


class Classifier(nn.Module):
    def __init__(self, backbone: nn.Module, dropout: float):
        super().__init__()
        self.backbone = backbone
        self.head = nn.Sequential(nn.Dropout(dropout), nn.Linear(backbone.feature_dim, 2))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.backbone(x))


def _network(kind: DetectorKind, cfg: DetectorConfig) -> Classifier:
    torch.manual_seed(cfg.seed)
    if kind is DetectorKind.HOLISTIC_CNN:
        return Classifier(build_backbone(cfg.backbone, cfg.weights), cfg.dropout)
    return Classifier(build_backbone("cooccurrence_cnn"), cfg.dropout)


def network_input(kind: DetectorKind, pixels: np.ndarray) -> torch.Tensor:
    """(N, H, W, 3) uint8 -> the tensor the detector's network consumes."""
    if kind is DetectorKind.HOLISTIC_CNN:
        return images_to_tensor(pixels).sub_(0.5).div_(0.5)
    return cooccurrence_batch(pixels)


def artifact_features(images: Sequence[FaceImage]) -> np.ndarray:
    rows = []
    for im in images:
        lm = detect_landmarks(im)
        if lm is None:
            raise ValueError(f"no landmarks for {im.path or 'in-memory image'}; LOCAL_ARTIFACTS needs them")
        rows.append(eye_color_features(im, lm))
    return np.asarray(rows, dtype=np.float64).reshape(-1, EYE_FEATURE_DIM)


@dataclass
class KnnState:
    """Standardised eye-colour features of the training set and their labels (1 = fake)."""

    mean: np.ndarray
    scale: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    k: int
    _index: NearestNeighbors | None = field(default=None, repr=False)

    @classmethod
    def fit(cls, x: np.ndarray, y: np.ndarray, k: int) -> "KnnState":
        if k > len(x):
            raise ValueError(f"k={k} exceeds the {len(x)} training samples")
        scaler = StandardScaler().fit(x)
        return cls(scaler.mean_, scaler.scale_, scaler.transform(x), y.astype(np.int64), k)

    def _neighbors(self) -> NearestNeighbors:
        if self._index is None:
            self._index = NearestNeighbors(n_neighbors=self.k, algorithm="brute").fit(self.features)
        return self._index

    def fake_fraction(self, x: np.ndarray) -> np.ndarray:
        """Fraction of fake labels among the k nearest training points."""
        z = (x - self.mean) / self.scale
        _, idx = self._neighbors().kneighbors(z)
        return self.labels[idx].mean(axis=1)

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Majority vote; exact ties are broken by inverse-distance weighting."""
        z = (x - self.mean) / self.scale
        dist, idx = self._neighbors().kneighbors(z)
        votes = self.labels[idx]
        frac = votes.mean(axis=1)
        pred = (frac > 0.5).astype(np.int64)
        tie = frac == 0.5
        if tie.any():
            w = 1.0 / np.maximum(dist[tie], 1e-12)
            pred[tie] = ((w * votes[tie]).sum(axis=1) > (w * (1 - votes[tie])).sum(axis=1)).astype(np.int64)
        return pred


@dataclass
class Detector:
    kind: DetectorKind
    config: DetectorConfig
    network: Classifier | None = None
    knn: KnnState | None = None
    history: list[dict[str, float]] = field(default_factory=list)
    best_epoch: int = 0
    val_accuracy: float = float("nan")
    orientation_ok: bool = True

    @property
    def trained(self) -> bool:
        return self.network is not None or self.knn is not None

    @property
    def failed(self) -> bool:
        """True when mean validation fake score did not exceed mean real score."""
        return not self.orientation_ok

    def score_batch(self, images: Sequence[FaceImage], batch_size: int = 32) -> np.ndarray:
        if not self.trained:
            raise RuntimeError("detector is untrained")
        if len(images) == 0:
            return np.zeros(0)
        if self.kind is DetectorKind.LOCAL_ARTIFACTS:
            return self.knn.fake_fraction(artifact_features(images))
        return _fake_probabilities(self.network, self.kind, np.stack([im.pixels for im in images]), batch_size)

    def save(self, path: str | Path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        blob = {
            "format": CHECKPOINT_FORMAT,
            "kind": self.kind.value,
            "config": asdict(self.config),
            "history": self.history,
            "best_epoch": self.best_epoch,
            "val_accuracy": self.val_accuracy,
            "orientation_ok": self.orientation_ok,
        }
        if self.network is not None:
            blob["state_dict"] = self.network.state_dict()
        if self.knn is not None:
            blob["knn"] = {
                "mean": torch.from_numpy(self.knn.mean),
                "scale": torch.from_numpy(self.knn.scale),
                "features": torch.from_numpy(self.knn.features),
                "labels": torch.from_numpy(self.knn.labels),
                "k": self.knn.k,
            }
        torch.save(blob, path)

    @classmethod
    def load(cls, path: str | Path) -> "Detector":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"detector checkpoint not found: {path}")
        blob = torch.load(path, map_location="cpu", weights_only=True)
        if blob.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: not a detector checkpoint")
        kind = DetectorKind(blob["kind"])
        cfg = DetectorConfig(**{**blob["config"], "weights": None})
        det = cls(kind, cfg, history=list(blob["history"]), best_epoch=blob["best_epoch"],
                  val_accuracy=blob["val_accuracy"], orientation_ok=blob["orientation_ok"])  # fmt: skip
        if "state_dict" in blob:
            det.network = _network(kind, cfg)
            det.network.load_state_dict(blob["state_dict"])
            det.network.eval()
        if "knn" in blob:
            kb = blob["knn"]
            det.knn = KnnState(kb["mean"].numpy(), kb["scale"].numpy(), kb["features"].numpy(), kb["labels"].numpy(), int(kb["k"]))
        return det


def score(detector: Detector, image: FaceImage) -> float:
    return float(detector.score_batch([image])[0])


def _fake_probabilities(net: nn.Module, kind: DetectorKind, pixels: np.ndarray, batch_size: int) -> np.ndarray:
    net.eval()
    out = []
    with torch.no_grad():
        for i in range(0, len(pixels), batch_size):
            logits = net(network_input(kind, pixels[i : i + batch_size]))
            out.append(torch.softmax(logits.double(), dim=1)[:, 1].numpy())
    return np.concatenate(out)


def _as_images(source: DatasetManifest | Sequence[FaceImage]) -> list[FaceImage]:
    return source.images() if isinstance(source, DatasetManifest) else list(source)


def _check_pair(real: list[FaceImage], fake: list[FaceImage], what: str) -> None:
    if not real or not fake:
        raise ValueError(f"{what}: both real and fake sets must be non-empty")
    if abs(len(real) - len(fake)) > 1:
        raise ValueError(f"{what}: class imbalance {len(real)} real vs {len(fake)} fake exceeds +-1")
    if any(im.label is not Label.REAL for im in real) or any(im.label is not Label.FAKE for im in fake):
        raise ValueError(f"{what}: label mismatch between the real/fake arguments and image labels")


def _epoch(net: Classifier, kind: DetectorKind, x, y, opt, bs: int, rng, frozen: bool = False) -> float:
    net.train()
    if frozen:
        net.backbone.eval()  # keep BN statistics of the frozen backbone untouched
    order = rng.permutation(len(x))
    total = 0.0
    for i in range(0, len(order), bs):
        idx = order[i : i + bs]
        if len(idx) == 1 and len(order) > 1:
            continue  # BatchNorm cannot train on a single sample
        logits = net(network_input(kind, x[idx]))
        loss = nn.functional.cross_entropy(logits, torch.from_numpy(y[idx]))
        opt.zero_grad()
        loss.backward()
        opt.step()
        total += loss.item() * len(idx)
    return total / len(order)


def _validate(net: Classifier, kind: DetectorKind, x: np.ndarray, y: np.ndarray, bs: int) -> tuple[float, float]:
    p = _fake_probabilities(net, kind, x, bs)
    acc = float(np.mean((p >= 0.5) == (y == 1)))
    eps = 1e-12
    loss = float(-np.mean(y * np.log(p + eps) + (1 - y) * np.log(1 - p + eps)))
    return acc, loss


def _fit_network(kind: DetectorKind, cfg: DetectorConfig, x, y, xv, yv) -> Detector:
    seed_everything(cfg.seed, cfg.deterministic)
    rng = np.random.default_rng(cfg.seed)
    net = _network(kind, cfg)
    det = Detector(kind, cfg)

    # head-only warmup
    for p in net.backbone.parameters():
        p.requires_grad_(False)
    opt = torch.optim.Adam(net.head.parameters(), lr=cfg.learning_rate)
    for epoch in range(cfg.warmup_epochs):
        loss = _epoch(net, kind, x, y, opt, cfg.batch_size, rng, frozen=True)
        acc, vloss = _validate(net, kind, xv, yv, cfg.batch_size)
        det.history.append({"epoch": epoch + 1, "phase": 0, "train_loss": loss, "val_loss": vloss, "val_acc": acc})

    for p in net.parameters():
        p.requires_grad_(True)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate)
    best_key, best_state = None, None
    for epoch in range(cfg.epochs):
        loss = _epoch(net, kind, x, y, opt, cfg.batch_size, rng)
        acc, vloss = _validate(net, kind, xv, yv, cfg.batch_size)
        n = cfg.warmup_epochs + epoch + 1
        det.history.append({"epoch": n, "phase": 1, "train_loss": loss, "val_loss": vloss, "val_acc": acc})
        logger.info("%s epoch %d loss %.4f val acc %.4f val loss %.4f", kind.value, n, loss, acc, vloss)
        key = (acc, -vloss)
        if best_key is None or key > best_key:
            best_key, best_state, det.best_epoch = key, copy.deepcopy(net.state_dict()), n
    net.load_state_dict(best_state)
    net.eval()
    det.network = net
    det.val_accuracy = best_key[0]
    return det


def train_detector(
    kind: DetectorKind | str,
    real_train: DatasetManifest | Sequence[FaceImage],
    fake_train: DatasetManifest | Sequence[FaceImage],
    real_val: DatasetManifest | Sequence[FaceImage],
    fake_val: DatasetManifest | Sequence[FaceImage],
    cfg: DetectorConfig = DetectorConfig(),
) -> Detector:
    """Fit one detector.

    CNN detectors: 2-class head on a backbone, ``cfg.warmup_epochs`` of head-only
    training, then ``cfg.epochs`` of full fine-tuning with Adam and cross-entropy; the
    epoch with the best validation accuracy (lower validation loss breaks ties) is kept.
    LOCAL_ARTIFACTS: k-NN on standardised eye-colour features.

    After fitting, the mean validation score of fakes must exceed that of reals; a
    detector failing this is returned with ``failed`` set.
    """
    kind = DetectorKind(kind)
    rt, ft, rv, fv = (_as_images(s) for s in (real_train, fake_train, real_val, fake_val))
    _check_pair(rt, ft, "training set")
    _check_pair(rv, fv, "validation set")
    y = np.array([0] * len(rt) + [1] * len(ft), dtype=np.int64)
    yv = np.array([0] * len(rv) + [1] * len(fv), dtype=np.int64)

    if kind is DetectorKind.LOCAL_ARTIFACTS:
        det = Detector(kind, cfg, knn=KnnState.fit(artifact_features(rt + ft), y, cfg.k))
        det.val_accuracy = float(np.mean(det.knn.predict(artifact_features(rv + fv)) == yv))
    else:
        x = np.stack([im.pixels for im in rt + ft])
        xv = np.stack([im.pixels for im in rv + fv])
        det = _fit_network(kind, cfg, x, y, xv, yv)

    s_real, s_fake = det.score_batch(rv), det.score_batch(fv)
    det.orientation_ok = bool(s_fake.mean() > s_real.mean())
    if not det.orientation_ok:
        logger.warning("%s detector failed the orientation check (fake %.3f <= real %.3f)", kind.value, s_fake.mean(), s_real.mean())
    return det
