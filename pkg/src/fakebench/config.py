"""Run configuration (YAML) and the fixed run-directory layout.

Leaves that are not fixed by the method description are written as
``{value: ..., non_paper: true}`` so that anyone editing a config can tell the
published constants from the toolkit's own choices. Both the annotated and the plain
form are accepted when reading.
"""

from __future__ import annotations

import dataclasses
import json
import platform
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from fakebench.datamodel import SplitSpec
from fakebench.detectors.core import DetectorConfig
from fakebench.ganprintr import AutoencoderSpec, TrainConfig
from fakebench.preprocess import AlignmentTarget
from fakebench.proxy import FingerprintKind, ProxyCorpusSpec
from fakebench.transforms import TransformKind, TransformSpec

TOOL_VERSION = "0.1.0"
RUN_SUBDIRS = ("checkpoints", "results", "reports", "plots")


@dataclass
class PreprocessSection:
    output_size: int = 224
    eye_half_span: float = 0.18
    eye_y: float = 0.36
    frontal_threshold: float = 0.15

    NON_PAPER = ("eye_half_span", "eye_y", "frontal_threshold")

    def target(self) -> AlignmentTarget:
        return AlignmentTarget.from_fractions(self.output_size, self.eye_half_span, self.eye_y)


@dataclass
class SplitSection:
    dev_fraction: float = 0.70
    train_fraction_within_dev: float = 0.75

    NON_PAPER = ()

    def spec(self, seed: int) -> SplitSpec:
        return SplitSpec(self.dev_fraction, self.train_fraction_within_dev, seed)


@dataclass
class AutoencoderSection:
    bottleneck: int = 8
    epochs: int = 100
    learning_rate: float = 1e-3
    batch_size: int = 32
    crop_size: int | None = None
    cosine_decay: bool = False
    train_real: str | None = None  # manifest of the disjoint real set used to train GANprintR

    NON_PAPER = ("batch_size", "crop_size", "cosine_decay")

    def spec(self) -> AutoencoderSpec:
        return AutoencoderSpec(bottleneck_channels=self.bottleneck)

    def train_config(self, seed: int, deterministic: bool) -> TrainConfig:
        return TrainConfig(self.epochs, self.learning_rate, self.batch_size, seed, self.crop_size, deterministic, self.cosine_decay)


@dataclass
class DetectorSection:
    backbone: str = "tiny_separable"
    weights: str | None = None
    warmup_epochs: int = 3
    epochs: int = 20
    learning_rate: float = 1e-3
    dropout: float = 0.5
    batch_size: int = 32
    k: int = 5

    NON_PAPER = ("backbone", "weights", "warmup_epochs", "batch_size", "k")

    def config(self, seed: int, deterministic: bool) -> DetectorConfig:
        return DetectorConfig(seed, deterministic, self.backbone, self.weights, self.warmup_epochs, self.epochs,
                              self.learning_rate, self.batch_size, self.dropout, self.k)  # fmt: skip


@dataclass
class TransformSection:
    downsize_ratio: float = 1.0 / 3.0
    lowpass_kernel: int = 9
    lowpass_sigma: float = 1.7
    jpeg_quality: int = 60

    NON_PAPER = ()

    def spec(self, kind: TransformKind | str, checkpoint: str | None = None) -> TransformSpec:
        return TransformSpec(TransformKind(kind), self.downsize_ratio, self.lowpass_kernel, self.lowpass_sigma,
                             self.jpeg_quality, checkpoint)  # fmt: skip


@dataclass
class ProxySection:
    n_real: int = 600
    n_fake: int = 600
    amplitude: float = 3.0
    eye_artifact: float = 2.0
    images_per_subject: int = 4

    NON_PAPER = ("n_real", "n_fake", "amplitude", "eye_artifact", "images_per_subject")

    def spec(self, kind: FingerprintKind | str, seed: int, fingerprint_seed: int = 0) -> ProxyCorpusSpec:
        return ProxyCorpusSpec(self.n_real, self.n_fake, FingerprintKind(kind), self.amplitude, self.eye_artifact,
                               seed, fingerprint_seed, self.images_per_subject)  # fmt: skip


@dataclass
class RunConfig:
    run_dir: str = "runs/default"
    seed: int = 0
    deterministic: bool = True
    device: str = "cpu"
    workers: int = 1
    # source tag -> manifest file; real/fake tags feed the A/B plan generators in order
    sources: dict[str, str] = field(default_factory=dict)
    real_sources: list[str] = field(default_factory=list)
    fake_sources: list[str] = field(default_factory=list)
    detector_kind: str = "holistic"
    latent_sweep: list[int] = field(default_factory=lambda: [128, 64, 32, 16, 8, 4])
    resolution_ratios: list[float] = field(default_factory=lambda: [1.0, 1.0 / 2, 1.0 / 3])
    preprocess: PreprocessSection = field(default_factory=PreprocessSection)
    split: SplitSection = field(default_factory=SplitSection)
    autoencoder: AutoencoderSection = field(default_factory=AutoencoderSection)
    detector: DetectorSection = field(default_factory=DetectorSection)
    transforms: TransformSection = field(default_factory=TransformSection)
    proxy: ProxySection = field(default_factory=ProxySection)

    NON_PAPER = ("seed", "device", "workers", "resolution_ratios")

    # layout ---------------------------------------------------------------------
    @property
    def root(self) -> Path:
        return Path(self.run_dir)

    def path(self, sub: str, name: str = "") -> Path:
        if sub not in RUN_SUBDIRS:
            raise ValueError(f"unknown run subdirectory {sub!r}")
        p = self.root / sub
        return p / name if name else p

    def make_dirs(self) -> None:
        for sub in RUN_SUBDIRS:
            (self.root / sub).mkdir(parents=True, exist_ok=True)

    def ae_checkpoint(self, c: int) -> Path:
        return self.path("checkpoints", f"ganprintr_c{c}.pt")

    # serialisation --------------------------------------------------------------
    def to_dict(self, annotate: bool = True) -> dict[str, Any]:
        return _to_dict(self, annotate)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "RunConfig":
        return _from_dict(cls, data or {})

    @classmethod
    def from_yaml(cls, text: str) -> "RunConfig":
        return cls.from_dict(yaml.safe_load(text) or {})

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        return cls.from_yaml(path.read_text(encoding="utf-8"))

    def save(self, path: str | Path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(self.to_yaml(), encoding="utf-8")


def _to_dict(obj, annotate: bool) -> dict[str, Any]:
    out = {}
    non_paper = getattr(type(obj), "NON_PAPER", ())
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if dataclasses.is_dataclass(v):
            out[f.name] = _to_dict(v, annotate)
        elif annotate and f.name in non_paper:
            out[f.name] = {"value": v, "non_paper": True}
        else:
            out[f.name] = v
    return out


def _from_dict(cls, data: dict[str, Any]):
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ValueError(f"unknown {cls.__name__} key(s): {', '.join(sorted(unknown))}")
    kw = {}
    defaults = cls()
    for name, raw in data.items():
        if isinstance(raw, dict) and "non_paper" in raw:
            raw = raw.get("value")
        current = getattr(defaults, name)
        kw[name] = _from_dict(type(current), raw) if dataclasses.is_dataclass(current) else raw
    return cls(**kw)


# -- run manifests ---------------------------------------------------------------------


def write_run_manifest(
    out_dir: str | Path,
    command: str,
    config: RunConfig | None,
    argv: list[str],
    inputs: dict[str, str] | None = None,
    seeds: dict[str, int] | None = None,
) -> Path:
    """Record (config snapshot, seeds, input hashes, tool version) beside a command's outputs."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    blob = {
        "command": command,
        "argv": argv,
        "tool_version": TOOL_VERSION,
        "python": sys.version.split()[0],
        "platform": platform.platform(),
        "time": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "seeds": seeds or {},
        "inputs": inputs or {},
        "config": config.to_dict() if config is not None else None,
    }
    path = out_dir / f"run_manifest_{command}.json"
    path.write_text(json.dumps(blob, indent=2, default=str) + "\n", encoding="utf-8")
    return path
