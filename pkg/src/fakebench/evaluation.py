"""Experiment runner: train detectors on development data, score transformed evaluation data.

Sources are named manifests (e.g. ``"VF2"`` or ``"PROXY_PERIODIC_HF"``). Each source is
split once into train/val/eval partitions (subject-disjoint for real sources with
subject ids); development always draws on train/val and evaluation on the eval
partition, so dev and eval never share images even when the source tags coincide.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from fakebench.datamodel import DatasetManifest, FaceImage, Label, SplitSpec, balance, make_splits
from fakebench.detectors.core import Detector, DetectorConfig, DetectorKind, train_detector
from fakebench.ganprintr import GANprintRModel
from fakebench.metrics import compute_auc, compute_eer, compute_recalls, psnr, ssim
from fakebench.transforms import TransformKind, TransformSpec, apply_transform

logger = logging.getLogger(__name__)

LATENT_SWEEP = (128, 64, 32, 16, 8, 4)
RESOLUTION_RATIOS = tuple(1.0 / k for k in range(1, 8))  # raw, 1/2, ..., 1/7

RESULTS_METADATA = {
    "recall_threshold": "EER operating point of the same evaluation",
    "eer_interpolation": "linear between the thresholds bracketing the FPR/FNR crossing",
    "psnr": "all channels jointly, transformed fake vs its own pre-transform version, mean over fakes",
    "ssim": "BT.601 luma, 11x11 Gaussian window sigma 1.5, mean over fakes",
    "score_orientation": "higher = more likely fake",
}


class MissingSourceError(KeyError):
    def __str__(self) -> str:
        return str(self.args[0])


@dataclass(frozen=True)
class ExperimentSpec:
    experiment_id: str
    dev_real: str
    dev_fake: str
    eval_real: str
    eval_fake: str
    detector: DetectorKind = DetectorKind.HOLISTIC_CNN
    ted: TransformSpec = TransformSpec()
    seed: int = 0
    # applied to every development image (both classes) before training, e.g. downsizing
    dev_transform: TransformSpec | None = None
    # also transform the evaluation reals (default: fakes only)
    transform_real: bool = False
    detector_checkpoint: str | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "detector", DetectorKind(self.detector))
        dt = self.dev_transform
        if dt is not None and (dt.kind is TransformKind.IDENTITY or (dt.kind is TransformKind.DOWNSIZE and dt.ratio == 1.0)):
            object.__setattr__(self, "dev_transform", None)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["detector"] = self.detector.value
        d["ted"] = _transform_dict(self.ted)
        d["dev_transform"] = _transform_dict(self.dev_transform) if self.dev_transform else None
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ExperimentSpec":
        d = dict(d)
        d["ted"] = TransformSpec(**d.get("ted") or {})
        if d.get("dev_transform"):
            d["dev_transform"] = TransformSpec(**d["dev_transform"])
        return cls(**d)


def _transform_dict(t: TransformSpec) -> dict:
    d = asdict(t)
    d["kind"] = t.kind.value
    return d


@dataclass(frozen=True)
class EvalResult:
    experiment_id: str
    detector: str
    dev_real: str
    dev_fake: str
    eval_real: str
    eval_fake: str
    ted: str
    eer_pct: float
    recall_real_pct: float
    recall_fake_pct: float
    auc_pct: float | None = None
    psnr_db: float | None = None
    ssim: float | None = None
    threshold: float = float("nan")
    n_real: int = 0
    n_fake: int = 0
    error: str = ""

    def __post_init__(self) -> None:
        if self.error:
            return
        for name in ("eer_pct", "recall_real_pct", "recall_fake_pct", "auc_pct"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 100.0:
                raise ValueError(f"{name}={v} outside [0, 100]")
        if self.ssim is not None and not -1.0 <= self.ssim <= 1.0:
            raise ValueError(f"ssim={self.ssim} outside [-1, 1]")
        if self.n_real <= 0 or self.n_fake <= 0:
            raise ValueError("evaluated counts must be positive")

    @classmethod
    def columns(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def to_row(self) -> list[str]:
        return [_fmt(getattr(self, c)) for c in self.columns()]

    @classmethod
    def from_row(cls, row: Mapping[str, str]) -> "EvalResult":
        kw = {}
        for f in fields(cls):
            raw = row[f.name]
            if f.name in ("n_real", "n_fake"):
                kw[f.name] = int(raw)
            elif f.type in ("float", "float | None"):
                kw[f.name] = None if raw == "" else float(raw)
            else:
                kw[f.name] = raw
        return cls(**kw)

    @classmethod
    def failed(cls, spec: ExperimentSpec, message: str) -> "EvalResult":
        nan = float("nan")
        return cls(spec.experiment_id, spec.detector.value, spec.dev_real, spec.dev_fake, spec.eval_real,
                   spec.eval_fake, spec.ted.tag, nan, nan, nan, error=message)  # fmt: skip


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(v)
    return str(v)


# -- runner ---------------------------------------------------------------------------


@dataclass(frozen=True)
class _Partitions:
    train: DatasetManifest
    val: DatasetManifest
    eval: DatasetManifest


class ExperimentRunner:
    """Runs ExperimentSpecs against a registry of named source manifests.

    Detectors are cached per (dev_real, dev_fake, kind, seed, dev_transform, config);
    with ``checkpoint_dir`` they also persist across runner instances.
    """

    def __init__(
        self,
        sources: Mapping[str, DatasetManifest],
        split: SplitSpec = SplitSpec(),
        detector_config: DetectorConfig = DetectorConfig(),
        checkpoint_dir: str | Path | None = None,
    ):
        self.sources = dict(sources)
        self.split = split
        self.detector_config = detector_config
        self.checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir else None
        self.trainings = 0
        self._partitions: dict[str, _Partitions] = {}
        self._images: dict[tuple[str, str], list[FaceImage]] = {}
        self._detectors: dict[str, Detector] = {}
        self._ae_models: dict[str, GANprintRModel] = {}
        self._transformed: dict[tuple, list[FaceImage]] = {}

    # data -----------------------------------------------------------------------
    def check_sources(self, specs: Iterable[ExperimentSpec]) -> None:
        missing = sorted({t for s in specs for t in (s.dev_real, s.dev_fake, s.eval_real, s.eval_fake)} - set(self.sources))
        if missing:
            raise MissingSourceError(
                f"unprepared source(s): {', '.join(missing)}; prepare them (e.g. `fakebench prepare` or "
                f"`fakebench proxy-gen`) and list them in the config's sources section"
            )

    def partitions(self, tag: str) -> _Partitions:
        if tag not in self._partitions:
            self.check_sources([ExperimentSpec("", tag, tag, tag, tag)])
            m = self.sources[tag]
            by_subject = Label.REAL in m.labels and all(e.subject_id for e in m.entries) and len(m.subjects) > 1
            self._partitions[tag] = _Partitions(*make_splits(m, replace(self.split, subject_disjoint=by_subject)))
        return self._partitions[tag]

    def images(self, manifest: DatasetManifest) -> list[FaceImage]:
        key = (manifest.root, manifest.fingerprint())
        if key not in self._images:
            self._images[key] = manifest.images()
        return self._images[key]

    def _balanced(self, real: DatasetManifest, fake: DatasetManifest, seed: int) -> tuple[list[FaceImage], list[FaceImage]]:
        r, f = balance(real, fake, seed)
        return self.images(r), self.images(f)

    def ae_model(self, checkpoint: str) -> GANprintRModel:
        if checkpoint not in self._ae_models:
            self._ae_models[checkpoint] = GANprintRModel.load(checkpoint)
        return self._ae_models[checkpoint]

    def _transform(self, spec: TransformSpec, images: list[FaceImage]) -> list[FaceImage]:
        paths = tuple(im.path for im in images)
        key = (json.dumps(_transform_dict(spec), sort_keys=True), paths) if all(paths) else None
        if key is not None and key in self._transformed:
            return self._transformed[key]
        model = self.ae_model(spec.checkpoint) if spec.kind is TransformKind.GANPRINTR else None
        out = apply_transform(spec, images, model)
        if key is not None:
            self._transformed[key] = out
        return out

    # detectors ------------------------------------------------------------------
    def _detector_key(self, spec: ExperimentSpec) -> str:
        parts = {
            "dev_real": spec.dev_real,
            "dev_fake": spec.dev_fake,
            "real": self.sources[spec.dev_real].fingerprint(),
            "fake": self.sources[spec.dev_fake].fingerprint(),
            "split": asdict(self.split),
            "kind": spec.detector.value,
            "seed": spec.seed,
            "dev_transform": _transform_dict(spec.dev_transform) if spec.dev_transform else None,
            "config": asdict(self.detector_config),
        }
        return hashlib.sha256(json.dumps(parts, sort_keys=True).encode()).hexdigest()[:16]

    def detector(self, spec: ExperimentSpec) -> Detector:
        if spec.detector_checkpoint:
            return Detector.load(spec.detector_checkpoint)
        key = self._detector_key(spec)
        if key in self._detectors:
            return self._detectors[key]
        path = self.checkpoint_dir / f"detector_{spec.detector.value}_{key}.pt" if self.checkpoint_dir else None
        if path is not None and path.exists():
            det = Detector.load(path)
        else:
            real, fake = self.partitions(spec.dev_real), self.partitions(spec.dev_fake)
            rt, ft = self._balanced(real.train, fake.train, spec.seed)
            rv, fv = self._balanced(real.val, fake.val, spec.seed + 1)
            if spec.dev_transform is not None:
                rt, ft, rv, fv = (self._transform(spec.dev_transform, s) for s in (rt, ft, rv, fv))
            cfg = replace(self.detector_config, seed=spec.seed)
            logger.info("training %s detector on %s/%s (%d+%d)", spec.detector.value, spec.dev_real, spec.dev_fake, len(rt), len(ft))
            det = train_detector(spec.detector, rt, ft, rv, fv, cfg)
            self.trainings += 1
            if path is not None:
                det.save(path)
        self._detectors[key] = det
        return det

    # evaluation -----------------------------------------------------------------
    def run(self, spec: ExperimentSpec) -> EvalResult:
        """Train (or fetch) the detector, transform the evaluation fakes, score both classes."""
        self.check_sources([spec])
        det = self.detector(spec)
        real_p, fake_p = self.partitions(spec.eval_real), self.partitions(spec.eval_fake)
        real, fake = self._balanced(real_p.eval, fake_p.eval, spec.seed + 2)
        identity = spec.ted.kind is TransformKind.IDENTITY
        fake_t = fake if identity else self._transform(spec.ted, fake)
        real_t = self._transform(spec.ted, real) if spec.transform_real and not identity else real

        s_real, s_fake = det.score_batch(real_t), det.score_batch(fake_t)
        eer, thr = compute_eer(s_real, s_fake)
        r_real, r_fake = compute_recalls(s_real, s_fake, thr)
        psnr_db = ssim_v = None
        if not identity:
            psnr_db = float(np.mean([psnr(a.pixels, b.pixels) for a, b in zip(fake, fake_t)]))
            ssim_v = float(np.mean([ssim(a.pixels, b.pixels) for a, b in zip(fake, fake_t)]))
        return EvalResult(
            experiment_id=spec.experiment_id,
            detector=spec.detector.value,
            dev_real=spec.dev_real,
            dev_fake=spec.dev_fake,
            eval_real=spec.eval_real,
            eval_fake=spec.eval_fake,
            ted=spec.ted.tag,
            eer_pct=100.0 * eer,
            recall_real_pct=100.0 * r_real,
            recall_fake_pct=100.0 * r_fake,
            auc_pct=100.0 * compute_auc(s_real, s_fake),
            psnr_db=psnr_db,
            ssim=ssim_v,
            threshold=float(thr),
            n_real=len(real_t),
            n_fake=len(fake_t),
        )


def run_experiment(runner: ExperimentRunner, spec: ExperimentSpec) -> EvalResult:
    return runner.run(spec)


# -- results tables ---------------------------------------------------------------------


def append_result(path: str | Path, result: EvalResult) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    new = not path.exists() or path.stat().st_size == 0
    with open(path, "a", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        if new:
            w.writerow(EvalResult.columns())
        w.writerow(result.to_row())
    meta = path.with_name(path.name + ".meta.json")
    if not meta.exists():
        meta.write_text(json.dumps(RESULTS_METADATA, indent=2) + "\n", encoding="utf-8")


def read_results(path: str | Path) -> list[EvalResult]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [EvalResult.from_row(r) for r in csv.DictReader(fh, delimiter="\t")]


def run_matrix(
    runner: ExperimentRunner, matrix: Sequence[ExperimentSpec], out_path: str | Path | None = None
) -> list[EvalResult]:
    """One EvalResult per spec, appended to ``out_path`` as soon as it is computed.

    A failing row is recorded with its error message and NaN metrics; the matrix goes on.
    """
    results = []
    for spec in matrix:
        try:
            res = runner.run(spec)
        except Exception as exc:  # noqa: BLE001 - rows fail independently
            logger.exception("row %s failed", spec.experiment_id)
            res = EvalResult.failed(spec, f"{type(exc).__name__}: {exc}".replace("\t", " ").replace("\n", " "))
        results.append(res)
        if out_path is not None:
            append_result(out_path, res)
    return results


# -- plan generators --------------------------------------------------------------------


def plan_a(
    real_sources: Sequence[str], fake_sources: Sequence[str], detector: DetectorKind | str = DetectorKind.HOLISTIC_CNN, seed: int = 0
) -> list[ExperimentSpec]:
    """Controlled scenario: dev and eval share the (real, fake) source pair."""
    out = []
    for r in real_sources:
        for f in fake_sources:
            out.append(ExperimentSpec(f"A.{len(out) + 1}", r, f, r, f, DetectorKind(detector), seed=seed))
    return out


def plan_b(
    real_sources: Sequence[str], fake_sources: Sequence[str], detector: DetectorKind | str = DetectorKind.HOLISTIC_CNN, seed: int = 0
) -> list[ExperimentSpec]:
    """In-the-wild scenario: for each A row, every real source x every *other* fake source."""
    out = []
    for a in plan_a(real_sources, fake_sources, detector, seed):
        for r in real_sources:
            for f in fake_sources:
                if f != a.dev_fake:
                    out.append(replace(a, experiment_id=f"B.{len(out) + 1}", eval_real=r, eval_fake=f))
    return out


def plan_ted(
    real_sources: Sequence[str],
    fake_sources: Sequence[str],
    teds: Sequence[TransformSpec],
    detector: DetectorKind | str = DetectorKind.HOLISTIC_CNN,
    seed: int = 0,
) -> list[ExperimentSpec]:
    """Every A row under each evaluation transform (include IDENTITY for the baseline)."""
    return [replace(a, ted=t) for a in plan_a(real_sources, fake_sources, detector, seed) for t in teds]


# -- sweeps ------------------------------------------------------------------------------


@dataclass(frozen=True)
class LatentPoint:
    c: int
    eer_pct: float
    psnr_db: float


def _ganprintr_spec(base: ExperimentSpec, checkpoints: Mapping[int, str | Path], c: int) -> ExperimentSpec:
    if c not in checkpoints:
        raise FileNotFoundError(f"no GANprintR checkpoint configured for c={c}")
    path = Path(checkpoints[c])
    if not path.exists():
        raise FileNotFoundError(f"GANprintR checkpoint for c={c} not found: {path}; run `fakebench train-ae --bottleneck {c}`")
    return replace(base, ted=TransformSpec(TransformKind.GANPRINTR, checkpoint=str(path)))


def sweep_latent(
    runner: ExperimentRunner, base_spec: ExperimentSpec, checkpoints: Mapping[int, str | Path], c_values: Sequence[int] = LATENT_SWEEP
) -> list[LatentPoint]:
    """EER of the base detector on GANprintR fakes and mean PSNR, per bottleneck size."""
    specs = [_ganprintr_spec(base_spec, checkpoints, c) for c in c_values]  # fail fast on missing files
    out = []
    for c, spec in zip(c_values, specs):
        res = runner.run(spec)
        out.append(LatentPoint(c, res.eer_pct, res.psnr_db))
    return out


def count_inversions(values: Sequence[float]) -> int:
    """Adjacent decreases in a sequence expected to be non-decreasing."""
    return int(sum(b < a for a, b in zip(values, values[1:])))


@dataclass
class ResolutionGrid:
    ratios: tuple[float, ...]
    c_values: tuple[int, ...]
    eer_pct: np.ndarray  # (len(ratios), len(c_values))
    psnr_db: np.ndarray = field(default=None)  # type: ignore[assignment]

    def per_c_std(self) -> np.ndarray:
        return self.eer_pct.std(axis=0)

    def c_range(self) -> float:
        m = self.eer_pct.mean(axis=0)
        return float(m.max() - m.min())

    def is_stable(self) -> bool:
        """Spread across training resolutions stays below the spread across c."""
        return bool(self.per_c_std().max() < self.c_range())


def sweep_resolution_cross(
    runner: ExperimentRunner,
    base_spec: ExperimentSpec,
    ratios: Sequence[float],
    checkpoints: Mapping[int, str | Path],
    c_values: Sequence[int] = LATENT_SWEEP,
) -> ResolutionGrid:
    """Detectors trained on dev data downsized by each ratio, tested on GANprintR fakes per c."""
    specs = {c: _ganprintr_spec(base_spec, checkpoints, c) for c in c_values}
    eer = np.zeros((len(ratios), len(c_values)))
    ps = np.zeros_like(eer)
    for i, r in enumerate(ratios):
        dev_t = TransformSpec(TransformKind.DOWNSIZE, ratio=r)
        for j, c in enumerate(c_values):
            res = runner.run(replace(specs[c], dev_transform=dev_t))
            eer[i, j], ps[i, j] = res.eer_pct, res.psnr_db
    return ResolutionGrid(tuple(ratios), tuple(c_values), eer, ps)


def sweep_resolution_eval(
    runner: ExperimentRunner, base_spec: ExperimentSpec, ratios: Sequence[float] = RESOLUTION_RATIOS
) -> list[EvalResult]:
    """Detector trained at full resolution, evaluated on fakes downsized by each ratio."""
    return [runner.run(replace(base_spec, ted=TransformSpec(TransformKind.DOWNSIZE, ratio=r))) for r in ratios]


# -- plots -------------------------------------------------------------------------------


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def _ratio_label(r: float) -> str:
    return "raw" if r == 1.0 else f"1/{round(1 / r)}"


def plot_latent_sweep(points: Sequence[LatentPoint], path: str | Path) -> None:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 3.5))
    labels = [f"28x28x{p.c}" for p in points]
    ax.plot(labels, [p.eer_pct for p in points], "o-", color="tab:red")
    ax.set_ylabel("EER (%)", color="tab:red")
    ax2 = ax.twinx()
    ax2.plot(labels, [p.psnr_db for p in points], "s--", color="tab:blue")
    ax2.set_ylabel("PSNR (dB)", color="tab:blue")
    ax.set_xlabel("latent representation")
    fig.tight_layout()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_resolution_eval(ratios: Sequence[float], results: Sequence[EvalResult], path: str | Path) -> None:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot([_ratio_label(r) for r in ratios], [r.eer_pct for r in results], "o-")
    ax.set_xlabel("evaluation resolution")
    ax.set_ylabel("EER (%)")
    fig.tight_layout()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_resolution_grid(grid: ResolutionGrid, path: str | Path) -> None:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for i, r in enumerate(grid.ratios):
        ax.plot([f"x{c}" for c in grid.c_values], grid.eer_pct[i], "o-", label=f"trained at {_ratio_label(r)}")
    ax.set_xlabel("GANprintR latent channels")
    ax.set_ylabel("EER (%)")
    ax.legend(fontsize=8)
    fig.tight_layout()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
