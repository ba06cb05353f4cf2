"""``fakebench`` command line: one subcommand per pipeline stage.

Exit codes: 0 success, 1 operational failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import yaml

from fakebench.config import RunConfig, write_run_manifest
from fakebench.datamodel import DatasetManifest, FaceImage, Label, load_manifest, write_rgb
from fakebench.utils import sha256_file, worker_count

logger = logging.getLogger("fakebench")

PLANS = ("A", "B", "ted", "latent", "resolution")


class OperationalError(RuntimeError):
    pass


# -- helpers --------------------------------------------------------------------------


def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "deterministic", None) is not None:
        cfg.deterministic = args.deterministic
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "run_dir", None):
        cfg.run_dir = args.run_dir
    return cfg


def _manifest(path: str) -> DatasetManifest:
    if not Path(path).exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    return DatasetManifest.load(path)


def _hashes(**paths: str | None) -> dict[str, str]:
    return {k: sha256_file(v) for k, v in paths.items() if v and Path(v).is_file()}


def _holdout(manifest: DatasetManifest, fraction: float, seed: int) -> tuple[DatasetManifest, DatasetManifest]:
    """Random (keep, held-out) partition with floor(fraction * n) held out (at least 1)."""
    n = len(manifest)
    if n < 2:
        raise ValueError(f"need at least 2 images to carve a validation set, got {n}")
    k = max(1, int(np.floor(fraction * n + 1e-9)))
    idx = np.random.default_rng(seed).permutation(n)
    held = set(idx[:k].tolist())
    keep = [e for i, e in enumerate(manifest.entries) if i not in held]
    out = [e for i, e in enumerate(manifest.entries) if i in held]
    return manifest.subset(keep), manifest.subset(out)


def _write_images(out_root: Path, images: list[FaceImage], manifest: DatasetManifest) -> DatasetManifest:
    """Mirror ``manifest``'s relative layout under ``out_root`` (PNG, landmarks carried along)."""
    from fakebench.landmarks import write_pts

    entries = []
    for entry, im in zip(manifest.entries, images):
        rel = str(Path(entry.path).with_suffix(".png"))
        write_rgb(out_root / rel, im.pixels)
        if im.landmarks is not None:
            write_pts((out_root / rel).with_suffix(".pts"), im.landmarks)
        entries.append(replace(entry, path=rel))
    out = DatasetManifest(str(out_root), tuple(entries))
    out.save(out_root / "manifest.tsv")
    return out


# -- commands -----------------------------------------------------------------------------


def cmd_prepare(args) -> int:
    from fakebench.landmarks import AnnotationBackend, DlibBackend
    from fakebench.preprocess import preprocess_corpus

    cfg = _config(args)
    raw = load_manifest(args.input, Label(args.label.upper()), args.source)
    backend = DlibBackend(args.predictor) if args.backend == "dlib" else AnnotationBackend()
    out = Path(args.out)
    threshold = args.frontal_threshold if args.frontal_threshold is not None else cfg.preprocess.frontal_threshold
    manifest, report = preprocess_corpus(
        raw, out, backend, cfg.preprocess.target(), threshold, worker_count(cfg.workers)
    )
    manifest.save(out / "manifest.tsv")
    (out / "exclusions.tsv").write_text(report.to_text(), encoding="utf-8")
    write_run_manifest(out, "prepare", cfg, args.argv, seeds={"seed": cfg.seed})
    print(f"prepared {len(manifest)} image(s) -> {out / 'manifest.tsv'}; excluded {len(report.excluded)}")
    return 0


def cmd_train_ae(args) -> int:
    from fakebench.ganprintr import AutoencoderSpec, build_autoencoder, train_autoencoder

    cfg = _config(args)
    ae = cfg.autoencoder
    ae = replace(
        ae,
        bottleneck=args.bottleneck if args.bottleneck is not None else ae.bottleneck,
        epochs=args.epochs if args.epochs is not None else ae.epochs,
        learning_rate=args.lr if args.lr is not None else ae.learning_rate,
        batch_size=args.batch_size if args.batch_size is not None else ae.batch_size,
        crop_size=args.crop_size if args.crop_size is not None else ae.crop_size,
        cosine_decay=args.cosine_decay if args.cosine_decay is not None else ae.cosine_decay,
    )
    real = _manifest(args.real)
    val = _manifest(args.val) if args.val else None
    if val is None:
        real, val = _holdout(real, 0.1, cfg.seed)
    model = build_autoencoder(AutoencoderSpec(bottleneck_channels=ae.bottleneck), cfg.seed)
    train_autoencoder(model, real, val, ae.train_config(cfg.seed, cfg.deterministic), checkpoint=args.out)
    write_run_manifest(Path(args.out).parent, "train-ae", cfg, args.argv, _hashes(real=args.real, val=args.val),
                       {"seed": cfg.seed})  # fmt: skip
    h = model.history[-1]
    print(f"trained c={ae.bottleneck} for {h['epoch']} epochs: val loss {model.initial_val_loss:.6f} -> {h['val_loss']:.6f}")
    return 0


def cmd_apply_ae(args) -> int:
    from fakebench.ganprintr import GANprintRModel, apply_ganprintr_batch

    cfg = _config(args)
    model = GANprintRModel.load(args.ckpt)
    manifest = _manifest(args.input)
    out = _write_images(Path(args.out), apply_ganprintr_batch(model, manifest.images()), manifest)
    write_run_manifest(args.out, "apply-ae", cfg, args.argv, _hashes(ckpt=args.ckpt, input=args.input))
    print(f"wrote {len(out)} reconstructed image(s) -> {Path(args.out) / 'manifest.tsv'}")
    return 0


def cmd_train_detector(args) -> int:
    from fakebench.detectors.core import train_detector

    cfg = _config(args)
    real, fake = _manifest(args.real), _manifest(args.fake)
    split = cfg.split.train_fraction_within_dev
    if args.val_real and args.val_fake:
        rv, fv = _manifest(args.val_real), _manifest(args.val_fake)
    else:
        real, rv = _holdout(real, 1.0 - split, cfg.seed)
        fake, fv = _holdout(fake, 1.0 - split, cfg.seed + 1)
    dcfg = cfg.detector.config(cfg.seed, cfg.deterministic)
    det = train_detector(args.kind, real, fake, rv, fv, dcfg)
    det.save(args.out)
    write_run_manifest(Path(args.out).parent, "train-detector", cfg, args.argv, _hashes(real=args.real, fake=args.fake),
                       {"seed": cfg.seed})  # fmt: skip
    if det.failed:
        raise OperationalError("detector failed the orientation check (mean fake score <= mean real score on validation)")
    print(f"trained {args.kind} detector: validation accuracy {100 * det.val_accuracy:.2f}% -> {args.out}")
    return 0


def cmd_transform(args) -> int:
    from fakebench.transforms import TransformSpec, apply_transform

    cfg = _config(args)
    t = cfg.transforms
    spec = TransformSpec(
        args.kind,
        ratio=args.ratio if args.ratio is not None else t.downsize_ratio,
        kernel=args.kernel if args.kernel is not None else t.lowpass_kernel,
        sigma=args.sigma if args.sigma is not None else t.lowpass_sigma,
        quality=args.quality if args.quality is not None else t.jpeg_quality,
        checkpoint=args.ckpt,
    )
    manifest = _manifest(args.input)
    out = _write_images(Path(args.out), apply_transform(spec, manifest.images()), manifest)
    write_run_manifest(args.out, "transform", cfg, args.argv, _hashes(input=args.input, ckpt=args.ckpt))
    print(f"applied {spec.tag} to {len(out)} image(s) -> {Path(args.out) / 'manifest.tsv'}")
    return 0


def _runner(cfg: RunConfig):
    from fakebench.evaluation import ExperimentRunner

    sources = {tag: _manifest(path) for tag, path in cfg.sources.items()}
    cfg.make_dirs()
    return ExperimentRunner(
        sources, cfg.split.spec(cfg.seed), cfg.detector.config(cfg.seed, cfg.deterministic), cfg.path("checkpoints")
    )


def _fresh(path: Path, append: bool) -> Path:
    if path.exists() and not append:
        path.unlink()
    return path


def cmd_evaluate(args) -> int:
    from fakebench.evaluation import ExperimentSpec, run_matrix

    cfg = _config(args)
    if not Path(args.spec).exists():
        raise FileNotFoundError(f"spec file not found: {args.spec}")
    raw = yaml.safe_load(Path(args.spec).read_text(encoding="utf-8"))
    specs = [ExperimentSpec.from_dict(d) for d in (raw if isinstance(raw, list) else [raw])]
    runner = _runner(cfg)
    runner.check_sources(specs)
    out = _fresh(Path(args.out) if args.out else cfg.path("results", "evaluate.tsv"), args.append)
    results = run_matrix(runner, specs, out)
    write_run_manifest(cfg.path("reports"), "evaluate", cfg, args.argv, _hashes(spec=args.spec), {"seed": cfg.seed})
    _print_results(results)
    return 1 if any(r.error for r in results) else 0


def _print_results(results) -> None:
    for r in results:
        if r.error:
            print(f"{r.experiment_id}\t{r.ted}\tERROR {r.error}")
        else:
            print(f"{r.experiment_id}\t{r.ted}\tEER {r.eer_pct:.2f}%\tR_real {r.recall_real_pct:.2f}%\tR_fake {r.recall_fake_pct:.2f}%")


def _matrix_specs(cfg: RunConfig, plan: str):
    from fakebench.evaluation import plan_a, plan_b, plan_ted

    if not cfg.real_sources or not cfg.fake_sources:
        raise ValueError("config must list real_sources and fake_sources for the A/B/ted plans")
    if plan == "A":
        return plan_a(cfg.real_sources, cfg.fake_sources, cfg.detector_kind, cfg.seed)
    if plan == "B":
        return plan_b(cfg.real_sources, cfg.fake_sources, cfg.detector_kind, cfg.seed)
    teds = [cfg.transforms.spec(k) for k in ("identity", "downsize", "lowpass", "jpeg")]
    ckpt = cfg.ae_checkpoint(cfg.autoencoder.bottleneck)
    if ckpt.exists():
        teds.append(cfg.transforms.spec("ganprintr", str(ckpt)))
    else:
        logger.warning("no GANprintR checkpoint at %s; the ted plan omits the GANprintR rows", ckpt)
    return plan_ted(cfg.real_sources, cfg.fake_sources, teds, cfg.detector_kind, cfg.seed)


def _base_spec(cfg: RunConfig):
    from fakebench.evaluation import ExperimentSpec

    if not cfg.real_sources or not cfg.fake_sources:
        raise ValueError("config must list real_sources and fake_sources")
    r, f = cfg.real_sources[0], cfg.fake_sources[0]
    return ExperimentSpec("S.1", r, f, r, f, cfg.detector_kind, seed=cfg.seed)


def _checkpoints(cfg: RunConfig) -> dict[int, str]:
    return {c: str(cfg.ae_checkpoint(c)) for c in cfg.latent_sweep}


def _run_latent(cfg: RunConfig, runner, out: Path):
    from fakebench.evaluation import plot_latent_sweep, sweep_latent

    points = sweep_latent(runner, _base_spec(cfg), _checkpoints(cfg), cfg.latent_sweep)
    with open(out, "w", encoding="utf-8") as fh:
        fh.write("c\teer_pct\tpsnr_db\n")
        for p in points:
            fh.write(f"{p.c}\t{p.eer_pct!r}\t{p.psnr_db!r}\n")
    plot_latent_sweep(points, cfg.path("plots", "latent_sweep.png"))
    for p in points:
        print(f"c={p.c}\tEER {p.eer_pct:.2f}%\tPSNR {p.psnr_db:.2f} dB")


def _run_resolution(cfg: RunConfig, runner, out: Path):
    from fakebench.evaluation import plot_resolution_grid, sweep_resolution_cross

    grid = sweep_resolution_cross(runner, _base_spec(cfg), cfg.resolution_ratios, _checkpoints(cfg), cfg.latent_sweep)
    with open(out, "w", encoding="utf-8") as fh:
        fh.write("train_ratio\t" + "\t".join(f"eer_c{c}" for c in grid.c_values) + "\n")
        for r, row in zip(grid.ratios, grid.eer_pct):
            fh.write(f"{r!r}\t" + "\t".join(repr(float(v)) for v in row) + "\n")
    plot_resolution_grid(grid, cfg.path("plots", "resolution_grid.png"))
    print(f"per-c EER std across ratios (max) {grid.per_c_std().max():.2f}; EER range across c {grid.c_range():.2f}")


def cmd_matrix(args) -> int:
    from fakebench.evaluation import run_matrix

    cfg = _config(args)
    runner = _runner(cfg)
    out = _fresh(cfg.path("results", f"matrix_{args.plan}.tsv"), args.append)
    if args.plan in ("latent", "resolution"):
        (_run_latent if args.plan == "latent" else _run_resolution)(cfg, runner, out)
        write_run_manifest(cfg.path("reports"), f"matrix_{args.plan}", cfg, args.argv, seeds={"seed": cfg.seed})
        return 0
    specs = _matrix_specs(cfg, args.plan)
    runner.check_sources(specs)
    results = run_matrix(runner, specs, out)
    write_run_manifest(cfg.path("reports"), f"matrix_{args.plan}", cfg, args.argv, seeds={"seed": cfg.seed})
    _print_results(results)
    print(f"{len(results)} row(s) -> {out}")
    return 1 if any(r.error for r in results) else 0


def cmd_sweep(args) -> int:
    """Train any missing GANprintR checkpoints of the latent sweep, then run the sweep."""
    from fakebench.ganprintr import AutoencoderSpec, build_autoencoder, train_autoencoder

    cfg = _config(args)
    missing = [c for c in cfg.latent_sweep if not cfg.ae_checkpoint(c).exists()]
    if missing:
        if not cfg.autoencoder.train_real:
            raise ValueError(f"missing GANprintR checkpoints for c={missing} and no autoencoder.train_real manifest configured")
        real, val = _holdout(_manifest(cfg.autoencoder.train_real), 0.1, cfg.seed)
        cfg.make_dirs()
        for c in missing:
            model = build_autoencoder(AutoencoderSpec(bottleneck_channels=c), cfg.seed)
            train_autoencoder(model, real, val, cfg.autoencoder.train_config(cfg.seed, cfg.deterministic), cfg.ae_checkpoint(c))
            print(f"trained GANprintR c={c}")
    args.plan = args.what
    return cmd_matrix(args)


def cmd_proxy_gen(args) -> int:
    from fakebench.proxy import generate_proxy_corpus

    cfg = _config(args)
    p = cfg.proxy
    p = replace(
        p,
        n_real=args.n_real if args.n_real is not None else p.n_real,
        n_fake=args.n_fake if args.n_fake is not None else p.n_fake,
        amplitude=args.amplitude if args.amplitude is not None else p.amplitude,
    )
    spec = p.spec(args.kind, cfg.seed, args.fingerprint_seed)
    out = Path(args.out)
    real, fake = generate_proxy_corpus(spec, out)
    real.save(out / "real.tsv")
    fake.save(out / "fake.tsv")
    write_run_manifest(out, "proxy-gen", cfg, args.argv, seeds={"seed": cfg.seed, "fingerprint_seed": args.fingerprint_seed})
    print(f"wrote {len(real)} real + {len(fake)} fake image(s) -> {out}")
    return 0


# -- parser ------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=None,
                        help="force deterministic torch kernels (default from config)")  # fmt: skip
    common.add_argument("--run-dir", help="override the configured run directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="fakebench", description="Fake-face detection benchmark and GAN-fingerprint removal.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("prepare", parents=[common], help="detect, filter and align a raw image folder")
    s.add_argument("--in", dest="input", required=True, help="raw image directory")
    s.add_argument("--label", required=True, choices=["real", "fake", "REAL", "FAKE"])
    s.add_argument("--source", required=True, help="source tag, e.g. VF2")
    s.add_argument("--out", required=True)
    s.add_argument("--backend", choices=["annotation", "dlib"], default="annotation")
    s.add_argument("--predictor", help="dlib 68-point shape predictor file")
    s.add_argument("--frontal-threshold", type=float)
    s.set_defaults(func=cmd_prepare)

    s = sub.add_parser("train-ae", parents=[common], help="train the GANprintR autoencoder on real faces")
    s.add_argument("--real", required=True, help="manifest of real training faces")
    s.add_argument("--val", help="manifest of real validation faces (default: 10%% held out)")
    s.add_argument("--bottleneck", type=int)
    s.add_argument("--epochs", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--crop-size", type=int)
    s.add_argument("--cosine-decay", action=argparse.BooleanOptionalAction, default=None, help="cosine-anneal the learning rate")
    s.add_argument("--out", required=True, help="checkpoint file")
    s.set_defaults(func=cmd_train_ae)

    s = sub.add_parser("apply-ae", parents=[common], help="pass a manifest through a trained GANprintR")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_apply_ae)

    s = sub.add_parser("train-detector", parents=[common], help="train one fake detector")
    s.add_argument("--kind", required=True, choices=["holistic", "steg", "artifacts"])
    s.add_argument("--real", required=True)
    s.add_argument("--fake", required=True)
    s.add_argument("--val-real")
    s.add_argument("--val-fake")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train_detector)

    s = sub.add_parser("transform", parents=[common], help="apply an evaluation-time transform to a manifest")
    s.add_argument("--kind", required=True, choices=["identity", "downsize", "lowpass", "jpeg", "ganprintr"])
    s.add_argument("--ratio", type=float)
    s.add_argument("--kernel", type=int)
    s.add_argument("--sigma", type=float)
    s.add_argument("--quality", type=int)
    s.add_argument("--ckpt", help="GANprintR checkpoint (kind ganprintr)")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_transform)

    s = sub.add_parser("evaluate", parents=[common], help="run experiment spec(s) from a YAML file")
    s.add_argument("--spec", required=True)
    s.add_argument("--out", help="results table (default <run_dir>/results/evaluate.tsv)")
    s.add_argument("--append", action="store_true", help="append to an existing results table")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("matrix", parents=[common], help="run a result-table plan")
    s.add_argument("--plan", required=True, choices=PLANS)
    s.add_argument("--append", action="store_true")
    s.set_defaults(func=cmd_matrix)

    s = sub.add_parser("sweep", parents=[common], help="latent or resolution sweep, training missing autoencoders")
    s.add_argument("--what", choices=["latent", "resolution"], default="latent")
    s.add_argument("--append", action="store_true")
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("proxy-gen", parents=[common], help="render a desk-scale proxy corpus")
    s.add_argument("--kind", default="PERIODIC_HF", choices=["PERIODIC_HF", "NOISE_SIGNATURE"])
    s.add_argument("--n-real", type=int)
    s.add_argument("--n-fake", type=int)
    s.add_argument("--amplitude", type=float)
    s.add_argument("--fingerprint-seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_proxy_gen)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with status 2 on usage errors
    args.argv = list(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (OSError, ValueError, KeyError, RuntimeError, ImportError) as exc:
        print(f"fakebench {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
