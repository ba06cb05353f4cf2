import json

import numpy as np
import pytest
import yaml

from fakebench.cli import main
from fakebench.config import RunConfig
from fakebench.datamodel import DatasetManifest, Label, write_rgb
from fakebench.evaluation import read_results
from fakebench.ganprintr import GANprintRModel
from fakebench.landmarks import write_pts
from fakebench.proxy import render_subjects


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli_corpus")
    for i, (kind, fp_seed) in enumerate([("PERIODIC_HF", 0), ("NOISE_SIGNATURE", 0), ("PERIODIC_HF", 1)]):
        args = ["proxy-gen", "--kind", kind, "--n-real", "20", "--n-fake", "20", "--seed", str(i),
                "--fingerprint-seed", str(fp_seed), "--out", str(root / f"c{i}")]  # fmt: skip
        assert main(args) == 0
    return root


def _config(corpus, run_dir) -> str:
    cfg = RunConfig(
        run_dir=str(run_dir),
        sources={
            "R1": str(corpus / "c0" / "real.tsv"),
            "R2": str(corpus / "c1" / "real.tsv"),
            "F1": str(corpus / "c0" / "fake.tsv"),
            "F2": str(corpus / "c1" / "fake.tsv"),
            "F3": str(corpus / "c2" / "fake.tsv"),
        },
        real_sources=["R1", "R2"],
        fake_sources=["F1", "F2", "F3"],
        detector_kind="artifacts",
    )
    cfg.detector.k = 3
    path = run_dir.parent / f"{run_dir.name}.yaml"
    cfg.save(path)
    return str(path)


def test_proxy_gen_outputs(corpus):
    real = DatasetManifest.load(corpus / "c0" / "real.tsv")
    fake = DatasetManifest.load(corpus / "c0" / "fake.tsv")
    assert len(real) == 20 and len(fake) == 20 and fake.labels == {Label.FAKE}
    blob = json.loads((corpus / "c0" / "run_manifest_proxy-gen.json").read_text())
    assert blob["seeds"]["seed"] == 0 and blob["config"] is not None


def test_matrix_plan_a_writes_six_rows_deterministically(corpus, tmp_path):
    paths = []
    for name in ("run1", "run2"):
        cfg = _config(corpus, tmp_path / name)
        assert main(["matrix", "--plan", "A", "--config", cfg, "--deterministic"]) == 0
        paths.append(tmp_path / name / "results" / "matrix_A.tsv")
    rows = read_results(paths[0])
    assert len(rows) == 6 and [r.experiment_id for r in rows] == [f"A.{i}" for i in range(1, 7)]
    assert paths[0].read_text() == paths[1].read_text()
    assert (tmp_path / "run1" / "reports" / "run_manifest_matrix_A.json").exists()


def test_usage_errors_exit_2(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["matrix", "--plan", "Z"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main(["train-ae", "--bogus-flag"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == 2


def test_missing_checkpoint_exits_1_with_message(corpus, tmp_path, capsys):
    code = main(["apply-ae", "--ckpt", str(tmp_path / "nope.pt"), "--in", str(corpus / "c0" / "fake.tsv"),
                 "--out", str(tmp_path / "o")])  # fmt: skip
    assert code == 1
    assert "checkpoint not found" in capsys.readouterr().err


def test_missing_config_and_manifest_exit_1(tmp_path, capsys):
    assert main(["matrix", "--plan", "A", "--config", str(tmp_path / "none.yaml")]) == 1
    assert main(["train-detector", "--kind", "steg", "--real", str(tmp_path / "r.tsv"), "--fake",
                 str(tmp_path / "f.tsv"), "--out", str(tmp_path / "d.pt")]) == 1  # fmt: skip
    err = capsys.readouterr().err
    assert "config file not found" in err and "manifest not found" in err


def test_sweep_without_checkpoints_or_training_data_exits_1(corpus, tmp_path, capsys):
    cfg = _config(corpus, tmp_path / "sw")
    assert main(["sweep", "--config", cfg]) == 1
    assert "train_real" in capsys.readouterr().err


def test_train_apply_transform_detector_roundtrip(corpus, tmp_path):
    ck = tmp_path / "ae.pt"
    assert main(["train-ae", "--real", str(corpus / "c0" / "real.tsv"), "--bottleneck", "4", "--epochs", "1",
                 "--batch-size", "4", "--crop-size", "32", "--cosine-decay", "--out", str(ck)]) == 0  # fmt: skip
    assert ck.exists() and (tmp_path / "run_manifest_train-ae.json").exists()
    assert GANprintRModel.load(ck).train_config.cosine_decay

    out = tmp_path / "gan"
    assert main(["apply-ae", "--ckpt", str(ck), "--in", str(corpus / "c0" / "fake.tsv"), "--out", str(out)]) == 0
    m = DatasetManifest.load(out / "manifest.tsv")
    assert len(m) == 20 and m.images()[0].landmarks is not None

    jp = tmp_path / "jpeg"
    assert main(["transform", "--kind", "jpeg", "--quality", "60", "--in", str(corpus / "c0" / "fake.tsv"), "--out", str(jp)]) == 0
    assert len(DatasetManifest.load(jp / "manifest.tsv")) == 20

    det = tmp_path / "det.pt"
    code = main(["train-detector", "--kind", "artifacts", "--real", str(corpus / "c0" / "real.tsv"),
                 "--fake", str(corpus / "c0" / "fake.tsv"), "--out", str(det)])  # fmt: skip
    assert code in (0, 1) and det.exists()


def test_evaluate_spec_file(corpus, tmp_path):
    cfg = _config(corpus, tmp_path / "ev")
    spec = tmp_path / "spec.yaml"
    spec.write_text(yaml.safe_dump([
        {"experiment_id": "A.1", "dev_real": "R1", "dev_fake": "F1", "eval_real": "R1", "eval_fake": "F1", "detector": "artifacts"},
        {"experiment_id": "T.1", "dev_real": "R1", "dev_fake": "F1", "eval_real": "R1", "eval_fake": "F1",
         "detector": "artifacts", "ted": {"kind": "lowpass"}},
    ]))  # fmt: skip
    assert main(["evaluate", "--spec", str(spec), "--config", cfg]) == 0
    rows = read_results(tmp_path / "ev" / "results" / "evaluate.tsv")
    assert [r.ted for r in rows] == ["identity", "lowpass(9,1.7)"]
    assert rows[1].psnr_db > 25


def test_prepare_aligns_annotated_folder(tmp_path):
    faces = render_subjects(4, seed=9)
    for i, f in enumerate(faces):
        write_rgb(tmp_path / "raw" / f.subject_id / f"{i}.png", f.pixels)
        write_pts(tmp_path / "raw" / f.subject_id / f"{i}.pts", f.landmarks)
    write_rgb(tmp_path / "raw" / "x" / "blank.png", np.zeros((40, 40, 3), np.uint8))
    assert main(["prepare", "--in", str(tmp_path / "raw"), "--label", "real", "--source", "P", "--out", str(tmp_path / "al")]) == 0
    m = DatasetManifest.load(tmp_path / "al" / "manifest.tsv")
    assert len(m) == 4
    assert "excluded.no-face\t1" in (tmp_path / "al" / "exclusions.tsv").read_text()
