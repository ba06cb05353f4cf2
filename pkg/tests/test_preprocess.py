import cv2
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fakebench.datamodel import DatasetManifest, FaceImage, Label, ManifestEntry, write_rgb
from fakebench.landmarks import (
    AnnotationBackend,
    LandmarkSet,
    canonical_shape,
    detect_landmarks,
    place_shape,
    read_pts,
    write_pts,
)
from fakebench.preprocess import (
    AlignmentTarget,
    align_face,
    estimate_frontal,
    preprocess_corpus,
    similarity_matrix,
    yaw_proxy,
)
from fakebench.proxy import render_subjects

TARGET = AlignmentTarget()


@pytest.fixture(scope="module")
def face():
    return render_subjects(1, seed=21)[0]


def _rotated(face: FaceImage, degrees: float, scale: float = 1.0, shift=(0.0, 0.0)) -> FaceImage:
    m = cv2.getRotationMatrix2D((112.0, 112.0), degrees, scale)
    m[:, 2] += shift
    px = cv2.warpAffine(face.pixels, m, (300, 300), flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_REPLICATE)
    lm = LandmarkSet(face.landmarks).transformed(m)
    return FaceImage(px, face.label, landmarks=lm.points)


def test_alignment_target_invariants():
    assert TARGET.left_eye_anchor[1] == TARGET.right_eye_anchor[1]
    assert TARGET.left_eye_anchor[0] + TARGET.right_eye_anchor[0] == pytest.approx(224)
    with pytest.raises(ValueError):
        AlignmentTarget(224, (50.0, 80.0), (170.0, 81.0))
    with pytest.raises(ValueError):
        AlignmentTarget(224, (50.0, 80.0), (180.0, 80.0))


def test_pts_roundtrip(tmp_path, face):
    write_pts(tmp_path / "a.pts", face.landmarks)
    np.testing.assert_allclose(read_pts(tmp_path / "a.pts"), face.landmarks, atol=5e-4)
    (tmp_path / "b.pts").write_text("garbage")
    with pytest.raises(ValueError):
        read_pts(tmp_path / "b.pts")


def test_detect_landmarks_reads_annotation(tmp_path, face):
    write_rgb(tmp_path / "f.png", face.pixels)
    write_pts(tmp_path / "f.pts", face.landmarks)
    img = FaceImage(face.pixels, Label.REAL, path=str(tmp_path / "f.png"))
    lm = detect_landmarks(img)
    assert np.abs(lm.points - face.landmarks).max() <= 5.0


def test_detect_landmarks_blank_image_gives_none():
    assert detect_landmarks(FaceImage(np.full((64, 64, 3), 128, np.uint8), Label.REAL)) is None


def test_detect_landmarks_keeps_largest_face(tmp_path):
    small = place_shape(canonical_shape(), np.array([20.0, 30.0]), np.array([40.0, 30.0]))
    large = place_shape(canonical_shape(), np.array([100.0, 60.0]), np.array([160.0, 60.0]))
    write_rgb(tmp_path / "two.png", np.zeros((224, 224, 3), np.uint8))
    write_pts(tmp_path / "two_1.pts", small.points)
    write_pts(tmp_path / "two_2.pts", large.points)
    img = FaceImage(np.zeros((224, 224, 3), np.uint8), Label.REAL, path=str(tmp_path / "two.png"))
    assert len(AnnotationBackend().detect_all(img)) == 2
    chosen = detect_landmarks(img)
    assert chosen.bbox_area() == pytest.approx(max(small.bbox_area(), large.bbox_area()), rel=1e-3)


def test_frontal_symmetric_and_displaced_nose():
    lm = place_shape(canonical_shape(), np.array([80.0, 90.0]), np.array([144.0, 90.0]))
    assert yaw_proxy(lm) == pytest.approx(0.0, abs=1e-12)
    assert estimate_frontal(lm)
    pts = lm.points.copy()
    pts[30] += 0.4 * (lm.left_eye_center - lm.right_eye_center)  # toward the left eye
    turned = LandmarkSet(pts)
    assert yaw_proxy(turned) > 0.15
    assert not estimate_frontal(turned)


def test_rendered_fixture_is_frontal(face):
    assert estimate_frontal(LandmarkSet(face.landmarks))


@settings(max_examples=25, deadline=None)
@given(st.floats(-30, 30), st.floats(0.7, 1.3), st.floats(-20, 20), st.floats(-20, 20))
def test_alignment_puts_eyes_on_anchors(face, degrees, scale, dx, dy):
    moved = _rotated(face, degrees, scale, (dx, dy))
    out = align_face(moved, LandmarkSet(moved.landmarks), TARGET)
    assert out.pixels.shape == (224, 224, 3) and out.pixels.dtype == np.uint8
    lm = LandmarkSet(out.landmarks)
    assert np.linalg.norm(lm.left_eye_center - TARGET.left_eye_anchor) < 0.5
    assert np.linalg.norm(lm.right_eye_center - TARGET.right_eye_anchor) < 0.5


def test_similarity_matrix_is_rotation_plus_scale(face):
    m = similarity_matrix(LandmarkSet(_rotated(face, 17, 1.2).landmarks), TARGET)
    a = m[:, :2]
    assert a[0, 0] == pytest.approx(a[1, 1]) and a[0, 1] == pytest.approx(-a[1, 0])


def test_align_rejects_coincident_eyes():
    pts = np.zeros((68, 2)) + 50.0
    with pytest.raises(ValueError, match="degenerate"):
        align_face(FaceImage(np.zeros((99, 99, 3), np.uint8), Label.REAL), LandmarkSet(pts), TARGET)


def test_align_already_aligned_is_near_identity(face):
    ideal = place_shape(canonical_shape(), np.array(TARGET.left_eye_anchor), np.array(TARGET.right_eye_anchor))
    img = FaceImage(face.pixels, Label.REAL, landmarks=ideal.points)
    out = align_face(img, ideal, TARGET)
    assert np.abs(out.pixels.astype(int) - face.pixels.astype(int)).max() <= 1


def test_realigning_aligned_output_changes_little(face):
    moved = _rotated(face, 10)
    once = align_face(moved, LandmarkSet(moved.landmarks), TARGET)
    twice = align_face(once, LandmarkSet(once.landmarks), TARGET)
    assert np.abs(once.pixels.astype(float) - twice.pixels.astype(float)).mean() <= 2.0


def _corpus(tmp_path, faces, profile_index=None):
    rels = []
    for i, f in enumerate(faces):
        rel = f"s{i % 2}/img{i}.png"
        write_rgb(tmp_path / "in" / rel, f.pixels)
        pts = f.landmarks.copy()
        if i == profile_index:
            lm = LandmarkSet(pts)
            pts[30] += 0.4 * (lm.right_eye_center - lm.left_eye_center)
        write_pts((tmp_path / "in" / rel).with_suffix(".pts"), pts)
        rels.append(ManifestEntry(rel, Label.REAL, f"s{i % 2}", "PROXY"))
    return DatasetManifest(str(tmp_path / "in"), tuple(rels))


def test_preprocess_corpus_aligned_fixtures_no_exclusions(tmp_path):
    faces = render_subjects(4, seed=3)
    out, report = preprocess_corpus(_corpus(tmp_path, faces), tmp_path / "out", workers=2)
    assert report.kept == 4 and sum(report.excluded.values()) == 0
    imgs = out.images()
    assert all(im.pixels.shape == (224, 224, 3) for im in imgs)
    assert all(im.landmarks is not None for im in imgs)


def test_preprocess_corpus_excludes_profile_and_missing(tmp_path):
    faces = render_subjects(4, seed=3)
    m = _corpus(tmp_path, faces, profile_index=2)
    write_rgb(tmp_path / "in" / "s0" / "noface.png", np.zeros((50, 50, 3), np.uint8))
    m = DatasetManifest(m.root, m.entries + (ManifestEntry("s0/noface.png", Label.REAL, "s0", "PROXY"),))
    out, report = preprocess_corpus(m, tmp_path / "out")
    assert report.excluded == {"non-frontal": 1, "no-face": 1}
    assert report.excluded_paths["non-frontal"] == ["s0/img2.png"]
    assert len(out) == 3 and report.total == 5
    text = report.to_text()
    assert "excluded.non-frontal\t1" in text and "kept\t3" in text
