import itertools

import numpy as np
import pytest

from spinefrac.labels import (
    BACKGROUND,
    FRACTURE,
    NORMAL,
    AnnotationParseError,
    AnnotationSet,
    AnnotationValidationError,
    VertebraAnnotation,
    binary_class_of,
    build_label_volume,
    parse_annotations,
    write_annotations,
)
from spinefrac.volume_io import Volume


def brute_force_count(shape, spacing, center, radii):
    """Voxel-by-voxel scan of the ellipsoid inequality."""
    count = 0
    for idx in itertools.product(*(range(n) for n in shape)):
        d = sum(((i * s - c) / r) ** 2 for i, s, c, r in zip(idx, spacing, center, radii))
        count += d <= 1.0
    return count


@pytest.fixture
def ref():
    return Volume(np.zeros((32, 32, 32), np.float32))


def single(grade, center=(15.0, 16.0, 15.5)):
    return AnnotationSet("c", [VertebraAnnotation("L3", grade, center)])


class TestBinaryClass:
    @pytest.mark.parametrize(
        "grade,expected",
        [("normal", "normal"), ("mild", "fracture"), ("moderate", "fracture"), ("severe", "fracture")],
    )
    def test_collapse(self, grade, expected):
        assert binary_class_of(grade) == expected

    def test_unknown(self):
        with pytest.raises(AnnotationParseError):
            binary_class_of("crushed")


class TestParse:
    def test_line_mapping(self, tmp_path):
        p = tmp_path / "a.csv"
        p.write_text("# comment\nname,grade,x_mm,y_mm,z_mm\nL3,moderate,120.5,88.0,212.0\n")
        ann = parse_annotations(p)
        assert ann.annotations == [VertebraAnnotation("L3", "moderate", (120.5, 88.0, 212.0))]

    def test_headerless(self, tmp_path):
        p = tmp_path / "a.csv"
        p.write_text("L1,normal,1,2,3  # trailing comment\n\nL2,mild,4,5,6\n")
        assert [a.name for a in parse_annotations(p)] == ["L1", "L2"]

    def test_duplicate_name(self, tmp_path):
        p = tmp_path / "a.csv"
        p.write_text("L3,normal,1,2,3\nL3,mild,1,2,3\n")
        with pytest.raises(AnnotationValidationError):
            parse_annotations(p)

    def test_bad_grade_names_line(self, tmp_path):
        p = tmp_path / "a.csv"
        p.write_text("L2,normal,1,2,3\nL3,crushed,1,2,3\n")
        with pytest.raises(AnnotationParseError, match=":2:"):
            parse_annotations(p)

    def test_malformed_line(self, tmp_path):
        p = tmp_path / "a.csv"
        p.write_text("L3,normal,1,2\n")
        with pytest.raises(AnnotationParseError, match=":1:"):
            parse_annotations(p)

    def test_write_round_trip(self, tmp_path):
        ann = AnnotationSet(
            "x", [VertebraAnnotation("L2", "normal", (0.1, 0.2, 0.3)), VertebraAnnotation("T12", "severe", (1 / 3, 2, 3))]
        )
        write_annotations(ann, tmp_path / "a.csv")
        back = parse_annotations(tmp_path / "a.csv", case_id="x")
        assert back.annotations == ann.annotations

    def test_ordered_top_to_bottom(self):
        ann = AnnotationSet("x", [VertebraAnnotation("L1", "normal", (0, 0, 0)), VertebraAnnotation("T11", "normal", (0, 0, 30))])
        assert [a.name for a in ann] == ["T11", "L1"]


class TestBuildLabelVolume:
    def test_empty(self, ref):
        lab = build_label_volume(AnnotationSet("c", []), ref)
        assert lab.shape == ref.shape and not lab.data.any()

    def test_normal_count_matches_scan(self, ref):
        center = (15.0, 16.0, 15.5)
        lab = build_label_volume(single("normal", center), ref, radii=(12, 12, 12))
        expected = brute_force_count(ref.shape, ref.spacing, center, (12, 12, 12))
        assert (lab.data == NORMAL).sum() == expected
        assert set(np.unique(lab.data)) == {BACKGROUND, NORMAL}

    def test_fracture_flattened(self, ref):
        center = (15.0, 16.0, 15.5)
        normal = build_label_volume(single("normal", center), ref, (12, 12, 12), 0.5).data > 0
        frac = build_label_volume(single("moderate", center), ref, (12, 12, 12), 0.5).data
        fmask = frac == FRACTURE
        assert fmask.sum() == brute_force_count(ref.shape, ref.spacing, center, (12, 12, 6))
        assert fmask.sum() < normal.sum()
        assert not (fmask & ~normal).any()
        z = np.arange(ref.shape[2])
        assert np.all(np.abs(z[np.nonzero(fmask)[2]] - center[2]) <= 6)

    def test_anisotropic_spacing(self):
        ref = Volume(np.zeros((20, 20, 12)), (1.0, 1.0, 2.0))
        center = (10.0, 9.5, 11.0)
        lab = build_label_volume(single("normal", center), ref, (7, 5, 8))
        assert (lab.data > 0).sum() == brute_force_count(ref.shape, ref.spacing, center, (7, 5, 8))

    def test_centroid_voxel_labeled(self, ref):
        ann = AnnotationSet(
            "c", [VertebraAnnotation("L1", "normal", (15, 15, 28)), VertebraAnnotation("L2", "severe", (15, 15, 3))]
        )
        lab = build_label_volume(ann, ref).data
        assert lab[15, 15, 28] == NORMAL and lab[15, 15, 3] == FRACTURE

    def test_out_of_bounds_skipped_with_warning(self, ref):
        ann = AnnotationSet(
            "c", [VertebraAnnotation("L1", "mild", (15, 15, 60)), VertebraAnnotation("L2", "normal", (15, 15, 10))]
        )
        with pytest.warns(UserWarning, match="L1"):
            lab = build_label_volume(ann, ref).data
        assert not (lab == FRACTURE).any() and (lab == NORMAL).any()

    def test_overlap_nearest_centroid_wins(self, ref):
        ann = AnnotationSet(
            "c", [VertebraAnnotation("L1", "normal", (15, 15, 20)), VertebraAnnotation("L2", "mild", (15, 15, 10))]
        )
        lab = build_label_volume(ann, ref, radii=(8, 8, 8), flatten=0.9).data
        # z=16 is 4 mm from L1 (d^2 = 0.25) and 6 mm from L2 (d^2 = (6/7.2)^2)
        assert lab[15, 15, 16] == NORMAL
        # z=14 is 6 mm from L1 (0.5625) and 4 mm from L2 ((4/7.2)^2 = 0.309)
        assert lab[15, 15, 14] == FRACTURE

    def test_no_fracture_class_without_fracture_annotations(self, ref):
        lab = build_label_volume(single("normal"), ref).data
        assert FRACTURE not in lab

    def test_deterministic(self, ref):
        a = build_label_volume(single("severe"), ref).data
        b = build_label_volume(single("severe"), ref).data
        assert a.tobytes() == b.tobytes()

    @pytest.mark.parametrize("flatten", [0.0, 1.0, 1.5])
    def test_bad_flatten(self, ref, flatten):
        with pytest.raises(ValueError):
            build_label_volume(single("normal"), ref, flatten=flatten)
