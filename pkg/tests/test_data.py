import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from yolors import data
from yolors.data import LabelFormatError, LabelRecord, SyntheticSpec


# -- labels ------------------------------------------------------------------

def test_parse_single_record():
    recs = data.parse_yolo_labels("0 0.5 0.5 0.2 0.2\n")
    assert recs == [LabelRecord(0, 0.5, 0.5, 0.2, 0.2)]


def test_empty_file(tmp_path):
    p = tmp_path / "a.txt"
    p.write_text("")
    assert data.load_yolo_labels(p) == []


def test_width_out_of_range_names_field():
    with pytest.raises(LabelFormatError, match="width"):
        data.parse_yolo_labels("1 0.5 0.5 1.5 0.2")


@pytest.mark.parametrize(
    "line,pattern",
    [
        ("0 0.5 0.5 0.2", "line|:1"),
        ("0 abc 0.5 0.2 0.2", "non-numeric"),
        ("0.5 0.5 0.5 0.2 0.2", "integer"),
        ("0 1.2 0.5 0.2 0.2", "cx"),
        ("0 0.5 -0.1 0.2 0.2", "cy"),
        ("0 0.5 0.5 0.2 1.1", "height"),
        ("0 0.95 0.5 0.2 0.2", "outside"),
    ],
)
def test_malformed_lines(line, pattern):
    with pytest.raises(LabelFormatError, match=pattern):
        data.parse_yolo_labels(line)


def test_error_carries_line_number():
    with pytest.raises(LabelFormatError, match=":3:"):
        data.parse_yolo_labels("0 0.5 0.5 0.1 0.1\n\n1 0.5 0.5\n")


label_strategy = st.builds(
    lambda c, x1, y1, w, h: LabelRecord.from_xyxy(c, x1, y1, min(1.0, x1 + w), min(1.0, y1 + h)),
    st.integers(0, 9),
    st.floats(0, 0.9),
    st.floats(0, 0.9),
    st.floats(0.01, 0.5),
    st.floats(0.01, 0.5),
)


@settings(max_examples=100, deadline=None)
@given(st.lists(label_strategy, max_size=8))
def test_label_round_trip(recs):
    # the writer emits 6-decimal fixed format, so canonicalize once first
    canon = data.parse_yolo_labels(data.format_yolo_labels(recs))
    assert data.parse_yolo_labels(data.format_yolo_labels(canon)) == canon


def test_label_file_round_trip(tmp_path):
    recs = [LabelRecord(0, 0.25, 0.5, 0.1, 0.2), LabelRecord(3, 0.123456, 0.654321, 0.05, 0.5)]
    p = tmp_path / "x.txt"
    data.write_yolo_labels(p, recs)
    assert data.load_yolo_labels(p) == recs
    assert p.read_text().splitlines()[0] == "0 0.250000 0.500000 0.100000 0.200000"


# -- P6 -----------------------------------------------------------------------

def test_ppm_round_trip(tmp_path):
    px = np.random.default_rng(0).integers(0, 256, (5, 7, 3), dtype=np.uint8)
    blob = data.encode_ppm(px)
    assert blob.startswith(b"P6\n7 5\n255\n") and len(blob) == len(b"P6\n7 5\n255\n") + 3 * 35
    assert np.array_equal(data.decode_ppm(blob), px)
    data.write_ppm(tmp_path / "a.ppm", px)
    assert np.array_equal(data.read_ppm(tmp_path / "a.ppm"), px)


def test_ppm_rejects_garbage():
    with pytest.raises(ValueError):
        data.decode_ppm(b"P3\n1 1\n255\n000")
    with pytest.raises(ValueError):
        data.decode_ppm(b"P6\n2 2\n255\n\x00\x00")


def test_ppm_comments_allowed():
    px = np.full((1, 2, 3), 9, dtype=np.uint8)
    blob = b"P6\n# made by hand\n2 1\n255\n" + px.tobytes()
    assert np.array_equal(data.decode_ppm(blob), px)


# -- synthetic ----------------------------------------------------------------

def test_synthetic_balanced_counts():
    ds = data.generate_synthetic(SyntheticSpec(n_train=100, n_val=0, objects_per_image=(1, 3), seed=3))
    counts = data.class_counts(ds.split("train"))
    total = sum(counts.values())
    for c in (0, 1):
        assert abs(counts[c] - total / 2) <= 0.05 * total / 2


def test_synthetic_imbalance_ratio():
    ds = data.generate_synthetic(SyntheticSpec(n_train=200, n_val=0, imbalance_ratio=10))
    counts = data.class_counts(ds.split("train"))
    assert 8 <= counts[0] / counts[1] <= 12


def test_synthetic_determinism_and_bytes(tmp_path):
    spec = SyntheticSpec(n_train=10, n_val=4, seed=7)
    a = data.generate_synthetic(spec, tmp_path / "a")
    b = data.generate_synthetic(spec, tmp_path / "b")
    assert a.manifest_bytes() == b.manifest_bytes()
    for i in a.splits["train"]:
        assert (tmp_path / "a" / "images" / f"{i}.ppm").read_bytes() == (tmp_path / "b" / "images" / f"{i}.ppm").read_bytes()
        assert (tmp_path / "a" / "labels" / f"{i}.txt").read_bytes() == (tmp_path / "b" / "labels" / f"{i}.txt").read_bytes()
    c = data.generate_synthetic(SyntheticSpec(n_train=10, n_val=4, seed=8))
    assert any(not np.array_equal(a.load(i).pixels, c.load(i).pixels) for i in a.splits["train"])


def test_one_object_per_image():
    ds = data.generate_synthetic(SyntheticSpec(n_train=20, n_val=5, objects_per_image=(1, 1)))
    assert all(len(img.labels) == 1 for img in ds.split("train") + ds.split("val"))


def test_synthetic_labels_valid_and_reloadable(tmp_path):
    ds = data.generate_synthetic(SyntheticSpec(n_train=15, n_val=5, imbalance_ratio=3), tmp_path)
    re = data.DatasetManifest.open(tmp_path)
    assert re.splits == ds.splits and re.class_names == ds.class_names
    for img in re.split("train"):
        for r in img.labels:
            r.validate()
            assert r.class_id < re.num_classes
        assert img.pixels.shape == (64, 64, 3)


def test_spec_validation():
    with pytest.raises(ValueError):
        SyntheticSpec(num_classes=0)
    with pytest.raises(ValueError):
        SyntheticSpec(imbalance_ratio=0.5)


def test_manifest_rejects_bad_class(tmp_path):
    ds = data.generate_synthetic(SyntheticSpec(n_train=2, n_val=0), tmp_path)
    first = ds.splits["train"][0]
    (tmp_path / "labels" / f"{first}.txt").write_text("5 0.5 0.5 0.1 0.1\n")
    with pytest.raises(LabelFormatError, match="class id"):
        data.DatasetManifest.open(tmp_path).load(first)
