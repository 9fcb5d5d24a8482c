"""CSV ingestion, canonical manifest, and lossless round-trips."""

import io
import json

import pytest
from hypothesis import given, settings, strategies as st

from btcxr.boxes import Box
from btcxr.errors import (
    DegenerateBox,
    MalformedRow,
    MissingDimension,
    SchemaVersionMismatch,
)
from btcxr.fileio import round_sig
from btcxr.ingest import (
    DatasetManifest,
    ImageRecord,
    load_manifest,
    manifest_to_dict,
    parse_nih_csv,
    parse_vindr_csv,
    save_manifest,
)

VINDR_HEADER = "image_id,class_name,class_id,rad_id,x_min,y_min,x_max,y_max"


def vindr_stream(rows):
    return io.StringIO("\n".join([VINDR_HEADER] + rows))


class TestParseVindr:
    def test_three_row_fixture(self):
        rows = [
            "imgA,Cardiomegaly,3,R1,100,120,300,340",
            "imgA,Cardiomegaly,3,R2,110,125,310,330",
            "imgB,No finding,14,R3,,,,",
        ]
        dims = {"imgA": (512, 512), "imgB": (512, 512)}
        m = parse_vindr_csv(vindr_stream(rows), dims)
        assert len(m.images) == 2
        by_id = {r.image_id: r for r in m.images}
        assert len(by_id["imgA"].instance_boxes) == 2
        assert by_id["imgB"].instance_boxes == []
        assert by_id["imgA"].instance_boxes[0].rater_id == "R1"
        assert m.label_names[3] == "Cardiomegaly"
        assert m.label_names[14] == "No finding"

    def test_normalization(self):
        rows = ["imgA,Nodule,0,R1,128,64,384,192"]
        m = parse_vindr_csv(vindr_stream(rows), {"imgA": (512, 256)})
        box = m.images[0].instance_boxes[0]
        assert box.x_min == pytest.approx(128 / 512)
        assert box.y_min == pytest.approx(64 / 256)
        assert box.x_max == pytest.approx(384 / 512)
        assert box.y_max == pytest.approx(192 / 256)
        assert box.score == 1.0

    def test_denormalization_within_half_pixel(self):
        import numpy as np
        rng = np.random.default_rng(3)
        rows = []
        w, h = 1024, 768
        expected = []
        for i in range(50):
            x0 = int(rng.integers(0, w - 2))
            x1 = int(rng.integers(x0 + 1, w + 1))
            y0 = int(rng.integers(0, h - 2))
            y1 = int(rng.integers(y0 + 1, h + 1))
            rows.append(f"img{i},Mass,1,R1,{x0},{y0},{x1},{y1}")
            expected.append((f"img{i}", x0, y0, x1, y1))
        dims = {f"img{i}": (w, h) for i in range(50)}
        m = parse_vindr_csv(vindr_stream(rows), dims)
        by_id = {r.image_id: r for r in m.images}
        for iid, x0, y0, x1, y1 in expected:
            b = by_id[iid].instance_boxes[0]
            assert abs(b.x_min * w - x0) <= 0.5
            assert abs(b.y_min * h - y0) <= 0.5
            assert abs(b.x_max * w - x1) <= 0.5
            assert abs(b.y_max * h - y1) <= 0.5

    def test_duplicate_rows_preserved(self):
        rows = [
            "imgA,Mass,1,R1,10,10,50,50",
            "imgA,Mass,1,R1,10,10,50,50",
        ]
        m = parse_vindr_csv(vindr_stream(rows), {"imgA": (100, 100)})
        assert len(m.images[0].instance_boxes) == 2

    def test_missing_dimension(self):
        rows = ["imgZ,Mass,1,R1,10,10,50,50"]
        with pytest.raises(MissingDimension):
            parse_vindr_csv(vindr_stream(rows), {})

    def test_inverted_box_is_malformed_with_row(self):
        rows = [
            "imgA,Mass,1,R1,10,10,50,50",
            "imgA,Mass,1,R1,60,10,50,50",
        ]
        with pytest.raises(MalformedRow) as err:
            parse_vindr_csv(vindr_stream(rows), {"imgA": (100, 100)})
        assert err.value.row == 3

    def test_unparsable_number(self):
        rows = ["imgA,Mass,1,R1,ten,10,50,50"]
        with pytest.raises(MalformedRow):
            parse_vindr_csv(vindr_stream(rows), {"imgA": (100, 100)})

    def test_degenerate_after_clip_carries_row(self):
        rows = ["imgA,Mass,1,R1,100,10,120,50"]  # entirely right of the image
        with pytest.raises(DegenerateBox) as err:
            parse_vindr_csv(vindr_stream(rows), {"imgA": (100, 100)})
        assert "row 2" in str(err.value)


class TestParseNih:
    def test_multi_label_row(self):
        csv_text = io.StringIO(
            "Image Index,Finding Labels\n"
            "img1.png,Cardiomegaly|Effusion\n"
            "img2.png,No Finding\n"
            "img3.png,Effusion\n"
        )
        m = parse_nih_csv(csv_text)
        assert len(m.images) == 3
        assert m.label_names == ["Cardiomegaly", "Effusion"]
        by_id = {r.image_id: r for r in m.images}
        assert by_id["img1.png"].image_labels == {0, 1}
        assert by_id["img2.png"].image_labels == set()
        assert by_id["img3.png"].image_labels == {1}

    def test_empty_id_rejected(self):
        csv_text = io.StringIO("Image Index,Finding Labels\n,Effusion\n")
        with pytest.raises(MalformedRow):
            parse_nih_csv(csv_text)

    def test_label_histogram_matches_line_scan(self):
        """Library label counts must match a direct text-scan oracle."""
        lines = [
            "img%d.png,%s" % (i, labels)
            for i, labels in enumerate(
                ["Mass", "Mass|Nodule", "No Finding", "Nodule", "Mass|Effusion",
                 "Effusion|Mass|Nodule", "No Finding", "Mass"]
            )
        ]
        oracle_counts = {}
        for line in lines:
            for token in line.split(",")[1].split("|"):
                if token != "No Finding":
                    oracle_counts[token] = oracle_counts.get(token, 0) + 1

        m = parse_nih_csv(io.StringIO("Image Index,Finding Labels\n" + "\n".join(lines)))
        lib_counts = {name: 0 for name in m.label_names}
        for rec in m.images:
            for lab in rec.image_labels:
                lib_counts[m.label_names[lab]] += 1
        assert lib_counts == oracle_counts


def _nine_digit_floats(lo, hi):
    return st.floats(lo, hi, allow_nan=False).map(lambda v: round_sig(v, 9))


@st.composite
def manifests(draw):
    n_labels = draw(st.integers(1, 5))
    label_names = [f"label_{i}" for i in range(n_labels)]
    n_images = draw(st.integers(1, 6))
    images = []
    for i in range(n_images):
        n_boxes = draw(st.integers(0, 3))
        boxes = []
        for _ in range(n_boxes):
            x0 = draw(_nine_digit_floats(0.0, 0.8))
            y0 = draw(_nine_digit_floats(0.0, 0.8))
            x1 = draw(_nine_digit_floats(x0 + 0.05, 1.0))
            y1 = draw(_nine_digit_floats(y0 + 0.05, 1.0))
            boxes.append(
                Box(
                    class_id=draw(st.integers(0, n_labels - 1)),
                    x_min=x0, y_min=y0, x_max=x1, y_max=y1,
                    score=draw(st.sampled_from([0.25, 0.5, 1.0])),
                    rater_id=draw(st.sampled_from([None, "R1", "R2"])),
                )
            )
        labels = draw(st.sets(st.integers(0, n_labels - 1), max_size=n_labels))
        images.append(
            ImageRecord(f"img_{i}", draw(st.integers(1, 4096)),
                        draw(st.integers(1, 4096)),
                        instance_boxes=boxes, image_labels=labels)
        )
    return DatasetManifest(images=images, label_names=label_names,
                           provenance={"note": draw(st.text(max_size=12))})


class TestRoundTrip:
    @settings(max_examples=60, deadline=None, derandomize=True)
    @given(m=manifests())
    def test_save_load_identity(self, m, tmp_path_factory):
        path = tmp_path_factory.mktemp("rt") / "m.json"
        save_manifest(m, path)
        loaded = load_manifest(path)
        assert loaded.images == m.images
        assert loaded.label_names == m.label_names
        assert loaded.provenance == m.provenance

    def test_fourteen_label_order_preserved(self):
        names = [f"disease_{i:02d}" for i in range(14)]
        m = DatasetManifest(
            images=[ImageRecord("a", 100, 100, image_labels={0, 13})],
            label_names=names,
        )
        data = manifest_to_dict(m)
        assert data["label_names"] == names

    def test_unknown_version_rejected(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"version": "99", "label_names": [], "images": []}))
        with pytest.raises(SchemaVersionMismatch):
            load_manifest(path)

    def test_canonical_keys(self, tmp_path):
        m = DatasetManifest(
            images=[ImageRecord("a", 10, 10,
                                instance_boxes=[Box(0, 0.1, 0.1, 0.5, 0.5)],
                                image_labels={0})],
            label_names=["Mass"],
            provenance={"tool": "test"},
        )
        path = tmp_path / "m.json"
        save_manifest(m, path)
        data = json.loads(path.read_text())
        assert set(data) == {"version", "label_names", "images", "provenance"}
        assert set(data["images"][0]) == {"image_id", "width", "height", "labels", "boxes"}
        assert set(data["images"][0]["boxes"][0]) == {
            "class_id", "x_min", "y_min", "x_max", "y_max", "score", "rater_id"
        }

    def test_coordinates_serialized_at_nine_significant_digits(self, tmp_path):
        third = 1.0 / 3.0
        m = DatasetManifest(
            images=[ImageRecord("a", 10, 10,
                                instance_boxes=[Box(0, third, 0.1, 0.5, 0.5)])],
            label_names=["Mass"],
        )
        path = tmp_path / "m.json"
        save_manifest(m, path)
        assert '"x_min": 0.333333333,' in path.read_text()
