"""CSV ingestion into the canonical dataset manifest, plus save/load.

Two source dialects are supported:

* VinDr-style instance annotations: one row per box with columns
  ``image_id, class_name, class_id, rad_id, x_min, y_min, x_max, y_max``
  and pixel coordinates.  "No finding" rows carry no box.
* NIH-style image-level labels: one row per image with columns
  ``Image Index`` and ``Finding Labels`` (pipe-separated multi-label).

Pixel coordinates are normalized by a caller-supplied width/height table
(images themselves are never decoded), clamped to [0,1], and stored as
resolution-independent boxes.  Duplicate rows are preserved verbatim:
de-duplication is the job of the fusion step, not ingest.
"""

from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import dataclass, field
from typing import Iterable, Mapping

from .boxes import Box, clip_box
from .errors import (
    DegenerateBox,
    MalformedRow,
    MissingDimension,
    SchemaVersionMismatch,
)
from .fileio import atomic_write_text, round_sig

logger = logging.getLogger(__name__)

MANIFEST_VERSION = "1"

# The two datasets spell their empty-label sentinel differently
# ("No finding" vs "No Finding"); matching is case-insensitive and trimmed.
_NO_FINDING = "no finding"


@dataclass
class ImageRecord:
    """One image with its instance boxes and/or image-level labels.

    ``source`` records the ingest dialect; it is not serialized (the
    canonical on-disk layout carries provenance at manifest level), so it
    is excluded from equality.
    """

    image_id: str
    width: int
    height: int
    instance_boxes: list[Box] = field(default_factory=list)
    image_labels: set[int] = field(default_factory=set)
    source: str = field(default="canonical", compare=False)


@dataclass
class DatasetManifest:
    """Canonical in-memory dataset: images, the label space, provenance."""

    images: list[ImageRecord]
    label_names: list[str]
    provenance: dict = field(default_factory=dict)

    def validate(self) -> None:
        seen = set()
        n_labels = len(self.label_names)
        for rec in self.images:
            if rec.image_id in seen:
                raise MalformedRow(f"duplicate image_id {rec.image_id!r}", row=0)
            seen.add(rec.image_id)
            for box in rec.instance_boxes:
                if box.class_id >= n_labels:
                    raise SchemaVersionMismatch(
                        f"box class_id {box.class_id} outside label space "
                        f"of size {n_labels} (image {rec.image_id})"
                    )
            for lab in rec.image_labels:
                if lab >= n_labels:
                    raise SchemaVersionMismatch(
                        f"label id {lab} outside label space of size {n_labels} "
                        f"(image {rec.image_id})"
                    )

    def image_ids(self) -> list[str]:
        return [rec.image_id for rec in self.images]

    def labels_for_split(self, rec: ImageRecord) -> set[int]:
        """Label set used by stratification: image labels, else box classes."""
        if rec.image_labels:
            return set(rec.image_labels)
        return {b.class_id for b in rec.instance_boxes}


def _is_no_finding(name: str) -> bool:
    return name.strip().lower() == _NO_FINDING


def _parse_float(value: str, what: str, row: int) -> float:
    try:
        return float(value)
    except (TypeError, ValueError):
        raise MalformedRow(f"unparsable {what} {value!r}", row=row) from None


def parse_vindr_csv(
    rows: Iterable[str],
    image_dims: Mapping[str, tuple[int, int]],
) -> DatasetManifest:
    """Parse VinDr-style instance annotations into a manifest.

    ``rows`` is an iterable of CSV text lines (header first); ``image_dims``
    maps image_id to (width, height) in pixels.  All boxes for one image are
    kept, including near-duplicates from different raters.
    """
    reader = csv.DictReader(rows)
    required = {"image_id", "class_name", "class_id", "rad_id",
                "x_min", "y_min", "x_max", "y_max"}
    if reader.fieldnames is None or not required.issubset(reader.fieldnames):
        missing = sorted(required - set(reader.fieldnames or []))
        raise MalformedRow(f"missing columns {missing}", row=1)

    records: dict[str, ImageRecord] = {}
    names_by_id: dict[int, str] = {}

    for row_no, row in enumerate(reader, start=2):
        image_id = (row["image_id"] or "").strip()
        if not image_id:
            raise MalformedRow("empty image_id", row=row_no)
        if image_id not in image_dims:
            raise MissingDimension(f"no dimensions recorded for image {image_id!r}")
        width, height = image_dims[image_id]

        rec = records.get(image_id)
        if rec is None:
            rec = ImageRecord(image_id, int(width), int(height), source="vindr")
            records[image_id] = rec

        class_name = (row["class_name"] or "").strip()
        raw_id = (row["class_id"] or "").strip()
        if _is_no_finding(class_name):
            # Explicit empty-image marker: record the label name if it has an
            # id of its own, but never a box.
            if raw_id:
                cid = _parse_int(raw_id, "class_id", row_no)
                _remember_name(names_by_id, cid, class_name, row_no)
            continue

        cid = _parse_int(raw_id, "class_id", row_no)
        _remember_name(names_by_id, cid, class_name, row_no)

        x_min = _parse_float(row["x_min"], "x_min", row_no)
        y_min = _parse_float(row["y_min"], "y_min", row_no)
        x_max = _parse_float(row["x_max"], "x_max", row_no)
        y_max = _parse_float(row["y_max"], "y_max", row_no)
        if x_min > x_max or y_min > y_max:
            raise MalformedRow(
                f"inverted box ({x_min},{y_min},{x_max},{y_max})", row=row_no
            )
        try:
            box = clip_box(
                cid,
                x_min / width,
                y_min / height,
                x_max / width,
                y_max / height,
                score=1.0,
                rater_id=(row["rad_id"] or "").strip() or None,
            )
        except DegenerateBox as exc:
            raise DegenerateBox(f"row {row_no}: {exc}", row=row_no) from exc
        rec.instance_boxes.append(box)

    label_names = _dense_label_names(names_by_id)
    manifest = DatasetManifest(
        images=list(records.values()),
        label_names=label_names,
        provenance={"source": "vindr", "rows": "instance-level"},
    )
    manifest.validate()
    logger.info("parsed %d VinDr images, %d label names",
                len(manifest.images), len(label_names))
    return manifest


def _parse_int(value: str, what: str, row: int) -> int:
    try:
        return int(float(value))
    except (TypeError, ValueError):
        raise MalformedRow(f"unparsable {what} {value!r}", row=row) from None


def _remember_name(names: dict[int, str], cid: int, name: str, row: int) -> None:
    if cid < 0:
        raise MalformedRow(f"negative class_id {cid}", row=row)
    prev = names.get(cid)
    if prev is not None and prev != name:
        raise MalformedRow(
            f"class_id {cid} maps to both {prev!r} and {name!r}", row=row
        )
    names[cid] = name


def _dense_label_names(names_by_id: dict[int, str]) -> list[str]:
    """Fill id gaps with placeholders so index == class_id holds."""
    if not names_by_id:
        return []
    top = max(names_by_id)
    return [names_by_id.get(i, f"class_{i}") for i in range(top + 1)]


def parse_nih_csv(rows: Iterable[str]) -> DatasetManifest:
    """Parse NIH-style image-level labels into a manifest.

    Labels come from the pipe-separated ``Finding Labels`` column;
    "No Finding" maps to the empty label set.  label_names accumulates
    distinct labels in first-seen order.  Optional ``width``/``height``
    columns are honored; otherwise dimensions default to 1x1 (boxes are
    absent, so dimensions carry no information for these datasets).
    """
    reader = csv.DictReader(rows)
    cols = reader.fieldnames or []
    if "Image Index" not in cols or "Finding Labels" not in cols:
        raise MalformedRow("expected columns 'Image Index' and 'Finding Labels'", row=1)
    width_col = next((c for c in cols if c.strip().lower() in
                      ("width", "originalimagewidth", "originalimage[width")), None)
    height_col = next((c for c in cols if c.strip().lower() in
                       ("height", "originalimageheight", "height]")), None)

    label_index: dict[str, int] = {}
    label_names: list[str] = []
    images: list[ImageRecord] = []
    seen: set[str] = set()

    for row_no, row in enumerate(reader, start=2):
        image_id = (row["Image Index"] or "").strip()
        if not image_id:
            raise MalformedRow("empty image id", row=row_no)
        if image_id in seen:
            raise MalformedRow(f"duplicate image id {image_id!r}", row=row_no)
        seen.add(image_id)

        labels: set[int] = set()
        for raw in (row["Finding Labels"] or "").split("|"):
            name = raw.strip()
            if not name or _is_no_finding(name):
                continue
            if name not in label_index:
                label_index[name] = len(label_names)
                label_names.append(name)
            labels.add(label_index[name])

        width = _parse_int(row[width_col], "width", row_no) if width_col and row.get(width_col) else 1
        height = _parse_int(row[height_col], "height", row_no) if height_col and row.get(height_col) else 1
        images.append(ImageRecord(image_id, width, height,
                                  image_labels=labels, source="nih"))

    manifest = DatasetManifest(
        images=images,
        label_names=label_names,
        provenance={"source": "nih", "rows": "image-level"},
    )
    manifest.validate()
    logger.info("parsed %d NIH images, %d label names",
                len(manifest.images), len(label_names))
    return manifest


def manifest_to_dict(m: DatasetManifest) -> dict:
    """Canonical JSON layout; box coordinates at 9 significant digits."""
    return {
        "version": MANIFEST_VERSION,
        "label_names": list(m.label_names),
        "images": [
            {
                "image_id": rec.image_id,
                "width": rec.width,
                "height": rec.height,
                "labels": sorted(rec.image_labels),
                "boxes": [
                    {
                        "class_id": b.class_id,
                        "x_min": round_sig(b.x_min),
                        "y_min": round_sig(b.y_min),
                        "x_max": round_sig(b.x_max),
                        "y_max": round_sig(b.y_max),
                        "score": b.score,
                        "rater_id": b.rater_id,
                    }
                    for b in rec.instance_boxes
                ],
            }
            for rec in m.images
        ],
        "provenance": dict(m.provenance),
    }


def manifest_from_dict(data: dict) -> DatasetManifest:
    version = data.get("version")
    if version != MANIFEST_VERSION:
        raise SchemaVersionMismatch(
            f"unsupported manifest version {version!r} (expected {MANIFEST_VERSION!r})"
        )
    images = []
    for img in data["images"]:
        boxes = [
            Box(
                class_id=int(b["class_id"]),
                x_min=float(b["x_min"]),
                y_min=float(b["y_min"]),
                x_max=float(b["x_max"]),
                y_max=float(b["y_max"]),
                score=float(b["score"]),
                rater_id=b.get("rater_id"),
            )
            for b in img["boxes"]
        ]
        images.append(
            ImageRecord(
                image_id=img["image_id"],
                width=int(img["width"]),
                height=int(img["height"]),
                instance_boxes=boxes,
                image_labels=set(int(x) for x in img["labels"]),
                source="canonical",
            )
        )
    manifest = DatasetManifest(
        images=images,
        label_names=list(data["label_names"]),
        provenance=dict(data.get("provenance", {})),
    )
    manifest.validate()
    return manifest


def save_manifest(m: DatasetManifest, path: str | os.PathLike) -> None:
    atomic_write_text(path, json.dumps(manifest_to_dict(m), indent=2) + "\n")


def load_manifest(path: str | os.PathLike) -> DatasetManifest:
    with open(path, "r", encoding="utf-8") as fh:
        data = json.load(fh)
    return manifest_from_dict(data)
