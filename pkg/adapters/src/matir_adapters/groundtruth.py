"""Dataset annotation conversion into the engine's ground-truth JSONL.

Two input flavors:

- COCO-style instance annotations (images/annotations/categories):
  every category name becomes one query, relevant images are those with
  at least one instance of it, and the instance segmentations become the
  ground-truth masks.
- Description datasets: the same images/annotations arrays plus a
  "descriptions" list ({"id", "text"}); annotations reference
  description ids via "description_ids". One query per description.

Segmentations may be uncompressed RLE dicts ({"size", "counts" list}) or
polygon lists (rasterized here). Compressed-string RLE is skipped with a
log line. A relevant image whose segmentations all fail to convert is
dropped from that query, also logged.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .rle import encode_mask

log = logging.getLogger("matir_adapters.groundtruth")


def _rasterize_polygons(polygons, height: int, width: int) -> np.ndarray | None:
    canvas = Image.new("1", (width, height), 0)
    draw = ImageDraw.Draw(canvas)
    drew = False
    for poly in polygons:
        if not isinstance(poly, list) or len(poly) < 6 or len(poly) % 2 != 0:
            continue
        points = list(zip(poly[0::2], poly[1::2]))
        draw.polygon(points, outline=1, fill=1)
        drew = True
    if not drew:
        return None
    grid = np.asarray(canvas, dtype=bool)
    return grid if grid.any() else None


def segmentation_to_rle(segmentation, height: int, width: int) -> dict | None:
    """Normalize one annotation's segmentation to an uncompressed RLE."""
    if isinstance(segmentation, dict):
        counts = segmentation.get("counts")
        size = segmentation.get("size")
        if isinstance(counts, str):
            log.warning("compressed RLE strings are not supported; skipping annotation")
            return None
        if not isinstance(counts, list) or size != [height, width]:
            log.warning("malformed RLE segmentation; skipping annotation")
            return None
        if sum(counts) != height * width:
            log.warning("RLE does not cover the image; skipping annotation")
            return None
        return {"size": [height, width], "counts": [int(c) for c in counts]}
    if isinstance(segmentation, list):
        grid = _rasterize_polygons(segmentation, height, width)
        if grid is None:
            log.warning("unusable polygon segmentation; skipping annotation")
            return None
        return encode_mask(grid)
    log.warning("unknown segmentation type %r; skipping annotation", type(segmentation))
    return None


def _image_table(data: dict) -> dict:
    table = {}
    for img in data.get("images", []):
        table[img["id"]] = (str(img.get("file_name", img["id"])), int(img["height"]),
                            int(img["width"]))
    return table


def _collect(query_specs, data: dict, key_of) -> list[dict]:
    """query_specs: [(query_id, text)]; key_of(annotation) -> iterable of
    query keys the annotation belongs to."""
    images = _image_table(data)
    per_query: dict[str, dict[str, list[dict]]] = {qid: {} for qid, _ in query_specs}
    texts = dict(query_specs)
    for ann in data.get("annotations", []):
        image_id = ann.get("image_id")
        if image_id not in images:
            log.warning("annotation references unknown image %r; skipping", image_id)
            continue
        file_name, height, width = images[image_id]
        rle = segmentation_to_rle(ann.get("segmentation"), height, width)
        if rle is None:
            continue
        image_key = Path(file_name).stem
        for qid in key_of(ann):
            if qid not in per_query:
                continue
            per_query[qid].setdefault(image_key, []).append(rle)

    lines = []
    for qid, _ in query_specs:
        relevant = [
            {"image_id": image_key, "masks": masks}
            for image_key, masks in sorted(per_query[qid].items())
        ]
        lines.append({"query_id": qid, "text": texts[qid], "relevant": relevant})
    return lines


def convert_coco_instances(data: dict) -> list[dict]:
    """COCO instances dict -> GT lines, one query per category name."""
    categories = data.get("categories", [])
    if not categories:
        raise ValueError("no categories in annotation file")
    specs = []
    seen = set()
    for cat in sorted(categories, key=lambda c: c["id"]):
        qid = f"cat{cat['id']:04d}"
        if qid in seen:
            raise ValueError(f"duplicate category id {cat['id']}")
        seen.add(qid)
        specs.append((qid, str(cat["name"])))

    def key_of(ann):
        return [f"cat{ann['category_id']:04d}"] if "category_id" in ann else []

    return _collect(specs, data, key_of)


def convert_descriptions(data: dict) -> list[dict]:
    """Description-annotated dict -> GT lines, one query per description."""
    descriptions = data.get("descriptions", [])
    if not descriptions:
        raise ValueError("no descriptions in annotation file")
    specs = []
    seen = set()
    for desc in sorted(descriptions, key=lambda d: d["id"]):
        qid = f"desc{desc['id']:05d}"
        if qid in seen:
            raise ValueError(f"duplicate description id {desc['id']}")
        seen.add(qid)
        specs.append((qid, str(desc["text"])))

    def key_of(ann):
        ids = ann.get("description_ids", [])
        return [f"desc{i:05d}" for i in ids]

    return _collect(specs, data, key_of)


def convert_groundtruth(annotation_path, out_path, flavor: str = "coco") -> dict:
    """Convert an annotation file and write gt.jsonl; returns counts."""
    data = json.loads(Path(annotation_path).read_text(encoding="utf-8"))
    if flavor == "coco":
        lines = convert_coco_instances(data)
    elif flavor == "descriptions":
        lines = convert_descriptions(data)
    else:
        raise ValueError(f"unknown flavor {flavor!r}")
    with open(out_path, "w", encoding="utf-8") as f:
        for line in lines:
            f.write(json.dumps(line) + "\n")
    with_relevant = sum(1 for line in lines if line["relevant"])
    return {"queries": len(lines), "queries_with_relevant": with_relevant}
