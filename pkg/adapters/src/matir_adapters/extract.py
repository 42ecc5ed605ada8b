"""Offline gallery extraction: images -> manifest.jsonl + embeddings.f32.

For every readable image, the mask generator proposes region masks and
the region embedder produces one vector per mask; both land in the
engine's manifest/blob formats. Unreadable files are skipped with a log
line; images yielding zero masks are still emitted (declaration line, no
regions) so the gallery keeps them.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from .config import ExtractionConfig
from .interfaces import MaskGenerator, RegionEmbedder
from .rle import encode_mask, tight_bbox
from .synthetic import SyntheticMaskGenerator, SyntheticRegionEmbedder

log = logging.getLogger("matir_adapters.extract")

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".webp")


class CroppingRegionEmbedder:
    """Optional extractor variant: crop each mask's box, resize, embed.

    Trades the mask-conditioned context of the default region embedder
    for a plain image tower; kept behind a flag for experiments.
    """

    def __init__(self, image_embedder, crop_size: int = 224):
        self.image_embedder = image_embedder
        self.dimension = image_embedder.dimension
        self.crop_size = crop_size

    def embed_regions(self, image: np.ndarray, masks: Sequence[np.ndarray]) -> np.ndarray:
        crops = []
        for mask in masks:
            x, y, w, h = (int(v) for v in tight_bbox(mask))
            crop = Image.fromarray(image[y:y + h, x:x + w])
            crop = crop.resize((self.crop_size, self.crop_size), Image.BILINEAR)
            crops.append(np.asarray(crop))
        return self.image_embedder.embed_images(crops)


def build_engines(config: ExtractionConfig, engine: str = "synthetic"):
    """(mask generator, region embedder) for the requested engine family."""
    if engine == "synthetic":
        generator = SyntheticMaskGenerator(
            confidence_threshold=config.confidence_threshold,
            nms_threshold=config.nms_threshold,
            min_pixels=config.min_mask_pixels,
            max_masks=config.max_masks_per_image)
        embedder = SyntheticRegionEmbedder(config.embedding_dim, seed=config.seed)
        return generator, embedder
    if engine == "hf":
        from . import hf

        return hf.build_extraction_engines(config)
    raise ValueError(f"unknown engine {engine!r}")


def list_images(image_dir) -> list[Path]:
    root = Path(image_dir)
    if not root.is_dir():
        raise ValueError(f"{root} is not a directory")
    return sorted(p for p in root.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def extract_gallery(image_dir, config: ExtractionConfig, out_manifest, out_embeddings,
                    mask_generator: MaskGenerator | None = None,
                    region_embedder: RegionEmbedder | None = None,
                    engine: str = "synthetic", cropping: bool = False) -> dict:
    """Walk image_dir and write the manifest + embedding blob.

    Returns summary counts. Explicit mask_generator/region_embedder
    override the engine selection (used by tests and custom stacks).
    """
    if mask_generator is None or region_embedder is None:
        default_generator, default_embedder = build_engines(config, engine)
        mask_generator = mask_generator or default_generator
        region_embedder = region_embedder or default_embedder
    if cropping:
        from .synthetic import SyntheticImageEmbedder

        if engine == "synthetic":
            region_embedder = CroppingRegionEmbedder(
                SyntheticImageEmbedder(config.embedding_dim, seed=config.seed))
        else:
            from . import hf

            region_embedder = CroppingRegionEmbedder(hf.build_image_embedder(config))
    if region_embedder.dimension != config.embedding_dim:
        raise ValueError(
            f"region embedder emits dimension {region_embedder.dimension}, config says "
            f"{config.embedding_dim}; refusing to run")

    images = list_images(image_dir)
    row = 0
    counts = {"images": 0, "skipped": 0, "regions": 0, "empty_images": 0}
    with open(out_manifest, "w", encoding="utf-8") as manifest, \
            open(out_embeddings, "wb") as blob:
        for path in images:
            try:
                with Image.open(path) as img:
                    pixels = np.asarray(img.convert("RGB"))
            except (OSError, UnidentifiedImageError) as exc:
                log.warning("skipping unreadable image %s: %s", path, exc)
                counts["skipped"] += 1
                continue
            height, width = pixels.shape[:2]
            image_id = path.stem
            uri = str(path.resolve())
            masks = [m for m in mask_generator.generate(pixels) if m.any()]
            counts["images"] += 1
            if not masks:
                manifest.write(json.dumps({
                    "image_id": image_id, "width": width, "height": height, "uri": uri,
                }) + "\n")
                counts["empty_images"] += 1
                log.info("%s: 0 masks", path.name)
                continue
            vectors = np.asarray(region_embedder.embed_regions(pixels, masks), dtype="<f4")
            if vectors.shape != (len(masks), config.embedding_dim):
                raise ValueError(
                    f"embedder returned shape {vectors.shape} for {len(masks)} masks "
                    f"of dimension {config.embedding_dim}")
            for mask_id, mask in enumerate(masks):
                manifest.write(json.dumps({
                    "image_id": image_id, "width": width, "height": height, "uri": uri,
                    "mask_id": mask_id, "bbox": tight_bbox(mask),
                    "rle": encode_mask(mask), "embedding_row": row,
                }) + "\n")
                row += 1
            blob.write(vectors.tobytes())
            counts["regions"] += len(masks)
            log.info("%s: %d masks", path.name, len(masks))
    return counts
