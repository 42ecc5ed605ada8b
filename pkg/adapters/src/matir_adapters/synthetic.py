"""Deterministic stand-in model engines.

These implement the same interfaces as the real stacks but derive every
output from content hashes, so CI can exercise extraction and all three
servers end-to-end with zero model weights. The mask generator does real
(if crude) work: color quantization plus connected components, with the
configured confidence and NMS thresholds applied.
"""

from __future__ import annotations

import hashlib
import json
from typing import Sequence

import numpy as np
from scipy import ndimage


def _seeded_rng(*parts) -> np.random.Generator:
    digest = hashlib.sha256(":".join(str(p) for p in parts).encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "big"))


def _bbox_iou(a, b) -> float:
    ax1, ay1, ax2, ay2 = a
    bx1, by1, bx2, by2 = b
    ix = min(ax2, bx2) - max(ax1, bx1)
    iy = min(ay2, by2) - max(ay1, by1)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / union if union > 0 else 0.0


class SyntheticMaskGenerator:
    """Connected color components with confidence and box-NMS filtering.

    A component's pseudo-confidence is how well it fills its bounding box,
    so solid shapes score near 1.0 and speckle scores low.
    """

    def __init__(self, confidence_threshold: float = 0.5, nms_threshold: float = 0.7,
                 min_pixels: int = 16, max_masks: int = 0, quantization: int = 64):
        self.confidence_threshold = confidence_threshold
        self.nms_threshold = nms_threshold
        self.min_pixels = min_pixels
        self.max_masks = max_masks
        self.quantization = quantization

    def generate(self, image: np.ndarray) -> list[np.ndarray]:
        if image.ndim != 3 or image.shape[2] < 3:
            raise ValueError(f"expected RGB image, got shape {image.shape}")
        quantized = (image[:, :, :3] // self.quantization).astype(np.int32)
        keys = quantized[:, :, 0] * 100 + quantized[:, :, 1] * 10 + quantized[:, :, 2]
        background = np.bincount(keys.ravel()).argmax()

        candidates = []
        for value in np.unique(keys):
            if value == background:
                continue
            labels, count = ndimage.label(keys == value)
            for component in range(1, count + 1):
                mask = labels == component
                area = int(mask.sum())
                if area < self.min_pixels:
                    continue
                rows, cols = np.nonzero(mask)
                box = (cols.min(), rows.min(), cols.max() + 1, rows.max() + 1)
                fill = area / ((box[2] - box[0]) * (box[3] - box[1]))
                if fill < self.confidence_threshold:
                    continue
                candidates.append((fill, area, box, mask))

        # Large, confident components first; position breaks ties.
        candidates.sort(key=lambda c: (-c[1], -c[0], c[2]))
        kept = []
        for fill, area, box, mask in candidates:
            if any(_bbox_iou(box, kept_box) > self.nms_threshold for _, kept_box in kept):
                continue
            kept.append((mask, box))
            if self.max_masks and len(kept) >= self.max_masks:
                break
        return [mask for mask, _ in kept]


class SyntheticRegionEmbedder:
    """Unit vectors derived from (image digest, mask geometry) hashes."""

    def __init__(self, dimension: int, seed: int = 0):
        self.dimension = dimension
        self.seed = seed

    def embed_regions(self, image: np.ndarray, masks: Sequence[np.ndarray]) -> np.ndarray:
        digest = hashlib.sha256(np.ascontiguousarray(image).tobytes()).hexdigest()[:16]
        rows = np.empty((len(masks), self.dimension), dtype=np.float32)
        for i, mask in enumerate(masks):
            rows_idx, cols_idx = np.nonzero(mask)
            key = (int(rows_idx.min()), int(cols_idx.min()), int(mask.sum()))
            vec = _seeded_rng(self.seed, "region", digest, key).standard_normal(self.dimension)
            rows[i] = (vec / np.linalg.norm(vec)).astype(np.float32)
        return rows


class SyntheticTextEmbedder:
    def __init__(self, dimension: int, seed: int = 0):
        self.dimension = dimension
        self.seed = seed

    def embed_texts(self, texts: Sequence[str]) -> np.ndarray:
        rows = np.empty((len(texts), self.dimension), dtype=np.float32)
        for i, text in enumerate(texts):
            vec = _seeded_rng(self.seed, "text", text).standard_normal(self.dimension)
            rows[i] = (vec / np.linalg.norm(vec)).astype(np.float32)
        return rows


class SyntheticImageEmbedder:
    """Whole-crop embedder for the cropping extractor variant."""

    def __init__(self, dimension: int, seed: int = 0):
        self.dimension = dimension
        self.seed = seed

    def embed_images(self, crops: Sequence[np.ndarray]) -> np.ndarray:
        rows = np.empty((len(crops), self.dimension), dtype=np.float32)
        for i, crop in enumerate(crops):
            digest = hashlib.sha256(np.ascontiguousarray(crop).tobytes()).hexdigest()[:16]
            vec = _seeded_rng(self.seed, "crop", digest).standard_normal(self.dimension)
            rows[i] = (vec / np.linalg.norm(vec)).astype(np.float32)
        return rows


class SyntheticVlm:
    """Hash-driven answer logits and a grounding reply with parseable JSON."""

    def __init__(self, seed: int = 0, mask_generator: SyntheticMaskGenerator | None = None):
        self.seed = seed
        self.mask_generator = mask_generator or SyntheticMaskGenerator()

    def answer_logits(self, image_path: str, prompt: str, tokens: tuple[str, str]) -> tuple[float, float]:
        rng = _seeded_rng(self.seed, "logits", image_path, prompt, tokens)
        z = rng.normal(0.0, 4.0, size=2)
        return float(z[0]), float(z[1])

    def generate(self, image_path: str, prompt: str) -> str:
        from PIL import Image

        try:
            with Image.open(image_path) as img:
                pixels = np.asarray(img.convert("RGB"))
        except OSError:
            return "I cannot see an image."
        masks = self.mask_generator.generate(pixels)
        if not masks:
            return '```json\n[]\n```'
        rows, cols = np.nonzero(masks[0])
        box = [int(cols.min()), int(rows.min()), int(cols.max()) + 1, int(rows.max()) + 1]
        return "```json\n" + json.dumps([{"bbox_2d": box, "label": "object"}]) + "\n```"
