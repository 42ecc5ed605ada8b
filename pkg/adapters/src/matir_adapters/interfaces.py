"""Model interfaces the servers and extractor are written against.

Implementations: synthetic.py (deterministic, no models, used in CI) and
hf.py (real model stacks, loaded lazily).
"""

from __future__ import annotations

from typing import Protocol, Sequence

import numpy as np


class MaskGenerator(Protocol):
    def generate(self, image: np.ndarray) -> list[np.ndarray]:
        """RGB (H, W, 3) uint8 image -> boolean (H, W) masks."""
        ...


class RegionEmbedder(Protocol):
    dimension: int

    def embed_regions(self, image: np.ndarray, masks: Sequence[np.ndarray]) -> np.ndarray:
        """One float32 row per mask, conditioned on mask + full image."""
        ...


class TextEmbedder(Protocol):
    dimension: int

    def embed_texts(self, texts: Sequence[str]) -> np.ndarray:
        """One float32 row per text."""
        ...


class VlmEngine(Protocol):
    def answer_logits(self, image_path: str, prompt: str, tokens: tuple[str, str]) -> tuple[float, float]:
        """Logits of the two candidate answer tokens for the next position."""
        ...

    def generate(self, image_path: str, prompt: str) -> str:
        """Free-form generation (used for box grounding)."""
        ...
