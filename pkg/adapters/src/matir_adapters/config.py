"""Extraction and serving configuration.

The prompt template list is a required input: pass the templates your
text tower was tuned for (e.g. the standard CLIP prompt set); nothing is
hardcoded here.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path


@dataclass
class ExtractionConfig:
    prompt_templates: list[str]
    confidence_threshold: float = 0.5
    nms_threshold: float = 0.7
    region_model_id: str = "alpha-clip-vit-l-14-grit20m"
    embedding_dim: int = 768
    mllm_id: str = "qwen2.5-vl-7b-instruct"
    sam_model_id: str = "sam2-hiera-large"
    max_masks_per_image: int = 0  # 0 = unlimited
    min_mask_pixels: int = 16
    seed: int = 0

    def __post_init__(self):
        if not self.prompt_templates:
            raise ValueError("prompt_templates must list at least one template")
        for i, template in enumerate(self.prompt_templates):
            if "{}" not in template:
                raise ValueError(f"prompt template {i} has no {{}} placeholder: {template!r}")
        if self.embedding_dim <= 0:
            raise ValueError("embedding_dim must be positive")
        if not (0.0 <= self.confidence_threshold <= 1.0):
            raise ValueError("confidence_threshold must be in [0, 1]")
        if not (0.0 <= self.nms_threshold <= 1.0):
            raise ValueError("nms_threshold must be in [0, 1]")

    @classmethod
    def from_file(cls, path) -> "ExtractionConfig":
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
        if not isinstance(raw, dict):
            raise ValueError("config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**raw)
