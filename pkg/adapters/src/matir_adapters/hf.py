"""Real model engines (GPU/CPU weights required; loaded lazily).

Every loader raises a RuntimeError with install instructions when its
stack is missing, so the rest of the package works without any of this.
Model downloads are the operator's responsibility; nothing here fetches
weights implicitly beyond the standard cache lookup of each library.
"""

from __future__ import annotations

import logging
from functools import cached_property
from typing import Sequence

import numpy as np

from .config import ExtractionConfig

log = logging.getLogger("matir_adapters.hf")


def _missing(stack: str, hint: str, exc: Exception) -> RuntimeError:
    return RuntimeError(f"{stack} is not available ({exc}); install it with: {hint}")


class Sam2MaskGenerator:
    """Automatic mask proposals from a promptable segmentation model."""

    def __init__(self, config: ExtractionConfig, device: str = "cpu"):
        try:
            import torch  # noqa: F401
            from sam2.automatic_mask_generator import SAM2AutomaticMaskGenerator
            from sam2.build_sam import build_sam2_hf
        except ImportError as exc:
            raise _missing("the segmentation stack", "pip install torch sam2", exc)
        model = build_sam2_hf(f"facebook/{config.sam_model_id}", device=device)
        self._generator = SAM2AutomaticMaskGenerator(
            model,
            pred_iou_thresh=config.confidence_threshold,
            box_nms_thresh=config.nms_threshold,
        )
        self._max_masks = config.max_masks_per_image
        self._min_pixels = config.min_mask_pixels

    def generate(self, image: np.ndarray) -> list[np.ndarray]:
        proposals = self._generator.generate(image)
        proposals.sort(key=lambda p: -p.get("area", 0))
        masks = [np.asarray(p["segmentation"], dtype=bool) for p in proposals
                 if p.get("area", 0) >= self._min_pixels]
        if self._max_masks:
            masks = masks[: self._max_masks]
        return masks


class AlphaClipRegionEmbedder:
    """Mask-conditioned region embeddings from an alpha-channel CLIP."""

    def __init__(self, config: ExtractionConfig, device: str = "cpu"):
        try:
            import alpha_clip
            import torch
        except ImportError as exc:
            raise _missing("the region embedding stack", "pip install torch alpha-clip", exc)
        self._torch = torch
        self._device = device
        self._model, self._preprocess = alpha_clip.load(
            config.region_model_id, device=device)
        self.dimension = config.embedding_dim

    def embed_regions(self, image: np.ndarray, masks: Sequence[np.ndarray]) -> np.ndarray:
        from PIL import Image

        torch = self._torch
        pil = Image.fromarray(image)
        rows = []
        with torch.no_grad():
            for mask in masks:
                alpha = torch.from_numpy(mask.astype(np.float32))[None]
                pixels = self._preprocess(pil)[None].to(self._device)
                alpha = torch.nn.functional.interpolate(
                    alpha[None], size=pixels.shape[-2:], mode="nearest")[0].to(self._device)
                features = self._model.visual(pixels, alpha)
                rows.append(features[0].float().cpu().numpy())
        out = np.asarray(rows, dtype=np.float32)
        if out.shape[1] != self.dimension:
            raise ValueError(f"model emits dimension {out.shape[1]}, config says {self.dimension}")
        return out


class AlphaClipTextEmbedder:
    def __init__(self, config: ExtractionConfig, device: str = "cpu"):
        try:
            import alpha_clip
            import torch
        except ImportError as exc:
            raise _missing("the text embedding stack", "pip install torch alpha-clip", exc)
        self._alpha_clip = alpha_clip
        self._torch = torch
        self._device = device
        self._model, _ = alpha_clip.load(config.region_model_id, device=device)
        self.dimension = config.embedding_dim

    def embed_texts(self, texts: Sequence[str]) -> np.ndarray:
        torch = self._torch
        with torch.no_grad():
            tokens = self._alpha_clip.tokenize(list(texts)).to(self._device)
            features = self._model.encode_text(tokens)
        return features.float().cpu().numpy().astype(np.float32)


class ClipImageEmbedder:
    """Plain image-tower embeddings for the cropping extractor variant."""

    def __init__(self, config: ExtractionConfig, model_id: str = "openai/clip-vit-large-patch14",
                 device: str = "cpu"):
        try:
            import torch  # noqa: F401
            from transformers import CLIPModel, CLIPProcessor
        except ImportError as exc:
            raise _missing("the CLIP stack", "pip install torch transformers", exc)
        self._model = CLIPModel.from_pretrained(model_id).to(device)
        self._processor = CLIPProcessor.from_pretrained(model_id)
        self._device = device
        self.dimension = config.embedding_dim

    def embed_images(self, crops: Sequence[np.ndarray]) -> np.ndarray:
        import torch

        with torch.no_grad():
            inputs = self._processor(images=list(crops), return_tensors="pt").to(self._device)
            features = self._model.get_image_features(**inputs)
        return features.float().cpu().numpy().astype(np.float32)


class QwenVlmEngine:
    """Chat VLM used for both relevance scoring and box grounding."""

    def __init__(self, config: ExtractionConfig, device: str = "cpu"):
        try:
            import torch  # noqa: F401
            from transformers import AutoModelForImageTextToText, AutoProcessor
        except ImportError as exc:
            raise _missing("the VLM stack", "pip install torch transformers", exc)
        model_id = config.mllm_id
        if "/" not in model_id:
            model_id = f"Qwen/{model_id}"
        self._processor = AutoProcessor.from_pretrained(model_id)
        self._model = AutoModelForImageTextToText.from_pretrained(model_id).to(device)
        self._device = device

    @cached_property
    def _tokenizer(self):
        return self._processor.tokenizer

    def _token_id(self, word: str) -> int:
        # Prefer the space-prefixed form; chat replies start mid-sentence.
        for candidate in (f" {word}", word):
            ids = self._tokenizer.encode(candidate, add_special_tokens=False)
            if len(ids) == 1:
                return ids[0]
        return self._tokenizer.encode(word, add_special_tokens=False)[0]

    def _inputs(self, image_path: str, prompt: str):
        from PIL import Image

        image = Image.open(image_path).convert("RGB")
        messages = [{
            "role": "user",
            "content": [{"type": "image"}, {"type": "text", "text": prompt}],
        }]
        chat = self._processor.apply_chat_template(messages, add_generation_prompt=True)
        return self._processor(text=chat, images=[image], return_tensors="pt").to(self._device)

    def answer_logits(self, image_path: str, prompt: str, tokens: tuple[str, str]) -> tuple[float, float]:
        import torch

        inputs = self._inputs(image_path, prompt)
        with torch.no_grad():
            logits = self._model(**inputs).logits[0, -1]
        return (float(logits[self._token_id(tokens[0])]),
                float(logits[self._token_id(tokens[1])]))

    def generate(self, image_path: str, prompt: str) -> str:
        import torch

        inputs = self._inputs(image_path, prompt)
        with torch.no_grad():
            output = self._model.generate(**inputs, max_new_tokens=256, do_sample=False)
        generated = output[0, inputs["input_ids"].shape[1]:]
        return self._tokenizer.decode(generated, skip_special_tokens=True)


def build_extraction_engines(config: ExtractionConfig, device: str = "cpu"):
    return Sam2MaskGenerator(config, device), AlphaClipRegionEmbedder(config, device)


def build_text_embedder(config: ExtractionConfig, device: str = "cpu"):
    return AlphaClipTextEmbedder(config, device)


def build_image_embedder(config: ExtractionConfig, device: str = "cpu"):
    return ClipImageEmbedder(config, device=device)


def build_vlm(config: ExtractionConfig, device: str = "cpu"):
    return QwenVlmEngine(config, device)
