import numpy as np
import pytest
from PIL import Image

from matir_adapters.config import ExtractionConfig

TEMPLATES = ["a photo of a {}.", "a bad photo of the {}.", "a close-up of a {}."]


def paint_image(path, shapes, size=(96, 64), background=(250, 250, 250)):
    """Write a PNG with solid colored rectangles; returns the path."""
    canvas = np.full((size[1], size[0], 3), background, dtype=np.uint8)
    for (x, y, w, h), color in shapes:
        canvas[y:y + h, x:x + w] = color
    Image.fromarray(canvas).save(path)
    return path


@pytest.fixture
def sample_images(tmp_path):
    """Three gallery images with well-separated solid objects."""
    image_dir = tmp_path / "images"
    image_dir.mkdir()
    paint_image(image_dir / "beach.png",
                [((8, 8, 24, 16), (200, 30, 30)), ((48, 30, 30, 20), (30, 30, 200))])
    paint_image(image_dir / "field.png",
                [((10, 20, 20, 20), (30, 160, 30))])
    paint_image(image_dir / "street.png",
                [((4, 4, 16, 12), (240, 180, 20)), ((30, 24, 26, 26), (90, 40, 130)),
                 ((64, 6, 20, 14), (20, 150, 150))])
    return image_dir


@pytest.fixture
def config():
    return ExtractionConfig(prompt_templates=TEMPLATES, embedding_dim=32,
                            min_mask_pixels=16, seed=11)
