import io

import pytest

from matir.index import build_index
from matir.mocks import build_planted_gallery, make_perfect_backends

from helpers import tiny_gallery_files


@pytest.fixture
def tiny_index():
    manifest, blob, dim = tiny_gallery_files()
    return build_index(io.StringIO(manifest), blob, dim)


@pytest.fixture(scope="session")
def planted():
    """50-image, 10-query planted gallery with its perfect backend trio."""
    index, gts = build_planted_gallery(n_images=50, n_queries=10, dimension=64, seed=7)
    embedder, scorer, grounder = make_perfect_backends(gts, index)
    return index, gts, embedder, scorer, grounder
