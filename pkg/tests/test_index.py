import io
import json

import numpy as np
import pytest

from matir.errors import IndexBuildError, IndexFormatError
from matir.index import (FORMAT_VERSION, GalleryIndex, assemble_index, build_index,
                         index_stats, load_index, save_index)

from helpers import grid_mask, manifest_line, rect_grid, tiny_gallery_files


def test_build_tiny_fixture(tiny_index):
    assert len(tiny_index.images) == 2
    assert tiny_index.total_regions == 4
    assert tiny_index.dimension == 4
    norms = np.linalg.norm(tiny_index.embeddings.astype(np.float64), axis=1)
    assert np.abs(norms - 1.0).max() < 1e-6


def test_build_normalizes_rows(tiny_index):
    # Second input row was [0, 2, 0, 0]; stored as unit basis vector.
    entry = tiny_index.entry("img_a")
    row = tiny_index.embeddings[entry.regions[1].embedding_row]
    assert np.allclose(row, [0.0, 1.0, 0.0, 0.0])


def test_build_is_deterministic():
    manifest, blob, dim = tiny_gallery_files()
    a = build_index(io.StringIO(manifest), blob, dim)
    b = build_index(io.StringIO(manifest), blob, dim)
    assert a == b


def test_regions_grouped_and_sorted(tiny_index):
    rows = [r.embedding_row for e in tiny_index.images for r in e.regions]
    assert rows == [0, 1, 2, 3]
    for entry in tiny_index.images:
        mask_ids = [r.mask_id for r in entry.regions]
        assert mask_ids == sorted(mask_ids)


def test_blob_one_row_short():
    manifest, blob, dim = tiny_gallery_files()
    with pytest.raises(IndexBuildError, match=r"48 bytes.*expected 64"):
        build_index(io.StringIO(manifest), blob[: 3 * dim * 4], dim)


def test_manifest_bbox_disagreement_cites_ids():
    grid = rect_grid(4, 4, 1, 1, 2, 2)
    line = manifest_line("img_x", 4, 4, mask_id=7, grid=grid, embedding_row=0,
                         bbox=[0.0, 0.0, 2.0, 2.0])
    blob = np.ones((1, 4), dtype=np.float32).tobytes()
    with pytest.raises(IndexBuildError, match=r"line 1.*img_x.*7"):
        build_index(io.StringIO(line), blob, 4)


def test_duplicate_mask_id_rejected():
    grid = rect_grid(4, 4, 0, 0, 2, 2)
    lines = "\n".join([
        manifest_line("img_x", 4, 4, mask_id=0, grid=grid, embedding_row=0),
        manifest_line("img_x", 4, 4, mask_id=0, grid=grid, embedding_row=1),
    ])
    blob = np.ones((2, 4), dtype=np.float32).tobytes()
    with pytest.raises(IndexBuildError, match="line 2.*duplicate"):
        build_index(io.StringIO(lines), blob, 4)


def test_duplicate_embedding_row_rejected():
    lines = "\n".join([
        manifest_line("img_x", 4, 4, mask_id=0, grid=rect_grid(4, 4, 0, 0, 2, 2), embedding_row=0),
        manifest_line("img_y", 4, 4, mask_id=0, grid=rect_grid(4, 4, 1, 1, 2, 2), embedding_row=0),
    ])
    blob = np.ones((2, 4), dtype=np.float32).tobytes()
    with pytest.raises(IndexBuildError, match="line 2.*embedding_row 0"):
        build_index(io.StringIO(lines), blob, 4)


def test_non_contiguous_rows_rejected():
    lines = "\n".join([
        manifest_line("img_x", 4, 4, mask_id=0, grid=rect_grid(4, 4, 0, 0, 2, 2), embedding_row=0),
        manifest_line("img_y", 4, 4, mask_id=0, grid=rect_grid(4, 4, 1, 1, 2, 2), embedding_row=2),
    ])
    blob = np.ones((2, 4), dtype=np.float32).tobytes()
    with pytest.raises(IndexBuildError, match="cover 0..1"):
        build_index(io.StringIO(lines), blob, 4)


def test_zero_norm_embedding_names_line():
    lines = "\n".join([
        manifest_line("img_x", 4, 4, mask_id=0, grid=rect_grid(4, 4, 0, 0, 2, 2), embedding_row=0),
        manifest_line("img_y", 4, 4, mask_id=0, grid=rect_grid(4, 4, 1, 1, 2, 2), embedding_row=1),
    ])
    blob = np.vstack([np.ones((1, 4)), np.zeros((1, 4))]).astype(np.float32).tobytes()
    with pytest.raises(IndexBuildError, match="line 2.*zero-norm"):
        build_index(io.StringIO(lines), blob, 4)


def test_empty_mask_rejected_at_build():
    grid = np.zeros((4, 4), dtype=bool)
    obj = json.loads(manifest_line("img_x", 4, 4, mask_id=0,
                                   grid=rect_grid(4, 4, 0, 0, 1, 1), embedding_row=0))
    obj["rle"] = {"size": [4, 4], "counts": [16]}
    obj["bbox"] = [0.0, 0.0, 1.0, 1.0]
    blob = np.ones((1, 4), dtype=np.float32).tobytes()
    with pytest.raises(IndexBuildError, match="empty foreground"):
        build_index(io.StringIO(json.dumps(obj)), blob, 4)
    assert not grid.any()


def test_mask_size_mismatch_rejected():
    line = manifest_line("img_x", 8, 8, mask_id=0, grid=rect_grid(4, 4, 0, 0, 2, 2),
                         embedding_row=0)
    blob = np.ones((1, 4), dtype=np.float32).tobytes()
    with pytest.raises(IndexBuildError, match="differs from image"):
        build_index(io.StringIO(line), blob, 4)


def test_zero_region_image_via_declaration_line():
    lines = "\n".join([
        manifest_line("empty_img", 4, 4, uri="mock://empty"),
        manifest_line("img_x", 4, 4, mask_id=0, grid=rect_grid(4, 4, 0, 0, 2, 2), embedding_row=0),
    ])
    blob = np.ones((1, 4), dtype=np.float32).tobytes()
    index = build_index(io.StringIO(lines), blob, 4)
    stats = index_stats(index)
    assert stats.image_count == 2
    assert stats.total_regions == 1
    assert stats.min_regions == 0
    assert index.entry("empty_img").regions == ()


def test_empty_gallery():
    index = build_index(io.StringIO(""), b"", 4)
    stats = index_stats(index)
    assert stats.image_count == 0 and stats.total_regions == 0
    assert stats.min_regions == 0 and stats.max_regions == 0


def test_stats_tiny_fixture(tiny_index):
    stats = index_stats(tiny_index)
    assert stats.image_count == 2
    assert stats.total_regions == 4
    assert stats.mean_regions == 2.0
    assert stats.min_regions == stats.max_regions == 2


def test_index_immutable(tiny_index):
    with pytest.raises(ValueError):
        tiny_index.embeddings[0, 0] = 5.0


# -- persistence ----------------------------------------------------------------

def test_save_load_roundtrip(tiny_index, tmp_path):
    path = tmp_path / "gallery.idx"
    save_index(tiny_index, path)
    loaded = load_index(path)
    assert loaded == tiny_index
    assert loaded.version == FORMAT_VERSION
    assert np.array_equal(loaded.embeddings.view(np.uint32),
                          tiny_index.embeddings.view(np.uint32))
    a = index_stats(loaded)
    b = index_stats(tiny_index)
    assert a == b


def test_load_truncated_file(tiny_index, tmp_path):
    path = tmp_path / "gallery.idx"
    save_index(tiny_index, path)
    data = path.read_bytes()
    path.write_bytes(data[:-4])
    with pytest.raises(IndexFormatError, match="truncated"):
        load_index(path)


def test_load_bad_magic(tiny_index, tmp_path):
    path = tmp_path / "gallery.idx"
    save_index(tiny_index, path)
    data = bytearray(path.read_bytes())
    data[:8] = b"NOTANIDX"
    path.write_bytes(bytes(data))
    with pytest.raises(IndexFormatError, match="magic"):
        load_index(path)


def test_load_unsupported_version(tiny_index, tmp_path):
    path = tmp_path / "gallery.idx"
    save_index(tiny_index, path)
    data = bytearray(path.read_bytes())
    data[8:12] = (99).to_bytes(4, "little")
    path.write_bytes(bytes(data))
    with pytest.raises(IndexFormatError, match="version 99"):
        load_index(path)


def test_file_starts_with_magic(tiny_index, tmp_path):
    path = tmp_path / "gallery.idx"
    save_index(tiny_index, path)
    assert path.read_bytes()[:8] == b"MATIRIDX"


# -- assemble_index ----------------------------------------------------------------

def test_assemble_matches_build():
    manifest, blob, dim = tiny_gallery_files()
    built = build_index(io.StringIO(manifest), blob, dim)
    rows = np.frombuffer(blob, dtype="<f4").reshape(4, dim)
    images = [
        ("img_a", 4, 4, "mock://img_a", [(0, built.entry("img_a").regions[0].mask),
                                         (1, built.entry("img_a").regions[1].mask)]),
        ("img_b", 4, 4, "mock://img_b", [(0, built.entry("img_b").regions[0].mask),
                                         (1, built.entry("img_b").regions[1].mask)]),
    ]
    assembled = assemble_index(images, rows, dim)
    assert assembled == built


def test_gallery_index_rejects_non_unit_rows():
    mask = grid_mask(rect_grid(4, 4, 0, 0, 2, 2))
    from matir.core import ImageEntry, RegionRecord, bbox_from_mask
    entry = ImageEntry("img", 4, 4, (RegionRecord(0, mask, bbox_from_mask(mask), 0),))
    with pytest.raises(Exception, match="unit-norm"):
        GalleryIndex(4, [entry], np.full((1, 4), 0.9, dtype=np.float32))
