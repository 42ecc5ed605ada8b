"""Acceptance suite: every release criterion at its stated tolerance.

Each test prints one PASS/FAIL line (run with -s to see them live). The
performance-floor test builds a 10,000-image x 30-region x 768-dim index
(~1 GB) in memory; it runs last and needs roughly 2.5 GB of RAM.
"""

import io
import json
import math
import time
from contextlib import contextmanager

import numpy as np
import requests

from matir.core import BoundingBox, bbox_from_mask, bbox_iou, mask_iou, rle_encode
from matir.index import assemble_index, build_index, load_index, save_index
from matir.metrics import average_precision_at_k, map_at_50, map_at_50_50
from matir.mocks import (EmptyGrounder, FailureSpec, build_planted_gallery, make_backends,
                         make_perfect_backends, perfect_mock_spec, serve_mocks)
from matir.pipeline import MODE_FULL, run_pipeline
from matir.rerank import LogitPair, relevance_from_logits
from matir.search import QueryEmbedding, SearchParams, ensemble_query, search
from matir.service import RetrievalService, ServiceConfig, make_server
from matir.evaluation import run_evaluation

from helpers import (average_precision_oracle, bbox_iou_pixel_oracle, bbox_scan_oracle,
                     brute_force_ranking, grid_mask, random_mask)


@contextmanager
def criterion(name):
    try:
        yield
    except BaseException:
        print(f"ACCEPTANCE {name}: FAIL")
        raise
    print(f"ACCEPTANCE {name}: PASS")


def normalized_query(rng, dim):
    vec = rng.standard_normal(dim)
    return QueryEmbedding(vector=(vec / np.linalg.norm(vec)).astype(np.float32))


# -- stage-1 search oracle ----------------------------------------------------------

def test_stage1_search_matches_brute_force_oracle():
    shared_mask = grid_mask(np.pad(np.ones((2, 2), dtype=bool), ((1, 1), (1, 1))))

    def fast_gallery(rng, dim):
        n_images = int(rng.integers(1, 21))
        images, rows = [], []
        for i in range(n_images):
            image_id = f"g{i:03d}"
            if rng.random() < 0.1:
                images.append((image_id, 4, 4, None, []))
                continue
            n_regions = int(rng.integers(1, 21))
            regions = [(j, shared_mask) for j in range(n_regions)]
            for _ in range(n_regions):
                if rows and rng.random() < 0.15:
                    rows.append(np.array(rows[int(rng.integers(0, len(rows)))]))
                else:
                    rows.append(rng.standard_normal(dim))
            images.append((image_id, 4, 4, None, regions))
        return assemble_index(images, np.asarray(rows, dtype=np.float32).reshape(-1, dim), dim)

    with criterion("stage1-search-oracle"):
        rng = np.random.default_rng(2024)
        dims = (4, 64, 768)
        worst = 0.0
        started = time.perf_counter()
        for trial in range(1000):
            dim = dims[trial % 3]
            index = fast_gallery(rng, dim)
            q = normalized_query(rng, dim)
            n_c = int(rng.integers(1, 25))
            expected = brute_force_ranking(index, q.vector, n_c)
            got = search(q, index, SearchParams(n_c=n_c, n_k=min(n_c, 1)))
            assert [r.image_id for r in got] == [e[0] for e in expected]
            assert [r.best_region for r in got] == [e[2] for e in expected]
            for r, e in zip(got, expected):
                worst = max(worst, abs(r.stage1_score - e[1]))
            assert worst <= 1e-6
        elapsed = time.perf_counter() - started
        assert elapsed < 60.0, f"oracle run took {elapsed:.1f}s"
        print(f"  1000 galleries, max |score delta| {worst:.2e}, {elapsed:.1f}s", end=" ")


# -- relevance softmax properties -----------------------------------------------------

def test_relevance_softmax_properties():
    with criterion("relevance-softmax"):
        rng = np.random.default_rng(7)
        worst = 0.0
        for _ in range(100_000):
            a, b = rng.uniform(-30, 30, size=2)
            direct = math.exp(a) / (math.exp(a) + math.exp(b))
            worst = max(worst, abs(relevance_from_logits(LogitPair(a, b)) - direct))
        assert worst <= 1e-12, f"max softmax deviation {worst:.2e}"

        diffs = np.concatenate([
            np.linspace(-1e4, 1e4, 20_001),
            rng.uniform(-1e4, 1e4, 10_000),
        ])
        diffs.sort()
        values = [relevance_from_logits(LogitPair(float(d), 0.0)) for d in diffs]
        assert all(math.isfinite(v) for v in values)
        assert all(v2 >= v1 for v1, v2 in zip(values, values[1:])), "not monotone"
        assert values[0] >= 0.0 and values[-1] <= 1.0
        print(f"  softmax delta {worst:.1e}, monotone over {len(diffs)} gaps", end=" ")


# -- metric oracle ---------------------------------------------------------------------

def test_metric_oracle():
    with criterion("metric-oracle"):
        rng = np.random.default_rng(99)
        worst = 0.0
        for _ in range(10_000):
            k = int(rng.integers(1, 80))
            hits = (rng.random(int(rng.integers(0, 90))) < 0.3).tolist()
            total = int(rng.integers(1, 40))
            got = average_precision_at_k(hits, total, k)
            ref = average_precision_oracle(hits, total, k)
            worst = max(worst, abs(got - ref))
        assert worst <= 1e-9, f"max AP deviation {worst:.2e}"

        # Degeneracy: predicted masks equal to GT masks collapse the metrics.
        from matir.metrics import GroundTruth
        for _ in range(200):
            n_rel = int(rng.integers(1, 6))
            relevant, ranking = {}, []
            for i in range(n_rel):
                mask = rle_encode(random_mask(rng, 6, 6))
                relevant[f"i{i}"] = (mask,)
                ranking.append((f"i{i}", mask))
            for i in range(int(rng.integers(0, 6))):
                ranking.append((f"n{i}", None))
            ranking = [ranking[int(j)] for j in rng.permutation(len(ranking))]
            gts = [GroundTruth("q", "t", relevant)]
            assert map_at_50_50({"q": ranking}, gts) == map_at_50(
                {"q": [i for i, _ in ranking]}, gts)

        # Closed threshold: IoU exactly 0.5 counts as a hit.
        gt_mask = grid_mask(np.pad(np.ones((4, 4), dtype=bool), ((0, 4), (0, 4))))
        half = grid_mask(np.pad(np.ones((8, 4), dtype=bool), ((0, 0), (0, 4))))
        assert mask_iou(half, gt_mask) == 0.5
        gts = [GroundTruth("q", "t", {"a": (gt_mask,)})]
        assert map_at_50_50({"q": [("a", half)]}, gts) == 1.0

        # Order: object-level never beats image-level on the same ranking.
        for _ in range(1000):
            n_rel = int(rng.integers(1, 6))
            relevant = {f"i{i}": (rle_encode(random_mask(rng, 6, 6)),) for i in range(n_rel)}
            pool = list(relevant) + [f"n{i}" for i in range(int(rng.integers(0, 6)))]
            ranking = [(str(pid), rle_encode(random_mask(rng, 6, 6))
                        if rng.random() < 0.7 else None)
                       for pid in rng.permutation(pool)]
            gts = [GroundTruth("q", "t", relevant)]
            m50 = map_at_50({"q": [i for i, _ in ranking]}, gts)
            m5050 = map_at_50_50({"q": ranking}, gts)
            assert m5050 <= m50 + 1e-12
        print(f"  AP delta {worst:.1e}", end=" ")


# -- geometry oracles ---------------------------------------------------------------------

def test_geometry_oracles():
    with criterion("geometry-oracles"):
        rng = np.random.default_rng(4)
        worst = 0.0
        for _ in range(10_000):
            ax, ay, bx, by = (int(v) for v in rng.integers(0, 64, size=4))
            aw, ah, bw, bh = (int(v) for v in rng.integers(0, 24, size=4))
            a = BoundingBox(ax, ay, aw, ah)
            b = BoundingBox(bx, by, bw, bh)
            ref = bbox_iou_pixel_oracle((ax, ay, aw, ah), (bx, by, bw, bh), canvas=96)
            worst = max(worst, abs(bbox_iou(a, b) - ref))
        assert worst <= 1e-9, f"max bbox IoU deviation {worst:.2e}"

        for _ in range(1000):
            h, w = (int(v) for v in rng.integers(1, 65, size=2))
            grid_a = random_mask(rng, h, w, p=float(rng.uniform(0.05, 0.8)))
            grid_b = random_mask(rng, h, w, p=float(rng.uniform(0.05, 0.8)))
            mask_a, mask_b = rle_encode(grid_a), rle_encode(grid_b)
            inter = int(np.count_nonzero(grid_a & grid_b))
            union = int(np.count_nonzero(grid_a | grid_b))
            assert mask_iou(mask_a, mask_b) == (inter / union if union else 0.0)
            box = bbox_from_mask(mask_a)
            assert (box.x, box.y, box.w, box.h) == bbox_scan_oracle(grid_a)
        print(f"  bbox IoU delta {worst:.1e}", end=" ")


# -- end-to-end planted -----------------------------------------------------------------

def test_end_to_end_planted_gallery():
    with criterion("end-to-end-planted"):
        index, gts = build_planted_gallery(n_images=50, n_queries=10, dimension=64, seed=42)
        embedder, scorer, grounder = make_perfect_backends(gts, index)
        report, _ = run_evaluation(index, gts, embedder, scorer=scorer, grounder=grounder,
                                   mode=MODE_FULL)
        assert report.map50 == 1.0
        assert report.map50_50 == 1.0
        for gt in gts:
            query = ensemble_query(embedder.embed([gt.text]))
            result = run_pipeline(index, query, MODE_FULL, query_text=gt.text,
                                  scorer=scorer, grounder=grounder)
            by_id = {g.image_id: g for g in result.grounded}
            for image_id in gt.relevant:
                assert by_id[image_id].source == "grounder-matched"
                assert by_id[image_id].matched_iou == 1.0

        # Grounder forced empty: image metric unchanged, all masks fall back.
        report2, _ = run_evaluation(index, gts, embedder, scorer=scorer,
                                    grounder=EmptyGrounder(), mode=MODE_FULL)
        assert report2.map50 == 1.0
        for gt in gts:
            query = ensemble_query(embedder.embed([gt.text]))
            result = run_pipeline(index, query, MODE_FULL, query_text=gt.text,
                                  scorer=scorer, grounder=EmptyGrounder())
            assert all(g.source == "stage1-fallback" for g in result.grounded)
        print(f"  mAP@50={report.map50} mAP@50@50={report.map50_50}, "
              f"empty-grounder mAP@50={report2.map50}", end=" ")


# -- service determinism -----------------------------------------------------------------

def test_service_determinism_across_runs_and_concurrency():
    with criterion("service-determinism"):
        index, gts = build_planted_gallery(n_images=30, n_queries=5, dimension=32, seed=13)
        mocks = serve_mocks(perfect_mock_spec(gts, index, seed=13), port=0)
        bodies = set()
        try:
            for max_in_flight in (1, 8):
                config = ServiceConfig(
                    text_embedder_url=mocks.url, scorer_url=mocks.url,
                    grounder_url=mocks.url, n_c=30, n_k=15,
                    max_in_flight=max_in_flight, call_timeout_s=10.0, retries=2)
                service = RetrievalService(config, index=index)
                server = make_server(service, host="127.0.0.1", port=0)
                server.start()
                try:
                    for _ in range(10):
                        resp = requests.post(
                            server.url + "/v1/search",
                            json={"query_text": gts[0].text, "mode": "full"}, timeout=10)
                        assert resp.status_code == 200
                        bodies.add(resp.content)
                finally:
                    server.stop()
                    service.close()
        finally:
            mocks.stop()
        assert len(bodies) == 1, f"{len(bodies)} distinct response bodies"
        print("  20 runs x {1,8} in-flight -> 1 distinct body", end=" ")


# -- index roundtrip ---------------------------------------------------------------------

def test_index_roundtrip_and_search_equivalence(tmp_path):
    with criterion("index-roundtrip"):
        rng = np.random.default_rng(31)
        index, _ = build_planted_gallery(n_images=40, n_queries=8, dimension=64, seed=31)
        path = tmp_path / "roundtrip.idx"
        save_index(index, path)
        loaded = load_index(path)
        assert loaded == index  # bit-exact embeddings, field-for-field metadata
        assert np.array_equal(loaded.embeddings.view(np.uint32),
                              index.embeddings.view(np.uint32))
        params = SearchParams(n_c=40, n_k=20)
        for _ in range(100):
            q = normalized_query(rng, 64)
            a = search(q, index, params)
            b = search(q, loaded, params)
            assert [(r.image_id, r.stage1_score, r.best_region) for r in a] == \
                   [(r.image_id, r.stage1_score, r.best_region) for r in b]
        print("  bit-exact fields, 100 query equivalence", end=" ")


# -- failure injection ---------------------------------------------------------------------

def test_failure_injection_scorer_down_and_latency(caplog):
    with criterion("failure-injection"):
        index, gts = build_planted_gallery(n_images=12, n_queries=3, dimension=16, seed=3)

        spec = perfect_mock_spec(gts, index, failures={"score": FailureSpec(error_rate=1.0)})
        mocks = serve_mocks(spec, port=0)
        try:
            config = ServiceConfig(text_embedder_url=mocks.url, scorer_url=mocks.url,
                                   grounder_url=mocks.url, n_c=12, n_k=6,
                                   call_timeout_s=5.0, retries=1, outage_policy="degrade")
            service = RetrievalService(config, index=index)
            status, body = service.handle_search({"query_text": gts[0].text, "mode": "full"})
            service.close()
            assert status == 200
            scores = [r["stage1_score"] for r in body["results"]]
            assert scores == sorted(scores, reverse=True)  # stage-1 order preserved
            assert all(r["relevance"] == 0.0 for r in body["results"])

            config_503 = ServiceConfig(text_embedder_url=mocks.url, scorer_url=mocks.url,
                                       grounder_url=mocks.url, n_c=12, n_k=6,
                                       call_timeout_s=5.0, retries=0, outage_policy="error")
            service_503 = RetrievalService(config_503, index=index)
            status_503, _ = service_503.handle_search(
                {"query_text": gts[0].text, "mode": "full"})
            service_503.close()
            assert status_503 == 503
        finally:
            mocks.stop()

        # Latency past the timeout: retries logged, then stage-1 fallback.
        slow_spec = perfect_mock_spec(gts, index,
                                      failures={"ground": FailureSpec(latency_s=0.5)})
        slow_mocks = serve_mocks(slow_spec, port=0)
        try:
            from matir.backends import CallPolicy, HttpGrounder
            embedder, scorer, _ = make_backends(perfect_mock_spec(gts, index))
            grounder = HttpGrounder(slow_mocks.url, timeout_s=0.1)
            query = ensemble_query(embedder.embed([gts[0].text]))
            with caplog.at_level("WARNING", logger="matir.backends"):
                result = run_pipeline(index, query, MODE_FULL, query_text=gts[0].text,
                                      scorer=scorer, grounder=grounder,
                                      policy=CallPolicy(timeout_s=0.1, retries=2),
                                      outage_policy="degrade")
        finally:
            slow_mocks.stop()
        assert all(g.source == "stage1-fallback" for g in result.grounded)
        retries = [r for r in caplog.records
                   if "grounder call" in r.message and "retrying" in r.message]
        assert len(retries) >= 2
        print(f"  degrade=200/stage1-order, error=503, {len(retries)} retries logged",
              end=" ")


# -- performance floor (runs last: allocates ~2.5 GB) ---------------------------------------

def test_performance_floor():
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        from contextlib import nullcontext as threadpool_limits

    n_images, regions_per_image, dim = 10_000, 30, 768
    total = n_images * regions_per_image

    with criterion("performance-floor"):
        grid = np.zeros((8, 8), dtype=bool)
        grid[1:3, 1:3] = True
        rle = json.dumps(rle_encode(grid).to_json())
        bbox = json.dumps(list(bbox_scan_oracle(grid)))
        lines = []
        row = 0
        for i in range(n_images):
            image_id = f"img{i:05d}"
            for j in range(regions_per_image):
                lines.append(
                    f'{{"image_id":"{image_id}","width":8,"height":8,"mask_id":{j},'
                    f'"bbox":{bbox},"rle":{rle},"embedding_row":{row}}}')
                row += 1
        manifest = io.StringIO("\n".join(lines))
        del lines
        rng = np.random.default_rng(1)
        blob = bytearray(total * dim * 4)
        chunk = 16_384
        for start in range(0, total, chunk):
            stop = min(start + chunk, total)
            blob[start * dim * 4: stop * dim * 4] = \
                rng.standard_normal((stop - start, dim), dtype=np.float32).tobytes()

        started = time.perf_counter()
        index = build_index(manifest, blob, dim)
        build_s = time.perf_counter() - started
        del manifest, blob
        assert index.total_regions == total

        q = normalized_query(np.random.default_rng(2), dim)
        params = SearchParams(n_c=100, n_k=50)

        def measure(workers, reps=5):
            times = []
            with threadpool_limits(limits=1):
                search(q, index, params, workers=workers)  # warm
                for _ in range(reps):
                    t0 = time.perf_counter()
                    result = search(q, index, params, workers=workers)
                    times.append(time.perf_counter() - t0)
                    assert len(result) == 100
            return sorted(times)[len(times) // 2]

        single = measure(1)
        threaded = measure(8)
        print(f"  build {build_s:.1f}s (<=30), single {single * 1000:.0f}ms (<=250), "
              f"8-worker {threaded * 1000:.0f}ms (<=60)", end=" ")
        assert build_s <= 30.0, f"index build took {build_s:.1f}s"
        assert single <= 0.250, f"single-threaded query took {single * 1000:.0f}ms"
        assert threaded <= 0.060, f"8-worker query took {threaded * 1000:.0f}ms"
