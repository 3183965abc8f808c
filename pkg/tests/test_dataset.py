import hashlib
import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fsodm.dataset import (
    DEFAULT_SPLIT,
    BoxAnnotation,
    CapacityError,
    ClassSplit,
    GenerationConfig,
    ImageSample,
    ManifestError,
    build_episode,
    crop_patches,
    generate_shapeworld,
    load_manifest,
    make_support_mask,
    render_image,
    resize_sample,
    select_k_shot,
    split_base_novel,
    support_groups,
)


@pytest.fixture(scope="module")
def world(tmp_path_factory):
    out = tmp_path_factory.mktemp("world")
    return generate_shapeworld(GenerationConfig(num_images=160, seed=5), out)


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


class TestGeneration:
    def test_empty_config(self, tmp_path):
        m = generate_shapeworld(GenerationConfig(num_images=0, seed=1), tmp_path)
        assert m.records == []
        assert len(m.categories) == 11
        assert load_manifest(tmp_path).categories == m.categories

    def test_same_seed_same_bytes(self, tmp_path):
        a = generate_shapeworld(GenerationConfig(num_images=12, seed=3), tmp_path / "a")
        b = generate_shapeworld(GenerationConfig(num_images=12, seed=3), tmp_path / "b")
        assert digest(tmp_path / "a" / "manifest.jsonl") == digest(tmp_path / "b" / "manifest.jsonl")
        for ra, rb in zip(a.records, b.records):
            assert digest(tmp_path / "a" / ra.path) == digest(tmp_path / "b" / rb.path)

    def test_threaded_generation_is_identical(self, tmp_path):
        generate_shapeworld(GenerationConfig(num_images=10, seed=4), tmp_path / "a", threads=1)
        generate_shapeworld(GenerationConfig(num_images=10, seed=4), tmp_path / "b", threads=3)
        assert digest(tmp_path / "a" / "manifest.jsonl") == digest(tmp_path / "b" / "manifest.jsonl")

    def test_object_count_matches_rerun(self, tmp_path):
        cfg = GenerationConfig(num_images=100, seed=7, objects_per_image_range=(1, 4))
        m = generate_shapeworld(cfg, tmp_path)
        # replay each image's stream independently, in reverse order
        rerun = sum(len(render_image(cfg, i)[1]) for i in reversed(range(100)))
        assert sum(len(r.boxes) for r in m.records) == rerun
        # the object-count draw follows the background draws in the stream
        for i, r in enumerate(m.records):
            rng = np.random.default_rng([7, i])
            rng.uniform(0.15, 0.85)
            rng.uniform(-0.06, 0.06, size=3)
            rng.uniform(-0.1, 0.1, size=2)
            assert 1 <= len(r.boxes) <= int(rng.integers(1, 5))

    def test_boxes_are_tight_and_inside(self, world):
        for r in world.records[:40]:
            img = world.load_image(r)
            for b in r.boxes:
                assert 0 < b.x0 < b.x1 < 128 and 0 < b.y0 < b.y1 < 128
                assert b.w >= 6 and b.h >= 3
            assert img.shape == (3, 128, 128)
            assert 0 <= img.min() and img.max() <= 1

    def test_all_categories_occur(self, world):
        seen = {b.category_id for r in world.records for b in r.boxes}
        assert seen == set(range(11))

    def test_rejects_bad_size(self, tmp_path):
        with pytest.raises(ValueError):
            generate_shapeworld(GenerationConfig(num_images=1, image_size=100), tmp_path)


class TestManifest:
    def test_roundtrip(self, world):
        again = load_manifest(world.root / "manifest.jsonl")
        assert again.records == world.records
        assert again.seed == world.seed

    def test_header_layout(self, world):
        import json

        header = json.loads((world.root / "manifest.jsonl").read_text().splitlines()[0])
        assert header["version"] == 1
        assert header["categories"][0] == {"id": 0, "name": "circle"}
        first = json.loads((world.root / "manifest.jsonl").read_text().splitlines()[1])
        assert set(first) == {"id", "path", "width", "height", "boxes"}
        assert set(first["boxes"][0]) == {"cx", "cy", "w", "h", "cat"}

    def test_unknown_category_rejected(self, tmp_path):
        (tmp_path / "manifest.jsonl").write_text(
            '{"version":1,"seed":0,"config":{},"categories":[{"id":0,"name":"a"}]}\n'
            '{"id":"0","path":"x.png","width":32,"height":32,"boxes":[{"cx":5,"cy":5,"w":2,"h":2,"cat":3}]}\n'
        )
        with pytest.raises(ManifestError, match="unknown category"):
            load_manifest(tmp_path)

    def test_wrong_version_rejected(self, tmp_path):
        (tmp_path / "manifest.jsonl").write_text('{"version":9,"seed":0,"config":{},"categories":[]}\n')
        with pytest.raises(ManifestError):
            load_manifest(tmp_path)


def pixel_scan_union(size, boxes):
    count = 0
    for y in range(size):
        for x in range(size):
            px, py = x + 0.5, y + 0.5
            if any(b.x0 <= px < b.x1 and b.y0 <= py < b.y1 for b in boxes):
                count += 1
    return count


class TestSupportMask:
    def test_full_image_box(self):
        m = make_support_mask(32, [BoxAnnotation(16, 16, 32, 32, 2)], 2)
        assert m.shape == (1, 32, 32) and m.min() == 1

    def test_absent_category_warns(self, caplog):
        with caplog.at_level(logging.WARNING):
            m = make_support_mask(32, [BoxAnnotation(16, 16, 8, 8, 1)], 2)
        assert not m.any()
        assert "absent" in caplog.text

    def test_other_categories_left_out(self):
        m = make_support_mask(32, [BoxAnnotation(8, 8, 4, 4, 1), BoxAnnotation(20, 20, 6, 6, 2)], 2)
        assert m.sum() == 36

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10**6))
    def test_union_area_matches_pixel_scan(self, seed):
        rng = np.random.default_rng(seed)
        boxes = []
        for _ in range(2):
            w, h = rng.uniform(2, 20, size=2)
            boxes.append(BoxAnnotation(rng.uniform(w / 2, 32 - w / 2), rng.uniform(h / 2, 32 - h / 2), w, h, 0))
        m = make_support_mask(32, boxes, 0)
        assert m.sum() == pixel_scan_union(32, boxes)
        assert set(np.unique(m)) <= {0.0, 1.0}


def raster_fraction(box, x, y, patch, res=4):
    """Fraction of a box's area inside a patch by sub-pixel sampling."""
    xs = box.x0 + (np.arange(int(box.w * res)) + 0.5) / res
    ys = box.y0 + (np.arange(int(box.h * res)) + 0.5) / res
    fx = np.mean((xs >= x) & (xs < x + patch))
    fy = np.mean((ys >= y) & (ys < y + patch))
    return fx * fy


class TestCropPatches:
    def sample(self, boxes, size=128):
        return ImageSample(np.zeros((3, size, size), np.float32), boxes, "s")

    def test_inside_object_kept_translated(self):
        patches = crop_patches(self.sample([BoxAnnotation(20, 20, 10, 10, 3)]), 64, 64)
        first = patches[0]
        assert first.annotations == [BoxAnnotation(20, 20, 10, 10, 3)]
        assert first.image.shape == (3, 64, 64)

    def test_half_in_object_dropped(self):
        patches = crop_patches(self.sample([BoxAnnotation(64, 20, 20, 10, 3)]), 64, 64)
        assert patches[0].annotations == [] and patches[1].annotations == []

    def test_window_covers_trailing_edge(self):
        patches = crop_patches(self.sample([], size=96), 64, 48)
        assert len(patches) == 4
        assert patches[-1].id.endswith("@32,32")

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10**6))
    def test_keep_decisions_match_raster_oracle(self, seed):
        rng = np.random.default_rng(seed)
        boxes = []
        for _ in range(4):
            w, h = (rng.integers(4, 30, size=2)).astype(float)
            boxes.append(BoxAnnotation(float(rng.integers(w // 2 + 1, 128 - w // 2 - 1)) + w % 2 / 2, float(rng.integers(h // 2 + 1, 128 - h // 2 - 1)) + h % 2 / 2, w, h, 0))
        for p in crop_patches(self.sample(boxes), 64, 32):
            x, y = (int(v) for v in p.id.split("@")[1].split(","))
            expected = sum(1 for b in boxes if raster_fraction(b, x, y, 64) >= 0.7)
            assert len(p.annotations) == expected

    def test_bad_arguments(self):
        with pytest.raises(ValueError):
            crop_patches(self.sample([]), 256, 32)
        with pytest.raises(ValueError):
            crop_patches(self.sample([]), 64, 32, min_overlap=0)


class TestSplits:
    def test_base_pool_has_no_novel_objects(self, world):
        pools = split_base_novel(world, DEFAULT_SPLIT)
        novel = set(DEFAULT_SPLIT.novel_ids)
        assert all(not (r.categories() & novel) for r in pools.base_pool)

    def test_support_pool_has_exact_k(self, world):
        pools = split_base_novel(world, ClassSplit(tuple(range(8)), (8, 9, 10), k_shot=3))
        for c in (8, 9, 10):
            assert sum(1 for r in pools.novel_support_pool for b in r.boxes if b.category_id == c) == 3

    def test_eval_pool_disjoint(self, world):
        pools = split_base_novel(world, DEFAULT_SPLIT)
        ids = {r.id for r in pools.novel_eval_pool}
        assert not ids & {r.id for r in pools.novel_support_pool}
        assert not ids & {r.id for r in pools.base_pool}

    def test_zero_shot_rejected(self, world):
        with pytest.raises(CapacityError):
            split_base_novel(world, ClassSplit(tuple(range(8)), (8, 9, 10), k_shot=0))

    def test_too_many_shots_names_category(self, world):
        with pytest.raises(CapacityError, match="category"):
            split_base_novel(world, ClassSplit(tuple(range(8)), (8, 9, 10), k_shot=9999))

    def test_overlapping_split_rejected(self, world):
        with pytest.raises(ValueError):
            split_base_novel(world, ClassSplit((0, 1, 2, 3, 4, 5, 6, 7, 8), (8, 9, 10)))

    def test_select_k_shot_moves_surplus_to_ignore(self, world):
        rng = np.random.default_rng(0)
        chosen = select_k_shot(world.records, [9], 2, rng)
        assert sum(1 for r in chosen for b in r.boxes if b.category_id == 9) == 2
        for r in chosen:
            assert all(b.category_id == 9 for b in r.ignore)

    def test_select_k_shot_quota_overrides_k(self, world):
        chosen = select_k_shot(world.records, [0, 1, 2], 3, np.random.default_rng(0), quota={0: 1, 1: 0})
        counts = {c: sum(1 for r in chosen for b in r.boxes if b.category_id == c) for c in (0, 1, 2)}
        # categories outside the targets keep their boxes, so only check the targets
        assert counts[0] == 1 and counts[2] == 3
        assert all(b.category_id != 1 for r in chosen for b in r.boxes)

    def test_select_k_shot_over_capacity(self, world):
        with pytest.raises(CapacityError, match="requested"):
            select_k_shot(world.records, [9], 10_000, np.random.default_rng(0))


class TestEpisodes:
    def test_one_support_per_category_in_order(self, world):
        pools = split_base_novel(world, DEFAULT_SPLIT)
        groups = support_groups(pools.base_pool, DEFAULT_SPLIT.base_ids)
        query = world.sample(pools.base_pool[0])
        ep = build_episode(query, groups, world, np.random.default_rng(1), exclude_ids={query.id})
        assert ep.category_ids == list(DEFAULT_SPLIT.base_ids)
        for s in ep.supports:
            assert s.image.shape == (3, 128, 128) and s.mask.shape == (1, 128, 128)
            assert s.mask.any()
            assert s.source_id != query.id

    def test_resize_scales_boxes(self, world):
        s = world.sample(world.records[0])
        r = resize_sample(s, 64)
        assert r.image.shape == (3, 64, 64)
        for a, b in zip(s.annotations, r.annotations):
            assert b.cx == a.cx / 2 and b.w == a.w / 2
