import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pseudogt.geometry import Box, iou_array
from pseudogt.synthworld import (
    CAM_CELLS,
    AbsentClassError,
    Dataset,
    SceneObject,
    SceneSpec,
    SyntheticImage,
    Unlabeled,
    Weak,
    WorldConfig,
    annotate,
    box_features,
    box_features_array,
    cam_mask,
    cam_to_grid,
    derive_seed,
    generate_dataset,
    generate_proposals,
    load_proposals,
    save_proposals,
    split_dataset,
)


def make_image(objects, grid=64, n_classes=5, noise=0.0, seed=3):
    objs = tuple(SceneObject(c, Box(*b), 0) for c, b in objects)
    return SyntheticImage(SceneSpec(grid, n_classes, objs, noise), 0, seed)


def mask_features(image, box):
    """Pixel-mask oracle for noiseless features of an integer-coordinate box."""
    x0, y0, x1, y1 = (int(v) for v in box)
    area = (x1 - x0) * (y1 - y0)
    C = image.spec.n_classes
    cov = [image.class_mask(c)[y0:y1, x0:x1].sum() / area for c in range(C)]
    comp = 0.0
    for o in image.spec.objects:
        m = np.zeros((image.grid, image.grid), dtype=bool)
        b = o.box
        m[int(b.y0):int(b.y1), int(b.x0):int(b.x1)] = True
        comp = max(comp, m[y0:y1, x0:x1].sum() / m.sum())
    return np.array(cov + [(x1 - x0) / image.grid, (y1 - y0) / image.grid, comp])


@pytest.fixture(scope="module")
def small_dataset():
    return generate_dataset(100, WorldConfig(), seed=11, n_test=10)


class TestGenerateDataset:
    def test_deterministic_serialization(self):
        a = generate_dataset(30, seed=5, n_test=5).dumps()
        b = generate_dataset(30, seed=5, n_test=5).dumps()
        assert a == b

    def test_seed_changes_output(self):
        assert generate_dataset(10, seed=1).dumps() != generate_dataset(10, seed=2).dumps()

    def test_class_balance(self, small_dataset):
        counts = np.zeros(5, dtype=int)
        for im in small_dataset.images:
            for c in im.classes:
                counts[c] += 1
        assert counts.min() >= 10

    def test_single_image(self):
        ds = generate_dataset(1, seed=0)
        assert len(ds.images) == 1
        assert 1 <= len(ds.images[0].spec.objects) <= 4

    def test_scene_invariants(self, small_dataset):
        for im in small_dataset.images + small_dataset.test_images:
            objs = im.spec.objects
            assert 1 <= len(objs) <= 4
            for o in objs:
                b = o.box
                assert 0 <= b.x0 and b.x1 <= 64 and 0 <= b.y0 and b.y1 <= 64
                assert min(b.width, b.height) >= 6

    def test_test_ids_disjoint(self, small_dataset):
        train = {im.image_id for im in small_dataset.images}
        test = {im.image_id for im in small_dataset.test_images}
        assert not train & test

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            generate_dataset(0)

    def test_json_round_trip(self, small_dataset, tmp_path):
        split = split_dataset(small_dataset, 0.2, seed=1)
        ds = annotate(small_dataset, split, "weak")
        path = tmp_path / "d.json"
        ds.save(path)
        back = Dataset.load(path)
        assert back.dumps() == ds.dumps()
        doc = json.loads(path.read_text())
        assert doc["grid"] == 64 and doc["classes"] == 5
        levels = {e["annotation"] for e in doc["images"]}
        assert levels == {"full", "weak"}


class TestProposals:
    def test_exact_count(self, small_dataset):
        assert len(generate_proposals(small_dataset.images[0], 300, seed=0)) == 300

    def test_deterministic(self, small_dataset):
        im = small_dataset.images[3]
        a = generate_proposals(im, 120, seed=4)
        b = generate_proposals(im, 120, seed=4)
        np.testing.assert_array_equal(a.boxes, b.boxes)

    def test_too_few(self, small_dataset):
        with pytest.raises(ValueError):
            generate_proposals(small_dataset.images[0], 49)

    def test_frozen_order(self, small_dataset):
        ps = generate_proposals(small_dataset.images[0], 60)
        with pytest.raises(ValueError):
            ps.boxes[0, 0] = 1.0

    def test_recall_1000_scenes(self):
        ds = generate_dataset(1000, seed=123)
        for im in ds.images:
            ps = generate_proposals(im, 300, seed=9)
            gt, _ = im.gt_arrays()
            assert (iou_array(gt, ps.boxes).max(axis=1) >= 0.5).all()
            assert ps.boxes.min() >= 0 and ps.boxes.max() <= 64
            assert ((ps.boxes[:, 2] > ps.boxes[:, 0]) & (ps.boxes[:, 3] > ps.boxes[:, 1])).all()

    def test_mostly_background(self, small_dataset):
        # the 70/30 mix keeps most proposals away from objects
        fracs = []
        for im in small_dataset.images[:30]:
            ps = generate_proposals(im, 300, seed=0)
            gt, _ = im.gt_arrays()
            fracs.append((iou_array(ps.boxes, gt).max(axis=1) >= 0.5).mean())
        assert 0.1 <= np.mean(fracs) <= 0.5

    def test_json_round_trip(self, small_dataset, tmp_path):
        sets = [generate_proposals(im, 50, seed=1) for im in small_dataset.images[:3]]
        save_proposals(sets, tmp_path / "p.json")
        back = load_proposals(tmp_path / "p.json")
        for a, b in zip(sets, back):
            assert a.image_id == b.image_id
            np.testing.assert_array_equal(a.boxes, b.boxes)


class TestFeatures:
    def test_dimension(self, small_dataset):
        assert box_features(small_dataset.images[0], Box(0, 0, 10, 10)).shape == (8,)

    def test_box_equals_lone_object(self):
        im = make_image([(2, (10, 10, 20, 30))])
        f = box_features(im, Box(10, 10, 20, 30), noise=False)
        np.testing.assert_allclose(f[:5], [0, 0, 1, 0, 0])
        assert f[7] == 1.0

    def test_background_box(self):
        im = make_image([(1, (40, 40, 60, 60))])
        f = box_features(im, Box(0, 0, 10, 10), noise=False)
        np.testing.assert_array_equal(f[:5], 0)
        assert f[7] == 0

    def test_half_object(self):
        im = make_image([(0, (10, 10, 30, 20))])
        f = box_features(im, Box(10, 10, 20, 20), noise=False)
        assert f[0] == 1.0
        assert f[7] == 0.5

    def test_mask_oracle(self, small_dataset):
        rng = np.random.default_rng(2)
        for im in small_dataset.images[:25]:
            clean = SyntheticImage(SceneSpec(64, 5, im.spec.objects, 0.0), im.image_id, im.rng_seed)
            for _ in range(20):
                x = np.sort(rng.choice(65, 2, replace=False))
                y = np.sort(rng.choice(65, 2, replace=False))
                box = np.array([x[0], y[0], x[1], y[1]], dtype=float)
                np.testing.assert_allclose(box_features_array(clean, box)[0],
                                           mask_features(clean, box), atol=1e-12)

    def test_noise_reproducible(self, small_dataset):
        im = small_dataset.images[0]
        b = np.array([[1.5, 2.0, 9.0, 12.25], [0, 0, 64, 64]])
        np.testing.assert_array_equal(box_features_array(im, b), box_features_array(im, b))
        # a box queried alone gets the same noise as inside a batch
        np.testing.assert_array_equal(box_features_array(im, b[1:])[0], box_features_array(im, b)[1])

    def test_noise_scale(self):
        im = make_image([(0, (10, 10, 30, 30))], noise=0.05)
        rng = np.random.default_rng(0)
        xy = rng.uniform(0, 30, size=(4000, 2))
        boxes = np.hstack([xy, xy + rng.uniform(2, 30, size=(4000, 2))])
        diff = box_features_array(im, boxes) - box_features_array(im, boxes, noise=False)
        assert abs(diff.std() - 0.05) < 0.003
        assert abs(diff.mean()) < 0.003

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31), st.integers(0, 2**31))
    def test_pure_function_of_seed_and_box(self, image_seed, box_seed):
        rng = np.random.default_rng(box_seed)
        xy = rng.uniform(0, 40, size=2)
        box = np.concatenate([xy, xy + rng.uniform(1, 20, size=2)])[None]
        a = make_image([(1, (5, 5, 25, 25))], noise=0.1, seed=image_seed)
        b = make_image([(1, (5, 5, 25, 25))], noise=0.1, seed=image_seed)
        np.testing.assert_array_equal(box_features_array(a, box), box_features_array(b, box))


class TestCam:
    def test_no_false_positives(self):
        im = make_image([(1, (8, 8, 20, 16))])
        cells = cam_mask(im, 1, fp_rate=0.0)
        expected = np.zeros((8, 8), dtype=bool)
        expected[1:2, 1:3] = True
        np.testing.assert_array_equal(cells, expected)

    def test_partial_cell_counts(self):
        im = make_image([(0, (7, 0, 9, 8))])
        cells = cam_mask(im, 0, fp_rate=0.0)
        assert cells[0, 0] and cells[0, 1] and cells.sum() == 2

    def test_full_image_object(self):
        im = make_image([(3, (0, 0, 64, 64))])
        assert cam_mask(im, 3, 0.0).all()

    def test_absent_class(self):
        im = make_image([(3, (0, 0, 10, 10))])
        with pytest.raises(AbsentClassError):
            cam_mask(im, 1)

    def test_deterministic(self, small_dataset):
        im = small_dataset.images[0]
        c = min(im.classes)
        np.testing.assert_array_equal(cam_mask(im, c, 0.3), cam_mask(im, c, 0.3))

    def test_spurious_rate_1000_images(self):
        ds = generate_dataset(1000, seed=77)
        spurious = free = 0
        for im in ds.images:
            c = min(im.classes)
            clean = cam_mask(im, c, 0.0)
            noisy = cam_mask(im, c, 0.1)
            spurious += (noisy & ~clean).sum()
            free += (~clean).sum()
        assert abs(spurious / free - 0.10) <= 0.02

    def test_upsample(self):
        cells = np.zeros((CAM_CELLS, CAM_CELLS), dtype=bool)
        cells[2, 5] = True
        grid = cam_to_grid(cells, 64)
        assert grid.shape == (64, 64)
        assert grid[16:24, 40:48].all() and grid.sum() == 64


class TestSplit:
    def test_sizes(self):
        ds = generate_dataset(1000, seed=0)
        sp = split_dataset(ds, 0.10, seed=1)
        assert len(sp.full_pool) == 100 and len(sp.weak_pool) == 900

    @pytest.mark.parametrize("fraction, n_full", [(1.0, 40), (0.0, 0), (0.05, 2), (0.125, 5)])
    def test_extremes(self, fraction, n_full):
        ds = generate_dataset(40, seed=0)
        sp = split_dataset(ds, fraction, seed=0)
        assert len(sp.full_pool) == n_full

    def test_disjoint_cover_deterministic(self, small_dataset):
        a = split_dataset(small_dataset, 0.3, seed=8)
        b = split_dataset(small_dataset, 0.3, seed=8)
        assert a == b
        assert not set(a.full_pool) & set(a.weak_pool)
        assert set(a.full_pool) | set(a.weak_pool) == {im.image_id for im in small_dataset.images}

    def test_rejects_bad_fraction(self, small_dataset):
        with pytest.raises(ValueError):
            split_dataset(small_dataset, 1.5)

    def test_annotate_levels(self, small_dataset):
        sp = split_dataset(small_dataset, 0.2, seed=0)
        weak = annotate(small_dataset, sp, "weak")
        none = annotate(small_dataset, sp, "none")
        i = sp.weak_pool[0]
        assert isinstance(weak.annotation(i), Weak)
        assert weak.weak_classes(i) == small_dataset.image(i).classes
        assert isinstance(none.annotation(i), Unlabeled)
        assert none.weak_classes(i) is None


def test_derive_seed_named_streams():
    assert derive_seed(0, "a") == derive_seed(0, "a")
    assert derive_seed(0, "a") != derive_seed(0, "b")
    assert derive_seed(0, "a") != derive_seed(1, "a")
    assert 0 <= derive_seed(5, "x", 3) < 2**63
