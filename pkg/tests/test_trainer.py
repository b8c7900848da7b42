import math

import numpy as np
import pytest

from pseudogt.detector import DetectorParams
from pseudogt.pseudo_gt import SamplerConfig
from pseudogt.synthworld import (
    CAM_CELLS,
    DatasetSplit,
    ProposalSet,
    annotate,
    generate_dataset,
    split_dataset,
)
from pseudogt.trainer import (
    ProposalBank,
    TrainConfig,
    TrainingError,
    cam_overlap,
    effective_ratio,
    filter_proposals_cam,
    infer_weak_labels,
    init_state,
    learning_rate,
    mixed_batch_sampler,
    train,
    train_step,
)


@pytest.fixture(scope="module")
def small():
    ds = generate_dataset(40, seed=3, n_test=20)
    split = split_dataset(ds, 0.25, seed=1)
    return annotate(ds, split), split


def tiny_config(**kw):
    base = dict(epochs=2, batch_size=4, n_proposals=60, seed=7)
    base.update(kw)
    return TrainConfig(**base)


class TestConfig:
    def test_defaults(self):
        c = TrainConfig()
        assert (c.batch_size, c.lr, c.momentum, c.weight_decay) == (8, 1e-2, 0.9, 5e-4)
        assert c.ratio == 0.7 and c.lr_decay_epochs == (5, 10)
        assert c.sampler == SamplerConfig()

    @pytest.mark.parametrize("kw", [{"epochs": 0}, {"ratio": 1.2}, {"batch_size": 0}])
    def test_rejects(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)


class TestLearningRate:
    def test_schedule(self):
        c = TrainConfig()
        lrs = [learning_rate(c, e) for e in range(1, 13)]
        assert lrs[:4] == [1e-2] * 4
        assert all(v == pytest.approx(1e-3) for v in lrs[4:9])
        assert all(v == pytest.approx(1e-4) for v in lrs[9:])

    def test_custom(self):
        c = TrainConfig(lr=0.5, lr_decay_epochs=(2,), lr_decay_factor=2.0)
        assert [learning_rate(c, e) for e in (1, 2, 3)] == [0.5, 0.25, 0.25]


class TestBatchSampler:
    SPLIT = DatasetSplit(tuple(range(10)), tuple(range(10, 100)), 0)

    def test_all_full(self):
        b = mixed_batch_sampler(self.SPLIT, 1.0, 64, np.random.default_rng(0))
        assert all(i < 10 for i in b) and len(b) == 64

    def test_all_weak(self):
        b = mixed_batch_sampler(self.SPLIT, 0.0, 64, np.random.default_rng(0))
        assert all(i >= 10 for i in b)

    def test_ratio_frequency(self):
        rng = np.random.default_rng(1)
        n_full = sum(i < 10 for _ in range(12_500)
                     for i in mixed_batch_sampler(self.SPLIT, 0.7, 8, rng))
        assert n_full / 100_000 == pytest.approx(0.7, abs=0.005)

    def test_unbalanced_follows_pool_sizes(self):
        rng = np.random.default_rng(2)
        n_full = sum(i < 10 for _ in range(5_000)
                     for i in mixed_batch_sampler(self.SPLIT, None, 8, rng))
        assert n_full / 40_000 == pytest.approx(0.1, abs=0.01)

    def test_empty_weak_forces_one(self):
        split = DatasetSplit((0, 1, 2), (), 0)
        warnings = []
        b = mixed_batch_sampler(split, 0.7, 16, np.random.default_rng(0), warnings)
        assert set(b) <= {0, 1, 2}
        assert len(warnings) == 1 and "forced" in warnings[0]

    def test_effective_ratio(self):
        r, msg = effective_ratio(0, 5, 0.7)
        assert r == 0.0 and "forced" in msg
        assert effective_ratio(3, 7, None) == (0.3, None)
        with pytest.raises(ValueError):
            effective_ratio(0, 0, 0.5)

    def test_deterministic(self):
        a = mixed_batch_sampler(self.SPLIT, 0.7, 8, np.random.default_rng(5))
        b = mixed_batch_sampler(self.SPLIT, 0.7, 8, np.random.default_rng(5))
        assert a == b


class TestCamFilter:
    def image(self, small):
        ds, split = small
        return ds.image(split.weak_pool[0])

    def test_overlap_fraction(self):
        cells = np.zeros((CAM_CELLS, CAM_CELLS), bool)
        cells[0, 0] = True  # covers [0, 8) x [0, 8)
        boxes = np.array([[0, 0, 8, 8], [0, 0, 16, 8], [8, 8, 16, 16], [4, 4, 12, 12]], float)
        np.testing.assert_allclose(cam_overlap(boxes, cells, 64), [1, 0.5, 0, 0.25])

    def test_rho_zero_keeps_all(self, small):
        im = self.image(small)
        ps = ProposalBank(small[0], 100)[im.image_id]
        out = filter_proposals_cam(ps, im, sorted(im.classes), rho=0.0)
        np.testing.assert_array_equal(out.boxes, ps.boxes)

    def test_box_inside_active_cells_kept(self, small):
        im = self.image(small)
        c = sorted(im.classes)[0]
        obj = next(o for o in im.spec.objects if o.class_id == c)
        boxes = np.array([obj.box.as_array(), [0, 0, 1, 1]], dtype=float)
        cams = {c: np.zeros((CAM_CELLS, CAM_CELLS), bool)}
        cams[c][:] = False
        b = obj.box
        cams[c][int(b.y0 // 8):int(math.ceil(b.y1 / 8)), int(b.x0 // 8):int(math.ceil(b.x1 / 8))] = True
        out = filter_proposals_cam(ProposalSet(im.image_id, boxes), im, [c], 0.5, cams=cams)
        assert len(out) >= 1
        np.testing.assert_array_equal(out.boxes[0], boxes[0])

    def test_order_preserved(self, small):
        im = self.image(small)
        ps = ProposalBank(small[0], 200)[im.image_id]
        out = filter_proposals_cam(ps, im, sorted(im.classes), rho=0.1)
        pos = [int(np.flatnonzero((ps.boxes == b).all(axis=1))[0]) for b in out.boxes]
        assert pos == sorted(pos) and 0 < len(out) <= len(ps)

    def test_empty_falls_back(self, small):
        im = self.image(small)
        boxes = np.array([[0, 0, 4, 4], [10, 10, 14, 14]], dtype=float)
        cams = {0: np.zeros((CAM_CELLS, CAM_CELLS), bool)}
        warnings = []
        out = filter_proposals_cam(ProposalSet(im.image_id, boxes), im, [0], 0.1,
                                   cams=cams, warnings=warnings)
        np.testing.assert_array_equal(out.boxes, boxes)
        assert len(warnings) == 1


@pytest.fixture(scope="module")
def unlabeled():
    ds = generate_dataset(1000, seed=11)
    split = split_dataset(ds, 0.0, seed=0)
    return annotate(ds, split, weak_level="none")


class TestInferWeakLabels:
    def test_perfect_classifier(self, unlabeled):
        out = infer_weak_labels(unlabeled, fp_rate=0.0, miss_rate=0.0, seed=2)
        for im in unlabeled.images[:200]:
            assert out.weak_classes(im.image_id) == im.classes

    def test_all_missed(self, unlabeled):
        out = infer_weak_labels(unlabeled, fp_rate=0.0, miss_rate=1.0, seed=2)
        assert all(out.weak_classes(im.image_id) == frozenset() for im in unlabeled.images[:50])

    def test_empty_labels_skipped_in_training(self):
        sub = generate_dataset(12, seed=1, n_test=4)
        split = split_dataset(sub, 0.5, seed=0)
        ds = annotate(sub, split, weak_level="none")
        ds = infer_weak_labels(ds, fp_rate=0.0, miss_rate=1.0)
        state, eff = init_state(tiny_config(), ds, split, warnings=(w := []))
        assert eff.weak_pool == () and any("empty label" in m for m in w)

    def test_precision_recall(self, unlabeled):
        fp, miss = 0.1, 0.05
        out = infer_weak_labels(unlabeled, fp_rate=fp, miss_rate=miss, seed=4)
        tp = fpos = n_present = n_absent = 0
        for im in unlabeled.images:
            pred = out.weak_classes(im.image_id)
            tp += len(pred & im.classes)
            fpos += len(pred - im.classes)
            n_present += len(im.classes)
            n_absent += unlabeled.n_classes - len(im.classes)
        exp_tp, exp_fp = (1 - miss) * n_present, fp * n_absent
        assert tp / n_present == pytest.approx(1 - miss, abs=0.03)
        assert tp / (tp + fpos) == pytest.approx(exp_tp / (exp_tp + exp_fp), abs=0.03)

    def test_leaves_labelled_images(self, small):
        ds, split = small
        out = infer_weak_labels(ds, seed=0)
        for i in split.full_pool:
            assert out.annotation(i) == ds.annotation(i)


class TestTrainStep:
    def test_full_branch_leaves_tables(self, small):
        ds, split = small
        state, _ = init_state(tiny_config(), ds, split)
        before = {i: t.scores.copy() for i, t in state.tables.items()}
        train_step(state, split.full_pool[0])
        assert state.n_accum == 1 and len(state.full_losses) == 1
        for i, t in state.tables.items():
            np.testing.assert_array_equal(t.scores, before[i])

    def test_weak_branch_updates_only_its_table(self, small):
        ds, split = small
        state, eff = init_state(tiny_config(), ds, split)
        rng = np.random.default_rng(0)
        state.params = DetectorParams(rng.normal(size=state.params.cls_weights.shape),
                                      0.1 * rng.normal(size=state.params.reg_weights.shape))
        target = eff.weak_pool[0]
        before = {i: t.scores.copy() for i, t in state.tables.items()}
        train_step(state, target)
        assert len(state.weak_losses) == 1 and not state.full_losses
        assert not np.array_equal(state.tables[target].scores, before[target])
        for i in eff.weak_pool[1:]:
            np.testing.assert_array_equal(state.tables[i].scores, before[i])

    @pytest.mark.filterwarnings("ignore:invalid value:RuntimeWarning")
    def test_nonfinite_raises_with_epoch(self, small):
        ds, split = small
        state, _ = init_state(tiny_config(), ds, split)
        state.epoch = 3
        state.params = DetectorParams(np.full_like(state.params.cls_weights, np.nan),
                                      state.params.reg_weights)
        with pytest.raises(TrainingError) as err:
            train_step(state, split.full_pool[0])
        assert err.value.epoch == 3


class TestTrain:
    def test_deterministic(self, small):
        ds, split = small
        cfg = tiny_config()
        p1, h1 = train(cfg, ds, split)
        p2, h2 = train(cfg, ds, split)
        assert p1.flat().tobytes() == p2.flat().tobytes()
        assert [r.map50 for r in h1.records] == [r.map50 for r in h2.records]

    def test_history_shape(self, small, tmp_path):
        ds, split = small
        _, h = train(tiny_config(epochs=3), ds, split)
        assert [r.epoch for r in h.records] == [1, 2, 3]
        assert h.records[0].mean_entropy == pytest.approx(math.log(60), abs=1e-9)
        assert set(h.entropy_final) == set(split.weak_pool)
        h.to_csv(tmp_path / "h.csv", ds.n_classes)
        header = (tmp_path / "h.csv").read_text().splitlines()[0]
        assert header.startswith("epoch,lr,full_loss,weak_loss,map50,mean_entropy,ap_0")

    def test_full_only_has_no_weak_work(self, small):
        ds, split = small
        _, h = train(tiny_config(use_weak=False, ratio=1.0), ds, split)
        assert all(r.n_weak == 0 for r in h.records)
        assert all(math.isnan(r.mean_entropy) for r in h.records)

    def test_loss_decreases(self):
        drops = []
        for seed in range(3):
            ds = generate_dataset(40, seed=seed, n_test=10)
            split = split_dataset(ds, 1.0, seed=seed)
            ds = annotate(ds, split)
            cfg = TrainConfig(epochs=5, batch_size=8, n_proposals=60, use_weak=False,
                              ratio=1.0, seed=seed)
            _, h = train(cfg, ds, split)
            drops.append(h.records[0].full_loss - h.records[4].full_loss)
        assert np.median(drops) > 0

    def test_cam_filter_shrinks_weak_proposals(self, small):
        ds, split = small
        _, h = train(tiny_config(epochs=1, cam_filter=True), ds, split)
        assert all(n <= 60 for n in h.proposal_counts.values())
        assert min(h.proposal_counts.values()) < 60
