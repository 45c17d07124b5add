import json

import numpy as np
import pytest

from synthgen import engine, model
from synthgen.config import EmaConfig, LossWeights, OptimConfig, StudentAdaptConfig, TeacherTrainConfig
from synthgen.datasets import AugmentConfig, DatasetManifest, LabeledImage, SampleEntry, write_pgm, write_ppm
from synthgen.numerics import Rng, seg_cross_entropy
from synthgen.optim import AdamWState, adamw_step
from synthgen.plgcl import PlgclConfig
from synthgen.scenegen import PRESETS, ClassSchema, generate_dataset

SCHEMA = ClassSchema()
SMALL = AugmentConfig(resize=16, crop=16)


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    return {
        "a": generate_dataset(PRESETS["src_a"], SCHEMA, 8, 1, root / "a", size=32),
        "b": generate_dataset(PRESETS["src_b"], SCHEMA, 8, 2, root / "b", size=32),
        "t": generate_dataset(PRESETS["tgt_unstructured"], SCHEMA, 6, 3, root / "t", size=32),
    }


def small_teacher_cfg(data, seed=0, **kw):
    cfg = TeacherTrainConfig(
        sources=[str(data["a"].root), str(data["b"].root)],
        epochs=1, batch_size=2, augment=SMALL, embed_dim=8, seed=seed,
    )
    for k, v in kw.items():
        setattr(cfg, k, v)
    return cfg


def small_student_cfg(data, seed=0, **kw):
    cfg = StudentAdaptConfig(
        target=str(data["t"].root), epochs=1, batch_size=2, augment=SMALL,
        plgcl=PlgclConfig(patch=4, embed_dim=8, presence=0.3), seed=seed,
    )
    for k, v in kw.items():
        setattr(cfg, k, v)
    return cfg


def write_manifest(root, samples, k=4):
    entries = []
    for i, s in enumerate(samples):
        write_ppm(root / f"{i}.ppm", s.image)
        write_pgm(root / f"{i}.pgm", s.labels)
        entries.append(SampleEntry(f"{i}.ppm", f"{i}.pgm", "test"))
    m = DatasetManifest("t", [f"c{i}" for i in range(k)], entries, 0, root=root)
    m.save()
    return m


class TestTeacher:
    def test_smoke_loss_decreases(self, data):
        wins = 0
        for seed in range(10):
            cfg = small_teacher_cfg(data, seed, optim=OptimConfig(lr=3e-3))
            res = engine.train_teacher(cfg)
            assert all(np.isfinite(res.step_losses))
            wins += res.step_losses[-1] < res.step_losses[0]
        assert wins >= 7

    def test_deterministic_checkpoint(self, data, tmp_path):
        cfg = small_teacher_cfg(data, 4)
        engine.train_teacher(cfg, tmp_path / "r1")
        engine.train_teacher(cfg, tmp_path / "r2")
        assert (tmp_path / "r1" / "teacher.ckpt").read_bytes() == (tmp_path / "r2" / "teacher.ckpt").read_bytes()
        assert (tmp_path / "r1" / "metrics.jsonl").read_text().count("\n") == 1

    def test_reduces_to_supervised_training(self, data):
        cfg = small_teacher_cfg(data, 5, use_classmixpp=False)
        cfg.gmc.weight = 0.0
        sources = [data["a"].load_all(), data["b"].load_all()]
        res = engine.train_teacher(cfg, sources=sources)

        params = model.init_params(Rng(cfg.seed).derive(0), 8, cfg.embed_dim)
        opt = AdamWState(lr=cfg.optim.lr, weight_decay=cfg.optim.weight_decay)
        steps = 8
        for step in range(steps):
            opt.lr = cfg.optim.lr * (1 - step / steps)
            a_list, _, _ = engine.teacher_batch(sources, cfg, 0, step)
            x = np.stack([a.image for a in a_list])
            y = np.stack([a.labels for a in a_list])
            logits, cache = model.forward(params, x)
            _, dl = seg_cross_entropy(logits, y)
            adamw_step(params, model.backward(params, cache, dl), opt)
        for k in params:
            np.testing.assert_allclose(res.params[k], params[k], rtol=0, atol=1e-14)

    def test_pairs_come_from_both_sources(self, data):
        cfg = small_teacher_cfg(data, 0)
        sources = [data["a"].load_all(), data["b"].load_all()]
        domains = set()
        for step in range(10):
            a_list, b_list, mixed = engine.teacher_batch(sources, cfg, 0, step)
            for a, b in zip(a_list, b_list):
                assert a.domain != b.domain
                domains.add(a.domain)
        assert domains == {"src_a", "src_b"}

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            engine.train_teacher(TeacherTrainConfig())
        with pytest.raises(ValueError):
            engine.train_teacher(TeacherTrainConfig(), sources=[[]])

    def test_fits_training_images(self, tmp_path):
        m = generate_dataset(PRESETS["src_a"], SCHEMA, 4, 11, tmp_path, size=32)
        cfg = TeacherTrainConfig(
            epochs=1, steps_per_epoch=200, batch_size=4, embed_dim=8, use_classmixpp=False,
            augment=AugmentConfig(resize=32, crop=32, enabled=False), optim=OptimConfig(lr=1e-2),
        )
        cfg.gmc.weight = 0.0
        res = engine.train_teacher(cfg, sources=[m.load_all()])
        agree = []
        for s in m.load_all():
            labels, conf = engine.pseudo_labels(res.params, s.image)
            agree.append(np.mean(labels == s.labels))
        assert np.mean(agree) > 0.9


class TestPseudoLabels:
    def test_consistency(self):
        params = model.init_params(Rng(0), 5, 8)
        labels, conf = engine.pseudo_labels(params, Rng(1).uniform(size=(2, 3, 8, 8)))
        np.testing.assert_array_equal(labels, np.argmax(conf, axis=1))
        np.testing.assert_allclose(conf.sum(axis=1), 1.0)

    def test_zero_teacher(self):
        labels, conf = engine.pseudo_labels(model.zero_params(4, 8), Rng(1).uniform(size=(3, 8, 8)))
        assert not labels.any()
        np.testing.assert_allclose(conf, 0.25)


@pytest.fixture(scope="module")
def teacher(data):
    return engine.train_teacher(small_teacher_cfg(data, 0, optim=OptimConfig(lr=3e-3))).params


class TestStudent:
    def test_no_label_reads(self, data, teacher, tmp_path):
        audit = engine.LabelAudit(data["t"])
        res, _, audit2 = engine.adapt_student(teacher, small_student_cfg(data), tmp_path, target=audit)
        assert audit2 is audit and audit.reads == 0
        assert (tmp_path / "student.ckpt").exists()
        rec = json.loads((tmp_path / "metrics.jsonl").read_text().splitlines()[0])
        assert rec["phase"] == "student"

    def test_teacher_argument_untouched(self, data, teacher):
        before = model.clone_params(teacher)
        engine.adapt_student(teacher, small_student_cfg(data))
        for k in teacher:
            np.testing.assert_array_equal(teacher[k], before[k])

    def test_frozen_teacher_self_training(self, data, teacher):
        cfg = small_student_cfg(data, ema=EmaConfig(enabled=True, alpha=1.0), weights=LossWeights(contrastive=0.0))
        res, final_teacher, _ = engine.adapt_student(teacher, cfg)
        for k in teacher:
            np.testing.assert_array_equal(final_teacher[k], teacher[k])
        assert res.metrics[0].contrastive_steps == 0
        assert any(not np.array_equal(res.params[k], teacher[k]) for k in teacher)

    def test_ema_moves_teacher(self, data, teacher):
        res, final_teacher, _ = engine.adapt_student(teacher, small_student_cfg(data, ema=EmaConfig(alpha=0.5)))
        assert any(not np.array_equal(final_teacher[k], teacher[k]) for k in teacher)

    def test_all_components_off(self, data, teacher):
        cfg = small_student_cfg(data, ema=EmaConfig(enabled=False), weights=LossWeights(contrastive=0.0))
        res, final_teacher, _ = engine.adapt_student(teacher, cfg)
        assert np.isfinite(res.step_losses).all()

    def test_deterministic(self, data, teacher):
        a, _, _ = engine.adapt_student(teacher, small_student_cfg(data, seed=3))
        b, _, _ = engine.adapt_student(teacher, small_student_cfg(data, seed=3))
        for k in a.params:
            np.testing.assert_array_equal(a.params[k], b.params[k])

    def test_source_ce_term(self, data, teacher):
        cfg = small_student_cfg(data, sources=[str(data["a"].root)], weights=LossWeights(source_ce=0.5))
        res, _, audit = engine.adapt_student(teacher, cfg)
        assert np.isfinite(res.step_losses).all() and audit.reads == 0


class TestEvaluate:
    def test_zero_model_balanced(self, tmp_path):
        labels = np.array([[0, 1], [2, 3]])
        m = write_manifest(tmp_path, [LabeledImage(np.zeros((3, 2, 2)), labels)] * 3)
        rep = engine.evaluate(model.zero_params(4, 8), m)
        # everything predicted as class 0: IoU_0 = 3 / 12, the rest 0
        assert rep["per_class"] == {"c0": 0.25, "c1": 0.0, "c2": 0.0, "c3": 0.0}
        assert rep["miou"] == 0.25 / 4
        assert rep["pixels_evaluated"] == 12

    def test_perfect_fit(self, tmp_path):
        m = write_manifest(tmp_path, [LabeledImage(np.zeros((3, 4, 4)), np.full((4, 4), 2))])
        params = model.zero_params(4, 8)
        params["out.b"][2] = 1.0
        rep = engine.evaluate(params, m)
        assert rep["miou"] == 1.0 and list(rep["per_class"]) == ["c2"]

    def test_empty(self, tmp_path):
        m = DatasetManifest("e", ["a"], [], 0, root=tmp_path)
        with pytest.raises(ValueError):
            engine.evaluate(model.zero_params(1, 8), m)

    def test_checkpoint_round_trip(self, data, tmp_path):
        params = model.init_params(Rng(3), 8, 8)
        path = model.save_checkpoint(tmp_path / "m.ckpt", params)
        loaded, _ = model.load_checkpoint(path)
        assert engine.evaluate(params, data["a"]) == engine.evaluate(loaded, data["a"])
