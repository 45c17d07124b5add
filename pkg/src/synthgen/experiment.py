"""Desk-scale generalisation-by-adaptation experiment and its ablations.

One seed of the experiment:

* generate ``src_a`` and ``src_b`` training sets, an unlabeled adaptation
  split of ``tgt_unstructured`` and a labeled held-out target split
* teachers: both sources with class mixing and the masked loss (``full``),
  ``src_a`` alone with the same recipe (``single``), and both sources with the
  masked-loss weight at zero (``no_gmc``)
* students adapted from ``full`` (full loss and contrastive weight zero) and
  from ``no_gmc`` (full loss)
* every model scored by held-out target mIoU
"""
from __future__ import annotations

import copy
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import engine
from .config import OptimConfig, StudentAdaptConfig, TeacherTrainConfig
from .datasets import DatasetManifest
from .scenegen import ClassSchema, generate_dataset, get_style

log = logging.getLogger(__name__)


@dataclass
class ExperimentConfig:
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    source_count: int = 200
    target_count: int = 100
    heldout_count: int = 50
    size: int = 64
    teacher_steps: int = 800
    teacher_epochs: int = 4
    teacher_lr: float = 3e-3
    student: StudentAdaptConfig = field(
        default_factory=lambda: StudentAdaptConfig(optim=OptimConfig(lr=5e-5, schedule="constant"))
    )
    ablations: bool = True


def make_data(root, seed: int, cfg: ExperimentConfig, schema: ClassSchema | None = None) -> dict[str, DatasetManifest]:
    schema = schema or ClassSchema()
    root = Path(root)
    base = 1000 * seed
    specs = [
        ("src_a", "src_a", cfg.source_count, base + 1),
        ("src_b", "src_b", cfg.source_count, base + 2),
        ("target", "tgt_unstructured", cfg.target_count, base + 3),
        ("heldout", "tgt_unstructured", cfg.heldout_count, base + 4),
    ]
    return {
        key: generate_dataset(get_style(style), schema, n, s, root / key, size=cfg.size, name=key)
        for key, style, n, s in specs
    }


def _teacher_cfg(cfg: ExperimentConfig, seed: int, gmc_weight: float = 1.0) -> TeacherTrainConfig:
    tc = TeacherTrainConfig(
        epochs=cfg.teacher_epochs,
        steps_per_epoch=cfg.teacher_steps // cfg.teacher_epochs,
        optim=OptimConfig(lr=cfg.teacher_lr),
        seed=seed,
    )
    tc.gmc.weight = gmc_weight
    return tc


def run_seed(root, seed: int, cfg: ExperimentConfig) -> dict:
    t0 = time.perf_counter()
    data = make_data(Path(root) / f"seed{seed}", seed, cfg)
    src_a, src_b = data["src_a"].load_all(), data["src_b"].load_all()
    held = data["heldout"]

    def score(params):
        return engine.evaluate(params, held)["miou"]

    def adapt(teacher, **weights):
        sc = copy.deepcopy(cfg.student)
        sc.seed = seed
        for k, v in weights.items():
            setattr(sc.weights, k, v)
        res, _, audit = engine.adapt_student(teacher, sc, target=engine.LabelAudit(data["target"]))
        return res, audit

    out: dict = {"seed": seed}
    full = engine.train_teacher(_teacher_cfg(cfg, seed), sources=[src_a, src_b])
    single = engine.train_teacher(_teacher_cfg(cfg, seed), sources=[src_a])
    out["teacher_full"] = score(full.params)
    out["teacher_single"] = score(single.params)
    student, audit = adapt(full.params)
    out["student_full"] = score(student.params)
    out["label_reads"] = audit.reads
    if cfg.ablations:
        no_plgcl, audit2 = adapt(full.params, contrastive=0.0)
        out["student_no_plgcl"] = score(no_plgcl.params)
        no_gmc_teacher = engine.train_teacher(_teacher_cfg(cfg, seed, gmc_weight=0.0), sources=[src_a, src_b])
        out["teacher_no_gmc"] = score(no_gmc_teacher.params)
        no_gmc, audit3 = adapt(no_gmc_teacher.params)
        out["student_no_gmc"] = score(no_gmc.params)
        out["label_reads"] += audit2.reads + audit3.reads
    out["seconds"] = time.perf_counter() - t0
    log.info("seed %d: %s", seed, json.dumps({k: round(v, 4) if isinstance(v, float) else v for k, v in out.items()}))
    return out


def run(root, cfg: ExperimentConfig | None = None) -> dict:
    cfg = cfg or ExperimentConfig()
    runs = [run_seed(root, s, cfg) for s in cfg.seeds]
    return {"runs": runs, "summary": summarize(runs)}


def summarize(runs: list[dict]) -> dict:
    def median(xs):
        xs = sorted(xs)
        n = len(xs)
        return xs[n // 2] if n % 2 else 0.5 * (xs[n // 2 - 1] + xs[n // 2])

    s = {
        "multi_source_wins": sum(r["teacher_full"] > r["teacher_single"] for r in runs),
        "adaptation_gain_points": [100 * (r["student_full"] - r["teacher_full"]) for r in runs],
        "label_reads": sum(r["label_reads"] for r in runs),
        "seconds": sum(r["seconds"] for r in runs),
    }
    s["adaptation_wins"] = sum(g >= 2.0 for g in s["adaptation_gain_points"])
    if all("student_no_gmc" in r for r in runs):
        s["median_full"] = median([r["student_full"] for r in runs])
        s["median_no_gmc"] = median([r["student_no_gmc"] for r in runs])
        s["median_no_plgcl"] = median([r["student_no_plgcl"] for r in runs])
    return s
