"""Teacher training on mixed multi-source data, student adaptation, evaluation.

Every stochastic choice in a step draws from ``Rng(seed).derive(phase, epoch,
step, item)``, so runs are reproducible and independent of evaluation order.
"""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import model
from .classmixpp import classmix_pp
from .config import StudentAdaptConfig, TeacherTrainConfig
from .datasets import IGNORE, DatasetManifest, LabeledImage, augment, photometric, resize_bilinear, resize_nearest
from .gmc import gmc_loss
from .metrics import ConfusionMatrix, report
from .numerics import Rng, seg_cross_entropy
from .optim import AdamWState, adamw_step, ema_update, lr_schedule
from .plgcl import InsufficientClasses, confidence_maps, plgcl_batch_loss

log = logging.getLogger(__name__)

TEACHER_PHASE, STUDENT_PHASE = 1, 2


@dataclass
class EpochMetrics:
    epoch: int
    seg_loss: float = 0.0
    gmc_loss: float = 0.0
    plgcl_loss: float = 0.0
    ce_pseudo_loss: float = 0.0
    train_miou: float = float("nan")
    val_miou: float = float("nan")
    seconds: float = 0.0
    contrastive_steps: int = 0


@dataclass
class TrainResult:
    params: dict
    metrics: list[EpochMetrics] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)


class LabelAudit:
    """Counts ground-truth label reads on a manifest."""

    def __init__(self, manifest: DatasetManifest):
        self.manifest = manifest
        self.reads = 0

    def read_image(self, i: int) -> np.ndarray:
        return self.manifest.read_image(i)

    def read_labels(self, i: int) -> np.ndarray:
        self.reads += 1
        return self.manifest.read_labels(i)

    def __len__(self) -> int:
        return len(self.manifest)


def _load(path_or_manifest) -> DatasetManifest:
    if isinstance(path_or_manifest, DatasetManifest):
        return path_or_manifest
    return DatasetManifest.load(path_or_manifest)


def _grads_add(total: dict, g: dict, w: float = 1.0) -> dict:
    for k, v in g.items():
        total[k] = total[k] + w * v
    return total


def _append_jsonl(path: Path, record: dict) -> None:
    with open(path, "a") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


def _metrics_record(m: EpochMetrics, phase: str) -> dict:
    # wall-clock time goes to the log only, so reruns write identical files
    d = asdict(m)
    del d["seconds"]
    d["phase"] = phase
    return {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in d.items()}


def _optim_state(cfg) -> AdamWState:
    return AdamWState(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps, weight_decay=cfg.weight_decay)


# ---------------------------------------------------------------------------
# teacher
# ---------------------------------------------------------------------------

def _pick_pair(n_sources: int, rng: Rng) -> tuple[int, int]:
    """Source ids for (A, B): distinct sources when there are several."""
    if n_sources == 1:
        return 0, 0
    if n_sources == 2:
        return (1, 0) if rng.uniform() < 0.5 else (0, 1)
    a, b = rng.choose_subset(range(n_sources), 2)
    return (b, a) if rng.uniform() < 0.5 else (a, b)


def teacher_batch(sources: list[list[LabeledImage]], cfg: TeacherTrainConfig, epoch: int, step: int):
    """Augmented A, B pairs and the mixed samples for one optimisation step."""
    a_list, b_list, mixed = [], [], []
    for j in range(cfg.batch_size):
        rng = Rng(cfg.seed).derive(TEACHER_PHASE, epoch, step, j)
        sa, sb = _pick_pair(len(sources), rng)
        a = sources[sa][int(rng.integers(0, len(sources[sa])))]
        b = sources[sb][int(rng.integers(0, len(sources[sb])))]
        a = augment(a, cfg.augment, rng.derive(0))
        b = augment(b, cfg.augment, rng.derive(1))
        a_list.append(a)
        b_list.append(b)
        if cfg.use_classmixpp:
            mixed.append(classmix_pp(a, b, rng.derive(2)).as_sample())
        else:
            mixed.append(a)
    return a_list, b_list, mixed


def _stack(samples: list[LabeledImage]):
    return np.stack([s.image for s in samples]), np.stack([s.labels for s in samples])


def train_teacher(cfg: TeacherTrainConfig, out_dir=None, sources=None, val=None) -> TrainResult:
    """Supervised training on (optionally class-mixed) source data plus the masked loss.

    ``sources`` may pass preloaded sample lists instead of reading ``cfg.sources``.
    """
    if sources is None:
        if not cfg.sources:
            raise ValueError("teacher training needs at least one source manifest")
        manifests = [_load(p) for p in cfg.sources]
        sources = [m.load_all() for m in manifests]
        k = manifests[0].num_classes
    else:
        k = None
    if any(len(s) == 0 for s in sources):
        raise ValueError("empty source dataset")
    if k is None:
        k = int(max(int(s.labels[s.labels != IGNORE].max()) for src in sources for s in src)) + 1
        k = max(k, 8)
    if cfg.epochs < 1:
        raise ValueError("need at least one epoch")
    if val is None and cfg.val:
        val = _load(cfg.val)
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.jsonl").write_text("")

    params = model.init_params(Rng(cfg.seed).derive(0), k, cfg.embed_dim)
    opt = _optim_state(cfg.optim)
    total = sum(len(s) for s in sources)
    steps = cfg.steps_per_epoch or math.ceil(total / cfg.batch_size)
    result = TrainResult(params)
    g = cfg.gmc
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        m = EpochMetrics(epoch)
        cm = ConfusionMatrix(k)
        for step in range(steps):
            opt.lr = lr_schedule(cfg.optim.lr, epoch + step / steps, cfg.epochs, cfg.optim.schedule)
            a_list, _, mixed = teacher_batch(sources, cfg, epoch, step)
            x, y = _stack(mixed)
            logits, cache = model.forward(params, x)
            seg, dlogits = seg_cross_entropy(logits, y)
            grads = model.backward(params, cache, dlogits)
            cm.update(np.argmax(logits, axis=1), y)
            loss = seg
            if g.weight > 0:
                xa, ya = _stack(mixed if g.on_mixed else a_list)
                mrng = Rng(cfg.seed).derive(TEACHER_PHASE, epoch, step, 10_000)
                lm, gm, _ = gmc_loss(params, xa, ya, g.patch, g.ratio, mrng)
                _grads_add(grads, gm, g.weight)
                m.gmc_loss += lm / steps
                loss += g.weight * lm
            adamw_step(params, grads, opt)
            m.seg_loss += seg / steps
            result.step_losses.append(loss)
        m.train_miou = report(cm, range(k))["miou"]
        if val is not None:
            m.val_miou = evaluate(params, val)["miou"]
        m.seconds = time.perf_counter() - t0
        result.metrics.append(m)
        log.info("teacher epoch %d seg %.4f gmc %.4f train mIoU %.3f val mIoU %.3f (%.1fs)",
                 epoch, m.seg_loss, m.gmc_loss, m.train_miou, m.val_miou, m.seconds)
        if out:
            _append_jsonl(out / "metrics.jsonl", _metrics_record(m, "teacher"))
            model.save_checkpoint(out / "teacher.ckpt", params, epoch + 1)
    return result


# ---------------------------------------------------------------------------
# student
# ---------------------------------------------------------------------------

def pseudo_labels(teacher: dict, x):
    """Argmax labels and softmax confidences of the teacher on ``x``."""
    logits, _ = model.forward(teacher, x)
    conf = confidence_maps(logits)
    return np.argmax(conf, axis=-3), conf


def _target_view(img: np.ndarray, cfg: StudentAdaptConfig, rng: Rng):
    a = cfg.augment
    if img.shape[1:] != (a.resize, a.resize):
        img = resize_bilinear(img, a.resize, a.resize)
    if a.enabled:
        top = int(rng.integers(0, a.resize - a.crop + 1))
        left = int(rng.integers(0, a.resize - a.crop + 1))
    else:
        top = left = (a.resize - a.crop) // 2
    clean = img[:, top:top + a.crop, left:left + a.crop]
    student = photometric(clean, a, rng) if a.enabled else clean
    return clean, student


def adapt_student(teacher: dict, cfg: StudentAdaptConfig, out_dir=None, target=None,
                  val=None, sources=None) -> tuple[TrainResult, dict, LabelAudit]:
    """Self-training of a copy of ``teacher`` on unlabeled target images.

    Returns ``(result, final_teacher, audit)``; ``audit.reads`` counts target
    label reads and stays zero. ``teacher`` is not modified.
    """
    if target is None:
        if not cfg.target:
            raise ValueError("student adaptation needs a target manifest")
        target = _load(cfg.target)
    audit = target if isinstance(target, LabelAudit) else LabelAudit(_load(target))
    images = [audit.read_image(i) for i in range(len(audit))]
    if not images:
        raise ValueError("empty target dataset")
    if val is None and cfg.val:
        val = _load(cfg.val)
    if sources is None and cfg.weights.source_ce > 0:
        sources = [_load(p).load_all() for p in cfg.sources]
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        metrics_path = out / "metrics.jsonl"
        if not metrics_path.exists():
            metrics_path.write_text("")

    teacher = model.clone_params(teacher)
    student = model.clone_params(teacher)
    k = model.num_classes(student)
    opt = _optim_state(cfg.optim)
    steps = cfg.steps_per_epoch or math.ceil(len(images) / cfg.batch_size)
    total_steps = steps * cfg.epochs
    w = cfg.weights
    result = TrainResult(student)
    gstep = 0
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        m = EpochMetrics(epoch)
        order = Rng(cfg.seed).derive(STUDENT_PHASE, epoch).permutation(len(images))
        for step in range(steps):
            opt.lr = lr_schedule(cfg.optim.lr, epoch + step / steps, cfg.epochs, cfg.optim.schedule)
            clean, view = [], []
            for j in range(cfg.batch_size):
                idx = int(order[(step * cfg.batch_size + j) % len(images)])
                c, v = _target_view(images[idx], cfg, Rng(cfg.seed).derive(STUDENT_PHASE, epoch, step, j))
                clean.append(c)
                view.append(v)
            clean, view = np.stack(clean), np.stack(view)
            plab, conf = pseudo_labels(teacher, clean)
            if cfg.pseudo_threshold > 0:
                plab = np.where(conf.max(axis=1) >= cfg.pseudo_threshold, plab, IGNORE)

            logits, cache = model.forward(student, view)
            if np.all(plab == IGNORE):
                plab = np.argmax(conf, axis=1)
            ce, dlogits = seg_cross_entropy(logits, plab)
            grads = model.backward(student, cache, dlogits * w.cross_entropy)
            loss = w.cross_entropy * ce
            m.ce_pseudo_loss += ce / steps

            if w.contrastive > 0:
                lam = cfg.plgcl.lam(gstep / max(total_steps - 1, 1))
                try:
                    pc = plgcl_batch_loss(student, clean, conf, cfg.plgcl, lam)
                except (InsufficientClasses, ValueError) as exc:
                    log.debug("contrastive term skipped: %s", exc)
                else:
                    _grads_add(grads, pc.grads, w.contrastive)
                    loss += w.contrastive * pc.loss
                    m.plgcl_loss += pc.loss
                    m.contrastive_steps += 1

            if w.source_ce > 0 and sources:
                tcfg = TeacherTrainConfig(batch_size=cfg.batch_size, augment=cfg.augment,
                                          seed=cfg.seed + 7919)
                _, _, mixed = teacher_batch(sources, tcfg, epoch, step)
                xs, ys = _stack(mixed)
                lg, sc = model.forward(student, xs)
                ls, dl = seg_cross_entropy(lg, ys)
                _grads_add(grads, model.backward(student, sc, dl), w.source_ce)
                loss += w.source_ce * ls

            adamw_step(student, grads, opt)
            if cfg.ema.enabled:
                ema_update(teacher, student, cfg.ema.alpha)
            result.step_losses.append(loss)
            gstep += 1
        if m.contrastive_steps:
            m.plgcl_loss /= m.contrastive_steps
        if val is not None:
            m.val_miou = evaluate(student, val)["miou"]
        m.seconds = time.perf_counter() - t0
        result.metrics.append(m)
        log.info("student epoch %d ce %.4f plgcl %.4f (%d steps) val mIoU %.3f (%.1fs)",
                 epoch, m.ce_pseudo_loss, m.plgcl_loss, m.contrastive_steps, m.val_miou, m.seconds)
        if out:
            _append_jsonl(out / "metrics.jsonl", _metrics_record(m, "student"))
            model.save_checkpoint(out / "student.ckpt", student, epoch + 1)
    return result, teacher, audit


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def evaluate(params: dict, manifest, batch: int = 16, size: int | None = None) -> dict:
    """Confusion-matrix mIoU of ``params`` over every sample of a labeled manifest."""
    manifest = _load(manifest)
    if len(manifest) == 0:
        raise ValueError("cannot evaluate an empty manifest")
    k = model.num_classes(params)
    cm = ConfusionMatrix(k)
    for lo in range(0, len(manifest), batch):
        xs, ys = [], []
        for i in range(lo, min(lo + batch, len(manifest))):
            x, y = manifest.read_image(i), manifest.read_labels(i)
            if size and x.shape[1:] != (size, size):
                x, y = resize_bilinear(x, size, size), resize_nearest(y, size, size)
            xs.append(x)
            ys.append(y)
        pred = model.predict(params, np.stack(xs))
        cm.update(pred, np.stack(ys))
    names = manifest.classes if len(manifest.classes) == k else [str(i) for i in range(k)]
    out = report(cm, names)
    out["confusion"] = cm.counts.tolist()
    return out


def write_report(path, rep: dict) -> Path:
    path = Path(path)
    path.write_text(json.dumps(rep, indent=2, sort_keys=True) + "\n")
    return path
