"""Pseudo-label guided patch contrast.

Pipeline for one batch of unlabeled images:

1. teacher logits -> per-pixel class confidences ``C[k]``
2. attended image per class, ``I * C[k]``
3. grid patches scored by mean confidence and mean binary entropy of the
   attended luma
4. per class: anchor = most confident patch, positives = the candidates whose
   entropy is nearest the anchor's, negatives = patches of the other classes
5. embeddings from the student's encoder + projection head
6. Gaussian closed-form contrast: positive and per-class negative embeddings
   are summarised by mean and diagonal variance, and the expected InfoNCE
   denominator is replaced by its log-normal moment generating function.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import model
from .numerics import Rng, softmax

ENT_CLAMP = 1e-7
LUMA = np.array([0.299, 0.587, 0.114])


class InsufficientClasses(Exception):
    """Fewer than two classes are confidently present; skip the contrastive term."""


@dataclass
class PlgclConfig:
    tau: float = 0.07
    zeta: float = 1.0
    lam_start: float = 0.0
    lam_end: float = 1.0
    patch: int = 8
    max_candidates: int = 8  # J
    n_positives: int = 2  # n
    embed_dim: int = 32  # D
    presence: float = 0.5

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.n_positives < 1:
            raise ValueError("n_positives must be >= 1")
        if self.embed_dim < 2:
            raise ValueError("embed_dim must be >= 2")
        if self.zeta < 0:
            raise ValueError("zeta must be non-negative")

    def lam(self, progress: float) -> float:
        """Variance weight after ``progress`` (0..1) of student training."""
        progress = min(max(progress, 0.0), 1.0)
        return self.lam_start + (self.lam_end - self.lam_start) * progress


# ---------------------------------------------------------------------------
# confidence, attention, entropy
# ---------------------------------------------------------------------------

def confidence_maps(teacher_logits) -> np.ndarray:
    """Softmax over the class axis of ``[K,H,W]`` or ``[N,K,H,W]`` logits."""
    logits = np.asarray(teacher_logits, dtype=np.float64)
    return softmax(logits, axis=-3)


def attended_image(image, conf_k) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    conf_k = np.asarray(conf_k, dtype=np.float64)
    if image.shape[-2:] != conf_k.shape[-2:] or image.shape[-3] != 3:
        raise ValueError(f"image {image.shape} and confidence {conf_k.shape} disagree")
    return image * conf_k[..., None, :, :]


def entropy_fn(x):
    """Binary entropy in nats, inputs clamped to [1e-7, 1 - 1e-7] before the logs."""
    x = np.asarray(x, dtype=np.float64)
    if np.any(x < 0.0) or np.any(x > 1.0):
        raise ValueError("entropy input must lie in [0, 1]")
    x = np.clip(x, ENT_CLAMP, 1.0 - ENT_CLAMP)
    out = -x * np.log(x) - (1.0 - x) * np.log1p(-x)
    return float(out) if out.ndim == 0 else out


def luma(image) -> np.ndarray:
    return np.tensordot(LUMA, np.asarray(image, dtype=np.float64), axes=([0], [-3]))


@dataclass
class PatchRecord:
    cls: int
    image_index: int
    row: int
    col: int
    size: int
    avg_confidence: float
    avg_entropy: float
    payload: np.ndarray = field(repr=False)  # [3, p, p] from the attended image


def _grid_mean(x: np.ndarray, p: int) -> np.ndarray:
    h, w = x.shape
    return x.reshape(h // p, p, w // p, p).mean(axis=(1, 3))


def patch_statistics(conf_k, attended, p: int, cls: int = 0, image_index: int = 0) -> list[PatchRecord]:
    """Score every aligned, non-overlapping ``p x p`` patch, in row-major order."""
    conf_k = np.asarray(conf_k, dtype=np.float64)
    attended = np.asarray(attended, dtype=np.float64)
    h, w = conf_k.shape
    if p < 1 or h % p or w % p:
        raise ValueError(f"patch grid misalignment: {p} does not divide {h}x{w}")
    avg = _grid_mean(conf_k, p)
    # luma of an attended pixel can exceed 1 only through rounding
    ent = _grid_mean(entropy_fn(np.clip(luma(attended), 0.0, 1.0)), p)
    out = []
    for i in range(h // p):
        for j in range(w // p):
            out.append(PatchRecord(
                cls, image_index, i * p, j * p, p, float(avg[i, j]), float(ent[i, j]),
                attended[:, i * p:(i + 1) * p, j * p:(j + 1) * p],
            ))
    return out


@dataclass
class ClassPatches:
    cls: int
    anchor: PatchRecord
    candidates: list[PatchRecord]
    positives: list[PatchRecord]
    negatives: list[PatchRecord]


def sample_patches(images, conf, cfg: PlgclConfig) -> dict[int, ClassPatches]:
    """Anchor, positive and negative patches for every confidently present class.

    ``images`` is ``[N,3,H,W]`` (or one ``[3,H,W]``) and ``conf`` the matching
    ``[N,K,H,W]`` confidences; patches are pooled over the batch.
    """
    images = np.asarray(images, dtype=np.float64)
    conf = np.asarray(conf, dtype=np.float64)
    if images.ndim == 3:
        images, conf = images[None], conf[None]
    n, k = conf.shape[:2]
    pools: dict[int, tuple[PatchRecord, list[PatchRecord]]] = {}
    for c in range(k):
        recs = []
        for i in range(n):
            recs += patch_statistics(conf[i, c], attended_image(images[i], conf[i, c]), cfg.patch, c, i)
        # stable sort keeps (image, row, col) order among equal scores: ties -> top-left-most
        ranked = sorted(recs, key=lambda r: -r.avg_confidence)
        if ranked[0].avg_confidence < cfg.presence:
            continue
        pools[c] = (ranked[0], ranked[1:1 + cfg.max_candidates])
    if len(pools) < 2:
        raise InsufficientClasses(f"{len(pools)} class(es) above presence threshold {cfg.presence}")
    out = {}
    for c, (anchor, cands) in pools.items():
        order = sorted(range(len(cands)), key=lambda j: abs(cands[j].avg_entropy - anchor.avg_entropy))
        positives = [cands[j] for j in order[:cfg.n_positives]]
        negatives = []
        for other, (a2, c2) in pools.items():
            if other != c:
                negatives += [a2] + c2
        out[c] = ClassPatches(c, anchor, cands, positives, negatives)
    return out


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def infonce_loss(f_u, positives, negatives, tau: float) -> float:
    """Mean over positives of -log softmax of the positive against all negatives."""
    f_u = np.asarray(f_u, dtype=np.float64)
    pos = np.atleast_2d(np.asarray(positives, dtype=np.float64))
    neg = np.atleast_2d(np.asarray(negatives, dtype=np.float64))
    if len(positives) == 0 or len(negatives) == 0:
        raise ValueError("need at least one positive and one negative")
    sp = pos @ f_u / tau
    sn = neg @ f_u / tau
    m = max(sp.max(), sn.max())
    neg_sum = np.exp(sn - m).sum()
    return float(np.mean(np.log(np.exp(sp - m) + neg_sum) - (sp - m)))


@dataclass
class GaussianStats:
    mean: np.ndarray
    var: np.ndarray  # diagonal covariance
    count: int = 1


def gaussian_stats(embeddings) -> GaussianStats:
    e = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    if len(embeddings) == 0 or e.size == 0:
        raise ValueError("need at least one embedding")
    mu = e.mean(axis=0)
    return GaussianStats(mu, ((e - mu) ** 2).mean(axis=0), e.shape[0])


def gaussian_stats_backward(embeddings, stats: GaussianStats, dmean, dvar) -> np.ndarray:
    """d(loss)/d(embeddings) given gradients w.r.t. mean and (population) variance."""
    e = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    n = e.shape[0]
    return (dmean[None] + 2.0 * dvar[None] * (e - stats.mean[None])) / n


@dataclass
class PlgclGrads:
    f_u: np.ndarray
    pos_mean: np.ndarray
    pos_var: np.ndarray
    neg_mean: list[np.ndarray]
    neg_var: list[np.ndarray]


def plgcl_loss_full(f_u, pos: GaussianStats, negs, tau: float, zeta: float, lam: float):
    """Closed-form Gaussian contrast and its gradients.

    L = log[exp(a+ + q+) + zeta * sum_k exp(a-_k + q-_k)] - a+
    with a = f.mu / tau and q = lam / (2 tau^2) * sum_d f_d^2 var_d.
    """
    f = np.asarray(f_u, dtype=np.float64)
    c_q = lam / (2.0 * tau * tau)
    f2 = f * f
    a_pos = float(f @ pos.mean) / tau
    z = [a_pos + c_q * float(f2 @ pos.var)]
    use_negs = zeta > 0 and len(negs) > 0
    if use_negs:
        log_zeta = math.log(zeta)
        z += [float(f @ s.mean) / tau + c_q * float(f2 @ s.var) + log_zeta for s in negs]
    z = np.asarray(z)
    zmax = z.max()
    e = np.exp(z - zmax)
    lse = zmax + math.log(e.sum())
    wts = e / e.sum()
    loss = lse - a_pos

    g_f = (wts[0] - 1.0) * pos.mean / tau + wts[0] * (lam / tau**2) * f * pos.var
    neg_mean, neg_var = [], []
    for i, s in enumerate(negs):
        w = wts[i + 1] if use_negs else 0.0
        g_f = g_f + w * (s.mean / tau + (lam / tau**2) * f * s.var)
        neg_mean.append(w * f / tau)
        neg_var.append(w * c_q * f2)
    grads = PlgclGrads(
        g_f, (wts[0] - 1.0) * f / tau, wts[0] * c_q * f2, neg_mean, neg_var,
    )
    return float(loss), grads


def plgcl_loss(f_u, pos: GaussianStats, negs, tau: float, zeta: float, lam: float):
    """``(loss, d loss / d f_u)``; see :func:`plgcl_loss_full`."""
    loss, g = plgcl_loss_full(f_u, pos, negs, tau, zeta, lam)
    return loss, g.f_u


def mc_upper_bound_check(f_u, pos_samples, neg_samples, tau: float, trials: int, rng: Rng):
    """Compare the closed form (lam = zeta = 1) with a Monte-Carlo InfoNCE estimate.

    Gaussians are fitted to ``pos_samples`` and to each array in ``neg_samples``
    (one per negative class). Each trial draws one positive and one negative per
    class. Returns ``(L_mc, L_closed, gap, standard_error)``.
    """
    f = np.asarray(f_u, dtype=np.float64)
    pos = gaussian_stats(pos_samples)
    negs = [gaussian_stats(s) for s in neg_samples]
    if not negs:
        raise ValueError("need at least one negative class")
    l_closed, _ = plgcl_loss(f, pos, negs, tau, 1.0, 1.0)
    d = f.shape[0]
    xp = (rng.normal((trials, d)) * np.sqrt(pos.var) + pos.mean) @ f / tau
    xn = np.stack([
        (rng.normal((trials, d)) * np.sqrt(s.var) + s.mean) @ f / tau for s in negs
    ], axis=1)
    allx = np.concatenate([xp[:, None], xn], axis=1)
    m = allx.max(axis=1, keepdims=True)
    per_trial = (m[:, 0] + np.log(np.exp(allx - m).sum(axis=1))) - xp
    l_mc = float(per_trial.mean())
    se = float(per_trial.std(ddof=1) / math.sqrt(trials)) if trials > 1 else float("inf")
    return l_mc, l_closed, l_closed - l_mc, se


# ---------------------------------------------------------------------------
# batch loss through the student network
# ---------------------------------------------------------------------------

def embed_patches(params, patches) -> np.ndarray:
    return model.encode_project(params, patches)


@dataclass
class PlgclStep:
    loss: float
    grads: dict
    classes: list[int]
    num_patches: int


def plgcl_batch_loss(params, images, conf, cfg: PlgclConfig, lam: float) -> PlgclStep:
    """Mean closed-form contrast over class anchors, with gradients for all parameters.

    Gradients flow through the anchor embedding and through the embeddings
    that define the positive and negative statistics.
    Raises :class:`InsufficientClasses` when fewer than two classes are present.
    """
    groups = sample_patches(images, conf, cfg)
    classes = sorted(groups)
    # embed each class pool once: anchor then candidates
    slots: dict[int, list[int]] = {}
    payloads = []
    for c in classes:
        g = groups[c]
        start = len(payloads)
        payloads += [g.anchor.payload] + [r.payload for r in g.candidates]
        slots[c] = list(range(start, len(payloads)))
    emb, cache = model.encode_project_forward(params, np.stack(payloads))
    index = {id(r): slots[c][j] for c in classes
             for j, r in enumerate([groups[c].anchor] + groups[c].candidates)}

    demb = np.zeros_like(emb)
    total = 0.0
    for c in classes:
        g = groups[c]
        u = index[id(g.anchor)]
        pos_idx = [index[id(r)] for r in g.positives]
        if not pos_idx:
            # a lone patch for this class; contrast it against itself
            pos_idx = [u]
        pos = gaussian_stats(emb[pos_idx])
        neg_idx = [slots[o] for o in classes if o != c]
        negs = [gaussian_stats(emb[ix]) for ix in neg_idx]
        loss, gr = plgcl_loss_full(emb[u], pos, negs, cfg.tau, cfg.zeta, lam)
        total += loss
        demb[u] += gr.f_u
        np.add.at(demb, pos_idx, gaussian_stats_backward(emb[pos_idx], pos, gr.pos_mean, gr.pos_var))
        for ix, s, dm, dv in zip(neg_idx, negs, gr.neg_mean, gr.neg_var):
            np.add.at(demb, ix, gaussian_stats_backward(emb[ix], s, dm, dv))
    n_cls = len(classes)
    grads = model.encode_project_backward(params, cache, demb / n_cls)
    return PlgclStep(total / n_cls, grads, classes, len(payloads))
