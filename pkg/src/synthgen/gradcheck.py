"""Finite-difference verification of every analytic gradient path.

Each check draws a random tiny network and 8x8 input from ``Rng(seed)``,
compares analytic gradients with central differences and reports the
norm-wise relative error. Large tensors are checked on a random subset of
coordinates.

ReLU is not differentiable at 0, and a central difference straddling a kink
measures a one-sided slope. Instances whose encoder pre-activations come
within ``margin`` of 0 are therefore redrawn (from a derived stream, so the
result stays a function of the seed).
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import model
from .gmc import gmc_loss
from .numerics import Rng, finite_difference_gradient, relative_error, seg_cross_entropy
from .plgcl import GaussianStats, InsufficientClasses, PlgclConfig, confidence_maps, plgcl_batch_loss, plgcl_loss, sample_patches

TOLERANCE = 1e-5
EPS = 1e-5
MARGIN = 1e-4
MAX_REDRAWS = 200


@dataclass
class CheckResult:
    path: str
    seed: int
    rel_error: float
    checked: int  # number of coordinates compared
    redraws: int

    @property
    def ok(self) -> bool:
        return self.rel_error < TOLERANCE


def _random_params(rng: Rng, k: int, d: int) -> dict:
    params = model.init_params(rng, k, d)
    for name in params:
        if name.endswith(".b"):
            params[name] = 0.1 * rng.normal(params[name].shape)
    return params


def _min_preactivation(params, x) -> float:
    _, cache = model._encode(params, np.asarray(x, dtype=np.float64))
    _, z1, _, z2, _, z3 = cache
    return float(min(np.abs(z1).min(), np.abs(z2).min(), np.abs(z3).min()))


def _coordinate_check(loss_fn, params, grads, rng: Rng, coords: int | None, names=None, eps: float = EPS):
    """Compare ``grads`` with central differences of ``loss_fn(params)`` on sampled coordinates."""
    analytic, numeric = [], []
    for name in names or list(params):
        p = params[name]
        flat = p.reshape(-1)
        idx = np.arange(flat.size) if coords is None or flat.size <= coords else np.sort(
            rng.permutation(flat.size)[:coords])
        g = grads[name].reshape(-1)
        for i in idx:
            old = flat[i]
            flat[i] = old + eps
            fp = loss_fn(params)
            flat[i] = old - eps
            fm = loss_fn(params)
            flat[i] = old
            analytic.append(g[i])
            numeric.append((fp - fm) / (2 * eps))
    return relative_error(np.array(analytic), np.array(numeric)), len(analytic)


def _draw(seed: int, make):
    """Call ``make(rng)`` on derived streams until it returns an instance clear of ReLU kinks."""
    for attempt in range(MAX_REDRAWS):
        inst = make(Rng(seed).derive(attempt))
        if inst is not None:
            return inst, attempt
    raise RuntimeError(f"seed {seed}: no kink-free instance in {MAX_REDRAWS} draws")


def check_seg_ce(seed: int, k: int = 4, d: int = 8, coords: int | None = 12) -> CheckResult:
    """Segmentation cross-entropy through the full network (with some ignore pixels)."""
    def make(rng):
        params = _random_params(rng, k, d)
        x = rng.uniform(size=(1, 3, 8, 8))
        y = rng.integers(0, k, (1, 8, 8))
        y[rng.uniform(size=y.shape) < 0.1] = 255
        return (params, x, y) if _min_preactivation(params, x) > MARGIN else None

    (params, x, y), redraws = _draw(seed, make)

    def loss_fn(p):
        return seg_cross_entropy(model.forward(p, x)[0], y)[0]

    logits, cache = model.forward(params, x)
    _, dlogits = seg_cross_entropy(logits, y)
    grads = model.backward(params, cache, dlogits)
    names = [n for n in params if not n.startswith("head.")]
    err, n = _coordinate_check(loss_fn, params, grads, Rng(seed).derive(10_000), coords, names)
    return CheckResult("seg_ce", seed, err, n, redraws)


def check_gmc(seed: int, k: int = 4, d: int = 8, coords: int | None = 12) -> CheckResult:
    """Masked-consistency loss; the mask is re-sampled from the same stream on every evaluation."""
    b, r = 2, 0.5

    def make(rng):
        params = _random_params(rng, k, d)
        x = rng.uniform(size=(3, 8, 8))
        y = rng.integers(0, k, (8, 8))
        mask_seed = int(rng.integers(0, 2**31))
        _, _, masks = gmc_loss(params, x, y, b, r, Rng(mask_seed))
        xm = x * masks[0].expanded
        return (params, x, y, mask_seed) if _min_preactivation(params, xm[None]) > MARGIN else None

    (params, x, y, mask_seed), redraws = _draw(seed, make)

    def loss_fn(p):
        return gmc_loss(p, x, y, b, r, Rng(mask_seed))[0]

    _, grads, _ = gmc_loss(params, x, y, b, r, Rng(mask_seed))
    names = [n for n in params if not n.startswith("head.")]
    err, n = _coordinate_check(loss_fn, params, grads, Rng(seed).derive(10_000), coords, names)
    return CheckResult("gmc", seed, err, n, redraws)


def check_plgcl_fu(seed: int, d: int = 8, n_neg: int = 3) -> CheckResult:
    """Closed-form Gaussian contrast w.r.t. the anchor embedding (tau 0.07, lam 1, zeta 1)."""
    rng = Rng(seed)

    def unit(n):
        v = rng.normal((n, d))
        return v / np.linalg.norm(v, axis=1, keepdims=True)

    f_u = unit(1)[0]
    pos = GaussianStats(unit(1)[0], 0.05 * rng.uniform(size=d))
    negs = [GaussianStats(m, 0.05 * rng.uniform(size=d)) for m in unit(n_neg)]
    _, g = plgcl_loss(f_u, pos, negs, 0.07, 1.0, 1.0)
    fd = finite_difference_gradient(lambda f: plgcl_loss(f, pos, negs, 0.07, 1.0, 1.0)[0], f_u.copy(), EPS)
    return CheckResult("plgcl_f_u", seed, relative_error(g, fd), d, 0)


def _plgcl_instance(rng: Rng, k: int, d: int):
    """Two 8x8 images with block-structured teacher confidences over ``k`` classes."""
    params = _random_params(rng, k, d)
    images = rng.uniform(size=(2, 3, 8, 8))
    logits = np.zeros((2, k, 8, 8))
    for i in range(2):
        for bi in range(2):
            for bj in range(2):
                c = int(rng.integers(0, k))
                logits[i, c, bi * 4:(bi + 1) * 4, bj * 4:(bj + 1) * 4] = 4.0
        logits[i] += 0.5 * rng.normal(logits[i].shape)
    return params, images, confidence_maps(logits)


def check_plgcl_params(seed: int, k: int = 3, d: int = 8, coords: int | None = 12,
                       head_only: bool = False) -> CheckResult:
    """Batch contrastive loss w.r.t. projection-head (and encoder) parameters."""
    cfg = PlgclConfig(patch=4, max_candidates=3, n_positives=2, embed_dim=d)

    def make(rng):
        params, images, conf = _plgcl_instance(rng, k, d)
        try:
            step = plgcl_batch_loss(params, images, conf, cfg, 1.0)
        except (InsufficientClasses, ValueError):
            return None
        # patches are 4x4 crops of the attended images
        groups = sample_patches(images, conf, cfg)
        payloads = np.stack([r.payload for g in groups.values() for r in [g.anchor] + g.candidates])
        if _min_preactivation(params, payloads) <= MARGIN:
            return None
        return params, images, conf, step

    (params, images, conf, step), redraws = _draw(seed, make)

    def loss_fn(p):
        return plgcl_batch_loss(p, images, conf, cfg, 1.0).loss

    names = ["head.w", "head.b"] if head_only else [n for n in params if not n.startswith("out.")]
    err, n = _coordinate_check(loss_fn, params, step.grads, Rng(seed).derive(10_000), coords, names)
    return CheckResult("plgcl_params", seed, err, n, redraws)


CHECKS = {
    "seg_ce": check_seg_ce,
    "gmc": check_gmc,
    "plgcl_f_u": check_plgcl_fu,
    "plgcl_params": check_plgcl_params,
}


def run_suite(seeds=range(20), paths=None) -> dict[str, list[CheckResult]]:
    out = {}
    for path in paths or CHECKS:
        out[path] = [CHECKS[path](s) for s in seeds]
    return out


def summarize(results: dict[str, list[CheckResult]]) -> dict:
    return {
        path: {
            "max_rel_error": max(r.rel_error for r in rs),
            "seeds": len(rs),
            "failures": sum(not r.ok for r in rs),
            "redraws": sum(r.redraws for r in rs),
        }
        for path, rs in results.items()
    }


def main_report(seeds=range(20)) -> tuple[bool, dict]:
    t0 = time.perf_counter()
    summary = summarize(run_suite(seeds))
    ok = all(v["failures"] == 0 for v in summary.values())
    summary["seconds"] = time.perf_counter() - t0
    return ok, summary
