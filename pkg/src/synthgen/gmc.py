"""Patch masking and the ground-truth masked consistency loss."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import model
from .datasets import IGNORE
from .numerics import Rng, seg_cross_entropy


@dataclass
class PatchMask:
    patch: int
    ratio: float
    grid: np.ndarray  # [H/b, W/b] uint8; 1 = visible

    @property
    def expanded(self) -> np.ndarray:
        return np.kron(self.grid, np.ones((self.patch, self.patch), dtype=np.uint8))

    @property
    def visible_fraction(self) -> float:
        return float(self.grid.mean())


def sample_patch_mask(h: int, w: int, b: int, r: float, rng: Rng) -> PatchMask:
    """Each b x b cell stays visible iff its draw v ~ U(0, 1) exceeds r."""
    if b < 1:
        raise ValueError("patch size must be >= 1")
    if h % b or w % b:
        raise ValueError(f"patch grid misalignment: {b} does not divide {h}x{w}")
    if not 0.0 <= r <= 1.0:
        raise ValueError(f"mask ratio {r} outside [0, 1]")
    v = rng.uniform(size=(h // b, w // b))
    return PatchMask(b, r, (v > r).astype(np.uint8))


def apply_mask(x, mask: PatchMask) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    m = mask.expanded
    if x.shape[-2:] != m.shape:
        raise ValueError(f"mask {m.shape} does not match image {x.shape[-2:]}")
    return x * m


def gmc_loss(params, x, y, b: int, r: float, rng: Rng, ignore_index: int = IGNORE):
    """Cross-entropy of the prediction on a patch-masked input against ground truth.

    ``x`` is ``[3,H,W]`` or a batch ``[N,3,H,W]`` (one mask per image). The loss
    is averaged over every labeled pixel, masked or not.

    Returns ``(loss, grads, masks)``.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    single = x.ndim == 3
    xb = x[None] if single else x
    yb = y[None] if single else y
    n, _, h, w = xb.shape
    masks = [sample_patch_mask(h, w, b, r, rng) for _ in range(n)]
    xm = np.stack([apply_mask(xi, m) for xi, m in zip(xb, masks)])
    logits, cache = model.forward(params, xm)
    loss, dlogits = seg_cross_entropy(logits, yb, ignore_index)
    grads = model.backward(params, cache, dlogits)
    return loss, grads, masks
