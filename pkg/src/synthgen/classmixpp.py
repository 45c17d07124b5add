"""Ground-truth guided class mixing of two labeled images."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .datasets import IGNORE, LabeledImage
from .numerics import Rng


@dataclass
class MixResult:
    image: np.ndarray  # [3, H, W]
    labels: np.ndarray  # [H, W]
    mask: np.ndarray  # [H, W] uint8, 1 = pixel taken from A
    selected_classes: list[int]

    def as_sample(self, domain: str = "mix") -> LabeledImage:
        return LabeledImage(self.image, self.labels, domain)


def argmax_labels(s: np.ndarray) -> np.ndarray:
    """Collapse ``[K, H, W]`` class scores to a label map; pass label maps through.

    ``np.argmax`` returns the first maximum, so ties go to the lowest class id.
    """
    s = np.asarray(s)
    if s.ndim == 2:
        return s.astype(np.int64)
    if s.ndim != 3 or s.shape[0] < 1:
        raise ValueError(f"expected [K,H,W] scores or [H,W] labels, got {s.shape}")
    return np.argmax(s, axis=0).astype(np.int64)


def class_set(labels: np.ndarray) -> list[int]:
    present = np.unique(np.asarray(labels))
    present = [int(c) for c in present if c != IGNORE]
    if not present:
        raise ValueError("label map has no labeled pixels")
    return present


def select_half(classes, rng: Rng) -> list[int]:
    classes = list(classes)
    if not classes:
        raise ValueError("cannot select from an empty class set")
    m = max(1, len(classes) // 2)
    return rng.choose_subset(classes, m)


def build_mask(labels: np.ndarray, selected) -> np.ndarray:
    labels = np.asarray(labels)
    selected = [int(c) for c in selected]
    if selected:
        present = set(np.unique(labels).tolist())
        absent = [c for c in selected if c not in present]
        if absent:
            warnings.warn(f"selected classes {absent} do not occur in the label map", stacklevel=2)
    # IGNORE is never selectable, so ignore pixels always come from B
    return np.isin(labels, [c for c in selected if c != IGNORE]).astype(np.uint8)


def mix_with_mask(a: LabeledImage, b: LabeledImage, mask: np.ndarray):
    m = mask.astype(bool)
    image = np.where(m[None], a.image, b.image)
    labels = np.where(m, a.labels, b.labels)
    return image, labels


def classmix_pp(a: LabeledImage, b: LabeledImage, rng: Rng) -> MixResult:
    """Paste the pixels of a random half of A's classes onto B."""
    if a.image.shape != b.image.shape:
        raise ValueError(f"shape mismatch: {a.image.shape} vs {b.image.shape}")
    s_a = argmax_labels(a.labels)
    c = select_half(class_set(s_a), rng)
    mask = build_mask(s_a, c)
    image, labels = mix_with_mask(a, b, mask)
    return MixResult(image, labels, mask, c)
