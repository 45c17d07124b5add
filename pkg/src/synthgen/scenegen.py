"""Procedural street-scene generator with per-domain styles.

A scene is painted back-to-front from axis-aligned rectangles and triangles.
Every paint call writes color and class id together, so labels trace the
painted geometry exactly.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .datasets import DatasetManifest, LabeledImage, SampleEntry, ensure_dir, write_pgm, write_ppm
from .numerics import Rng

DEFAULT_CLASSES = ["road", "sidewalk", "building", "sky", "vegetation", "vehicle", "person", "pole"]
EXTRA_CLASSES = ["terrain", "traffic_sign", "rider", "truck", "wall"]


@dataclass
class ClassSchema:
    names: list[str] = field(default_factory=lambda: list(DEFAULT_CLASSES))

    def __post_init__(self):
        if len(set(self.names)) != len(self.names):
            raise ValueError("class names must be unique")
        if not 1 <= len(self.names) <= 13:
            raise ValueError("class count must be between 1 and 13")
        missing = [c for c in DEFAULT_CLASSES if c not in self.names]
        if missing:
            raise ValueError(f"the generator paints {missing}; schema must include them")

    @classmethod
    def with_classes(cls, k: int) -> "ClassSchema":
        if not len(DEFAULT_CLASSES) <= k <= 13:
            raise ValueError(f"k must be in [{len(DEFAULT_CLASSES)}, 13]")
        return cls(DEFAULT_CLASSES + EXTRA_CLASSES[: k - len(DEFAULT_CLASSES)])

    @property
    def k(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        return self.names.index(name)


OBJECT_CLASSES = ("building", "vegetation", "vehicle", "person", "pole")


@dataclass
class SceneStyle:
    name: str
    palette: dict[str, list[float]]  # class -> mean RGB
    color_jitter: float = 0.05  # per-object color sigma
    horizon: tuple[float, float] = (0.35, 0.55)  # fraction of H
    road_width: tuple[float, float] = (0.45, 0.75)  # fraction of W at the bottom row
    counts: dict[str, tuple[int, int]] = field(default_factory=dict)  # inclusive ranges
    clutter: float = 0.0
    clutter_slots: int = 10
    noise: float = 0.02
    tint: list[float] = field(default_factory=lambda: [1.0, 1.0, 1.0])

    def __post_init__(self):
        self.horizon = tuple(self.horizon)
        self.road_width = tuple(self.road_width)
        self.counts = {k: tuple(v) for k, v in self.counts.items()}
        for name, (lo, hi) in [("horizon", self.horizon), ("road_width", self.road_width)]:
            if not 0.0 < lo <= hi < 1.0:
                raise ValueError(f"{name} range {lo, hi} must be non-empty inside (0, 1)")
        for k, (lo, hi) in self.counts.items():
            if k not in OBJECT_CLASSES:
                raise ValueError(f"unknown object class {k!r}")
            if not 0 <= lo <= hi:
                raise ValueError(f"count range for {k} must be non-empty and non-negative")
        if not 0.0 <= self.clutter <= 1.0:
            raise ValueError("clutter must be a probability")
        if self.noise < 0 or self.color_jitter < 0:
            raise ValueError("noise levels must be non-negative")
        if len(self.tint) != 3:
            raise ValueError("tint must be an RGB triple")

    def count_range(self, cls: str) -> tuple[int, int]:
        return self.counts.get(cls, (0, 0))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneStyle":
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "SceneStyle":
        return cls.from_dict(json.loads(Path(path).read_text()))


_BASE = {
    "road": [0.40, 0.40, 0.42],
    "sidewalk": [0.66, 0.60, 0.52],
    "building": [0.55, 0.36, 0.30],
    "sky": [0.55, 0.75, 0.95],
    "vegetation": [0.22, 0.55, 0.22],
    "vehicle": [0.18, 0.22, 0.62],
    "person": [0.85, 0.28, 0.30],
    "pole": [0.82, 0.78, 0.25],
}


def _shift(palette, fn):
    return {k: [float(np.clip(fn(i, c), 0.0, 1.0)) for i, c in enumerate(v)] for k, v in palette.items()}


def preset_styles() -> dict[str, SceneStyle]:
    bright = _shift(_BASE, lambda i, c: 1.12 * c + 0.04)
    muted = _shift(_BASE, lambda i, c: 0.65 * c + 0.18)
    # target palette: between the two source palettes, partly hue-rotated
    rot = {k: [v[1], v[2], v[0]] for k, v in _BASE.items()}
    target = {k: [0.5 * bright[k][i] + 0.5 * muted[k][i] for i in range(3)] for k in _BASE}
    target = {k: [0.8 * target[k][i] + 0.2 * rot[k][i] for i in range(3)] for k in _BASE}
    structured_counts = {
        "building": (2, 4),
        "vegetation": (1, 3),
        "vehicle": (1, 3),
        "person": (1, 3),
        "pole": (1, 3),
    }
    return {
        "src_a": SceneStyle(
            "src_a", bright, color_jitter=0.06, counts=structured_counts,
            clutter=0.1, noise=0.02, tint=[1.05, 1.0, 0.92],
        ),
        "src_b": SceneStyle(
            "src_b", muted, color_jitter=0.04,
            counts={"building": (2, 4), "vegetation": (2, 4), "vehicle": (1, 2), "pole": (0, 2)},
            clutter=0.05, noise=0.015, tint=[0.92, 0.98, 1.06],
        ),
        "tgt_structured": SceneStyle(
            "tgt_structured", target, color_jitter=0.05, counts=structured_counts,
            clutter=0.1, noise=0.03, tint=[0.95, 1.0, 1.0],
        ),
        "tgt_unstructured": SceneStyle(
            "tgt_unstructured", target, color_jitter=0.07,
            horizon=(0.3, 0.5), road_width=(0.35, 0.7),
            counts={"building": (3, 5), "vegetation": (2, 4), "vehicle": (2, 5), "person": (2, 6), "pole": (2, 4)},
            clutter=0.8, clutter_slots=12, noise=0.04, tint=[0.95, 1.0, 1.0],
        ),
    }


PRESETS = preset_styles()


def get_style(name: str) -> SceneStyle:
    if name not in PRESETS:
        raise KeyError(f"unknown style {name!r}; valid presets: {', '.join(sorted(PRESETS))}")
    return PRESETS[name]


# ---------------------------------------------------------------------------
# painting
# ---------------------------------------------------------------------------

class _Canvas:
    def __init__(self, h: int, w: int, style: SceneStyle, schema: ClassSchema, rng: Rng):
        self.h, self.w = h, w
        self.img = np.zeros((3, h, w))
        self.lab = np.zeros((h, w), dtype=np.int64)
        self.style, self.schema, self.rng = style, schema, rng
        self.ys = np.arange(h)[:, None] + 0.5
        self.xs = np.arange(w)[None, :] + 0.5

    def color(self, cls: str) -> np.ndarray:
        base = np.asarray(self.style.palette[cls], dtype=np.float64)
        return base + self.style.color_jitter * self.rng.normal(3)

    def paint(self, mask: np.ndarray, cls: str, color=None, shade=None) -> None:
        if not mask.any():
            return
        col = self.color(cls) if color is None else color
        pix = np.broadcast_to(col[:, None, None], self.img.shape)
        if shade is not None:
            pix = pix * shade[None]
        self.img[:, mask] = pix[:, mask]
        self.lab[mask] = self.schema.index(cls)

    def rect(self, r0, r1, c0, c1) -> np.ndarray:
        r0, r1 = max(0, int(round(r0))), min(self.h, int(round(r1)))
        c0, c1 = max(0, int(round(c0))), min(self.w, int(round(c1)))
        m = np.zeros((self.h, self.w), dtype=bool)
        if r1 > r0 and c1 > c0:
            m[r0:r1, c0:c1] = True
        return m

    def triangle(self, p0, p1, p2) -> np.ndarray:
        """Pixels whose centres fall inside the triangle with (row, col) vertices."""
        def side(a, b):
            return (b[1] - a[1]) * (self.ys - a[0]) - (b[0] - a[0]) * (self.xs - a[1])
        d0, d1, d2 = side(p0, p1), side(p1, p2), side(p2, p0)
        neg = (d0 < 0) | (d1 < 0) | (d2 < 0)
        pos = (d0 > 0) | (d1 > 0) | (d2 > 0)
        return ~(neg & pos)


def generate_scene(style: SceneStyle, schema: ClassSchema, h: int, w: int, rng: Rng) -> LabeledImage:
    if h < 32 or w < 32:
        raise ValueError(f"scenes must be at least 32x32, got {h}x{w}")
    cv = _Canvas(h, w, style, schema, rng)
    u = rng.uniform

    horizon = u(*style.horizon) * h
    vx = u(0.35, 0.65) * w
    half = 0.5 * u(*style.road_width) * w

    # sky with a vertical gradient
    sky_shade = np.broadcast_to(1.0 - 0.25 * (cv.ys / h), (h, w))
    cv.paint(cv.ys < horizon + np.zeros((1, w)), "sky", shade=sky_shade)
    ground = cv.ys >= horizon + np.zeros((1, w))
    cv.paint(ground, "sidewalk")
    road_shade = np.broadcast_to(0.8 + 0.2 * (cv.ys - horizon) / max(h - horizon, 1), (h, w))
    road = cv.triangle((horizon - 1e-6, vx), (h + 0.5 * h, vx - 1.5 * half), (h + 0.5 * h, vx + 1.5 * half))
    cv.paint(road & ground, "road", shade=road_shade)

    def side_x(width):
        # left or right third of the frame, away from the vanishing column
        if u() < 0.5:
            return u(-0.1 * w, max(vx - 0.15 * w - width, -0.1 * w + 1))
        return u(min(vx + 0.15 * w, 1.1 * w - width - 1), 1.1 * w - width)

    n = {c: int(rng.integers(lo, hi + 1)) for c in OBJECT_CLASSES for lo, hi in [style.count_range(c)]}

    for _ in range(n["building"]):
        bw = u(0.12, 0.3) * w
        bh = u(0.15, 0.9) * horizon
        c0 = side_x(bw)
        cv.paint(cv.rect(horizon - bh, horizon + 0.04 * h, c0, c0 + bw), "building")
        # windows: darker rows inside the block, still building
        win = cv.color("building") * 0.6
        for r in np.arange(horizon - bh + 2, horizon - 2, 4.0):
            cv.paint(cv.rect(r, r + 1.5, c0 + 1, c0 + bw - 1), "building", color=win)

    for _ in range(n["vegetation"]):
        tw = u(0.08, 0.2) * w
        th = u(0.15, 0.45) * h
        c = side_x(tw) + tw / 2
        base = horizon + u(0.0, 0.08) * h
        cv.paint(cv.triangle((base - th, c), (base, c - tw / 2), (base, c + tw / 2)), "vegetation")

    def depth_scale(row):
        return 0.3 + 0.9 * (row - horizon) / max(h - horizon, 1)

    def place(cls, row, col):
        s = depth_scale(row)
        if cls == "vehicle":
            vw, vh = s * u(0.18, 0.3) * w, s * u(0.08, 0.14) * h
            cv.paint(cv.rect(row - vh, row, col - vw / 2, col + vw / 2), "vehicle")
            cv.paint(cv.rect(row - vh * 0.9, row - vh * 0.6, col - vw * 0.35, col + vw * 0.35),
                     "vehicle", color=cv.color("vehicle") * 0.5 + 0.3)
        elif cls == "person":
            pw, ph = max(1.5, s * 0.035 * w), s * u(0.14, 0.22) * h
            cv.paint(cv.rect(row - ph, row, col - pw / 2, col + pw / 2), "person")
        elif cls == "pole":
            ph = s * u(0.35, 0.6) * h
            cv.paint(cv.rect(row - ph, row, col - 0.75, col + 0.75), "pole")
        elif cls == "building":
            bw, bh = s * u(0.15, 0.3) * w, s * u(0.15, 0.35) * h
            cv.paint(cv.rect(row - bh, row, col - bw / 2, col + bw / 2), "building")
        elif cls == "vegetation":
            tw, th = s * u(0.1, 0.2) * w, s * u(0.1, 0.25) * h
            cv.paint(cv.triangle((row - th, col), (row, col - tw / 2), (row, col + tw / 2)), "vegetation")

    def road_half(row):
        return 1.5 * half * (row - horizon) / (1.5 * h - horizon)

    for _ in range(n["pole"]):
        row = u(horizon + 0.1 * (h - horizon), h)
        off = road_half(row) + u(1.0, 4.0)
        place("pole", row, vx - off if u() < 0.5 else vx + off)
    for _ in range(n["vehicle"]):
        row = u(horizon + 0.25 * (h - horizon), h + 2)
        place("vehicle", row, vx + u(-0.6, 0.6) * road_half(row))
    for _ in range(n["person"]):
        row = u(horizon + 0.2 * (h - horizon), h)
        off = road_half(row) + u(2.0, 0.15 * w)
        place("person", row, vx - off if u() < 0.5 else vx + off)

    # distractors placed anywhere on the ground
    for _ in range(style.clutter_slots):
        if u() < style.clutter:
            cls = OBJECT_CLASSES[int(rng.integers(0, len(OBJECT_CLASSES)))]
            place(cls, u(horizon + 0.1 * (h - horizon), h + 2), u(0, w))

    tint = np.asarray(style.tint, dtype=np.float64)[:, None, None]
    img = cv.img * tint + style.noise * rng.normal((3, h, w))
    return LabeledImage(np.clip(img, 0.0, 1.0), cv.lab, style.name)


def generate_dataset(style: SceneStyle, schema: ClassSchema, n: int, seed: int, out_dir,
                     size: int | tuple[int, int] = 64, name: str | None = None) -> DatasetManifest:
    """Write ``n`` scenes as PPM/PGM pairs plus ``manifest.json`` under ``out_dir``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    h, w = (size, size) if isinstance(size, int) else size
    out = ensure_dir(out_dir)
    root = Rng(seed)
    samples = []
    for i in range(n):
        s = generate_scene(style, schema, h, w, root.derive(i))
        img_name, lab_name = f"{i:05d}.ppm", f"{i:05d}_labels.pgm"
        write_ppm(out / img_name, s.image)
        write_pgm(out / lab_name, s.labels)
        samples.append(SampleEntry(img_name, lab_name, style.name))
    manifest = DatasetManifest(name or style.name, list(schema.names), samples, seed, root=out)
    manifest.save()
    return manifest
