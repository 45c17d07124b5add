"""Labeled images, Netpbm file IO, dataset manifests and augmentations."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import Rng

IGNORE = 255


class NetpbmError(ValueError):
    pass


@dataclass
class LabeledImage:
    image: np.ndarray  # [3, H, W] float64 in [0, 1]
    labels: np.ndarray  # [H, W] int64, class ids or IGNORE
    domain: str = ""

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise ValueError(f"image must be [3,H,W], got {self.image.shape}")
        if self.labels.shape != self.image.shape[1:]:
            raise ValueError(
                f"labels {self.labels.shape} do not match image {self.image.shape[1:]}"
            )

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape

    def validate(self, num_classes: int) -> None:
        bad = (self.labels != IGNORE) & ((self.labels < 0) | (self.labels >= num_classes))
        if bad.any():
            raise ValueError(f"label values outside [0, {num_classes}) and not {IGNORE}")
        if self.image.min() < 0.0 or self.image.max() > 1.0:
            raise ValueError("image values outside [0, 1]")


# ---------------------------------------------------------------------------
# Netpbm
# ---------------------------------------------------------------------------

def _quantize(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.min() < 0.0 or image.max() > 1.0:
        raise ValueError("image values must lie in [0, 1]")
    return np.rint(image * 255.0).astype(np.uint8)


def encode_ppm(image: np.ndarray) -> bytes:
    q = _quantize(image)
    _, h, w = q.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + q.transpose(1, 2, 0).tobytes()


def encode_pgm(labels: np.ndarray) -> bytes:
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ValueError("label map must be 2-D")
    if labels.min() < 0 or labels.max() > 255:
        raise ValueError("label values must fit in 8 bits")
    h, w = labels.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + labels.astype(np.uint8).tobytes()


def _parse_header(data: bytes, magic: bytes):
    """Return ``(width, height, maxval, payload_offset)``."""
    if data[:2] != magic:
        raise NetpbmError(f"byte 0: expected magic {magic!r}, found {data[:2]!r}")
    pos = 2
    fields = []
    while len(fields) < 3:
        # whitespace and comments
        while pos < len(data) and (data[pos:pos + 1].isspace() or data[pos:pos + 1] == b"#"):
            if data[pos:pos + 1] == b"#":
                while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                    pos += 1
            else:
                pos += 1
        start = pos
        while pos < len(data) and data[pos:pos + 1].isdigit():
            pos += 1
        if pos == start:
            raise NetpbmError(f"byte {pos}: malformed header, expected an integer")
        fields.append(int(data[start:pos]))
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise NetpbmError(f"byte {pos}: malformed header, expected whitespace after maxval")
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise NetpbmError(f"byte {pos}: non-positive dimensions {width}x{height}")
    if maxval != 255:
        raise NetpbmError(f"byte {pos}: unsupported maxval {maxval} (need 255)")
    return width, height, maxval, pos + 1


def decode_ppm(data: bytes) -> np.ndarray:
    w, h, _, off = _parse_header(data, b"P6")
    need = 3 * w * h
    if len(data) - off < need:
        raise NetpbmError(f"byte {len(data)}: truncated payload, expected {need} bytes from byte {off}")
    raw = np.frombuffer(data, dtype=np.uint8, count=need, offset=off)
    return raw.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float64) / 255.0


def decode_pgm(data: bytes) -> np.ndarray:
    w, h, _, off = _parse_header(data, b"P5")
    need = w * h
    if len(data) - off < need:
        raise NetpbmError(f"byte {len(data)}: truncated payload, expected {need} bytes from byte {off}")
    raw = np.frombuffer(data, dtype=np.uint8, count=need, offset=off)
    return raw.reshape(h, w).astype(np.int64)


def write_ppm(path, image) -> None:
    Path(path).write_bytes(encode_ppm(image))


def read_ppm(path) -> np.ndarray:
    return decode_ppm(Path(path).read_bytes())


def write_pgm(path, labels) -> None:
    Path(path).write_bytes(encode_pgm(labels))


def read_pgm(path) -> np.ndarray:
    return decode_pgm(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------

@dataclass
class SampleEntry:
    image: str
    labels: str
    domain: str


@dataclass
class DatasetManifest:
    name: str
    classes: list[str]
    samples: list[SampleEntry] = field(default_factory=list)
    seed: int = 0
    root: Path = field(default=Path("."), compare=False)

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "classes": list(self.classes),
            "samples": [
                {"image": s.image, "labels": s.labels, "domain": s.domain} for s in self.samples
            ],
            "seed": self.seed,
        }

    def save(self, path=None) -> Path:
        path = Path(path) if path is not None else self.root / "manifest.json"
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.json"
        d = json.loads(path.read_text())
        missing = [k for k in ("name", "classes", "samples", "seed") if k not in d]
        if missing:
            raise ValueError(f"{path}: manifest missing keys {missing}")
        samples = [SampleEntry(s["image"], s["labels"], s["domain"]) for s in d["samples"]]
        return cls(d["name"], list(d["classes"]), samples, int(d["seed"]), root=path.parent)

    def image_path(self, i: int) -> Path:
        return self.root / self.samples[i].image

    def label_path(self, i: int) -> Path:
        return self.root / self.samples[i].labels

    def read_image(self, i: int) -> np.ndarray:
        return read_ppm(self.image_path(i))

    def read_labels(self, i: int) -> np.ndarray:
        return read_pgm(self.label_path(i))

    def read_sample(self, i: int) -> LabeledImage:
        return LabeledImage(self.read_image(i), self.read_labels(i), self.samples[i].domain)

    def load_all(self) -> list[LabeledImage]:
        return [self.read_sample(i) for i in range(len(self.samples))]

    def __len__(self) -> int:
        return len(self.samples)


# ---------------------------------------------------------------------------
# Geometric transforms
# ---------------------------------------------------------------------------

def _check_size(h: int, w: int) -> None:
    if h < 1 or w < 1:
        raise ValueError(f"target size must be positive, got {h}x{w}")


def resize_bilinear(image, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of ``[C, H, W]`` using half-pixel centres (align_corners=False)."""
    _check_size(out_h, out_w)
    image = np.asarray(image, dtype=np.float64)
    _, h, w = image.shape
    if (h, w) == (out_h, out_w):
        return image.copy()

    def axis(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1)
        lo = np.floor(src).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    y0, y1, fy = axis(h, out_h)
    x0, x1, fx = axis(w, out_w)
    top = image[:, y0] * (1 - fy)[None, :, None] + image[:, y1] * fy[None, :, None]
    return top[:, :, x0] * (1 - fx) + top[:, :, x1] * fx


def resize_nearest(labels, out_h: int, out_w: int) -> np.ndarray:
    _check_size(out_h, out_w)
    labels = np.asarray(labels)
    h, w = labels.shape
    ys = np.minimum(((np.arange(out_h) + 0.5) * h / out_h).astype(np.int64), h - 1)
    xs = np.minimum(((np.arange(out_w) + 0.5) * w / out_w).astype(np.int64), w - 1)
    return labels[ys[:, None], xs[None, :]]


def resize_sample(sample: LabeledImage, out_h: int, out_w: int) -> LabeledImage:
    return LabeledImage(
        resize_bilinear(sample.image, out_h, out_w),
        resize_nearest(sample.labels, out_h, out_w),
        sample.domain,
    )


def random_crop(sample: LabeledImage, h: int, w: int, rng: Rng) -> LabeledImage:
    H, W = sample.shape
    if h > H or w > W or h < 1 or w < 1:
        raise ValueError(f"crop {h}x{w} does not fit image {H}x{W}")
    top = int(rng.integers(0, H - h + 1))
    left = int(rng.integers(0, W - w + 1))
    return LabeledImage(
        sample.image[:, top:top + h, left:left + w].copy(),
        sample.labels[top:top + h, left:left + w].copy(),
        sample.domain,
    )


# ---------------------------------------------------------------------------
# Photometric transforms
# ---------------------------------------------------------------------------

def adjust_color(image, brightness: float, contrast: float) -> np.ndarray:
    """Scale by ``brightness`` then stretch around the mean intensity by ``contrast``."""
    x = np.asarray(image, dtype=np.float64) * brightness
    if contrast != 1.0:
        m = x.mean()
        x = (x - m) * contrast + m
    return np.clip(x, 0.0, 1.0)


def color_jitter(image, brightness=(0.8, 1.2), contrast=(0.8, 1.2), rng: Rng | None = None):
    for lo, hi in (brightness, contrast):
        if lo <= 0 or hi < lo:
            raise ValueError(f"jitter range ({lo}, {hi}) must be positive and ordered")
    rng = rng or Rng(0)
    b = float(rng.uniform(*brightness))
    c = float(rng.uniform(*contrast))
    return adjust_color(image, b, c)


def gaussian_kernel3(sigma: float) -> np.ndarray:
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    k = np.exp(-np.array([1.0, 0.0, 1.0]) / (2 * sigma * sigma))
    return k / k.sum()


def gaussian_blur(image, sigma: float = 0.8) -> np.ndarray:
    """Separable 3x3 Gaussian blur with reflect padding (edge pixel not repeated)."""
    k = gaussian_kernel3(sigma)
    x = np.asarray(image, dtype=np.float64)
    p = np.pad(x, ((0, 0), (1, 1), (0, 0)), mode="reflect")
    x = k[0] * p[:, :-2] + k[1] * p[:, 1:-1] + k[2] * p[:, 2:]
    p = np.pad(x, ((0, 0), (0, 0), (1, 1)), mode="reflect")
    return k[0] * p[:, :, :-2] + k[1] * p[:, :, 1:-1] + k[2] * p[:, :, 2:]


@dataclass
class AugmentConfig:
    """Resize-then-crop plus photometric noise, applied to training samples."""

    resize: int = 64
    crop: int = 56
    brightness: tuple[float, float] = (0.8, 1.2)
    contrast: tuple[float, float] = (0.8, 1.2)
    blur_prob: float = 0.3
    blur_sigma: float = 0.8
    enabled: bool = True


def augment(sample: LabeledImage, cfg: AugmentConfig, rng: Rng) -> LabeledImage:
    if sample.shape != (cfg.resize, cfg.resize):
        sample = resize_sample(sample, cfg.resize, cfg.resize)
    if not cfg.enabled:
        if cfg.crop != cfg.resize:
            off = (cfg.resize - cfg.crop) // 2
            sample = LabeledImage(
                sample.image[:, off:off + cfg.crop, off:off + cfg.crop],
                sample.labels[off:off + cfg.crop, off:off + cfg.crop],
                sample.domain,
            )
        return sample
    out = random_crop(sample, cfg.crop, cfg.crop, rng)
    img = color_jitter(out.image, cfg.brightness, cfg.contrast, rng)
    if rng.uniform() < cfg.blur_prob:
        img = gaussian_blur(img, cfg.blur_sigma)
    return LabeledImage(img, out.labels, out.domain)


def photometric(image, cfg: AugmentConfig, rng: Rng) -> np.ndarray:
    """Color jitter and optional blur only; geometry untouched."""
    img = color_jitter(image, cfg.brightness, cfg.contrast, rng)
    if rng.uniform() < cfg.blur_prob:
        img = gaussian_blur(img, cfg.blur_sigma)
    return img


def ensure_dir(path) -> Path:
    path = Path(path)
    os.makedirs(path, exist_ok=True)
    return path
