"""Desk-scale image classification tasks.

Two sources: a procedural generator (shapes drawn with textures over a
noisy background, where the class is the shape) and IDX files in the MNIST
layout.  Images are float64 arrays ``(n, res, res, channels)`` in [0, 1].
"""
from __future__ import annotations

import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

SPLITS = ("train", "validation", "test")

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

SHAPES = ("disc", "square", "triangle", "cross", "ring", "diamond", "hbar", "vbar")
TEXTURES = ("solid", "hstripes", "vstripes", "checker", "dots", "diagonal", "gradient", "speckle")


class IDXFormatError(ValueError):
    pass


@dataclass(frozen=True)
class SyntheticFamily:
    """Parameters of one procedural task.

    ``shapes`` are the classes (in label order).  ``textures`` is the
    nuisance vocabulary a sample's foreground is painted with.
    """
    shapes: tuple[str, ...]
    textures: tuple[str, ...]
    noise: float = 0.1
    jitter: float = 0.15
    palette_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "shapes", tuple(self.shapes))
        object.__setattr__(self, "textures", tuple(self.textures))
        for s in self.shapes:
            if s not in SHAPES:
                raise ValueError(f"unknown shape {s!r}")
        for t in self.textures:
            if t not in TEXTURES:
                raise ValueError(f"unknown texture {t!r}")


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    num_classes: int
    resolution: int
    channels: int = 3
    seed: int = 0
    family: SyntheticFamily | None = None
    idx_files: dict | None = None  # split -> [images_path, labels_path]
    split_sizes: dict = field(default_factory=lambda: {"train": 512, "validation": 128, "test": 128})

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("a task needs at least 2 classes")
        if self.channels not in (1, 3):
            raise ValueError("channels must be 1 or 3")
        if (self.family is None) == (self.idx_files is None):
            raise ValueError("a task is either synthetic or IDX-backed")
        if self.family is not None and len(self.family.shapes) != self.num_classes:
            raise ValueError("num_classes must equal the number of shapes")

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.family is not None:
            d["family"]["shapes"] = list(self.family.shapes)
            d["family"]["textures"] = list(self.family.textures)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        d = dict(d)
        if d.get("family") is not None:
            d["family"] = SyntheticFamily(**d["family"])
        return cls(**d)


@dataclass
class TaskData:
    spec: TaskSpec
    images: dict[str, np.ndarray]
    labels: dict[str, np.ndarray]

    def split(self, name: str):
        return self.images[name], self.labels[name]


# -- procedural generator --------------------------------------------------

def _shape_mask(shape: str, res: int, cx: float, cy: float, size: float) -> np.ndarray:
    coords = (np.arange(res) + 0.5) / res
    y, x = np.meshgrid(coords, coords, indexing="ij")
    dx, dy = x - cx, y - cy
    r = size / 2
    if shape == "disc":
        m = dx * dx + dy * dy <= r * r
    elif shape == "ring":
        d2 = dx * dx + dy * dy
        m = (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    elif shape == "square":
        m = (np.abs(dx) <= r * 0.85) & (np.abs(dy) <= r * 0.85)
    elif shape == "diamond":
        m = np.abs(dx) + np.abs(dy) <= r
    elif shape == "triangle":
        m = (dy <= r * 0.8) & (dy >= -r) & (np.abs(dx) <= (dy + r) * 0.6)
    elif shape == "cross":
        w = r * 0.35
        m = ((np.abs(dx) <= w) & (np.abs(dy) <= r)) | ((np.abs(dy) <= w) & (np.abs(dx) <= r))
    elif shape == "hbar":
        m = (np.abs(dx) <= r) & (np.abs(dy) <= r * 0.3)
    elif shape == "vbar":
        m = (np.abs(dy) <= r) & (np.abs(dx) <= r * 0.3)
    else:
        raise ValueError(shape)
    return m


def _texture(texture: str, res: int, color_a, color_b, phase: float, rng) -> np.ndarray:
    i, j = np.meshgrid(np.arange(res), np.arange(res), indexing="ij")
    period = max(2, res // 5)
    if texture == "solid":
        t = np.zeros((res, res))
    elif texture == "hstripes":
        t = ((i + phase * period) // (period / 2)) % 2
    elif texture == "vstripes":
        t = ((j + phase * period) // (period / 2)) % 2
    elif texture == "checker":
        t = ((i // (period / 2)) + (j // (period / 2))) % 2
    elif texture == "dots":
        t = ((i % period) < period / 2) & ((j % period) < period / 2)
    elif texture == "diagonal":
        t = ((i + j + phase * period) // (period / 2)) % 2
    elif texture == "gradient":
        t = j / max(1, res - 1)
    elif texture == "speckle":
        t = rng.random((res, res)) < 0.5
    else:
        raise ValueError(texture)
    t = np.asarray(t, dtype=np.float64)[..., None]
    return (1 - t) * color_a + t * color_b


def _palette(family: SyntheticFamily) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    # texture colors are part of the task identity, not per-sample noise
    rng = np.random.default_rng([1234, family.palette_seed])
    return {t: (rng.uniform(0.45, 1.0, 3), rng.uniform(0.0, 0.5, 3)) for t in TEXTURES}


def render_sample(family: SyntheticFamily, label: int, res: int, channels: int, rng) -> np.ndarray:
    palette = _palette(family)
    texture = family.textures[rng.integers(len(family.textures))]
    size = 0.55 * (1 + rng.uniform(-family.jitter, family.jitter))
    cx, cy = 0.5 + rng.uniform(-family.jitter, family.jitter, 2)
    mask = _shape_mask(family.shapes[label], res, cx, cy, size)[..., None]
    ca, cb = palette[texture]
    fg = _texture(texture, res, ca, cb, rng.random(), rng)
    bg = np.full((res, res, 3), rng.uniform(0.0, 0.35))
    img = np.where(mask, fg, bg) + rng.normal(0.0, family.noise, (res, res, 3))
    img = np.clip(img, 0.0, 1.0)
    if channels == 1:
        img = img.mean(axis=2, keepdims=True)
    return img


def generate_synthetic_task(spec: TaskSpec) -> TaskData:
    """Build all splits of a synthetic task; bitwise reproducible from ``spec.seed``."""
    if spec.family is None:
        raise ValueError(f"task {spec.task_id} is not synthetic")
    rng = np.random.default_rng(spec.seed)
    images, labels = {}, {}
    for name in SPLITS:
        n = spec.split_sizes[name]
        if n < spec.num_classes:
            raise ValueError(f"split {name} too small to hold every class")
        y = rng.permutation(np.arange(n) % spec.num_classes)
        x = np.stack([render_sample(spec.family, int(k), spec.resolution, spec.channels, rng) for k in y])
        images[name], labels[name] = x, y.astype(np.int64)
    return TaskData(spec, images, labels)


# -- IDX files ------------------------------------------------------------

def _read_header(buf: bytes, magic: int, path) -> tuple[list[int], int]:
    if len(buf) < 4:
        raise IDXFormatError(f"{path}: truncated header")
    (got,) = struct.unpack(">I", buf[:4])
    if got != magic:
        raise IDXFormatError(f"{path}: bad magic 0x{got:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    end = 4 + 4 * ndim
    if len(buf) < end:
        raise IDXFormatError(f"{path}: truncated header")
    dims = list(struct.unpack(f">{ndim}I", buf[4:end]))
    return dims, end


def load_idx(images_path, labels_path) -> tuple[np.ndarray, np.ndarray]:
    """Read an IDX image/label pair; pixels are scaled from u8 to [0, 1]."""
    ibuf = Path(images_path).read_bytes()
    lbuf = Path(labels_path).read_bytes()
    (n, rows, cols), ioff = _read_header(ibuf, IDX_IMAGES_MAGIC, images_path)
    (m,), loff = _read_header(lbuf, IDX_LABELS_MAGIC, labels_path)
    if n != m:
        raise IDXFormatError(f"count mismatch: {n} images vs {m} labels")
    if len(ibuf) - ioff < n * rows * cols:
        raise IDXFormatError(f"{images_path}: truncated pixel data")
    if len(lbuf) - loff < m:
        raise IDXFormatError(f"{labels_path}: truncated label data")
    pixels = np.frombuffer(ibuf, dtype=np.uint8, count=n * rows * cols, offset=ioff)
    images = pixels.reshape(n, rows, cols, 1).astype(np.float64) / 255.0
    labels = np.frombuffer(lbuf, dtype=np.uint8, count=m, offset=loff).astype(np.int64)
    return images, labels


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols))
        f.write(images.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)))
        f.write(labels.tobytes())


def load_task(spec: TaskSpec) -> TaskData:
    if spec.family is not None:
        return generate_synthetic_task(spec)
    images, labels = {}, {}
    for name in SPLITS:
        x, y = load_idx(*spec.idx_files[name])
        if y.max() >= spec.num_classes:
            raise IDXFormatError(f"{spec.task_id}/{name}: label {y.max()} >= num_classes")
        images[name] = resize(x, spec.resolution) if x.shape[1] != spec.resolution else x
        labels[name] = y
    return TaskData(spec, images, labels)


# -- image ops --------------------------------------------------------------

def _resize_axis(img: np.ndarray, out: int, axis: int) -> np.ndarray:
    n = img.shape[axis]
    if n == out:
        return img
    # half-pixel centres, edge clamped
    pos = (np.arange(out) + 0.5) * n / out - 0.5
    pos = np.clip(pos, 0, n - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n - 1)
    frac = pos - lo
    a = np.take(img, lo, axis=axis)
    b = np.take(img, hi, axis=axis)
    shape = [1] * img.ndim
    shape[axis] = out
    frac = frac.reshape(shape)
    return a * (1 - frac) + b * frac


def resize(image: np.ndarray, resolution: int) -> np.ndarray:
    """Bilinear resize of ``(h, w, c)`` or ``(n, h, w, c)`` images to a square size."""
    if resolution <= 0:
        raise ValueError("target resolution must be positive")
    off = image.ndim - 3
    out = _resize_axis(image, resolution, off)
    return _resize_axis(out, resolution, off + 1)


def match_channels(images: np.ndarray, channels: int) -> np.ndarray:
    have = images.shape[-1]
    if have == channels:
        return images
    if channels == 3:
        return np.repeat(images, 3, axis=-1)
    return images.mean(axis=-1, keepdims=True)


def adapt(images: np.ndarray, resolution: int, channels: int) -> np.ndarray:
    """Resize and channel-match a batch so a path can consume it."""
    if images.shape[1] != resolution:
        images = resize(images, resolution)
    return match_channels(images, channels)


@dataclass(frozen=True)
class PreprocessConfig:
    cropped_area_range_min: float = 1.0
    cropped_aspect_ratio_range_min: float = 1.0
    flip_left_right: bool = False
    brightness_delta: float = 0.0
    contrast_delta: float = 0.0
    saturation_delta: float = 0.0
    hue_delta: float = 0.0
    image_quality_delta: float = 0.0

    def is_identity(self) -> bool:
        return self == PreprocessConfig()


def crop_box(h: int, w: int, area_min: float, ratio_min: float, rng) -> tuple[int, int, int, int]:
    area = rng.uniform(area_min, 1.0) * h * w
    ratio = math.exp(rng.uniform(math.log(ratio_min), -math.log(ratio_min)))
    cw = int(min(w, max(1, round(math.sqrt(area * ratio)))))
    ch = int(min(h, max(1, round(area / cw))))
    cw = int(min(w, max(1, round(area / ch))))
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    return top, left, ch, cw


def _grayscale(img):
    return img.mean(axis=-1, keepdims=True)


def _rotate_hue(img, angle):
    # rotation about the grey axis in YIQ space
    to_yiq = np.array([[0.299, 0.587, 0.114], [0.596, -0.274, -0.322], [0.211, -0.523, 0.312]])
    c, s = math.cos(angle), math.sin(angle)
    rot = np.array([[1, 0, 0], [0, c, -s], [0, s, c]])
    m = np.linalg.inv(to_yiq) @ rot @ to_yiq
    return img @ m.T


def preprocess(image: np.ndarray, config: PreprocessConfig, rng, train_mode: bool) -> np.ndarray:
    """Augment one ``(h, w, c)`` image.  Eval mode returns the input untouched."""
    if not train_mode or config.is_identity():
        return image
    h, w, ch = image.shape
    out = image
    if config.cropped_area_range_min < 1.0 or config.cropped_aspect_ratio_range_min < 1.0:
        top, left, chh, cww = crop_box(h, w, config.cropped_area_range_min,
                                       config.cropped_aspect_ratio_range_min, rng)
        out = _resize_axis(_resize_axis(out[top:top + chh, left:left + cww], h, 0), w, 1)
    if config.flip_left_right and rng.random() < 0.5:
        out = out[:, ::-1]
    if config.brightness_delta:
        out = out + rng.uniform(-config.brightness_delta, config.brightness_delta)
    if config.contrast_delta:
        f = 1 + rng.uniform(-config.contrast_delta, config.contrast_delta)
        m = out.mean()
        out = (out - m) * f + m
    if ch == 3 and config.saturation_delta:
        f = 1 + rng.uniform(-config.saturation_delta, config.saturation_delta)
        g = _grayscale(out)
        out = g + (out - g) * f
    if ch == 3 and config.hue_delta:
        out = _rotate_hue(out, 2 * math.pi * rng.uniform(-config.hue_delta, config.hue_delta))
    if config.image_quality_delta:
        d = config.image_quality_delta
        out = out + rng.uniform(-d / 2, d / 2, out.shape)
    return np.clip(out, 0.0, 1.0)


def log_preprocess_simplifications(config: PreprocessConfig, channels: int) -> None:
    if channels == 1 and (config.saturation_delta or config.hue_delta):
        log.info("saturation/hue jitter is a no-op on single-channel images")
    if config.image_quality_delta:
        log.info("image quality delta applied as uniform quantisation noise")
