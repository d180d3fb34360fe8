"""Datasets, continual-learning scenarios, augmentations and corruptions.

Images are ``[H, W]`` float64 arrays in ``[0, 1]``; datasets hold stacks
``[n, H, W]`` with integer labels.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from . import _ext

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
SCENARIOS = ("class_il", "domain_il", "general_il")


class FormatError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.num_classes)

    @property
    def image_shape(self) -> Tuple[int, int]:
        return tuple(self.images.shape[1:])


# ---------------------------------------------------------------------------
# IDX files
# ---------------------------------------------------------------------------


def _read_header(blob: bytes, path, magic: int, ndims: int):
    need = 4 * (1 + ndims)
    if len(blob) < need:
        raise FormatError(f"{path}: truncated header")
    got, *dims = struct.unpack(f">{1 + ndims}I", blob[:need])
    if got != magic:
        raise FormatError(f"{path}: magic 0x{got:08x}, expected 0x{magic:08x}")
    expected = int(np.prod(dims))
    if len(blob) - need < expected:
        raise FormatError(f"{path}: truncated payload ({len(blob) - need} of {expected} bytes)")
    return dims, np.frombuffer(blob, dtype=np.uint8, count=expected, offset=need)


def load_idx(images_path, labels_path) -> Dataset:
    """Read an MNIST-style IDX image/label pair; pixels are scaled by 1/255."""
    (n, rows, cols), pix = _read_header(Path(images_path).read_bytes(), images_path, IMAGE_MAGIC, 3)
    (m,), lab = _read_header(Path(labels_path).read_bytes(), labels_path, LABEL_MAGIC, 1)
    if n != m:
        raise FormatError(f"image count {n} does not match label count {m}")
    labels = lab.astype(np.int64)
    return Dataset(pix.reshape(n, rows, cols) / 255.0, labels, int(labels.max()) + 1 if m else 0)


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray) -> None:
    """Write unsigned-byte IDX files (images given as bytes or as floats in [0, 1])."""
    images = np.asarray(images)
    if images.dtype != np.uint8:
        images = np.rint(np.clip(images, 0.0, 1.0) * 255.0).astype(np.uint8)
    n, rows, cols = images.shape
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">4I", IMAGE_MAGIC, n, rows, cols))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">2I", LABEL_MAGIC, len(labels)))
        fh.write(np.asarray(labels, dtype=np.uint8).tobytes())


MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def find_mnist(directory=None) -> Optional[Path]:
    """Directory holding the four MNIST IDX files; ``TARC_DATA_DIR`` is tried first."""
    for c in (os.environ.get("TARC_DATA_DIR"), directory):
        if c and all((Path(c) / f).exists() for pair in MNIST_FILES.values() for f in pair):
            return Path(c)
    return None


# ---------------------------------------------------------------------------
# synthetic digits
# ---------------------------------------------------------------------------


def _class_strokes(num_classes: int, image_size: int, styles: int):
    """Stroke layout per class and style; fixed across seeds so every split shares one label semantics."""
    layout_rng = np.random.default_rng(12345)
    centre = (image_size - 1) / 2.0
    table = []
    for _ in range(num_classes):
        per_style = []
        for _ in range(styles):
            strokes = []
            for _ in range(2):
                ang = layout_rng.uniform(0.0, 2.0 * math.pi)
                r = layout_rng.uniform(0.05, 0.3) * image_size
                strokes.append((centre + r * math.sin(ang), centre + r * math.cos(ang), layout_rng.uniform(0.0, math.pi)))
            per_style.append(strokes)
        table.append(per_style)
    return table


def synthetic_digits(
    num_classes: int = 10,
    per_class: int = 200,
    image_size: int = 28,
    seed: int = 0,
    styles: int = 3,
    jitter: float = 0.7,
    noise: float = 0.1,
) -> Dataset:
    """Digit-like images: each class draws one of ``styles`` two-stroke glyphs.

    A stroke is an elongated Gaussian. Samples shift the whole glyph by
    ``N(0, jitter)`` pixels, perturb stroke orientation, scale stroke
    intensity and add Gaussian pixel noise. Identity depends on position,
    so horizontal flips do not preserve labels.
    """
    if not 1 <= num_classes <= 10:
        raise ValueError(f"num_classes must lie in [1, 10], got {num_classes}")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:image_size, 0:image_size].astype(np.float64)
    major, minor = image_size / 6.0, image_size / 16.0
    images, labels = [], []
    for c, glyphs in enumerate(_class_strokes(num_classes, image_size, styles)):
        style = rng.integers(0, styles, per_class)
        shift_y = rng.normal(0.0, jitter, per_class)
        shift_x = rng.normal(0.0, jitter, per_class)
        img = np.zeros((per_class, image_size, image_size))
        for s, strokes in enumerate(glyphs):
            sel = style == s
            n = int(sel.sum())
            for cy, cx, theta in strokes:
                th = (theta + rng.normal(0.0, 0.2, n))[:, None, None]
                dy = yy[None] - (cy + shift_y[sel])[:, None, None]
                dx = xx[None] - (cx + shift_x[sel])[:, None, None]
                u = dx * np.cos(th) + dy * np.sin(th)
                v = -dx * np.sin(th) + dy * np.cos(th)
                amp = rng.uniform(0.6, 1.0, n)[:, None, None]
                img[sel] += amp * np.exp(-0.5 * ((u / major) ** 2 + (v / minor) ** 2))
        img += rng.normal(0.0, noise, img.shape)
        images.append(np.clip(img, 0.0, 1.0))
        labels.append(np.full(per_class, c, dtype=np.int64))
    return Dataset(np.concatenate(images), np.concatenate(labels), num_classes)


def synthetic_split(num_classes=10, train_per_class=200, test_per_class=100, image_size=28, seed=0):
    train = synthetic_digits(num_classes, train_per_class, image_size, seed)
    test = synthetic_digits(num_classes, test_per_class, image_size, seed + 7919)
    return train, test


# ---------------------------------------------------------------------------
# scenarios
# ---------------------------------------------------------------------------


@dataclass
class TaskSpec:
    task_id: int
    classes: Tuple[int, ...]
    train_indices: np.ndarray
    test_indices: np.ndarray
    angle: Optional[float] = None
    angle_range: Optional[Tuple[float, float]] = None

    def describe(self) -> dict:
        return {
            "task_id": self.task_id,
            "classes": list(self.classes),
            "angle": self.angle,
            "angle_range": list(self.angle_range) if self.angle_range else None,
            "n_train": int(len(self.train_indices)),
            "n_test": int(len(self.test_indices)),
        }


@dataclass
class ScenarioStream:
    scenario: str
    tasks: List[TaskSpec]
    train: Dataset
    test: Dataset
    seed: int
    _cache: Dict[tuple, Tuple[np.ndarray, np.ndarray]] = field(default_factory=dict, repr=False)

    @property
    def num_tasks(self) -> int:
        return len(self.tasks)

    @property
    def num_classes(self) -> int:
        return self.train.num_classes

    def task_data(self, t: int, split: str = "train") -> Tuple[np.ndarray, np.ndarray]:
        """Images and labels of task ``t`` with the task's rotation already applied."""
        key = (t, split)
        if key not in self._cache:
            task = self.tasks[t]
            src = self.train if split == "train" else self.test
            idx = task.train_indices if split == "train" else task.test_indices
            images, labels = src.images[idx], src.labels[idx]
            if task.angle is not None:
                images = rotate_images(images, np.full(len(images), task.angle))
            elif task.angle_range is not None:
                lo, hi = task.angle_range
                angles = lo + (hi - lo) * np.arange(len(images)) / max(len(images), 1)
                images = rotate_images(images, angles)
            self._cache[key] = (images, labels)
        return self._cache[key]

    def task_class_map(self) -> np.ndarray:
        """Class id -> task id (Class-IL only)."""
        out = np.full(self.num_classes, -1, dtype=np.int64)
        for task in self.tasks:
            out[list(task.classes)] = task.task_id
        return out

    def describe(self) -> dict:
        return {"scenario": self.scenario, "seed": self.seed, "tasks": [t.describe() for t in self.tasks]}

    def export_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.describe(), indent=2, sort_keys=True))


def rotate_images(images: np.ndarray, angles) -> np.ndarray:
    images = np.ascontiguousarray(images, dtype=np.float64)
    return _ext.rotate(images, np.ascontiguousarray(angles, dtype=np.float64))


def build_class_il(train: Dataset, test: Dataset, classes_per_task: int, seed: int = 0) -> ScenarioStream:
    C = train.num_classes
    if classes_per_task < 1 or C % classes_per_task:
        raise ValueError(f"{C} classes cannot be split into tasks of {classes_per_task}")
    rng = np.random.default_rng(seed)
    tasks = []
    for t in range(C // classes_per_task):
        classes = tuple(range(t * classes_per_task, (t + 1) * classes_per_task))
        tr = np.flatnonzero(np.isin(train.labels, classes))
        te = np.flatnonzero(np.isin(test.labels, classes))
        tasks.append(TaskSpec(t, classes, rng.permutation(tr), te))
    return ScenarioStream("class_il", tasks, train, test, seed)


def build_rotated_domain_il(
    train: Dataset,
    test: Dataset,
    n_tasks: int = 20,
    seed: int = 0,
    samples_per_task: Optional[int] = None,
    test_per_task: Optional[int] = None,
) -> ScenarioStream:
    """Every task sees all classes under its own rotation drawn from ``[0, pi)``."""
    if n_tasks < 1:
        raise ValueError("n_tasks must be >= 1")
    rng = np.random.default_rng(seed)
    angles = rng.uniform(0.0, math.pi, n_tasks)
    classes = tuple(range(train.num_classes))
    tasks = []
    for t in range(n_tasks):
        tr = rng.permutation(len(train))[: samples_per_task or len(train)]
        te = np.sort(rng.permutation(len(test))[: test_per_task or len(test)])
        tasks.append(TaskSpec(t, classes, tr, te, angle=float(angles[t])))
    return ScenarioStream("domain_il", tasks, train, test, seed)


def build_general_il(
    train: Dataset,
    test: Dataset,
    rounds: int = 6,
    seed: int = 0,
    samples_per_segment: int = 200,
    test_per_segment: int = 100,
) -> ScenarioStream:
    """Consecutive digit pairs (0,1), (1,2), ... (8,9), repeated ``rounds`` times.

    The rotation ramps linearly over the whole stream from 0 to just under one
    full revolution, so each round advances a given pair by ``2*pi/rounds``.
    """
    if train.num_classes != 10:
        raise ValueError("General-IL needs a 10-class dataset")
    rng = np.random.default_rng(seed)
    steps = 9 * rounds
    tasks = []
    for s in range(steps):
        c = s % 9
        classes = (c, c + 1)
        tr_pool = np.flatnonzero(np.isin(train.labels, classes))
        te_pool = np.flatnonzero(np.isin(test.labels, classes))
        tr = rng.permutation(tr_pool)[:samples_per_segment]
        te = np.sort(rng.permutation(te_pool)[:test_per_segment])
        lo, hi = 2.0 * math.pi * s / steps, 2.0 * math.pi * (s + 1) / steps
        tasks.append(TaskSpec(s, classes, tr, te, angle_range=(lo, hi)))
    return ScenarioStream("general_il", tasks, train, test, seed)


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


@dataclass
class AugmentConfig:
    crop_scale: Tuple[float, float] = (0.6, 1.0)
    crop_ratio: Tuple[float, float] = (3.0 / 4.0, 4.0 / 3.0)
    flip: bool = True
    brightness: float = 0.4
    contrast: float = 0.4


def augment(images: np.ndarray, rng: np.random.Generator, cfg: Optional[AugmentConfig] = None) -> np.ndarray:
    """Random resized crop, horizontal flip, brightness/contrast jitter; one view per image."""
    cfg = cfg or AugmentConfig()
    images = np.ascontiguousarray(images, dtype=np.float64)
    n, H, W = images.shape
    area = rng.uniform(cfg.crop_scale[0], cfg.crop_scale[1], n) * H * W
    ratio = np.exp(rng.uniform(math.log(cfg.crop_ratio[0]), math.log(cfg.crop_ratio[1]), n))
    bw = np.minimum(np.sqrt(area * ratio), W)
    bh = np.minimum(np.sqrt(area / ratio), H)
    top = rng.uniform(0.0, 1.0, n) * (H - bh)
    left = rng.uniform(0.0, 1.0, n) * (W - bw)
    flips = rng.uniform(0.0, 1.0, n) < 0.5
    if not cfg.flip:
        flips[:] = False
    boxes = np.ascontiguousarray(np.column_stack([top, left, bh, bw]))
    out = _ext.crop_resize(images, boxes, flips.astype(np.uint8), H, W)
    b = rng.uniform(1.0 - cfg.brightness, 1.0 + cfg.brightness, n)[:, None, None]
    c = rng.uniform(1.0 - cfg.contrast, 1.0 + cfg.contrast, n)[:, None, None]
    out = np.clip(out * b, 0.0, 1.0)
    m = out.mean(axis=(1, 2), keepdims=True)
    return np.clip((out - m) * c + m, 0.0, 1.0)


def augment_pair(image: np.ndarray, seed: int, cfg: Optional[AugmentConfig] = None):
    rng = np.random.default_rng(seed)
    views = augment(np.stack([image, image]), rng, cfg)
    return views[0], views[1]


def rotate90(image: np.ndarray, k: int):
    """Lossless ``k * 90`` degree counter-clockwise rotation; returns ``(image, k)``."""
    image = np.asarray(image)
    if image.ndim != 2 or image.shape[0] != image.shape[1]:
        raise ValueError(f"rotate90 needs a square image, got {image.shape}")
    if k not in (0, 1, 2, 3):
        raise ValueError(f"rotation index must be in 0..3, got {k}")
    return np.rot90(image, k).copy(), k


def rotate90_batch(images: np.ndarray, ks: np.ndarray) -> np.ndarray:
    out = np.empty_like(images)
    for k in range(4):
        sel = ks == k
        if sel.any():
            out[sel] = np.rot90(images[sel], k, axes=(1, 2))
    return out


# ---------------------------------------------------------------------------
# label noise and corruptions
# ---------------------------------------------------------------------------


def inject_label_noise(dataset: Dataset, rate: float, seed: int) -> Dataset:
    """Replace each label, with probability ``rate``, by a uniform draw over all classes."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"noise rate must lie in [0, 1], got {rate}")
    rng = np.random.default_rng(seed)
    mask = rng.uniform(0.0, 1.0, len(dataset)) < rate
    draws = rng.integers(0, dataset.num_classes, len(dataset))
    labels = np.where(mask, draws, dataset.labels)
    return Dataset(dataset.images, labels, dataset.num_classes)


CORRUPTIONS = {
    "gaussian_noise": (0.04, 0.08, 0.12, 0.18, 0.26),
    "shot_noise": (60.0, 25.0, 12.0, 5.0, 3.0),
    "impulse_noise": (0.01, 0.02, 0.03, 0.05, 0.07),
    "gaussian_blur": (0.4, 0.6, 0.8, 1.0, 1.5),
    "contrast": (0.75, 0.6, 0.45, 0.3, 0.2),
    "brightness": (0.1, 0.2, 0.3, 0.35, 0.4),
    "pixelate": (0.9, 0.8, 0.7, 0.6, 0.5),
    "occlusion": (0.15, 0.22, 0.3, 0.38, 0.45),
}


def corrupt(images: np.ndarray, kind: str, severity: int, seed: int = 0) -> np.ndarray:
    """Apply one corruption at severity 1..5 to an image or a stack of images."""
    if kind not in CORRUPTIONS:
        raise ValueError(f"unknown corruption {kind!r}; expected one of {sorted(CORRUPTIONS)}")
    if severity not in (1, 2, 3, 4, 5):
        raise ValueError(f"severity must be an integer in 1..5, got {severity}")
    single = np.ndim(images) == 2
    x = np.array(images, dtype=np.float64, ndmin=3)
    n, H, W = x.shape
    level = CORRUPTIONS[kind][severity - 1]
    rng = np.random.default_rng([seed, list(CORRUPTIONS).index(kind), severity])
    if kind == "gaussian_noise":
        x = x + rng.normal(0.0, level, x.shape)
    elif kind == "shot_noise":
        x = rng.poisson(np.clip(x, 0.0, 1.0) * level) / level
    elif kind == "impulse_noise":
        u = rng.uniform(0.0, 1.0, x.shape)
        x = np.where(u < level / 2, 0.0, np.where(u > 1.0 - level / 2, 1.0, x))
    elif kind == "gaussian_blur":
        x = ndimage.gaussian_filter(x, sigma=(0.0, level, level), mode="nearest")
    elif kind == "contrast":
        m = x.mean(axis=(1, 2), keepdims=True)
        x = (x - m) * level + m
    elif kind == "brightness":
        x = x + level
    elif kind == "pixelate":
        small = max(1, int(round(H * level)))
        full = np.tile([0.0, 0.0, float(H), float(W)], (n, 1))
        none = np.zeros(n, dtype=np.uint8)
        down = _ext.crop_resize(np.ascontiguousarray(x), full, none, small, small)
        up_boxes = np.tile([0.0, 0.0, float(small), float(small)], (n, 1))
        x = _ext.crop_resize(down, up_boxes, none, H, W)
    elif kind == "occlusion":
        side = max(1, int(round(level * H)))
        tops = rng.integers(0, H - side + 1, n)
        lefts = rng.integers(0, W - side + 1, n)
        for i in range(n):
            x[i, tops[i] : tops[i] + side, lefts[i] : lefts[i] + side] = 0.0
    x = np.clip(x, 0.0, 1.0)
    return x[0] if single else x


def load_dataset_pair(source: str, num_classes=10, train_per_class=200, test_per_class=100, image_size=28, seed=0):
    """``"synthetic"``, or ``"mnist"`` / a directory of MNIST IDX files.

    For the file-backed sources ``TARC_DATA_DIR`` takes precedence over the
    configured directory.
    """
    if source == "synthetic":
        return synthetic_split(num_classes, train_per_class, test_per_class, image_size, seed)
    directory = os.environ.get("TARC_DATA_DIR") or (None if source == "mnist" else source)
    root = find_mnist(directory) if directory else None
    if root is None:
        raise FileNotFoundError(f"no MNIST IDX files under {directory or source!r}")
    train = load_idx(root / MNIST_FILES["train"][0], root / MNIST_FILES["train"][1])
    test = load_idx(root / MNIST_FILES["test"][0], root / MNIST_FILES["test"][1])
    rng = np.random.default_rng(seed)

    def take(ds, per_class):
        idx = np.concatenate(
            [rng.permutation(np.flatnonzero(ds.labels == c))[:per_class] for c in range(num_classes)]
        )
        return Dataset(ds.images[np.sort(idx)], ds.labels[np.sort(idx)], num_classes)

    return take(train, train_per_class), take(test, test_per_class)
