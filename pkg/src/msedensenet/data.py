"""Fundus-style datasets: loading, resizing, augmentation, class weights,
random splits, and a synthetic ordinal-image generator."""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image
from scipy import ndimage

logger = logging.getLogger(__name__)

NUM_STAGES = 5
STAGE_NAMES = ("No DR", "Mild DR", "Moderate DR", "Severe DR", "Proliferate DR")
# severity targets for the regression head, one per stage
REGRESSION_TARGETS = (0.0, 0.2, 0.4, 0.6, 0.8)
IMAGE_SUFFIXES = (".png", ".ppm")
LABELS_HEADER = ("id_code", "diagnosis")


def regression_target(stage: int) -> float:
    return REGRESSION_TARGETS[stage]


@dataclass
class LabeledSample:
    id: str
    image: np.ndarray  # [C, H, W]
    stage: int

    def __post_init__(self):
        if not 0 <= int(self.stage) < NUM_STAGES:
            raise ValueError(f"sample {self.id}: stage {self.stage} outside 0..{NUM_STAGES - 1}")
        self.stage = int(self.stage)

    @property
    def regression_target(self) -> float:
        return regression_target(self.stage)


class Dataset:
    """Images stacked as one ``[N, C, H, W]`` float32 array plus stage labels."""

    def __init__(self, ids: Sequence[str], images: np.ndarray, stages: Sequence[int]):
        images = np.asarray(images, dtype=np.float32)
        stages = np.asarray(stages, dtype=np.int64)
        if len(ids) != len(stages) or (len(ids) and images.shape[0] != len(ids)):
            raise ValueError("ids, images and stages must have the same length")
        if stages.size and (stages.min() < 0 or stages.max() >= NUM_STAGES):
            raise ValueError(f"stages must lie in 0..{NUM_STAGES - 1}")
        self.ids = list(ids)
        self.images = images
        self.stages = stages

    @classmethod
    def from_samples(cls, samples: Sequence[LabeledSample]) -> "Dataset":
        if not samples:
            return cls([], np.zeros((0, 3, 1, 1), np.float32), [])
        shapes = {s.image.shape for s in samples}
        if len(shapes) != 1:
            raise ValueError(f"samples have mixed image shapes {sorted(shapes)}; resize first")
        return cls([s.id for s in samples], np.stack([s.image for s in samples]), [s.stage for s in samples])

    def __len__(self) -> int:
        return len(self.ids)

    def __getitem__(self, i: int) -> LabeledSample:
        return LabeledSample(self.ids[i], self.images[i], int(self.stages[i]))

    def __iter__(self) -> Iterator[LabeledSample]:
        return (self[i] for i in range(len(self)))

    def subset(self, indices: Sequence[int]) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset([self.ids[i] for i in idx], self.images[idx], self.stages[idx])

    @property
    def regression_targets(self) -> np.ndarray:
        return np.asarray(REGRESSION_TARGETS, dtype=np.float32)[self.stages]

    @property
    def image_shape(self) -> Tuple[int, ...]:
        return tuple(self.images.shape[1:])

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.stages, minlength=NUM_STAGES)


# ---------------------------------------------------------------------------
# I/O
# ---------------------------------------------------------------------------


def read_image(path: os.PathLike) -> np.ndarray:
    """Read an 8-bit PNG or PPM (P6) file as a ``[H, W, 3]`` uint8 array."""
    path = Path(path)
    if path.suffix.lower() not in IMAGE_SUFFIXES:
        raise ValueError(f"{path}: unsupported image format {path.suffix!r}; expected PNG or PPM")
    with Image.open(path) as img:
        if img.format not in ("PNG", "PPM"):
            raise ValueError(f"{path}: file content is {img.format}, expected PNG or PPM (P6)")
        if img.mode not in ("RGB", "RGBA", "L", "P"):
            raise ValueError(f"{path}: unsupported pixel mode {img.mode}; expected 8-bit RGB")
        return np.asarray(img.convert("RGB"), dtype=np.uint8)


def write_image(path: os.PathLike, image: np.ndarray) -> None:
    """Write a ``[C, H, W]`` image in [0, 1] as 8-bit RGB (format from suffix)."""
    arr = np.clip(np.rint(np.asarray(image).transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    if arr.shape[2] == 1:
        arr = np.repeat(arr, 3, axis=2)
    Image.fromarray(arr, mode="RGB").save(path)


def read_labels(labels_file: os.PathLike) -> List[Tuple[str, int]]:
    rows = []
    with open(labels_file, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return rows
        if tuple(h.strip() for h in header[:2]) != LABELS_HEADER:
            raise ValueError(f"{labels_file}: header must be 'id_code,diagnosis', got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row or not row[0].strip():
                continue
            try:
                stage = int(row[1])
            except (IndexError, ValueError):
                raise ValueError(f"{labels_file}:{lineno}: bad diagnosis field in {row}") from None
            if not 0 <= stage < NUM_STAGES:
                raise ValueError(f"{labels_file}:{lineno}: diagnosis {stage} for {row[0]} outside 0..4")
            rows.append((row[0].strip(), stage))
    return rows


def parse_cap(spec: str) -> Dict[int, int]:
    """``"0:10000,2:500"`` -> ``{0: 10000, 2: 500}``."""
    caps = {}
    for part in filter(None, (p.strip() for p in spec.split(","))):
        stage, limit = part.split(":")
        caps[int(stage)] = int(limit)
    return caps


def load_dataset(
    root_dir: os.PathLike,
    labels_file: Optional[os.PathLike] = None,
    image_size: Tuple[int, int] = (32, 32),
    cap_class: Optional[Dict[int, int]] = None,
    seed: int = 0,
) -> Dataset:
    """Load an APTOS/EyePACS-style folder: ``<id>.png`` or ``<id>.ppm`` files
    plus a ``id_code,diagnosis`` CSV. Images are resized and scaled to [0, 1].

    ``cap_class`` randomly keeps at most the given number of images per stage
    (e.g. ``{0: 10000}`` for the EyePACS no-DR subsample).
    """
    root = Path(root_dir)
    labels_file = Path(labels_file) if labels_file else root / "labels.csv"
    rows = read_labels(labels_file)
    if cap_class:
        rng = np.random.default_rng(seed)
        kept = []
        for stage in range(NUM_STAGES):
            members = [r for r in rows if r[1] == stage]
            limit = cap_class.get(stage)
            if limit is not None and len(members) > limit:
                keep = np.sort(rng.choice(len(members), size=limit, replace=False))
                members = [members[i] for i in keep]
            kept.extend(members)
        rows = kept

    paths, missing = [], []
    for image_id, _ in rows:
        found = next((root / (image_id + s) for s in IMAGE_SUFFIXES if (root / (image_id + s)).exists()), None)
        if found is None:
            missing.append(image_id)
        paths.append(found)
    if missing:
        raise FileNotFoundError(f"no image file under {root} for label ids: {', '.join(missing)}")

    samples = []
    for (image_id, stage), path in zip(rows, paths):
        raw = read_image(path).transpose(2, 0, 1).astype(np.float32)
        samples.append(resize_normalize(LabeledSample(image_id, raw, stage), image_size))
    if not samples:
        return Dataset([], np.zeros((0, 3) + tuple(image_size), np.float32), [])
    ds = Dataset.from_samples(samples)
    logger.info("loaded %d images from %s; per-class counts %s", len(ds), root, ds.class_counts().tolist())
    return ds


def export_dataset(dataset: Dataset, root_dir: os.PathLike, suffix: str = ".png") -> Path:
    """Write ``dataset`` in the loader's layout; returns the labels CSV path."""
    root = Path(root_dir)
    root.mkdir(parents=True, exist_ok=True)
    labels = root / "labels.csv"
    with open(labels, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LABELS_HEADER)
        for sample in dataset:
            write_image(root / (sample.id + suffix), sample.image)
            writer.writerow((sample.id, sample.stage))
    return labels


# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------


def bilinear_resize(image: np.ndarray, size: Tuple[int, int]) -> np.ndarray:
    """Resize ``[C, H, W]`` with bilinear interpolation on pixel centers."""
    out_h, out_w = size
    if out_h < 1 or out_w < 1:
        raise ValueError(f"degenerate resize target {size}")
    _, in_h, in_w = image.shape

    def taps(n_out, n_in):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1)
        lo = np.floor(src).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, (src - lo)

    y0, y1, wy = taps(out_h, in_h)
    x0, x1, wx = taps(out_w, in_w)
    img = image.astype(np.float64)
    top = img[:, y0, :] * (1 - wy)[None, :, None] + img[:, y1, :] * wy[None, :, None]
    out = top[:, :, x0] * (1 - wx)[None, None, :] + top[:, :, x1] * wx[None, None, :]
    return out


def resize_normalize(sample: LabeledSample, target: Tuple[int, int]) -> LabeledSample:
    """Bilinear-resize a raw 0..255 sample to ``target`` and scale to [0, 1]."""
    resized = bilinear_resize(sample.image, target) / 255.0
    return LabeledSample(sample.id, np.clip(resized, 0.0, 1.0).astype(np.float32), sample.stage)


@dataclass(frozen=True)
class AugmentPolicy:
    """Ranges for random affine augmentation. Shifts and zoom are fractions
    of the image size; angles are degrees."""

    rotation_deg: float = 15.0
    h_flip: float = 0.5
    width_shift: float = 0.1
    height_shift: float = 0.1
    zoom: float = 0.1
    shear_deg: float = 10.0

    def __post_init__(self):
        values = (self.rotation_deg, self.h_flip, self.width_shift, self.height_shift, self.zoom, self.shear_deg)
        if not all(math.isfinite(v) and v >= 0 for v in values):
            raise ValueError(f"augmentation ranges must be finite and non-negative: {self}")
        if self.h_flip > 1 or self.zoom >= 1:
            raise ValueError("h_flip must be a probability and zoom < 1")

    @classmethod
    def identity(cls) -> "AugmentPolicy":
        return cls(0.0, 0.0, 0.0, 0.0, 0.0, 0.0)

    @property
    def is_identity(self) -> bool:
        return self == AugmentPolicy.identity()


def affine_matrix(
    shape: Tuple[int, int],
    rotation_deg: float = 0.0,
    flip: bool = False,
    shift: Tuple[float, float] = (0.0, 0.0),
    zoom: float = 1.0,
    shear_deg: float = 0.0,
) -> np.ndarray:
    """Forward 3x3 transform in (row, col) pixel coordinates, about the image
    center. Positive rotation turns content counter-clockwise on screen;
    ``shift`` is (rows, cols)."""
    h, w = shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    a = math.radians(rotation_deg)
    s = math.radians(shear_deg)
    to_origin = np.array([[1, 0, -cy], [0, 1, -cx], [0, 0, 1]], dtype=np.float64)
    back = np.array([[1, 0, cy + shift[0]], [0, 1, cx + shift[1]], [0, 0, 1]], dtype=np.float64)
    flip_m = np.diag([1.0, -1.0 if flip else 1.0, 1.0])
    zoom_m = np.diag([zoom, zoom, 1.0])
    shear_m = np.array([[1, 0, 0], [-math.sin(s), math.cos(s), 0], [0, 0, 1]], dtype=np.float64)
    # rows grow downward, so a CCW turn on screen is (r, c) -> (r cos - c sin, r sin + c cos)
    rot = np.array([[math.cos(a), -math.sin(a), 0], [math.sin(a), math.cos(a), 0], [0, 0, 1]], dtype=np.float64)
    return back @ rot @ shear_m @ zoom_m @ flip_m @ to_origin


def apply_affine(image: np.ndarray, forward: np.ndarray) -> np.ndarray:
    """Warp ``[C, H, W]`` by ``forward``; samples outside take the nearest edge pixel."""
    inv = np.linalg.inv(forward)
    matrix, offset = inv[:2, :2], inv[:2, 2]
    # snap numerically-integral coefficients (exact flips and right-angle turns)
    matrix = np.where(np.abs(matrix - np.round(matrix)) < 1e-12, np.round(matrix), matrix)
    offset = np.where(np.abs(offset - np.round(offset)) < 1e-9, np.round(offset), offset)
    out = np.empty_like(image)
    for ch in range(image.shape[0]):
        out[ch] = ndimage.affine_transform(image[ch], matrix, offset=offset, order=1, mode="nearest")
    return out


def augment(sample: LabeledSample, policy: AugmentPolicy, rng: np.random.Generator) -> LabeledSample:
    """Draw one set of transform parameters from ``policy`` and apply them as
    a single affine warp. The label is untouched."""
    if policy.is_identity:
        return LabeledSample(sample.id, sample.image.copy(), sample.stage)
    _, h, w = sample.image.shape
    angle = rng.uniform(-policy.rotation_deg, policy.rotation_deg)
    flip = bool(rng.random() < policy.h_flip)
    dy = rng.uniform(-policy.height_shift, policy.height_shift) * h
    dx = rng.uniform(-policy.width_shift, policy.width_shift) * w
    zoom = rng.uniform(1.0 - policy.zoom, 1.0 + policy.zoom)
    shear = rng.uniform(-policy.shear_deg, policy.shear_deg)
    forward = affine_matrix((h, w), angle, flip, (dy, dx), zoom, shear)
    return LabeledSample(sample.id, apply_affine(sample.image, forward), sample.stage)


# ---------------------------------------------------------------------------
# Class balance and splitting
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ClassWeights:
    weights: np.ndarray
    counts: np.ndarray
    n: int
    k: int


def class_weights(counts: Sequence[int]) -> ClassWeights:
    """Weights inversely proportional to class frequency: ``n / (k * n_j)``."""
    counts = np.asarray(counts, dtype=np.int64)
    if counts.ndim != 1 or counts.size == 0:
        raise ValueError("counts must be a non-empty vector")
    if np.any(counts <= 0):
        empty = np.flatnonzero(counts <= 0).tolist()
        raise ValueError(f"class weights undefined: no samples for class(es) {empty}")
    n, k = int(counts.sum()), counts.size
    return ClassWeights(n / (k * counts.astype(np.float64)), counts, n, k)


def split(dataset: Dataset, train_fraction: float, seed: int) -> Tuple[Dataset, Dataset]:
    """Unstratified random train/validation partition."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must lie strictly between 0 and 1, got {train_fraction}")
    n = len(dataset)
    n_train = int(round(train_fraction * n))
    if n_train == 0 or n_train == n:
        raise ValueError(f"train_fraction {train_fraction} leaves an empty side for {n} samples")
    order = np.random.default_rng(seed).permutation(n)
    return dataset.subset(np.sort(order[:n_train])), dataset.subset(np.sort(order[n_train:]))


# ---------------------------------------------------------------------------
# Synthetic ordinal images
# ---------------------------------------------------------------------------

_DISC_RGB = np.array([0.30, 0.14, 0.06])
_BLOB_RGB = np.array([0.75, 0.70, 0.55])
BLOB_THRESHOLD = 0.5


def _synth_image(stage: int, size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    c = (size - 1) / 2.0
    radius = 0.46 * size
    r2 = (yy - c) ** 2 + (xx - c) ** 2
    disc = 1.0 / (1.0 + np.exp((np.sqrt(r2) - radius) / 0.8))
    brightness = rng.uniform(0.85, 1.15)
    img = disc[None] * (_DISC_RGB * brightness)[:, None, None]

    sigma_max = size / 22.0
    min_sep = 4.2 * sigma_max + 1.0
    centers: List[Tuple[float, float]] = []
    while len(centers) < stage + 1:
        rho = 0.72 * radius * math.sqrt(rng.random())
        theta = rng.uniform(0.0, 2.0 * math.pi)
        cand = (c + rho * math.sin(theta), c + rho * math.cos(theta))
        if all((cand[0] - p[0]) ** 2 + (cand[1] - p[1]) ** 2 >= min_sep**2 for p in centers):
            centers.append(cand)
    for cy, cx in centers:
        sigma = sigma_max * rng.uniform(0.8, 1.0)
        amp = rng.uniform(0.8, 1.0)
        blob = amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * sigma**2))
        img += blob[None] * _BLOB_RGB[:, None, None]
    img += rng.normal(0.0, 0.02, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def synth_generate(n_per_class: int, image_size: int = 32, seed: int = 0, prefix: str = "synth") -> Dataset:
    """Dark fundus-like disc with ``stage + 1`` bright Gaussian blobs.

    Each sample draws from its own stream seeded by ``(seed, index)``, so the
    result does not depend on generation order.
    """
    if image_size < 16:
        raise ValueError(f"synthetic images need size >= 16, got {image_size}")
    ids, images, stages = [], [], []
    for stage in range(NUM_STAGES):
        for j in range(n_per_class):
            index = stage * n_per_class + j
            rng = np.random.default_rng(np.random.SeedSequence([seed, index]))
            ids.append(f"{prefix}{seed}_{index:06d}")
            images.append(_synth_image(stage, image_size, rng))
            stages.append(stage)
    if not ids:
        return Dataset([], np.zeros((0, 3, image_size, image_size), np.float32), [])
    return Dataset(ids, np.stack(images), stages)


def count_blobs(image: np.ndarray, threshold: float = BLOB_THRESHOLD) -> int:
    """Connected bright regions of the channel-mean image above ``threshold``."""
    _, n = ndimage.label(image.mean(axis=0) > threshold)
    return int(n)
