"""Dataset ingestion, class splits, episode sampling and augmentation."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import rng as rngmod
from .errors import (
    ConfigError,
    CorruptRecordError,
    DataError,
    EpisodeSamplingError,
    MalformedFileError,
)

CIFAR_SIDE = 32
CIFAR_CHANNELS = 3
CIFAR_PIXELS = CIFAR_CHANNELS * CIFAR_SIDE * CIFAR_SIDE
RECORD_SIZE = 2 + CIFAR_PIXELS  # coarse byte, fine byte, 3072 pixel bytes
CIFAR100_CLASSES = 100


@dataclass
class LabeledImage:
    pixels: torch.Tensor  # C x H x W, float32 in [0, 1]
    label: int
    # Raw coarse byte from a CIFAR record. Kept only so files round-trip;
    # nothing downstream reads it.
    coarse_label: int | None = None


class ImageSet:
    """Array-backed sequence of :class:`LabeledImage`.

    Images live in one ``N x C x H x W`` float32 array so episode sampling and
    batching can index without copying per-image tensors around.
    """

    def __init__(self, images, labels, class_names=None, coarse_labels=None):
        images = np.asarray(images, dtype=np.float32)
        labels = np.asarray(labels, dtype=np.int64)
        if images.ndim != 4:
            raise DataError(f"expected N x C x H x W images, got shape {images.shape}")
        if len(images) != len(labels):
            raise DataError("image and label counts differ")
        self.images = images
        self.labels = labels
        n = int(labels.max()) + 1 if len(labels) else 0
        self.class_names = list(class_names) if class_names is not None else [str(c) for c in range(n)]
        self.coarse_labels = None if coarse_labels is None else np.asarray(coarse_labels, dtype=np.uint8)

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> LabeledImage:
        coarse = None if self.coarse_labels is None else int(self.coarse_labels[i])
        return LabeledImage(torch.from_numpy(self.images[i]), int(self.labels[i]), coarse)

    def __iter__(self) -> Iterator[LabeledImage]:
        for i in range(len(self)):
            yield self[i]

    def class_indices(self) -> dict[int, np.ndarray]:
        order = np.argsort(self.labels, kind="stable")
        bounds = np.searchsorted(self.labels[order], np.arange(self.n_classes + 1))
        return {c: order[bounds[c]:bounds[c + 1]] for c in range(self.n_classes)}

    def subset(self, classes: Sequence[int]) -> "ImageSet":
        """Keep only ``classes`` and relabel them 0..len(classes)-1 in the given order."""
        classes = list(classes)
        remap = np.full(self.n_classes, -1, dtype=np.int64)
        remap[classes] = np.arange(len(classes))
        keep = remap[self.labels] >= 0
        coarse = None if self.coarse_labels is None else self.coarse_labels[keep]
        return ImageSet(self.images[keep], remap[self.labels[keep]],
                        [self.class_names[c] for c in classes], coarse)


# --------------------------------------------------------------------------
# CIFAR-100 binary format
# --------------------------------------------------------------------------

def _decode_cifar100(data: bytes) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if len(data) % RECORD_SIZE != 0:
        raise MalformedFileError(
            f"CIFAR-100 binary length {len(data)} is not a multiple of the {RECORD_SIZE}-byte record size")
    raw = np.frombuffer(data, dtype=np.uint8).reshape(-1, RECORD_SIZE)
    fine = raw[:, 1].astype(np.int64)
    bad = np.flatnonzero(fine >= CIFAR100_CLASSES)
    if bad.size:
        raise CorruptRecordError(f"record {bad[0]} has fine label {fine[bad[0]]} >= {CIFAR100_CLASSES}")
    pixels = raw[:, 2:].reshape(-1, CIFAR_CHANNELS, CIFAR_SIDE, CIFAR_SIDE)
    return pixels, fine, raw[:, 0].copy()


def parse_cifar100_binary(data: bytes) -> ImageSet:
    """Decode CIFAR-100 binary records into fine-labelled images scaled to [0, 1]."""
    pixels, fine, coarse = _decode_cifar100(data)
    return ImageSet(pixels.astype(np.float32) / 255.0, fine,
                    class_names=[str(c) for c in range(CIFAR100_CLASSES)], coarse_labels=coarse)


def serialize_cifar100_binary(images: ImageSet) -> bytes:
    """Inverse of :func:`parse_cifar100_binary` (pixels are rounded back to bytes)."""
    if images.images.shape[1:] != (CIFAR_CHANNELS, CIFAR_SIDE, CIFAR_SIDE):
        raise DataError(f"CIFAR layout needs 3x32x32 images, got {images.images.shape[1:]}")
    if len(images) and images.labels.max() >= CIFAR100_CLASSES:
        raise DataError("labels must be < 100 for the CIFAR-100 layout")
    n = len(images)
    out = np.empty((n, RECORD_SIZE), dtype=np.uint8)
    out[:, 0] = 0 if images.coarse_labels is None else images.coarse_labels
    out[:, 1] = images.labels
    out[:, 2:] = np.rint(np.clip(images.images, 0.0, 1.0) * 255.0).reshape(n, -1)
    return out.tobytes()


def load_cifar100(root: str | os.PathLike) -> tuple[ImageSet, ImageSet]:
    """Read ``train.bin`` and ``test.bin`` from an extracted cifar-100-binary directory."""
    root = Path(root)
    out = []
    for name in ("train.bin", "test.bin"):
        path = root / name
        if not path.is_file():
            raise DataError(f"CIFAR-100 file not found: {path}")
        out.append(parse_cifar100_binary(path.read_bytes()))
    return out[0], out[1]


# --------------------------------------------------------------------------
# Synthetic corpus
# --------------------------------------------------------------------------

def _class_template(c: int, side: int, channels: int, seed: int) -> np.ndarray:
    r = rngmod.stream(seed, f"synth-class/{c}")
    theta = r.uniform(0, math.pi)
    freq = r.uniform(1.5, 4.5)
    phase = r.uniform(0, 2 * math.pi)
    grating_color = r.uniform(-1, 1, size=channels)
    cy, cx = r.uniform(0.2, 0.8, size=2)
    radius = r.uniform(0.12, 0.3)
    blob_color = r.uniform(-1, 1, size=channels)

    yy, xx = np.meshgrid(np.linspace(0, 1, side), np.linspace(0, 1, side), indexing="ij")
    grating = np.cos(2 * math.pi * freq * (xx * math.cos(theta) + yy * math.sin(theta)) + phase)
    blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * radius ** 2))
    img = 0.5 + 0.25 * grating_color[:, None, None] * grating + 0.25 * blob_color[:, None, None] * blob
    return img


def make_synthetic_dataset(n_classes: int, per_class: int, image_side: int, seed: int,
                           noise: float = 0.05, channels: int = 3) -> ImageSet:
    """Each class is a fixed grating-plus-blob pattern; images add N(0, noise^2) pixel noise."""
    if n_classes < 2:
        raise ConfigError("synthetic dataset needs at least 2 classes")
    if image_side < 8:
        raise ConfigError("synthetic image side must be >= 8")
    templates = np.stack([_class_template(c, image_side, channels, seed) for c in range(n_classes)])
    labels = np.repeat(np.arange(n_classes), per_class)
    images = templates[labels]
    if noise > 0:
        images = images + noise * rngmod.stream(seed, "synth-noise").standard_normal(images.shape)
    images = np.clip(images, 0.0, 1.0).astype(np.float32)
    return ImageSet(images, labels, class_names=[f"synth{c:03d}" for c in range(n_classes)])


# --------------------------------------------------------------------------
# Class splits
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ClassSplit:
    train: tuple[int, ...]
    val: tuple[int, ...]
    test: tuple[int, ...]

    def __post_init__(self):
        sets = [set(self.train), set(self.val), set(self.test)]
        if sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2]:
            raise ConfigError("class split sets overlap")

    def get(self, name: str) -> tuple[int, ...]:
        if name not in ("train", "val", "test"):
            raise ConfigError(f"unknown split {name!r}")
        return getattr(self, name)

    def check_covers(self, n_classes: int) -> None:
        if set(self.train) | set(self.val) | set(self.test) != set(range(n_classes)):
            raise ConfigError("class split does not cover the dataset's class set")

    @classmethod
    def proportional(cls, n_classes: int, ratios=(64, 16, 20), seed: int | None = None) -> "ClassSplit":
        """Split ``0..n_classes-1`` in the given ratios (64/16/20 by default).

        With ``seed=None`` classes are assigned in index order; otherwise shuffled.
        """
        total = sum(ratios)
        n_val = round(n_classes * ratios[1] / total)
        n_test = round(n_classes * ratios[2] / total)
        n_train = n_classes - n_val - n_test
        order = np.arange(n_classes)
        if seed is not None:
            order = rngmod.stream(seed, "class-split").permutation(n_classes)
        order = [int(c) for c in order]
        return cls(tuple(order[:n_train]), tuple(order[n_train:n_train + n_val]),
                   tuple(order[n_train + n_val:]))


def read_split_manifest(path: str | os.PathLike) -> list[tuple[str, str]]:
    """Lines of ``split_name,class_name``; blank lines and ``#`` comments are skipped."""
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 2 or parts[0] not in ("train", "val", "test"):
            raise ConfigError(f"{path}:{lineno}: expected 'split_name,class_name', got {line!r}")
        rows.append((parts[0], parts[1]))
    return rows


def split_from_manifest(rows: list[tuple[str, str]], class_names: Sequence[str]) -> ClassSplit:
    index = {name: i for i, name in enumerate(class_names)}
    groups: dict[str, list[int]] = {"train": [], "val": [], "test": []}
    for split, name in rows:
        if name not in index:
            raise DataError(f"manifest class {name!r} not present in dataset")
        groups[split].append(index[name])
    return ClassSplit(tuple(groups["train"]), tuple(groups["val"]), tuple(groups["test"]))


def write_split_manifest(split: ClassSplit, class_names: Sequence[str]) -> str:
    lines = [f"{name},{class_names[c]}" for name in ("train", "val", "test") for c in split.get(name)]
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# Folder loader (Mini-ImageNet style)
# --------------------------------------------------------------------------

def _read_pnm(path: Path) -> np.ndarray:
    data = path.read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    pos += 1  # single whitespace before the raster
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255 or magic not in (b"P5", b"P6"):
        raise DataError(f"{path}: only 8-bit binary P5/P6 images are supported")
    ch = 3 if magic == b"P6" else 1
    arr = np.frombuffer(data, dtype=np.uint8, count=w * h * ch, offset=pos).reshape(h, w, ch)
    if ch == 1:
        arr = np.repeat(arr, 3, axis=2)
    return arr


def _read_image(path: Path) -> np.ndarray:
    if path.suffix.lower() in (".ppm", ".pgm", ".pnm"):
        arr = _read_pnm(path)
    elif path.suffix.lower() == ".npy":
        arr = np.load(path)
        if arr.ndim == 2:
            arr = np.repeat(arr[:, :, None], 3, axis=2)
    else:
        raise DataError(f"unsupported image format: {path}")
    return arr.astype(np.float32).transpose(2, 0, 1) / 255.0


def load_image_folder(root: str | os.PathLike, manifest: str | os.PathLike,
                      image_side: int = 84) -> tuple[ImageSet, ClassSplit]:
    """Load ``root/<class_name>/*.{ppm,pgm,npy}`` for every class named in the manifest.

    Images are resized (bilinear, antialiased) to ``image_side`` squared.
    """
    root = Path(root)
    rows = read_split_manifest(manifest)
    names = [name for _, name in rows]
    images, labels = [], []
    for label, name in enumerate(names):
        folder = root / name
        if not folder.is_dir():
            raise DataError(f"class folder not found: {folder}")
        files = sorted(p for p in folder.iterdir() if p.suffix.lower() in (".ppm", ".pgm", ".pnm", ".npy"))
        for p in files:
            img = torch.from_numpy(_read_image(p))[None]
            if img.shape[-2:] != (image_side, image_side):
                img = F.interpolate(img, size=(image_side, image_side), mode="bilinear",
                                    align_corners=False, antialias=True)
            images.append(img[0].clamp(0, 1).numpy())
            labels.append(label)
    if not images:
        raise DataError(f"no images found under {root}")
    data = ImageSet(np.stack(images), labels, class_names=names)
    return data, split_from_manifest(rows, names)


# --------------------------------------------------------------------------
# Episodes
# --------------------------------------------------------------------------

@dataclass
class Episode:
    """One N-way K-shot task. Images are referenced by index into the pool."""

    n_way: int
    k_shot: int
    q_queries: int
    classes: np.ndarray  # pool class ids in draw order; position y maps to classes[y]
    support_idx: np.ndarray
    support_y: np.ndarray
    query_idx: np.ndarray
    query_y: np.ndarray

    @property
    def support(self) -> list[tuple[int, int]]:
        return list(zip(self.support_idx.tolist(), self.support_y.tolist()))

    @property
    def query(self) -> list[tuple[int, int]]:
        return list(zip(self.query_idx.tolist(), self.query_y.tolist()))


def sample_episode(pool: ImageSet, split: Sequence[int], n_way: int, k_shot: int, q_queries: int,
                   rng: np.random.Generator, by_class: dict[int, np.ndarray] | None = None) -> Episode:
    """Draw an episode from the classes in ``split``.

    Classes are drawn without replacement; within a class the ``k_shot + q_queries``
    images are drawn without replacement and the first ``k_shot`` form the support.
    Positions ``y`` follow class draw order. Support is class-major, as is the query set.
    """
    split = list(split)
    if len(split) < n_way:
        raise EpisodeSamplingError(f"split has {len(split)} classes, need n_way={n_way}")
    if by_class is None:
        by_class = pool.class_indices()
    need = k_shot + q_queries
    classes = np.asarray(split)[rng.choice(len(split), size=n_way, replace=False)]
    s_idx, q_idx = [], []
    for c in classes:
        members = by_class.get(int(c), np.empty(0, dtype=np.int64))
        if len(members) < need:
            raise EpisodeSamplingError(
                f"class {pool.class_names[int(c)]!r} (id {int(c)}) has {len(members)} images, "
                f"need k_shot + q_queries = {need}")
        pick = members[rng.choice(len(members), size=need, replace=False)]
        s_idx.append(pick[:k_shot])
        q_idx.append(pick[k_shot:])
    positions = np.arange(n_way)
    return Episode(n_way, k_shot, q_queries, classes.astype(np.int64),
                   np.concatenate(s_idx), np.repeat(positions, k_shot),
                   np.concatenate(q_idx), np.repeat(positions, q_queries))


def episode_stream(pool: ImageSet, split: Sequence[int], n_way: int, k_shot: int, q_queries: int,
                   seed: int, name: str, count: int) -> Iterator[Episode]:
    """``count`` episodes, episode ``i`` drawn from its own stream ``name/i``."""
    by_class = pool.class_indices()
    for i in range(count):
        yield sample_episode(pool, split, n_way, k_shot, q_queries,
                             rngmod.stream(seed, f"{name}/{i}"), by_class)


# --------------------------------------------------------------------------
# Augmentation
# --------------------------------------------------------------------------

@dataclass
class AugmentPolicy:
    pad: int = 0  # pad-then-random-crop; 0 disables
    hflip_prob: float = 0.0
    rotation_degrees: float = 0.0
    mean: tuple[float, ...] = (0.0, 0.0, 0.0)
    std: tuple[float, ...] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if not 0.0 <= self.hflip_prob <= 1.0:
            raise ConfigError("hflip_prob must be in [0, 1]")
        if self.pad < 0 or self.rotation_degrees < 0:
            raise ConfigError("pad and rotation_degrees must be non-negative")
        if len(self.mean) != len(self.std) or any(s <= 0 for s in self.std):
            raise ConfigError("std must be strictly positive and match mean's length")


def _rotate(img: torch.Tensor, degrees: float) -> torch.Tensor:
    a = math.radians(degrees)
    theta = torch.tensor([[math.cos(a), -math.sin(a), 0.0],
                          [math.sin(a), math.cos(a), 0.0]], dtype=img.dtype)[None]
    grid = F.affine_grid(theta, [1, *img.shape], align_corners=False)
    return F.grid_sample(img[None], grid, mode="bilinear", padding_mode="zeros", align_corners=False)[0]


def _center_crop(img: torch.Tensor, h: int, w: int) -> torch.Tensor:
    top = (img.shape[1] - h) // 2
    left = (img.shape[2] - w) // 2
    return img[:, top:top + h, left:left + w]


def augment(image, policy: AugmentPolicy, rng: np.random.Generator | None, train_mode: bool,
            out_side: int | None = None) -> torch.Tensor:
    """Augment one image (``LabeledImage`` or C x H x W tensor) and standardize channels.

    Train mode consumes exactly four draws from ``rng`` per image whatever the
    policy, so toggling one transform leaves the others' randomness unchanged.
    """
    x = image.pixels if isinstance(image, LabeledImage) else torch.as_tensor(image)
    x = x.to(torch.float32)
    _, h, w = x.shape
    oh, ow = (out_side, out_side) if out_side else (h, w)
    if train_mode:
        oy, ox, flip, angle = rng.integers(0, 2 * policy.pad + 1, size=2).tolist() + list(rng.random(2))
        if policy.pad:
            x = F.pad(x, (policy.pad,) * 4)
            x = x[:, oy:oy + h, ox:ox + w]
        if flip < policy.hflip_prob:
            x = x.flip(-1)
        if policy.rotation_degrees:
            x = _rotate(x, (2 * angle - 1) * policy.rotation_degrees)
    x = _center_crop(x, oh, ow)
    mean = torch.tensor(policy.mean, dtype=x.dtype)[:, None, None]
    std = torch.tensor(policy.std, dtype=x.dtype)[:, None, None]
    return (x - mean) / std


def augment_batch(images: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator | None,
                  train_mode: bool) -> torch.Tensor:
    x = torch.from_numpy(np.ascontiguousarray(images))
    if not train_mode:
        mean = torch.tensor(policy.mean, dtype=x.dtype)[:, None, None]
        std = torch.tensor(policy.std, dtype=x.dtype)[:, None, None]
        return (x - mean) / std
    return torch.stack([augment(img, policy, rng, True) for img in x])
