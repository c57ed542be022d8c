"""Datasets: IDX / CIFAR binary loaders, synthetic desk data, Dirichlet splits."""

from __future__ import annotations

import gzip
import logging
import re
import struct
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from fedsab.errors import FormatError, InputError
from fedsab.rng import derive_rng

log = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 3073


@dataclass(frozen=True)
class ImageExample:
    pixels: np.ndarray  # [C, H, W] in [0, 1]
    label: int


@dataclass(frozen=True, eq=False)
class Dataset:
    """Images as one [N, C, H, W] float32 array plus integer labels."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    name: str = ""

    def __post_init__(self):
        if self.images.ndim != 4:
            raise InputError(f"images must be [N,C,H,W], got shape {self.images.shape}")
        if len(self.images) == 0:
            raise InputError("dataset is empty")
        if len(self.images) != len(self.labels):
            raise InputError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise InputError(f"labels outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> ImageExample:
        return ImageExample(self.images[i], int(self.labels[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, idx: Sequence[int], name: str | None = None) -> Dataset:
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.num_classes, name or self.name)

    def first_per_class(self, per_class: int) -> Dataset:
        """The first ``per_class`` examples of every class, in file order."""
        keep = []
        for c in range(self.num_classes):
            keep.extend(np.flatnonzero(self.labels == c)[:per_class].tolist())
        return self.subset(sorted(keep), f"{self.name}[{per_class}/class]")


def _read(path: str | Path) -> bytes:
    path = Path(path)
    raw = path.read_bytes()
    return gzip.decompress(raw) if raw[:2] == b"\x1f\x8b" else raw


def load_idx(images_path, labels_path, name: str = "fashion-mnist") -> Dataset:
    img, lab = _read(images_path), _read(labels_path)
    if len(img) < 16:
        raise FormatError("images file: truncated header")
    magic, n, rows, cols = struct.unpack(">IIII", img[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise FormatError(f"images magic: expected 0x{IDX_IMAGES_MAGIC:08x}, got 0x{magic:08x}")
    if len(lab) < 8:
        raise FormatError("labels file: truncated header")
    lmagic, ln = struct.unpack(">II", lab[:8])
    if lmagic != IDX_LABELS_MAGIC:
        raise FormatError(f"labels magic: expected 0x{IDX_LABELS_MAGIC:08x}, got 0x{lmagic:08x}")
    if n != ln:
        raise FormatError(f"image count {n} != label count {ln}")
    if len(img) - 16 != n * rows * cols:
        raise FormatError(f"images payload: expected {n * rows * cols} bytes, got {len(img) - 16}")
    if len(lab) - 8 != n:
        raise FormatError(f"labels payload: expected {n} bytes, got {len(lab) - 8}")
    pixels = np.frombuffer(img, dtype=np.uint8, offset=16).reshape(n, 1, rows, cols)
    labels = np.frombuffer(lab, dtype=np.uint8, offset=8).astype(np.int64)
    return Dataset((pixels / np.float32(255)).astype(np.float32), labels, 10, name)


def write_idx(dataset: Dataset, images_path, labels_path) -> None:
    """Inverse of :func:`load_idx` for single-channel datasets."""
    n, c, h, w = dataset.images.shape
    if c != 1:
        raise InputError("IDX output needs single-channel images")
    pixels = np.rint(dataset.images * 255).astype(np.uint8)
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w) + pixels.tobytes())
    Path(labels_path).write_bytes(
        struct.pack(">II", IDX_LABELS_MAGIC, n) + dataset.labels.astype(np.uint8).tobytes()
    )


def load_cifar_binary(paths: Sequence, num_classes: int = 10, name: str = "cifar-10") -> Dataset:
    images, labels = [], []
    for p in paths:
        raw = _read(p)
        if len(raw) == 0 or len(raw) % CIFAR_RECORD:
            raise FormatError(f"{p}: length {len(raw)} is not a multiple of {CIFAR_RECORD}")
        rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        lab = rec[:, 0].astype(np.int64)
        if lab.max() >= num_classes:
            raise FormatError(f"{p}: label byte {lab.max()} >= num_classes {num_classes}")
        labels.append(lab)
        images.append(rec[:, 1:].reshape(-1, 3, 32, 32))
    pixels = np.concatenate(images)
    return Dataset((pixels / np.float32(255)).astype(np.float32), np.concatenate(labels), num_classes, name)


def _class_templates(rng: np.random.Generator, num_classes: int, shape, blobs: int, shared: float) -> np.ndarray:
    c, h, w = shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)

    def blob_field(n):
        f = np.zeros((h, w))
        for _ in range(n):
            cy, cx = rng.uniform(0.2, 0.8) * h, rng.uniform(0.2, 0.8) * w
            sy, sx = rng.uniform(0.08, 0.25) * h, rng.uniform(0.08, 0.25) * w
            f += rng.uniform(0.5, 1.0) * np.exp(-((yy - cy) ** 2 / (2 * sy**2) + (xx - cx) ** 2 / (2 * sx**2)))
        return f

    base = blob_field(blobs)
    out = np.zeros((num_classes, c, h, w))
    for k in range(num_classes):
        for ch in range(c):
            f = shared * base + (1 - shared) * blob_field(blobs)
            out[k, ch] = f / max(f.max(), 1e-9)
    return out


def synth_dataset(
    seed: int,
    n: int,
    num_classes: int = 10,
    shape: tuple[int, int, int] = (1, 28, 28),
    noise: float = 0.1,
    jitter: int = 0,
    shared: float = 0.0,
    blobs: int = 3,
    template_seed: int | None = None,
    name: str = "synthetic",
) -> Dataset:
    """Class-conditional blob images: per-class mean pattern plus uniform noise.

    ``jitter`` randomly translates each image by up to that many pixels and
    ``shared`` mixes a common pattern into every class template; both make the
    task harder and default to off.  Templates come from ``template_seed``
    (default ``seed``) so that train and test sets can share classes while
    drawing independent samples.
    """
    if n < num_classes:
        raise InputError(f"need n >= num_classes, got n={n}, num_classes={num_classes}")
    trng = derive_rng(seed if template_seed is None else template_seed, "synth-templates")
    templates = _class_templates(trng, num_classes, shape, blobs, shared)
    rng = derive_rng(seed, "synth-samples")
    labels = np.concatenate([np.arange(num_classes), rng.integers(0, num_classes, n - num_classes)])
    labels = rng.permutation(labels)
    imgs = templates[labels]
    if jitter:
        shifted = np.empty_like(imgs)
        for i in range(n):
            dy, dx = rng.integers(-jitter, jitter + 1, size=2)
            shifted[i] = np.roll(imgs[i], (dy, dx), axis=(1, 2))
        imgs = shifted
        imgs = imgs * rng.uniform(0.6, 1.0, size=(n, 1, 1, 1))
    imgs = imgs + rng.uniform(-noise, noise, size=imgs.shape)
    imgs = np.clip(imgs, 0.0, 1.0).astype(np.float32)
    return Dataset(imgs, labels.astype(np.int64), num_classes, name)


@dataclass
class PartitionPlan:
    assignments: list[list[int]]
    alpha: float
    seed: int
    sizes: list[int] = field(init=False)

    def __post_init__(self):
        self.sizes = [len(a) for a in self.assignments]

    @property
    def num_clients(self) -> int:
        return len(self.assignments)


def largest_remainder(proportions: np.ndarray, total: int) -> np.ndarray:
    """Integer counts summing to ``total``; leftovers go to the largest
    fractional parts, lower index first on ties."""
    quotas = proportions * total
    base = np.floor(quotas).astype(np.int64)
    left = total - int(base.sum())
    if left > 0:
        order = np.argsort(-(quotas - base), kind="stable")
        base[order[:left]] += 1
    return base


def dirichlet_partition(dataset: Dataset, num_clients: int, alpha: float, seed: int) -> PartitionPlan:
    """Split every class across clients with Dirichlet(alpha) proportions."""
    if len(dataset) == 0:
        raise InputError("cannot partition an empty dataset")
    if num_clients < 1:
        raise InputError(f"num_clients must be >= 1, got {num_clients}")
    if alpha <= 0:
        raise InputError(f"alpha must be > 0, got {alpha}")
    rng = derive_rng(seed, "partition")
    assignments: list[list[int]] = [[] for _ in range(num_clients)]
    for c in range(dataset.num_classes):
        idx = np.flatnonzero(dataset.labels == c)
        props = rng.dirichlet(np.full(num_clients, alpha))
        counts = largest_remainder(props, len(idx))
        perm = rng.permutation(idx)
        start = 0
        for k in range(num_clients):
            assignments[k].extend(perm[start : start + counts[k]].tolist())
            start += counts[k]
    for a in assignments:
        a.sort()
    empty = sum(1 for a in assignments if not a)
    if empty:
        log.warning("dirichlet partition left %d of %d clients without samples", empty, num_clients)
    return PartitionPlan(assignments, alpha, seed)


def write_pnm(path, image: np.ndarray) -> None:
    """Dump a [C,H,W] image in [0,1] as binary PGM (C=1) or PPM (C=3)."""
    img = np.asarray(image)
    if img.ndim == 2:
        img = img[None]
    c, h, w = img.shape
    if c not in (1, 3):
        raise InputError(f"PNM needs 1 or 3 channels, got {c}")
    pixels = np.rint(np.clip(img, 0, 1) * 255).astype(np.uint8)
    header = f"{'P5' if c == 1 else 'P6'}\n{w} {h}\n255\n".encode("ascii")
    body = pixels[0].tobytes() if c == 1 else pixels.transpose(1, 2, 0).tobytes()
    Path(path).write_bytes(header + body)


def read_pnm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    m = re.match(rb"(P[56])\s+(\d+)\s+(\d+)\s+(\d+)\s", raw)
    if m is None or int(m.group(4)) != 255:
        raise FormatError(f"{path}: unsupported PNM header")
    w, h = int(m.group(2)), int(m.group(3))
    c = 1 if m.group(1) == b"P5" else 3
    body = raw[m.end() :]
    if len(body) != w * h * c:
        raise FormatError(f"{path}: expected {w * h * c} pixel bytes, got {len(body)}")
    arr = np.frombuffer(body, dtype=np.uint8)
    arr = arr.reshape(1, h, w) if c == 1 else arr.reshape(h, w, 3).transpose(2, 0, 1)
    return (arr / np.float32(255)).astype(np.float32)
