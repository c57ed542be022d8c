"""Patch triggers for the baseline attacks and poisoned-dataset assembly.

Trigger functions take ``[..., C, H, W]`` arrays so the same code serves a
single image and a whole batch.
"""

from __future__ import annotations

from collections.abc import Callable

import numpy as np

from fedsab.data import Dataset
from fedsab.errors import InputError
from fedsab.rng import derive_rng

ALL = "all"

BADNETS_RGB = 5
BADNETS_GRAY = 4

# (row, first column) of each 1x2 DBA block
DBA_BLOCKS = ((0, 0), (0, 3), (2, 0), (2, 3))
DBA_RGB = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0), (1.0, 1.0, 0.0))
DBA_GRAY = tuple(v / 255.0 for v in (40, 85, 130, 175))


def badnets_trigger(image: np.ndarray) -> np.ndarray:
    """Bottom-right patch: white 5x5 with a black centred cross (RGB), or a
    4x4 checkerboard starting white (grayscale)."""
    img = np.array(image, dtype=np.float32, copy=True)
    c, h, w = img.shape[-3:]
    if h < 8 or w < 8:
        raise InputError(f"image {h}x{w} too small for the BadNets patch")
    if c == 1:
        s = BADNETS_GRAY
        yy, xx = np.mgrid[0:s, 0:s]
        img[..., :, h - s :, w - s :] = ((yy + xx) % 2 == 0).astype(np.float32)
    else:
        s = BADNETS_RGB
        block = np.ones((s, s), np.float32)
        block[s // 2, :] = 0.0
        block[:, s // 2] = 0.0
        img[..., :, h - s :, w - s :] = block
    return img


def dba_trigger(image: np.ndarray, part=ALL) -> np.ndarray:
    """Paint one (``part`` in 0..3) or all four 1x2 blocks in the top-left corner."""
    img = np.array(image, dtype=np.float32, copy=True)
    c, h, w = img.shape[-3:]
    if h < 6 or w < 6:
        raise InputError(f"image {h}x{w} too small for the DBA trigger")
    if part == ALL or part is None:
        parts = range(4)
    elif isinstance(part, (int, np.integer)) and 0 <= part < 4:
        parts = [int(part)]
    else:
        raise InputError(f"DBA part index must be 0..3 or ALL, got {part!r}")
    for k in parts:
        r, col = DBA_BLOCKS[k]
        if c == 1:
            img[..., 0, r, col : col + 2] = DBA_GRAY[k]
        else:
            for ch in range(c):
                img[..., ch, r, col : col + 2] = DBA_RGB[k][ch % 3]
    return img


def dba_part_fn(part) -> Callable[[np.ndarray], np.ndarray]:
    return lambda images: dba_trigger(images, part)


def build_poison_dataset(
    dataset: Dataset,
    trigger_fn: Callable[[np.ndarray], np.ndarray],
    target_class: int,
    fraction: float,
    seed: int,
    testset: Dataset | None = None,
    include_target: bool = False,
) -> tuple[Dataset, Dataset]:
    """Return (poisoned train set, poisoned test set).

    The train set keeps every example; a seeded ``fraction`` of them carries
    the trigger and is relabelled to ``target_class``.  The test set triggers
    every example of ``testset`` (default: ``dataset``) whose true label is
    not already the target, unless ``include_target``; its labels remain the
    original classes.
    """
    if not 0 < fraction <= 1:
        raise InputError(f"poison fraction must lie in (0, 1], got {fraction}")
    if not 0 <= target_class < dataset.num_classes:
        raise InputError(f"target class {target_class} outside [0, {dataset.num_classes})")
    chosen = poisoned_indices(len(dataset), fraction, seed)
    images = dataset.images.copy()
    labels = dataset.labels.copy()
    if len(chosen):
        images[chosen] = trigger_fn(dataset.images[chosen])
        labels[chosen] = target_class
    train = Dataset(images, labels, dataset.num_classes, f"{dataset.name}+poison")

    test = poison_testset(dataset if testset is None else testset, trigger_fn, target_class, include_target)
    return train, test


def poison_testset(source: Dataset, trigger_fn, target_class: int, include_target: bool = False) -> Dataset:
    """Trigger every example (by default only those not already of the target
    class).  Labels stay the original classes; ASR is measured against
    ``target_class``."""
    keep = np.arange(len(source)) if include_target else np.flatnonzero(source.labels != target_class)
    return Dataset(
        trigger_fn(source.images[keep]).astype(np.float32),
        source.labels[keep].copy(),
        source.num_classes,
        f"{source.name}+trigger",
    )


def poisoned_indices(n: int, fraction: float, seed: int) -> np.ndarray:
    """Indices :func:`build_poison_dataset` triggers for a set of size ``n``."""
    k = int(round(fraction * n))
    return np.sort(derive_rng(seed, "poison-select").permutation(n)[:k])
