"""Attack success rate, benign accuracy, accuracy loss and perceptual hashing."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
import scipy.fft

from fedsab.errors import InputError


@dataclass
class MetricsRecord:
    round: int
    asr: float
    ba: float
    tal: float = 0.0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("asr", "ba"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0) and not np.isnan(v):
                raise InputError(f"{name}={v} outside [0, 1]")


def _predictions(model, images: np.ndarray) -> np.ndarray:
    """``model`` is a callable returning logits, or an object with ``predict``."""
    fn = getattr(model, "predict", model)
    return np.asarray(fn(images)).argmax(axis=1)


def asr(model, poisoned_testset, target_class: int) -> float:
    """Fraction of triggered test inputs classified as ``target_class``."""
    images = getattr(poisoned_testset, "images", poisoned_testset)
    if len(images) == 0:
        raise InputError("ASR needs a non-empty poisoned test set")
    return float(np.mean(_predictions(model, images) == target_class))


def ba(model, benign_testset) -> float:
    """Top-1 accuracy on clean test data."""
    if len(benign_testset) == 0:
        raise InputError("BA needs a non-empty test set")
    return float(np.mean(_predictions(model, benign_testset.images) == benign_testset.labels))


def tal(ba_clean_series, ba_attacked_series, round: int) -> float:
    """Accuracy loss at ``round``: clean-control BA minus attacked BA."""
    if not (0 <= round < len(ba_clean_series) and round < len(ba_attacked_series)):
        raise InputError(f"round {round} outside the BA series")
    return float(ba_clean_series[round]) - float(ba_attacked_series[round])


# -- perceptual hash -------------------------------------------------------
def _bilinear_weights(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Corner-aligned sample positions: output i maps to i*(n_in-1)/(n_out-1)."""
    if n_in == 1:
        z = np.zeros(n_out, dtype=np.int64)
        return z, z, np.zeros(n_out)
    pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.minimum(np.floor(pos).astype(np.int64), n_in - 2)
    return lo, lo + 1, pos - lo


def resize_bilinear(gray: np.ndarray, size: int = 32) -> np.ndarray:
    y0, y1, ty = _bilinear_weights(gray.shape[0], size)
    x0, x1, tx = _bilinear_weights(gray.shape[1], size)
    rows = gray[y0] + ty[:, None] * (gray[y1] - gray[y0])
    return rows[:, x0] + tx[None, :] * (rows[:, x1] - rows[:, x0])


def phash64(image) -> int:
    """64-bit DCT perceptual hash.

    Channel-mean grayscale, corner-aligned bilinear resize to 32x32,
    orthonormal 2-D DCT-II, top-left 8x8 block including DC, threshold at the
    block median; bits are scanned row-major, first coefficient as the MSB.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[None]
    gray = img.mean(axis=0)
    coeffs = scipy.fft.dctn(resize_bilinear(gray, 32), type=2, norm="ortho")[:8, :8].ravel()
    bits = coeffs > np.median(coeffs)
    value = 0
    for b in bits:
        value = (value << 1) | int(b)
    return value


def phash_distance(a: int, b: int) -> int:
    return int(a ^ b).bit_count()


def phash_distances(originals: np.ndarray, poisoned: np.ndarray) -> np.ndarray:
    if len(originals) != len(poisoned):
        raise InputError(f"{len(originals)} originals but {len(poisoned)} poisoned images")
    return np.array([phash_distance(phash64(o), phash64(p)) for o, p in zip(originals, poisoned)])


def write_phash_audit(path, originals: np.ndarray, poisoned: np.ndarray) -> np.ndarray:
    """CSV rows (image_id, hash_hex, distance_to_original) for ``poisoned``."""
    dist = phash_distances(originals, poisoned)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image_id", "hash_hex", "distance_to_original"])
        for i, (img, d) in enumerate(zip(poisoned, dist)):
            w.writerow([i, f"{phash64(img):016x}", int(d)])
    return dist
