"""Defenses and audits: DP noise, STRIP entropy screening, Grad-CAM, PartFedAvg."""

from __future__ import annotations

import dataclasses
import hashlib
import math
from dataclasses import dataclass

import numpy as np

from fedsab.attacks import MaskReport, sparse_update_mask
from fedsab.engine import ParamSet, Tensor, softmax
from fedsab.errors import ConfigError, InputError
from fedsab.fl import UpdateUpload
from fedsab.models import Classifier, forward_pass
from fedsab.rng import derive_rng, derive_seed

SITES = ("client", "server")


@dataclass
class DpConfig:
    mean: float = 1e-6
    sigma: float = 1e-3
    seed: int = 0
    zero_mean: bool = False
    site: str = "client"

    def __post_init__(self):
        if self.sigma < 0:
            raise ConfigError(f"DP sigma must be >= 0, got {self.sigma}")
        if self.site not in SITES:
            raise ConfigError(f"DP site must be one of {SITES}, got '{self.site}'")


def gaussian_noise_like(params: ParamSet, cfg: DpConfig, *keys) -> ParamSet:
    rng = derive_rng(cfg.seed, "dp", *keys)
    mean = 0.0 if cfg.zero_mean else cfg.mean
    out = ParamSet()
    for name, t in params.items():
        noise = rng.normal(mean, cfg.sigma, size=t.shape) if cfg.sigma > 0 else np.full(t.shape, mean)
        out[name] = Tensor((t.data + noise).astype(t.data.dtype))
    return out


def dp_noise(upload: UpdateUpload, cfg: DpConfig, round_index: int = 0) -> UpdateUpload:
    """Add independent Gaussian(mean, sigma) noise to every delta coordinate,
    seeded per (round, client)."""
    noisy = gaussian_noise_like(upload.delta, cfg, round_index, upload.client_id)
    return dataclasses.replace(upload, delta=noisy)


def partfedavg_server_drop(uploads: list[UpdateUpload], drop_fraction: float, seed: int, round_index: int = 0):
    """Server-side sparse mask on every upload, benign and adversarial alike."""
    out = []
    for u in uploads:
        masked, rep = sparse_update_mask(u.delta, drop_fraction, derive_seed(seed, "partfedavg", round_index, u.client_id))
        report = u.mask_report or MaskReport()
        merged = MaskReport(dict(report.top), {k: report.sparse.get(k, 0) + v for k, v in rep.sparse.items()})
        out.append(dataclasses.replace(u, delta=masked, mask_report=merged))
    return out


# -- STRIP -----------------------------------------------------------------
@dataclass
class StripConfig:
    n: int = 100
    blend: float = 0.5
    base: float = 2.0
    seed: int = 0
    threshold: float | None = None

    def __post_init__(self):
        if self.n < 1:
            raise ConfigError(f"STRIP needs N >= 1 perturbations, got {self.n}")
        if not 0 < self.blend < 1:
            raise ConfigError(f"STRIP blend must lie in (0, 1), got {self.blend}")


def entropy(probs: np.ndarray, base: float = 2.0) -> np.ndarray:
    p = np.asarray(probs, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p), 0.0)
    return -terms.sum(axis=-1) / math.log(base)


def _canonical_order(images: np.ndarray) -> np.ndarray:
    digests = [hashlib.blake2b(np.ascontiguousarray(img, dtype=np.float32).tobytes(), digest_size=16).digest() for img in images]
    return np.array(sorted(range(len(images)), key=lambda i: (digests[i], i)))


def strip_draw(perturbation_set: np.ndarray, cfg: StripConfig) -> np.ndarray:
    """The N perturbation images STRIP blends with; independent of set order."""
    perturbation_set = np.asarray(perturbation_set, dtype=np.float32)
    if len(perturbation_set) < cfg.n:
        raise InputError(f"STRIP needs at least {cfg.n} perturbation images, got {len(perturbation_set)}")
    ordered = perturbation_set[_canonical_order(perturbation_set)]
    pick = derive_rng(cfg.seed, "strip").choice(len(ordered), size=cfg.n, replace=False)
    return ordered[np.sort(pick)]


def strip_scores(model, inputs: np.ndarray, perturbation_set: np.ndarray, cfg: StripConfig) -> np.ndarray:
    """Mean prediction entropy of each input blended with N benign images."""
    draws = strip_draw(perturbation_set, cfg)
    fn = getattr(model, "predict", model)
    scores = np.empty(len(inputs))
    for i, x in enumerate(np.asarray(inputs, dtype=np.float32)):
        blended = np.clip(cfg.blend * x[None] + (1 - cfg.blend) * draws, 0.0, 1.0)
        probs = softmax(np.asarray(fn(blended), dtype=np.float64))
        scores[i] = entropy(probs, cfg.base).mean()
    return scores


def strip_score(model, image: np.ndarray, perturbation_set: np.ndarray, cfg: StripConfig) -> float:
    return float(strip_scores(model, np.asarray(image)[None], perturbation_set, cfg)[0])


@dataclass
class Histogram:
    edges: np.ndarray
    counts: np.ndarray

    def rows(self):
        return [(float(self.edges[i]), float(self.edges[i + 1]), int(c)) for i, c in enumerate(self.counts)]


def strip_histogram(scores: np.ndarray, num_classes: int, bins: int = 20, base: float = 2.0) -> Histogram:
    """Fixed-width histogram of entropy scores over [0, log_base K]."""
    if bins < 2:
        raise InputError(f"need at least 2 bins, got {bins}")
    top = math.log(num_classes) / math.log(base)
    edges = np.linspace(0.0, top, bins + 1)
    counts, _ = np.histogram(np.clip(scores, 0.0, top), bins=edges)
    return Histogram(edges, counts.astype(np.int64))


def histogram_intersection(a: Histogram, b: Histogram) -> float:
    """Sum of bin-wise minima of the two normalised histograms (1 = identical)."""
    if not np.array_equal(a.edges, b.edges):
        raise InputError("histograms have different bin edges")
    pa = a.counts / max(a.counts.sum(), 1)
    pb = b.counts / max(b.counts.sum(), 1)
    return float(np.minimum(pa, pb).sum())


# -- Grad-CAM ----------------------------------------------------------------
@dataclass
class Heatmap:
    values: np.ndarray  # [H, W] in [0, 1]
    raw_min: float
    raw_max: float


def _nearest_upsample(m: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    h, w = m.shape
    rows = (np.arange(size[0]) * h) // size[0]
    cols = (np.arange(size[1]) * w) // size[1]
    return m[np.ix_(rows, cols)]


def gradcam_batch(model: Classifier, images: np.ndarray, class_index) -> list[Heatmap]:
    """Grad-CAM maps over the last conv layer for each image.

    ``class_index`` is one class for all images or one per image.
    """
    arch = model.arch
    if arch.last_conv_index is None:
        raise ConfigError("Grad-CAM needs a model with at least one conv layer")
    images = np.asarray(images, dtype=np.float32)
    logits, tape = forward_pass(arch, model.params, images)
    cls = np.broadcast_to(np.asarray(class_index, dtype=np.int64), (len(images),))
    seed = np.zeros_like(logits.data)
    seed[np.arange(len(images)), cls] = 1.0
    tap = tape.taps["last_conv"]
    tape.backward(logits, seed)
    acts = tap.data.astype(np.float64)
    grads = tape.grad(tap).astype(np.float64)
    alpha = grads.mean(axis=(2, 3))
    cams = np.maximum(np.einsum("nk,nkhw->nhw", alpha, acts), 0.0)
    out = []
    for cam in cams:
        up = _nearest_upsample(cam, images.shape[2:])
        lo, hi = float(up.min()), float(up.max())
        norm = (up - lo) / (hi - lo) if hi > lo else np.zeros_like(up)
        out.append(Heatmap(norm.astype(np.float32), lo, hi))
    return out


def gradcam(model: Classifier, image: np.ndarray, class_index: int) -> Heatmap:
    return gradcam_batch(model, np.asarray(image)[None], class_index)[0]


def patch_mass_fraction(heat: np.ndarray, rows: slice, cols: slice) -> float:
    """Share of total heatmap mass inside the region (0 for an all-zero map)."""
    total = float(heat.sum())
    return float(heat[rows, cols].sum()) / total if total > 0 else 0.0
