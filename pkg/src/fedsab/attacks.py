"""Adversarial client behaviour: SAB and the BadNets / DBA baselines.

SAB trains on its poisoned local data while zeroing, at every SGD step, the
largest-magnitude 5% of each gradient tensor (so the backdoor lives in the
coordinates benign clients rarely dominate), then randomly zeroes 20% of the
uploaded delta.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from fedsab.engine import ParamSet, Tensor
from fedsab.errors import ConfigError, InputError
from fedsab.fl import ClientState, UpdateUpload, local_sgd, lr_schedule
from fedsab.models import Sequential, loss_and_grads
from fedsab.rng import derive_rng, derive_seed

KINDS = ("sab", "badnets", "dba")


@dataclass
class MaskReport:
    """Coordinates zeroed per tensor, by stage."""

    top: dict[str, int] = field(default_factory=dict)
    sparse: dict[str, int] = field(default_factory=dict)

    @property
    def zeroed_top(self) -> int:
        return sum(self.top.values())

    @property
    def zeroed_sparse(self) -> int:
        return sum(self.sparse.values())


def _count(fraction: float, n: int, rounding) -> int:
    # round away float fuzz such as 0.05 * 1000 = 50.000000000000004
    return int(rounding(round(fraction * n, 9)))


def bottom95_mask(grads: ParamSet, top_fraction: float = 0.05, global_flat: bool = False) -> tuple[ParamSet, MaskReport]:
    """Zero the ``ceil(top_fraction * size)`` largest-|g| coordinates of each
    tensor (or of the whole flattened set when ``global_flat``).

    Ties go to the lower flat index.
    """
    if not 0 <= top_fraction < 1:
        raise InputError(f"top_fraction must lie in [0, 1), got {top_fraction}")
    report = MaskReport()
    if global_flat:
        flat = grads.flat().copy()
        k = _count(top_fraction, flat.size, math.ceil)
        if k:
            flat[np.argsort(-np.abs(flat), kind="stable")[:k]] = 0
        out = grads.unflatten(flat)
        report.top["*"] = k
        return out, report
    out = ParamSet()
    for name, t in grads.items():
        g = t.data.reshape(-1).copy()
        k = _count(top_fraction, g.size, math.ceil)
        if k:
            g[np.argsort(-np.abs(g), kind="stable")[:k]] = 0
        out[name] = Tensor(g.reshape(t.shape))
        report.top[name] = k
    return out, report


def sparse_update_mask(delta: ParamSet, drop_fraction: float = 0.20, seed: int = 0) -> tuple[ParamSet, MaskReport]:
    """Zero ``floor(drop_fraction * size)`` uniformly chosen coordinates per tensor."""
    if not 0 <= drop_fraction < 1:
        raise InputError(f"drop_fraction must lie in [0, 1), got {drop_fraction}")
    rng = derive_rng(seed, "sparse-update")
    report = MaskReport()
    out = ParamSet()
    for name, t in delta.items():
        d = t.data.reshape(-1).copy()
        k = _count(drop_fraction, d.size, math.floor)
        if k:
            d[rng.choice(d.size, size=k, replace=False)] = 0
        out[name] = Tensor(d.reshape(t.shape))
        report.sparse[name] = k
    return out, report


def poisoned_gradient(arch: Sequential, params: ParamSet, images: np.ndarray, labels: np.ndarray) -> ParamSet:
    """Batch-mean loss gradient on poisoned data."""
    if len(images) == 0:
        raise InputError("poisoned_gradient needs a non-empty batch")
    return loss_and_grads(arch, params, images, labels)[1]


@dataclass
class AttackConfig:
    kind: str = "sab"
    target_class: int = 0
    start: int = 20
    duration: int = 20
    lr: float = 0.02
    decay: float = 0.005
    top_fraction: float = 0.05
    drop_fraction: float = 0.20
    poison_fraction: float = 0.5
    # None -> on for SAB, off for the baselines
    bottom95: bool | None = None
    sparse: bool | None = None
    mask_global: bool = False
    mask_at_upload: bool = False
    num_adversaries: int = 1
    epochs: int | None = None
    batch: int | None = None
    asr_include_target: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"attack kind must be one of {KINDS}, got '{self.kind}'")
        if not 0 <= self.top_fraction < 1 or not 0 <= self.drop_fraction < 1:
            raise ConfigError("top_fraction and drop_fraction must lie in [0, 1)")
        if not 0 < self.poison_fraction <= 1:
            raise ConfigError("poison_fraction must lie in (0, 1]")
        if self.start < 0 or self.duration < 0:
            raise ConfigError("attack start and duration must be >= 0")
        if self.num_adversaries < 1:
            raise ConfigError("num_adversaries must be >= 1")
        if (self.epochs is not None and self.epochs < 1) or (self.batch is not None and self.batch < 1):
            raise ConfigError("attack.epochs and attack.batch must be >= 1 when given")

    @property
    def use_bottom95(self) -> bool:
        return self.kind == "sab" if self.bottom95 is None else self.bottom95

    @property
    def use_sparse(self) -> bool:
        return self.kind == "sab" if self.sparse is None else self.sparse

    def active(self, round_index: int) -> bool:
        return self.start <= round_index < self.start + self.duration


def dba_round_assignment(adversaries, round_index: int) -> dict:
    """Adversary j (in list order) carries trigger part ``(j + round) % 4``."""
    if len(adversaries) < 1:
        raise InputError("need at least one adversary")
    return {a: (j + round_index) % 4 for j, a in enumerate(adversaries)}


def adversary_local_train(
    arch: Sequential,
    global_params: ParamSet,
    client: ClientState,
    attack: AttackConfig,
    round_index: int,
    images: np.ndarray,
    labels: np.ndarray,
    seed: int,
    epochs: int,
    batch: int,
) -> UpdateUpload:
    """Train on the adversary's poisoned data and build its upload.

    ``images``/``labels`` are the already-triggered local set for this round.
    With bottom-95 masking on, every step's gradient is masked before the SGD
    update (or, with ``mask_at_upload``, the final delta once); the sparse
    mask is then applied to the delta.
    """
    if attack.kind not in KINDS:
        raise ConfigError(f"unknown attack kind '{attack.kind}'")
    report = MaskReport()
    hook = None
    if attack.use_bottom95 and not attack.mask_at_upload:

        def hook(g):
            masked, rep = bottom95_mask(g, attack.top_fraction, attack.mask_global)
            report.top = rep.top
            return masked

    rng = derive_rng(seed, "adversary-train", round_index, client.client_id)
    lr = lr_schedule(attack.lr, attack.decay, max(round_index - attack.start, 0))
    final = local_sgd(arch, global_params, images, labels, epochs, batch, lr, rng, grad_hook=hook)
    delta = final.sub(global_params)
    if attack.use_bottom95 and attack.mask_at_upload:
        delta, rep = bottom95_mask(delta, attack.top_fraction, attack.mask_global)
        report.top = rep.top
    if attack.use_sparse:
        delta, rep = sparse_update_mask(delta, attack.drop_fraction, derive_seed(seed, "sparse", round_index, client.client_id))
        report.sparse = rep.sparse
    return UpdateUpload(
        client.client_id,
        delta,
        len(labels),
        masks_applied={"bottom95": attack.use_bottom95, "sparse": attack.use_sparse},
        is_adversary=True,
        mask_report=report,
    )
