"""Federated averaging core: client selection, local training, aggregation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from fedsab.data import Dataset
from fedsab.engine import ParamSet, Tensor
from fedsab.errors import ConfigError, InputError, ProtocolError
from fedsab.models import Sequential, loss_and_grads
from fedsab.rng import derive_rng

log = logging.getLogger(__name__)


@dataclass
class GlobalModel:
    params: ParamSet
    round_index: int = 0


@dataclass(frozen=True)
class ClientState:
    client_id: int
    indices: tuple[int, ...]
    is_adversary: bool = False

    @property
    def num_samples(self) -> int:
        return len(self.indices)


@dataclass
class UpdateUpload:
    client_id: int
    delta: ParamSet
    sample_count: int
    masks_applied: dict = field(default_factory=lambda: {"bottom95": False, "sparse": False})
    is_adversary: bool = False
    # attacks.MaskReport for adversarial uploads
    mask_report: object = None


@dataclass
class RoundConfig:
    clients_per_round: int = 5
    server_lr: float = 1.0
    epochs: int = 1
    batch: int = 32
    lr: float = 0.05
    decay: float = 0.0
    weighted_by_samples: bool = False

    def __post_init__(self):
        if self.clients_per_round < 1 or self.epochs < 1 or self.batch < 1:
            raise ConfigError("clients_per_round, epochs and batch must all be >= 1")
        if self.lr < 0 or self.decay < 0:
            raise ConfigError("learning rate and decay must be >= 0")


def lr_schedule(eta0: float, decay: float, t: int) -> float:
    """``eta0 / (1 + decay * t)``."""
    if decay < 0:
        raise ConfigError(f"decay must be >= 0, got {decay}")
    return eta0 / (1.0 + decay * t)


def make_pool(assignments, adversaries=()) -> list[ClientState]:
    adv = set(adversaries)
    return [ClientState(k, tuple(idx), k in adv) for k, idx in enumerate(assignments)]


def select_clients(pool: list[ClientState], m: int, seed: int, round_index: int, force=()) -> list[ClientState]:
    """``m`` distinct clients, uniform without replacement.

    Clients in ``force`` (the adversaries during attack rounds) replace the
    last-drawn non-forced picks when they were not drawn themselves.
    """
    if m > len(pool):
        raise ConfigError(f"cannot select {m} clients from a pool of {len(pool)}")
    if len(force) > m:
        raise ConfigError(f"{len(force)} forced clients exceed the {m} per round")
    rng = derive_rng(seed, "select", round_index)
    chosen = [int(i) for i in rng.choice(len(pool), size=m, replace=False)]
    missing = [f for f in force if f not in chosen]
    if missing:
        forced = set(force)
        for slot in reversed(range(m)):
            if not missing:
                break
            if chosen[slot] not in forced:
                chosen[slot] = missing.pop(0)
    return [pool[i] for i in chosen]


def local_sgd(
    arch: Sequential,
    params: ParamSet,
    images: np.ndarray,
    labels: np.ndarray,
    epochs: int,
    batch: int,
    lr: float,
    rng: np.random.Generator,
    grad_hook=None,
) -> ParamSet:
    """Mini-batch SGD from ``params``; ``grad_hook`` may rewrite each step's gradient."""
    p = params
    n = len(labels)
    lr32 = np.float32(lr)
    for _ in range(epochs):
        order = rng.permutation(n)
        for s in range(0, n, batch):
            idx = order[s : s + batch]
            _, g = loss_and_grads(arch, p, images[idx], labels[idx])
            if grad_hook is not None:
                g = grad_hook(g)
            p = ParamSet((k, Tensor(v.data - lr32 * g[k].data)) for k, v in p.items())
    return p


def local_train_benign(
    arch: Sequential,
    global_params: ParamSet,
    client: ClientState,
    data: Dataset,
    config: RoundConfig,
    round_index: int,
    seed: int,
) -> UpdateUpload | None:
    """E epochs of mini-batch SGD on the client's data; returns the delta.

    Clients without samples are skipped (``None``) with a warning.
    """
    if client.num_samples == 0:
        log.warning("client %d has no samples; skipped in round %d", client.client_id, round_index)
        return None
    idx = np.asarray(client.indices)
    rng = derive_rng(seed, "local-train", round_index, client.client_id)
    lr = lr_schedule(config.lr, config.decay, round_index)
    final = local_sgd(arch, global_params, data.images[idx], data.labels[idx], config.epochs, config.batch, lr, rng)
    return UpdateUpload(client.client_id, final.sub(global_params), client.num_samples)


def fedavg_aggregate(
    model: GlobalModel, uploads: list[UpdateUpload], eta: float = 1.0, weighted_by_samples: bool = False
) -> GlobalModel:
    """``w <- w + (eta/m) * sum_i delta_i``; with ``weighted_by_samples`` the
    mean is replaced by the n_k/n weighted mean."""
    if not uploads:
        raise InputError("aggregation needs at least one upload")
    for u in uploads:
        if not model.params.conformant(u.delta):
            raise ProtocolError(f"upload from client {u.client_id} is not conformant with the global model")
    if weighted_by_samples:
        total = sum(u.sample_count for u in uploads)
        weights = [u.sample_count / total for u in uploads]
    else:
        weights = [1.0 / len(uploads)] * len(uploads)
    new = ParamSet()
    for name, w in model.params.items():
        acc = np.zeros(w.shape, dtype=np.float64)
        for u, c in zip(uploads, weights):
            acc += c * u.delta[name].data
        new[name] = Tensor((w.data + eta * acc).astype(w.data.dtype))
    return GlobalModel(new, model.round_index + 1)


def fedsgd_objective(sample_counts, losses) -> float:
    """``sum_k (n_k / n) * F_k``."""
    counts = np.asarray(sample_counts, dtype=np.float64)
    losses = np.asarray(losses, dtype=np.float64)
    if counts.shape != losses.shape or counts.sum() <= 0:
        raise InputError("need matching, positive per-client sample counts and losses")
    return float(np.sum(counts / counts.sum() * losses))
