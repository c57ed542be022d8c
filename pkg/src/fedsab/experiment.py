"""Round and experiment orchestration on top of the federated core.

One round: select clients, train them (adversaries switch to their poisoned
branch inside the attack window), apply defense transforms to the uploads,
aggregate, then evaluate BA and ASR on the new global model.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from fedsab.attacks import AttackConfig, adversary_local_train, dba_round_assignment
from fedsab.config import DatasetSpec, ExperimentConfig
from fedsab.data import Dataset, dirichlet_partition, load_cifar_binary, load_idx, synth_dataset
from fedsab.defenses import dp_noise, gaussian_noise_like, partfedavg_server_drop
from fedsab.engine import cross_entropy_loss, save_params
from fedsab.errors import ConfigError, FedSabError
from fedsab.fl import (
    ClientState,
    GlobalModel,
    RoundConfig,
    UpdateUpload,
    fedavg_aggregate,
    fedsgd_objective,
    local_train_benign,
    make_pool,
    select_clients,
)
from fedsab.metrics import asr as asr_metric
from fedsab.metrics import ba as ba_metric
from fedsab.models import Classifier, Sequential, build_model, predict
from fedsab.rng import derive_rng, derive_seed
from fedsab.stego import StegoNets, sab_trigger_fn, secret_from_label, train_stego, write_trace_csv
from fedsab.triggers import ALL, badnets_trigger, build_poison_dataset, dba_part_fn, dba_trigger, poison_testset

log = logging.getLogger(__name__)

ROUND_COLUMNS = [
    "round",
    "phase",
    "BA",
    "ASR",
    "TAL",
    "benign_loss",
    "dp",
    "dp_sigma",
    "partfedavg_drop",
    "zeroed_top",
    "zeroed_sparse",
]


@dataclass
class RoundReport:
    round: int
    phase: str
    selected: list[int]
    ba: float
    asr: float | None
    benign_loss: float
    tal: float | None = None
    dp: bool = False
    dp_sigma: float = 0.0
    partfedavg_drop: float = 0.0
    zeroed_top: int = 0
    zeroed_sparse: int = 0

    def csv_row(self) -> list[str]:
        def num(v):
            return "" if v is None else f"{v:.6f}"

        return [
            str(self.round),
            self.phase,
            num(self.ba),
            num(self.asr),
            num(self.tal),
            num(self.benign_loss),
            str(int(self.dp)),
            f"{self.dp_sigma:g}",
            f"{self.partfedavg_drop:g}",
            str(self.zeroed_top),
            str(self.zeroed_sparse),
        ]


# -- data -------------------------------------------------------------------
def load_datasets(spec: DatasetSpec) -> tuple[Dataset, Dataset]:
    """(train, test) per the dataset spec; file-backed sets are truncated to
    ``n_train`` / ``n_test``."""
    if spec.source == "synthetic":
        common = dict(
            num_classes=spec.num_classes,
            shape=spec.shape,
            noise=spec.noise,
            jitter=spec.jitter,
            shared=spec.shared,
            blobs=spec.blobs,
            template_seed=spec.data_seed,
        )
        train = synth_dataset(spec.data_seed, spec.n_train, name=f"{spec.name}-train", **common)
        test = synth_dataset(derive_seed(spec.data_seed, "test"), spec.n_test, name=f"{spec.name}-test", **common)
        return train, test
    if spec.source == "idx":
        paths = (spec.train_images, spec.train_labels, spec.test_images, spec.test_labels)
        if any(p is None for p in paths):
            raise ConfigError("dataset.source 'idx' needs train/test image and label paths")
        train = load_idx(spec.train_images, spec.train_labels, f"{spec.name}-train")
        test = load_idx(spec.test_images, spec.test_labels, f"{spec.name}-test")
    else:
        if not spec.train_files or not spec.test_files:
            raise ConfigError("dataset.source 'cifar' needs train_files and test_files")
        train = load_cifar_binary(spec.train_files, spec.num_classes, f"{spec.name}-train")
        test = load_cifar_binary(spec.test_files, spec.num_classes, f"{spec.name}-test")
    if train.shape != spec.shape:
        raise ConfigError(f"dataset.shape {list(spec.shape)} does not match files {list(train.shape)}")
    return train.subset(range(min(spec.n_train, len(train)))), test.subset(range(min(spec.n_test, len(test))))


# -- stego nets ---------------------------------------------------------------
def stego_key(config: ExperimentConfig) -> str:
    payload = {"dataset": dataclasses.asdict(config.dataset), "stego": dataclasses.asdict(config.stego)}
    return hashlib.sha256(json.dumps(payload, sort_keys=True, default=list).encode()).hexdigest()[:16]


def prepare_stego(config: ExperimentConfig, train: Dataset, cache_dir=None) -> StegoNets:
    """Train the SAB encoder/decoder, reusing a cached bundle when present."""
    s = config.stego
    path = None
    if cache_dir is not None:
        path = Path(cache_dir) / f"stego-{stego_key(config)}.fsab"
        if path.exists():
            log.info("reusing stego nets %s", path)
            return StegoNets.load(path, train.shape, s.nbits, s.width)
    nets = train_stego(train, s)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        nets.save(path)
        write_trace_csv(nets, path.with_suffix(".trace.csv"))
    return nets


def trigger_for(attack: AttackConfig, nets: StegoNets | None, nbits: int, seed: int, part=ALL):
    if attack.kind == "sab":
        if nets is None:
            raise ConfigError("SAB needs trained stego nets")
        return sab_trigger_fn(nets, secret_from_label(str(attack.target_class), nbits, seed))
    if attack.kind == "badnets":
        return badnets_trigger
    return dba_part_fn(part) if part != ALL else (lambda x: dba_trigger(x, ALL))


# -- the experiment ---------------------------------------------------------------
@dataclass
class AdversaryData:
    """Triggered local sets; DBA keeps one per trigger part."""

    client_id: int
    sets: dict = field(default_factory=dict)

    def for_part(self, part) -> Dataset:
        return self.sets[part]


class Experiment:
    """All state for one run: data, partition, pool, poisoned sets, model."""

    def __init__(self, config: ExperimentConfig, stego_nets: StegoNets | None = None, stego_cache=None,
                 train: Dataset | None = None, test: Dataset | None = None):
        config.validate()
        self.config = config
        if train is None or test is None:
            train, test = load_datasets(config.dataset)
        self.train, self.test = train, test
        self.arch: Sequential = build_model(config.model, train.shape, train.num_classes)
        self.plan = dirichlet_partition(train, config.pool_size, config.partition.alpha, config.seed)
        attack = config.attack
        self.adversaries: list[int] = []
        if attack is not None:
            pick = derive_rng(config.seed, "adversaries").choice(config.pool_size, size=attack.num_adversaries, replace=False)
            self.adversaries = sorted(int(a) for a in pick)
        self.pool: list[ClientState] = make_pool(self.plan.assignments, self.adversaries)
        self.round_cfg = RoundConfig(
            clients_per_round=config.clients_per_round,
            server_lr=config.server_lr,
            epochs=config.benign.epochs,
            batch=config.benign.batch,
            lr=config.benign.lr,
            decay=config.benign.decay,
            weighted_by_samples=config.benign.weighted_by_samples,
        )
        self.stego = stego_nets
        self.poison_test: Dataset | None = None
        self.adv_data: dict[int, AdversaryData] = {}
        if attack is not None:
            if attack.kind == "sab" and self.stego is None:
                self.stego = prepare_stego(config, train, stego_cache)
            self._build_poison(attack)

    def _build_poison(self, attack: AttackConfig) -> None:
        cfg = self.config
        nbits = cfg.stego.nbits
        full = trigger_for(attack, self.stego, nbits, cfg.stego.seed)
        parts = range(4) if attack.kind == "dba" else [ALL]
        for a in self.adversaries:
            local = self.train.subset(self.pool[a].indices)
            data = AdversaryData(a)
            if len(local) == 0:
                log.warning("adversary %d has no local data", a)
            for part in parts:
                fn = trigger_for(attack, self.stego, nbits, cfg.stego.seed, part)
                if len(local):
                    data.sets[part] = build_poison_dataset(
                        local, fn, attack.target_class, attack.poison_fraction, derive_seed(cfg.seed, "poison", a),
                        testset=local,
                    )[0]
            self.adv_data[a] = data
        self.poison_test = poison_testset(self.test, full, attack.target_class, attack.asr_include_target)

    @property
    def attacked(self) -> bool:
        return self.config.attack is not None and self.config.attack.duration > 0

    def init_model(self) -> GlobalModel:
        return GlobalModel(self.arch.init(derive_rng(self.config.seed, "model-init")), 0)

    def phase(self, r: int) -> str:
        a = self.config.attack
        if a is None or a.duration == 0 or r < a.start:
            return "clean"
        return "attack" if a.active(r) else "post"

    def classifier(self, model: GlobalModel) -> Classifier:
        return Classifier(self.arch, model.params)

    # -- one round ---------------------------------------------------------
    def _train_client(self, model: GlobalModel, client: ClientState, r: int) -> UpdateUpload | None:
        attack = self.config.attack
        if client.is_adversary and attack is not None and attack.active(r):
            data = self.adv_data[client.client_id]
            part = dba_round_assignment(self.adversaries, r)[client.client_id] if attack.kind == "dba" else ALL
            if part not in data.sets:
                return None
            local = data.for_part(part)
            return adversary_local_train(
                self.arch,
                model.params,
                client,
                attack,
                r,
                local.images,
                local.labels,
                self.config.seed,
                attack.epochs or self.config.benign.epochs,
                attack.batch or self.config.benign.batch,
            )
        return local_train_benign(self.arch, model.params, client, self.train, self.round_cfg, r, self.config.seed)

    def run_round(self, model: GlobalModel, r: int, threads: int = 1, evaluate_asr: bool = True) -> tuple[GlobalModel, RoundReport]:
        cfg = self.config
        attack = cfg.attack
        force = self.adversaries if attack is not None and attack.active(r) else ()
        selected = select_clients(self.pool, cfg.clients_per_round, cfg.seed, r, force=force)
        try:
            if threads > 1:
                with ThreadPoolExecutor(max_workers=threads) as ex:
                    uploads = list(ex.map(lambda c: self._train_client(model, c, r), selected))
            else:
                uploads = [self._train_client(model, c, r) for c in selected]
        except FedSabError as exc:
            raise type(exc)(f"round {r}: {exc}") from exc
        uploads = [u for u in uploads if u is not None]
        d = cfg.defenses
        if d.dp and d.dp_config.site == "client":
            uploads = [dp_noise(u, d.dp_config, r) for u in uploads]
        if d.partfedavg_drop > 0:
            uploads = partfedavg_server_drop(uploads, d.partfedavg_drop, cfg.seed, r)
        if uploads:
            new = fedavg_aggregate(model, uploads, cfg.server_lr, cfg.benign.weighted_by_samples)
        else:
            new = GlobalModel(model.params, model.round_index + 1)
        if d.dp and d.dp_config.site == "server":
            noisy_delta = gaussian_noise_like(new.params.sub(model.params), d.dp_config, r, "server")
            new = GlobalModel(model.params.add(noisy_delta), new.round_index)
        clf = self.classifier(new)
        top = sum(u.mask_report.zeroed_top for u in uploads if u.mask_report is not None)
        sparse = sum(u.mask_report.zeroed_sparse for u in uploads if u.mask_report is not None)
        report = RoundReport(
            round=r,
            phase=self.phase(r),
            selected=[c.client_id for c in selected],
            ba=ba_metric(clf, self.test),
            asr=self._asr(clf) if (evaluate_asr and attack is not None and r % cfg.eval_asr_every == 0) else None,
            benign_loss=self._benign_loss(new, selected),
            dp=d.dp,
            dp_sigma=d.dp_config.sigma if d.dp else 0.0,
            partfedavg_drop=d.partfedavg_drop,
            zeroed_top=top,
            zeroed_sparse=sparse,
        )
        return new, report

    def _asr(self, clf: Classifier) -> float | None:
        if self.poison_test is None or len(self.poison_test) == 0:
            return None
        return asr_metric(clf, self.poison_test, self.config.attack.target_class)

    def _benign_loss(self, model: GlobalModel, selected: list[ClientState]) -> float:
        counts, losses = [], []
        for c in selected:
            if c.num_samples == 0:
                continue
            idx = np.asarray(c.indices)
            logits = predict(self.arch, model.params, self.train.images[idx])
            counts.append(c.num_samples)
            losses.append(cross_entropy_loss(logits, self.train.labels[idx])[0])
        return fedsgd_objective(counts, losses) if counts else float("nan")

    # -- full run ------------------------------------------------------------
    def run(self, threads: int = 1, clean_ba=None, on_report=None, snapshot_dir=None, evaluate_asr: bool = True):
        model = self.init_model()
        reports = []
        for r in range(self.config.rounds):
            model, rep = self.run_round(model, r, threads, evaluate_asr)
            if clean_ba is not None:
                rep.tal = float(clean_ba[r]) - rep.ba
            elif not self.attacked:
                rep.tal = 0.0
            reports.append(rep)
            if on_report is not None:
                on_report(rep)
            every = self.config.snapshot_every
            if snapshot_dir is not None and every and (r + 1) % every == 0:
                save_params(model.params, Path(snapshot_dir) / f"round_{r:04d}.fsab")
        self.final_model = model
        return reports


def clean_control(config: ExperimentConfig) -> ExperimentConfig:
    """Same-seed run with the attack window closed."""
    if config.attack is None:
        return config
    return dataclasses.replace(config, attack=dataclasses.replace(config.attack, duration=0))


def run_experiment(
    config: ExperimentConfig,
    threads: int = 1,
    stego_cache=None,
    with_control: bool = True,
    on_report=None,
    snapshot_dir=None,
    stego_nets: StegoNets | None = None,
) -> tuple[list[RoundReport], Experiment]:
    """Run all rounds; TAL comes from a same-seed clean control when an attack
    window is configured."""
    exp = Experiment(config, stego_nets=stego_nets, stego_cache=stego_cache)
    clean_ba = None
    if with_control and exp.attacked:
        control = Experiment(clean_control(config), stego_nets=exp.stego, train=exp.train, test=exp.test)
        clean_ba = [rep.ba for rep in control.run(threads, evaluate_asr=False)]
    return exp.run(threads, clean_ba, on_report, snapshot_dir), exp


def write_rounds_csv(reports, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ROUND_COLUMNS)
        for rep in reports:
            w.writerow(rep.csv_row())


def reports_by_round(reports) -> dict[int, RoundReport]:
    return {r.round: r for r in reports}


def mean_asr(reports, rounds) -> float:
    vals = [r.asr for r in reports if r.round in set(rounds) and r.asr is not None]
    return float(np.mean(vals)) if vals else float("nan")
