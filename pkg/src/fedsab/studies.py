"""Multi-run studies: attack comparisons, mask ablations and the DP sweep.

Every study derives its variants from one base config by switching the
attack kind, the mask flags, or the DP defense, so the runs differ only in
the factor under study. Results are kept in memory and, when a directory is
given, each run's rounds.csv and final model are written under
``<dir>/<variant>-seed<seed>/``.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from fedsab.config import ExperimentConfig
from fedsab.engine import save_params
from fedsab.experiment import Experiment, RoundReport, load_datasets, prepare_stego, write_rounds_csv
from fedsab.stego import StegoNets

log = logging.getLogger(__name__)

# attack overrides per variant; None removes the attack altogether
VARIANTS: dict[str, dict | None] = {
    "clean": None,
    "sab": {"kind": "sab", "bottom95": True, "sparse": True},
    "sab_b95": {"kind": "sab", "bottom95": True, "sparse": False},
    "sab_plain": {"kind": "sab", "bottom95": False, "sparse": False},
    "badnets": {"kind": "badnets"},
    "dba": {"kind": "dba"},
}


def variant_config(base: ExperimentConfig, variant: str, seed: int | None = None, dp: bool = False) -> ExperimentConfig:
    if variant not in VARIANTS:
        raise KeyError(f"unknown variant '{variant}'; choose from {sorted(VARIANTS)}")
    over = VARIANTS[variant]
    if over is None:
        attack = dataclasses.replace(base.attack, duration=0) if base.attack is not None else None
    else:
        attack = dataclasses.replace(base.attack, **over)
    defenses = dataclasses.replace(base.defenses, dp=dp) if dp != base.defenses.dp else base.defenses
    return dataclasses.replace(base, attack=attack, defenses=defenses, seed=base.seed if seed is None else seed)


@dataclass
class StudyRun:
    variant: str
    seed: int
    dp: bool
    config: ExperimentConfig
    reports: list[RoundReport]
    experiment: Experiment

    @property
    def key(self) -> str:
        return f"{self.variant}{'-dp' if self.dp else ''}-seed{self.seed}"

    def asr(self, row: int) -> float:
        return float(self.reports[row].asr)

    def ba(self, row: int) -> float:
        return float(self.reports[row].ba)

    def mean_asr(self, phase: str | tuple[str, ...]) -> float:
        phases = (phase,) if isinstance(phase, str) else phase
        vals = [r.asr for r in self.reports if r.phase in phases and r.asr is not None]
        return float(np.mean(vals)) if vals else float("nan")


class Study:
    """Runs variants of ``base`` on shared data and stego nets, memoised by
    (variant, seed, dp)."""

    def __init__(self, base: ExperimentConfig, stego_cache=None, out_dir=None, threads: int = 1):
        self.base = base
        self.threads = threads
        self.out_dir = Path(out_dir) if out_dir else None
        self.train, self.test = load_datasets(base.dataset)
        self._stego_cache = stego_cache
        self._stego: StegoNets | None = None
        self.runs: dict[tuple[str, int, bool], StudyRun] = {}

    @property
    def stego(self) -> StegoNets:
        if self._stego is None:
            self._stego = prepare_stego(self.base, self.train, self._stego_cache)
        return self._stego

    def run(self, variant: str, seed: int | None = None, dp: bool = False) -> StudyRun:
        seed = self.base.seed if seed is None else seed
        key = (variant, seed, dp)
        if key in self.runs:
            return self.runs[key]
        cfg = variant_config(self.base, variant, seed, dp)
        nets = self.stego if cfg.attack is not None and cfg.attack.kind == "sab" else None
        exp = Experiment(cfg, stego_nets=nets, train=self.train, test=self.test)
        reports = exp.run(self.threads)
        run = StudyRun(variant, seed, dp, cfg, reports, exp)
        self.runs[key] = run
        log.info("%s done: final BA %.3f ASR %s", run.key, reports[-1].ba, reports[-1].asr)
        if self.out_dir is not None:
            d = self.out_dir / run.key
            d.mkdir(parents=True, exist_ok=True)
            (d / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
            write_rounds_csv(reports, d / "rounds.csv")
            save_params(exp.final_model.params, d / "model_final.fsab")
        return run

    def clean_for(self, run: StudyRun) -> StudyRun:
        """Same-seed clean control of ``run`` (attack window closed)."""
        return self.run("clean", run.seed, run.dp)

    def seed_mean(self, variant: str, seeds, fn, dp: bool = False) -> float:
        return float(np.mean([fn(self.run(variant, s, dp)) for s in seeds]))

