#!/usr/bin/env python3
"""Multi-seed studies on the desk config.

    python scripts/study.py lifespan  --seeds 0 1 2 --out runs/study
    python scripts/study.py ablation  --seeds 0 1 2
    python scripts/study.py dp        --seeds 0 1 2

Each study prints a small table and, with --out, keeps every run's
rounds.csv and final model under <out>/<variant>-seed<k>/ so the CLI
commands (compare, strip-eval, gradcam-dump) can be pointed at them.
"""

from __future__ import annotations

import argparse
import logging
from pathlib import Path

from fedsab.config import ExperimentConfig, resolve_config
from fedsab.studies import Study

ROW_40, ROW_60 = 39, 59


def lifespan(study: Study, seeds) -> None:
    print(f"{'variant':10s} {'ASR@40':>7s} {'ASR@60':>7s} {'drop':>7s} {'BA@60':>7s}")
    for v in ("sab", "badnets", "dba"):
        a40 = study.seed_mean(v, seeds, lambda r: r.asr(ROW_40))
        a60 = study.seed_mean(v, seeds, lambda r: r.asr(ROW_60))
        ba = study.seed_mean(v, seeds, lambda r: r.ba(ROW_60))
        print(f"{v:10s} {a40:7.3f} {a60:7.3f} {a40 - a60:7.3f} {ba:7.3f}")


def ablation(study: Study, seeds) -> None:
    print(f"{'variant':10s} {'attack':>7s} {'post':>7s}")
    for v in ("sab", "sab_b95", "sab_plain"):
        att = study.seed_mean(v, seeds, lambda r: r.mean_asr("attack"))
        post = study.seed_mean(v, seeds, lambda r: r.mean_asr("post"))
        print(f"{v:10s} {att:7.3f} {post:7.3f}")


def dp(study: Study, seeds) -> None:
    print(f"{'variant':10s} {'no-DP':>7s} {'DP':>7s} {'decline':>8s}")
    for v in ("sab", "badnets"):
        def activity(r):
            return r.mean_asr(("attack", "post"))

        plain = study.seed_mean(v, seeds, activity)
        noisy = study.seed_mean(v, seeds, activity, dp=True)
        print(f"{v:10s} {plain:7.3f} {noisy:7.3f} {plain - noisy:8.4f}")


STUDIES = {"lifespan": lifespan, "ablation": ablation, "dp": dp}


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("study", choices=sorted(STUDIES))
    p.add_argument("--config", default="desk_sab.json")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--out", type=Path, default=None)
    p.add_argument("--stego-cache", type=Path, default=Path("runs/.stego-cache"))
    p.add_argument("--threads", type=int, default=1)
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    base = ExperimentConfig.from_json(resolve_config(args.config))
    study = Study(base, stego_cache=args.stego_cache, out_dir=args.out, threads=args.threads)
    STUDIES[args.study](study, args.seeds)


if __name__ == "__main__":
    main()
