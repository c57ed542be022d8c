"""Command-line entry point: ``fedsab run|compare|strip-eval|gradcam-dump|phash-eval``."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import shutil
import sys
import time
from pathlib import Path

import numpy as np

from fedsab import __version__
from fedsab.config import ExperimentConfig, bundled_config, resolve_config
from fedsab.data import read_pnm, write_pnm
from fedsab.defenses import (
    StripConfig,
    gradcam_batch,
    histogram_intersection,
    patch_mass_fraction,
    strip_histogram,
    strip_scores,
)
from fedsab.engine import load_params, save_params
from fedsab.errors import AlignmentError, ConfigError, FedSabError, FormatError, InputError, UsageError
from fedsab.experiment import ROUND_COLUMNS, Experiment, load_datasets, prepare_stego, run_experiment
from fedsab.metrics import phash_distances, write_phash_audit
from fedsab.models import Classifier, build_model
from fedsab.stego import StegoNets, write_trace_csv
from fedsab.triggers import BADNETS_GRAY, BADNETS_RGB

log = logging.getLogger("fedsab")

DEFAULT_ROOT = "runs"
EXIT_CODES = {ConfigError: 2, InputError: 3, FormatError: 3, AlignmentError: 4, UsageError: 5}


def output_root(args) -> Path:
    return Path(args.out or os.environ.get("FEDSAB_OUT") or DEFAULT_ROOT)


def fresh_dir(path: Path, overwrite: bool) -> Path:
    """Create ``path``; an existing one is only replaced with ``--overwrite``."""
    if path.exists():
        if not overwrite:
            raise UsageError(f"{path} already exists; pass --overwrite to replace it")
        shutil.rmtree(path)
    path.mkdir(parents=True)
    return path


def load_config(args) -> ExperimentConfig:
    if args.config is None:
        if not args.desk:
            raise UsageError("give a config path or --desk")
        path = bundled_config("desk_sab.json")
    else:
        path = resolve_config(args.config)
    cfg = ExperimentConfig.from_json(path)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


class Manifest:
    """manifest.json kept up to date as a run progresses."""

    def __init__(self, run_dir: Path, command: str, config_hash: str | None):
        self.path = run_dir / "manifest.json"
        self.run_dir = run_dir
        self.data = {
            "command": command,
            "config_hash": config_hash,
            "tool_version": __version__,
            "started": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
            "finished": None,
            "status": "running",
            "artifacts": [],
        }
        self.write()

    def write(self) -> None:
        self.data["artifacts"] = sorted(
            str(p.relative_to(self.run_dir)) for p in self.run_dir.rglob("*") if p.is_file() and p != self.path
        )
        self.path.write_text(json.dumps(self.data, indent=2, sort_keys=True) + "\n")

    def finish(self, status: str, error: str | None = None) -> None:
        self.data["status"] = status
        self.data["finished"] = time.strftime("%Y-%m-%dT%H:%M:%S%z")
        if error:
            self.data["error"] = error
        self.write()


# -- run ------------------------------------------------------------------------
def cmd_run(args) -> int:
    cfg = load_config(args)
    name = Path(args.config).stem if args.config else "desk_sab"
    root = output_root(args)
    run_dir = fresh_dir(Path(args.run_dir) if args.run_dir else root / f"{name}-seed{cfg.seed}", args.overwrite)
    (run_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    manifest = Manifest(run_dir, "run", cfg.config_hash())
    csv_fh = open(run_dir / "rounds.csv", "w", newline="")
    writer = csv.writer(csv_fh, lineterminator="\n")
    writer.writerow(ROUND_COLUMNS)

    def on_report(rep):
        writer.writerow(rep.csv_row())
        csv_fh.flush()
        log.info("round %d %s BA=%.4f ASR=%s", rep.round, rep.phase, rep.ba, rep.asr)

    snapshots = run_dir / "snapshots" if cfg.snapshot_every else None
    if snapshots:
        snapshots.mkdir()
    try:
        cache = root / ".stego-cache"
        reports, exp = run_experiment(cfg, args.threads, cache, on_report=on_report, snapshot_dir=snapshots)
        save_params(exp.final_model.params, run_dir / "model_final.fsab")
        if exp.stego is not None:
            exp.stego.save(run_dir / "stego_nets.fsab")
            write_trace_csv(exp.stego, run_dir / "stego_trace.csv")
    except BaseException as exc:
        csv_fh.close()
        manifest.finish("failed", f"{type(exc).__name__}: {exc}")
        raise
    csv_fh.close()
    manifest.finish("completed")
    print(run_dir)
    return 0


def _run_context(run_dir: Path, model_path=None):
    """Config, experiment state, and classifier of a finished run."""
    cfg_path = run_dir / "config.json"
    if not cfg_path.is_file():
        raise InputError(f"{run_dir} has no config.json; is it a run directory?")
    cfg = ExperimentConfig.from_json(cfg_path)
    model_path = Path(model_path) if model_path else run_dir / "model_final.fsab"
    if not model_path.is_file():
        raise InputError(f"model file {model_path} not found")
    params = load_params(model_path)
    stego = None
    nets_path = run_dir / "stego_nets.fsab"
    if cfg.attack is not None and cfg.attack.kind == "sab" and nets_path.is_file():
        stego = StegoNets.load(nets_path, cfg.dataset.shape, cfg.stego.nbits, cfg.stego.width)
    exp = Experiment(cfg, stego_nets=stego)
    return cfg, exp, Classifier(exp.arch, params)


# -- compare ------------------------------------------------------------------
def read_rounds(path: Path) -> list[dict]:
    path = path / "rounds.csv" if path.is_dir() else path
    if not path.is_file():
        raise InputError(f"{path} not found")
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def compare_rows(runs: dict[str, list[dict]], truncate: bool = False) -> tuple[list[str], list[list[str]]]:
    lengths = {k: len(v) for k, v in runs.items()}
    if len(set(lengths.values())) > 1 and not truncate:
        raise AlignmentError(f"round counts differ: {lengths}; pass --truncate to cut to the shortest")
    n = min(lengths.values())
    header = ["round"] + [f"{label}_{col}" for label in runs for col in ("BA", "ASR")]
    rows = []
    for i in range(n):
        row = [next(iter(runs.values()))[i]["round"]]
        for rs in runs.values():
            row += [rs[i]["BA"], rs[i]["ASR"]]
        rows.append(row)
    return header, rows


def cmd_compare(args) -> int:
    if len(args.runs) < 2:
        raise UsageError("compare needs at least two run outputs")
    runs = {}
    for i, r in enumerate(args.runs):
        p = Path(r)
        label = p.name if p.is_dir() else p.parent.name
        runs[label if label not in runs else f"{label}#{i}"] = read_rounds(p)
    header, rows = compare_rows(runs, args.truncate)
    out = Path(args.output) if args.output else output_root(args) / "compare.csv"
    if out.exists() and not args.overwrite:
        raise UsageError(f"{out} already exists; pass --overwrite to replace it")
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    print(out)
    return 0


# -- strip-eval ----------------------------------------------------------------
def write_histogram(path: Path, hist) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin_lo", "bin_hi", "count"])
        for lo, hi, c in hist.rows():
            w.writerow([f"{lo:.6f}", f"{hi:.6f}", c])


def strip_evaluation(clf, exp, count: int, cfg: StripConfig, bins: int):
    """Benign and poisoned STRIP histograms plus their intersection.

    The perturbation images are the test images after the cohorts.
    """
    test = exp.test
    if exp.poison_test is None:
        raise ConfigError("strip-eval needs a run configured with an attack")
    benign = test.images[:count]
    keep = np.flatnonzero(test.labels[:count] != exp.config.attack.target_class)
    poisoned = exp.poison_test.images[: len(keep)] if len(keep) else exp.poison_test.images[:count]
    perturb = test.images[count:]
    hb = strip_histogram(strip_scores(clf, benign, perturb, cfg), test.num_classes, bins, cfg.base)
    hp = strip_histogram(strip_scores(clf, poisoned, perturb, cfg), test.num_classes, bins, cfg.base)
    return hb, hp, histogram_intersection(hb, hp)


def cmd_strip_eval(args) -> int:
    run_dir = Path(args.run)
    cfg, exp, clf = _run_context(run_dir, args.model)
    out = fresh_dir(output_root(args) / f"{run_dir.name}-strip", args.overwrite)
    scfg = dataclasses.replace(cfg.defenses.strip_config, n=args.n) if args.n else cfg.defenses.strip_config
    hb, hp, inter = strip_evaluation(clf, exp, args.count, scfg, args.bins)
    write_histogram(out / "strip_benign.csv", hb)
    write_histogram(out / "strip_poisoned.csv", hp)
    (out / "strip_summary.json").write_text(
        json.dumps({"attack": cfg.attack.kind, "intersection": inter, "bins": args.bins, "n": scfg.n}, indent=2) + "\n"
    )
    print(f"{cfg.attack.kind} intersection {inter:.4f}")
    return 0


# -- gradcam-dump ----------------------------------------------------------
def badnets_region(shape) -> tuple[slice, slice]:
    c, h, w = shape
    s = BADNETS_GRAY if c == 1 else BADNETS_RGB
    return slice(h - s, h), slice(w - s, w)


def cmd_gradcam_dump(args) -> int:
    run_dir = Path(args.run)
    cfg, exp, clf = _run_context(run_dir, args.model)
    out = fresh_dir(output_root(args) / f"{run_dir.name}-gradcam", args.overwrite)
    if args.benign or exp.poison_test is None:
        images = exp.test.images[: args.count]
    else:
        images = exp.poison_test.images[: args.count]
    cls = args.target if args.target is not None else (cfg.attack.target_class if cfg.attack else 0)
    rows, cols = badnets_region(exp.train.shape)
    with open(out / "mass_fraction.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["image_id", "class", "patch_mass_fraction", "raw_min", "raw_max"])
        for i, hm in enumerate(gradcam_batch(clf, images, cls)):
            write_pnm(out / f"heatmap_{i:04d}.pgm", hm.values[None])
            (out / f"heatmap_{i:04d}.txt").write_text(f"min {hm.raw_min:.9g}\nmax {hm.raw_max:.9g}\n")
            w.writerow([i, cls, f"{patch_mass_fraction(hm.values, rows, cols):.6f}", f"{hm.raw_min:.9g}", f"{hm.raw_max:.9g}"])
    print(out)
    return 0


# -- phash-eval ------------------------------------------------------------
def _read_image_dir(path: Path) -> np.ndarray:
    files = sorted(p for p in path.iterdir() if p.suffix in (".pgm", ".ppm", ".pnm"))
    if not files:
        raise InputError(f"no PGM/PPM images in {path}")
    return np.stack([read_pnm(f) for f in files])


def generated_cohorts(cfg: ExperimentConfig, count: int, cache: Path) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Originals plus SAB, BadNets and DBA-ALL triggered copies."""
    from fedsab.experiment import trigger_for
    from fedsab.attacks import AttackConfig

    train, test = load_datasets(cfg.dataset)
    originals = test.images[:count]
    nets = prepare_stego(cfg, train, cache)
    target = cfg.attack.target_class if cfg.attack else 0
    cohorts = {}
    for kind in ("sab", "badnets", "dba"):
        fn = trigger_for(AttackConfig(kind=kind, target_class=target), nets, cfg.stego.nbits, cfg.stego.seed)
        cohorts[kind] = fn(originals)
    return originals, cohorts


def cmd_phash_eval(args) -> int:
    root = output_root(args)
    if args.original:
        originals = _read_image_dir(Path(args.original))
        cohorts = {Path(p).name: _read_image_dir(Path(p)) for p in args.poisoned}
        if not cohorts:
            raise UsageError("give at least one --poisoned directory")
    else:
        cfg = load_config(args)
        originals, cohorts = generated_cohorts(cfg, args.count, root / ".stego-cache")
    out = fresh_dir(root / "phash", args.overwrite)
    summary = []
    for name, imgs in cohorts.items():
        if len(imgs) != len(originals):
            raise InputError(f"cohort '{name}' has {len(imgs)} images but there are {len(originals)} originals")
        dist = write_phash_audit(out / f"phash_{name}.csv", originals, imgs)
        summary.append([name, len(dist), f"{dist.mean():.4f}", f"{np.median(dist):.1f}"])
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cohort", "count", "mean_distance", "median_distance"])
        w.writerows(summary)
    for row in summary:
        print(f"{row[0]}: mean {row[2]} median {row[3]}")
    return 0


# -- wiring ------------------------------------------------------------------
def _global_flags() -> argparse.ArgumentParser:
    """Flags accepted before or after the subcommand.

    SUPPRESS keeps a subparser from resetting a value given before it; a fresh
    parent per parser because argparse shares parent actions by reference.
    """
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", help=f"output root (default $FEDSAB_OUT or ./{DEFAULT_ROOT})")
    common.add_argument("--threads", type=int, help="worker threads for client training")
    common.add_argument("--desk", action="store_true", help="use the bundled desk_sab.json config")
    common.add_argument("--overwrite", action="store_true", help="replace existing output")
    common.add_argument("-v", "--verbose", action="store_true")
    return common


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedsab", description="Federated backdoor simulator", parents=[_global_flags()])
    p.set_defaults(seed=None, out=None, threads=1, desk=False, overwrite=False, verbose=False)
    p.add_argument("--version", action="version", version=f"fedsab {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", parents=[_global_flags()], help="train stego nets (SAB) and run an experiment")
    r.add_argument("config", nargs="?", help="config path or bundled name")
    r.add_argument("--run-dir", default=None, help="exact output directory (default <out>/<name>-seed<seed>)")
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("compare", parents=[_global_flags()], help="join BA/ASR curves of several runs")
    c.add_argument("runs", nargs="+")
    c.add_argument("--truncate", action="store_true", help="cut to the shortest run instead of failing")
    c.add_argument("--output", default=None)
    c.set_defaults(func=cmd_compare)

    s = sub.add_parser("strip-eval", parents=[_global_flags()], help="STRIP entropy histograms of a run's model")
    s.add_argument("run")
    s.add_argument("--model", default=None)
    s.add_argument("--count", type=int, default=200)
    s.add_argument("--bins", type=int, default=20)
    s.add_argument("--n", type=int, default=None, help="perturbations per input")
    s.set_defaults(func=cmd_strip_eval)

    g = sub.add_parser("gradcam-dump", parents=[_global_flags()], help="Grad-CAM heatmaps as PGM")
    g.add_argument("run")
    g.add_argument("--model", default=None)
    g.add_argument("--count", type=int, default=50)
    g.add_argument("--target", type=int, default=None, help="class to explain (default attack target)")
    g.add_argument("--benign", action="store_true", help="explain clean test images")
    g.set_defaults(func=cmd_gradcam_dump)

    h = sub.add_parser("phash-eval", parents=[_global_flags()], help="pHash distances of poisoned vs original images")
    h.add_argument("config", nargs="?", help="config used to generate cohorts")
    h.add_argument("--original", default=None, help="directory of original PGM/PPM images")
    h.add_argument("--poisoned", action="append", default=[], help="directory of poisoned images (repeatable)")
    h.add_argument("--count", type=int, default=200)
    h.set_defaults(func=cmd_phash_eval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except FedSabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        for cls, code in EXIT_CODES.items():
            if isinstance(exc, cls):
                return code
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
