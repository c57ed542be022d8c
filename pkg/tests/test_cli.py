"""End-to-end checks of the command-line interface on a tiny configuration."""

import csv
import json

import numpy as np
import pytest

from fedsab.cli import compare_rows, main
from fedsab.config import ExperimentConfig, bundled_config
from fedsab.data import write_pnm
from fedsab.errors import AlignmentError
from fedsab.experiment import ROUND_COLUMNS


def tiny_config(**attack) -> dict:
    cfg = json.loads(bundled_config("desk_sab.json").read_text())
    cfg["dataset"].update(shape=[1, 12, 12], n_train=120, n_test=240, jitter=1)
    cfg.update(pool_size=4, clients_per_round=2, rounds=5)
    cfg["attack"].update({"start": 1, "duration": 2, "num_adversaries": 1, **attack})
    cfg["benign"].update(epochs=1)
    cfg["stego"].update(epochs=1, width=4, nbits=16)
    return cfg


@pytest.fixture()
def workspace(tmp_path, monkeypatch):
    monkeypatch.delenv("FEDSAB_OUT", raising=False)
    monkeypatch.chdir(tmp_path)

    def write(name, cfg):
        path = tmp_path / f"{name}.json"
        path.write_text(json.dumps(cfg))
        return str(path)

    return tmp_path, write


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_run_writes_artifacts_and_is_deterministic(workspace):
    tmp, write = workspace
    cfg = write("sab", tiny_config())
    assert main(["run", cfg, "--out", str(tmp / "a")]) == 0
    assert main(["run", cfg, "--out", str(tmp / "b")]) == 0
    run_a, run_b = tmp / "a" / "sab-seed0", tmp / "b" / "sab-seed0"
    assert (run_a / "rounds.csv").read_bytes() == (run_b / "rounds.csv").read_bytes()
    rows = read_csv(run_a / "rounds.csv")
    assert rows[0] == ROUND_COLUMNS
    assert [r[1] for r in rows[1:]] == ["clean", "attack", "attack", "post", "post"]
    manifest = json.loads((run_a / "manifest.json").read_text())
    assert manifest["status"] == "completed"
    assert {"rounds.csv", "model_final.fsab", "stego_nets.fsab", "stego_trace.csv", "config.json"} <= set(manifest["artifacts"])
    assert (run_a / "model_final.fsab").read_bytes()[:8] == b"FSAB0001"
    assert ExperimentConfig.from_json(run_a / "config.json").config_hash() == manifest["config_hash"]


def test_thread_count_does_not_change_results(workspace):
    tmp, write = workspace
    cfg = write("sab", tiny_config())
    assert main(["run", cfg, "--out", str(tmp / "one")]) == 0
    assert main(["run", cfg, "--out", str(tmp / "two"), "--threads", "2"]) == 0
    one = (tmp / "one" / "sab-seed0" / "rounds.csv").read_bytes()
    assert one == (tmp / "two" / "sab-seed0" / "rounds.csv").read_bytes()


def test_zero_duration_attack_equals_clean_run(workspace):
    tmp, write = workspace
    attacked = tiny_config(duration=0)
    clean = tiny_config()
    clean["attack"] = None
    main(["run", write("zero", attacked), "--out", str(tmp)])
    main(["run", write("clean", clean), "--out", str(tmp)])
    zero = read_csv(tmp / "zero-seed0" / "rounds.csv")[1:]
    ref = read_csv(tmp / "clean-seed0" / "rounds.csv")[1:]
    assert all(r[1] == "clean" for r in zero)
    assert [r[2] for r in zero] == [r[2] for r in ref]


def test_overwrite_protection_and_seed_flag(workspace, capsys):
    tmp, write = workspace
    cfg = write("sab", tiny_config(kind="badnets"))
    assert main(["--seed", "3", "run", cfg]) == 0
    assert (tmp / "runs" / "sab-seed3" / "rounds.csv").is_file()
    assert main(["run", cfg, "--seed", "3"]) == 5
    assert "--overwrite" in capsys.readouterr().err
    assert main(["run", cfg, "--seed", "3", "--overwrite"]) == 0


def test_env_var_sets_output_root(workspace, monkeypatch):
    tmp, write = workspace
    monkeypatch.setenv("FEDSAB_OUT", str(tmp / "env"))
    cfg = write("b", tiny_config(kind="badnets"))
    assert main(["run", cfg]) == 0
    assert (tmp / "env" / "b-seed0" / "rounds.csv").is_file()


def test_config_error_exit_code(workspace):
    tmp, write = workspace
    bad = tiny_config()
    bad["attack"]["lrr"] = 1
    assert main(["run", write("bad", bad)]) == 2
    late = tiny_config(start=4, duration=3)
    assert main(["run", write("late", late)]) == 2


def test_compare_alignment(workspace):
    tmp, write = workspace
    short = tiny_config(kind="badnets")
    short["rounds"] = 3
    main(["run", write("long", tiny_config(kind="badnets")), "--out", str(tmp)])
    main(["run", write("short", short), "--out", str(tmp)])
    runs = [str(tmp / "long-seed0"), str(tmp / "short-seed0")]
    assert main(["compare", *runs, "--out", str(tmp)]) == 4
    assert main(["compare", *runs, "--out", str(tmp), "--truncate"]) == 0
    rows = read_csv(tmp / "compare.csv")
    assert rows[0] == ["round", "long-seed0_BA", "long-seed0_ASR", "short-seed0_BA", "short-seed0_ASR"]
    assert len(rows) == 4


def test_compare_rows_unit():
    a = [{"round": "0", "BA": "0.5", "ASR": "0.1"}]
    header, rows = compare_rows({"x": a, "y": a})
    assert header == ["round", "x_BA", "x_ASR", "y_BA", "y_ASR"] and rows == [["0", "0.5", "0.1", "0.5", "0.1"]]
    with pytest.raises(AlignmentError):
        compare_rows({"x": a, "y": a * 2})


def test_strip_gradcam_and_phash_commands(workspace):
    tmp, write = workspace
    cfg = write("bn", tiny_config(kind="badnets"))
    main(["run", cfg, "--out", str(tmp)])
    run = str(tmp / "bn-seed0")
    assert main(["strip-eval", run, "--out", str(tmp), "--count", "50", "--n", "20"]) == 0
    hist = read_csv(tmp / "bn-seed0-strip" / "strip_benign.csv")
    assert hist[0] == ["bin_lo", "bin_hi", "count"] and sum(int(r[2]) for r in hist[1:]) == 50
    assert 0 <= json.loads((tmp / "bn-seed0-strip" / "strip_summary.json").read_text())["intersection"] <= 1

    assert main(["gradcam-dump", run, "--out", str(tmp), "--count", "3"]) == 0
    cam = tmp / "bn-seed0-gradcam"
    assert (cam / "heatmap_0002.pgm").read_bytes().startswith(b"P5")
    assert (cam / "heatmap_0000.txt").read_text().startswith("min ")
    assert len(read_csv(cam / "mass_fraction.csv")) == 4

    assert main(["phash-eval", cfg, "--out", str(tmp), "--count", "10"]) == 0
    summary = read_csv(tmp / "phash" / "summary.csv")
    assert [r[0] for r in summary[1:]] == ["sab", "badnets", "dba"]
    audit = read_csv(tmp / "phash" / "phash_sab.csv")
    assert audit[0] == ["image_id", "hash_hex", "distance_to_original"] and len(audit) == 11


def test_phash_eval_on_directories(workspace):
    tmp, _ = workspace
    rng = np.random.default_rng(0)
    (tmp / "orig").mkdir()
    (tmp / "pois").mkdir()
    for i in range(3):
        img = (rng.integers(0, 256, size=(1, 16, 16)) / 255).astype(np.float32)
        write_pnm(tmp / "orig" / f"{i}.pgm", img)
        write_pnm(tmp / "pois" / f"{i}.pgm", img)
    assert main(["phash-eval", "--original", str(tmp / "orig"), "--poisoned", str(tmp / "pois"), "--out", str(tmp)]) == 0
    rows = read_csv(tmp / "phash" / "phash_pois.csv")
    assert all(r[2] == "0" for r in rows[1:])
    assert main(["phash-eval", "--original", str(tmp / "orig"), "--poisoned", str(tmp / "orig"), "--out", str(tmp)]) == 5
    assert main(["phash-eval", "--original", str(tmp / "nowhere"), "--poisoned", str(tmp / "pois"), "--out", str(tmp), "--overwrite"]) == 3
