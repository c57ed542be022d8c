import gzip
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedsab.data import (
    CIFAR_RECORD,
    Dataset,
    dirichlet_partition,
    largest_remainder,
    load_cifar_binary,
    load_idx,
    read_pnm,
    synth_dataset,
    write_idx,
    write_pnm,
)
from fedsab.errors import FormatError, InputError
from fedsab.rng import derive_rng

from oracles import dirichlet_by_gamma


def test_idx_roundtrip(tmp_path):
    ds = synth_dataset(0, 30)
    write_idx(ds, tmp_path / "img", tmp_path / "lab")
    back = load_idx(tmp_path / "img", tmp_path / "lab")
    np.testing.assert_allclose(back.images, ds.images, atol=1 / 255)
    np.testing.assert_array_equal(back.labels, ds.labels)


def test_idx_gzip_is_transparent(tmp_path):
    ds = synth_dataset(1, 12)
    write_idx(ds, tmp_path / "img", tmp_path / "lab")
    for name in ("img", "lab"):
        (tmp_path / f"{name}.gz").write_bytes(gzip.compress((tmp_path / name).read_bytes()))
    back = load_idx(tmp_path / "img.gz", tmp_path / "lab.gz")
    assert len(back) == 12


def test_idx_bad_magic_names_the_field(tmp_path):
    (tmp_path / "img").write_bytes(struct.pack(">IIII", 0x999, 1, 2, 2) + b"\0" * 4)
    (tmp_path / "lab").write_bytes(struct.pack(">II", 0x801, 1) + b"\0")
    with pytest.raises(FormatError, match="images magic"):
        load_idx(tmp_path / "img", tmp_path / "lab")


def test_idx_count_mismatch(tmp_path):
    (tmp_path / "img").write_bytes(struct.pack(">IIII", 0x803, 2, 2, 2) + b"\0" * 8)
    (tmp_path / "lab").write_bytes(struct.pack(">II", 0x801, 1) + b"\0")
    with pytest.raises(FormatError, match="count"):
        load_idx(tmp_path / "img", tmp_path / "lab")


def test_cifar_binary(tmp_path):
    rng = np.random.default_rng(0)
    rec = rng.integers(0, 256, size=(3, CIFAR_RECORD), dtype=np.uint8)
    rec[:, 0] = [0, 5, 9]
    (tmp_path / "b.bin").write_bytes(rec.tobytes())
    ds = load_cifar_binary([tmp_path / "b.bin"])
    assert ds.shape == (3, 32, 32)
    np.testing.assert_array_equal(ds.labels, [0, 5, 9])
    assert ds.images[1, 2, 0, 0] == pytest.approx(rec[1, 1 + 2 * 1024] / 255)
    (tmp_path / "bad.bin").write_bytes(rec.tobytes()[:-1])
    with pytest.raises(FormatError):
        load_cifar_binary([tmp_path / "bad.bin"])


def test_dataset_validation():
    with pytest.raises(InputError):
        Dataset(np.zeros((2, 1, 4, 4), np.float32), np.array([0, 3]), 3)
    with pytest.raises(InputError):
        Dataset(np.zeros((2, 4, 4), np.float32), np.array([0, 1]), 3)


def test_first_per_class():
    ds = synth_dataset(0, 200)
    sub = ds.first_per_class(3)
    assert len(sub) == 30
    assert np.bincount(sub.labels).tolist() == [3] * 10


def test_synthetic_is_deterministic_and_in_range():
    a, b = synth_dataset(5, 50, jitter=2), synth_dataset(5, 50, jitter=2)
    assert np.array_equal(a.images, b.images)
    assert a.images.min() >= 0 and a.images.max() <= 1
    assert set(a.labels.tolist()) == set(range(10))


def test_pnm_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    for c in (1, 3):
        img = (rng.integers(0, 256, size=(c, 5, 7)) / 255).astype(np.float32)
        write_pnm(tmp_path / "x.pnm", img)
        np.testing.assert_allclose(read_pnm(tmp_path / "x.pnm"), img, atol=1e-7)


def test_pnm_body_may_contain_whitespace_bytes(tmp_path):
    img = np.full((1, 3, 3), 10 / 255, np.float32)  # byte 0x0a is a newline
    write_pnm(tmp_path / "nl.pgm", img)
    np.testing.assert_allclose(read_pnm(tmp_path / "nl.pgm"), img, atol=1e-7)


@given(st.lists(st.floats(0.01, 1.0), min_size=1, max_size=10), st.integers(0, 500))
def test_largest_remainder_sums_to_total(weights, total):
    p = np.array(weights) / sum(weights)
    counts = largest_remainder(p, total)
    assert counts.sum() == total
    assert np.all(np.abs(counts - p * total) < 1 + 1e-9)


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 12), st.floats(0.05, 50.0), st.integers(0, 2**32))
def test_partition_is_a_partition(k, alpha, seed):
    ds = synth_dataset(0, 120)
    plan = dirichlet_partition(ds, k, alpha, seed)
    flat = sorted(i for a in plan.assignments for i in a)
    assert flat == list(range(len(ds)))
    assert sum(plan.sizes) == len(ds)


def test_partition_is_deterministic():
    ds = synth_dataset(0, 300)
    assert dirichlet_partition(ds, 7, 0.5, 3).assignments == dirichlet_partition(ds, 7, 0.5, 3).assignments
    assert dirichlet_partition(ds, 7, 0.5, 3).assignments != dirichlet_partition(ds, 7, 0.5, 4).assignments


def test_partition_single_client_gets_everything():
    ds = synth_dataset(0, 40)
    assert dirichlet_partition(ds, 1, 1.0, 0).assignments == [list(range(40))]


def test_partition_proportions_match_gamma_oracle():
    """Per-class client shares follow Dirichlet(alpha): mean 1/k and the
    variance agrees with an independent Gamma-normalisation sampler."""
    k, alpha = 5, 0.5
    ds = synth_dataset(0, 10_000, num_classes=2)
    shares = []
    for seed in range(40):
        plan = dirichlet_partition(ds, k, alpha, seed)
        for c in range(2):
            n_c = int((ds.labels == c).sum())
            shares.append([np.sum(ds.labels[a] == c) / n_c for a in plan.assignments])
    shares = np.array(shares)
    ref = dirichlet_by_gamma(derive_rng(0, "oracle"), alpha, k, 20_000)
    np.testing.assert_allclose(shares.mean(axis=0), 1 / k, atol=0.06)
    assert shares.var() == pytest.approx(ref.var(), rel=0.35)


def test_partition_warns_on_empty_clients(caplog):
    ds = synth_dataset(0, 12)
    dirichlet_partition(ds, 30, 0.05, 0)
    assert "without samples" in caplog.text


def test_partition_rejects_bad_alpha():
    with pytest.raises(InputError):
        dirichlet_partition(synth_dataset(0, 20), 3, 0.0, 0)
