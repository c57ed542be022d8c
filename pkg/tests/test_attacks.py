import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import stats

from fedsab.attacks import (
    AttackConfig,
    adversary_local_train,
    bottom95_mask,
    dba_round_assignment,
    poisoned_gradient,
    sparse_update_mask,
)
from fedsab.data import synth_dataset
from fedsab.engine import ParamSet, Tensor
from fedsab.errors import ConfigError, InputError
from fedsab.fl import ClientState
from fedsab.models import small_cnn
from fedsab.rng import derive_rng

from oracles import top_k_by_sort


def one(values) -> ParamSet:
    return ParamSet({"w": Tensor(np.asarray(values, dtype=np.float32))})


def test_bottom95_zeroes_single_largest_of_twenty():
    masked, report = bottom95_mask(one([1.0] + [0.05] * 19), 0.05)
    expect = np.array([0.0] + [0.05] * 19, np.float32)
    np.testing.assert_array_equal(masked["w"].data, expect)
    assert report.top == {"w": 1}


def test_bottom95_zero_fraction_is_identity():
    g = one(np.arange(10.0))
    masked, report = bottom95_mask(g, 0.0)
    np.testing.assert_array_equal(masked["w"].data, g["w"].data)
    assert report.zeroed_top == 0


def test_bottom95_ties_prefer_lower_index():
    masked, _ = bottom95_mask(one([2.0, -2.0, 2.0, 1.0]), 0.25)
    np.testing.assert_array_equal(masked["w"].data, [0.0, -2.0, 2.0, 1.0])


@pytest.mark.parametrize("seed", range(5))
def test_bottom95_matches_sort_oracle_on_1000(seed):
    g = np.random.default_rng(seed).standard_normal(1000).astype(np.float32)
    masked, report = bottom95_mask(one(g), 0.05)
    out = masked["w"].data
    np.testing.assert_array_equal(out, top_k_by_sort(g, 0.05).astype(np.float32))
    zeroed = out == 0
    assert zeroed.sum() == 50 and report.top["w"] == 50
    assert np.abs(out).max() <= np.abs(g[zeroed]).min()


@settings(max_examples=50, deadline=None)
@given(arrays(np.float32, st.integers(1, 300), elements=st.floats(-10, 10, width=32)), st.floats(0.0, 0.99))
def test_bottom95_argmax_set_property(g, frac):
    masked, report = bottom95_mask(one(g), frac)
    out = masked["w"].data
    k = report.top["w"]
    assert k == math.ceil(round(frac * g.size, 9))
    np.testing.assert_array_equal(out, top_k_by_sort(g, frac).astype(np.float32))


def test_bottom95_is_per_tensor():
    g = ParamSet({"a": Tensor(np.array([100.0, 1.0, 1.0, 1.0], np.float32)), "b": Tensor(np.array([0.5, 0.1], np.float32))})
    masked, report = bottom95_mask(g, 0.05)
    assert masked["a"].data[0] == 0 and masked["b"].data[0] == 0
    assert report.top == {"a": 1, "b": 1}


def test_bottom95_global_flat_mode():
    g = ParamSet({"a": Tensor(np.array([100.0, 1.0], np.float32)), "b": Tensor(np.array([0.5, 0.1], np.float32))})
    masked, report = bottom95_mask(g, 0.25, global_flat=True)
    np.testing.assert_array_equal(masked["a"].data, [0.0, 1.0])
    np.testing.assert_array_equal(masked["b"].data, np.array([0.5, 0.1], np.float32))
    assert report.zeroed_top == 1


def test_sparse_mask_counts():
    masked, report = sparse_update_mask(one(np.ones(10)), 0.2, seed=3)
    assert int((masked["w"].data == 0).sum()) == 2
    assert report.sparse["w"] == 2
    same, _ = sparse_update_mask(one(np.ones(10)), 0.0, seed=3)
    assert np.all(same["w"].data == 1)


def test_sparse_mask_seeding():
    ones = one(np.ones(500))
    a, _ = sparse_update_mask(ones, 0.2, seed=1)
    b, _ = sparse_update_mask(ones, 0.2, seed=1)
    c, _ = sparse_update_mask(ones, 0.2, seed=2)
    np.testing.assert_array_equal(a["w"].data, b["w"].data)
    assert np.any(a["w"].data != c["w"].data)


def test_sparse_mask_positions_are_uniform():
    # each of 10 positions is dropped with probability 0.2; count over trials
    trials = 10_000
    hits = np.zeros(10)
    ones = one(np.ones(10))
    for s in range(trials):
        masked, _ = sparse_update_mask(ones, 0.2, seed=s)
        hits += masked["w"].data == 0
    assert hits.sum() == 2 * trials
    assert stats.chisquare(hits).pvalue > 0.01


@settings(max_examples=30, deadline=None)
@given(st.integers(10, 400), st.floats(0.0, 0.5), st.floats(0.0, 0.5), st.integers(0, 10_000))
def test_composition_never_zeroes_fewer(n, top, drop, seed):
    g = one(derive_rng(seed, "g").standard_normal(n) + 3.0)  # no exact zeros
    sparse_only, _ = sparse_update_mask(g, drop, seed)
    both, _ = sparse_update_mask(bottom95_mask(g, top)[0], drop, seed)
    assert (both["w"].data == 0).sum() >= (sparse_only["w"].data == 0).sum()


def test_mask_fraction_validation():
    with pytest.raises(InputError):
        bottom95_mask(one([1.0]), 1.0)
    with pytest.raises(InputError):
        sparse_update_mask(one([1.0]), -0.1)


def test_poisoned_gradient_duplicate_batch():
    arch = small_cnn((1, 8, 8), 3)
    p = arch.init(derive_rng(0, "p"))
    x = np.random.default_rng(1).uniform(size=(1, 1, 8, 8)).astype(np.float32)
    g1 = poisoned_gradient(arch, p, x, np.array([1]))
    g4 = poisoned_gradient(arch, p, np.repeat(x, 4, 0), np.array([1] * 4))
    np.testing.assert_allclose(g1.flat(), g4.flat(), atol=1e-6)
    with pytest.raises(InputError):
        poisoned_gradient(arch, p, x[:0], np.array([], int))


def test_dba_round_assignment():
    assert sorted(dba_round_assignment([10, 11, 12, 13], 5).values()) == [0, 1, 2, 3]
    assert [dba_round_assignment([7], r)[7] for r in range(6)] == [0, 1, 2, 3, 0, 1]
    with pytest.raises(InputError):
        dba_round_assignment([], 0)


def test_attack_config_validation():
    with pytest.raises(ConfigError):
        AttackConfig(kind="trojan")
    with pytest.raises(ConfigError):
        AttackConfig(top_fraction=1.0)
    with pytest.raises(ConfigError):
        AttackConfig(poison_fraction=0.0)
    a = AttackConfig(start=3, duration=2)
    assert [a.active(r) for r in range(6)] == [False, False, False, True, True, False]
    assert AttackConfig("sab").use_bottom95 and not AttackConfig("badnets").use_sparse


@pytest.fixture(scope="module")
def adversary_setup():
    ds = synth_dataset(0, 40, shape=(1, 8, 8))
    arch = small_cnn((1, 8, 8), 10)
    params = arch.init(derive_rng(0, "init"))
    client = ClientState(3, tuple(range(40)), True)
    return ds, arch, params, client


def test_sab_upload_has_sparse_zeros(adversary_setup):
    ds, arch, params, client = adversary_setup
    attack = AttackConfig("sab", start=0, duration=5, lr=0.1)
    up = adversary_local_train(arch, params, client, attack, 0, ds.images, ds.labels, 0, 1, 8)
    assert up.is_adversary and up.masks_applied == {"bottom95": True, "sparse": True}
    for name, t in up.delta.items():
        assert int((t.data == 0).sum()) >= math.floor(0.2 * t.size)
        assert up.mask_report.sparse[name] == math.floor(0.2 * t.size)
    assert params.conformant(up.delta)


def test_zero_poison_lr_gives_zero_delta(adversary_setup):
    ds, arch, params, client = adversary_setup
    attack = AttackConfig("sab", start=0, duration=5, lr=0.0)
    up = adversary_local_train(arch, params, client, attack, 0, ds.images, ds.labels, 0, 1, 8)
    assert np.all(up.delta.flat() == 0)


def test_baseline_flags_and_determinism(adversary_setup):
    ds, arch, params, client = adversary_setup
    attack = AttackConfig("badnets", start=0, duration=5, lr=0.05)
    a = adversary_local_train(arch, params, client, attack, 1, ds.images, ds.labels, 9, 1, 8)
    b = adversary_local_train(arch, params, client, attack, 1, ds.images, ds.labels, 9, 1, 8)
    assert a.masks_applied == {"bottom95": False, "sparse": False}
    assert a.delta.allclose(b.delta)
    assert a.mask_report.zeroed_top == 0


def test_mask_at_upload_masks_delta_once(adversary_setup):
    ds, arch, params, client = adversary_setup
    attack = AttackConfig("sab", start=0, duration=5, lr=0.1, sparse=False, mask_at_upload=True)
    up = adversary_local_train(arch, params, client, attack, 0, ds.images, ds.labels, 0, 1, 8)
    for name, t in up.delta.items():
        assert up.mask_report.top[name] == math.ceil(round(0.05 * t.size, 9))
