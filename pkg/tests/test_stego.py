import itertools

import numpy as np
import pytest

from fedsab.data import synth_dataset
from fedsab.errors import ConfigError, InputError
from fedsab.stego import (
    StegoNets,
    StegoTrainConfig,
    apply_trigger,
    bit_accuracy,
    bits_from_logits,
    critic_scores,
    decode_secret,
    encode_residual,
    joint_loss,
    loss_image,
    loss_perceptual,
    loss_secret,
    sab_trigger_fn,
    secret_from_label,
    train_stego,
    write_trace_csv,
)

from oracles import MIN_SECRET_HAMMING

SHAPE = (1, 12, 12)


@pytest.fixture(scope="module")
def tiny_nets():
    ds = synth_dataset(0, 64, shape=SHAPE)
    return train_stego(ds, StegoTrainConfig(epochs=2, batch=16, width=4, nbits=16, seed=3))


def test_secret_is_deterministic_and_sized():
    a = secret_from_label("3", 32, seed=0)
    assert a.bits.shape == (32,) and set(np.unique(a.bits)) <= {0, 1}
    assert np.array_equal(a.bits, secret_from_label("3", 32, seed=0).bits)
    assert not np.array_equal(a.bits, secret_from_label("3", 32, seed=1).bits)


def test_class_secrets_are_far_apart():
    secrets = [secret_from_label(str(c)).bits for c in range(10)]
    dists = [int(np.sum(a != b)) for a, b in itertools.combinations(secrets, 2)]
    assert min(dists) >= MIN_SECRET_HAMMING


def test_secret_bounds():
    with pytest.raises(InputError):
        secret_from_label("x", 4)


def test_zero_residual_is_identity():
    x = np.random.default_rng(0).uniform(size=(3, *SHAPE)).astype(np.float32)
    out = apply_trigger(x, np.zeros_like(x))
    assert np.array_equal(out, x)


def test_trigger_clamps_to_unit_interval():
    x = np.full((1, 2, 2), 0.9, np.float32)
    r = np.array([[[0.5, -2.0], [0.05, 0.0]]], np.float32)
    out = apply_trigger(x, r)
    assert out[0, 0, 0] == 1.0 and out[0, 0, 1] == 0.0
    assert out[0, 1, 0] == np.float32(0.9) + np.float32(0.05)
    assert out[0, 1, 1] == np.float32(0.9)


def test_trigger_shape_mismatch():
    with pytest.raises(InputError):
        apply_trigger(np.zeros((1, 4, 4)), np.zeros((1, 4, 5)))


def test_loss_terms_vanish_on_identical_images():
    x = np.random.default_rng(1).uniform(size=(2, *SHAPE))
    assert loss_image(x, x) == 0.0
    assert loss_perceptual(x, x) == pytest.approx(0.0, abs=1e-12)
    assert loss_perceptual(x, np.clip(x + 0.2, 0, 1)) > 0


def test_loss_secret_matches_bce():
    logits = np.array([[2.0, -1.0]])
    bits = np.array([[1, 0]])
    expect = np.mean([np.log1p(np.exp(-2.0)), np.log1p(np.exp(-1.0))])
    assert loss_secret(logits, bits) == pytest.approx(expect)


def test_joint_loss_is_weighted_sum():
    assert joint_loss([1.0, 2.0, 3.0, 4.0], [2.0, 1.0, 1.5, 0.5]) == pytest.approx(2 + 2 + 4.5 + 2)


def test_bits_from_logits_threshold():
    np.testing.assert_array_equal(bits_from_logits(np.array([-0.1, 0.0, 0.3])), [0, 0, 1])


def test_encode_residual_shapes(tiny_nets):
    x = synth_dataset(1, 10, shape=SHAPE).images
    s = secret_from_label("0", 16)
    assert encode_residual(tiny_nets, x, s).shape == x.shape
    assert encode_residual(tiny_nets, x[0], s).shape == x[0].shape
    with pytest.raises(ConfigError):
        encode_residual(tiny_nets, np.zeros((1, 1, 8, 8)), s)


def test_per_image_secrets_beyond_one_chunk(tiny_nets):
    # encoding runs in chunks of 256; each image must keep its own secret
    x = np.repeat(synth_dataset(1, 10, shape=SHAPE).images[:1], 300, axis=0)
    bits = np.random.default_rng(0).integers(0, 2, size=(300, 16)).astype(np.float32)
    res = encode_residual(tiny_nets, x, bits)
    for i in (0, 255, 256, 299):
        np.testing.assert_allclose(res[i], encode_residual(tiny_nets, x[i], bits[i]), atol=1e-6)


def test_sab_trigger_stays_in_range(tiny_nets):
    x = synth_dataset(2, 10, shape=SHAPE).images[:8]
    out = sab_trigger_fn(tiny_nets, secret_from_label("1", 16))(x)
    assert out.shape == x.shape and out.min() >= 0 and out.max() <= 1
    assert decode_secret(tiny_nets, out).shape == (8, 16)
    assert critic_scores(tiny_nets, out).shape[0] == 8


def test_training_records_trace(tiny_nets, tmp_path):
    assert [row["epoch"] for row in tiny_nets.trace] == [0, 1]
    write_trace_csv(tiny_nets, tmp_path / "trace.csv")
    lines = (tmp_path / "trace.csv").read_text().splitlines()
    assert lines[0] == "epoch,loss_image,loss_perceptual,loss_secret,loss_critic,joint"
    assert len(lines) == 3


def test_training_is_deterministic(tiny_nets):
    ds = synth_dataset(0, 64, shape=SHAPE)
    again = train_stego(ds, StegoTrainConfig(epochs=2, batch=16, width=4, nbits=16, seed=3))
    assert again.encoder.allclose(tiny_nets.encoder)


def test_critic_weights_are_clipped(tiny_nets):
    assert max(np.abs(t.data).max() for t in tiny_nets.critic.values()) <= 0.01 + 1e-7


def test_save_load_roundtrip(tiny_nets, tmp_path):
    tiny_nets.save(tmp_path / "n.fsab")
    back = StegoNets.load(tmp_path / "n.fsab", SHAPE, nbits=16, width=4)
    x = synth_dataset(3, 10, shape=SHAPE).images[:4]
    s = secret_from_label("2", 16)
    np.testing.assert_array_equal(encode_residual(back, x, s), encode_residual(tiny_nets, x, s))
    with pytest.raises(ConfigError):
        StegoNets.load(tmp_path / "n.fsab", SHAPE, nbits=16, width=8)


def test_bit_accuracy_in_unit_interval(tiny_nets):
    acc = bit_accuracy(tiny_nets, synth_dataset(4, 16, shape=SHAPE).images)
    assert 0.0 <= acc <= 1.0


def test_config_validation():
    with pytest.raises(ConfigError):
        StegoTrainConfig(w1=-1)
    with pytest.raises(InputError):
        train_stego(np.zeros((0, *SHAPE), np.float32), StegoTrainConfig(epochs=1))
