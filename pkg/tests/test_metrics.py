import numpy as np
import pytest
import scipy.fft
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fedsab.data import synth_dataset
from fedsab.errors import InputError
from fedsab.metrics import (
    MetricsRecord,
    asr,
    ba,
    phash64,
    phash_distance,
    phash_distances,
    resize_bilinear,
    tal,
    write_phash_audit,
)

from oracles import CONSTANT_IMAGE_PHASH, bilinear_loop, dct2_loop, phash_oracle


def constant_logits(cls: int, k: int = 10):
    def model(x):
        out = np.zeros((len(x), k))
        out[:, cls] = 1.0
        return out

    return model


def test_asr_of_constant_target_model_is_one():
    ds = synth_dataset(0, 20)
    assert asr(constant_logits(3), ds, 3) == 1.0
    assert asr(constant_logits(4), ds, 3) == 0.0


def test_ba_of_constant_model_is_class_share():
    ds = synth_dataset(0, 40)
    assert ba(constant_logits(2), ds) == pytest.approx(np.mean(ds.labels == 2))


def test_metrics_reject_empty_sets():
    ds = synth_dataset(0, 10)
    with pytest.raises(InputError):
        asr(constant_logits(0), ds.images[:0], 0)
    with pytest.raises(InputError):
        ba(constant_logits(0), type(ds)(ds.images[:0], ds.labels[:0], 10))


def test_tal():
    assert tal([0.5, 0.9], [0.5, 0.9], 1) == 0.0
    assert tal([0.5, 0.9], [0.5, 0.8], 1) == pytest.approx(0.1)
    with pytest.raises(InputError):
        tal([0.5], [0.5], 3)


def test_metrics_record_range():
    MetricsRecord(0, 0.5, 1.0)
    with pytest.raises(InputError):
        MetricsRecord(0, 1.5, 0.5)


def test_constant_image_hash():
    assert phash64(np.full((1, 28, 28), 0.3)) == CONSTANT_IMAGE_PHASH
    assert phash64(np.full((3, 32, 32), 0.9)) == CONSTANT_IMAGE_PHASH


def test_dct_matches_textbook_sum():
    block = np.random.default_rng(0).uniform(size=(8, 8))
    np.testing.assert_allclose(scipy.fft.dctn(block, type=2, norm="ortho"), dct2_loop(block), atol=1e-12)


def test_resize_matches_loop():
    gray = np.random.default_rng(1).uniform(size=(28, 28))
    np.testing.assert_allclose(resize_bilinear(gray, 32), bilinear_loop(gray, 32), atol=1e-12)


@pytest.mark.parametrize("seed", range(4))
def test_phash_matches_oracle(seed):
    img = synth_dataset(seed, 10).images[seed]
    assert phash64(img) == phash_oracle(img)


def test_hamming_distance():
    assert phash_distance(0, 0) == 0
    b = 0x0123456789ABCDEF
    assert phash_distance(b, ~b & (2**64 - 1)) == 64
    assert phash_distance(0b1011, 0b0001) == 2


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (1, 12, 12), elements=st.floats(0, 1)))
def test_identical_images_have_distance_zero(img):
    assert phash_distances(img[None], img[None].copy()).tolist() == [0]
    assert 0 <= phash64(img) < 2**64


def test_phash_distance_length_check():
    with pytest.raises(InputError):
        phash_distances(np.zeros((2, 1, 8, 8)), np.zeros((3, 1, 8, 8)))


def test_phash_audit_csv(tmp_path):
    x = synth_dataset(0, 10).images[:5]
    y = x.copy()
    y[:, :, :10, :10] = 1.0
    dist = write_phash_audit(tmp_path / "a.csv", x, y)
    lines = (tmp_path / "a.csv").read_text().splitlines()
    assert lines[0] == "image_id,hash_hex,distance_to_original"
    first = lines[1].split(",")
    assert first[0] == "0" and len(first[1]) == 16 and int(first[2]) == dist[0]
    assert int(first[1], 16) == phash64(y[0])
