import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from codequant.errors import DivergenceError, ShapeError
from codequant.quant import (QuantSpec, dequantize, fake_quant, pack_nibbles,
                             quantize_activations, quantize_weights_rtn,
                             round_half_away, rtn_reconstruct, unpack_nibbles)


def test_round_half_away_values():
    v = np.array([0.5, 1.5, 2.5, -0.5, -2.5, 0.4, -0.4, 0.0,
                  0.49999999999999994])
    want = np.array([1.0, 2.0, 3.0, -1.0, -3.0, 0.0, -0.0, 0.0, 0.0])
    assert np.array_equal(round_half_away(v), want)


def test_quantize_hand_row():
    qa = quantize_activations(np.array([[1.0, 2.0, 3.5]]), QuantSpec(4))
    assert qa.scales[0] == 0.5
    assert np.array_equal(qa.codes, np.array([[2, 4, 7]], dtype=np.int8))


def test_quantize_representable_row_is_exact():
    x = np.array([[7.0, -7.0]])
    qa = quantize_activations(x, QuantSpec(4))
    assert qa.scales[0] == 1.0
    assert np.array_equal(qa.codes, np.array([[7, -7]], dtype=np.int8))
    assert np.array_equal(dequantize(qa), x)


def test_quantize_zero_row():
    qa = quantize_activations(np.zeros((1, 5)), QuantSpec(4))
    assert qa.scales[0] == 1.0
    assert np.all(qa.codes == 0)


def test_quantize_rejects_nonfinite():
    with pytest.raises(DivergenceError):
        quantize_activations(np.array([[1.0, np.inf]]), QuantSpec(4))


def test_code_range():
    rng = np.random.default_rng(0)
    for bits in (2, 3, 4, 8):
        spec = QuantSpec(bits)
        qa = quantize_activations(rng.standard_normal((40, 17)), spec)
        assert qa.codes.max() <= spec.qmax
        assert qa.codes.min() >= spec.qmin


@pytest.mark.parametrize("dtype", [np.float64, np.float32])
@pytest.mark.parametrize("bits", [2, 3, 4, 8])
def test_fake_quant_idempotent_bitwise(dtype, bits):
    rng = np.random.default_rng(1)
    spec = QuantSpec(bits)
    for trial in range(10):
        x = (rng.standard_normal((23, 31)) *
             np.exp(rng.uniform(-6, 6))).astype(dtype)
        once = fake_quant(x, spec)
        twice = fake_quant(once, spec)
        assert once.dtype == dtype
        assert np.array_equal(once, twice)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(min_value=-1e6, max_value=1e6, allow_nan=False,
                          width=64),
                min_size=1, max_size=24))
def test_fake_quant_idempotent_property(row):
    x = np.array([row])
    once = fake_quant(x, QuantSpec(4))
    assert np.array_equal(fake_quant(once, QuantSpec(4)), once)


def test_fake_quant_error_bound():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((50, 33)) * 3.0
    spec = QuantSpec(4)
    qa = quantize_activations(x, spec)
    err = np.abs(x - dequantize(qa))
    bound = qa.scales[:, None] * 0.5 * (1 + 1e-9)
    assert np.all(err <= bound)


def test_fake_quant_on_exact_grid_is_identity():
    codes = np.arange(-7, 8, dtype=np.float64)
    x = (0.5 * codes)[None, :]
    assert np.array_equal(fake_quant(x, QuantSpec(4)), x)


def test_rtn_hand_group():
    w = np.array([[0.5], [-0.5], [0.25], [0.0]])
    qw = quantize_weights_rtn(w, QuantSpec(4, group_size=4))
    assert qw.scales[0, 0] == pytest.approx(0.5 / 7, rel=1e-13)
    assert np.array_equal(qw.codes[:, 0], np.array([7, -7, 4, 0], dtype=np.int8))


def test_rtn_zero_group():
    qw = quantize_weights_rtn(np.zeros((4, 2)), QuantSpec(4, group_size=2))
    assert np.all(qw.scales == 1.0)
    assert np.all(qw.codes == 0)


def test_rtn_grid_weights_reconstruct_exactly():
    rng = np.random.default_rng(3)
    codes = rng.integers(-7, 8, size=(16, 6)).astype(np.float64)
    w = 0.25 * codes
    w[0, :] = 0.25 * 7  # pin each group's max so the implied scale is 0.25
    w[8, :] = -0.25 * 7
    got = rtn_reconstruct(w, QuantSpec(4, group_size=8))
    assert np.array_equal(got, w)


def test_rtn_group_must_divide():
    with pytest.raises(ShapeError):
        quantize_weights_rtn(np.zeros((10, 2)), QuantSpec(4, group_size=3))


def test_rtn_per_group_error_bound():
    rng = np.random.default_rng(4)
    w = rng.standard_normal((32, 8))
    spec = QuantSpec(4, group_size=8)
    qw = quantize_weights_rtn(w, spec)
    err = np.abs(w - qw.reconstruct())
    bound = np.repeat(qw.scales, 8, axis=0) * 0.5 * (1 + 1e-9)
    assert np.all(err <= bound)
    assert qw.scales.shape == (4, 8)


def test_quant_spec_validation():
    with pytest.raises(ShapeError):
        QuantSpec(5)
    with pytest.raises(ShapeError):
        QuantSpec(4, group_size=0)


def test_pack_hand_value():
    assert pack_nibbles(np.array([1, 2], dtype=np.uint8)) == b"\x21"


def test_pack_empty():
    assert pack_nibbles(np.array([], dtype=np.uint8)) == b""


def test_pack_odd_length_pads_high_nibble():
    assert pack_nibbles(np.array([15], dtype=np.uint8)) == b"\x0f"


def test_unpack_all_byte_values_roundtrip():
    for value in range(256):
        ids = unpack_nibbles(bytes([value]), 2)
        assert pack_nibbles(ids) == bytes([value])


def test_pack_rejects_out_of_range():
    with pytest.raises(ShapeError):
        pack_nibbles(np.array([16], dtype=np.uint8))


def test_unpack_count_too_large():
    with pytest.raises(ShapeError):
        unpack_nibbles(b"\x00", 3)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(min_value=0, max_value=15), max_size=33))
def test_pack_unpack_roundtrip_property(ids):
    arr = np.array(ids, dtype=np.uint8)
    assert np.array_equal(unpack_nibbles(pack_nibbles(arr), len(ids)), arr)
