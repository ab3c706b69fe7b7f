import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from profe.codec import (HEADER_SIZE, MAGIC, Algorithm, ByteLedger, QuantMode, QuantizedTensor, RoundMessage,
                         WirePrototype, build_message, decode_message, dequantize, encode_message, quantize)
from profe.errors import DataError, MagicError, ProtocolError, TruncationError, VersionError
from profe.model import Linear, SplitModel, mlp_split_model
from profe.prototype import Prototype

F16_REL = 2.0 ** -11


# -- quantization --------------------------------------------------------

@pytest.mark.parametrize("mode", list(QuantMode))
def test_all_zero_roundtrip(mode):
    q = quantize(np.zeros((3, 2)), mode)
    assert not q.codes.any()
    np.testing.assert_array_equal(dequantize(q), np.zeros((3, 2)))
    if mode is QuantMode.INT16_AFFINE:
        assert q.scale == 1.0


def test_int16_hand_example():
    q = quantize(np.array([-1.0, 0.0, 1.0]), QuantMode.INT16_AFFINE)
    assert q.scale == np.float32(1 / 32767)
    assert q.codes.tolist() == [-32767, 0, 32767]


def test_int16_half_step_bound_on_uniform_values():
    x = np.random.default_rng(0).uniform(-1, 1, 1000).astype(np.float32)
    q = quantize(x, QuantMode.INT16_AFFINE)
    assert np.abs(x.astype(np.float64) - dequantize(q)).max() <= q.scale / 2


def test_int16_rounds_half_up():
    q = quantize(np.array([2.5, -2.5, 1.5, 4.0]), QuantMode.INT16_AFFINE, scale=1.0)
    assert q.codes.tolist() == [3, -2, 2, 4]


def test_int16_lattice_points_are_exact():
    step = np.float32(0.125)
    x = np.arange(-40, 41, dtype=np.float32) * step
    q = quantize(x, QuantMode.INT16_AFFINE, scale=float(step))
    np.testing.assert_array_equal(dequantize(q), x)


def test_int16_requantization_is_idempotent():
    x = np.random.default_rng(1).normal(size=200)
    q = quantize(x, QuantMode.INT16_AFFINE)
    assert quantize(dequantize(q), QuantMode.INT16_AFFINE, scale=q.scale) == q


def test_float16_exact_for_one():
    assert dequantize(quantize(np.array([1.0]), QuantMode.FLOAT16))[0] == 1.0


def test_float16_matches_independent_binary16_conversion():
    rng = np.random.default_rng(2)
    exps = rng.integers(-14, 16, 20000)
    vals = (rng.uniform(1, 2, 20000) * 2.0 ** exps * rng.choice([-1, 1], 20000)).astype(np.float32)
    vals = vals[np.abs(vals) <= 65504]
    got = dequantize(quantize(vals, QuantMode.FLOAT16))
    oracle = np.array([struct.unpack("<e", struct.pack("<e", float(v)))[0] for v in vals])
    np.testing.assert_array_equal(got, oracle.astype(np.float32))
    rel = np.abs(got.astype(np.float64) - vals) / np.abs(vals)
    assert rel.max() <= F16_REL


def test_float16_rounds_to_nearest_even():
    # 1 + 2^-11 is halfway between 1 and 1 + 2^-10; the even mantissa is 1
    assert dequantize(quantize(np.array([1 + 2 ** -11]), QuantMode.FLOAT16))[0] == 1.0


@pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
@pytest.mark.parametrize("mode", list(QuantMode))
def test_non_finite_rejected(bad, mode):
    with pytest.raises(DataError):
        quantize(np.array([0.0, bad]), mode)


def test_float16_overflow_rejected():
    with pytest.raises(DataError):
        quantize(np.array([1e6]), QuantMode.FLOAT16)


@given(arrays(np.float32, st.integers(1, 50), elements=st.floats(-1e4, 1e4, width=32)))
@settings(max_examples=100)
def test_int16_bound_property(x):
    q = quantize(x, QuantMode.INT16_AFFINE)
    assert np.all(np.abs(x.astype(np.float64) - dequantize(q)) <= q.scale / 2)
    assert np.abs(q.codes.astype(int)).max() <= 32767


@pytest.mark.parametrize("mode", [QuantMode.INT16_AFFINE, QuantMode.FLOAT16])
def test_payload_is_half_of_float32(mode):
    model = mlp_split_model(784, [128], 64, 10, seed=0)
    half = build_message(0, 0, Algorithm.PROFE, model.state(), mode=mode)
    full = build_message(0, 0, Algorithm.PROFE, model.state(), mode=QuantMode.FLOAT32)
    assert 2 * sum(t.payload_bytes for t in half.tensors) == sum(t.payload_bytes for t in full.tensors)


# -- wire format ---------------------------------------------------------

def random_message(rng: np.random.Generator, mode=None) -> RoundMessage:
    mode = mode if mode is not None else QuantMode(int(rng.integers(0, 3)))
    params = [rng.normal(size=tuple(rng.integers(1, 5, rng.integers(1, 3)))) for _ in range(rng.integers(0, 4))]
    protos = [Prototype(int(c), rng.normal(size=4), int(rng.integers(1, 1000)))
              for c in rng.choice(10, rng.integers(0, 4), replace=False)]
    return build_message(int(rng.integers(0, 100)), int(rng.integers(0, 1000)), Algorithm(int(rng.integers(0, 3))),
                         params, protos, mode)


@pytest.mark.parametrize("seed", range(30))
def test_encode_decode_roundtrip(seed):
    m = random_message(np.random.default_rng(seed))
    data = encode_message(m)
    assert len(data) == m.encoded_size
    assert decode_message(data) == m
    assert encode_message(m) == data


def test_ten_parameter_model_length():
    model = SplitModel([Linear(1, 2)], [Linear(2, 2)])
    assert model.num_parameters() == 10
    m = build_message(0, 0, Algorithm.PROFE, model.state(), mode=QuantMode.FLOAT16)
    # header + (mode, ndim, dims) per tensor + 10 codes of 2 bytes
    tensor_headers = (2 + 8) + (2 + 4) + (2 + 8) + (2 + 4)
    assert len(encode_message(m)) == 17 + tensor_headers + 20 == 69
    assert HEADER_SIZE == 17


def test_header_layout_is_little_endian():
    m = build_message(0x0102, 0x03040506, Algorithm.FEDPROTO, [], [Prototype(0x0A0B, np.zeros(1), 5)])
    data = encode_message(m)
    assert data[:4] == MAGIC
    assert data[4:7] == bytes([1, 0, 2])
    assert data[7:9] == b"\x02\x01"
    assert data[9:13] == b"\x06\x05\x04\x03"
    assert data[13:17] == b"\x00\x00\x01\x00"
    assert data[17:19] == b"\x0b\x0a"
    assert struct.unpack_from("<Q", data, 19)[0] == 5


def test_int16_record_carries_scale():
    q = quantize(np.array([[0.5, -1.0]]), QuantMode.INT16_AFFINE)
    data = encode_message(RoundMessage(0, 0, Algorithm.PROFE, (q,)))
    mode, ndim, d0, d1, scale = struct.unpack_from("<BBIIf", data, HEADER_SIZE)
    assert (mode, ndim, d0, d1) == (0, 2, 1, 2)
    assert scale == q.scale
    assert struct.unpack_from("<2h", data, HEADER_SIZE + 14) == (16384, -32767)


def test_truncated_buffers_raise_truncation():
    data = encode_message(random_message(np.random.default_rng(4), QuantMode.INT16_AFFINE))
    for cut in range(len(data)):
        with pytest.raises(TruncationError):
            decode_message(data[:cut])


def test_bad_magic_and_version():
    data = bytearray(encode_message(random_message(np.random.default_rng(5))))
    bad = bytearray(data)
    bad[0] ^= 0xFF
    with pytest.raises(MagicError) as info:
        decode_message(bytes(bad))
    assert info.value.offset == 0
    bad = bytearray(data)
    bad[4] = 9
    with pytest.raises(VersionError) as info:
        decode_message(bytes(bad))
    assert info.value.offset == 4


def test_trailing_bytes_rejected():
    data = encode_message(random_message(np.random.default_rng(6)))
    with pytest.raises(ProtocolError):
        decode_message(data + b"\x00")


def test_oversize_fields_rejected():
    with pytest.raises(ProtocolError):
        encode_message(RoundMessage(70000, 0, Algorithm.PROFE))
    wp = WirePrototype(1 << 16, 1, quantize(np.zeros(2)))
    with pytest.raises(ProtocolError):
        encode_message(RoundMessage(0, 0, Algorithm.PROFE, (), (wp,)))


def test_single_byte_mutation_fuzz():
    rng = np.random.default_rng(7)
    for trial in range(40):
        data = encode_message(random_message(rng))
        for _ in range(50):
            buf = bytearray(data)
            buf[rng.integers(0, len(buf))] = int(rng.integers(0, 256))
            try:
                m = decode_message(bytes(buf))
            except ProtocolError as exc:
                assert 0 <= exc.offset <= len(buf)
            else:
                # whatever decodes must re-encode to the same bytes
                assert encode_message(m) == bytes(buf)


def test_huge_declared_dims_fail_without_allocating():
    header = struct.pack("<4sBBBHIHH", MAGIC, 1, 0, 0, 0, 0, 1, 0)
    record = struct.pack("<BBII", 1, 2, 0xFFFFFFFF, 0xFFFFFFFF)
    with pytest.raises(TruncationError):
        decode_message(header + record)


# -- ledger ----------------------------------------------------------------

def test_ledger_accumulates_per_node():
    ledger = ByteLedger()
    ledger.record_send(0, 10)
    ledger.record_send(0, 5)
    ledger.record_receive(1, 15)
    assert ledger.bytes_sent(0) == 15 and ledger.bytes_received(1) == 15
    assert ledger.bytes_sent(1) == 0
    assert ledger.total_sent == ledger.total_received == 15
