import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from diffgraph import persistence as pio
from diffgraph.errors import ChecksumMismatchError, DimensionMismatchError, IoFailureError


def test_empty_matrix_header():
    blob = pio.encode_matrix(np.zeros((0, 0)))
    header, body = pio.split_header(blob)
    assert header["rows"] == 0 and header["cols"] == 0 and header["dtype"] == "f32le"
    assert body == b""
    assert pio.decode_matrix(blob).shape == (0, 0)


def test_one_is_little_endian():
    _, body = pio.split_header(pio.encode_matrix(np.array([[1.0]])))
    assert body == bytes([0x00, 0x00, 0x80, 0x3F])


def test_round_trip_file(tmp_path, rng):
    m = rng.standard_normal((7, 5)).astype(np.float32)
    pio.write_matrix(tmp_path / "m.bin", m)
    back = pio.read_matrix(tmp_path / "m.bin")
    assert back.dtype == np.float32
    assert back.tobytes() == m.tobytes()


@settings(max_examples=60, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(0, 6), st.integers(0, 6)),
              elements=st.floats(-1e6, 1e6, width=32)))
def test_round_trip_bit_exact(m):
    assert pio.decode_matrix(pio.encode_matrix(m)).tobytes() == m.tobytes()


def test_body_flip_detected(rng):
    blob = bytearray(pio.encode_matrix(rng.standard_normal((3, 4))))
    nl = blob.index(b"\n")
    for pos in range(nl + 1, len(blob)):
        bad = bytearray(blob)
        bad[pos] ^= 0x01
        with pytest.raises(ChecksumMismatchError):
            pio.decode_matrix(bytes(bad))


def test_truncated_body_is_dimension_error(rng):
    blob = pio.encode_matrix(rng.standard_normal((3, 4)))
    with pytest.raises(DimensionMismatchError):
        pio.decode_matrix(blob[:-4])


def test_bad_header():
    with pytest.raises(IoFailureError):
        pio.decode_matrix(b"no newline here")
    with pytest.raises(IoFailureError):
        pio.decode_matrix(b"[1, 2]\n")
    with pytest.raises(IoFailureError):
        pio.decode_matrix(b'{"rows": 1, "cols": 1, "dtype": "f64le", "sha256": ""}\n' + bytes(8))


def test_rejects_non_finite_and_wrong_rank():
    with pytest.raises(ValueError):
        pio.encode_matrix(np.array([[np.nan]]))
    with pytest.raises(DimensionMismatchError):
        pio.encode_matrix(np.zeros(3))


def test_missing_file(tmp_path):
    with pytest.raises(IoFailureError):
        pio.read_matrix(tmp_path / "absent.bin")
