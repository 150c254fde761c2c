import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from biranet import serialization as S
from biranet.tensor import Tensor


def test_layout_of_single_entry():
    blob = S.dumps({"w": np.array([[1.0, 2.0]])})
    assert blob[:5] == b"BRNT\x01"
    assert struct.unpack_from("<I", blob, 5) == (1,)
    assert struct.unpack_from("<I", blob, 9) == (1,)
    assert blob[13:14] == b"w"
    assert struct.unpack_from("<I2Q", blob, 14) == (2, 1, 2)
    assert struct.unpack_from("<2d", blob, 34) == (1.0, 2.0)
    assert len(blob) == 34 + 16


def test_round_trip_preserves_order_shape_and_bits():
    rng = np.random.default_rng(0)
    tensors = {"b.second": rng.normal(size=(3, 1, 2)), "a.first": np.array(np.pi), "empty": np.zeros((0, 4))}
    out = S.loads(S.dumps(tensors))
    assert list(out) == list(tensors)
    for k in tensors:
        assert out[k].shape == tensors[k].shape
        assert out[k].tobytes() == np.asarray(tensors[k], dtype="<f8").tobytes()


def test_accepts_tensor_values():
    out = S.loads(S.dumps({"t": Tensor([1.0, -0.0])}))
    assert np.signbit(out["t"][1])


def test_file_round_trip(tmp_path):
    p = tmp_path / "x.ntc"
    S.save(p, {"k": np.arange(6.0).reshape(2, 3)})
    np.testing.assert_array_equal(S.load(p)["k"], np.arange(6.0).reshape(2, 3))
    S.save(tmp_path / "y.ntc", S.load(p))
    assert (tmp_path / "y.ntc").read_bytes() == p.read_bytes()


@pytest.mark.parametrize("mangle, match", [
    (lambda b: b"XXXX" + b[4:], "magic"),
    (lambda b: b[:4] + b"\x02" + b[5:], "version"),
    (lambda b: b[:-3], "truncated"),
    (lambda b: b + b"\x00", "trailing"),
])
def test_corrupt_containers_are_rejected(mangle, match):
    blob = S.dumps({"w": np.ones(3)})
    with pytest.raises(S.FormatError, match=match):
        S.loads(mangle(blob))


@settings(max_examples=50, deadline=None)
@given(st.dictionaries(
    st.text(min_size=1, max_size=12),
    hnp.arrays(np.float64, hnp.array_shapes(min_dims=0, max_dims=3, max_side=4)),
    max_size=5))
def test_prop_round_trip_bitwise(tensors):
    out = S.loads(S.dumps(tensors))
    assert list(out) == list(tensors)
    for k, v in tensors.items():
        assert out[k].shape == v.shape
        assert out[k].tobytes() == v.tobytes()
