import io

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from dexpression.tensor import (
    SpatialMismatchError,
    concat_channels,
    elementwise_map,
    numel,
    read_tensor,
    split_channels,
    write_tensor,
    zeros,
)


def test_zeros():
    assert zeros([2, 2]).tolist() == [[0, 0], [0, 0]]
    assert zeros([1]).tolist() == [0]
    assert zeros([2, 2]).dtype == np.float32


def test_zeros_element_count():
    assert zeros([64, 112, 112]).size == 64 * 112 * 112 == 802816
    assert numel([64, 112, 112]) == 802816


@pytest.mark.parametrize("shape", [[0], [2, 0], [], [-1, 3]])
def test_invalid_shapes(shape):
    with pytest.raises(ValueError):
        zeros(shape)


def test_elementwise_map():
    assert elementwise_map(np.array([1.0, -1.0]), lambda v: -v).tolist() == [-1, 1]
    assert elementwise_map(np.array([0.0]), lambda v: v).tolist() == [0]
    out = elementwise_map(np.array([[1.0, 2.0], [3.0, 4.0]]), lambda v: 2 * v)
    assert out.tolist() == [[2, 4], [6, 8]]


def test_elementwise_map_does_not_mutate():
    t = np.array([1.0, 2.0])
    elementwise_map(t, lambda v: v + 1)
    assert t.tolist() == [1.0, 2.0]


@pytest.mark.parametrize("ca,hw", [(208, 56), (208, 28)])
def test_concat_published_sizes(ca, hw):
    a = zeros([ca, hw, hw])
    b = zeros([64, hw, hw])
    assert concat_channels(a, b).shape == (272, hw, hw)


def test_concat_order():
    out = concat_channels(np.ones((1, 2, 2)), np.zeros((1, 2, 2)))
    assert out.shape == (2, 2, 2)
    assert (out[0] == 1).all() and (out[1] == 0).all()


def test_concat_spatial_mismatch():
    with pytest.raises(SpatialMismatchError):
        concat_channels(zeros([1, 2, 2]), zeros([1, 2, 3]))


@given(
    hnp.arrays(np.float32, st.tuples(st.integers(1, 4), st.integers(1, 5), st.integers(1, 5)),
               elements=st.floats(-1e6, 1e6, width=32)),
    st.integers(1, 4),
)
def test_concat_split_roundtrip(a, cb):
    b = np.arange(cb * a.shape[1] * a.shape[2], dtype=np.float32).reshape(cb, *a.shape[1:])
    ra, rb = split_channels(concat_channels(a, b), a.shape[0])
    assert ra.tobytes() == a.tobytes() and rb.tobytes() == b.tobytes()


@given(hnp.arrays(np.float32, hnp.array_shapes(min_dims=1, max_dims=4, max_side=5),
                  elements=st.floats(-1e6, 1e6, width=32)))
def test_identity_map_and_reshape_roundtrip(t):
    same = elementwise_map(t, lambda v: v)
    assert same.shape == t.shape and same.tobytes() == t.tobytes()
    assert t.reshape(-1).reshape(t.shape).tobytes() == t.tobytes()


def test_serialization_layout():
    t = np.arange(6, dtype=np.float32).reshape(2, 3)
    buf = io.BytesIO()
    write_tensor(buf, t)
    raw = buf.getvalue()
    assert raw[:12] == (2).to_bytes(4, "little") + (2).to_bytes(4, "little") + (3).to_bytes(4, "little")
    assert raw[12:] == t.astype("<f4").tobytes()
    back, end = read_tensor(raw)
    assert end == len(raw)
    assert back.tobytes() == t.tobytes()


def test_read_truncated_tensor():
    buf = io.BytesIO()
    write_tensor(buf, np.ones((4, 4), np.float32))
    with pytest.raises(ValueError):
        read_tensor(buf.getvalue()[:-3])
