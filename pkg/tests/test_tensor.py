import struct

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from trnet.counting import flop_meter
from trnet.tensor import (
    ConvSpec,
    DenseTensor,
    TRT_MAGIC,
    contract,
    conv2d_reference,
    dumps_trt,
    load_trt,
    loads_trt,
    reshape,
    save_trt,
    tensordot_counted,
)


def test_dense_tensor_copies_and_freezes():
    src = np.ones((2, 3))
    t = DenseTensor(src)
    src[0, 0] = 7.0
    assert t.array[0, 0] == 1.0
    with pytest.raises(ValueError):
        t.array[0, 0] = 2.0  # read-only buffer


def test_dense_tensor_shape_reinterpretation():
    t = DenseTensor(np.arange(12.0), shape=(3, 4))
    assert t.shape == (3, 4)
    assert t.array[1, 0] == 4.0
    with pytest.raises(ValueError):
        DenseTensor(np.arange(12.0), shape=(5, 3))


def test_dense_tensor_rejects_non_finite():
    with pytest.raises(ValueError):
        DenseTensor([1.0, np.nan])
    with pytest.raises(ValueError):
        DenseTensor([np.inf])


def test_reshape_is_row_major_regrouping():
    t = DenseTensor(np.arange(24.0), shape=(2, 3, 4))
    r = reshape(t, (6, 4))
    assert_array_equal(r.array, t.array.reshape(6, 4))
    with pytest.raises(ValueError):
        reshape(t, (5, 5))


def test_tensordot_matches_numpy():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((2, 3, 4))
    b = rng.standard_normal((4, 3, 5))
    got = tensordot_counted(a, b, [1, 2], [1, 0])
    assert_allclose(got, np.tensordot(a, b, axes=([1, 2], [1, 0])), rtol=0, atol=0)


def test_tensordot_triple_loop_oracle():
    # independent elementwise summation for A(i,j,k) B(j,k,l) over j,k
    rng = np.random.default_rng(1)
    a = rng.standard_normal((2, 3, 4))
    b = rng.standard_normal((3, 4, 5))
    want = np.zeros((2, 5))
    for i in range(2):
        for l in range(5):
            s = 0.0
            for j in range(3):
                for k in range(4):
                    s += a[i, j, k] * b[j, k, l]
            want[i, l] = s
    got = tensordot_counted(a, b, [1, 2], [0, 1])
    assert_allclose(got, want, rtol=1e-15, atol=1e-15)


def test_tensordot_mac_count():
    a = np.ones((2, 3, 4))
    b = np.ones((4, 3, 5))
    with flop_meter() as m:
        tensordot_counted(a, b, [1, 2], [1, 0])
    # contracted 3*4=12, free 2*5=10
    assert m.macs == 120
    assert m.flops_2x == 240


def test_tensordot_validation():
    a = np.ones((2, 3))
    b = np.ones((3, 2))
    with pytest.raises(ValueError):
        tensordot_counted(a, b, [1, 1], [0, 1])  # duplicate axis
    with pytest.raises(ValueError):
        tensordot_counted(a, b, [2], [0])  # out of range
    with pytest.raises(ValueError):
        tensordot_counted(a, b, [0], [0])  # size mismatch 2 vs 3
    with pytest.raises(ValueError):
        tensordot_counted(a, b, [0, 1], [0])  # length mismatch


def test_contract_full_reduction_gives_scalar():
    a = DenseTensor([[1.0, 2.0], [3.0, 4.0]])
    s = contract(a, [0, 1], a, [0, 1])
    assert s.shape == ()
    assert s.item() == pytest.approx(1 + 4 + 9 + 16)


def test_conv_spec_output_geometry():
    spec = ConvSpec(height=5, width=7, in_channels=2, out_channels=3,
                    filter_size=3, stride=2, padding=1)
    assert spec.out_height == 3  # (5 + 2 - 3)//2 + 1
    assert spec.out_width == 4
    with pytest.raises(ValueError):
        ConvSpec(height=2, width=2, in_channels=1, out_channels=1,
                 filter_size=5, stride=1, padding=0)  # empty output


def _conv_quad_loop(x, k, stride, pad):
    h, w, ci = x.shape
    d = k.shape[0]
    co = k.shape[3]
    ho = (h + 2 * pad - d) // stride + 1
    wo = (w + 2 * pad - d) // stride + 1
    out = np.zeros((ho, wo, co))
    for io in range(ho):
        for jo in range(wo):
            for d1 in range(d):
                for d2 in range(d):
                    ii = io * stride + d1 - pad
                    jj = jo * stride + d2 - pad
                    if 0 <= ii < h and 0 <= jj < w:
                        out[io, jo] += x[ii, jj] @ k[d1, d2]
    return out


@pytest.mark.parametrize("d,stride,pad", [(1, 1, 0), (3, 1, 0), (3, 1, 1),
                                          (3, 2, 1), (5, 2, 0), (5, 1, 2)])
def test_conv2d_reference_quad_loop_oracle(d, stride, pad):
    rng = np.random.default_rng(d * 10 + stride + pad)
    h = w = 7
    ci, co = 2, 3
    x = rng.standard_normal((h, w, ci))
    k = rng.standard_normal((d, d, ci, co))
    spec = ConvSpec(height=h, width=w, in_channels=ci, out_channels=co,
                    filter_size=d, stride=stride, padding=pad)
    got = conv2d_reference(DenseTensor(x), DenseTensor(k), spec)
    assert_allclose(got.array, _conv_quad_loop(x, k, stride, pad),
                    rtol=1e-13, atol=1e-13)


def test_trt_header_layout():
    t = DenseTensor(np.arange(6.0), shape=(2, 3))
    blob = dumps_trt(t)
    assert blob[:4] == TRT_MAGIC
    assert blob[4] == 0  # dtype tag: float64
    assert blob[5] == 2  # mode count
    dims = struct.unpack_from("<2Q", blob, 6)
    assert dims == (2, 3)
    payload = np.frombuffer(blob, dtype="<f8", offset=6 + 16)
    assert_array_equal(payload, np.arange(6.0))


def test_trt_roundtrip_including_scalar(tmp_path):
    for arr in [np.arange(24.0).reshape(2, 3, 4), np.array(5.0)]:
        p = tmp_path / "t.trt"
        save_trt(p, DenseTensor(arr))
        back = load_trt(p)
        assert back.shape == arr.shape
        assert_array_equal(back.array, arr)


def test_trt_decode_errors():
    good = dumps_trt(DenseTensor(np.ones((2, 2))))
    with pytest.raises(ValueError, match="magic"):
        loads_trt(b"XXXX" + good[4:])
    with pytest.raises(ValueError, match="dtype"):
        loads_trt(good[:4] + bytes([9]) + good[5:])
    with pytest.raises(ValueError, match="truncated"):
        loads_trt(good[:5])
    with pytest.raises(ValueError, match="payload"):
        loads_trt(good[:-8])


def test_trt_trailing_bytes_rejected(tmp_path):
    p = tmp_path / "t.trt"
    p.write_bytes(dumps_trt(DenseTensor([1.0])) + b"\x00")
    with pytest.raises(ValueError, match="trailing"):
        load_trt(p)


def test_trt_sequential_records_share_buffer():
    a = DenseTensor([1.0, 2.0])
    b = DenseTensor([[3.0]])
    buf = dumps_trt(a) + dumps_trt(b)
    t1, off = loads_trt(buf)
    t2, end = loads_trt(buf, off)
    assert end == len(buf)
    assert_array_equal(t1.array, [1.0, 2.0])
    assert_array_equal(t2.array, [[3.0]])
