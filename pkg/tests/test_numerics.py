import math
import zlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from encfree import numerics as nx
from encfree.errors import FormatError, NumericError, ShapeError
from encfree.numerics import Tensor

from _util import f64


def test_matmul_hand_examples():
    eye = Tensor([[1.0, 0.0], [0.0, 1.0]])
    b = Tensor([[3.0, 4.0], [5.0, 6.0]])
    assert np.array_equal((eye @ b).data, b.data)
    assert (Tensor([[1.0, 2.0]]) @ Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_shape_mismatch_is_dimension_error():
    with pytest.raises(ShapeError) as exc:
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))
    assert exc.value.kind == "dimension"


def test_matmul_gradient_of_sum():
    rng = np.random.default_rng(0)
    with nx.precision("float64"):
        a, b = f64(rng.normal(size=(3, 4))), Tensor(rng.normal(size=(4, 2)))
        (a @ b).sum().backward()
        assert np.allclose(a.grad, np.ones((3, 2)) @ b.data.T)
        assert nx.grad_check(lambda x: (x @ b).sum(), a) < 1e-7


def test_softmax_ce_examples():
    with nx.precision("float64"):
        assert abs(nx.softmax_ce(Tensor(np.zeros((1, 4))), [2]).item() - math.log(4)) < 1e-12
        sat = np.zeros((3, 5))
        sat[np.arange(3), [0, 3, 4]] = 20.0
        assert nx.softmax_ce(Tensor(sat), [0, 3, 4]).item() < 1e-8
        rng = np.random.default_rng(1)
        x = rng.normal(size=(5, 7))
        tgt = rng.integers(0, 7, size=5)
        brute = np.mean([math.log(sum(math.exp(v) for v in row)) - row[t] for row, t in zip(x, tgt)])
        assert abs(nx.softmax_ce(Tensor(x), tgt).item() - brute) < 1e-12


def test_softmax_ce_rejects_out_of_range_target():
    with pytest.raises(IndexError):
        nx.softmax_ce(Tensor(np.zeros((2, 3))), [0, 3])


def test_grad_check_examples():
    rng = np.random.default_rng(2)
    with nx.precision("float64"):
        assert nx.grad_check(lambda x: (x * x).sum(), f64(rng.normal(size=(4, 3)))) < 1e-7
        tgt = rng.integers(0, 6, size=4)
        assert nx.grad_check(lambda x: nx.softmax_ce(x, tgt), f64(rng.normal(size=(4, 6)))) < 1e-5


def test_grad_check_requires_float64():
    with nx.precision("float32"):
        x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(NumericError):
        nx.grad_check(lambda v: v.sum(), x)


def test_strict_metric_is_symmetric_relative_error():
    assert nx._rel_err(2.0, 1.0) == 0.5
    assert nx._rel_err(0.002, 0.001, strict=True) == 0.5
    assert nx._rel_err(0.002, 0.001) == pytest.approx(0.001)


# each entry builds a scalar from one float64 input tensor
_RNG = np.random.default_rng(3)
_W = _RNG.normal(size=(4, 3))
_V = _RNG.normal(size=(3,))
_MASK = np.array([[True, False, True], [True, True, False]])
OPS = {
    "add": ((2, 3), lambda x: ((x + Tensor(_V)) ** 2).sum()),
    "sub_rsub": ((2, 3), lambda x: (1.5 - x).sum() + (x - 2.0).sum()),
    "mul": ((2, 3), lambda x: (x * x * 0.7).sum()),
    "div": ((2, 3), lambda x: (1.0 / (x * x + 1.0)).sum()),
    "power": ((2, 3), lambda x: ((x * x + 1.0) ** 1.5).sum()),
    "exp_log": ((2, 3), lambda x: nx.log(nx.exp(x) + 1.0).sum()),
    "sqrt": ((2, 3), lambda x: nx.sqrt(x * x + 0.5).sum()),
    "tanh": ((2, 3), lambda x: nx.tanh(x).sum()),
    "gelu": ((2, 3), lambda x: nx.gelu(x).sum()),
    "matmul_batched": ((2, 3, 4), lambda x: (nx.matmul(x, Tensor(_W)) ** 2).sum()),
    "sum_axis": ((2, 3), lambda x: (nx.tsum(x, axis=0) ** 2).sum()),
    "mean": ((2, 3), lambda x: (x * nx.mean(x, axis=0)).sum() + nx.mean(x, axis=1, keepdims=True).sum()),
    "reshape_transpose": ((2, 3), lambda x: (nx.transpose(nx.reshape(x, (3, 2))) * Tensor(_W[:2, :3])).sum()),
    "take": ((4, 3), lambda x: (nx.take(x, np.array([0, 2, 2, 3])) ** 2).sum()),
    "concat": ((2, 3), lambda x: (nx.concat([x, x * 2.0], axis=0) ** 2).sum()),
    "index_add": ((2, 3), lambda x: (nx.index_add(x * 1.0, np.array([1, 0]), x * x) ** 2).sum()),
    "segment_mean": ((5, 3), lambda x: (nx.segment_mean(x, np.array([0, 1, 0, 2, 1]), 3) ** 2).sum()),
    "softmax_masked": ((2, 3), lambda x: (nx.softmax(x, mask=_MASK) * Tensor(_W[:2, :3])).sum()),
    "layer_norm": ((3, 4), lambda x: (nx.layer_norm(x, Tensor(_W[:, 0]), Tensor(_W[:, 1])) ** 3).sum()),
    "l2_normalize": ((3, 4), lambda x: (nx.l2_normalize(x) * Tensor(_W.T[:3])).sum()),
    "softmax_ce": ((3, 5), lambda x: nx.softmax_ce(x, [0, 4, 2])),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_every_op_passes_gradient_check(name):
    shape, f = OPS[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    with nx.precision("float64"):
        for _ in range(3):
            assert nx.grad_check(f, f64(rng.normal(size=shape))) < 1e-5


def test_broadcasting_limited_to_leading_dims():
    a = Tensor(np.ones((2, 3)))
    assert (a + Tensor(np.ones(3))).shape == (2, 3)
    assert (a * 2.0).shape == (2, 3)
    with pytest.raises(ShapeError):
        a + Tensor(np.ones((2, 1)))


def test_non_finite_results_raise():
    with pytest.raises(NumericError):
        nx.log(Tensor([0.0, 1.0]))


def test_precision_modes():
    with nx.precision("float32"):
        assert Tensor([1.0]).dtype == np.float32
    with nx.precision("float64"):
        assert Tensor([1.0]).dtype == np.float64
    with pytest.raises(ValueError):
        with nx.precision("float16"):
            pass


def test_no_grad_builds_no_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    with nx.no_grad():
        y = (x * 2.0).sum()
    assert not y.requires_grad


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6), st.integers(1, 3))
def test_matmul_mac_count_is_mkn(m, k, n, batch):
    a = Tensor(np.ones((batch, m, k)))
    b = Tensor(np.ones((k, n)))
    with nx.instrument() as counter:
        a @ b
    assert counter.macs == batch * m * k * n


def test_ops_are_bit_deterministic():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(16, 8))

    def run():
        with nx.precision("float64"):
            t = Tensor(x, requires_grad=True)
            out = nx.softmax_ce(nx.layer_norm(t, Tensor(np.ones(8)), Tensor(np.zeros(8))) @ Tensor(x.T[:8, :5]),
                                list(range(5)) * 3 + [0])
            out.backward()
            return out.data.tobytes() + t.grad.tobytes()

    assert run() == run()


@settings(max_examples=100, deadline=None)
@given(arrays(np.float32, st.lists(st.integers(1, 5), min_size=0, max_size=4).map(tuple),
              elements=st.floats(-1e6, 1e6, width=32)))
def test_elvt_roundtrip(arr):
    out = nx.decode_elvt(nx.encode_elvt(arr))
    assert out.shape == arr.shape and out.dtype == np.float32
    assert out.tobytes() == np.asarray(arr, dtype="<f4").tobytes()


def test_elvt_rejects_bad_input(tmp_path):
    blob = nx.encode_elvt(np.ones((2, 2)))
    with pytest.raises(FormatError):
        nx.decode_elvt(b"XXXX" + blob[4:])
    with pytest.raises(FormatError):
        nx.decode_elvt(blob[:-1])
    with pytest.raises(FormatError):
        nx.encode_elvt(np.ones((0, 3)))
    nx.save_elvt(tmp_path / "a.elvt", np.arange(6.0).reshape(2, 3))
    assert nx.load_elvt(tmp_path / "a.elvt").tolist() == [[0, 1, 2], [3, 4, 5]]
