import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from encfree import numerics as nx
from encfree.errors import ContractError, ShapeError
from encfree.guidance import (GuidanceHead, TeacherFeatures, adaptive_pool_matrix, align_geometry,
                              frame_contrastive, mock_teacher, tube_mse)
from encfree.numerics import Tensor
from encfree.videotok import VideoClip


def t64(a):
    with nx.precision("float64"):
        return Tensor(np.asarray(a, dtype=np.float64))


def test_align_pools_finer_student_in_blocks():
    x = np.random.default_rng(0).normal(size=(16, 3))
    teacher = TeacherFeatures(np.zeros((1, 4, 3)), [(2, 2)])
    s, t = align_geometry([t64(x)], [(4, 4)], teacher)
    grid = x.reshape(4, 4, 3)
    blocks = [grid[r:r + 2, c:c + 2].mean(axis=(0, 1)) for r in (0, 2) for c in (0, 2)]
    assert np.allclose(s.data[0], blocks, atol=1e-12)
    assert t.shape == (1, 4, 3)


def test_align_is_identity_on_equal_grids():
    x = np.random.default_rng(1).normal(size=(2, 6, 3))
    teacher = TeacherFeatures(x + 1.0, [(2, 3)] * 2)
    s, t = align_geometry([t64(x[0]), t64(x[1])], [(2, 3)] * 2, teacher)
    assert np.array_equal(s.data, x) and np.array_equal(t.data, x + 1.0)


def test_adaptive_bins_for_uneven_pooling():
    m = adaptive_pool_matrix(3, 2)
    assert np.allclose(m, [[0.5, 0.5, 0.0], [0.0, 0.5, 0.5]])
    tf = np.random.default_rng(2).normal(size=(1, 9, 2))
    s, t = align_geometry([t64(np.zeros((4, 2)))], [(2, 2)], TeacherFeatures(tf, [(3, 3)]))
    g = tf[0].reshape(3, 3, 2)
    brute = [g[r0:r1, c0:c1].mean(axis=(0, 1)) for r0, r1 in ((0, 2), (1, 3)) for c0, c1 in ((0, 2), (1, 3))]
    assert np.allclose(t.data[0], brute, atol=1e-12)


def test_align_requires_head_for_width_mismatch():
    teacher = TeacherFeatures(np.zeros((1, 1, 4)), [(1, 1)])
    with pytest.raises(ShapeError):
        align_geometry([t64(np.ones((1, 3)))], [(1, 1)], teacher)
    with nx.precision("float64"):
        head = GuidanceHead.init(3, 4)
    s, _ = align_geometry([t64(np.ones((1, 3)))], [(1, 1)], teacher, head)
    assert s.shape == (1, 1, 4)
    with pytest.raises(ContractError):
        align_geometry([t64(np.ones((1, 4)))] * 2, [(1, 1)] * 2, teacher)


def test_tube_mse_examples():
    x = np.random.default_rng(3).normal(size=(3, 4, 5))
    assert tube_mse(t64(x), t64(x)).item() < 1e-15
    assert tube_mse(t64(x), t64(2.5 * x)).item() < 1e-15
    # one tube (1, 0) vs (0, 1): squared distance 2 over 2 channels
    assert tube_mse(t64([[[1.0, 0.0]]]), t64([[[0.0, 1.0]]])).item() == pytest.approx(1.0)
    with pytest.raises(ShapeError):
        tube_mse(t64(np.ones((1, 2, 3))), t64(np.ones((1, 3, 3))))


def test_contrastive_examples():
    lt = t64(math.log(10.0))
    with pytest.raises((ContractError, ShapeError)):
        frame_contrastive(t64(np.zeros((0, 3))), t64(np.zeros((0, 3))), lt)
    v = np.random.default_rng(4).normal(size=(1, 3))
    assert frame_contrastive(t64(v), t64(-v), lt).item() == 0.0
    eq = np.ones((2, 3))
    assert frame_contrastive(t64(eq), t64(eq), lt).item() == pytest.approx(math.log(2), abs=1e-9)
    sat = frame_contrastive(t64(np.eye(4)), t64(np.eye(4)), t64(6.0)).item()
    assert 0.0 <= sat < 1e-6


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 5).flatmap(lambda b: st.tuples(
    arrays(np.float64, (b, 3), elements=st.floats(0.1, 2.0)),
    arrays(np.float64, (b, 3), elements=st.floats(0.1, 2.0)),
    st.permutations(range(b)))), st.floats(-2.0, 3.0))
def test_contrastive_symmetry_and_permutation(data, log_tau):
    v, t, perm = data
    lt = t64(log_tau)
    a = frame_contrastive(t64(v), t64(t), lt).item()
    assert a >= 0.0
    assert frame_contrastive(t64(t), t64(v), lt).item() == pytest.approx(a, abs=1e-12)
    assert frame_contrastive(t64(v[perm]), t64(t[perm]), lt).item() == pytest.approx(a, abs=1e-12)
    # cosines lie in [-1, 1], so each row costs at most ln B + 2 * scale
    assert a <= math.log(len(v)) + 2 * math.exp(log_tau) + 1e-9


def test_head_defaults():
    head = GuidanceHead.init(8, 8)
    assert set(head.parameters()) == {"log_tau"}
    assert head.log_tau.item() == pytest.approx(math.log(10.0))
    assert set(GuidanceHead.init(8, 4).parameters()) == {"log_tau", "mse_proj", "con_proj"}


def test_mock_teacher_is_local_and_deterministic():
    rng = np.random.default_rng(5)
    frame = rng.uniform(0, 1, (3, 16, 16))
    clip = VideoClip(np.stack([frame, frame]))
    f = mock_teacher(clip, (4, 4), dim=8, seed=1)
    assert f.features.shape == (2, 16, 8)
    assert np.array_equal(f.features[0], f.features[1])
    assert np.array_equal(f.features, mock_teacher(clip, (4, 4), dim=8, seed=1).features)
    changed = frame.copy()
    changed[:, 0:4, 4:8] = rng.uniform(0, 1, (3, 4, 4))  # cell (0, 1) only
    g = mock_teacher(VideoClip(changed[None]), (4, 4), dim=8, seed=1).features[0]
    diff = np.abs(g - f.features[0]).max(axis=1) > 0
    assert diff.tolist() == [i == 1 for i in range(16)]


def test_teacher_features_validation_and_io(tmp_path):
    with pytest.raises(ShapeError):
        TeacherFeatures(np.zeros((2, 4, 3)), [(2, 2)])
    with pytest.raises(ShapeError):
        TeacherFeatures(np.zeros((1, 4, 3)), [(1, 3)])
    f = TeacherFeatures(np.random.default_rng(6).normal(size=(2, 6, 3)), [(2, 3)] * 2)
    f.save(tmp_path, "c0")
    back = TeacherFeatures.load(tmp_path, "c0")
    assert back.grid == f.grid
    assert np.allclose(back.features, f.features, atol=1e-6)
