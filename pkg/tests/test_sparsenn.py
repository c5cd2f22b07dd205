import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from nomae import gradcheck
from nomae.coords import CoordSet
from nomae.errors import AlignmentError, CoverageError, FormatError, MissingParent, NumericalError, ShapeError
from nomae.reference import Grid, dense_correlate, dense_expansion, dense_submanifold
from nomae.sparsenn import autograd as ag
from nomae.sparsenn import checkpoint, ops
from nomae.sparsenn.autograd import backward, constant, parameter
from nomae.sparsenn.ops import SparseFeatureMap, num_taps
from nomae.sparsenn.optim import AdamHyper, AdamState, ParamStore, adam_step, cosine_lr


def fmap(coords, feats, name="x"):
    c = coords if isinstance(coords, CoordSet) else CoordSet(np.asarray(coords))
    return SparseFeatureMap(c, parameter(np.asarray(feats, dtype=np.float64), name))


def identity_kernel(reach, c):
    w = np.zeros((num_taps(reach), c, c))
    w[num_taps(reach) // 2] = np.eye(c)
    return parameter(w)


def test_identity_kernel_submanifold(rng):
    c = gradcheck.random_coords(rng, 40)
    x = fmap(c, rng.normal(size=(40, 3)))
    y = ops.submanifold_conv(x, identity_kernel(1, 3))
    assert y.coords == c
    np.testing.assert_array_equal(y.features.data, x.features.data)


def test_single_voxel_uses_center_tap_only(rng):
    x = fmap([[2, 2, 2]], [[1.5, -2.0]])
    w = rng.normal(size=(27, 2, 3))
    y = ops.submanifold_conv(x, parameter(w))
    np.testing.assert_allclose(y.features.data, x.features.data @ w[13])


def test_expansion_single_voxel_matches_dense(rng):
    x = fmap([[0, 0, 0]], [[1.0, 2.0]])
    w = rng.normal(size=(27, 2, 1))
    y = ops.expansion_conv(x, parameter(w))
    assert len(y.coords) == 27
    grid = Grid((-2, -2, -2), (5, 5, 5))
    xd = grid.scatter(x.coords, x.features.data)
    yd, m = dense_expansion(xd, grid.mask(x.coords), w)
    assert m.sum() == 27
    np.testing.assert_allclose(grid.gather(y.coords, yd), y.features.data, atol=1e-12)


@given(st.integers(0, 2**32 - 1), st.sampled_from([1, 2]))
def test_convs_match_dense_oracle(seed, reach):
    rng = np.random.default_rng(seed)
    c = gradcheck.random_coords(rng, int(rng.integers(1, 50)), extent=6)
    x = fmap(c, rng.normal(size=(len(c), 2)))
    w = rng.normal(size=(num_taps(reach), 2, 3))
    b = rng.normal(size=3)
    grid = Grid((-3 - reach,) * 3, (6 + 2 * reach,) * 3)
    xd, m = grid.scatter(c, x.features.data), grid.mask(c)
    sub = ops.submanifold_conv(x, parameter(w), parameter(b))
    np.testing.assert_allclose(sub.features.data, grid.gather(c, dense_submanifold(xd, m, w, b)), atol=1e-10)
    exp = ops.expansion_conv(x, parameter(w), parameter(b))
    yd, mo = dense_expansion(xd, m, w, b)
    assert exp.coords == CoordSet(np.argwhere(mo) + grid.lo)
    np.testing.assert_allclose(exp.features.data, grid.gather(exp.coords, yd), atol=1e-10)


def test_dense_correlate_convention():
    x = np.zeros((3, 3, 3, 1))
    x[2, 1, 1, 0] = 1.0  # neighbour at offset (+1, 0, 0) from the centre
    w = np.zeros((27, 1, 1))
    w[2 * 9 + 1 * 3 + 1] = 5.0  # tap for offset (+1, 0, 0)
    assert dense_correlate(x, w)[1, 1, 1, 0] == 5.0


def test_zero_weights_give_zero_output(rng):
    c = gradcheck.random_coords(rng, 30)
    x = fmap(c, rng.normal(size=(30, 4)))
    y = ops.expansion_conv(x, parameter(np.zeros((27, 4, 2))))
    assert not y.features.data.any()


def test_receptive_field_perturbation(rng):
    # perturbing one input changes submanifold outputs only within the reach
    c = gradcheck.random_coords(rng, 200, extent=10)
    feats = rng.normal(size=(len(c), 2))
    w = parameter(rng.normal(size=(27, 2, 2)))
    base = ops.submanifold_conv(fmap(c, feats), w).features.data
    j = len(c) // 2
    feats2 = feats.copy()
    feats2[j] += 1.0
    moved = ops.submanifold_conv(fmap(c, feats2), w).features.data
    changed = np.abs(moved - base).max(axis=1) > 0
    dist = np.abs(c.coords - c.coords[j]).max(axis=1)
    assert changed[j]
    assert not changed[dist > 1].any()


def test_pool_unpool(rng):
    c = CoordSet(np.array([[0, 0, 0], [1, 1, 1], [-1, 0, 0], [4, 5, 6]]))
    x = fmap(c, np.arange(8.0).reshape(4, 2))
    p = ops.pool_down(x)
    assert {tuple(v) for v in p.coords.coords.tolist()} == {(0, 0, 0), (-1, 0, 0), (2, 2, 3)}
    rows = {tuple(v): f for v, f in zip(p.coords.coords.tolist(), p.features.data.tolist())}
    r = {tuple(v): f for v, f in zip(c.coords.tolist(), x.features.data.tolist())}
    np.testing.assert_allclose(rows[(0, 0, 0)], np.mean([r[(0, 0, 0)], r[(1, 1, 1)]], axis=0))
    assert p.scale == 1
    up = ops.unpool_up(p, c)
    for v, f in zip(c.coords.tolist(), up.features.data.tolist()):
        assert f == rows[tuple(np.floor_divide(v, 2).tolist())]
    with pytest.raises(MissingParent):
        ops.unpool_up(p, CoordSet(np.array([[40, 0, 0]])))


def test_alignment_errors(rng):
    a = fmap([[0, 0, 0]], [[1.0]])
    b = fmap([[1, 0, 0]], [[1.0]])
    with pytest.raises(AlignmentError):
        ops.add(a, b)
    with pytest.raises(AlignmentError):
        ops.concat(a, b)
    with pytest.raises(ShapeError):
        SparseFeatureMap(a.coords, constant(np.zeros((2, 1))))
    with pytest.raises(ShapeError):
        ops.submanifold_conv(a, parameter(np.zeros((27, 2, 1))))
    with pytest.raises(ShapeError):
        ops.submanifold_conv(a, parameter(np.zeros((8, 1, 1))))
    with pytest.raises(CoverageError):
        ops.select(a, b.coords)


def test_bce_values():
    z = SparseFeatureMap(CoordSet(np.zeros((1, 3), dtype=np.int64)), parameter(np.zeros((1, 1))))
    assert float(ops.bce_with_logits(z, np.array([1])).data) == pytest.approx(math.log(2), abs=1e-15)
    z20 = SparseFeatureMap(z.coords, parameter(np.full((1, 1), 20.0)))
    assert float(ops.bce_with_logits(z20, np.array([1])).data) == pytest.approx(2.06e-9, rel=1e-2)
    big = SparseFeatureMap(z.coords, parameter(np.full((1, 1), 800.0)))
    assert np.isfinite(float(ops.bce_with_logits(big, np.array([0])).data))


def test_bce_matches_float64_oracle(rng):
    zs = rng.normal(scale=4, size=500)
    ys = (rng.random(500) < 0.4).astype(np.uint8)
    got = float(ag.bce_with_logits(parameter(zs.reshape(-1, 1)), ys).data)
    p = 1 / (1 + np.exp(-zs))
    ref = -np.mean(ys * np.log(p) + (1 - ys) * np.log(1 - p))
    assert got == pytest.approx(ref, abs=1e-12)


def test_bce_gradient_closed_form(rng):
    x = parameter(rng.normal(size=(20, 3)))
    w = parameter(rng.normal(size=(3, 1)))
    y = (rng.random(20) < 0.5).astype(np.uint8)
    backward(ag.bce_with_logits(ag.matmul(x, w), y))
    z = (x.data @ w.data).reshape(-1)
    sig = 1 / (1 + np.exp(-z))
    np.testing.assert_allclose(w.grad.reshape(-1), ((sig - y)[:, None] * x.data).mean(axis=0), atol=1e-12)


def test_unused_parameter_has_no_gradient(rng):
    store = ParamStore()
    a = store.add("a", rng.normal(size=(3, 1)))
    store.add("unused", rng.normal(size=(2,)))
    x = constant(rng.normal(size=(4, 3)))
    backward(ag.weighted_sum(ag.matmul(x, a), np.ones((4, 1))))
    assert a.grad is not None and store["unused"].grad is None


def test_non_finite_gradient_raises():
    x = parameter(np.array([[1.0]]))
    with pytest.raises(NumericalError):
        backward(ag.weighted_sum(x, np.array([[np.nan]])))


def test_adam_zero_grad_no_decay_keeps_params(rng):
    store = ParamStore()
    p = store.add("p", rng.normal(size=(3, 2)))
    before = p.data.copy()
    p.grad = np.zeros_like(p.data)
    adam_step(store, AdamState(), AdamHyper(weight_decay=0.0))
    np.testing.assert_array_equal(p.data, before)


def test_adam_scalar_oracle():
    store = ParamStore()
    p = store.add("p", np.array([1.0]))
    hyper = AdamHyper(lr=0.1, weight_decay=0.01)
    state = AdamState()
    w, m, v = 1.0, 0.0, 0.0
    for t in range(1, 11):
        p.grad = 2 * p.data.copy()  # d/dw of w^2
        g = 2 * w
        adam_step(store, state, hyper)
        w *= 1 - 0.1 * 0.01
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        w -= 0.1 * (m / (1 - 0.9**t)) / (math.sqrt(v / (1 - 0.999**t)) + 1e-8)
        assert p.data[0] == pytest.approx(w, abs=1e-12)
    assert state.step == 10


def test_cosine_schedule():
    assert cosine_lr(0, 100, 1.0, 10) == pytest.approx(0.1)
    assert cosine_lr(9, 100, 1.0, 10) == pytest.approx(1.0)
    assert cosine_lr(10, 100, 1.0, 10) == pytest.approx(1.0)
    assert cosine_lr(55, 100, 1.0, 10) == pytest.approx(0.5)
    assert cosine_lr(100, 100, 1.0, 10) == pytest.approx(0.0, abs=1e-15)
    lrs = [cosine_lr(s, 100, 1.0, 10) for s in range(10, 100)]
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))


def test_checkpoint_round_trip(tmp_path, rng):
    arrays = {"a": rng.normal(size=(3, 4)).astype(np.float32), "b": np.arange(5, dtype=np.int64),
              "c": rng.normal(size=()), "d": np.array([1, 2], dtype=np.uint8)}
    path = tmp_path / "x.ckpt"
    checkpoint.save(path, arrays)
    back = checkpoint.load(path)
    assert list(back) == list(arrays)
    for k in arrays:
        assert back[k].dtype == arrays[k].dtype and back[k].tobytes() == arrays[k].tobytes()
    assert checkpoint.encode(back) == path.read_bytes()
    with pytest.raises(FormatError):
        checkpoint.decode(b"garbage")
    with pytest.raises(FormatError):
        checkpoint.decode(path.read_bytes()[:-3])
    with pytest.raises(FormatError):
        checkpoint.encode({"z": np.zeros(2, dtype=np.complex64)})


@pytest.mark.parametrize("case", gradcheck.op_cases(seed=3), ids=lambda c: c.name)
def test_op_gradients(case):
    res = gradcheck.run_case(case)
    assert res.checked > 0
    assert res.max_rel_error < gradcheck.REL_TOL, res
