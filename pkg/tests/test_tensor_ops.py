import numpy as np
import pytest

from tablebot import tensor as T
from tablebot.tensor import Op, ShapeError, Tensor


def test_matmul_identity():
    a = Tensor(np.arange(12, dtype=np.float32).reshape(3, 4))
    eye = Tensor(np.eye(4, dtype=np.float32))
    out = T.matmul(a, eye)
    assert np.array_equal(out.data, a.data)


def test_matmul_batched_broadcast():
    rng = np.random.default_rng(0)
    a = Tensor(rng.normal(size=(5, 2, 3, 4)).astype(np.float32))
    b = Tensor(rng.normal(size=(4, 6)).astype(np.float32))
    out = T.matmul(a, b)
    assert out.shape == (5, 2, 3, 6)
    ref = np.matmul(a.data, b.data)
    assert np.allclose(out.data, ref)


def test_matmul_shape_error_names_op():
    with pytest.raises(ShapeError, match="matmul"):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))


def test_add_broadcast_and_error():
    out = T.add(Tensor(np.ones((2, 3))), Tensor(np.arange(3, dtype=np.float32)))
    assert out.shape == (2, 3)
    with pytest.raises(ShapeError, match="add"):
        T.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4,))))


def test_softmax_uniform_on_zeros():
    out = T.softmax(Tensor(np.zeros((1, 4), dtype=np.float32)), axis=-1)
    assert np.allclose(out.data, 0.25)


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(1)
    for _ in range(20):
        x = Tensor(rng.normal(scale=5.0, size=(4, 7)).astype(np.float32))
        y = T.softmax(x, axis=-1).data
        assert np.all(y >= 0.0) and np.all(y <= 1.0)
        assert np.allclose(y.sum(axis=-1), 1.0, atol=1e-5)


def test_softmax_unknown_axis():
    with pytest.raises(ShapeError, match="axis"):
        T.softmax(Tensor(np.zeros((2, 2))), axis=5)


def test_layernorm_zero_mean_unit_variance():
    out = T.layernorm(Tensor(np.array([[1.0, 2.0, 3.0]])), axis=-1, eps=1e-10)
    assert abs(float(out.data.mean())) < 1e-6
    assert abs(float((out.data**2).mean()) - 1.0) < 1e-4


def test_layernorm_eps_validation():
    with pytest.raises(ShapeError, match="eps"):
        T.layernorm(Tensor(np.zeros((2, 2))), axis=-1, eps=0.0)


def test_reshape_transpose_roundtrip_bitwise():
    rng = np.random.default_rng(2)
    x = Tensor(rng.normal(size=(3, 4, 5)).astype(np.float32))
    back = T.reshape(T.reshape(x, (12, 5)), (3, 4, 5))
    assert np.array_equal(back.data, x.data)
    perm = T.transpose(T.transpose(x, (2, 0, 1)), (1, 2, 0))
    assert np.array_equal(np.ascontiguousarray(perm.data), x.data)


def test_reshape_error():
    with pytest.raises(ShapeError, match="reshape"):
        T.reshape(Tensor(np.zeros((2, 3))), (4, 4))


def test_concat_and_slice_inverse():
    a = Tensor(np.ones((2, 3), dtype=np.float32))
    b = Tensor(np.full((2, 2), 2.0, dtype=np.float32))
    cat = T.concat([a, b], axis=1)
    assert cat.shape == (2, 5)
    back_a = T.slice_(cat, (0, 0), (2, 3))
    back_b = T.slice_(cat, (0, 3), (2, 2))
    assert np.array_equal(back_a.data, a.data)
    assert np.array_equal(back_b.data, b.data)


def test_slice_bounds_error():
    with pytest.raises(ShapeError, match="slice"):
        T.slice_(Tensor(np.zeros((2, 2))), (1, 0), (2, 2))


def test_concat_shape_error():
    with pytest.raises(ShapeError, match="concat"):
        T.concat([Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 3)))], axis=1)


def test_embedding_lookup_rows():
    table = Tensor(np.arange(12, dtype=np.float32).reshape(4, 3))
    out = T.embedding_lookup(table, np.array([[0, 2], [3, 3]]))
    assert out.shape == (2, 2, 3)
    assert np.array_equal(out.data[0, 1], table.data[2])
    with pytest.raises(ShapeError, match="range"):
        T.embedding_lookup(table, np.array([4]))


def test_gelu_known_values():
    x = Tensor(np.array([0.0, 100.0, -100.0], dtype=np.float32))
    y = T.gelu(x).data
    assert y[0] == 0.0
    assert abs(y[1] - 100.0) < 1e-3
    assert abs(y[2]) < 1e-3


def test_mean_axes():
    x = Tensor(np.arange(24, dtype=np.float32).reshape(2, 3, 4))
    assert T.mean(x).shape == ()
    assert T.mean(x, axis=1).shape == (2, 4)
    assert np.allclose(T.mean(x, axis=(0, 2)).data, x.data.mean(axis=(0, 2)))


def test_mse_values():
    a = Tensor(np.array([1.0, 2.0], dtype=np.float32))
    b = Tensor(np.array([0.0, 0.0], dtype=np.float32))
    assert abs(T.mse(a, b).item() - 2.5) < 1e-6
    assert T.mse(a, a).item() == 0.0
    with pytest.raises(ShapeError, match="mse"):
        T.mse(a, Tensor(np.zeros(3)))


def test_cross_entropy_uniform():
    logits = Tensor(np.zeros((2, 4), dtype=np.float32))
    loss = T.cross_entropy(logits, np.array([1, 3]))
    assert abs(loss.item() - np.log(4.0)) < 1e-6


def test_cross_entropy_weights_select_rows():
    logits = Tensor(np.array([[10.0, 0.0], [0.0, 10.0]], dtype=np.float32))
    # weight only the confidently-correct row: loss near zero
    loss = T.cross_entropy(logits, np.array([0, 0]), np.array([1.0, 0.0]))
    assert loss.item() < 1e-3


def test_apply_dispatches_every_opkind():
    rng = np.random.default_rng(3)
    x = Tensor(rng.normal(size=(2, 4)).astype(np.float32))
    y = Tensor(rng.normal(size=(2, 4)).astype(np.float32))
    table = Tensor(rng.normal(size=(5, 4)).astype(np.float32))
    calls = {
        Op.MATMUL: ([x, Tensor(rng.normal(size=(4, 3)).astype(np.float32))], {}),
        Op.ADD: ([x, y], {}),
        Op.MULTIPLY: ([x, y], {}),
        Op.TRANSPOSE: ([x], {"axes": (1, 0)}),
        Op.RESHAPE: ([x], {"shape": (4, 2)}),
        Op.CONCAT: ([x, y], {"axis": 0}),
        Op.SLICE: ([x], {"begin": (0, 1), "size": (2, 2)}),
        Op.EMBEDDING_LOOKUP: ([table], {"ids": np.array([0, 4])}),
        Op.SOFTMAX: ([x], {"axis": -1}),
        Op.LAYERNORM: ([x], {"axis": -1, "eps": 1e-5}),
        Op.GELU: ([x], {}),
        Op.MEAN: ([x], {"axis": 0}),
        Op.MSE: ([x, y], {}),
        Op.CROSS_ENTROPY: ([x], {"targets": np.array([0, 1])}),
    }
    assert set(calls) == set(Op)
    for op, (inputs, attrs) in calls.items():
        out = T.apply(op, inputs, **attrs)
        assert isinstance(out, Tensor)


def test_forward_determinism_bitwise():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(3, 8)).astype(np.float32)
    a = T.softmax(T.gelu(Tensor(x)), axis=-1).data
    b = T.softmax(T.gelu(Tensor(x.copy())), axis=-1).data
    assert np.array_equal(a, b)


def test_debug_finite_check():
    T.set_debug_checks(True)
    try:
        ok = T.gelu(Tensor(np.ones(3, dtype=np.float32)))
        assert np.isfinite(ok.data).all()
        with pytest.raises(T.NonFiniteError):
            T.multiply(Tensor(np.array(np.inf, dtype=np.float32)), Tensor(np.float32(0.0)))
    finally:
        T.set_debug_checks(False)
