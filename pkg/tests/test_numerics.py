import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from tridit import numerics as nx
from tridit.numerics import Tensor

from conftest import fd_grad


def _check(build, *arrays, tol=1e-6):
    """Compare backward() against central differences for every input element."""
    tensors = [Tensor(a, requires_grad=True, dtype=np.float64) for a in arrays]
    out = build(*tensors)
    out.backward()
    for t in tensors:
        for idx in np.ndindex(t.data.shape):
            num = fd_grad(lambda: float(build(*[Tensor(x.data, dtype=np.float64) for x in tensors]).data), t.data, idx)
            assert t.grad[idx] == pytest.approx(num, rel=tol, abs=tol)


rng = np.random.default_rng(0)


def test_broadcast_add_mul_grads():
    _check(lambda a, b: ((a + b) * b).sum(), rng.normal(size=(3, 4)), rng.normal(size=(4,)))


def test_div_and_power_grads():
    _check(lambda a, b: (a / b + a ** 3).sum(), rng.normal(size=(2, 3)), rng.uniform(1, 2, size=(2, 3)))


def test_exp_log_sigmoid_silu_grads():
    a = rng.uniform(0.5, 2.0, size=(5,))
    _check(lambda x: (nx.exp(x) + nx.log(x) + nx.sigmoid(x) + nx.silu(x)).sum(), a)


def test_matmul_batched_and_folded_grads():
    _check(lambda a, b: (a @ b).sum(), rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5)))
    _check(lambda a, b: ((a @ b) ** 2).mean(), rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 4, 2)))


def test_softmax_layernorm_grads():
    w = rng.normal(size=(3, 6))
    _check(lambda a: (nx.softmax(a) * Tensor(w)).sum(), rng.normal(size=(3, 6)))
    _check(lambda a, s, b: (nx.layer_norm(a, s, b) * Tensor(w)).sum(),
           rng.normal(size=(3, 6)), rng.normal(size=6), rng.normal(size=6))


def test_indexing_concat_stack_grads():
    _check(lambda a, b: (nx.concat([a[1:], b], axis=0) ** 2).sum(), rng.normal(size=(3, 2)), rng.normal(size=(1, 2)))
    _check(lambda a, b: (nx.stack([a, b], axis=1) * Tensor(np.arange(12.0).reshape(3, 2, 2))).sum(),
           rng.normal(size=(3, 2)), rng.normal(size=(3, 2)))


def test_embedding_accumulates_repeated_ids():
    table = Tensor(np.zeros((4, 2)), requires_grad=True, dtype=np.float64)
    nx.embedding(table, np.array([1, 1, 3])).sum().backward()
    np.testing.assert_array_equal(table.grad, [[0, 0], [2, 2], [0, 0], [1, 1]])


def test_clamp_blocks_gradient_outside_range():
    a = Tensor(np.array([-1.0, 0.5, 2.0]), requires_grad=True, dtype=np.float64)
    nx.clamp(a, 0.0, 1.0).sum().backward()
    np.testing.assert_array_equal(a.grad, [0.0, 1.0, 0.0])


def test_backward_requires_scalar():
    a = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        (a * 2).backward()


def test_log_of_nonpositive_raises():
    with pytest.raises(FloatingPointError):
        nx.log(Tensor(np.array([1.0, 0.0])))


def test_matmul_shape_mismatch_message():
    with pytest.raises(ValueError, match="matmul"):
        nx.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))


def test_no_grad_records_nothing():
    a = Tensor(np.ones(2), requires_grad=True)
    with nx.no_grad():
        b = a * 3
    assert not b.requires_grad


def test_shared_subexpression_gradient_sums():
    a = Tensor(np.array([2.0]), requires_grad=True, dtype=np.float64)
    b = a * a
    (b + b).sum().backward()
    assert a.grad[0] == pytest.approx(8.0)


@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, max_side=4),
                  elements=st.floats(-10, 10)))
def test_softmax_rows_sum_to_one(x):
    s = nx.softmax(Tensor(x, dtype=np.float64)).data
    np.testing.assert_allclose(s.sum(-1), 1.0, atol=1e-12)
    assert np.all(s >= 0)


@given(st.sampled_from([(3, 4), (1, 4), (4,), (3, 1), ()]))
def test_unbroadcast_restores_operand_shape(shape):
    a = Tensor(np.ones((3, 4)), requires_grad=True, dtype=np.float64)
    b = Tensor(np.ones(shape), requires_grad=True, dtype=np.float64)
    (a * b).sum().backward()
    assert b.grad.shape == shape
    assert b.grad.sum() == pytest.approx(12.0)
