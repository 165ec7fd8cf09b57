import numpy as np
import pytest

from msa2net import tensor as T
from msa2net.errors import ContractError, UsageError
from msa2net.tensor import Tensor, backward, count_macs, no_grad, precision

from oracles import gradcheck_fn


def test_sum_gives_ones():
    x = Tensor(np.random.default_rng(0).standard_normal((2, 3, 4, 4)), requires_grad=True)
    backward(x.sum())
    np.testing.assert_array_equal(x.grad, np.ones_like(x.data))


def test_fanout_accumulates():
    x = Tensor(np.array([1.5, -2.0]), requires_grad=True)
    y = x * x + x * 3.0        # dy/dx = 2x + 3
    backward(y.sum())
    np.testing.assert_allclose(x.grad, 2 * x.data + 3)


def test_leaf_grads_accumulate_across_calls():
    x = Tensor(np.ones(3), requires_grad=True)
    backward((x * 2.0).sum())
    backward((x * 2.0).sum())
    np.testing.assert_array_equal(x.grad, [4.0, 4.0, 4.0])
    x.zero_grad()
    assert x.grad is None


def test_backward_requires_scalar_and_tape():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(UsageError):
        backward(x * 2.0)
    with pytest.raises(UsageError):
        backward(Tensor(np.ones(1)))


def test_topological_order_visits_each_node_once():
    x = Tensor(np.array(2.0), requires_grad=True)
    y = x
    for _ in range(50):
        y = y + y * 0.5     # diamond chain
    order = T._topo(y)
    ids = [id(n) for n in order]
    assert len(ids) == len(set(ids))
    pos = {id(n): i for i, n in enumerate(order)}
    for node in order:
        for parent in node._parents:
            assert pos[id(parent)] < pos[id(node)]
    backward(y)
    np.testing.assert_allclose(x.grad, 1.5 ** 50, rtol=1e-12)


def test_deep_chain_no_recursion_limit():
    x = Tensor(np.array(1.0), requires_grad=True)
    y = x
    for _ in range(5000):
        y = y + 0.0
    backward(y)
    assert x.grad == 1.0


def test_no_grad_builds_no_tape():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = x * 2.0
    assert not y.requires_grad
    with pytest.raises(UsageError):
        backward(y.sum())


def test_retain_grad_on_intermediate():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    h = (x * 3.0).retain_grad()
    backward((h * h).sum())
    np.testing.assert_allclose(h.grad, 2 * h.data)
    np.testing.assert_allclose(x.grad, 18 * x.data)


def test_precision_context():
    assert T.default_dtype() == np.float32
    with precision("double"):
        assert T.default_dtype() == np.float64
    assert T.default_dtype() == np.float32
    with pytest.raises(ValueError):
        with precision("half"):
            pass


def test_scalar_ops_keep_dtype():
    x = Tensor(np.ones(3, dtype=np.float32))
    assert (x * 0.1).dtype == np.float32
    assert (x + 1e-3).dtype == np.float32
    assert (1.0 - x).dtype == np.float32


def test_matmul_batch_broadcast_grad():
    rng = np.random.default_rng(1)
    err = gradcheck_fn(lambda a, b: T.matmul(a, b),
                       [rng.standard_normal((2, 3, 4, 5)), rng.standard_normal((5, 2))])
    assert err <= 1e-6


def test_matmul_shape_mismatch():
    with pytest.raises(ContractError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))


@pytest.mark.parametrize("name,fn", [
    ("add_broadcast", lambda a, b: a + b.reshape(1, 3, 1, 1)),
    ("sub", lambda a, b: a - b.reshape(1, 3, 1, 1)),
    ("mul", lambda a, b: a * b.reshape(1, 3, 1, 1)),
    ("div", lambda a, b: a / (b.reshape(1, 3, 1, 1) * b.reshape(1, 3, 1, 1) + 1.0)),
    ("exp_log", lambda a, b: T.log(T.exp(a) + 1.0) * b.sum()),
    ("square", lambda a, b: T.square(a) + b.sum()),
    ("transpose", lambda a, b: T.transpose(a, (0, 2, 3, 1)) * b),
    ("concat_split", lambda a, b: T.split(T.concat([a, a * 2.0], axis=1), (4, 2), axis=1)[1] + b.sum()),
    ("slice", lambda a, b: T.take_slice(a, (slice(None), slice(1, 3))) * b.reshape(1, 2, 1, 1)),
    ("mean_axes", lambda a, b: a.mean(axis=(2, 3), keepdims=True) * b.reshape(1, 3, 1, 1)),
    ("sum_axis", lambda a, b: a.sum(axis=1) * b.sum()),
])
def test_elementary_grads(name, fn):
    rng = np.random.default_rng(hash(name) % 2 ** 32)
    a = rng.standard_normal((2, 3, 3, 3))
    b = rng.standard_normal((3,)) if name != "slice" else rng.standard_normal((2,))
    assert gradcheck_fn(fn, [a, b]) <= 1e-3


def test_mac_counter_nested():
    a = Tensor(np.ones((4, 5)))
    b = Tensor(np.ones((5, 6)))
    with count_macs() as outer:
        with count_macs() as inner:
            T.matmul(a, b)
        a * 2.0
    assert inner.total == 4 * 5 * 6
    assert outer.total == 4 * 5 * 6 + 20


def test_shape_only_ops_free():
    x = Tensor(np.ones((2, 3, 4, 4)))
    with count_macs() as c:
        x.reshape(2, 3, 16)
        T.transpose(x, (0, 1, 3, 2))
        T.split(x, (1, 2))
    assert c.total == 0
