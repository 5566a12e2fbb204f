import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from capsem import tensor as T
from capsem.layers import ConvParams, conv2d, elu
from capsem.tensor import ContractError, ShapeError, Tensor, backward, grad_check


def test_add_and_mul_examples():
    assert np.array_equal(T.elementwise("add", Tensor([1.0, 2.0]), Tensor([3.0, 4.0])).data, [4.0, 6.0])
    x = Tensor([1.5, -2.0, 3.0], requires_grad=True)
    y = T.elementwise("mul", x, 0.0)
    assert np.array_equal(y.data, np.zeros(3))
    backward(y.sum())
    assert np.array_equal(x.grad, np.zeros(3))


def test_elementwise_dispatch_rejects_unknown_kind():
    with pytest.raises(ValueError):
        T.elementwise("pow", Tensor([1.0]), 2.0)


def test_shape_mismatch_is_descriptive():
    with pytest.raises(ShapeError, match=r"\(2, 4\).*\(4,\)"):
        T.mul(Tensor(np.ones((2, 4))), Tensor(np.ones(4)))
    # scalars broadcast
    assert T.add(Tensor(np.ones((2, 3))), Tensor(2.0)).shape == (2, 3)


def test_tanh_gradient_matches_finite_differences(rng):
    for _ in range(100):
        x = rng.normal(size=5)
        assert grad_check(lambda t: T.tanh(t).sum(), x) <= 1e-6


def test_matmul_identity_and_small_case():
    x = Tensor(np.arange(6.0).reshape(3, 2))
    assert np.array_equal(T.matmul(Tensor(np.eye(3)), x).data, x.data)
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal((a @ Tensor(np.eye(2))).data, [[1.0, 2.0], [3.0, 4.0]])
    with pytest.raises(ShapeError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_gradient(rng):
    b = Tensor(rng.normal(size=(4, 3)))
    for _ in range(20):
        assert grad_check(lambda a: T.matmul(a, b).sum(), rng.normal(size=(2, 4))) <= 1e-6
    a = Tensor(rng.normal(size=(2, 4)))
    assert grad_check(lambda bb: T.matmul(a, bb).sum(), b.data) <= 1e-6


def test_reduce_examples():
    assert T.reduce("sum", Tensor([1.0, 2.0, 3.0])).item() == 6.0
    assert T.reduce("norm2", Tensor([3.0, 4.0])).item() == 5.0
    x = Tensor(np.ones(4), requires_grad=True)
    backward(T.reduce("mean", x))
    assert np.array_equal(x.grad, np.full(4, 0.25))
    with pytest.raises(ShapeError):
        T.reduce("sum", Tensor(np.ones((2, 2))), axis=2)


def test_norm2_gradient_at_zero_is_zero():
    x = Tensor(np.zeros(3), requires_grad=True)
    backward(T.norm2(x))
    assert np.array_equal(x.grad, np.zeros(3))


def test_backward_examples():
    x = Tensor(np.array([0.3, -1.0, 2.0]), requires_grad=True)
    backward(x.sum())
    assert np.array_equal(x.grad, np.ones(3))
    x = Tensor([3.0, 4.0], requires_grad=True)
    backward(T.square(T.norm2(x)))
    np.testing.assert_allclose(x.grad, [6.0, 8.0], rtol=1e-14)


def test_backward_contract_errors():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        backward(x * 2.0)
    with pytest.raises(ContractError):
        backward(Tensor(1.0))


def test_composite_conv_elu_sum_gradient(rng):
    p = ConvParams.init(2, 3, 3, 1, 1, rng)
    x0 = rng.normal(size=(2, 5, 5))

    def loss_x(x):
        return elu(conv2d(x, p)).sum()

    assert grad_check(loss_x, x0) <= 1e-4
    for name in ("weight", "bias"):
        orig = getattr(p, name)

        def loss_p(t, name=name):
            q = ConvParams(t if name == "weight" else p.weight, t if name == "bias" else p.bias, 1, 1)
            return elu(conv2d(Tensor(x0), q)).sum()

        assert grad_check(loss_p, orig.data) <= 1e-4


def test_grad_check_on_sum_is_exact(rng):
    assert grad_check(lambda t: t.sum(), rng.normal(size=7)) <= 1e-10


def test_grad_check_grows_with_large_eps(rng):
    x = rng.normal(size=6)
    f = lambda t: T.exp(t).sum()  # noqa: E731
    small, large = grad_check(f, x, eps=1e-5), grad_check(f, x, eps=1e-1)
    assert large > 100 * small
    assert large > 1e-4


# ---------------------------------------------------------------------------
# properties
# ---------------------------------------------------------------------------

UNARY = {
    "exp": lambda t: T.exp(t).sum(),
    "log": lambda t: T.log(T.add(T.square(t), Tensor(1.0))).sum(),
    "tanh": lambda t: T.tanh(t).sum(),
    "sigmoid": lambda t: T.sigmoid(t).sum(),
    "square": lambda t: T.square(t).sum(),
    "scale": lambda t: T.scale(t, -1.7).sum(),
    "mean": lambda t: T.square(T.mean(t, axis=1)).sum(),
    "norm2": lambda t: T.norm2(t, axis=0).sum(),
    "reshape": lambda t: (T.reshape(t, (4, 3)) * Tensor(np.arange(12.0).reshape(4, 3))).sum(),
    "transpose": lambda t: (T.transpose(t) * Tensor(np.arange(12.0).reshape(4, 3))).sum(),
    "getitem": lambda t: T.square(t[[0, 2, 0], 1:]).sum(),
    "expand": lambda t: (T.expand(t[:, :1], (3, 4)) * Tensor(np.arange(12.0).reshape(3, 4))).sum(),
    "einsum": lambda t: T.einsum("ij,ij->i", t, t).sum(),
}


def _binary(kind):
    other = Tensor(np.linspace(0.5, 2.0, 12).reshape(3, 4))
    fns = {
        "add": lambda t: T.square(T.add(t, other)).sum(),
        "sub": lambda t: T.square(T.sub(other, t)).sum(),
        "mul": lambda t: T.mul(t, other).sum(),
        "div": lambda t: T.div(other, T.add(T.square(t), Tensor(1.0))).sum(),
        "matmul": lambda t: T.tanh(T.matmul(t, T.transpose(other))).sum(),
        "concat": lambda t: T.square(T.concat([t, other], axis=1)).sum(),
        "stack": lambda t: T.tanh(T.stack([t, other], axis=0)).sum(),
    }
    return fns[kind]


@pytest.mark.parametrize("kind", sorted(UNARY) + ["add", "sub", "mul", "div", "matmul", "concat", "stack"])
def test_every_primitive_matches_finite_differences(kind):
    rng = np.random.default_rng(hash(kind) % 2**32)
    f = UNARY.get(kind) or _binary(kind)
    worst = max(grad_check(f, rng.normal(size=(3, 4))) for _ in range(100))
    assert worst <= 1e-4


def test_tape_is_topological_and_visits_once(rng):
    x = Tensor(rng.normal(size=3), requires_grad=True)
    y = T.tanh(x)
    z = (y * y + y).sum()
    tape = T.Tape.from_root(z)
    pos = {id(n): i for i, n in enumerate(tape.nodes)}
    assert len(pos) == len(tape.nodes)
    for n in tape.nodes:
        for p in n._parents:
            if p.requires_grad:
                assert pos[id(p)] < pos[id(n)]


def _grads(seed):
    rng = np.random.default_rng(seed)
    w = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    x = Tensor(rng.normal(size=(2, 4)))
    backward(T.tanh(x @ w).sum())
    return w.grad


def test_replay_is_deterministic():
    assert np.array_equal(_grads(5), _grads(5))


@given(arrays(np.float64, (3, 2), elements=st.floats(-3, 3)))
def test_backward_twice_doubles_grads(x0):
    x = Tensor(x0, requires_grad=True)
    loss = T.exp(x).sum()
    backward(loss)
    once = x.grad.copy()
    backward(loss)
    np.testing.assert_array_equal(x.grad, 2 * once)
