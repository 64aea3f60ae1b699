import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lorsu import numcore as nc
from lorsu.numcore import ContractError, DimensionError, Tensor


def leaf(a):
    return Tensor(np.asarray(a, dtype=float), requires_grad=True)


def check_op(build, *shapes, seed=0, tol=1e-6, positive=False):
    """Compare backward against central differences for loss = sum(out * w) with a fixed random w."""
    rng = np.random.default_rng(seed)
    xs = [leaf(rng.uniform(0.5, 1.5, s) if positive else rng.normal(size=s)) for s in shapes]
    w = Tensor(rng.normal(size=build(*xs).shape))

    def f():
        return nc.sum(nc.mul(build(*xs), w))

    f().backward()
    for x in xs:
        num = nc.numerical_grad(f, x)
        assert nc.relative_error(x.grad, num) < tol


def test_matmul_identity_and_zero():
    out = nc.matmul(Tensor([[1, 0], [0, 1]]), Tensor([[3, 4], [5, 6]]))
    assert out.data.tolist() == [[3, 4], [5, 6]]
    assert nc.matmul(Tensor([[0.0]]), Tensor([[0.0]])).data.tolist() == [[0.0]]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        nc.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_matmul_gradient_4x3_by_3x5():
    check_op(nc.matmul, (4, 3), (3, 5))


def test_batched_matmul_shared_and_per_batch():
    check_op(nc.matmul, (2, 4, 3), (3, 5))
    check_op(nc.matmul, (2, 4, 3), (2, 3, 5))
    with pytest.raises(DimensionError):
        nc.matmul(Tensor(np.zeros((2, 4, 3))), Tensor(np.zeros((3, 3, 5))))


def test_softmax_rows_examples():
    assert np.allclose(nc.softmax_rows(Tensor([[0.0, 0.0]])).data, [[0.5, 0.5]])
    y = nc.softmax_rows(Tensor([[1000.0, 0.0]])).data
    assert np.all(np.isfinite(y))
    assert abs(y[0, 0] - 1) < 1e-12 and y[0, 1] < 1e-12


def test_softmax_rows_sum_and_gradient():
    x = np.random.default_rng(3).normal(size=(3, 4))
    y = nc.softmax_rows(Tensor(x)).data
    assert np.all(np.abs(y.sum(axis=1) - 1) < 1e-12)
    check_op(nc.softmax_rows, (3, 4))


def test_layernorm_constant_row_is_zero():
    out = nc.layernorm(Tensor(np.full((2, 5), 3.7)))
    assert np.all(out.data == 0.0)


def test_gelu_zero():
    assert nc.gelu(Tensor([0.0])).data[0] == 0.0


def test_cross_entropy_spike_limit():
    # analytic: CE = log(1 + (C-1) e^{-s}) for a spike of height s at the target
    for s in (5.0, 20.0, 40.0):
        logits = np.zeros((1, 4))
        logits[0, 2] = s
        got = nc.cross_entropy(Tensor(logits), [2]).item()
        assert abs(got - np.log1p(3 * np.exp(-s))) < 1e-12
    assert nc.cross_entropy(Tensor([[60.0, 0, 0]]), [0]).item() < 1e-20


@pytest.mark.parametrize("op,shapes,positive", [
    (lambda a, b: nc.add(a, b), [(3, 4), (3, 4)], False),
    (lambda a, b: nc.add(a, b), [(2, 3, 4), (4,)], False),
    (lambda a, b: nc.add(a, b), [(2, 3, 4), (3, 4)], False),
    (lambda a, b: nc.sub(a, b), [(2, 3, 4), (4,)], False),
    (lambda a, b: nc.mul(a, b), [(3, 4), (3, 4)], False),
    (lambda a: nc.scale(a, -2.5), [(3, 4)], False),
    (nc.gelu, [(3, 4)], False),
    (lambda a: nc.layernorm(a), [(3, 6)], False),
    (lambda a, g, b: nc.layernorm(a, g, b), [(2, 3, 6), (6,), (6,)], False),
    (lambda a: nc.log_softmax(a), [(3, 5)], False),
    (nc.l2_normalize, [(3, 4)], False),
    (lambda a: nc.transpose(a), [(3, 4)], False),
    (lambda a: nc.transpose(a, (2, 0, 1)), [(2, 3, 4)], False),
    (lambda a: nc.reshape(a, (4, 3)), [(2, 6)], False),
    (lambda a, b: nc.concat([a, b], axis=1), [(3, 2), (3, 4)], False),
    (lambda a: nc.slice_rows(a, 1, 3), [(4, 3)], False),
    (lambda a: nc.select(a, 1, axis=1), [(2, 3, 4)], False),
    (lambda a: nc.expand(a, 3), [(2, 4)], False),
    (lambda a: nc.sum(a, axis=0), [(3, 4)], False),
    (lambda a: nc.mean(a, axis=1), [(3, 4)], False),
])
def test_op_gradients(op, shapes, positive):
    check_op(op, *shapes, positive=positive)


def test_cross_entropy_gradient():
    rng = np.random.default_rng(1)
    x = leaf(rng.normal(size=(4, 5)))
    targets = [0, 3, 3, 1]
    nc.cross_entropy(x, targets).backward()
    num = nc.numerical_grad(lambda: nc.cross_entropy(x, targets), x)
    assert nc.relative_error(x.grad, num) < 1e-6


@pytest.mark.parametrize("seed", range(20))
def test_composite_gradient_many_seeds(seed):
    # attention-shaped composite touching most ops at once
    def build(z, w, g):
        s = nc.softmax_rows(nc.scale(nc.matmul(z, nc.transpose(w)), 0.5))
        return nc.gelu(nc.layernorm(nc.matmul(s, z), g))
    check_op(build, (5, 4), (5, 4), (4,), seed=seed, tol=1e-4)


def test_backward_sum_and_square():
    x = leaf([1.0, 2.0, 3.0])
    nc.sum(x).backward()
    assert x.grad.tolist() == [1.0, 1.0, 1.0]
    x.zero_grad()
    nc.sum(nc.mul(x, x)).backward()
    assert x.grad.tolist() == [2.0, 4.0, 6.0]


def test_backward_accumulates_until_zeroed():
    x = leaf([1.0, 2.0])
    loss = nc.sum(nc.mul(x, x))
    loss.backward()
    loss.backward()
    assert x.grad.tolist() == [4.0, 8.0]


def test_backward_rejects_non_scalar():
    with pytest.raises(ContractError):
        nc.backward(nc.scale(leaf([1.0, 2.0]), 2.0))


def test_non_grad_inputs_record_no_tape():
    out = nc.add(Tensor([1.0]), Tensor([2.0]))
    assert not out.requires_grad and out._parents == ()


def test_shape_errors():
    with pytest.raises(DimensionError):
        nc.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros(2)))
    with pytest.raises(DimensionError):
        nc.mul(Tensor(np.zeros(3)), Tensor(np.zeros(4)))
    with pytest.raises(DimensionError):
        nc.reshape(Tensor(np.zeros(6)), (4, 2))
    with pytest.raises(DimensionError):
        nc.layernorm(Tensor(np.zeros((2, 3))), Tensor(np.ones(4)))


def test_determinism_bit_identical_grads():
    rng = np.random.default_rng(7)
    z0, w0 = rng.normal(size=(6, 4)), rng.normal(size=(3, 4))
    grads = []
    for _ in range(2):
        z, w = leaf(z0), leaf(w0)
        loss = nc.sum(nc.gelu(nc.matmul(nc.softmax_rows(nc.matmul(z, nc.transpose(w))), w)))
        loss.backward()
        grads.append((z.grad.tobytes(), w.grad.tobytes()))
    assert grads[0] == grads[1]


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(1, 8), st.floats(-50, 50), st.integers(0, 10_000))
def test_softmax_and_layernorm_invariants(n, m, shift, seed):
    x = np.random.default_rng(seed).normal(size=(n, m)) * 5 + shift
    assert np.all(np.abs(nc.softmax_rows(Tensor(x)).data.sum(axis=1) - 1) < 1e-12)
    y = nc.layernorm(Tensor(x)).data
    assert np.all(np.abs(y.mean(axis=1)) < 1e-10)
