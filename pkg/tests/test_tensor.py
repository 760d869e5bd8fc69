import numpy as np
import pytest
from hypothesis import given, strategies as st

from fedslice import tensor as T
from fedslice.errors import ContractError, DimensionError
from fedslice.tensor import (PrecisionMode, Rng, Tensor, backward, cross_entropy, gelu,
                             layernorm, precision, quantize_half, softmax)


# --- independent oracles ------------------------------------------------------

def matmul_oracle(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    m, k = a.shape
    k2, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for l in range(k):
                out[i, j] += a[i, l] * b[l, j]
    return out


def finite_diff(f, leaves: list[Tensor], eps: float = 1e-4) -> list[np.ndarray]:
    grads = []
    for leaf in leaves:
        g = np.zeros_like(leaf.data)
        flat = leaf.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = f().item()
            flat[i] = orig - eps
            lo = f().item()
            flat[i] = orig
            gflat[i] = (hi - lo) / (2 * eps)
        grads.append(g)
    return grads


# --- matmul -------------------------------------------------------------------

def test_matmul_identity():
    out = Tensor(np.eye(2)) @ Tensor([[5.0, 6.0], [7.0, 8.0]])
    assert np.array_equal(out.data, [[5.0, 6.0], [7.0, 8.0]])


def test_matmul_hand():
    out = Tensor([[1.0, 2.0]]) @ Tensor([[3.0], [4.0]])
    assert np.array_equal(out.data, [[11.0]])


def test_matmul_against_triple_loop():
    rng = np.random.default_rng(7)
    a, b = rng.normal(size=(4, 4)), rng.normal(size=(4, 4))
    got = (Tensor(a) @ Tensor(b)).data
    want = matmul_oracle(a, b)
    assert np.max(np.abs(got - want) / (np.abs(want) + 1e-300)) < 1e-12


def test_matmul_shape_error():
    with pytest.raises(DimensionError):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))


# --- layernorm ----------------------------------------------------------------

def test_layernorm_constant_row():
    out = layernorm(Tensor([[1.0, 1.0, 1.0]]), Tensor(np.ones(3)), Tensor(np.zeros(3)))
    assert np.allclose(out.data, 0.0)


def test_layernorm_symmetry():
    out = layernorm(Tensor([[-1.0, 1.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-12)
    assert np.allclose(out.data, [[-1.0, 1.0]], atol=1e-6)


def test_layernorm_moments():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(5, 16)) * 3 + 1
    out = layernorm(Tensor(x), Tensor(np.ones(16)), Tensor(np.zeros(16)), eps=1e-12)
    assert np.max(np.abs(out.data.mean(axis=1))) < 1e-10
    assert np.max(np.abs(out.data.var(axis=1) - 1.0)) < 1e-6


def test_layernorm_empty_row():
    with pytest.raises(DimensionError):
        layernorm(Tensor(np.ones((2, 0))), Tensor(np.ones(0)), Tensor(np.zeros(0)))


# --- softmax / gelu / cross-entropy --------------------------------------------

def test_softmax_symmetry():
    assert np.allclose(softmax(Tensor([[0.0, 0.0]])).data, [[0.5, 0.5]])


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(0)
    s = softmax(Tensor(rng.normal(size=(6, 9)) * 4)).data
    assert np.allclose(s.sum(axis=1), 1.0)
    assert (s >= 0).all()


def test_cross_entropy_dominant_class_near_zero():
    logits = Tensor([[30.0, 0.0, 0.0]])
    assert cross_entropy(logits, [0]).item() < 1e-8


def test_cross_entropy_nonnegative_and_label_check():
    rng = np.random.default_rng(1)
    assert cross_entropy(Tensor(rng.normal(size=(4, 5))), [0, 1, 2, 3]).item() >= 0
    with pytest.raises(ContractError):
        cross_entropy(Tensor(np.zeros((1, 3))), [3])


def test_cross_entropy_grad_matches_finite_difference():
    rng = np.random.default_rng(5)
    logits = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    labels = [0, 2, 1]
    loss = cross_entropy(logits, labels)
    backward(loss)
    fd = finite_diff(lambda: cross_entropy(logits, labels), [logits])[0]
    assert np.max(np.abs(logits.grad - fd)) < 1e-5


# --- backward ------------------------------------------------------------------

def test_backward_sum_gives_ones():
    w = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    backward(w.sum())
    assert np.array_equal(w.grad, [1.0, 1.0, 1.0])


def test_backward_half_square():
    w = Tensor([1.0, -2.0, 0.5], requires_grad=True)
    backward((w * w).sum() * 0.5)
    assert np.allclose(w.grad, w.data)


def test_backward_requires_scalar():
    w = Tensor([[1.0, 2.0]], requires_grad=True)
    with pytest.raises(ContractError):
        backward(w + w)


def test_backward_leaves_non_grad_tensors_untouched():
    w = Tensor([1.0, 2.0], requires_grad=True)
    frozen = Tensor([3.0, 4.0])
    backward((w * frozen).sum())
    assert frozen.grad is None
    assert np.array_equal(w.grad, frozen.data)


def test_softmax_grad_matches_finite_difference():
    rng = np.random.default_rng(13)
    x = Tensor(rng.normal(size=(2, 5)) * 2, requires_grad=True)
    w = Tensor(rng.normal(size=(5, 3)))

    def f():
        return (softmax(x) @ w).sum()

    backward(f())
    fd = finite_diff(f, [x])[0]
    assert np.max(np.abs(x.grad - fd)) < 1e-5


def test_mlp_grads_match_finite_difference():
    rng = np.random.default_rng(11)
    x = Tensor(rng.normal(size=(2, 3)))
    w1 = Tensor(rng.normal(size=(4, 3)) * 0.5, requires_grad=True)
    b1 = Tensor(rng.normal(size=4) * 0.1, requires_grad=True)
    w2 = Tensor(rng.normal(size=(3, 4)) * 0.5, requires_grad=True)
    g = Tensor(np.ones(4), requires_grad=True)
    be = Tensor(np.zeros(4), requires_grad=True)
    labels = [0, 2]

    def f():
        h = layernorm((x @ w1.T) + b1, g, be)
        return cross_entropy(gelu(h) @ w2.T, labels)

    loss = f()
    backward(loss)
    leaves = [w1, b1, w2, g, be]
    for leaf, fd in zip(leaves, finite_diff(f, leaves)):
        assert np.max(np.abs(leaf.grad - fd)) < 1e-5


# --- precision -----------------------------------------------------------------

def test_exact_mode_roundtrips_bit_identically():
    rng = np.random.default_rng(2)
    a, b = rng.normal(size=(3, 3)), rng.normal(size=(3, 3))
    with precision(PrecisionMode.EXACT):
        got = (Tensor(a) @ Tensor(b)).data
    assert np.array_equal(got, a @ b)


@given(st.floats(allow_nan=False, allow_infinity=False, width=64))
def test_quantize_half_idempotent(x):
    arr = np.array([x])
    q1 = quantize_half(arr)
    assert np.array_equal(quantize_half(q1), q1)


@given(st.floats(min_value=-1e300, max_value=1e300, allow_nan=False))
def test_quantize_half_relative_bound(x):
    q = quantize_half(np.array([x]))[0]
    assert abs(q - x) <= 2.0 ** -11 * abs(x)


def test_simhalf_applies_per_op():
    a = np.array([[1.0001234567, 2.0001234567]])
    with precision(PrecisionMode.SIM_HALF):
        out = Tensor(a) + Tensor(np.zeros((1, 2)))
    assert np.array_equal(out.data, quantize_half(a))
    out_exact = (Tensor(a) + Tensor(np.zeros((1, 2)))).data
    assert np.array_equal(out_exact, a)


# --- rng -----------------------------------------------------------------------

def test_rng_same_seed_stream_repeats():
    a = Rng(42, "x").uniform(-1, 1, (4, 4))
    b = Rng(42, "x").uniform(-1, 1, (4, 4))
    assert np.array_equal(a, b)


def test_rng_streams_differ():
    a = Rng(42).stream("one").uniform(-1, 1, (8,))
    b = Rng(42).stream("two").uniform(-1, 1, (8,))
    assert not np.array_equal(a, b)


def test_rng_seed_changes_sequence():
    a = Rng(1, "s").normal(1.0, (8,))
    b = Rng(2, "s").normal(1.0, (8,))
    assert not np.array_equal(a, b)


# --- structural ops --------------------------------------------------------------

def test_gather_scatter_roundtrip_grads():
    x = Tensor(np.arange(12.0).reshape(3, 4), requires_grad=True)
    cols = T.gather_cols(x, [2, 0])
    out = T.scatter_cols([(cols, [0, 1])], 2)
    backward(out.sum())
    assert np.array_equal(x.grad, [[1, 0, 1, 0], [1, 0, 1, 0], [1, 0, 1, 0]])


def test_concat_rows_backward_splits():
    a = Tensor(np.ones((2, 3)), requires_grad=True)
    b = Tensor(np.ones((1, 3)), requires_grad=True)
    out = T.concat_rows([a, b])
    assert out.shape == (3, 3)
    backward((out * 2.0).sum())
    assert np.allclose(a.grad, 2.0) and np.allclose(b.grad, 2.0)
