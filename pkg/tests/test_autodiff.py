"""Gradient and semantics checks for the autodiff engine.

Every differentiable op is checked against the central finite-difference
oracle (h = 1e-3) over 20 seeds, on float64 inputs so the oracle itself is
accurate.  The per-op tolerance is 1e-4 norm-relative error.
"""

import numpy as np
import pytest
from conftest import numeric_grad, rel_err

from jointdiff import autodiff as ad
from jointdiff.autodiff import Parameter, Tensor
from jointdiff.errors import ConfigError, ShapeError

SEEDS = range(20)
OP_TOL = 1e-4


def check_grads(build_loss, arrays):
    """Assert analytic gradients of build_loss() match finite differences
    for every array in `arrays` (list of float64 ndarrays wrapped fresh on
    each evaluation)."""
    params = [Parameter(a) for a in arrays]
    loss = build_loss(*params)
    loss.backward()
    for p, raw in zip(params, arrays):
        fd = numeric_grad(lambda: float(build_loss(*[Parameter(a) for a in arrays]).data), raw)
        assert rel_err(p.grad, fd) < OP_TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_matmul_2d_gradients(seed):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((4, 5))
    b = rng.standard_normal((5, 3))
    w = rng.standard_normal((4, 3))
    check_grads(lambda ta, tb: (ad.matmul(ta, tb) * Tensor(w)).sum(), [a, b])


@pytest.mark.parametrize("seed", SEEDS)
def test_matmul_batched_gradients(seed):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((3, 4, 5))
    b = rng.standard_normal((3, 5, 2))
    w = rng.standard_normal((3, 4, 2))
    check_grads(lambda ta, tb: (ad.matmul(ta, tb) * Tensor(w)).sum(), [a, b])


@pytest.mark.parametrize("seed", SEEDS)
def test_matmul_stacked_against_2d_gradients(seed):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((2, 3, 4))
    b = rng.standard_normal((4, 6))
    w = rng.standard_normal((2, 3, 6))
    check_grads(lambda ta, tb: (ad.matmul(ta, tb) * Tensor(w)).sum(), [a, b])


def test_matmul_shape_error_names_both_shapes():
    a = Tensor(np.zeros((4, 5)))
    b = Tensor(np.zeros((4, 3)))
    with pytest.raises(ShapeError) as err:
        ad.matmul(a, b)
    assert "(4, 5)" in str(err.value) and "(4, 3)" in str(err.value)


@pytest.mark.parametrize("seed", SEEDS)
def test_elementwise_and_broadcast_gradients(seed):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((3, 1, 4))
    b = rng.standard_normal((5, 4))
    w = rng.standard_normal((3, 5, 4))

    def loss(ta, tb):
        y = (ta * tb + ta - tb) * Tensor(w)
        return y.mean()

    check_grads(loss, [a, b])


@pytest.mark.parametrize("seed", SEEDS)
def test_silu_gradients(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((4, 7)) * 2.0
    w = rng.standard_normal((4, 7))
    check_grads(lambda tx: (ad.silu(tx) * Tensor(w)).sum(), [x])


@pytest.mark.parametrize("seed", SEEDS)
def test_softmax_gradients(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((3, 6)) * 3.0
    w = rng.standard_normal((3, 6))
    check_grads(lambda tx: (ad.softmax_last_dim(tx) * Tensor(w)).sum(), [x])


def test_softmax_uniform_rows_exact():
    out = ad.softmax_last_dim(Tensor(np.zeros((2, 4), dtype=np.float32)))
    assert np.all(out.data == 0.25)


@pytest.mark.parametrize("seed", SEEDS)
def test_softmax_rows_sum_to_one(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((5, 9)).astype(np.float32) * 10.0
    out = ad.softmax_last_dim(Tensor(x))
    assert np.allclose(out.data.sum(axis=-1), 1.0, atol=1e-6)


def test_softmax_translation_invariance():
    # Integer logits and an integer shift stay exactly representable, so
    # max-subtraction makes the two outputs bit-identical.
    x = np.array([[1.0, 2.0, 3.0, -4.0], [0.0, 5.0, -2.0, 1.0]], dtype=np.float32)
    a = ad.softmax_last_dim(Tensor(x))
    b = ad.softmax_last_dim(Tensor(x + 7.0))
    assert np.array_equal(a.data, b.data)


def test_softmax_additive_mask_zeroes_positions():
    x = np.zeros((1, 4), dtype=np.float32)
    mask = np.array([[0.0, -1e9, 0.0, -1e9]], dtype=np.float32)
    out = ad.softmax_last_dim(Tensor(x), additive_mask=mask)
    assert np.allclose(out.data, [[0.5, 0.0, 0.5, 0.0]])
    assert out.data[0, 1] == 0.0 and out.data[0, 3] == 0.0


@pytest.mark.parametrize("seed", SEEDS)
def test_group_norm_gradients(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 4, 3, 3))
    gamma = rng.standard_normal(4) * 0.5 + 1.0
    beta = rng.standard_normal(4) * 0.1
    check_grads(lambda tx, tg, tb: (ad.group_norm(tx, tg, tb, groups=2) * 1.0).mean(),
                [x, gamma, beta])


@pytest.mark.parametrize("seed", SEEDS)
def test_group_norm_normalizes_groups(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((3, 8, 5, 5)).astype(np.float32) * 4.0 + 2.0
    out = ad.group_norm(Tensor(x), Tensor(np.ones(8, dtype=np.float32)),
                        Tensor(np.zeros(8, dtype=np.float32)), groups=4)
    grouped = out.data.reshape(3, 4, -1)
    assert np.allclose(grouped.mean(axis=2), 0.0, atol=1e-5)
    assert np.allclose(grouped.var(axis=2), 1.0, atol=1e-3)


def test_group_norm_constant_input_gives_zeros():
    x = np.full((2, 4, 3, 3), 7.5, dtype=np.float32)
    out = ad.group_norm(Tensor(x), Tensor(np.ones(4, dtype=np.float32)),
                        Tensor(np.zeros(4, dtype=np.float32)), groups=2)
    assert np.all(out.data == 0.0)


def test_group_norm_indivisible_groups_rejected():
    x = Tensor(np.zeros((1, 6, 2, 2), dtype=np.float32))
    with pytest.raises(ConfigError):
        ad.group_norm(x, Tensor(np.ones(6)), Tensor(np.zeros(6)), groups=4)


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("stride", [1, 2])
def test_conv2d_gradients(seed, stride):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, 2, 4, 4))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    size = 4 if stride == 1 else 2
    proj = rng.standard_normal((1, 3, size, size))
    check_grads(lambda tx, tw, tb: (ad.conv2d(tx, tw, tb, stride=stride) * Tensor(proj)).sum(),
                [x, w, b])


def test_conv2d_output_shapes():
    x = Tensor(np.zeros((2, 3, 8, 8), dtype=np.float32))
    w = Tensor(np.zeros((5, 3, 3, 3), dtype=np.float32))
    b = Tensor(np.zeros(5, dtype=np.float32))
    assert ad.conv2d(x, w, b, stride=1).shape == (2, 5, 8, 8)
    assert ad.conv2d(x, w, b, stride=2).shape == (2, 5, 4, 4)


def test_conv2d_delta_kernel_is_identity():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 3, 6, 6)).astype(np.float32)
    w = np.zeros((3, 3, 3, 3), dtype=np.float32)
    for c in range(3):
        w[c, c, 1, 1] = 1.0
    out = ad.conv2d(Tensor(x), Tensor(w), Tensor(np.zeros(3, dtype=np.float32)))
    assert np.array_equal(out.data, x)


def test_conv2d_channel_mismatch_rejected():
    x = Tensor(np.zeros((1, 2, 4, 4)))
    w = Tensor(np.zeros((3, 5, 3, 3)))
    with pytest.raises(ShapeError):
        ad.conv2d(x, w, Tensor(np.zeros(3)))


@pytest.mark.parametrize("seed", SEEDS)
def test_upsample_gradients(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 3, 3, 4))
    w = rng.standard_normal((2, 3, 6, 8))
    check_grads(lambda tx: (ad.upsample_nearest2x(tx) * Tensor(w)).sum(), [x])


def test_upsample_duplicates_pixels():
    x = np.arange(4, dtype=np.float32).reshape(1, 1, 2, 2)
    out = ad.upsample_nearest2x(Tensor(x)).data
    assert out.shape == (1, 1, 4, 4)
    assert np.array_equal(out[0, 0], np.array([
        [0, 0, 1, 1], [0, 0, 1, 1], [2, 2, 3, 3], [2, 2, 3, 3]], dtype=np.float32))


@pytest.mark.parametrize("seed", SEEDS)
def test_concat_gradients(seed):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((2, 3, 2, 2))
    b = rng.standard_normal((2, 5, 2, 2))
    w = rng.standard_normal((2, 8, 2, 2))
    check_grads(lambda ta, tb: (ad.concat([ta, tb], axis=1) * Tensor(w)).sum(), [a, b])


@pytest.mark.parametrize("seed", SEEDS)
def test_embedding_gradients_with_repeated_ids(seed):
    rng = np.random.default_rng(seed)
    table = rng.standard_normal((6, 3))
    ids = np.array([[0, 2, 2], [5, 0, 1]])
    w = rng.standard_normal((2, 3, 3))
    check_grads(lambda tt: (ad.embedding(tt, ids) * Tensor(w)).sum(), [table])


def test_embedding_id_range_checked():
    table = Tensor(np.zeros((4, 2)))
    with pytest.raises(ShapeError):
        ad.embedding(table, np.array([0, 4]))


@pytest.mark.parametrize("seed", SEEDS)
def test_reshape_transpose_composition_gradients(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 3, 4))
    w = rng.standard_normal((4, 6))

    def loss(tx):
        y = tx.transpose(2, 0, 1).reshape(4, 6)
        return (y * Tensor(w)).sum()

    check_grads(loss, [x])


def test_backward_requires_scalar():
    x = Tensor(np.zeros((2, 2)), requires_grad=True)
    with pytest.raises(ShapeError):
        (x * 2.0).backward()


def test_unreachable_parameter_keeps_zero_gradient():
    used = Parameter(np.ones(3))
    unused = Parameter(np.ones(3))
    (used * 2.0).sum().backward()
    assert np.array_equal(unused.grad, np.zeros(3))
    assert np.array_equal(used.grad, np.full(3, 2.0, dtype=used.dtype))


def test_gradients_accumulate_across_backward_calls():
    p = Parameter(np.array([1.0, 2.0]))
    (p * p).sum().backward()
    first = p.grad.copy()
    (p * p).sum().backward()
    assert np.allclose(p.grad, 2.0 * first)
    p.zero_grad()
    assert np.all(p.grad == 0.0)


def test_constants_do_not_collect_gradients():
    c = Tensor(np.ones(3))
    p = Parameter(np.ones(3))
    (c * p).sum().backward()
    assert c.grad is None


def test_tensor_defaults_to_float32_and_preserves_float64():
    assert Tensor([1, 2, 3]).dtype == np.float32
    assert Tensor(np.zeros(2, dtype=np.float64)).dtype == np.float64


def test_sum_accumulates_in_float64():
    # A float32 running accumulator sitting at 1e8 absorbs added ones (the
    # spacing there is 8).  With float64 accumulation the exact total comes
    # back, and it is float32-representable.
    x = np.concatenate([[1e8], np.ones(2**20)]).astype(np.float32)
    assert float(Tensor(x).sum().data) == 1e8 + 2.0**20


def test_diamond_graph_gradient():
    # y = a*a + a enters the sum twice through different paths.
    a = Parameter(np.array([3.0]))
    b = a * a
    (b + a).sum().backward()
    assert np.allclose(a.grad, 2.0 * 3.0 + 1.0)
