import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from basis_selection.layer import (
    DenseLinear,
    FactorizedLinear,
    finalize,
    prune_by_mass,
    select_by_mass,
)
from basis_selection.linalg import ShapeError


def random_layer(rng, n, m, extra, rank=None):
    w = rng.normal(size=(n, m))
    layer = FactorizedLinear.from_dense(w, rng.normal(size=n), extra, seed=int(rng.integers(1 << 30)))
    # perturb everything learnable so the augmentation term is active
    layer.weights += rng.normal(scale=0.3, size=layer.rank)
    layer.extra_u[:] = rng.normal(size=layer.extra_u.shape)
    if rank is not None:
        layer.keep(np.arange(rank))
    return layer


def naive_materialize(layer):
    n, m = layer.out_features, layer.in_features
    out = np.zeros((n, m))
    for a in range(n):
        for b in range(m):
            acc = 0.0
            for i in range(layer.rank):
                acc += layer.weights[i] * layer.base_u[a, i] * layer.base_v[b, i]
            for j in range(layer.additional_dim):
                acc += layer.extra_u[a, j] * layer.extra_v[b, j]
            out[a, b] = acc
    return out


def half_sq_loss(layer, x):
    return 0.5 * np.sum(layer.forward(x) ** 2)


def central_difference(layer, x, array, h=1e-5):
    """Finite-difference gradient of 0.5*||y||^2 w.r.t. every entry of ``array`` (mutated in place)."""
    grad = np.zeros_like(array)
    for idx in np.ndindex(array.shape):
        keep = array[idx]
        array[idx] = keep + h
        up = half_sq_loss(layer, x)
        array[idx] = keep - h
        down = half_sq_loss(layer, x)
        array[idx] = keep
        grad[idx] = (up - down) / (2 * h)
    return grad


def assert_close_rel(analytic, numeric, rtol=1e-4):
    scale = max(1.0, np.max(np.abs(numeric)))
    assert np.max(np.abs(analytic - numeric), initial=0.0) <= rtol * scale


# --- construction -----------------------------------------------------------

def test_from_dense_diagonal():
    layer = FactorizedLinear.from_dense(np.diag([3.0, 2.0, 1.0]), np.zeros(3), 0)
    np.testing.assert_allclose(layer.weights, [3, 2, 1])
    np.testing.assert_allclose(layer.materialize(), np.diag([3.0, 2.0, 1.0]), atol=1e-15)


def test_from_dense_reconstruction_random():
    w = np.random.default_rng(0).normal(size=(32, 16))
    layer = FactorizedLinear.from_dense(w, np.zeros(32), 0)
    assert np.linalg.norm(layer.materialize() - w) <= 1e-10 * np.linalg.norm(w)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_zero_init_augmentation_matches_dense(seed):
    rng = np.random.default_rng(10)
    w, b = rng.normal(size=(7, 5)), rng.normal(size=7)
    x = rng.normal(size=(5, 4))
    layer = FactorizedLinear.from_dense(w, b, additional_dim=4, seed=seed)
    assert np.all(layer.extra_u == 0)
    ref = w @ x + b[:, None]
    np.testing.assert_allclose(layer.forward(x), ref, rtol=1e-10, atol=1e-10)


def test_outputs_independent_of_seed_at_init():
    rng = np.random.default_rng(11)
    w, b, x = rng.normal(size=(6, 4)), rng.normal(size=6), rng.normal(size=(4, 3))
    a = FactorizedLinear.from_dense(w, b, 3, seed=1).forward(x)
    c = FactorizedLinear.from_dense(w, b, 3, seed=99).forward(x)
    np.testing.assert_array_equal(a, c)


# --- forward ----------------------------------------------------------------

def test_forward_single_filter():
    e1, e2 = np.eye(3)[:, :1], np.eye(4)[:, 1:2]
    layer = FactorizedLinear(e1, e2, [2.0], np.zeros((3, 0)), np.zeros((4, 0)), np.zeros(3))
    np.testing.assert_array_equal(layer.forward(np.eye(4)[:, 1:2]).ravel(), [2.0, 0.0, 0.0])


def test_forward_orthogonal_input_returns_bias():
    rng = np.random.default_rng(3)
    q, _ = np.linalg.qr(rng.normal(size=(5, 5)))
    base_v, x = q[:, :3], q[:, 3:]
    bias = rng.normal(size=4)
    base_u, _ = np.linalg.qr(rng.normal(size=(4, 3)))
    layer = FactorizedLinear(base_u, base_v, [1.0, 2.0, 3.0], np.zeros((4, 0)), np.zeros((5, 0)), bias)
    np.testing.assert_allclose(layer.forward(x), np.repeat(bias[:, None], 2, axis=1), atol=1e-14)


def test_forward_matches_dense_path():
    rng = np.random.default_rng(4)
    layer = random_layer(rng, 12, 9, 3, rank=6)
    x = rng.normal(size=(9, 5))
    ref = layer.materialize() @ x + layer.bias[:, None]
    np.testing.assert_allclose(layer.forward(x), ref, rtol=1e-10, atol=1e-10)


def test_forward_shape_mismatch():
    layer = random_layer(np.random.default_rng(5), 4, 3, 1)
    with pytest.raises(ShapeError):
        layer.forward(np.ones((4, 2)))


# --- backward ---------------------------------------------------------------

def test_backward_zero_upstream():
    rng = np.random.default_rng(6)
    layer = random_layer(rng, 5, 4, 2)
    g = layer.gradients(rng.normal(size=(4, 3)), np.zeros((5, 3)))
    for arr in (g.d_weights, g.d_extra_u, g.d_extra_v, g.d_bias, g.d_input):
        assert not np.any(arr)


def test_backward_scalar_chain_rule():
    layer = FactorizedLinear([[1.0]], [[1.0]], [2.0], np.zeros((1, 0)), np.zeros((1, 0)), [0.0])
    g = layer.gradients([[3.0]], [[1.0]])
    assert g.d_weights[0] == 3.0
    assert g.d_input[0, 0] == 2.0


def test_backward_matches_finite_differences():
    rng = np.random.default_rng(7)
    layer = random_layer(rng, 8, 6, 2)
    x = rng.normal(size=(6, 4))
    g = layer.gradients(x, layer.forward(x))
    assert_close_rel(g.d_weights, central_difference(layer, x, layer.weights))
    assert_close_rel(g.d_extra_u, central_difference(layer, x, layer.extra_u))
    assert_close_rel(g.d_extra_v, central_difference(layer, x, layer.extra_v))
    assert_close_rel(g.d_bias, central_difference(layer, x, layer.bias))
    assert_close_rel(g.d_input, central_difference(layer, x, x))


def test_bases_are_read_only():
    layer = random_layer(np.random.default_rng(8), 4, 4, 0)
    with pytest.raises(ValueError):
        layer.base_u[0, 0] = 1.0


# --- pruning ----------------------------------------------------------------

def prefix_oracle(weights, ratio):
    """Enumerate every candidate set size over the (|w| desc, index asc) order."""
    order = sorted(range(len(weights)), key=lambda i: (-abs(weights[i]), i))
    total = sum(abs(w) for w in weights)
    for k in range(1, len(weights) + 1):
        if sum(abs(weights[i]) for i in order[:k]) >= ratio * total * (1 - 1e-12):
            return sorted(order[:k])
    return sorted(order)


def layer_with_weights(weights):
    r = len(weights)
    q, _ = np.linalg.qr(np.random.default_rng(0).normal(size=(r + 1, r)))
    return FactorizedLinear(q, q, weights, np.zeros((r + 1, 0)), np.zeros((r + 1, 0)), np.zeros(r + 1))


def test_prune_prefix_arithmetic():
    layer = layer_with_weights([4.0, 3.0, 2.0, 1.0])
    assert prune_by_mass(layer, 0.7) == 2
    np.testing.assert_array_equal(layer.weights, [4.0, 3.0])
    np.testing.assert_array_equal(layer.basis_index, [0, 1])


def test_prune_ratio_one_is_noop():
    layer = layer_with_weights([4.0, 3.0, 2.0, 1.0])
    assert prune_by_mass(layer, 1.0) == 0
    assert layer.rank == 4


def test_prune_ties_keep_lowest_index():
    assert prefix_oracle([2, 2, 2, 2], 0.5) == [0, 1]
    layer = layer_with_weights([2.0, 2.0, 2.0, 2.0])
    prune_by_mass(layer, 0.5)
    np.testing.assert_array_equal(layer.basis_index, [0, 1])


def test_prune_uses_magnitude_of_signed_weights():
    layer = layer_with_weights([1.0, -5.0, 0.5, 3.0])
    prune_by_mass(layer, 0.8)
    np.testing.assert_array_equal(layer.basis_index, [1, 3])


def test_prune_rejects_bad_ratio():
    layer = layer_with_weights([1.0, 2.0])
    for bad in (0.0, -0.1, 1.5):
        with pytest.raises(ValueError):
            prune_by_mass(layer, bad)


def test_prune_keeps_one_even_when_all_zero():
    layer = layer_with_weights([0.0, 0.0, 0.0])
    prune_by_mass(layer, 0.01)
    assert layer.rank == 1


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(-6, 6), min_size=1, max_size=9).filter(lambda w: any(w)),
       st.floats(0.01, 1.0))
def test_prune_matches_enumeration_and_is_minimal(weights, ratio):
    weights = [float(w) for w in weights]
    kept = select_by_mass(weights, ratio)
    assert list(kept) == prefix_oracle(weights, ratio)
    mags = np.abs(weights)
    total = mags.sum()
    assert mags[kept].sum() >= ratio * total * (1 - 1e-12)
    smaller = mags[kept].sum() - mags[kept].min()
    assert smaller < ratio * total


def test_pruning_leaves_surviving_bases_bitwise_unchanged():
    layer = random_layer(np.random.default_rng(9), 10, 8, 1)
    u0, v0 = layer.base_u.copy(), layer.base_v.copy()
    prune_by_mass(layer, 0.6)
    np.testing.assert_array_equal(layer.base_u, u0[:, layer.basis_index])
    np.testing.assert_array_equal(layer.base_v, v0[:, layer.basis_index])


# --- materialize / finalize -------------------------------------------------

def test_materialize_matches_naive_sum():
    layer = random_layer(np.random.default_rng(12), 6, 5, 2, rank=3)
    np.testing.assert_allclose(layer.materialize(), naive_materialize(layer), rtol=0, atol=1e-12)


def test_materialize_empty_is_zero():
    layer = FactorizedLinear(np.zeros((3, 0)), np.zeros((2, 0)), [], np.zeros((3, 0)), np.zeros((2, 0)), np.zeros(3))
    np.testing.assert_array_equal(layer.materialize(), np.zeros((3, 2)))


def test_finalize_diagonal():
    layer = FactorizedLinear.from_dense(np.diag([3.0, 2.0, 1.0]), np.ones(3), 0)
    pair = finalize(layer)
    assert pair.rank == 3
    x = np.random.default_rng(13).normal(size=(3, 4))
    np.testing.assert_allclose(pair.forward(x), np.diag([3.0, 2.0, 1.0]) @ x + 1.0, atol=1e-14)


def test_finalize_parameter_count_arithmetic():
    n = m = 4096
    r = 512
    assert n * m == 16_777_216
    assert (n + m) * r == 4_194_304
    assert n * m / ((n + m) * r) == 4.0


def test_finalize_random_pruned_layer():
    rng = np.random.default_rng(14)
    layer = random_layer(rng, 20, 15, 3)
    prune_by_mass(layer, 0.5)
    pair = finalize(layer)
    w = layer.materialize()
    x = rng.normal(size=(15, 100))
    ref = w @ x + layer.bias[:, None]
    assert np.max(np.abs(pair.forward(x) - ref)) <= 1e-8 * np.max(np.abs(ref))
    r = pair.rank
    assert r == np.linalg.matrix_rank(w)
    assert pair.num_params() == (20 + 15) * r + 20


def test_dense_layer_backward_finite_difference():
    rng = np.random.default_rng(15)
    layer = DenseLinear(rng.normal(size=(4, 3)), rng.normal(size=4))
    x = rng.normal(size=(3, 2))
    layer.forward(x)
    layer.backward(layer.forward(x))
    grad = layer.grads["weight"].copy()
    num = central_difference(layer, x, layer.weight)
    assert_close_rel(grad, num)
