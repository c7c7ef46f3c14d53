import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import rel_err
from hosl.model import (
    ConfigError,
    DenseStack,
    LayerSpec,
    ShapeError,
    SplitModel,
    build_feature_split,
    build_split_model,
    client_backward,
    client_forward,
    finite_diff_grad,
    full_loss,
    monolithic_grad,
    params_from_bytes,
    params_to_bytes,
    server_backward,
    server_forward,
    split_grad,
)

TANH_STACK = (LayerSpec(4, 8, "tanh"), LayerSpec(8, 8, "tanh"), LayerSpec(8, 3, "identity"))


def single(layer, k=1, loss="mse"):
    return build_split_model((layer,), k, 0, loss, allow_empty_server=True)


def random_instance(seed, loss="mse"):
    rng = np.random.default_rng(seed)
    widths = rng.integers(1, 6, size=rng.integers(3, 5))
    acts = ["tanh", "identity", "tanh", "tanh", "identity"]
    layers = [LayerSpec(int(a), int(b), acts[i]) for i, (a, b) in enumerate(zip(widths, widths[1:]))]
    if loss == "xent" and layers[-1].output_dim < 2:
        layers[-1] = LayerSpec(layers[-1].input_dim, 3, layers[-1].activation)
    k = int(rng.integers(1, len(layers)))
    model = build_split_model(layers, k, seed, loss)
    B = int(rng.integers(1, 6))
    x = rng.standard_normal((B, layers[0].input_dim))
    if loss == "mse":
        y = rng.standard_normal((B, layers[-1].output_dim))
    else:
        y = rng.integers(0, layers[-1].output_dim, size=(B, 1)).astype(float)
    theta = model.params + 0.3 * rng.standard_normal(model.d)
    return model, theta, x, y


# --- build_split_model ----------------------------------------------------

def test_param_count_tiny():
    m = build_split_model([LayerSpec(2, 2), LayerSpec(2, 1)], 1, 0)
    assert (m.d_c, m.d_s) == (6, 3)


def test_param_count_three_layers():
    m = build_split_model(TANH_STACK, 2, 0)
    assert (m.d_c, m.d_s) == (112, 27)


def test_same_seed_same_params():
    a = build_split_model(TANH_STACK, 2, 77)
    b = build_split_model(TANH_STACK, 2, 77)
    assert params_to_bytes(a.params) == params_to_bytes(b.params)
    assert params_to_bytes(a.params) != params_to_bytes(build_split_model(TANH_STACK, 2, 78).params)


def test_init_range():
    m = build_split_model(TANH_STACK, 1, 3)
    first = m.client_params[: TANH_STACK[0].n_params]
    assert np.all(np.abs(first) <= 1 / np.sqrt(4))
    assert np.all(np.abs(m.server_params) <= 1 / np.sqrt(8))


@pytest.mark.parametrize("k", [0, 3, -1])
def test_invalid_cut(k):
    with pytest.raises(ConfigError):
        build_split_model(TANH_STACK, k, 0)


def test_non_chaining_dims():
    with pytest.raises(ConfigError):
        build_split_model([LayerSpec(2, 3), LayerSpec(4, 1)], 1, 0)


def test_bad_layer_spec():
    with pytest.raises(ConfigError):
        LayerSpec(0, 2)
    with pytest.raises(ConfigError):
        LayerSpec(2, 2, "sigmoid")


def test_d_constant_across_cuts():
    layers = TANH_STACK + (LayerSpec(3, 2, "tanh"),)
    totals = {build_split_model(layers, k, 0).d for k in range(1, len(layers))}
    assert totals == {sum(l.n_params for l in layers)}


def test_serialization_round_trip(rng):
    theta = rng.standard_normal(139)
    blob = params_to_bytes(theta)
    assert len(blob) == 8 * 139
    np.testing.assert_array_equal(params_from_bytes(blob), theta)
    assert blob[:8] == struct.pack("<d", theta[0])


def test_serialization_layout():
    stack = DenseStack([LayerSpec(2, 3)])
    theta = np.arange(9.0)
    (w, b), = stack.unpack(theta)
    np.testing.assert_array_equal(w, [[0, 1], [2, 3], [4, 5]])
    np.testing.assert_array_equal(b, [6, 7, 8])


# --- forward --------------------------------------------------------------

def test_client_forward_identity():
    m = single(LayerSpec(2, 2))
    theta_c = np.array([1.0, 0.0, 0.0, 1.0, 0.0, 0.0])
    np.testing.assert_array_equal(client_forward(m, theta_c, [[1.0, 2.0]]), [[1.0, 2.0]])


def test_client_forward_zero_weights(rng):
    m = single(LayerSpec(3, 2))
    h = client_forward(m, np.zeros(8), rng.standard_normal((5, 3)))
    np.testing.assert_array_equal(h, np.zeros((5, 2)))


def test_client_forward_tanh():
    m = single(LayerSpec(1, 1, "tanh"))
    h = client_forward(m, np.array([1.0, 0.0]), [[0.5]])
    assert h[0, 0] == pytest.approx(0.46212, abs=5e-6)
    assert h[0, 0] == np.tanh(0.5)


def test_client_forward_shape_errors():
    m = single(LayerSpec(2, 2))
    with pytest.raises(ShapeError):
        client_forward(m, np.zeros(5), [[1.0, 2.0]])
    with pytest.raises(ShapeError):
        client_forward(m, np.zeros(6), [[1.0, 2.0, 3.0]])


def test_server_forward_identity_passthrough():
    m = single(LayerSpec(1, 1))
    empty = np.zeros(0)
    assert server_forward(m, empty, [[0.7]], [[0.7]]) == 0.0
    assert server_forward(m, empty, [[1.0]], [[0.0]]) == 0.5


def test_server_forward_is_batch_mean():
    m = single(LayerSpec(1, 1))
    h = np.array([[np.sqrt(0.4)], [np.sqrt(0.8)]])
    assert server_forward(m, np.zeros(0), h, np.zeros((2, 1))) == pytest.approx(0.3, abs=1e-15)


def test_server_forward_shape_mismatch():
    m = build_split_model(TANH_STACK, 2, 0)
    with pytest.raises(ShapeError):
        server_forward(m, m.server_params, np.zeros((2, 7)), np.zeros((2, 3)))


def test_xent_uniform_logits():
    m = single(LayerSpec(3, 3), loss="xent")
    loss = server_forward(m, np.zeros(0), np.zeros((4, 3)), np.array([[0], [1], [2], [0]]))
    assert loss == pytest.approx(np.log(3))


def test_forward_is_pure(rng):
    m = build_split_model(TANH_STACK, 2, 1)
    x = rng.standard_normal((5, 4))
    y = rng.standard_normal((5, 3))
    theta_c = m.client_params.copy()
    h1 = client_forward(m, theta_c, x)
    h2 = client_forward(m, theta_c, x)
    assert h1.tobytes() == h2.tobytes()
    np.testing.assert_array_equal(theta_c, m.client_params)
    assert server_forward(m, m.server_params, h1, y) == server_forward(m, m.server_params, h2, y)


# --- backward -------------------------------------------------------------

def test_identity_server_activation_grad():
    m = single(LayerSpec(1, 1))
    g_s, g_h = server_backward(m, np.zeros(0), [[1.0]], [[0.0]])
    assert g_s.size == 0
    np.testing.assert_array_equal(g_h, [[1.0]])


def test_server_grad_finite_differences(rng):
    m = build_split_model(TANH_STACK, 1, 4)
    x = rng.standard_normal((6, 4))
    y = rng.standard_normal((6, 3))
    h = client_forward(m, m.client_params, x)
    g_s, _ = server_backward(m, m.server_params, h, y)
    fd = finite_diff_grad(m, m.params, x, y, 1e-5)[m.d_c :]
    assert rel_err(g_s, fd).max() < 1e-4


def test_server_grad_vanishes_at_optimum(rng):
    # one linear server layer with MSE is a least-squares problem
    layers = [LayerSpec(3, 4, "tanh"), LayerSpec(4, 2)]
    m = build_split_model(layers, 1, 0)
    x = rng.standard_normal((20, 3))
    y = rng.standard_normal((20, 2))
    h = client_forward(m, m.client_params, x)
    design = np.hstack([h, np.ones((20, 1))])
    coef = np.linalg.lstsq(design, y, rcond=None)[0]  # (5, 2)
    theta_s = np.concatenate([coef[:4].T.ravel(), coef[4]])
    g_s, _ = server_backward(m, theta_s, h, y)
    assert np.linalg.norm(g_s) < 1e-8


def test_client_backward_zero_grad(rng):
    m = build_split_model(TANH_STACK, 2, 0)
    x = rng.standard_normal((3, 4))
    g = client_backward(m, m.client_params, x, np.zeros((3, 8)))
    np.testing.assert_array_equal(g, np.zeros(m.d_c))


def test_client_backward_shape_mismatch(rng):
    m = build_split_model(TANH_STACK, 2, 0)
    with pytest.raises(ShapeError):
        client_backward(m, m.client_params, rng.standard_normal((3, 4)), np.zeros((3, 7)))


def test_chained_grad_finite_differences(rng):
    m = build_split_model(TANH_STACK, 2, 9)
    assert m.d == 139
    x = rng.standard_normal((5, 4))
    y = rng.standard_normal((5, 3))
    analytic = split_grad(m, m.params, x, y)
    fd = finite_diff_grad(m, m.params, x, y, 1e-5)
    assert rel_err(analytic, fd).max() < 1e-4


def test_chained_equals_monolithic_xent(rng):
    m, theta, x, y = random_instance(3, loss="xent")
    np.testing.assert_allclose(split_grad(m, theta, x, y), monolithic_grad(m, theta, x, y), rtol=1e-12, atol=0)


def test_relu_subgradient_zero_at_kink():
    stack = DenseStack([LayerSpec(1, 1, "relu")])
    theta = np.array([1.0, 0.0])
    g_theta, g_x = stack.backward(theta, np.array([[0.0]]), np.array([[1.0]]))
    np.testing.assert_array_equal(g_theta, [0.0, 0.0])
    np.testing.assert_array_equal(g_x, [[0.0]])


@settings(max_examples=120, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_split_chain_equals_monolithic(seed):
    m, theta, x, y = random_instance(seed)
    split = split_grad(m, theta, x, y)
    mono = monolithic_grad(m, theta, x, y)
    np.testing.assert_allclose(split, mono, rtol=1e-12, atol=1e-300)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_analytic_matches_finite_differences(seed):
    m, theta, x, y = random_instance(seed)
    assert rel_err(split_grad(m, theta, x, y), finite_diff_grad(m, theta, x, y, 1e-5)).max() < 1e-4


# --- full_loss / finite differences ---------------------------------------

def test_full_loss_is_composition(rng):
    m = build_split_model(TANH_STACK, 2, 5)
    x = rng.standard_normal((4, 4))
    y = rng.standard_normal((4, 3))
    composed = server_forward(m, m.server_params, client_forward(m, m.client_params, x), y)
    assert full_loss(m, m.params, x, y) == composed


def linear_quadratic(rng, n=7, d=4):
    """One identity layer with an appended constant feature: L = 1/2 ||A theta - b||^2."""
    A = rng.standard_normal((n, d))
    b = rng.standard_normal(n)
    scale = np.sqrt(n)
    x = scale * A[:, :-1]
    m = single(LayerSpec(d - 1, 1))
    # bias multiplies the constant column, so make that column all ones
    A[:, -1] = 1.0 / scale
    return m, A, b, x, (scale * b).reshape(-1, 1)


def test_full_loss_quadratic_closed_form(rng):
    m, A, b, x, y = linear_quadratic(rng)
    theta = rng.standard_normal(m.d)
    r = A @ theta - b
    assert full_loss(m, theta, x, y) == pytest.approx(0.5 * r @ r, rel=1e-12)


def test_full_loss_permutation_invariant(rng):
    m = build_split_model(TANH_STACK, 2, 5)
    x = rng.standard_normal((9, 4))
    y = rng.standard_normal((9, 3))
    perm = rng.permutation(9)
    assert abs(full_loss(m, m.params, x, y) - full_loss(m, m.params, x[perm], y[perm])) < 1e-12


def test_full_loss_dim_mismatch():
    m = build_split_model(TANH_STACK, 2, 5)
    with pytest.raises(ShapeError):
        full_loss(m, np.zeros(10), np.zeros((1, 4)), np.zeros((1, 3)))


def test_finite_diff_linear_quadratic(rng):
    m, A, b, x, y = linear_quadratic(rng)
    theta = rng.standard_normal(m.d)
    step = 1e-4
    fd = finite_diff_grad(m, theta, x, y, step)
    # central differences are exact on quadratics up to rounding
    np.testing.assert_allclose(fd, A.T @ (A @ theta - b), atol=1e-8)


def test_finite_diff_constant_loss():
    # relu layers with negative biases on zero inputs: output pinned at 0
    layers = [LayerSpec(2, 2, "relu"), LayerSpec(2, 1, "relu")]
    m = build_split_model(layers, 1, 0)
    theta = np.concatenate([[0.3, -0.2, 0.5, 0.1, -1.0, -1.0], [0.4, 0.2, -1.0]])
    g = finite_diff_grad(m, theta, np.zeros((3, 2)), np.ones((3, 1)), 1e-5)
    np.testing.assert_array_equal(g, np.zeros(9))


def test_finite_diff_rejects_bad_step():
    m = single(LayerSpec(1, 1))
    with pytest.raises(ValueError):
        finite_diff_grad(m, np.zeros(2), [[1.0]], [[1.0]], 0.0)


# --- feature split --------------------------------------------------------

def test_feature_split_is_linear_model(rng):
    m = build_feature_split(6, 2)
    assert (m.d_c, m.d_s) == (2, 4)
    x = rng.standard_normal((10, 6))
    y = rng.standard_normal((10, 1))
    theta = rng.standard_normal(6)
    r = x @ theta - y[:, 0]
    assert full_loss(m, theta, x, y) == pytest.approx(0.5 * r @ r / 10, rel=1e-13)
    np.testing.assert_allclose(split_grad(m, theta, x, y), x.T @ r / 10, rtol=1e-12)
    assert rel_err(split_grad(m, theta, x, y), finite_diff_grad(m, theta, x, y)).max() < 1e-4


def test_feature_split_bounds():
    with pytest.raises(ConfigError):
        build_feature_split(4, 0)
    with pytest.raises(ConfigError):
        build_feature_split(4, 5)
    assert isinstance(build_feature_split(4, 4), SplitModel)
