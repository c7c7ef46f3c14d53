import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import rel_err
from hosl import optim, prng
from hosl.model import ConfigError, ShapeError
from hosl.optim import (
    NumericError,
    ZOConfig,
    ZOGradientRecord,
    perturb,
    sgd_step,
    spsa_scalar,
    zo_dense_estimate,
    zo_update,
)


def reference_normals(seed, n):
    mask = (1 << 64) - 1
    state, u = seed, []
    for _ in range(2 * ((n + 1) // 2)):
        state = (state + 0x9E3779B97F4A7C15) & mask
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & mask
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & mask
        u.append((((z ^ (z >> 31)) >> 11) + 0.5) / 2**53)
    out = []
    for u1, u2 in zip(u[0::2], u[1::2]):
        r = math.sqrt(-2.0 * math.log(u1))
        out += [r * math.cos(2 * math.pi * u2), r * math.sin(2 * math.pi * u2)]
    return out[:n]


# --- perturb --------------------------------------------------------------

def test_perturb_zero_delta_is_bitwise_noop(rng):
    theta = rng.standard_normal(17)
    assert perturb(theta, 0.0, 5).tobytes() == theta.tobytes()


def test_perturb_seed_42_matches_reference():
    out = perturb(np.zeros(2), 1.0, 42)
    assert out.tolist() == reference_normals(42, 2)


def test_perturb_does_not_alias_unless_asked(rng):
    theta = rng.standard_normal(4)
    before = theta.copy()
    perturb(theta, 0.5, 1)
    np.testing.assert_array_equal(theta, before)
    out = perturb(theta, 0.5, 1, inplace=True)
    assert out is theta
    assert not np.array_equal(theta, before)


@pytest.mark.parametrize("dim", [1, 10, 1000])
def test_restore_sequence(dim):
    rng = np.random.default_rng(dim)
    eps = 1e-3
    for trial in range(50):
        theta = rng.standard_normal(dim)
        seed = int(rng.integers(0, 2**63))
        w = perturb(theta, eps, seed)
        w = perturb(w, -2 * eps, seed, inplace=True)
        w = perturb(w, eps, seed, inplace=True)
        assert rel_err(w, theta, floor=1e-300).max() <= 1e-12


def test_perturb_rejects_non_finite():
    with pytest.raises(NumericError):
        perturb(np.array([1.0, np.nan]), 0.1, 0)
    with pytest.raises(NumericError):
        perturb(np.array([np.inf]), 0.0, 0)


def test_perturb_empty_vector():
    assert perturb(np.zeros(0), 1.0, 3).size == 0


# --- spsa_scalar ----------------------------------------------------------

def test_spsa_equal_losses():
    assert spsa_scalar(0.7, 0.7, 0.1, 4) == 0.0


def test_spsa_unit():
    eps, Q = 0.01, 5
    assert spsa_scalar(2 * eps * Q, 0.0, eps, Q) == pytest.approx(1.0, abs=1e-15)


def test_spsa_worked_example():
    assert spsa_scalar(1.3, 0.7, 0.1, 3) == pytest.approx(1.0, rel=1e-12)


@pytest.mark.parametrize("eps,Q", [(0.0, 1), (-1e-3, 1), (1e-3, 0)])
def test_spsa_bad_config(eps, Q):
    with pytest.raises(ConfigError):
        spsa_scalar(1.0, 0.0, eps, Q)


def test_zo_config_validation():
    ZOConfig(1e-3, 1, 0.1)
    for bad in [(0.0, 1, 0.1), (1e-3, 0, 0.1), (1e-3, 1, 0.0)]:
        with pytest.raises(ConfigError):
            ZOConfig(*bad)


# --- zo_update ------------------------------------------------------------

def test_zo_update_zero_gradient(rng):
    theta = rng.standard_normal(9)
    out = zo_update(theta, ZOGradientRecord(0.0, 11), 0.3)
    assert out.tobytes() == theta.tobytes()


@given(st.integers(0, 2**64 - 1), st.floats(-10, 10), st.floats(1e-6, 1.0), st.integers(1, 50))
@settings(max_examples=100, deadline=None)
def test_zo_update_is_negative_perturb(seed, g, lr, dim):
    theta = np.linspace(-1, 1, dim)
    a = zo_update(theta, ZOGradientRecord(g, seed), lr)
    b = perturb(theta, -(lr * g), seed)
    assert a.tobytes() == b.tobytes()


def test_summed_records_match_averaged_estimator(rng):
    d, Q, eps, lr = 12, 6, 1e-3, 0.05
    theta = rng.standard_normal(d)
    H = np.diag(np.linspace(0.5, 2.0, d))

    def loss(w):
        return 0.5 * w @ H @ w

    seeds = [prng.derive_seed(99, q) for q in range(Q)]
    w = theta.copy()
    dense = np.zeros(d)
    for s in seeds:
        z = prng.normals(s, d)
        lp, lm = loss(theta + eps * z), loss(theta - eps * z)
        w = zo_update(w, ZOGradientRecord(spsa_scalar(lp, lm, eps, Q), s), lr)
        dense += (lp - lm) / (2 * eps) * z
    expected = theta - lr * dense / Q
    assert rel_err(w, expected, floor=1e-300).max() <= 1e-12
    # the dense oracle walks the same seeds
    est = zo_dense_estimate(theta, loss, eps, Q, 99)
    assert rel_err(theta - lr * est, expected, floor=1e-300).max() <= 1e-12


def test_same_seed_same_direction(monkeypatch, rng):
    """perturb and zo_update must draw identical z for a shared seed."""
    seen = []
    real = optim.direction

    def spy(seed, n):
        z = real(seed, n)
        seen.append((seed, n, z.tobytes()))
        return z

    monkeypatch.setattr(optim, "direction", spy)
    for dim in (1, 10, 1000):
        for _ in range(1000 if dim < 1000 else 200):
            seed = int(rng.integers(0, 2**63))
            theta = rng.standard_normal(dim)
            seen.clear()
            perturb(theta, 1e-3, seed)
            zo_update(theta, ZOGradientRecord(0.7, seed), 0.1)
            assert len(seen) == 2
            assert seen[0] == seen[1]


# --- zo_dense_estimate ----------------------------------------------------

def test_dense_constant_loss():
    est = zo_dense_estimate(np.ones(5), lambda w: 3.0, 1e-3, 4, 0)
    np.testing.assert_array_equal(est, np.zeros(5))


def test_dense_counts_loss_calls():
    calls = []
    zo_dense_estimate(np.ones(3), lambda w: calls.append(1) or 0.0, 1e-2, 7, 0)
    assert len(calls) == 14


def test_dense_quadratic_single_direction_exact(rng):
    theta = rng.standard_normal(6)
    z = rng.standard_normal(6)
    est = zo_dense_estimate(theta, lambda w: 0.5 * w @ w, 1e-2, 1, 0, sampler=lambda q: z)
    assert rel_err(est, (z @ theta) * z, floor=1e-12).max() < 1e-8


def test_dense_error_propagates():
    def boom(w):
        raise RuntimeError("loss failed")

    with pytest.raises(RuntimeError):
        zo_dense_estimate(np.ones(2), boom, 1e-3, 1, 0)


@pytest.mark.parametrize("Q", [1, 4])
def test_dense_monte_carlo_mean(Q):
    theta = np.array([1.0, 0.0, 0.0])
    M, d = 10_000, 3
    # vectorised draw of M*Q directions from the repo stream
    z = prng.normals(prng.derive_seed(7, Q), M * Q * d).reshape(M, Q, d)
    proj = z @ theta
    est = (proj[:, :, None] * z).mean(axis=1)
    mean = est.mean(axis=0)
    tol = 5 / math.sqrt(M * Q) * np.linalg.norm(theta) * math.sqrt(d)
    assert np.all(np.abs(mean - theta) <= tol)
    # and a few of those estimates through the real function agree with the vector form
    e0 = zo_dense_estimate(theta, lambda w: 0.5 * w @ w, 1e-2, Q, 0, sampler=lambda q: z[0, q])
    assert rel_err(e0, est[0], floor=1e-12).max() < 1e-8


# --- sgd_step -------------------------------------------------------------

def test_sgd_zero_lr(rng):
    theta = rng.standard_normal(3)
    np.testing.assert_array_equal(sgd_step(theta, np.ones(3), 0.0), theta)


def test_sgd_example():
    np.testing.assert_array_equal(sgd_step([1.0, 1.0], [1.0, -1.0], 0.5), [0.5, 1.5])


def test_sgd_geometric_decay():
    theta = np.array([1.0])
    for _ in range(100):
        theta = sgd_step(theta, theta, 0.1)
    assert theta[0] == pytest.approx(0.9**100, rel=1e-12)
    assert theta[0] == pytest.approx(2.656e-5, rel=1e-3)


def test_sgd_shape_mismatch():
    with pytest.raises(ShapeError):
        sgd_step(np.ones(3), np.ones(2), 0.1)
