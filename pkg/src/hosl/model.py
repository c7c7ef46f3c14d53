"""Split feedforward networks with exact reverse-mode gradients.

Two sub-model families share one small interface (``n_params``,
``forward``, ``backward``):

* ``DenseStack``: a chain of dense layers, the general-purpose network.
* ``FeatureSplitClient`` / ``FeatureSplitServer``: a linear model whose
  coefficients are divided between the two parties. The loss is then an exact
  quadratic in the joint parameter vector, which is what the closed-form
  benchmarks need.

Parameters are flat float64 vectors. A dense layer stores its weight matrix
(output_dim x input_dim, row-major) followed by its bias, layers in order.
That is also the checkpoint byte layout (little-endian f64).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from . import prng

ACTIVATIONS = ("identity", "tanh", "relu")
LOSSES = ("mse", "xent")


class ConfigError(ValueError):
    """Invalid model or training configuration."""


class ShapeError(ValueError):
    """Tensor or parameter vector has the wrong shape."""


@dataclass(frozen=True)
class LayerSpec:
    input_dim: int
    output_dim: int
    activation: str = "identity"

    def __post_init__(self):
        if self.input_dim < 1 or self.output_dim < 1:
            raise ConfigError(f"layer dims must be >= 1: {self}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")

    @property
    def n_params(self) -> int:
        return self.output_dim * self.input_dim + self.output_dim


class SubModel(Protocol):
    n_params: int
    input_dim: int
    output_dim: int

    def forward(self, theta: np.ndarray, x: np.ndarray) -> np.ndarray: ...

    def backward(
        self, theta: np.ndarray, x: np.ndarray, grad_out: np.ndarray
    ) -> tuple[np.ndarray, np.ndarray]: ...


def _activate(kind: str, z: np.ndarray) -> np.ndarray:
    if kind == "tanh":
        return np.tanh(z)
    if kind == "relu":
        return np.maximum(z, 0.0)
    return z


def _activation_grad(kind: str, z: np.ndarray, a: np.ndarray, g: np.ndarray) -> np.ndarray:
    if kind == "tanh":
        return g * (1.0 - a * a)
    if kind == "relu":
        # subgradient at 0 is 0
        return g * (z > 0.0)
    return g


def _check_matrix(x: np.ndarray, width: int, what: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != width:
        raise ShapeError(f"{what}: expected (B, {width}), got {x.shape}")
    if x.shape[0] < 1:
        raise ShapeError(f"{what}: empty batch")
    return x


class DenseStack:
    """A chain of dense layers; may be empty (identity map)."""

    def __init__(self, layers: Sequence[LayerSpec], width: int | None = None):
        self.layers = tuple(layers)
        for a, b in zip(self.layers, self.layers[1:]):
            if a.output_dim != b.input_dim:
                raise ConfigError(f"layer dims do not chain: {a} -> {b}")
        if not self.layers and width is None:
            raise ConfigError("an empty stack needs an explicit width")
        self.input_dim = self.layers[0].input_dim if self.layers else width
        self.output_dim = self.layers[-1].output_dim if self.layers else width
        self.offsets = np.cumsum([0] + [l.n_params for l in self.layers]).tolist()
        self.n_params = self.offsets[-1]

    def unpack(self, theta: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.n_params,):
            raise ShapeError(f"expected {self.n_params} params, got {theta.shape}")
        out = []
        for spec, start in zip(self.layers, self.offsets):
            nw = spec.output_dim * spec.input_dim
            w = theta[start : start + nw].reshape(spec.output_dim, spec.input_dim)
            b = theta[start + nw : start + nw + spec.output_dim]
            out.append((w, b))
        return out

    def _forward_cache(self, theta, x):
        x = _check_matrix(x, self.input_dim, "stack input")
        cache = []
        a = x
        for spec, (w, b) in zip(self.layers, self.unpack(theta)):
            z = a @ w.T + b
            out = _activate(spec.activation, z)
            cache.append((a, z, out))
            a = out
        return a, cache

    def forward(self, theta: np.ndarray, x: np.ndarray) -> np.ndarray:
        return self._forward_cache(theta, x)[0]

    def backward(self, theta, x, grad_out):
        """Return (dL/dtheta, dL/dx) given dL/d(output)."""
        out, cache = self._forward_cache(theta, x)
        g = np.asarray(grad_out, dtype=np.float64)
        if g.shape != out.shape:
            raise ShapeError(f"grad_out shape {g.shape} != output shape {out.shape}")
        grad = np.empty(self.n_params)
        params = self.unpack(theta)
        for i in range(len(self.layers) - 1, -1, -1):
            spec, (w, _), (a_in, z, a_out) = self.layers[i], params[i], cache[i]
            dz = _activation_grad(spec.activation, z, a_out, g)
            start = self.offsets[i]
            nw = spec.output_dim * spec.input_dim
            grad[start : start + nw] = (dz.T @ a_in).ravel()
            grad[start + nw : self.offsets[i + 1]] = dz.sum(axis=0)
            g = dz @ w
        return grad, g


class FeatureSplitClient:
    """Client half of a linear model y = x . theta with a coefficient split.

    The client owns the first ``d_c`` coefficients. Its activation is its
    partial prediction followed by the remaining raw features, which the
    server needs for its own coefficients.
    """

    def __init__(self, n_features: int, d_c: int):
        if not 1 <= d_c <= n_features:
            raise ConfigError(f"need 1 <= d_c <= {n_features}, got {d_c}")
        self.n_params = d_c
        self.input_dim = n_features
        self.output_dim = 1 + n_features - d_c

    def forward(self, theta, x):
        x = _check_matrix(x, self.input_dim, "client input")
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.n_params,):
            raise ShapeError(f"expected {self.n_params} params, got {theta.shape}")
        d_c = self.n_params
        return np.concatenate([x[:, :d_c] @ theta[:, None], x[:, d_c:]], axis=1)

    def backward(self, theta, x, grad_out):
        x = _check_matrix(x, self.input_dim, "client input")
        g = np.asarray(grad_out, dtype=np.float64)
        if g.shape != (x.shape[0], self.output_dim):
            raise ShapeError(f"grad_out shape {g.shape} mismatch")
        d_c = self.n_params
        grad_x = np.concatenate([g[:, :1] * theta[None, :], g[:, 1:]], axis=1)
        return x[:, :d_c].T @ g[:, 0], grad_x


class FeatureSplitServer:
    """Server half: adds its coefficients' contribution to the partial sum."""

    def __init__(self, d_s: int):
        if d_s < 0:
            raise ConfigError("d_s must be non-negative")
        self.n_params = d_s
        self.input_dim = 1 + d_s
        self.output_dim = 1

    def forward(self, theta, h):
        h = _check_matrix(h, self.input_dim, "server input")
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.n_params,):
            raise ShapeError(f"expected {self.n_params} params, got {theta.shape}")
        return h[:, :1] + h[:, 1:] @ theta[:, None]

    def backward(self, theta, h, grad_out):
        h = _check_matrix(h, self.input_dim, "server input")
        g = np.asarray(grad_out, dtype=np.float64)
        grad_h = np.concatenate([g, g * theta[None, :]], axis=1)
        return h[:, 1:].T @ g[:, 0], grad_h


def loss_and_grad(pred: np.ndarray, y: np.ndarray, kind: str) -> tuple[float, np.ndarray]:
    """Batch-mean loss and its gradient w.r.t. the predictions.

    ``mse`` is the per-sample 1/2 ||pred - y||^2. ``xent`` is softmax
    cross-entropy with ``y`` a (B, 1) column of class indices.
    """
    n = pred.shape[0]
    if kind == "mse":
        y = np.asarray(y, dtype=np.float64).reshape(pred.shape)
        r = pred - y
        return 0.5 * float(np.sum(r * r)) / n, r / n
    if kind == "xent":
        labels = np.asarray(y).reshape(-1).astype(np.int64)
        if labels.shape[0] != n:
            raise ShapeError("label count does not match batch")
        if labels.min() < 0 or labels.max() >= pred.shape[1]:
            raise ShapeError("class label out of range")
        shifted = pred - pred.max(axis=1, keepdims=True)
        logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        logp = shifted - logz
        loss = -float(logp[np.arange(n), labels].sum()) / n
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return loss, p / n
    raise ConfigError(f"unknown loss {kind!r}")


@dataclass
class SplitModel:
    """A network cut into client and server halves plus their parameters."""

    client: SubModel
    server: SubModel
    client_params: np.ndarray
    server_params: np.ndarray
    loss: str = "mse"
    layers: tuple[LayerSpec, ...] = ()
    cut: int = 0
    # full-model stack, only for dense models; used as the unsplit reference
    monolith: DenseStack | None = field(default=None, repr=False)

    @property
    def d_c(self) -> int:
        return self.client.n_params

    @property
    def d_s(self) -> int:
        return self.server.n_params

    @property
    def d(self) -> int:
        return self.d_c + self.d_s

    @property
    def params(self) -> np.ndarray:
        return np.concatenate([self.client_params, self.server_params])

    def split(self, theta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.d,):
            raise ShapeError(f"expected {self.d} params, got {theta.shape}")
        return theta[: self.d_c], theta[self.d_c :]


def init_params(layers: Sequence[LayerSpec], seed: int, first_layer: int = 0) -> np.ndarray:
    """Uniform [-1/sqrt(fan_in), 1/sqrt(fan_in)] weights and biases.

    Layer i draws from its own stream ``derive_seed(seed, i)`` so a layer's
    initial values don't depend on where the cut is.
    """
    chunks = []
    for i, spec in enumerate(layers, start=first_layer):
        u = prng.uniforms(prng.derive_seed(seed, i), spec.n_params)
        chunks.append((2.0 * u - 1.0) / np.sqrt(spec.input_dim))
    return np.concatenate(chunks) if chunks else np.zeros(0)


def build_split_model(
    layers: Sequence[LayerSpec],
    k: int,
    init_seed: int,
    loss: str = "mse",
    *,
    allow_empty_server: bool = False,
) -> SplitModel:
    layers = tuple(layers)
    upper = len(layers) if allow_empty_server else len(layers) - 1
    if not 1 <= k <= upper:
        raise ConfigError(f"cut layer must be in [1, {upper}], got {k}")
    if loss not in LOSSES:
        raise ConfigError(f"unknown loss {loss!r}")
    monolith = DenseStack(layers)
    client = DenseStack(layers[:k])
    server = DenseStack(layers[k:], width=layers[k - 1].output_dim)
    theta = init_params(layers, init_seed)
    return SplitModel(
        client=client,
        server=server,
        client_params=theta[: client.n_params].copy(),
        server_params=theta[client.n_params :].copy(),
        loss=loss,
        layers=layers,
        cut=k,
        monolith=monolith,
    )


def build_feature_split(n_features: int, d_c: int, theta0: np.ndarray | None = None) -> SplitModel:
    """Linear regression model with coefficients 0..d_c-1 on the client."""
    client = FeatureSplitClient(n_features, d_c)
    server = FeatureSplitServer(n_features - d_c)
    theta0 = np.zeros(n_features) if theta0 is None else np.asarray(theta0, dtype=np.float64)
    if theta0.shape != (n_features,):
        raise ShapeError("theta0 must have one entry per feature")
    return SplitModel(client, server, theta0[:d_c].copy(), theta0[d_c:].copy(), loss="mse", cut=d_c)


def client_forward(model: SplitModel, theta_c: np.ndarray, x: np.ndarray) -> np.ndarray:
    return model.client.forward(theta_c, x)


def server_forward(model: SplitModel, theta_s: np.ndarray, h: np.ndarray, y: np.ndarray) -> float:
    pred = model.server.forward(theta_s, h)
    return loss_and_grad(pred, y, model.loss)[0]


def server_backward(model: SplitModel, theta_s, h, y) -> tuple[np.ndarray, np.ndarray]:
    """Return (dL/dtheta_s, dL/dh)."""
    pred = model.server.forward(theta_s, h)
    _, g_pred = loss_and_grad(pred, y, model.loss)
    return model.server.backward(theta_s, h, g_pred)


def client_backward(model: SplitModel, theta_c, x, activation_grad) -> np.ndarray:
    return model.client.backward(theta_c, x, activation_grad)[0]


def full_loss(model: SplitModel, theta: np.ndarray, x: np.ndarray, y: np.ndarray) -> float:
    theta_c, theta_s = model.split(theta)
    return server_forward(model, theta_s, client_forward(model, theta_c, x), y)


def split_grad(model: SplitModel, theta, x, y) -> np.ndarray:
    """Gradient via the split chain: server backward, then client backward."""
    theta_c, theta_s = model.split(theta)
    h = client_forward(model, theta_c, x)
    g_s, g_h = server_backward(model, theta_s, h, y)
    g_c = client_backward(model, theta_c, x, g_h)
    return np.concatenate([g_c, g_s])


def monolithic_grad(model: SplitModel, theta, x, y) -> np.ndarray:
    """Gradient of the unsplit network, computed without the cut."""
    theta = np.asarray(theta, dtype=np.float64)
    if model.monolith is not None:
        pred = model.monolith.forward(theta, x)
        _, g_pred = loss_and_grad(pred, y, model.loss)
        return model.monolith.backward(theta, x, g_pred)[0]
    # feature split: closed form X^T (X theta - y) / B
    x = np.asarray(x, dtype=np.float64)
    r = x @ theta - np.asarray(y, dtype=np.float64).reshape(-1)
    return x.T @ r / x.shape[0]


def finite_diff_grad(model: SplitModel, theta, x, y, step: float = 1e-5) -> np.ndarray:
    if step <= 0:
        raise ValueError("step must be positive")
    theta = np.array(theta, dtype=np.float64)
    grad = np.empty_like(theta)
    for i in range(theta.size):
        orig = theta[i]
        theta[i] = orig + step
        up = full_loss(model, theta, x, y)
        theta[i] = orig - step
        down = full_loss(model, theta, x, y)
        theta[i] = orig
        grad[i] = (up - down) / (2.0 * step)
    return grad


def params_to_bytes(theta: np.ndarray) -> bytes:
    return np.asarray(theta, dtype="<f8").tobytes()


def params_from_bytes(data: bytes) -> np.ndarray:
    if len(data) % 8:
        raise ShapeError("parameter blob length is not a multiple of 8")
    return np.frombuffer(data, dtype="<f8").astype(np.float64)
