"""Client and server endpoints and the training orchestrator.

Three modes share one wire protocol:

``zo_fo``  client estimates its gradient from 2Q scalar losses and updates by
           seed; server trains by backprop on the unperturbed activations.
``zo_zo``  same client; the server also perturbs its own block inside each
           (+, -) pair, so the pair is a full-model two-point estimate.
``fo_fo``  plain split backprop: the server replies with dL/dh.

Per-iteration traffic, client side:

    zo_fo / zo_zo : 2Q+1 Forward out, 2Q LossReply + 1 Ack in
    fo_fo         : 1 Forward out, 1 GradReply in
"""

from __future__ import annotations

import csv
import logging
import math
import threading
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import prng
from .accounting import CommLedger
from .data import Dataset, DatasetSpec, generate_dataset
from .model import (
    ConfigError,
    LayerSpec,
    SplitModel,
    build_feature_split,
    build_split_model,
    client_backward,
    client_forward,
    full_loss,
    server_backward,
    server_forward,
    split_grad,
)
from .optim import ZOGradientRecord, perturb, sgd_step, spsa_scalar, zo_update
from .protocol import (
    Ack,
    ConnectionClosed,
    Forward,
    GradReply,
    LossReply,
    Phase,
    ProtocolError,
    Transport,
    TransportError,
    queue_pair,
    tcp_pair,
)

log = logging.getLogger(__name__)

MODES = ("zo_fo", "zo_zo", "fo_fo")
CLIENT_LANE, SERVER_LANE = 0, 1
_INIT_LANE, _BATCH_LANE = 0x1417, 0xBA7C


def perturbation_seed(master_seed: int, t: int, q: int, lane: int = CLIENT_LANE) -> int:
    return prng.derive_seed(master_seed, t, q, lane)


@dataclass(frozen=True)
class TrainingConfig:
    mode: str = "zo_fo"
    T: int = 100
    Q: int = 10
    eps: float = 1e-3
    lr_client: float = 1e-2
    lr_server: float = 1e-2
    batch_size: int = 0  # 0 = full batch
    master_seed: int = 0
    # dense stack; empty means the feature-split linear model (quadratic data)
    layers: tuple[LayerSpec, ...] = ()
    cut: int = 1  # cut layer for dense stacks, d_c for the feature split
    loss: str = "mse"
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    transport: str = "inproc"
    instrument: bool = True
    record_time: bool = True
    # stop once L(theta^t) <= stop_fraction * L(theta^0); 0 disables
    stop_fraction: float = 0.0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.T < 1:
            raise ConfigError("T must be >= 1")
        if self.Q < 1:
            raise ConfigError("Q must be >= 1")
        if self.mode != "fo_fo" and not self.eps > 0:
            raise ConfigError("eps must be positive in ZO modes")
        if not (self.lr_client > 0 and self.lr_server > 0):
            raise ConfigError("learning rates must be positive")
        if self.batch_size < 0:
            raise ConfigError("batch size must be >= 0")
        if self.transport not in ("inproc", "tcp"):
            raise ConfigError(f"unknown transport {self.transport!r}")

    @property
    def q_active(self) -> bool:
        return self.mode != "fo_fo"


def build_model(config: TrainingConfig, dataset: Dataset | None = None) -> SplitModel:
    """Phase 0: both ends build the same model from the master seed."""
    if not config.layers:
        return build_feature_split(config.dataset.n_features, config.cut)
    return build_split_model(
        config.layers, config.cut, prng.derive_seed(config.master_seed, _INIT_LANE), config.loss
    )


@dataclass
class ClientState:
    theta_c: np.ndarray
    records: list[ZOGradientRecord] = field(default_factory=list)
    t: int = 0


@dataclass
class ServerState:
    theta_s: np.ndarray
    lr_server: float
    t: int = 0
    # zo_zo bookkeeping within an iteration
    inference_count: int = 0
    pending_plus: float = 0.0
    records: list[ZOGradientRecord] = field(default_factory=list)


def _expect(transport: Transport, kind):
    msg = transport.recv()
    if not isinstance(msg, kind):
        raise ProtocolError(f"expected {kind.__name__}, got {type(msg).__name__}")
    return msg


def run_client_iteration(
    state: ClientState, model: SplitModel, x, y, transport: Transport, config: TrainingConfig
) -> ClientState:
    """One zo_fo / zo_zo client iteration (Phases 1-3), updating in place.

    The perturbation currently applied is tracked as a coefficient on z so a
    transport failure can undo it without a parameter snapshot.
    """
    theta = state.theta_c
    eps, Q = config.eps, config.Q
    state.records = []
    applied: tuple[float, int] | None = None
    try:
        for q in range(Q):
            seed = perturbation_seed(config.master_seed, state.t, q, CLIENT_LANE)
            perturb(theta, +eps, seed, inplace=True)
            applied = (eps, seed)
            transport.send(Forward(Phase.INFERENCE, client_forward(model, theta, x), y))
            loss_plus = _expect(transport, LossReply).value

            perturb(theta, -2.0 * eps, seed, inplace=True)
            applied = (-eps, seed)
            transport.send(Forward(Phase.INFERENCE, client_forward(model, theta, x), y))
            loss_minus = _expect(transport, LossReply).value

            perturb(theta, +eps, seed, inplace=True)
            applied = None
            state.records.append(ZOGradientRecord(spsa_scalar(loss_plus, loss_minus, eps, Q), seed))

        transport.send(Forward(Phase.COMPUTE_GRAD, client_forward(model, theta, x), y))
        _expect(transport, Ack)
    except (TransportError, ProtocolError):
        if applied is not None:
            perturb(theta, -applied[0], applied[1], inplace=True)
        state.records = []
        raise

    for rec in state.records:
        zo_update(theta, rec, config.lr_client, inplace=True)
    state.records = []
    state.t += 1
    return state


def run_fo_client_iteration(
    state: ClientState, model: SplitModel, x, y, transport: Transport, config: TrainingConfig
) -> ClientState:
    h = client_forward(model, state.theta_c, x)
    transport.send(Forward(Phase.COMPUTE_GRAD, h, y))
    g_h = _expect(transport, GradReply).grad
    g_c = client_backward(model, state.theta_c, x, g_h)
    state.theta_c[:] = sgd_step(state.theta_c, g_c, config.lr_client)
    state.t += 1
    return state


def handle_message(state: ServerState, model: SplitModel, msg, config: TrainingConfig):
    """Server reaction to one client message; returns the reply."""
    if not isinstance(msg, Forward):
        raise ProtocolError(f"server cannot handle {type(msg).__name__}")
    h, y = msg.activations, msg.labels

    if msg.phase == Phase.INFERENCE:
        if config.mode != "zo_zo":
            return LossReply(server_forward(model, state.theta_s, h, y))
        q, minus = divmod(state.inference_count, 2)
        if q >= config.Q:
            raise ProtocolError("more inference messages than perturbations")
        seed = perturbation_seed(config.master_seed, state.t, q, SERVER_LANE)
        eps = config.eps
        state.inference_count += 1
        if not minus:
            perturb(state.theta_s, +eps, seed, inplace=True)
            state.pending_plus = server_forward(model, state.theta_s, h, y)
            return LossReply(state.pending_plus)
        perturb(state.theta_s, -2.0 * eps, seed, inplace=True)
        loss_minus = server_forward(model, state.theta_s, h, y)
        perturb(state.theta_s, +eps, seed, inplace=True)
        state.records.append(
            ZOGradientRecord(spsa_scalar(state.pending_plus, loss_minus, eps, config.Q), seed)
        )
        return LossReply(loss_minus)

    if config.mode == "zo_zo":
        if state.inference_count != 2 * config.Q:
            raise ProtocolError("compute_grad before all perturbation pairs arrived")
        for rec in state.records:
            zo_update(state.theta_s, rec, state.lr_server, inplace=True)
        state.records = []
        state.inference_count = 0
        state.t += 1
        return Ack()

    grad_s, g_h = server_backward(model, state.theta_s, h, y)
    state.theta_s[:] = sgd_step(state.theta_s, grad_s, state.lr_server)
    state.t += 1
    if config.mode == "fo_fo":
        return GradReply(g_h)
    return Ack()


def run_server_loop(state: ServerState, model: SplitModel, transport: Transport, config: TrainingConfig) -> ServerState:
    """Serve until the client closes the channel.

    A malformed message ends the loop: the channel is closed and the error
    re-raised for the caller.
    """
    try:
        while True:
            try:
                msg = transport.recv()
            except ConnectionClosed:
                break
            transport.send(handle_message(state, model, msg, config))
    except (ProtocolError, TransportError):
        log.exception("server loop terminated")
        raise
    finally:
        transport.close()
    return state


@dataclass
class IterRecord:
    t: int
    loss: float
    grad_norm_sq: float
    client_tx_bytes: int
    client_rx_bytes: int
    elapsed_ms: float


CSV_COLUMNS = ("iter", "loss", "grad_norm_sq", "client_tx_bytes", "client_rx_bytes", "elapsed_ms")


@dataclass
class TrainLog:
    config: TrainingConfig
    records: list[IterRecord] = field(default_factory=list)
    final_loss: float = math.nan
    final_grad_norm_sq: float = math.nan
    ledger: CommLedger = field(default_factory=CommLedger)
    transcript: list[tuple[str, bytes]] | None = None
    theta_c: np.ndarray | None = None
    theta_s: np.ndarray | None = None
    # quadratic minibatch runs: largest exact gradient variance seen per block
    sigma2_max: tuple[float, float] = (0.0, 0.0)

    @property
    def F(self) -> float:
        """L(theta^0) - L(theta^T)."""
        return self.records[0].loss - self.final_loss

    def grad_norms(self) -> list[float]:
        return [r.grad_norm_sq for r in self.records] + [self.final_grad_norm_sq]

    def stationarity(self) -> float:
        """(1/T) * sum_{t=0}^{T} ||grad L(theta^t)||^2."""
        return sum(self.grad_norms()) / len(self.records)

    def iterations_to(self, fraction: float) -> int | None:
        """First t with L(theta^t) <= fraction * L(theta^0), if any."""
        target = fraction * self.records[0].loss
        losses = [r.loss for r in self.records] + [self.final_loss]
        for t, v in enumerate(losses):
            if v <= target:
                return t
        return None

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_COLUMNS)
            for r in self.records:
                w.writerow([r.t, repr(r.loss), repr(r.grad_norm_sq), r.client_tx_bytes, r.client_rx_bytes, f"{r.elapsed_ms:.3f}"])
            fh.write(f"# final_loss={self.final_loss!r}\n")
            fh.write(f"# final_grad_norm_sq={self.final_grad_norm_sq!r}\n")
            fh.write(f"# client_to_server_bytes={self.ledger.client_to_server_bytes}\n")
            fh.write(f"# server_to_client_bytes={self.ledger.server_to_client_bytes}\n")


class _Probe:
    """Full-dataset loss and gradient at the current joint parameters."""

    def __init__(self, model: SplitModel, dataset: Dataset, batch_size: int):
        self.model, self.dataset, self.batch_size = model, dataset, batch_size
        self.track_variance = dataset.A is not None and batch_size > 0
        self.sigma2_max = (0.0, 0.0)

    def __call__(self, theta_c, theta_s) -> tuple[float, float]:
        theta = np.concatenate([theta_c, theta_s])
        x, y = self.dataset.x, self.dataset.y
        g = split_grad(self.model, theta, x, y)
        if self.track_variance:
            sc, ss = self.dataset.minibatch_variance(theta, self.batch_size, theta_c.size)
            self.sigma2_max = (max(self.sigma2_max[0], sc), max(self.sigma2_max[1], ss))
        return full_loss(self.model, theta, x, y), float(g @ g)


def _open_transport(kind: str):
    return tcp_pair() if kind == "tcp" else queue_pair()


def run_training(
    config: TrainingConfig,
    *,
    dataset: Dataset | None = None,
    capture_transcript: bool = False,
) -> TrainLog:
    """Run both endpoints for T iterations over the configured transport."""
    dataset = dataset if dataset is not None else generate_dataset(config.dataset)
    model = build_model(config, dataset)
    client = ClientState(model.client_params.copy())
    server = ServerState(model.server_params.copy(), config.lr_server)
    client_end, server_end = _open_transport(config.transport)

    out = TrainLog(config)
    client_end.taps.append(out.ledger.client_tap)
    if capture_transcript:
        out.transcript = []
        client_end.taps.append(lambda kind, frame: out.transcript.append((kind, frame)))

    server_error: list[BaseException] = []

    def _serve():
        try:
            run_server_loop(server, model, server_end, config)
        except BaseException as exc:  # surfaced to the caller below
            server_error.append(exc)

    thread = threading.Thread(target=_serve, name="hosl-server", daemon=True)
    thread.start()

    probe = _Probe(model, dataset, config.batch_size) if config.instrument else None
    step = run_fo_client_iteration if config.mode == "fo_fo" else run_client_iteration
    batches = dataset.batches(prng.derive_seed(config.master_seed, _BATCH_LANE), config.batch_size)
    start = time.perf_counter()
    try:
        for t in range(config.T):
            # server is blocked in recv between iterations, so reading theta_s is safe
            loss, gnorm = probe(client.theta_c, server.theta_s) if probe else (math.nan, math.nan)
            x, y = next(batches)
            step(client, model, x, y, client_end, config)
            tx, rx = out.ledger.end_round()
            elapsed = (time.perf_counter() - start) * 1e3 if config.record_time else 0.0
            out.records.append(IterRecord(t, loss, gnorm, tx, rx, elapsed))
            if config.stop_fraction and probe and loss <= config.stop_fraction * out.records[0].loss:
                break
    finally:
        client_end.close()
        thread.join(timeout=30.0)
    if server_error:
        raise server_error[0]

    if probe:
        out.final_loss, out.final_grad_norm_sq = probe(client.theta_c, server.theta_s)
        out.sigma2_max = probe.sigma2_max
    out.theta_c, out.theta_s = client.theta_c, server.theta_s
    return out


def run_endpoint(config: TrainingConfig, role: str, transport: Transport, dataset: Dataset | None = None) -> TrainLog | ServerState:
    """Run one side only, for two-process deployments over TCP.

    The client log has no loss or gradient columns: neither side alone can
    evaluate the full model.
    """
    dataset = dataset if dataset is not None else generate_dataset(config.dataset)
    model = build_model(config, dataset)
    if role == "server":
        return run_server_loop(ServerState(model.server_params.copy(), config.lr_server), model, transport, config)
    client = ClientState(model.client_params.copy())
    out = TrainLog(replace(config, instrument=False))
    transport.taps.append(out.ledger.client_tap)
    step = run_fo_client_iteration if config.mode == "fo_fo" else run_client_iteration
    batches = dataset.batches(prng.derive_seed(config.master_seed, _BATCH_LANE), config.batch_size)
    start = time.perf_counter()
    try:
        for t in range(config.T):
            x, y = next(batches)
            step(client, model, x, y, transport, config)
            tx, rx = out.ledger.end_round()
            elapsed = (time.perf_counter() - start) * 1e3 if config.record_time else 0.0
            out.records.append(IterRecord(t, math.nan, math.nan, tx, rx, elapsed))
    finally:
        transport.close()
    out.theta_c = client.theta_c
    return out
