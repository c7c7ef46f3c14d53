"""Memory, communication and convergence-bound accounting.

Memory formulas count elements of a decoder-only transformer split across the
two parties and multiply by bytes per element. They are arithmetic only; no
transformer is ever run. MB means MiB (2**20 bytes) unless a field says
otherwise.
"""

from __future__ import annotations

import math
import warnings
from collections import Counter
from dataclasses import dataclass, field, fields

from .protocol import HEADER_SIZE, TAG_ACK, TAG_FORWARD, TAG_GRAD, TAG_LOSS

MIB = 1 << 20
GIB = 1 << 30

CLIENT_CUDA_MB = 600.0
SERVER_CUDA_MB = 500.0

LOGITS_PRINTED_ELEMENTS = 813_197_824
LOGITS_NOTE = (
    "logits_peak uses B*S*V + 3*B*(S-1)*V; the reference derivation prints "
    f"{LOGITS_PRINTED_ELEMENTS:,} elements for the OPT-125M configuration, "
    "about 0.1% below what that formula gives"
)


@dataclass(frozen=True)
class ModelSpec:
    B: int = 64
    S: int = 64
    H: int = 768
    L: int = 12
    L_c: int = 5
    L_s: int = 7
    A: int = 12
    d_h: int = 64
    d_ff: int = 3072
    V: int = 50272
    M: int = 2048
    beta: int = 4
    r: int = 8  # LoRA rank, informational
    alpha: int = 16  # LoRA alpha, informational

    def check(self) -> list[str]:
        """Convention violations, as warnings rather than errors."""
        problems = []
        if self.A and self.d_h * self.A != self.H:
            problems.append(f"d_h={self.d_h} but H/A={self.H}/{self.A}")
        if self.d_ff != 4 * self.H:
            problems.append(f"d_ff={self.d_ff} but 4H={4 * self.H}")
        if self.L_c + self.L_s != self.L:
            problems.append(f"L_c+L_s={self.L_c + self.L_s} but L={self.L}")
        for msg in problems:
            warnings.warn(msg, stacklevel=2)
        return problems

    @classmethod
    def from_mapping(cls, values: dict) -> "ModelSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ValueError(f"unknown ModelSpec keys: {sorted(unknown)}")
        return cls(**{k: int(v) for k, v in values.items()})


OPT125M = ModelSpec()


@dataclass
class MemoryBreakdown:
    params: int = 0
    grads: int = 0
    masks: int = 0
    kv_cache: int = 0
    activations: int = 0
    logits_peak: int = 0
    transient: int = 0
    comm_buffer: int = 0
    cuda_overhead: int = 0
    notes: list[str] = field(default_factory=list)

    COMPONENTS = (
        "params", "grads", "masks", "kv_cache", "activations",
        "logits_peak", "transient", "comm_buffer", "cuda_overhead",
    )

    @property
    def total(self) -> int:
        return sum(getattr(self, name) for name in self.COMPONENTS)

    def items(self):
        return [(name, getattr(self, name)) for name in self.COMPONENTS]

    def mib(self, name: str) -> float:
        return (self.total if name == "total" else getattr(self, name)) / MIB


def per_layer_params(spec: ModelSpec) -> int:
    H, d_ff = spec.H, spec.d_ff
    return 4 * H * H + 2 * H * d_ff + d_ff + 9 * H


def client_param_elements(spec: ModelSpec) -> int:
    return spec.V * spec.H + (spec.M + 2) * spec.H + spec.L_c * per_layer_params(spec)


def server_param_elements(spec: ModelSpec) -> int:
    return spec.V * spec.H + spec.L_s * per_layer_params(spec) + 2 * spec.H


def logits_elements(spec: ModelSpec) -> int:
    return spec.B * spec.S * spec.V + 3 * spec.B * (spec.S - 1) * spec.V


def _transient_elements(spec: ModelSpec) -> int:
    return 2 * spec.B * spec.S * spec.H + spec.B * spec.S * spec.d_ff


def client_memory_zo(spec: ModelSpec, cuda_overhead_mb: float = CLIENT_CUDA_MB) -> MemoryBreakdown:
    """Peak client memory under forward-only (ZO) training."""
    b = spec.beta
    B, S, H = spec.B, spec.S, spec.H
    return MemoryBreakdown(
        params=client_param_elements(spec) * b,
        grads=0,
        masks=spec.L_c * spec.M**2 * b,
        kv_cache=spec.L_c * 2 * B * spec.A * S * spec.d_h * b,
        activations=0,
        transient=_transient_elements(spec) * b,
        comm_buffer=B * S * H * b,
        cuda_overhead=round(cuda_overhead_mb * MIB),
    )


def server_memory_fo(spec: ModelSpec, cuda_overhead_mb: float = SERVER_CUDA_MB) -> MemoryBreakdown:
    """Peak server memory under backprop (FO) training."""
    b = spec.beta
    B, S, H = spec.B, spec.S, spec.H
    params = server_param_elements(spec) * b
    per_layer_act = 6 * B * S * H + 2 * B * spec.A * S * S + B * S * spec.d_ff
    out = MemoryBreakdown(
        params=params,
        grads=params,
        masks=spec.L_s * spec.M**2 * b,
        activations=spec.L_s * per_layer_act * b,
        logits_peak=logits_elements(spec) * b,
        transient=_transient_elements(spec) * b,
        cuda_overhead=round(cuda_overhead_mb * MIB),
    )
    if spec == OPT125M:
        out.notes.append(LOGITS_NOTE)
    return out


# --- communication ledger -------------------------------------------------

CLIENT_TO_SERVER = "client_to_server"
SERVER_TO_CLIENT = "server_to_client"
_TAG_NAMES = {TAG_FORWARD: "Forward", TAG_LOSS: "LossReply", TAG_ACK: "Ack", TAG_GRAD: "GradReply"}


@dataclass
class CommLedger:
    client_to_server_bytes: int = 0
    server_to_client_bytes: int = 0
    counts: Counter = field(default_factory=Counter)
    rounds: list[tuple[int, int]] = field(default_factory=list)
    _round_c2s: int = 0
    _round_s2c: int = 0

    def record_frame(self, direction: str, frame: bytes) -> None:
        n = len(frame)
        if n < HEADER_SIZE:
            raise ValueError("frame shorter than its header")
        if direction == CLIENT_TO_SERVER:
            self.client_to_server_bytes += n
            self._round_c2s += n
        elif direction == SERVER_TO_CLIENT:
            self.server_to_client_bytes += n
            self._round_s2c += n
        else:
            raise ValueError(f"unknown direction {direction!r}")
        self.counts[(direction, _TAG_NAMES.get(frame[5], "?"))] += 1

    def client_tap(self, kind: str, frame: bytes) -> None:
        """Transport tap for the client end: tx is upstream, rx downstream."""
        self.record_frame(CLIENT_TO_SERVER if kind == "tx" else SERVER_TO_CLIENT, frame)

    def end_round(self) -> tuple[int, int]:
        pair = (self._round_c2s, self._round_s2c)
        self.rounds.append(pair)
        self._round_c2s = self._round_s2c = 0
        return pair

    @property
    def total_bytes(self) -> int:
        return self.client_to_server_bytes + self.server_to_client_bytes


def forward_frame_bytes(batch: int, width: int, label_cols: int) -> int:
    return HEADER_SIZE + 1 + 4 + 8 + 8 * batch * width + 8 + 8 * batch * label_cols


def loss_frame_bytes() -> int:
    return HEADER_SIZE + 8


def grad_frame_bytes(batch: int, width: int) -> int:
    return HEADER_SIZE + 8 + 8 * batch * width


# --- convergence bound ----------------------------------------------------


@dataclass(frozen=True)
class TheoryParams:
    L_smooth: float
    sigma_c2: float
    sigma_s2: float
    d_c: int
    T: int
    Q: int
    eta: float
    lam: float

    def __post_init__(self):
        for name in ("L_smooth", "eta"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("d_c", "T", "Q"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("sigma_c2", "sigma_s2", "lam"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    @property
    def max_step(self) -> float:
        return min(3.0 / (4.0 * self.L_smooth), self.Q / (4.0 * self.L_smooth * self.d_c))

    @property
    def step_valid(self) -> bool:
        return self.eta <= self.max_step


def bound_terms(p: TheoryParams, F: float) -> tuple[float, float, float, float]:
    """(initialisation, server noise, client noise, ZO bias) terms."""
    L, eta = p.L_smooth, p.eta
    return (
        4.0 * F / (eta * p.T),
        2.0 * L * eta * p.sigma_s2,
        4.0 * eta * L * p.d_c * p.sigma_c2 / p.Q,
        L * L * p.lam**2 * p.d_c**3 / p.Q,
    )


def convergence_bound(p: TheoryParams, F: float) -> float:
    if not p.step_valid:
        warnings.warn(
            f"step {p.eta} exceeds the admissible max {p.max_step:.4g}; bound not guaranteed",
            stacklevel=2,
        )
    return sum(bound_terms(p, F))


def corollary_params(L: float, sigma_c2: float, sigma_s2: float, d_c: int, T: int, Q: int) -> TheoryParams:
    """Unified step sqrt(Q/(d_c T L)) and the largest admissible smoothing."""
    eta = math.sqrt(Q) / math.sqrt(d_c * T * L)
    lam = math.sqrt(math.sqrt(Q) / math.sqrt(d_c**5 * T * L**3))
    return TheoryParams(L, sigma_c2, sigma_s2, d_c, T, Q, eta, lam)


def corollary_terms(L, sigma_c2, sigma_s2, d_c, T, Q, F) -> tuple[float, float, float, float]:
    """The four rate terms in closed form, for cross-checking bound_terms."""
    return (
        4.0 * math.sqrt(d_c * L) / math.sqrt(T * Q) * F,
        2.0 * math.sqrt(L * Q) / math.sqrt(d_c * T) * sigma_s2,
        4.0 * math.sqrt(d_c * L) * sigma_c2 / math.sqrt(T * Q),
        math.sqrt(d_c * L) / math.sqrt(T * Q),
    )


@dataclass
class BoundReport:
    measured: float
    bound: float
    terms: tuple[float, float, float, float]
    step_valid: bool

    @property
    def ratio(self) -> float:
        return self.measured / self.bound

    @property
    def violated(self) -> bool:
        return self.measured > self.bound

    def __str__(self):
        flag = "VIOLATED" if self.violated else "ok"
        return f"measured={self.measured:.6g} bound={self.bound:.6g} ratio={self.ratio:.4f} {flag}"


def bound_check(log, params: TheoryParams) -> BoundReport:
    """Compare a run's stationarity measure against the theoretical bound.

    The measure is (1/T) * sum_{t=0}^{T} ||grad L(theta^t)||^2 and F is the
    run's own L(theta^0) - L(theta^T).
    """
    norms = log.grad_norms()
    if any(math.isnan(v) for v in norms):
        raise ValueError("log has no gradient-norm instrumentation")
    measured = sum(norms) / params.T
    F = log.F
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        terms = bound_terms(params, F)
    return BoundReport(measured, sum(terms), terms, params.step_valid)
