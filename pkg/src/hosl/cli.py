"""Command-line front end: ``hosl train | campaign | memreport``.

Exit codes: 0 success, 2 usage error, 3 runtime or transport error.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
import warnings

from .accounting import (
    CLIENT_CUDA_MB,
    GIB,
    MIB,
    SERVER_CUDA_MB,
    ModelSpec,
    client_memory_zo,
    server_memory_fo,
)
from .campaign import CampaignSpec, run_campaign
from .data import DatasetSpec
from .model import ConfigError, LayerSpec
from .protocol import ProtocolError, TcpListener, TransportError, parse_address, tcp_connect
from .roles import TrainingConfig, run_endpoint, run_training

log = logging.getLogger("hosl")

EXIT_USAGE, EXIT_RUNTIME = 2, 3


class UsageError(Exception):
    pass


def parse_layers(text: str) -> tuple[LayerSpec, ...]:
    """``"4,8:tanh,3"`` -> 4->8 tanh, 8->3 identity."""
    tokens = [t.strip() for t in text.split(",") if t.strip()]
    if len(tokens) < 2:
        raise UsageError("--layers needs an input width and at least one layer")
    try:
        width = int(tokens[0])
        layers = []
        for tok in tokens[1:]:
            size, _, act = tok.partition(":")
            out = int(size)
            layers.append(LayerSpec(width, out, act or "identity"))
            width = out
    except (ValueError, ConfigError) as exc:
        raise UsageError(f"bad --layers {text!r}: {exc}") from None
    return tuple(layers)


def _mode(text: str) -> str:
    mode = text.replace("-", "_")
    if mode not in ("zo_fo", "zo_zo", "fo_fo"):
        raise argparse.ArgumentTypeError(f"invalid mode {text!r}")
    return mode


def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(t) for t in text.split(",") if t)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated ints, got {text!r}") from None


def _mode_list(text: str) -> tuple[str, ...]:
    return tuple(_mode(t) for t in text.split(",") if t)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_training_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--q", type=int, default=10)
    p.add_argument("--eps", type=float, default=1e-3)
    p.add_argument("--lr-client", type=float, default=1e-2)
    p.add_argument("--lr-server", type=float, default=1e-2)
    p.add_argument("--split-layer", type=int, default=None,
                   help="cut layer; for the quadratic dataset, the client coefficient count d_c")
    p.add_argument("--layers", default=None, help="input width then width[:activation], e.g. 4,8:tanh,1")
    p.add_argument("--loss", choices=("mse", "xent"), default=None)
    p.add_argument("--iters", type=int, default=100)
    p.add_argument("--batch", type=int, default=0, help="minibatch size; 0 = full batch")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dataset", choices=("quadratic", "linreg", "blobs"), default="quadratic")
    p.add_argument("--dim", type=int, default=64, help="feature count for the quadratic dataset")
    p.add_argument("--samples", type=int, default=128)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--transport", choices=("inproc", "tcp"), default="inproc")
    p.add_argument("--out", default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hosl", description="Hybrid-order split learning at desk scale.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    train = sub.add_parser("train", help="run one training session")
    train.add_argument("--mode", type=_mode, required=True, help="zo-fo | zo-zo | fo-fo")
    _add_training_flags(train)
    role = train.add_mutually_exclusive_group()
    role.add_argument("--listen", metavar="HOST:PORT", help="run only the server endpoint")
    role.add_argument("--connect", metavar="HOST:PORT", help="run only the client endpoint")

    camp = sub.add_parser("campaign", help="sweep modes, Q, cuts and seeds")
    camp.add_argument("--mode", type=_mode_list, default=("zo_fo",), help="comma list of modes")
    camp.add_argument("--qs", type=_int_list, default=None, help="comma list of Q (default: --q)")
    camp.add_argument("--splits", type=_int_list, default=None, help="comma list of cuts")
    camp.add_argument("--seeds", type=_int_list, default=(0,))
    camp.add_argument("--jobs", type=int, default=1)
    camp.add_argument("--timing", action="store_true", help="record wall time (breaks byte-identical reruns)")
    _add_training_flags(camp)

    mem = sub.add_parser("memreport", help="analytic peak-memory breakdown")
    mem.add_argument("--spec-file", help="key=value file of ModelSpec fields")
    mem.add_argument("--client-cuda-mb", type=float, default=CLIENT_CUDA_MB)
    mem.add_argument("--server-cuda-mb", type=float, default=SERVER_CUDA_MB)
    for f in dataclasses.fields(ModelSpec):
        mem.add_argument(f"--{f.name}", dest=f"spec_{f.name}", type=int, default=None)
    return parser


def config_from_args(args) -> TrainingConfig:
    if args.dataset == "quadratic":
        if args.layers:
            raise UsageError("--layers does not apply to the quadratic dataset (use --dim)")
        layers: tuple[LayerSpec, ...] = ()
        dataset = DatasetSpec("quadratic", args.dim, 1, args.samples, args.noise, args.data_seed)
        cut = args.split_layer if args.split_layer is not None else max(1, args.dim // 4)
        loss = "mse"
    else:
        layers = parse_layers(args.layers or "4,16:tanh,1")
        loss = args.loss or ("xent" if args.dataset == "blobs" else "mse")
        n_out = layers[-1].output_dim
        dataset = DatasetSpec(args.dataset, layers[0].input_dim, n_out, args.samples, args.noise, args.data_seed)
        cut = args.split_layer if args.split_layer is not None else 1
    mode = args.mode if isinstance(args.mode, str) else args.mode[0]
    if mode == "fo_fo" and args.q != 10:
        log.info("--q %d is inert in fo-fo mode", args.q)
    if mode != "fo_fo" and not args.eps > 0:
        raise UsageError("--eps must be positive")
    if not (args.lr_client > 0 and args.lr_server > 0):
        raise UsageError("learning rates must be positive")
    try:
        return TrainingConfig(
            mode=mode, T=args.iters, Q=args.q, eps=args.eps,
            lr_client=args.lr_client, lr_server=args.lr_server,
            batch_size=args.batch, master_seed=args.seed, layers=layers, cut=cut,
            loss=loss, dataset=dataset, transport=args.transport,
            record_time=getattr(args, "timing", True),
        )
    except ConfigError as exc:
        raise UsageError(str(exc)) from None


def parse_config(argv: list[str]):
    """Parse argv into (command, TrainingConfig | None, CampaignSpec | None, args)."""
    args = build_parser().parse_args(argv)
    if args.command == "memreport":
        return args.command, None, None, args
    config = config_from_args(args)
    campaign = None
    if args.command == "campaign":
        campaign = CampaignSpec(
            base=config,
            modes=args.mode,
            qs=args.qs or (args.q,),
            cuts=args.splits or (config.cut,),
            seeds=args.seeds,
            out_dir=args.out or "runs",
            jobs=args.jobs,
        )
    return args.command, config, campaign, args


def read_spec_file(path: str) -> dict:
    values = {}
    with open(path) as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, val = line.partition("=")
            if not sep:
                raise UsageError(f"{path}: expected key=value, got {line!r}")
            values[key.strip()] = val.strip()
    return values


def memory_report(spec: ModelSpec, client_cuda_mb=CLIENT_CUDA_MB, server_cuda_mb=SERVER_CUDA_MB) -> str:
    """Aligned table followed by machine-readable key=value lines."""
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        spec.check()
    client = client_memory_zo(spec, client_cuda_mb)
    server = server_memory_fo(spec, server_cuda_mb)
    lines = [f"{'component':<14}{'client (ZO) MiB':>18}{'server (FO) MiB':>18}"]
    for (name, c), (_, s) in zip(client.items(), server.items()):
        lines.append(f"{name:<14}{c / MIB:>18.1f}{s / MIB:>18.1f}")
    lines.append(f"{'total':<14}{client.total / MIB:>18.1f}{server.total / MIB:>18.1f}")
    lines.append(f"{'total GiB':<14}{client.total / GIB:>18.3f}{server.total / GIB:>18.3f}")
    for w in caught:
        lines.append(f"warning: {w.message}")
    for note in client.notes + server.notes:
        lines.append(f"note: {note}")
    lines.append("")
    for side, bd in (("client", client), ("server", server)):
        for name, v in bd.items():
            lines.append(f"{side}.{name}={v}")
        lines.append(f"{side}.total={bd.total}")
    return "\n".join(lines)


def _memreport(args) -> int:
    values = read_spec_file(args.spec_file) if args.spec_file else {}
    for f in dataclasses.fields(ModelSpec):
        v = getattr(args, f"spec_{f.name}")
        if v is not None:
            values[f.name] = v
    try:
        spec = ModelSpec.from_mapping(values)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    print(memory_report(spec, args.client_cuda_mb, args.server_cuda_mb))
    return 0


def _train(config: TrainingConfig, args) -> int:
    if args.listen or args.connect:
        if args.listen:
            host, port = parse_address(args.listen)
            listener = TcpListener(host, port)
            log.info("server listening on %s:%d", host, listener.port)
            transport = listener.accept()
            listener.close()
            run_endpoint(config, "server", transport)
            return 0
        transport = tcp_connect(*parse_address(args.connect))
        train_log = run_endpoint(config, "client", transport)
    else:
        train_log = run_training(config)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        path = os.path.join(args.out, "trainlog.csv")
        train_log.write_csv(path)
        log.info("wrote %s", path)
    last = train_log.records[-1]
    print(
        f"mode={config.mode} T={config.T} initial_loss={train_log.records[0].loss:.6g} "
        f"final_loss={train_log.final_loss:.6g} "
        f"client_to_server_bytes={train_log.ledger.client_to_server_bytes} "
        f"server_to_client_bytes={train_log.ledger.server_to_client_bytes} "
        f"elapsed_ms={last.elapsed_ms:.1f}"
    )
    return 0


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(
        level=os.environ.get("HOSL_LOG", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s",
    )
    argv = sys.argv[1:] if argv is None else argv
    try:
        command, config, campaign, args = parse_config(argv)
        if command == "memreport":
            return _memreport(args)
        if command == "campaign":
            summary = run_campaign(campaign)
            print(f"summary: {summary}")
            return 0
        return _train(config, args)
    except UsageError as exc:
        print(f"hosl: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TransportError, ProtocolError, OSError) as exc:
        print(f"hosl: runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
