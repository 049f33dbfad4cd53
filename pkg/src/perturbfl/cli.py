"""Command-line entry points.

Exit codes: 0 ok, 1 verification failure, 2 ingestion, 3 protocol,
4 timeout, 5 usage. Set ``PERTURBFL_LOG_LEVEL`` (e.g. ``INFO``) for logs on
stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import attacks
from .client import injected_sigma_order_bug, local_update
from .config import RunConfig
from .data import build_federated
from .errors import PerturbFLError, UsageError
from .model import LayerDims, init_params
from .net import PROTO_VERSION, TcpServerChannel, run_tcp_client
from .perturbation import NoiseConfig, perturb, sample_noise
from .server import make_client, manifest, run_training, write_outputs
from .verify import run_battery, random_instance

log = logging.getLogger("perturbfl")

EXIT_OK = 0
EXIT_VERIFY = 1
EXIT_USAGE = 5


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _dims(text: str) -> tuple[int, ...]:
    try:
        dims = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated widths, got {text!r}")
    if len(dims) < 3 or min(dims) < 1:
        raise argparse.ArgumentTypeError("need at least input, one hidden and output width, all positive")
    return dims


def _emit(report: dict, out: str | None) -> None:
    text = json.dumps(report, indent=2)
    if out:
        Path(out).write_text(text + "\n", encoding="utf-8")
    print(text)


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config)
    over = {k: getattr(args, k, None) for k in ("mode", "rounds", "clients", "lr", "seed", "m",
                                                "metrics_csv", "manifest", "host", "port", "timeout_s")}
    return cfg.with_overrides(**over)


# -- commands -----------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = _load_config(args)
    if cfg.transport.kind != "inproc":
        raise UsageError("train runs in-proc; use serve/join for the TCP transport")
    result = run_training(cfg)
    write_outputs(cfg, result)
    man = manifest(cfg, result)
    print(json.dumps({k: man[k] for k in ("mode", "dims", "rounds_completed", "final_param_hash")}))
    return EXIT_OK


def cmd_serve(args) -> int:
    cfg = _load_config(args).with_overrides(transport_kind="tcp")
    t = cfg.transport
    ch = TcpServerChannel(t.host, t.port, cfg.clients, t.timeout_s, t.max_frame)
    host, port = ch.address
    log.info("listening on %s:%d for %d clients", host, port, cfg.clients)
    if args.port_file:
        Path(args.port_file).write_text(f"{port}\n", encoding="utf-8")
    print(f"listening {host}:{port}", flush=True)
    try:
        ch.open()
        result = run_training(cfg, channel=ch)
    finally:
        ch.close()
    write_outputs(cfg, result)
    man = manifest(cfg, result)
    print(json.dumps({k: man[k] for k in ("mode", "dims", "rounds_completed", "final_param_hash")}))
    return EXIT_OK


def cmd_join(args) -> int:
    cfg = _load_config(args)
    if not 0 <= args.client_id < cfg.clients:
        raise UsageError(f"client id must be in [0, {cfg.clients}), got {args.client_id}")
    data = build_federated(cfg.dataset, cfg.clients, cfg.split, cfg.seed)
    client = make_client(cfg, data, args.client_id)
    t = cfg.transport
    rounds = run_tcp_client(t.host, t.port, client, timeout_s=t.timeout_s,
                            proto_version=args.proto_version, max_frame=t.max_frame)
    print(json.dumps({"client_id": args.client_id, "rounds": rounds}))
    return EXIT_OK


def cmd_verify(args) -> int:
    sizes = args.sizes or None
    if args.inject_bug:
        with injected_sigma_order_bug():
            report = run_battery(args.seed, args.count, sizes)
    else:
        report = run_battery(args.seed, args.count, sizes)
    _emit(report.to_dict(), args.out)
    if not report.ok:
        seeds = sorted({s for s, _, _ in report.failures})
        print(f"verification FAILED; offending instance seeds: {seeds[:10]}", file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


def _noise(args) -> NoiseConfig:
    return NoiseConfig(gamma_high=args.gamma_high) if args.gamma_high is not None else attacks.WIDE_NOISE


def _attack_argmax(args, rng) -> dict:
    names = list(attacks.STRATEGIES) if args.strategy == "all" else [args.strategy]
    reports = []
    for name in names:
        r = attacks.argmax_guess_experiment(args.nl, args.m, args.trials, name, rng, _noise(args))
        if r == attacks.NOT_APPLICABLE:
            return {"m": args.m, "nL": args.nl, "trials": args.trials, "strategy": args.strategy,
                    "result": attacks.NOT_APPLICABLE}
        reports.append(r.to_dict())
    return reports[0] if len(reports) == 1 else {"reports": reports}


def _attack_ambiguity(args, rng) -> dict:
    dims = LayerDims(args.dims)
    w = init_params(dims, rng, 1.0)
    pm = perturb(w, sample_noise(dims, args.m, rng, _noise(args)))
    flats, worst = [], 0.0
    for _ in range(args.count):
        wit = attacks.ambiguity_witness(pm, rng, _noise(args))
        worst = max(worst, wit.reperturb_error())
        flats.append(wit.alternative_params.flat())
    true = w.flat()
    pair_gap = min((float(np.max(np.abs(a - b))) for i, a in enumerate(flats) for b in flats[i + 1:]),
                   default=float("inf"))
    true_gap = min(float(np.max(np.abs(a - true))) for a in flats)
    return {
        "dims": list(dims.dims),
        "count": args.count,
        "max_reperturb_error": worst,
        "min_pairwise_gap": pair_gap,
        "min_gap_from_true": true_gap,
        "valid": worst <= 1e-12 and pair_gap > 1e-6 and true_gap > 1e-6,
    }


def _attack_grad(args, rng) -> dict:
    inst = random_instance(int(rng.integers(2**31)), LayerDims(args.dims), _noise(args))
    pm = perturb(inst.params, inst.secret)
    observed = attacks.ObservedUpload.from_update(pm, local_update(pm, inst.shard))
    ga = attacks.gradient_ambiguity(observed, rng, max(args.count, 2), _noise(args))
    return {
        "dims": list(args.dims),
        "count": len(ga.secrets),
        "reproduction_error": ga.reproduction_error,
        "min_pairwise_gap": ga.min_pairwise_gap,
        "ambiguous": ga.ambiguous,
    }


def cmd_attack(args) -> int:
    rng = np.random.default_rng(args.seed)
    run = {"argmax": _attack_argmax, "ambiguity": _attack_ambiguity, "grad-ambiguity": _attack_grad}
    if args.kind in ("ambiguity", "grad-ambiguity") and args.m is not None and args.m > args.dims[-1]:
        raise UsageError(f"m={args.m} exceeds the output width {args.dims[-1]}")
    _emit(run[args.kind](args, rng), args.out)
    return EXIT_OK


# -- parser -------------------------------------------------------------------


def _run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="JSON run config")
    p.add_argument("--mode", choices=("plain", "perturbed"))
    p.add_argument("--rounds", type=int)
    p.add_argument("--clients", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--m", type=int, help="number of output groups")
    p.add_argument("--metrics-csv", dest="metrics_csv")
    p.add_argument("--manifest")
    p.add_argument("--host")
    p.add_argument("--port", type=int)
    p.add_argument("--timeout", dest="timeout_s", type=float, help="seconds")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="perturbfl", description="Federated training with exact gradient recovery under model masking.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="run an in-proc federated training")
    _run_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("serve", help="run the server role over TCP")
    _run_flags(p)
    p.add_argument("--port-file", help="write the bound port here once listening")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("join", help="run one client role over TCP")
    _run_flags(p)
    p.add_argument("--client-id", type=int, required=True)
    p.add_argument("--proto-version", type=int, default=PROTO_VERSION, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_join)

    p = sub.add_parser("verify", help="run the invariant battery")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--sizes", type=_dims, action="append", help="layer widths, e.g. 17,32,16,1 (repeatable)")
    p.add_argument("--out")
    p.add_argument("--inject-bug", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("attack", help="run an attack experiment and emit a JSON report")
    p.add_argument("kind", choices=("ambiguity", "argmax", "grad-ambiguity"))
    p.add_argument("--nl", type=int, default=10, help="output width for argmax")
    p.add_argument("--m", type=int, help="number of output groups")
    p.add_argument("--trials", type=int, default=10_000)
    p.add_argument("--count", type=int, default=10, help="witnesses / candidate secrets")
    p.add_argument("--strategy", default="argmax", choices=sorted(attacks.STRATEGIES) + ["all"])
    p.add_argument("--dims", type=_dims, default=(20, 64, 32, 10))
    p.add_argument("--gamma-high", type=float, help="largest |gamma| (default 1e3)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_attack)
    return parser


def main(argv=None) -> int:
    level = os.environ.get("PERTURBFL_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(
        level=level if isinstance(logging.getLevelName(level), int) else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    args = build_parser().parse_args(argv)
    if args.command == "attack" and args.kind == "argmax" and args.m is None:
        args.m = args.nl
    try:
        return args.func(args)
    except PerturbFLError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
