"""Command-line entry points.

One binary per node role plus the PoS client, the scenario simulator and the
throughput benchmark. All of them read the same JSON network config. Also
usable as `python -m bionet.cli <role> ...`.
"""

from __future__ import annotations

import argparse
import json
import logging
import signal
import sys
import threading

from .bench import bench_match, host_parallel_capacity
from .capacity import CapacityInputs, capacity_model
from .config import load_config
from .errors import BioNetError, TransportError
from .gateway import GatewayNode
from .issuer import IssuerNode
from .pos import PosClient
from .shard import ShardNode
from .sim import SimConfig, run_sim
from .templates import generate_template, encode_template
from .transport import TcpTransport
from .wire import Decision, valid_pin


def _serve_forever():
    stop = threading.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: stop.set())
    stop.wait()


def _common(parser: argparse.ArgumentParser):
    parser.add_argument("--config", required=True, help="network config JSON")
    parser.add_argument("--log-level", default="INFO")


def shard_main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="bionet-shard",
                                     description="run one BioNet shard member")
    _common(parser)
    parser.add_argument("--shard", type=int, required=True)
    parser.add_argument("--cluster-member", type=int, default=0)
    parser.add_argument("--snapshot", help="load enrollment snapshot directory")
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level)
    config = load_config(args.config)
    node = ShardNode(config, args.shard, args.cluster_member, TcpTransport())
    if args.snapshot:
        node.load_state(args.snapshot)
    node.start()
    logging.info("shard %d member %d listening on %s",
                 args.shard, args.cluster_member, node.address)
    _serve_forever()
    return 0


def gateway_main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="bionet-gateway",
                                     description="run the acquirer gateway")
    _common(parser)
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level)
    node = GatewayNode(load_config(args.config), TcpTransport())
    node.start()
    logging.info("gateway listening on %s", node.address)
    _serve_forever()
    return 0


def issuer_main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="bionet-issuer",
                                     description="run one issuer bank")
    _common(parser)
    parser.add_argument("--bank", required=True, help="issuer id, 16 hex chars")
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level)
    node = IssuerNode(load_config(args.config), bytes.fromhex(args.bank), TcpTransport())
    node.start()
    logging.info("issuer %s listening on %s", args.bank, node.address)
    _serve_forever()
    return 0


def pos_main(argv=None) -> int:
    """Exit code 0 on ALLOW, 1 on DENY, 2 on usage/transport errors."""
    parser = argparse.ArgumentParser(prog="bionet-pos",
                                     description="swipe: run one PoS transaction")
    _common(parser)
    parser.add_argument("--pin", required=True)
    parser.add_argument("--template", required=True, help=".biot file")
    parser.add_argument("--amount", type=int, required=True, help="minor units")
    parser.add_argument("--merchant", required=True, help="merchant id, 16 hex chars")
    parser.add_argument("--gateway", help="override the config's gateway address")
    parser.add_argument("--select", type=int,
                        help="pre-answer an account challenge (1-based)")
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level)
    if not valid_pin(args.pin):
        parser.error(f"pin {args.pin!r} must be exactly 4 digits")  # exits 2
    if args.amount <= 0:
        parser.error("amount must be positive")
    try:
        template = open(args.template, "rb").read()
    except OSError as exc:
        parser.error(str(exc))
    config = load_config(args.config)
    client = PosClient(config, TcpTransport(), gateway_address=args.gateway)

    def select(choices):
        refs = choices.account_refs
        if args.select is not None and 1 <= args.select <= len(refs):
            return refs[args.select - 1]
        print("multiple accounts on file:")
        for i, ref in enumerate(refs, start=1):
            print(f"  {i}: {ref.hex()}")
        while True:
            answer = input(f"select account [1-{len(refs)}]: ").strip()
            if answer.isdigit() and 1 <= int(answer) <= len(refs):
                return refs[int(answer) - 1]

    try:
        result = client.transact(args.pin, template, args.amount,
                                 bytes.fromhex(args.merchant), select=select)
    except (TransportError, BioNetError) as exc:
        print(f"transport error: {exc}", file=sys.stderr)
        return 2
    verdict = result.verdict
    print(f"{'ALLOW' if verdict.decision is Decision.ALLOW else 'DENY'} "
          f"({verdict.reason.name}) txn={result.txn_id.hex()}")
    return 0 if verdict.decision is Decision.ALLOW else 1


def sim_main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="bionet-sim",
                                     description="run the end-to-end scenario simulator")
    parser.add_argument("--config", help="JSON file with a sim config (optional)")
    parser.add_argument("--seed", type=int, required=True)
    parser.add_argument("--transport", choices=("in_process", "tcp"))
    parser.add_argument("--transactions", type=int)
    parser.add_argument("--identities", type=int)
    parser.add_argument("--shards", type=int)
    parser.add_argument("--cluster-size", type=int)
    parser.add_argument("--log-level", default="WARNING")
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level)

    doc = {}
    if args.config:
        doc = json.loads(open(args.config).read())
        doc = doc.get("sim", doc)
    doc["seed"] = args.seed
    for flag, key in (("transport", "transport"), ("transactions", "transactions"),
                      ("identities", "identities"), ("shards", "shard_count"),
                      ("cluster_size", "cluster_size")):
        value = getattr(args, flag)
        if value is not None:
            doc[key] = value
    run = run_sim(SimConfig.from_dict(doc))
    print(json.dumps(run.report.to_dict(), indent=2, sort_keys=True))
    return 0


def bench_main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="bionet-bench",
                                     description="matching throughput benchmark")
    parser.add_argument("--store", type=int, required=True)
    parser.add_argument("--workers", type=int, required=True)
    parser.add_argument("--seed", type=int, required=True)
    parser.add_argument("--rounds", type=int)
    parser.add_argument("--capacity", action="store_true",
                        help="also print the paper-scale capacity arithmetic "
                             "and measured host parallel capacity")
    args = parser.parse_args(argv)
    report = bench_match(args.store, args.workers, args.seed, rounds=args.rounds)
    doc = report.summary()
    if args.capacity:
        full_scale = capacity_model(CapacityInputs(
            servers=10_000, matches_per_second=4_000_000,
            templates_per_server=1_000_000, cluster_size=1))
        doc["full_scale_tps"] = full_scale.tps
        doc["full_scale_templates"] = full_scale.total_templates
        doc["host_parallel_capacity"] = round(host_parallel_capacity(args.workers), 2)
    print(json.dumps(doc, indent=2, sort_keys=True))
    return 0


def admin_main(argv=None) -> int:
    """Bank/authority-side helpers: make templates, enroll, set flags."""
    parser = argparse.ArgumentParser(prog="bionet-admin")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-template", help="write a synthetic .biot file")
    gen.add_argument("--seed", type=int, required=True)
    gen.add_argument("--minutiae", type=int, default=40)
    gen.add_argument("--out", required=True)

    enroll = sub.add_parser("enroll", help="enroll a template into its shard")
    _common(enroll)
    enroll.add_argument("--pin", required=True)
    enroll.add_argument("--identity", required=True, help="32 hex chars")
    enroll.add_argument("--template", required=True)
    enroll.add_argument("--issuer", required=True, help="16 hex chars")
    enroll.add_argument("--branch", default="00" * 8)
    enroll.add_argument("--accounts", required=True,
                        help="comma-separated 32-hex-char refs")

    flag = sub.add_parser("flag", help="set or clear an identity's red flag")
    _common(flag)
    flag.add_argument("--pin", required=True)
    flag.add_argument("--identity", required=True)
    flag.add_argument("--clear", action="store_true")

    args = parser.parse_args(argv)
    if args.command == "gen-template":
        template = generate_template(seed=args.seed, n=args.minutiae)
        with open(args.out, "wb") as fh:
            fh.write(encode_template(template))
        print(f"wrote {args.out} ({args.minutiae} minutiae)")
        return 0

    import secrets
    from .config import AUTHORITY_SENDER, BANK_SENDER
    from .wire import (EnrollReq, FlagReq, LinkKey, RoutingHeader, decode_frame,
                       open_frame, route_pin, seal_message, ErrorMsg)
    config = load_config(args.config)
    transport = TcpTransport()
    if not valid_pin(args.pin):
        parser.error("pin must be 4 digits")
    address = config.shard_coordinator(route_pin(args.pin, config.shard_count))
    if address is None:
        print("no shard configured for that pin", file=sys.stderr)
        return 2

    if args.command == "enroll":
        msg = EnrollReq(
            identity_id=bytes.fromhex(args.identity),
            template=open(args.template, "rb").read(),
            issuer_id=bytes.fromhex(args.issuer),
            branch_id=bytes.fromhex(args.branch),
            account_refs=tuple(bytes.fromhex(ref) for ref in args.accounts.split(",")))
        key = LinkKey(config.keys["bank"], BANK_SENDER)
        sender = BANK_SENDER
    else:
        msg = FlagReq(bytes.fromhex(args.identity), not args.clear)
        key = LinkKey(config.keys["authority"], AUTHORITY_SENDER)
        sender = AUTHORITY_SENDER

    header = RoutingHeader(pin=args.pin, txn_id=secrets.token_bytes(16), sender_id=sender)
    try:
        raw = transport.request(address, seal_message(msg, header, key))
        reply = open_frame(decode_frame(raw)[0], key)
    except (TransportError, BioNetError) as exc:
        print(f"transport error: {exc}", file=sys.stderr)
        return 2
    if isinstance(reply, ErrorMsg):
        print(f"rejected: code={reply.code} {reply.detail}", file=sys.stderr)
        return 1
    print(reply)
    return 0


_ROLES = {
    "shard": shard_main,
    "gateway": gateway_main,
    "issuer": issuer_main,
    "pos": pos_main,
    "sim": sim_main,
    "bench": bench_main,
    "admin": admin_main,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    if not argv or argv[0] not in _ROLES:
        print(f"usage: python -m bionet.cli {{{','.join(_ROLES)}}} ...", file=sys.stderr)
        return 2
    return _ROLES[argv[0]](argv[1:])


if __name__ == "__main__":
    sys.exit(main())
