"""End-to-end scenario simulator.

Boots a full deployment (shards with optional clusters, gateway, issuers),
enrolls a seeded population through the bank links, flags a subset through
the authority link, then drives a mixed transaction load through the PoS
path and reconciles the outcomes.

With the in_process transport every node lives in this process behind a
loopback hub and a single driver issues transactions sequentially, so a
fixed seed gives a byte-identical outcome report (timing fields are reported
but excluded from the canonical form). The tcp transport spawns each node as
a subprocess running the real CLI binaries and speaks to them over real
sockets; outcome counts match the in_process run for the same seed.
"""

from __future__ import annotations

import json
import math
import random
import secrets
import subprocess
import sys
import tempfile
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

from .config import (
    AUTHORITY_SENDER,
    BANK_SENDER,
    AccountSeed,
    IssuerConfig,
    NetworkConfig,
    Timeouts,
    dump_config,
)
from .errors import ConfigInvalid, TransportError
from .gateway import GatewayNode
from .issuer import IssuerNode
from .matcher import MatcherParams
from .pos import PosClient
from .shard import AuditKind, ShardNode
from .templates import PerturbationParams, Template, encode_template, generate_template, perturb
from .transport import LoopbackTransport, TcpTransport, free_tcp_ports
from .wire import (
    Decision,
    EnrollAck,
    EnrollReq,
    FlagAck,
    FlagReq,
    LinkKey,
    Reason,
    RoutingHeader,
    decode_frame,
    open_frame,
    route_pin,
    seal_message,
)

IN_PROCESS = "in_process"
TCP = "tcp"

DEFAULT_PERTURBATION = PerturbationParams(
    pos_sigma=4.0, angle_sigma=math.radians(5.0), dropout_prob=0.1, spurious_count=2)


@dataclass(frozen=True)
class TransactionMix:
    genuine_funded: float = 0.60
    genuine_underfunded: float = 0.15
    impostor: float = 0.20
    flagged_genuine: float = 0.05

    def __post_init__(self):
        total = (self.genuine_funded + self.genuine_underfunded
                 + self.impostor + self.flagged_genuine)
        if abs(total - 1.0) > 1e-9:
            raise ConfigInvalid(f"transaction mix sums to {total}, not 1")


@dataclass(frozen=True)
class SimConfig:
    seed: int
    shard_count: int = 16
    cluster_size: int = 1
    identities: int = 200
    transactions: int = 400
    two_account_fraction: float = 0.10
    flagged_fraction: float = 0.05
    issuer_count: int = 2
    initial_balance: int = 10_000_000
    minutiae: int = 40
    mix: TransactionMix = field(default_factory=TransactionMix)
    perturbation: PerturbationParams = DEFAULT_PERTURBATION
    matcher: MatcherParams = field(default_factory=MatcherParams)
    transport: str = IN_PROCESS
    replay_probes: int = 3

    def __post_init__(self):
        if self.identities < 1 or self.transactions < 0:
            raise ConfigInvalid("identities must be >= 1 and transactions >= 0")
        if self.transport not in (IN_PROCESS, TCP):
            raise ConfigInvalid(f"unknown transport {self.transport!r}")
        if self.mix.flagged_genuine > 0 and self.flagged_fraction <= 0:
            raise ConfigInvalid("flagged transactions need flagged_fraction > 0")

    @classmethod
    def from_dict(cls, doc: dict) -> "SimConfig":
        doc = dict(doc)
        if "mix" in doc:
            doc["mix"] = TransactionMix(**doc["mix"])
        if "perturbation" in doc:
            doc["perturbation"] = PerturbationParams(**doc["perturbation"])
        if "matcher" in doc:
            doc["matcher"] = MatcherParams.from_dict(doc["matcher"])
        return cls(**doc)


@dataclass
class SimReport:
    seed: int
    transport: str
    transactions: int
    enrolled: int
    outcome_counts: dict[str, int]
    genuine_trials: int
    genuine_misses: int             # biometric misses (NO_MATCH/AMBIGUOUS denials)
    impostor_trials: int
    impostor_hits: int              # impostors that got past the biometric stage
    fmr: float
    fnmr: float
    choice_roundtrips: int
    flagged_matches: int            # flagged genuine transactions that matched
    replay_probes: int
    replay_denied: int
    verdict_errors: list[str]       # non-biometric verdicts that broke expectations
    audit_summary: Optional[dict[str, int]]
    latency_ms_p50: float = 0.0     # informational, excluded from canonical form
    latency_ms_p95: float = 0.0
    latency_ms_p99: float = 0.0
    wall_s: float = 0.0

    def canonical_dict(self) -> dict:
        """The deterministic portion: same seed, same bytes (in_process)."""
        return {
            "seed": self.seed,
            "transactions": self.transactions,
            "enrolled": self.enrolled,
            "outcome_counts": dict(sorted(self.outcome_counts.items())),
            "genuine_trials": self.genuine_trials,
            "genuine_misses": self.genuine_misses,
            "impostor_trials": self.impostor_trials,
            "impostor_hits": self.impostor_hits,
            "fmr": self.fmr,
            "fnmr": self.fnmr,
            "choice_roundtrips": self.choice_roundtrips,
            "flagged_matches": self.flagged_matches,
            "replay_probes": self.replay_probes,
            "replay_denied": self.replay_denied,
            "verdict_errors": self.verdict_errors,
            "audit_summary": self.audit_summary,
        }

    def canonical_json(self) -> str:
        return json.dumps(self.canonical_dict(), sort_keys=True)

    def to_dict(self) -> dict:
        doc = self.canonical_dict()
        doc.update({
            "transport": self.transport,
            "latency_ms_p50": self.latency_ms_p50,
            "latency_ms_p95": self.latency_ms_p95,
            "latency_ms_p99": self.latency_ms_p99,
            "wall_s": self.wall_s,
        })
        return doc


@dataclass
class Identity:
    identity_id: bytes
    pin: str
    template: Template
    issuer_id: bytes
    account_refs: tuple[bytes, ...]
    flagged: bool = False


@dataclass
class SimRun:
    report: SimReport
    config: SimConfig
    network: NetworkConfig
    shards: list[ShardNode] = field(default_factory=list)   # in_process only
    gateway: Optional[GatewayNode] = None
    issuers: list[IssuerNode] = field(default_factory=list)


def build_population(cfg: SimConfig, rng: random.Random) -> list[Identity]:
    identities = []
    issuer_ids = [bytes([0xA0 + i]) * 8 for i in range(cfg.issuer_count)]
    for k in range(cfg.identities):
        two_accounts = rng.random() < cfg.two_account_fraction
        refs = tuple(rng.randbytes(16) for _ in range(2 if two_accounts else 1))
        identities.append(Identity(
            identity_id=rng.randbytes(16),
            pin=f"{rng.randrange(10_000):04d}",
            template=generate_template(seed=rng.getrandbits(63), n=cfg.minutiae),
            issuer_id=issuer_ids[k % cfg.issuer_count],
            account_refs=refs,
        ))
    flagged_count = round(cfg.identities * cfg.flagged_fraction)
    for identity in rng.sample(identities, flagged_count):
        identity.flagged = True
    return identities


def build_network_config(cfg: SimConfig, identities: list[Identity],
                         rng: random.Random, addresses: dict) -> NetworkConfig:
    issuers: dict[bytes, IssuerConfig] = {}
    seen: dict[bytes, list[AccountSeed]] = {}
    for identity in identities:
        seeds = seen.setdefault(identity.issuer_id, [])
        for ref in identity.account_refs:
            seeds.append(AccountSeed(account_ref=ref, balance=cfg.initial_balance))
    for i in range(cfg.issuer_count):
        issuer_id = bytes([0xA0 + i]) * 8
        issuers[issuer_id] = IssuerConfig(
            issuer_id=issuer_id, address=addresses["issuers"][i],
            accounts=tuple(seen.get(issuer_id, ())))
    keys = {name: rng.randbytes(32)
            for name in ("pos", "gateway_shard", "shard_issuer", "bank",
                         "authority", "cluster")}
    return NetworkConfig(
        shard_count=cfg.shard_count,
        cluster_size=cfg.cluster_size,
        gateway_address=addresses["gateway"],
        shards=addresses["shards"],
        issuers=issuers,
        keys=keys,
        matcher=cfg.matcher,
        timeouts=Timeouts(),
    )


class _InProcessDeployment:
    def __init__(self, network: NetworkConfig):
        self.transport = LoopbackTransport()
        self.shards = []
        for index in network.shards:
            for member in range(network.cluster_size):
                node = ShardNode(network, index, member, self.transport)
                node.start()
                self.shards.append(node)
        self.issuers = [IssuerNode(network, issuer_id, self.transport)
                        for issuer_id in network.issuers]
        for issuer in self.issuers:
            issuer.start()
        self.gateway = GatewayNode(network, self.transport)
        self.gateway.start()

    def stop(self):
        self.transport.close()


class _SubprocessDeployment:
    """Every node is a real CLI subprocess listening on localhost TCP."""

    def __init__(self, network: NetworkConfig, workdir: Path):
        self.transport = TcpTransport()
        config_path = workdir / "network.json"
        config_path.write_text(json.dumps(dump_config(network)))
        self.procs: list[subprocess.Popen] = []
        logdir = workdir / "logs"
        logdir.mkdir(exist_ok=True)

        def spawn(name: str, *args: str):
            logfile = (logdir / f"{name}.log").open("w")
            proc = subprocess.Popen(
                [sys.executable, "-m", "bionet.cli", *args,
                 "--config", str(config_path)],
                stdout=logfile, stderr=subprocess.STDOUT)
            self.procs.append(proc)

        for index in network.shards:
            for member in range(network.cluster_size):
                spawn(f"shard-{index}-{member}", "shard", "--shard", str(index),
                      "--cluster-member", str(member))
        for issuer_id in network.issuers:
            spawn(f"issuer-{issuer_id.hex()[:4]}", "issuer", "--bank", issuer_id.hex())
        spawn("gateway", "gateway")
        self._await_listeners(network)

    def _await_listeners(self, network: NetworkConfig, timeout: float = 30.0):
        import socket
        pending = {addr for members in network.shards.values() for addr in members}
        pending.add(network.gateway_address)
        pending.update(i.address for i in network.issuers.values())
        deadline = time.time() + timeout
        while pending and time.time() < deadline:
            for address in list(pending):
                host, _, port = address.rpartition(":")
                try:
                    socket.create_connection((host, int(port)), timeout=0.2).close()
                    pending.discard(address)
                except OSError:
                    pass
            if pending:
                time.sleep(0.05)
        if pending:
            raise TransportError(f"nodes never came up: {sorted(pending)}")

    def stop(self):
        for proc in self.procs:
            proc.terminate()
        for proc in self.procs:
            try:
                proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                proc.kill()
        self.transport.close()


def _enroll_population(network: NetworkConfig, identities: list[Identity],
                       transport, rng: random.Random) -> int:
    bank_key = LinkKey(network.keys["bank"], BANK_SENDER)
    authority_key = LinkKey(network.keys["authority"], AUTHORITY_SENDER)
    enrolled = 0
    for identity in identities:
        shard = route_pin(identity.pin, network.shard_count)
        address = network.shard_coordinator(shard)
        header = RoutingHeader(pin=identity.pin, txn_id=rng.randbytes(16),
                               sender_id=BANK_SENDER)
        req = EnrollReq(identity.identity_id, encode_template(identity.template),
                        identity.issuer_id, b"BRANCH00", identity.account_refs)
        raw = transport.request(address, seal_message(req, header, bank_key))
        reply = open_frame(decode_frame(raw)[0], bank_key)
        if not isinstance(reply, EnrollAck):
            raise TransportError(f"enrollment failed: {reply}")
        enrolled += 1
        if identity.flagged:
            header = RoutingHeader(pin=identity.pin, txn_id=rng.randbytes(16),
                                   sender_id=AUTHORITY_SENDER)
            raw = transport.request(address, seal_message(
                FlagReq(identity.identity_id, True), header, authority_key))
            if not isinstance(open_frame(decode_frame(raw)[0], authority_key), FlagAck):
                raise TransportError("flagging failed")
    return enrolled


GENUINE_FUNDED = "genuine_funded"
GENUINE_UNDERFUNDED = "genuine_underfunded"
IMPOSTOR = "impostor"
FLAGGED_GENUINE = "flagged_genuine"

_BIOMETRIC_DENIALS = (Reason.NO_MATCH, Reason.AMBIGUOUS)


def run_sim(cfg: SimConfig) -> SimRun:
    """Boot, enroll, drive the transaction mix, and reconcile the report."""
    rng = random.Random(cfg.seed)
    identities = build_population(cfg, rng)

    if cfg.transport == IN_PROCESS:
        addresses = {
            "gateway": "loop://gateway",
            "shards": {i: tuple(f"loop://shard-{i}-{m}" for m in range(cfg.cluster_size))
                       for i in range(cfg.shard_count)},
            "issuers": [f"loop://issuer-{i}" for i in range(cfg.issuer_count)],
        }
        network = build_network_config(cfg, identities, rng, addresses)
        deployment = _InProcessDeployment(network)
        workdir = None
    else:
        ports = free_tcp_ports(cfg.shard_count * cfg.cluster_size + cfg.issuer_count + 1)
        it = iter(ports)
        addresses = {
            "shards": {i: tuple(f"127.0.0.1:{next(it)}" for _ in range(cfg.cluster_size))
                       for i in range(cfg.shard_count)},
            "issuers": [f"127.0.0.1:{next(it)}" for i in range(cfg.issuer_count)],
            "gateway": f"127.0.0.1:{next(it)}",
        }
        network = build_network_config(cfg, identities, rng, addresses)
        workdir = Path(tempfile.mkdtemp(prefix="bionet-sim-"))
        deployment = _SubprocessDeployment(network, workdir)

    start_wall = time.perf_counter()
    try:
        enrolled = _enroll_population(network, identities, deployment.transport, rng)
        report = _drive(cfg, network, identities, deployment, rng)
        report.enrolled = enrolled
        report.wall_s = round(time.perf_counter() - start_wall, 3)
        if cfg.transport == IN_PROCESS:
            report.audit_summary = _audit_summary(deployment.shards)
            return SimRun(report=report, config=cfg, network=network,
                          shards=deployment.shards, gateway=deployment.gateway,
                          issuers=deployment.issuers)
        return SimRun(report=report, config=cfg, network=network)
    finally:
        if cfg.transport == TCP:
            deployment.stop()


def _audit_summary(shards: list[ShardNode]) -> dict[str, int]:
    summary = {kind.value: 0 for kind in AuditKind}
    for node in shards:
        for event in node.audit.query():
            summary[event.kind.value] += 1
    return summary


def _drive(cfg: SimConfig, network: NetworkConfig, identities: list[Identity],
           deployment, rng: random.Random) -> SimReport:
    pos = PosClient(network, deployment.transport)
    flagged_pool = [i for i in identities if i.flagged]
    normal_pool = [i for i in identities if not i.flagged]
    balances = {ref: cfg.initial_balance
                for identity in identities for ref in identity.account_refs}

    kinds = [GENUINE_FUNDED, GENUINE_UNDERFUNDED, IMPOSTOR, FLAGGED_GENUINE]
    weights = [cfg.mix.genuine_funded, cfg.mix.genuine_underfunded,
               cfg.mix.impostor, cfg.mix.flagged_genuine]

    outcome_counts: dict[str, int] = {}
    verdict_errors: list[str] = []
    latencies: list[float] = []
    genuine_trials = genuine_misses = 0
    impostor_trials = impostor_hits = 0
    choice_roundtrips = flagged_matches = 0
    replayable: list[bytes] = []

    for t in range(cfg.transactions):
        kind = rng.choices(kinds, weights=weights)[0]
        if kind == FLAGGED_GENUINE and not flagged_pool:
            kind = GENUINE_FUNDED
        pool = flagged_pool if kind == FLAGGED_GENUINE else normal_pool
        target = rng.choice(pool)
        account_index = rng.randrange(len(target.account_refs))
        account_ref = target.account_refs[account_index]

        if kind == IMPOSTOR:
            probe_template = generate_template(seed=rng.getrandbits(63), n=cfg.minutiae)
            amount = rng.randrange(100, 5_000)
        else:
            probe_template = perturb(target.template, cfg.perturbation,
                                     seed=rng.getrandbits(63))
            if kind == GENUINE_UNDERFUNDED:
                amount = balances[account_ref] + rng.randrange(1, 100_000)
            else:
                amount = min(rng.randrange(100, 5_000), max(1, balances[account_ref]))

        txn_id = rng.randbytes(16)
        started = time.perf_counter()
        result = pos.transact(target.pin, encode_template(probe_template), amount,
                              merchant_id=rng.randbytes(8),
                              select=lambda ch: ch.account_refs[min(account_index,
                                                                    len(ch.account_refs) - 1)],
                              txn_id=txn_id)
        latencies.append((time.perf_counter() - started) * 1000.0)
        verdict = result.verdict
        label = f"{verdict.decision.name}:{verdict.reason.name}"
        outcome_counts[label] = outcome_counts.get(label, 0) + 1
        if result.choices is not None:
            choice_roundtrips += 1
        replayable.append(txn_id)

        if kind == IMPOSTOR:
            impostor_trials += 1
            if verdict.reason not in (*_BIOMETRIC_DENIALS, Reason.UNAVAILABLE):
                impostor_hits += 1
            continue

        genuine_trials += 1
        if verdict.reason in _BIOMETRIC_DENIALS:
            genuine_misses += 1
            continue
        # biometric stage passed: the financial verdict must be exact
        if kind == GENUINE_UNDERFUNDED:
            if verdict.reason is not Reason.INSUFFICIENT_FUNDS:
                verdict_errors.append(f"txn {t}: underfunded got {label}")
        else:
            if verdict.decision is not Decision.ALLOW:
                verdict_errors.append(f"txn {t}: funded got {label}")
            else:
                balances[account_ref] -= amount
        if kind == FLAGGED_GENUINE:
            flagged_matches += 1

    replay_denied = 0
    for txn_id in rng.sample(replayable, min(cfg.replay_probes, len(replayable))):
        target = rng.choice(normal_pool)
        probe = perturb(target.template, cfg.perturbation, seed=rng.getrandbits(63))
        result = pos.transact(target.pin, encode_template(probe),
                              amount=100, merchant_id=rng.randbytes(8), txn_id=txn_id)
        if result.verdict.reason is Reason.REPLAY:
            replay_denied += 1
        else:
            verdict_errors.append(
                f"replay of {txn_id.hex()[:8]} got {result.verdict.reason.name}")

    latencies.sort()

    def pct(q: float) -> float:
        if not latencies:
            return 0.0
        return round(latencies[min(len(latencies) - 1, int(q * len(latencies)))], 3)

    total_genuine = max(genuine_trials, 1)
    total_impostor = max(impostor_trials, 1)
    return SimReport(
        seed=cfg.seed, transport=cfg.transport, transactions=cfg.transactions,
        enrolled=0, outcome_counts=outcome_counts,
        genuine_trials=genuine_trials, genuine_misses=genuine_misses,
        impostor_trials=impostor_trials, impostor_hits=impostor_hits,
        fmr=impostor_hits / total_impostor, fnmr=genuine_misses / total_genuine,
        choice_roundtrips=choice_roundtrips, flagged_matches=flagged_matches,
        replay_probes=min(cfg.replay_probes, len(replayable)),
        replay_denied=replay_denied,
        verdict_errors=verdict_errors, audit_summary=None,
        latency_ms_p50=pct(0.50), latency_ms_p95=pct(0.95), latency_ms_p99=pct(0.99),
    )
