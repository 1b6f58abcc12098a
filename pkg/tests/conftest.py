"""Shared fixtures: a small single-process deployment over the loopback hub."""

import math
import secrets

import pytest

from bionet.config import (
    AUTHORITY_SENDER,
    BANK_SENDER,
    AccountSeed,
    IssuerConfig,
    NetworkConfig,
    Timeouts,
)
from bionet.gateway import GatewayNode
from bionet.issuer import IssuerNode
from bionet.pos import PosClient
from bionet.shard import ShardNode
from bionet.templates import PerturbationParams, encode_template, generate_template
from bionet.transport import LoopbackTransport
from bionet.wire import (
    EnrollAck,
    EnrollReq,
    FlagAck,
    FlagReq,
    LinkKey,
    RoutingHeader,
    decode_frame,
    open_frame,
    route_pin,
    seal_message,
)

GENUINE_NOISE = PerturbationParams(pos_sigma=4.0, angle_sigma=math.radians(5),
                                   dropout_prob=0.1, spurious_count=2)

ISSUER_A = bytes.fromhex("aa" * 8)
ISSUER_B = bytes.fromhex("bb" * 8)


def make_keys():
    return {name: bytes([i + 1]) * 32
            for i, name in enumerate(("pos", "gateway_shard", "shard_issuer",
                                      "bank", "authority", "cluster"))}


class MiniNet:
    """4 shards (configurable cluster size), 1 gateway, 2 issuers, loopback."""

    _instance_counter = [0]

    def __init__(self, shard_count=4, cluster_size=1, accounts=(), clock=None,
                 timeouts=None, start_shards=True, deny_on_flag=False):
        self._instance_counter[0] += 1
        tag = self._instance_counter[0]
        self.transport = LoopbackTransport()
        self.clock = clock or __import__("time").time
        addresses = {
            i: tuple(f"loop://{tag}/shard-{i}-{m}" for m in range(cluster_size))
            for i in range(shard_count)
        }
        self.config = NetworkConfig(
            shard_count=shard_count,
            cluster_size=cluster_size,
            gateway_address=f"loop://{tag}/gateway",
            shards=addresses,
            issuers={
                ISSUER_A: IssuerConfig(ISSUER_A, f"loop://{tag}/issuer-a", tuple(accounts)),
                ISSUER_B: IssuerConfig(ISSUER_B, f"loop://{tag}/issuer-b", ()),
            },
            keys=make_keys(),
            timeouts=timeouts or Timeouts(),
        )
        self.shards: dict[tuple[int, int], ShardNode] = {}
        for i in range(shard_count):
            for m in range(cluster_size):
                node = ShardNode(self.config, i, m, self.transport, clock=self.clock,
                                 deny_on_flag=deny_on_flag)
                if start_shards:
                    node.start()
                self.shards[(i, m)] = node
        self.issuer_a = IssuerNode(self.config, ISSUER_A, self.transport)
        self.issuer_a.start()
        self.issuer_b = IssuerNode(self.config, ISSUER_B, self.transport)
        self.issuer_b.start()
        self.gateway = GatewayNode(self.config, self.transport, clock=self.clock)
        self.gateway.start()
        self.pos = PosClient(self.config, self.transport)
        self.bank_key = LinkKey(self.config.keys["bank"], BANK_SENDER)
        self.authority_key = LinkKey(self.config.keys["authority"], AUTHORITY_SENDER)

    def coordinator(self, pin: str) -> ShardNode:
        return self.shards[(route_pin(pin, self.config.shard_count), 0)]

    def coordinator_address(self, pin: str) -> str:
        return self.config.shard_coordinator(route_pin(pin, self.config.shard_count))

    def enroll(self, identity: bytes, template, pin: str, account_refs,
               issuer_id: bytes = ISSUER_A, branch: bytes = b"BRANCH00"):
        header = RoutingHeader(pin=pin, txn_id=secrets.token_bytes(16),
                               sender_id=BANK_SENDER)
        req = EnrollReq(identity, encode_template(template), issuer_id, branch,
                        tuple(account_refs))
        raw = self.transport.request(self.coordinator_address(pin),
                                     seal_message(req, header, self.bank_key))
        return open_frame(decode_frame(raw)[0], self.bank_key)

    def set_flag(self, identity: bytes, pin: str, flag: bool = True):
        header = RoutingHeader(pin=pin, txn_id=secrets.token_bytes(16),
                               sender_id=AUTHORITY_SENDER)
        raw = self.transport.request(
            self.coordinator_address(pin),
            seal_message(FlagReq(identity, flag), header, self.authority_key))
        return open_frame(decode_frame(raw)[0], self.authority_key)


@pytest.fixture
def funded_accounts():
    return tuple(AccountSeed(bytes([i]) * 16, 1_000_000) for i in range(1, 9))


@pytest.fixture
def mininet(funded_accounts):
    return MiniNet(accounts=funded_accounts)


def make_identity(i: int) -> bytes:
    # vary the leading 8 bytes: cluster partitioning reads them
    return i.to_bytes(8, "big") + i.to_bytes(8, "little")


def enrollable_template(seed: int, n: int = 40):
    return generate_template(seed=seed, n=n)
