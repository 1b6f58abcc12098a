"""Shared JSON configuration for every node binary.

One file describes the whole deployment: shard/cluster topology and
addresses, link keys (64 hex chars each), issuer account seeds, matcher
parameters and timeouts. Each node reads the same file and picks out its
part. Link keys are shared per link type; sender ids are derived uniquely
per node so counter nonces never collide on a shared key.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .errors import ConfigInvalid
from .matcher import MatcherParams

LINK_NAMES = ("pos", "gateway_shard", "shard_issuer", "bank", "authority", "cluster")

GATEWAY_SENDER = b"GW\x00\x00"
POS_SENDER = b"POS0"
BANK_SENDER = b"BANK"
AUTHORITY_SENDER = b"AUTH"


def shard_sender(shard_index: int, member_index: int) -> bytes:
    return b"S" + shard_index.to_bytes(2, "big") + member_index.to_bytes(1, "big")


def issuer_sender(position: int) -> bytes:
    return b"I" + position.to_bytes(3, "big")


@dataclass(frozen=True)
class AccountSeed:
    account_ref: bytes  # 16 bytes
    balance: int
    status: str = "open"


@dataclass(frozen=True)
class IssuerConfig:
    issuer_id: bytes    # 8 bytes
    address: str
    accounts: tuple[AccountSeed, ...] = ()


@dataclass(frozen=True)
class Timeouts:
    selection: float = 60.0      # s, ACCOUNT_SELECT window
    upstream: float = 5.0        # s, gateway->shard and shard->issuer
    replay_window: float = 300.0


@dataclass(frozen=True)
class NetworkConfig:
    shard_count: int
    cluster_size: int
    gateway_address: str
    shards: dict[int, tuple[str, ...]]       # index -> member addresses
    issuers: dict[bytes, IssuerConfig]
    keys: dict[str, bytes]
    matcher: MatcherParams = field(default_factory=MatcherParams)
    timeouts: Timeouts = field(default_factory=Timeouts)

    def __post_init__(self):
        if not (1 <= self.shard_count <= 10_000):
            raise ConfigInvalid(f"shard_count {self.shard_count} outside 1..10000")
        if self.cluster_size < 1:
            raise ConfigInvalid("cluster_size must be >= 1")
        for name in LINK_NAMES:
            key = self.keys.get(name)
            if key is None or len(key) != 32:
                raise ConfigInvalid(f"missing or malformed 32-byte key {name!r}")
        for index, members in self.shards.items():
            if not (0 <= index < self.shard_count):
                raise ConfigInvalid(f"shard index {index} out of range")
            if len(members) != self.cluster_size:
                raise ConfigInvalid(
                    f"shard {index} lists {len(members)} members, expected {self.cluster_size}")
        for issuer_id, issuer in self.issuers.items():
            if len(issuer_id) != 8:
                raise ConfigInvalid("issuer ids must be 8 bytes")
            for seed in issuer.accounts:
                if len(seed.account_ref) != 16:
                    raise ConfigInvalid("account refs must be 16 bytes")
                if seed.status not in ("open", "closed"):
                    raise ConfigInvalid(f"account status {seed.status!r}")

    def issuer_position(self, issuer_id: bytes) -> int:
        return list(self.issuers).index(issuer_id)

    def shard_coordinator(self, index: int) -> Optional[str]:
        members = self.shards.get(index)
        return members[0] if members else None


def _hex_bytes(value: str, length: int, what: str) -> bytes:
    try:
        raw = bytes.fromhex(value)
    except (ValueError, TypeError):
        raise ConfigInvalid(f"{what}: not valid hex: {value!r}") from None
    if len(raw) != length:
        raise ConfigInvalid(f"{what}: expected {length} bytes, got {len(raw)}")
    return raw


def parse_config(doc: dict) -> NetworkConfig:
    try:
        shards = {
            int(index): tuple(members)
            for index, members in doc.get("shards", {}).items()
        }
        issuers = {}
        for issuer_hex, entry in doc.get("issuers", {}).items():
            issuer_id = _hex_bytes(issuer_hex, 8, "issuer id")
            accounts = tuple(
                AccountSeed(account_ref=_hex_bytes(a["account_ref"], 16, "account_ref"),
                            balance=int(a["balance"]),
                            status=a.get("status", "open"))
                for a in entry.get("accounts", ())
            )
            issuers[issuer_id] = IssuerConfig(issuer_id=issuer_id,
                                              address=entry["address"],
                                              accounts=accounts)
        keys = {
            name: _hex_bytes(value, 32, f"key {name}")
            for name, value in doc.get("keys", {}).items()
        }
        matcher = MatcherParams.from_dict(doc["matcher"]) if "matcher" in doc else MatcherParams()
        timeouts = Timeouts(**doc.get("timeouts", {}))
        return NetworkConfig(
            shard_count=int(doc["shard_count"]),
            cluster_size=int(doc.get("cluster_size", 1)),
            gateway_address=doc["gateway"]["address"],
            shards=shards,
            issuers=issuers,
            keys=keys,
            matcher=matcher,
            timeouts=timeouts,
        )
    except ConfigInvalid:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigInvalid(f"bad config: {exc}") from exc


def load_config(path: str | Path) -> NetworkConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigInvalid(f"cannot read config {path}: {exc}") from exc
    return parse_config(doc)


def dump_config(cfg: NetworkConfig) -> dict:
    """Inverse of parse_config, for writing generated deployments to disk."""
    return {
        "shard_count": cfg.shard_count,
        "cluster_size": cfg.cluster_size,
        "gateway": {"address": cfg.gateway_address},
        "shards": {str(i): list(m) for i, m in cfg.shards.items()},
        "issuers": {
            issuer_id.hex(): {
                "address": issuer.address,
                "accounts": [
                    {"account_ref": s.account_ref.hex(), "balance": s.balance,
                     "status": s.status}
                    for s in issuer.accounts
                ],
            }
            for issuer_id, issuer in cfg.issuers.items()
        },
        "keys": {name: key.hex() for name, key in cfg.keys.items()},
        "matcher": {
            "radius": cfg.matcher.radius,
            "cells_per_axis": cfg.matcher.cells_per_axis,
            "sections": cfg.matcher.sections,
            "sigma_spatial": cfg.matcher.sigma_spatial,
            "sigma_direction": cfg.matcher.sigma_direction,
            "bin_threshold": cfg.matcher.bin_threshold,
            "min_neighbors": cfg.matcher.min_neighbors,
            "max_direction_diff": cfg.matcher.max_direction_diff,
            "top_pairs_cap": cfg.matcher.top_pairs_cap,
            "match_threshold": cfg.matcher.match_threshold,
            "ambiguity_margin": cfg.matcher.ambiguity_margin,
            "min_valid_cylinders": cfg.matcher.min_valid_cylinders,
        },
        "timeouts": {
            "selection": cfg.timeouts.selection,
            "upstream": cfg.timeouts.upstream,
            "replay_window": cfg.timeouts.replay_window,
        },
    }
