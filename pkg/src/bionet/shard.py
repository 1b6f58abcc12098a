"""One BioNet shard server: enrollment store, 1:N identification, issuer
authorization, red-flag registry and audit log.

A shard is one or more member nodes. Member 0 is the coordinator: it
terminates gateway/bank/authority links, owns the routing metadata (issuer,
branch, accounts, flag) for every identity in the shard, and holds partition
0 of the templates. Members 1..c-1 hold the remaining template partitions
and answer internal scatter requests. With cluster size 1 everything is
local to the coordinator.

Flag policy is allow-and-alert by default: a flagged identity's transaction
proceeds exactly as if unflagged, but the match appends a flag_alert audit
event carrying the merchant id (configurable to deny-on-flag).
"""

from __future__ import annotations

import json
import logging
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Optional

from . import cluster
from .config import NetworkConfig, shard_sender
from .errors import (
    AuthFail,
    BadSelection,
    BioNetError,
    DuplicateIdentity,
    InsufficientMinutiae,
    MemberUnreachable,
    UnknownIdentity,
    WrongShard,
)
from .matcher import (
    CylinderSet,
    GalleryBlock,
    MatcherParams,
    Outcome,
    build_cylinders,
    decide,
)
from .templates import Template, decode_template, encode_template
from .wire import (
    AccountChoices,
    AccountSelect,
    AuthorizeReq,
    AuthorizeResp,
    ClusterIdentifyReq,
    ClusterIdentifyResp,
    Decision,
    EnrollAck,
    EnrollReq,
    ErrorMsg,
    FlagAck,
    FlagReq,
    Frame,
    IdentifyReq,
    LinkKey,
    MsgType,
    Reason,
    RoutingHeader,
    Verdict,
    decode_frame,
    open_frame,
    open_frame_raw,
    reseal_payload,
    route_pin,
    seal_message,
)

log = logging.getLogger("bionet.shard")


# -- audit --------------------------------------------------------------------

class AuditKind(Enum):
    MATCH = "match"
    NO_MATCH = "no_match"
    AMBIGUOUS = "ambiguous"
    FLAG_ALERT = "flag_alert"
    ENROLL = "enroll"
    DENY_FORWARDED = "deny_forwarded"


@dataclass(frozen=True)
class AuditEvent:
    timestamp_ms: int
    txn_id: bytes
    kind: AuditKind
    identity_id: Optional[bytes] = None
    merchant_id: Optional[bytes] = None
    detail: str = ""


class AuditLog:
    """Append-only, monotone timestamps, safe for concurrent writers."""

    def __init__(self, clock: Callable[[], float] = time.time):
        self._events: list[AuditEvent] = []
        self._lock = threading.Lock()
        self._clock = clock
        self._last_ms = 0

    def append(self, kind: AuditKind, txn_id: bytes, identity_id: Optional[bytes] = None,
               merchant_id: Optional[bytes] = None, detail: str = "") -> AuditEvent:
        with self._lock:
            ms = max(self._last_ms, int(self._clock() * 1000))
            self._last_ms = ms
            event = AuditEvent(ms, txn_id, kind, identity_id, merchant_id, detail)
            self._events.append(event)
            return event

    def query(self, kinds: Optional[set[AuditKind]] = None,
              since_ms: Optional[int] = None,
              until_ms: Optional[int] = None) -> list[AuditEvent]:
        with self._lock:
            events = list(self._events)
        return [
            e for e in events
            if (kinds is None or e.kind in kinds)
            and (since_ms is None or e.timestamp_ms >= since_ms)
            and (until_ms is None or e.timestamp_ms <= until_ms)
        ]

    def __len__(self) -> int:
        with self._lock:
            return len(self._events)


# -- stores -------------------------------------------------------------------

@dataclass
class IdentityRecord:
    identity_id: bytes
    template: Template
    cylinders: CylinderSet
    issuer_id: bytes
    branch_id: bytes
    account_refs: tuple[bytes, ...]
    flagged: bool = False


@dataclass
class RouteEntry:
    """Coordinator-side routing metadata for one enrolled identity."""

    issuer_id: bytes
    branch_id: bytes
    account_refs: tuple[bytes, ...]
    member: int
    flagged: bool = False


class ShardStore:
    """Template partition held by one shard member.

    Reads (scans) run against an immutable stacked block that is swapped
    atomically on enrollment, so identifications never observe a partial
    record.
    """

    def __init__(self, shard_index: int, params: MatcherParams):
        self.shard_index = shard_index
        self.params = params
        self._records: dict[bytes, IdentityRecord] = {}
        self._lock = threading.Lock()
        self._block: Optional[GalleryBlock] = None
        self._ids: tuple[bytes, ...] = ()

    @property
    def count(self) -> int:
        with self._lock:
            return len(self._records)

    def get(self, identity_id: bytes) -> Optional[IdentityRecord]:
        with self._lock:
            return self._records.get(identity_id)

    def enroll(self, identity_id: bytes, template: Template, issuer_id: bytes,
               branch_id: bytes, account_refs: tuple[bytes, ...]) -> int:
        """Insert with precomputed cylinders; returns the new record count."""
        cylinders = build_cylinders(template, self.params)
        if cylinders.n_valid < self.params.min_valid_cylinders:
            raise InsufficientMinutiae(
                f"template yields {cylinders.n_valid} valid cylinders")
        if not account_refs:
            raise ValueError("at least one account ref required")
        record = IdentityRecord(identity_id, template, cylinders,
                                issuer_id, branch_id, tuple(account_refs))
        with self._lock:
            if identity_id in self._records:
                raise DuplicateIdentity(identity_id.hex())
            self._records[identity_id] = record
            self._block = None
            self._ids = ()
            return len(self._records)

    def set_flag(self, identity_id: bytes, flag: bool) -> None:
        with self._lock:
            record = self._records.get(identity_id)
            if record is None:
                raise UnknownIdentity(identity_id.hex())
            record.flagged = flag

    def snapshot_view(self) -> tuple[GalleryBlock, tuple[bytes, ...]]:
        """Stable (block, ids) pair for scanning; rebuilt lazily after writes."""
        with self._lock:
            if self._block is None:
                records = list(self._records.values())
                self._ids = tuple(r.identity_id for r in records)
                self._block = GalleryBlock.build([r.cylinders for r in records],
                                                 self.params.min_valid_cylinders)
            return self._block, self._ids

    def scan_top_two(self, probe: CylinderSet) -> cluster.MemberReport:
        block, ids = self.snapshot_view()
        return cluster.scan_partition(probe, block, ids, self.params)

    # -- snapshot persistence --------------------------------------------------

    def save_snapshot(self, directory: str | Path) -> None:
        """Write one .biot per record plus a JSON index (sans templates)."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        with self._lock:
            records = list(self._records.values())
        index = []
        for r in records:
            name = f"{r.identity_id.hex()}.biot"
            (directory / name).write_bytes(encode_template(r.template))
            index.append({
                "identity_id": r.identity_id.hex(),
                "issuer_id": r.issuer_id.hex(),
                "branch_id": r.branch_id.hex(),
                "account_refs": [ref.hex() for ref in r.account_refs],
                "flagged": r.flagged,
                "template_file": name,
            })
        (directory / "index.json").write_text(
            json.dumps({"shard_index": self.shard_index, "records": index}, indent=1))

    def load_snapshot(self, directory: str | Path) -> int:
        """Re-enroll every record from a snapshot directory; returns count."""
        directory = Path(directory)
        doc = json.loads((directory / "index.json").read_text())
        for entry in doc["records"]:
            template = decode_template((directory / entry["template_file"]).read_bytes())
            self.enroll(bytes.fromhex(entry["identity_id"]), template,
                        bytes.fromhex(entry["issuer_id"]),
                        bytes.fromhex(entry["branch_id"]),
                        tuple(bytes.fromhex(ref) for ref in entry["account_refs"]))
            if entry.get("flagged"):
                self.set_flag(bytes.fromhex(entry["identity_id"]), True)
        return self.count


@dataclass
class PendingSelection:
    identity_id: bytes
    account_refs: tuple[bytes, ...]
    amount: int
    merchant_id: bytes
    flagged: bool
    issuer_id: bytes
    expires_at: float


# -- the node ------------------------------------------------------------------

class ShardNode:
    """Wire-facing shard member; member 0 coordinates the shard."""

    def __init__(self, config: NetworkConfig, shard_index: int, member_index: int,
                 transport, clock: Callable[[], float] = time.time,
                 deny_on_flag: bool = False):
        self.config = config
        self.shard_index = shard_index
        self.member_index = member_index
        self.transport = transport
        self.clock = clock
        self.deny_on_flag = deny_on_flag
        self.params = config.matcher
        self.sender_id = shard_sender(shard_index, member_index)
        self.store = ShardStore(shard_index, self.params)
        self.audit = AuditLog(clock)
        self.routes: dict[bytes, RouteEntry] = {}
        self._routes_lock = threading.Lock()
        self._pending: dict[bytes, PendingSelection] = {}
        self._pending_lock = threading.Lock()

        self._keys = {
            "gateway": LinkKey(config.keys["gateway_shard"], self.sender_id),
            "bank": LinkKey(config.keys["bank"], self.sender_id),
            "authority": LinkKey(config.keys["authority"], self.sender_id),
            "cluster": LinkKey(config.keys["cluster"], self.sender_id),
            "issuer": LinkKey(config.keys["shard_issuer"], self.sender_id),
        }
        members = config.shards.get(shard_index, ())
        self.address = members[member_index] if member_index < len(members) else None

    @property
    def is_coordinator(self) -> bool:
        return self.member_index == 0

    def start(self) -> None:
        if self.address is None:
            raise BioNetError(f"shard {self.shard_index} member {self.member_index} "
                              "has no configured address")
        self.transport.listen(self.address, self.handle_frame)

    # -- dispatch ---------------------------------------------------------------

    _LINK_BY_TYPE_COORD = {
        MsgType.IDENTIFY_REQ: "gateway",
        MsgType.ACCOUNT_SELECT: "gateway",
        MsgType.ENROLL_REQ: "bank",
        MsgType.FLAG_REQ: "authority",
    }
    _LINK_BY_TYPE_MEMBER = {
        MsgType.CLUSTER_IDENTIFY_REQ: "cluster",
        MsgType.ENROLL_REQ: "cluster",
    }

    def handle_frame(self, raw: bytes) -> Optional[bytes]:
        try:
            frame, _ = decode_frame(raw)
        except BioNetError:
            log.warning("shard %d.%d: undecodable frame dropped",
                        self.shard_index, self.member_index)
            return None
        links = self._LINK_BY_TYPE_COORD if self.is_coordinator else self._LINK_BY_TYPE_MEMBER
        link = links.get(frame.msg_type)
        if link is None:
            log.warning("shard %d.%d: unexpected %s dropped",
                        self.shard_index, self.member_index, frame.msg_type.name)
            return None
        key = self._keys[link]
        try:
            msg = open_frame(frame, key)
        except AuthFail:
            log.warning("shard %d.%d: auth failure on %s link",
                        self.shard_index, self.member_index, link)
            return None

        header = RoutingHeader(pin=frame.header.pin, txn_id=frame.header.txn_id,
                               sender_id=self.sender_id)
        try:
            if frame.msg_type == MsgType.IDENTIFY_REQ:
                reply = self._handle_identify(msg, frame)
            elif frame.msg_type == MsgType.ACCOUNT_SELECT:
                reply = self._handle_select(msg, frame)
            elif frame.msg_type == MsgType.ENROLL_REQ:
                reply = self._handle_enroll(msg, frame)
            elif frame.msg_type == MsgType.FLAG_REQ:
                reply = self._handle_flag(msg)
            else:
                reply = self._handle_cluster_identify(msg)
        except BioNetError as exc:
            reply = ErrorMsg(exc.code, str(exc))
        except Exception:
            log.exception("shard %d.%d: internal error", self.shard_index, self.member_index)
            reply = ErrorMsg(0, "internal error")
        return seal_message(reply, header, key)

    # -- identification ----------------------------------------------------------

    def _handle_identify(self, msg: IdentifyReq, frame: Frame):
        txn, merchant = frame.header.txn_id, msg.merchant_id
        try:
            probe = build_cylinders(decode_template(msg.template), self.params)
            if probe.n_valid < self.params.min_valid_cylinders:
                raise InsufficientMinutiae(f"{probe.n_valid} valid cylinders")
        except BioNetError as exc:
            # an unusable probe cannot match anything: deny as a non-match
            self.audit.append(AuditKind.NO_MATCH, txn, merchant_id=merchant,
                              detail=f"unusable probe: {exc}")
            return Verdict(Decision.DENY, Reason.NO_MATCH)

        try:
            result = self._identify(probe, frame.header)
        except MemberUnreachable as exc:
            log.error("shard %d: %s", self.shard_index, exc)
            return Verdict(Decision.DENY, Reason.UNAVAILABLE)

        if result.outcome is Outcome.NO_MATCH:
            self.audit.append(AuditKind.NO_MATCH, txn, merchant_id=merchant,
                              detail=f"best={result.score:.4f}")
            return Verdict(Decision.DENY, Reason.NO_MATCH)
        if result.outcome is Outcome.AMBIGUOUS:
            self.audit.append(AuditKind.AMBIGUOUS, txn, identity_id=result.identity_id,
                              merchant_id=merchant,
                              detail=f"scores={result.score:.4f},{result.second_score:.4f}")
            return Verdict(Decision.DENY, Reason.AMBIGUOUS)

        identity = result.identity_id
        self.audit.append(AuditKind.MATCH, txn, identity_id=identity,
                          merchant_id=merchant, detail=f"score={result.score:.4f}")
        with self._routes_lock:
            entry = self.routes.get(identity)
        if entry is None:  # store and routes are enrolled together
            log.error("shard %d: matched unrouted identity %s",
                      self.shard_index, identity.hex())
            return Verdict(Decision.DENY, Reason.UNAVAILABLE)

        if entry.flagged:
            self.audit.append(AuditKind.FLAG_ALERT, txn, identity_id=identity,
                              merchant_id=merchant, detail="flagged identity matched")
            if self.deny_on_flag:
                return Verdict(Decision.DENY, Reason.NO_MATCH)

        if len(entry.account_refs) > 1:
            with self._pending_lock:
                self._pending[txn] = PendingSelection(
                    identity_id=identity, account_refs=entry.account_refs,
                    amount=msg.amount, merchant_id=merchant, flagged=entry.flagged,
                    issuer_id=entry.issuer_id,
                    expires_at=self.clock() + self.config.timeouts.selection)
            return AccountChoices(entry.account_refs)

        return self._authorize(txn, identity, entry.issuer_id,
                               entry.account_refs[0], msg.amount, merchant)

    def _identify(self, probe: CylinderSet, header: RoutingHeader):
        if self.config.cluster_size == 1:
            report = self.store.scan_top_two(probe)
            return decide(report[0], report[1], self.params)
        template_bytes = encode_template(probe.template)
        members = self.config.shards[self.shard_index]

        def local_call() -> cluster.MemberReport:
            return self.store.scan_top_two(probe)

        def remote_call(address: str) -> Callable[[], cluster.MemberReport]:
            def call() -> cluster.MemberReport:
                request = seal_message(
                    ClusterIdentifyReq(template_bytes),
                    RoutingHeader(pin=header.pin, txn_id=header.txn_id,
                                  sender_id=self.sender_id),
                    self._keys["cluster"])
                raw = self.transport.request(address, request,
                                             timeout=self.config.timeouts.upstream)
                frame, _ = decode_frame(raw)
                resp = open_frame(frame, self._keys["cluster"])
                if isinstance(resp, ErrorMsg):
                    raise MemberUnreachable(f"{address}: {resp.detail}")
                return list(resp.candidates), resp.scanned
            return call

        calls: list[cluster.MemberCall] = [local_call]
        calls.extend(remote_call(addr) for addr in members[1:])
        return cluster.scatter_identify(calls, self.params)

    def _authorize(self, txn: bytes, identity: bytes, issuer_id: bytes,
                   account_ref: bytes, amount: int, merchant: bytes) -> Verdict:
        issuer = self.config.issuers.get(issuer_id)
        if issuer is None:
            log.error("shard %d: no issuer %s configured", self.shard_index, issuer_id.hex())
            return Verdict(Decision.DENY, Reason.UNAVAILABLE)
        request = seal_message(
            AuthorizeReq(identity, account_ref, amount, merchant),
            RoutingHeader(pin="0000", txn_id=txn, sender_id=self.sender_id),
            self._keys["issuer"])
        try:
            raw = self.transport.request(issuer.address, request,
                                         timeout=self.config.timeouts.upstream)
            frame, _ = decode_frame(raw)
            resp = open_frame(frame, self._keys["issuer"])
        except BioNetError as exc:
            log.error("shard %d: issuer %s unreachable: %s",
                      self.shard_index, issuer_id.hex(), exc)
            return Verdict(Decision.DENY, Reason.UNAVAILABLE)
        if not isinstance(resp, AuthorizeResp):
            return Verdict(Decision.DENY, Reason.UNAVAILABLE)
        if resp.decision is Decision.DENY:
            self.audit.append(AuditKind.DENY_FORWARDED, txn, identity_id=identity,
                              merchant_id=merchant, detail=resp.reason.name)
        return Verdict(resp.decision, resp.reason)

    def _handle_select(self, msg: AccountSelect, frame: Frame) -> Verdict:
        txn = frame.header.txn_id
        with self._pending_lock:
            pending = self._pending.pop(txn, None)
        if pending is None or pending.expires_at < self.clock():
            return Verdict(Decision.DENY, Reason.TIMEOUT)
        if msg.account_ref not in pending.account_refs:
            return Verdict(Decision.DENY, Reason.BAD_SELECTION)
        return self._authorize(txn, pending.identity_id, pending.issuer_id,
                               msg.account_ref, pending.amount, pending.merchant_id)

    # -- enrollment / flags --------------------------------------------------------

    def _handle_enroll(self, msg: EnrollReq, frame: Frame) -> EnrollAck:
        template = decode_template(msg.template)
        if not self.is_coordinator:
            self.store.enroll(msg.identity_id, template, msg.issuer_id,
                              msg.branch_id, msg.account_refs)
            return EnrollAck(self.store.count)

        if route_pin(frame.header.pin, self.config.shard_count) != self.shard_index:
            raise WrongShard(f"pin {frame.header.pin} does not route to shard "
                             f"{self.shard_index}")
        member = cluster.partition(msg.identity_id, self.config.cluster_size)
        with self._routes_lock:
            if msg.identity_id in self.routes:
                raise DuplicateIdentity(msg.identity_id.hex())
            if member == self.member_index:
                self.store.enroll(msg.identity_id, template, msg.issuer_id,
                                  msg.branch_id, msg.account_refs)
            else:
                self._forward_enroll(msg, frame, member)
            self.routes[msg.identity_id] = RouteEntry(
                issuer_id=msg.issuer_id, branch_id=msg.branch_id,
                account_refs=msg.account_refs, member=member)
            total = len(self.routes)
        self.audit.append(AuditKind.ENROLL, frame.header.txn_id,
                          identity_id=msg.identity_id)
        return EnrollAck(total)

    def _forward_enroll(self, msg: EnrollReq, frame: Frame, member: int) -> None:
        address = self.config.shards[self.shard_index][member]
        header = RoutingHeader(pin=frame.header.pin, txn_id=frame.header.txn_id,
                               sender_id=self.sender_id)
        raw = self.transport.request(
            address, seal_message(msg, header, self._keys["cluster"]),
            timeout=self.config.timeouts.upstream)
        reply_frame, _ = decode_frame(raw)
        reply = open_frame(reply_frame, self._keys["cluster"])
        if isinstance(reply, ErrorMsg):
            from .errors import error_for_code
            raise error_for_code(reply.code, reply.detail)
        if not isinstance(reply, EnrollAck):
            raise MemberUnreachable(f"member {member} returned {type(reply).__name__}")

    def _handle_flag(self, msg: FlagReq) -> FlagAck:
        with self._routes_lock:
            entry = self.routes.get(msg.identity_id)
            if entry is None:
                raise UnknownIdentity(msg.identity_id.hex())
            entry.flagged = msg.flag
            local = entry.member == self.member_index
        if local:
            self.store.set_flag(msg.identity_id, msg.flag)
        return FlagAck()

    def _handle_cluster_identify(self, msg: ClusterIdentifyReq) -> ClusterIdentifyResp:
        probe = build_cylinders(decode_template(msg.template), self.params)
        if probe.n_valid < self.params.min_valid_cylinders:
            raise InsufficientMinutiae(f"{probe.n_valid} valid cylinders")
        candidates, scanned = self.store.scan_top_two(probe)
        return ClusterIdentifyResp(tuple(candidates), scanned)

    # -- state persistence -----------------------------------------------------------

    def save_state(self, directory: str | Path) -> None:
        directory = Path(directory)
        self.store.save_snapshot(directory)
        if self.is_coordinator:
            with self._routes_lock:
                routes = {
                    identity.hex(): {
                        "issuer_id": e.issuer_id.hex(), "branch_id": e.branch_id.hex(),
                        "account_refs": [r.hex() for r in e.account_refs],
                        "member": e.member, "flagged": e.flagged,
                    }
                    for identity, e in self.routes.items()
                }
            (directory / "routes.json").write_text(json.dumps(routes, indent=1))

    def load_state(self, directory: str | Path) -> None:
        directory = Path(directory)
        self.store.load_snapshot(directory)
        routes_file = directory / "routes.json"
        if self.is_coordinator and routes_file.exists():
            doc = json.loads(routes_file.read_text())
            with self._routes_lock:
                for identity_hex, e in doc.items():
                    self.routes[bytes.fromhex(identity_hex)] = RouteEntry(
                        issuer_id=bytes.fromhex(e["issuer_id"]),
                        branch_id=bytes.fromhex(e["branch_id"]),
                        account_refs=tuple(bytes.fromhex(r) for r in e["account_refs"]),
                        member=e["member"], flagged=e["flagged"])
