"""Acquirer gateway: the merchant's bank.

Terminates PoS links, rejects replayed transaction ids, routes by PIN to the
owning shard, and re-seals traffic hop by hop (decrypt under the PoS key,
re-encrypt under the shard key) without touching the payload bytes. Every
response carries the request's txn_id, and a transaction gets at most one
outcome: once any verdict (including a timeout verdict) has been sent, the
txn_id stays burned for the replay window.
"""

from __future__ import annotations

import logging
import threading
import time
from dataclasses import dataclass
from typing import Callable, Optional

from .config import GATEWAY_SENDER, NetworkConfig
from .errors import AuthFail, BadPin, BioNetError, TransportError
from .wire import (
    Decision,
    Frame,
    LinkKey,
    MsgType,
    Reason,
    RoutingHeader,
    Verdict,
    decode_frame,
    encode_frame,
    open_frame_raw,
    reseal_payload,
    route_pin,
    seal_message,
)

log = logging.getLogger("bionet.gateway")


class TxnLog:
    """Accepts each txn_id at most once per retention window."""

    def __init__(self, window: float, clock: Callable[[], float] = time.time):
        self.window = window
        self._clock = clock
        self._seen: dict[bytes, float] = {}
        self._lock = threading.Lock()

    def check_and_insert(self, txn_id: bytes) -> bool:
        """True if fresh (and now recorded); False if a replay."""
        now = self._clock()
        with self._lock:
            expiry = self._seen.get(txn_id)
            if expiry is not None and expiry > now:
                return False
            if len(self._seen) > 4096:
                self._seen = {t: e for t, e in self._seen.items() if e > now}
            self._seen[txn_id] = now + self.window
            return True


@dataclass
class _PendingChoice:
    shard_address: str
    expires_at: float


class GatewayNode:
    def __init__(self, config: NetworkConfig, transport,
                 clock: Callable[[], float] = time.time):
        self.config = config
        self.transport = transport
        self.clock = clock
        self.address = config.gateway_address
        self.sender_id = GATEWAY_SENDER
        self.pos_key = LinkKey(config.keys["pos"], self.sender_id)
        self.shard_key = LinkKey(config.keys["gateway_shard"], self.sender_id)
        self.txn_log = TxnLog(config.timeouts.replay_window, clock)
        self._pending: dict[bytes, _PendingChoice] = {}
        self._pending_lock = threading.Lock()

    def start(self) -> None:
        self.transport.listen(self.address, self.handle_frame)

    def handle_frame(self, raw: bytes) -> Optional[bytes]:
        try:
            frame, _ = decode_frame(raw)
        except BioNetError:
            log.warning("gateway: undecodable frame dropped")
            return None
        if frame.msg_type not in (MsgType.POS_AUTH_REQ, MsgType.ACCOUNT_SELECT):
            log.warning("gateway: unexpected %s dropped", frame.msg_type.name)
            return None
        try:
            payload = open_frame_raw(frame, self.pos_key)
        except AuthFail:
            log.warning("gateway: PoS auth failure, dropping")
            return None
        if frame.msg_type == MsgType.POS_AUTH_REQ:
            return self._handle_auth(frame, payload)
        return self._handle_select(frame, payload)

    def _verdict(self, frame: Frame, reason: Reason) -> bytes:
        header = RoutingHeader(pin=frame.header.pin, txn_id=frame.header.txn_id,
                               sender_id=self.sender_id)
        return seal_message(Verdict(Decision.DENY, reason), header, self.pos_key)

    def _handle_auth(self, frame: Frame, payload: bytes) -> bytes:
        if not self.txn_log.check_and_insert(frame.header.txn_id):
            return self._verdict(frame, Reason.REPLAY)
        try:
            shard_index = route_pin(frame.header.pin, self.config.shard_count)
        except BadPin:
            return self._verdict(frame, Reason.ROUTING_ERROR)
        address = self.config.shard_coordinator(shard_index)
        if address is None:
            return self._verdict(frame, Reason.ROUTING_ERROR)
        return self._forward(frame, payload, MsgType.IDENTIFY_REQ, address)

    def _handle_select(self, frame: Frame, payload: bytes) -> bytes:
        # continuation of a pending choice: exempt from the replay check,
        # routed to the shard that issued the choices
        with self._pending_lock:
            pending = self._pending.get(frame.header.txn_id)
        if pending is None or pending.expires_at < self.clock():
            return self._verdict(frame, Reason.TIMEOUT)
        return self._forward(frame, payload, MsgType.ACCOUNT_SELECT, pending.shard_address)

    def _forward(self, frame: Frame, payload: bytes, msg_type: MsgType,
                 address: str) -> bytes:
        """Re-seal the untouched payload for the shard hop and relay the answer."""
        header = RoutingHeader(pin=frame.header.pin, txn_id=frame.header.txn_id,
                               sender_id=self.sender_id)
        upstream = reseal_payload(payload, msg_type, header, self.shard_key)
        try:
            raw = self.transport.request(address, upstream,
                                         timeout=self.config.timeouts.upstream)
            reply_frame, _ = decode_frame(raw)
            reply_payload = open_frame_raw(reply_frame, self.shard_key)
        except (TransportError, AuthFail, BioNetError) as exc:
            log.error("gateway: shard %s failed: %s", address, exc)
            return self._verdict(frame, Reason.UNAVAILABLE)

        if reply_frame.msg_type == MsgType.ACCOUNT_CHOICES:
            with self._pending_lock:
                self._pending[frame.header.txn_id] = _PendingChoice(
                    shard_address=address,
                    expires_at=self.clock() + self.config.timeouts.selection)
        elif reply_frame.msg_type == MsgType.VERDICT:
            with self._pending_lock:
                self._pending.pop(frame.header.txn_id, None)
        else:
            log.error("gateway: shard %s returned %s", address, reply_frame.msg_type.name)
            return self._verdict(frame, Reason.UNAVAILABLE)

        # relay verbatim under the PoS key, txn id preserved
        return reseal_payload(reply_payload, reply_frame.msg_type, header, self.pos_key)
