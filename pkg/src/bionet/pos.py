"""Point-of-sale client: one call runs the full authorization exchange.

The PoS generates a fresh 16-byte txn_id per transaction, seals the request
under the PoS link key, and relays an account selection when the customer
holds several accounts (the `select` callback decides which).
"""

from __future__ import annotations

import secrets
from dataclasses import dataclass
from typing import Callable, Optional

from .config import POS_SENDER, NetworkConfig
from .errors import AuthFail, BioNetError, TransportError
from .wire import (
    AccountChoices,
    AccountSelect,
    LinkKey,
    MsgType,
    PosAuthReq,
    RoutingHeader,
    Verdict,
    decode_frame,
    open_frame,
    seal_message,
    valid_pin,
)


@dataclass(frozen=True)
class PosResult:
    verdict: Verdict
    txn_id: bytes
    choices: Optional[AccountChoices] = None  # set when a selection round ran


class PosClient:
    def __init__(self, config: NetworkConfig, transport,
                 gateway_address: Optional[str] = None, sender_id: bytes = POS_SENDER):
        self.config = config
        self.transport = transport
        self.gateway_address = gateway_address or config.gateway_address
        self.key = LinkKey(config.keys["pos"], sender_id)
        self.sender_id = sender_id

    def transact(self, pin: str, template: bytes, amount: int, merchant_id: bytes,
                 select: Optional[Callable[[AccountChoices], bytes]] = None,
                 txn_id: Optional[bytes] = None) -> PosResult:
        """Run one authorization; `select` picks the account ref on a
        multi-account challenge (defaults to the first)."""
        if not valid_pin(pin):
            raise ValueError(f"pin {pin!r} is not 4 digits")
        txn = txn_id if txn_id is not None else secrets.token_bytes(16)
        header = RoutingHeader(pin=pin, txn_id=txn, sender_id=self.sender_id)
        reply = self._exchange(PosAuthReq(amount, merchant_id, template), header)
        if isinstance(reply, Verdict):
            return PosResult(verdict=reply, txn_id=txn)
        if not isinstance(reply, AccountChoices):
            raise TransportError(f"gateway answered {type(reply).__name__}")
        choice = select(reply) if select is not None else reply.account_refs[0]
        final = self._exchange(AccountSelect(choice), header)
        if not isinstance(final, Verdict):
            raise TransportError(f"gateway answered {type(final).__name__} to selection")
        return PosResult(verdict=final, txn_id=txn, choices=reply)

    def _exchange(self, msg, header: RoutingHeader):
        raw = self.transport.request(self.gateway_address,
                                     seal_message(msg, header, self.key),
                                     timeout=self.config.timeouts.upstream + 1.0)
        frame, _ = decode_frame(raw)
        if frame.header.txn_id != header.txn_id:
            raise TransportError("response txn_id mismatch")
        try:
            return open_frame(frame, self.key)
        except AuthFail as exc:
            raise TransportError(f"response failed authentication: {exc}") from exc
