"""Issuer bank: account store and allow/deny authorization with atomic debit.

Authorization and capture happen in one step; a successful ALLOW debits the
account immediately. Concurrent authorizations against one account serialize
on that account's lock, so balances never go negative and the conservation
property holds under any interleaving: final = initial - sum(ALLOW amounts).
Replay absorption is deliberately NOT done here; it lives at the gateway.
"""

from __future__ import annotations

import logging
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

from .config import NetworkConfig, issuer_sender
from .errors import AuthFail, BioNetError
from .wire import (
    AuthorizeReq,
    AuthorizeResp,
    Decision,
    LinkKey,
    MsgType,
    Reason,
    RoutingHeader,
    decode_frame,
    open_frame,
    seal_message,
)

log = logging.getLogger("bionet.issuer")

OPEN = "open"
CLOSED = "closed"


@dataclass
class Account:
    account_ref: bytes
    balance: int          # minor currency units, never driven below zero
    status: str = OPEN
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False)


class IssuerBank:
    """Account ledger with check-and-debit authorization."""

    def __init__(self, issuer_id: bytes):
        self.issuer_id = issuer_id
        self._accounts: dict[bytes, Account] = {}
        self._map_lock = threading.Lock()

    def admin_upsert_account(self, account_ref: bytes, balance: int,
                             status: str = OPEN) -> Account:
        if status not in (OPEN, CLOSED):
            raise ValueError(f"status {status!r}")
        account = Account(account_ref=account_ref, balance=balance, status=status)
        with self._map_lock:
            self._accounts[account_ref] = account
        return account

    def get_balance(self, account_ref: bytes) -> Optional[int]:
        with self._map_lock:
            account = self._accounts.get(account_ref)
        return None if account is None else account.balance

    def authorize(self, req: AuthorizeReq) -> AuthorizeResp:
        if req.amount <= 0:
            return AuthorizeResp(Decision.DENY, Reason.BAD_AMOUNT)
        with self._map_lock:
            account = self._accounts.get(req.account_ref)
        if account is None:
            return AuthorizeResp(Decision.DENY, Reason.UNKNOWN_ACCOUNT)
        with account.lock:
            if account.status == CLOSED:
                return AuthorizeResp(Decision.DENY, Reason.ACCOUNT_CLOSED)
            if req.amount > account.balance:
                return AuthorizeResp(Decision.DENY, Reason.INSUFFICIENT_FUNDS)
            account.balance -= req.amount
        return AuthorizeResp(Decision.ALLOW, Reason.OK)


class IssuerNode:
    """Wire-facing wrapper around one issuer's ledger."""

    def __init__(self, config: NetworkConfig, issuer_id: bytes, transport,
                 clock: Callable[[], float] = time.time):
        issuer_cfg = config.issuers.get(issuer_id)
        if issuer_cfg is None:
            raise BioNetError(f"issuer {issuer_id.hex()} not in config")
        self.config = config
        self.transport = transport
        self.address = issuer_cfg.address
        self.sender_id = issuer_sender(config.issuer_position(issuer_id))
        self.key = LinkKey(config.keys["shard_issuer"], self.sender_id)
        self.bank = IssuerBank(issuer_id)
        for seed in issuer_cfg.accounts:
            self.bank.admin_upsert_account(seed.account_ref, seed.balance, seed.status)

    def start(self) -> None:
        self.transport.listen(self.address, self.handle_frame)

    def handle_frame(self, raw: bytes) -> Optional[bytes]:
        try:
            frame, _ = decode_frame(raw)
        except BioNetError:
            log.warning("issuer %s: undecodable frame dropped", self.bank.issuer_id.hex())
            return None
        if frame.msg_type != MsgType.AUTHORIZE_REQ:
            log.warning("issuer %s: unexpected %s dropped",
                        self.bank.issuer_id.hex(), frame.msg_type.name)
            return None
        try:
            req = open_frame(frame, self.key)
        except AuthFail:
            log.warning("issuer %s: auth failure, dropping", self.bank.issuer_id.hex())
            return None
        resp = self.bank.authorize(req)
        header = RoutingHeader(pin=frame.header.pin, txn_id=frame.header.txn_id,
                               sender_id=self.sender_id)
        return seal_message(resp, header, self.key)
