"""Framed wire protocol: message schemas, AEAD envelope, PIN routing.

Frame layout (all integers big-endian):

    length   u32   byte count of everything after this field (max 1 MiB)
    version  u8    0x01
    msg_type u8
    pin      4 ASCII digits     } routing header, cleartext but
    txn_id   16 bytes           } authenticated as AEAD associated data
    sender_id 4 bytes           }
    body     AEAD-sealed payload: nonce (12) || ciphertext || tag (16)

The routing header stays cleartext so intermediaries can route by PIN without
the payload key; any tampering with it (or the version/type bytes) breaks the
authentication tag. Bodies are AES-256-GCM; the nonce is sender_id || a
per-key monotone send counter, so no (key, nonce) pair ever repeats as long
as sender ids are unique per key.
"""

from __future__ import annotations

import struct
import threading
from dataclasses import dataclass, field
from enum import IntEnum
from typing import ClassVar, Optional, Type

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from .errors import (
    AuthFail,
    BadPin,
    BadFrameVersion,
    CounterExhausted,
    FrameTooLarge,
    Truncated,
    UnknownType,
)

WIRE_VERSION = 0x01
MAX_FRAME_LENGTH = 1 << 20  # cap on the u32 length field
HEADER_LEN = 4 + 16 + 4     # pin + txn_id + sender_id
MIN_FRAME_LENGTH = 2 + HEADER_LEN
NONCE_LEN = 12
TAG_LEN = 16


class MsgType(IntEnum):
    POS_AUTH_REQ = 0x01
    IDENTIFY_REQ = 0x02
    AUTHORIZE_REQ = 0x03
    AUTHORIZE_RESP = 0x04
    VERDICT = 0x05
    ACCOUNT_CHOICES = 0x06
    ACCOUNT_SELECT = 0x07
    ENROLL_REQ = 0x08
    ENROLL_ACK = 0x09
    FLAG_REQ = 0x0A
    FLAG_ACK = 0x0B
    CLUSTER_IDENTIFY_REQ = 0x0C
    CLUSTER_IDENTIFY_RESP = 0x0D
    ERROR = 0x7F


class Decision(IntEnum):
    DENY = 0
    ALLOW = 1


class Reason(IntEnum):
    OK = 0
    NO_MATCH = 1
    AMBIGUOUS = 2
    UNAVAILABLE = 3
    UNKNOWN_ACCOUNT = 4
    ACCOUNT_CLOSED = 5
    INSUFFICIENT_FUNDS = 6
    BAD_AMOUNT = 7
    REPLAY = 8
    ROUTING_ERROR = 9
    TIMEOUT = 10
    BAD_SELECTION = 11


def valid_pin(pin: str) -> bool:
    return len(pin) == 4 and all(c in "0123456789" for c in pin)


def route_pin(pin: str, shard_count: int) -> int:
    """Shard index for a PIN; the identity mapping at the full 10,000 scale."""
    if not (1 <= shard_count <= 10_000):
        raise ValueError(f"shard_count {shard_count} outside 1..10000")
    if not valid_pin(pin):
        raise BadPin(f"pin {pin!r} is not 4 digits")
    return int(pin, 10) % shard_count


@dataclass(frozen=True)
class RoutingHeader:
    pin: str
    txn_id: bytes
    sender_id: bytes

    def __post_init__(self):
        if not valid_pin(self.pin):
            raise BadPin(f"pin {self.pin!r} is not 4 digits")
        if len(self.txn_id) != 16 or len(self.sender_id) != 4:
            raise ValueError("txn_id must be 16 bytes and sender_id 4 bytes")

    def pack(self) -> bytes:
        return self.pin.encode("ascii") + self.txn_id + self.sender_id


def _aad(msg_type: int, header: RoutingHeader) -> bytes:
    return bytes((WIRE_VERSION, msg_type)) + header.pack()


class LinkKey:
    """Per-link AEAD key with an atomically increasing send counter."""

    def __init__(self, key: bytes, sender_id: bytes, send_counter: int = 0):
        if len(key) != 32:
            raise ValueError("link key must be 32 bytes")
        if len(sender_id) != 4:
            raise ValueError("sender_id must be 4 bytes")
        self.sender_id = sender_id
        self._aead = AESGCM(key)
        self._counter = send_counter
        self._lock = threading.Lock()

    def seal(self, plaintext: bytes, aad: bytes) -> bytes:
        with self._lock:
            if self._counter >= 2 ** 64 - 1:
                raise CounterExhausted("send counter exhausted")
            counter = self._counter
            self._counter += 1
        nonce = self.sender_id + counter.to_bytes(8, "big")
        return nonce + self._aead.encrypt(nonce, plaintext, aad)

    def open(self, sealed: bytes, aad: bytes) -> bytes:
        if len(sealed) < NONCE_LEN + TAG_LEN:
            raise AuthFail("sealed body too short")
        nonce, ct = sealed[:NONCE_LEN], sealed[NONCE_LEN:]
        try:
            return self._aead.decrypt(nonce, ct, aad)
        except InvalidTag:
            raise AuthFail("authentication failed") from None


# -- payload codecs ----------------------------------------------------------

def _take(data: bytes, off: int, n: int) -> tuple[bytes, int]:
    if off + n > len(data):
        raise Truncated("payload too short")
    return data[off:off + n], off + n


def _take_prefixed(data: bytes, off: int) -> tuple[bytes, int]:
    raw, off = _take(data, off, 2)
    return _take(data, off, struct.unpack(">H", raw)[0])


def _prefixed(b: bytes) -> bytes:
    if len(b) > 0xFFFF:
        raise ValueError("variable field exceeds 16-bit length prefix")
    return struct.pack(">H", len(b)) + b


def _done(off: int, data: bytes):
    if off != len(data):
        raise Truncated(f"{len(data) - off} trailing payload bytes")


def _refs(blob: bytes) -> tuple[bytes, ...]:
    if len(blob) % 16:
        raise Truncated("account_refs not a multiple of 16 bytes")
    return tuple(blob[i:i + 16] for i in range(0, len(blob), 16))


def _check_len(what: str, value: bytes, n: int) -> None:
    # struct's "Ns" silently truncates; reject instead
    if len(value) != n:
        raise ValueError(f"{what} must be {n} bytes, got {len(value)}")


@dataclass(frozen=True)
class PosAuthReq:
    TYPE: ClassVar[MsgType] = MsgType.POS_AUTH_REQ
    amount: int
    merchant_id: bytes
    template: bytes   # .biot bytes

    def __post_init__(self):
        _check_len("merchant_id", self.merchant_id, 8)

    def pack(self) -> bytes:
        return struct.pack(">Q8s", self.amount, self.merchant_id) + _prefixed(self.template)

    @classmethod
    def unpack(cls, data: bytes) -> "PosAuthReq":
        raw, off = _take(data, 0, 16)
        amount, merchant = struct.unpack(">Q8s", raw)
        template, off = _take_prefixed(data, off)
        _done(off, data)
        return cls(amount, merchant, template)


@dataclass(frozen=True)
class IdentifyReq(PosAuthReq):
    # byte-identical layout to PosAuthReq: the gateway re-seals the payload
    # without re-encoding it
    TYPE: ClassVar[MsgType] = MsgType.IDENTIFY_REQ


@dataclass(frozen=True)
class AuthorizeReq:
    TYPE: ClassVar[MsgType] = MsgType.AUTHORIZE_REQ
    identity_id: bytes
    account_ref: bytes
    amount: int
    merchant_id: bytes

    def __post_init__(self):
        _check_len("identity_id", self.identity_id, 16)
        _check_len("account_ref", self.account_ref, 16)
        _check_len("merchant_id", self.merchant_id, 8)

    def pack(self) -> bytes:
        return struct.pack(">16s16sQ8s", self.identity_id, self.account_ref,
                           self.amount, self.merchant_id)

    @classmethod
    def unpack(cls, data: bytes) -> "AuthorizeReq":
        raw, off = _take(data, 0, 48)
        _done(off, data)
        return cls(*struct.unpack(">16s16sQ8s", raw))


@dataclass(frozen=True)
class AuthorizeResp:
    TYPE: ClassVar[MsgType] = MsgType.AUTHORIZE_RESP
    decision: Decision
    reason: Reason

    def pack(self) -> bytes:
        return bytes((self.decision, self.reason))

    @classmethod
    def unpack(cls, data: bytes) -> "AuthorizeResp":
        raw, off = _take(data, 0, 2)
        _done(off, data)
        return cls(Decision(raw[0]), Reason(raw[1]))


@dataclass(frozen=True)
class Verdict(AuthorizeResp):
    TYPE: ClassVar[MsgType] = MsgType.VERDICT


@dataclass(frozen=True)
class AccountChoices:
    TYPE: ClassVar[MsgType] = MsgType.ACCOUNT_CHOICES
    account_refs: tuple[bytes, ...]

    def __post_init__(self):
        for ref in self.account_refs:
            _check_len("account_ref", ref, 16)

    def pack(self) -> bytes:
        if not (1 <= len(self.account_refs) <= 255):
            raise ValueError("1..255 account refs")
        return bytes((len(self.account_refs),)) + b"".join(self.account_refs)

    @classmethod
    def unpack(cls, data: bytes) -> "AccountChoices":
        raw, off = _take(data, 0, 1)
        refs, off = _take(data, off, raw[0] * 16)
        _done(off, data)
        return cls(_refs(refs))


@dataclass(frozen=True)
class AccountSelect:
    TYPE: ClassVar[MsgType] = MsgType.ACCOUNT_SELECT
    account_ref: bytes

    def __post_init__(self):
        _check_len("account_ref", self.account_ref, 16)

    def pack(self) -> bytes:
        return struct.pack(">16s", self.account_ref)

    @classmethod
    def unpack(cls, data: bytes) -> "AccountSelect":
        raw, off = _take(data, 0, 16)
        _done(off, data)
        return cls(raw)


@dataclass(frozen=True)
class EnrollReq:
    TYPE: ClassVar[MsgType] = MsgType.ENROLL_REQ
    identity_id: bytes
    template: bytes
    issuer_id: bytes
    branch_id: bytes
    account_refs: tuple[bytes, ...]

    def __post_init__(self):
        _check_len("identity_id", self.identity_id, 16)
        _check_len("issuer_id", self.issuer_id, 8)
        _check_len("branch_id", self.branch_id, 8)
        for ref in self.account_refs:
            _check_len("account_ref", ref, 16)

    def pack(self) -> bytes:
        return (struct.pack(">16s", self.identity_id) + _prefixed(self.template)
                + struct.pack(">8s8s", self.issuer_id, self.branch_id)
                + _prefixed(b"".join(self.account_refs)))

    @classmethod
    def unpack(cls, data: bytes) -> "EnrollReq":
        identity, off = _take(data, 0, 16)
        template, off = _take_prefixed(data, off)
        raw, off = _take(data, off, 16)
        issuer, branch = struct.unpack(">8s8s", raw)
        refs, off = _take_prefixed(data, off)
        _done(off, data)
        return cls(identity, template, issuer, branch, _refs(refs))


@dataclass(frozen=True)
class EnrollAck:
    TYPE: ClassVar[MsgType] = MsgType.ENROLL_ACK
    store_count: int

    def pack(self) -> bytes:
        return struct.pack(">Q", self.store_count)

    @classmethod
    def unpack(cls, data: bytes) -> "EnrollAck":
        raw, off = _take(data, 0, 8)
        _done(off, data)
        return cls(struct.unpack(">Q", raw)[0])


@dataclass(frozen=True)
class FlagReq:
    TYPE: ClassVar[MsgType] = MsgType.FLAG_REQ
    identity_id: bytes
    flag: bool

    def __post_init__(self):
        _check_len("identity_id", self.identity_id, 16)

    def pack(self) -> bytes:
        return struct.pack(">16sB", self.identity_id, int(self.flag))

    @classmethod
    def unpack(cls, data: bytes) -> "FlagReq":
        raw, off = _take(data, 0, 17)
        _done(off, data)
        identity, flag = struct.unpack(">16sB", raw)
        return cls(identity, bool(flag))


@dataclass(frozen=True)
class FlagAck:
    TYPE: ClassVar[MsgType] = MsgType.FLAG_ACK

    def pack(self) -> bytes:
        return b""

    @classmethod
    def unpack(cls, data: bytes) -> "FlagAck":
        _done(0, data)
        return cls()


@dataclass(frozen=True)
class ClusterIdentifyReq:
    TYPE: ClassVar[MsgType] = MsgType.CLUSTER_IDENTIFY_REQ
    template: bytes

    def pack(self) -> bytes:
        return _prefixed(self.template)

    @classmethod
    def unpack(cls, data: bytes) -> "ClusterIdentifyReq":
        template, off = _take_prefixed(data, 0)
        _done(off, data)
        return cls(template)


@dataclass(frozen=True)
class ClusterIdentifyResp:
    """A member's two best (identity, score) candidates plus its scan count.

    Scores travel as IEEE-754 doubles so the coordinator's merge is
    bit-identical to a local scan.
    """

    TYPE: ClassVar[MsgType] = MsgType.CLUSTER_IDENTIFY_RESP
    candidates: tuple[tuple[bytes, float], ...]
    scanned: int

    def pack(self) -> bytes:
        if len(self.candidates) > 2:
            raise ValueError("members report at most two candidates")
        out = [bytes((len(self.candidates),))]
        for identity, score in self.candidates:
            out.append(struct.pack(">16sd", identity, score))
        out.append(struct.pack(">Q", self.scanned))
        return b"".join(out)

    @classmethod
    def unpack(cls, data: bytes) -> "ClusterIdentifyResp":
        raw, off = _take(data, 0, 1)
        count = raw[0]
        if count > 2:
            raise Truncated("more than two candidates")
        cands = []
        for _ in range(count):
            raw, off = _take(data, off, 24)
            identity, score = struct.unpack(">16sd", raw)
            cands.append((identity, score))
        raw, off = _take(data, off, 8)
        _done(off, data)
        return cls(tuple(cands), struct.unpack(">Q", raw)[0])


@dataclass(frozen=True)
class ErrorMsg:
    """Operation-level failure relayed across a link (code from errors.py)."""

    TYPE: ClassVar[MsgType] = MsgType.ERROR
    code: int
    detail: str = ""

    def pack(self) -> bytes:
        return bytes((self.code,)) + _prefixed(self.detail.encode("utf-8"))

    @classmethod
    def unpack(cls, data: bytes) -> "ErrorMsg":
        raw, off = _take(data, 0, 1)
        detail, off = _take_prefixed(data, off)
        _done(off, data)
        return cls(raw[0], detail.decode("utf-8", "replace"))


MESSAGE_TYPES: dict[MsgType, Type] = {
    cls.TYPE: cls
    for cls in (PosAuthReq, IdentifyReq, AuthorizeReq, AuthorizeResp, Verdict,
                AccountChoices, AccountSelect, EnrollReq, EnrollAck, FlagReq,
                FlagAck, ClusterIdentifyReq, ClusterIdentifyResp, ErrorMsg)
}


# -- framing -----------------------------------------------------------------

@dataclass(frozen=True)
class Frame:
    msg_type: MsgType
    header: RoutingHeader
    body: bytes  # sealed


class NeedMoreData:
    """Sentinel: the buffer does not yet hold a complete frame."""

    def __repr__(self):
        return "NeedMoreData"


NEED_MORE_DATA = NeedMoreData()


def encode_frame(frame: Frame) -> bytes:
    rest = bytes((WIRE_VERSION, frame.msg_type)) + frame.header.pack() + frame.body
    if len(rest) > MAX_FRAME_LENGTH:
        raise FrameTooLarge(f"frame of {len(rest)} bytes")
    return struct.pack(">I", len(rest)) + rest


def decode_frame(buf: bytes):
    """Incremental decode: (Frame, bytes_consumed) or NEED_MORE_DATA.

    The declared length is validated as soon as it is readable, before any
    payload is buffered or inspected.
    """
    if len(buf) < 4:
        return NEED_MORE_DATA
    length = struct.unpack_from(">I", buf)[0]
    if length > MAX_FRAME_LENGTH:
        raise FrameTooLarge(f"declared length {length}")
    if length < MIN_FRAME_LENGTH:
        raise Truncated(f"declared length {length} below minimum {MIN_FRAME_LENGTH}")
    if len(buf) < 4 + length:
        return NEED_MORE_DATA
    version, msg_type = buf[4], buf[5]
    if version != WIRE_VERSION:
        raise BadFrameVersion(f"version {version:#04x}")
    if msg_type not in MsgType._value2member_map_:
        raise UnknownType(f"msg_type {msg_type:#04x}")
    pin = buf[6:10].decode("ascii", "replace")
    header = RoutingHeader(pin=pin, txn_id=bytes(buf[10:26]), sender_id=bytes(buf[26:30]))
    body = bytes(buf[30:4 + length])
    return Frame(MsgType(msg_type), header, body), 4 + length


class FrameDecoder:
    """Per-connection reassembly buffer for a frame stream."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[Frame]:
        self._buf.extend(data)
        frames = []
        while True:
            result = decode_frame(self._buf)
            if result is NEED_MORE_DATA:
                return frames
            frame, consumed = result
            del self._buf[:consumed]
            frames.append(frame)


# -- sealed message helpers ---------------------------------------------------

def seal_message(msg, header: RoutingHeader, key: LinkKey) -> bytes:
    """Encode, seal and frame a message; returns wire bytes."""
    sealed = key.seal(msg.pack(), _aad(msg.TYPE, header))
    return encode_frame(Frame(msg.TYPE, header, sealed))


def reseal_payload(payload: bytes, msg_type: MsgType, header: RoutingHeader,
                   key: LinkKey) -> bytes:
    """Seal already-encoded payload bytes (hop-by-hop forwarding)."""
    sealed = key.seal(payload, _aad(msg_type, header))
    return encode_frame(Frame(msg_type, header, sealed))


def open_frame(frame: Frame, key: LinkKey):
    """Authenticate and parse a frame's body; returns the message object."""
    payload = key.open(frame.body, _aad(frame.msg_type, frame.header))
    return MESSAGE_TYPES[frame.msg_type].unpack(payload)


def open_frame_raw(frame: Frame, key: LinkKey) -> bytes:
    """Authenticate and return the raw payload bytes without parsing."""
    return key.open(frame.body, _aad(frame.msg_type, frame.header))
