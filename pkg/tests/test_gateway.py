import secrets

import pytest

from conftest import GENUINE_NOISE, MiniNet, enrollable_template, make_identity
from bionet.config import AccountSeed, POS_SENDER
from bionet.errors import TransportError
from bionet.gateway import TxnLog
from bionet.templates import encode_template, perturb
from bionet.wire import (
    Decision,
    LinkKey,
    MsgType,
    PosAuthReq,
    Reason,
    RoutingHeader,
    Verdict,
    decode_frame,
    open_frame_raw,
    route_pin,
    seal_message,
)


@pytest.fixture
def net(funded_accounts):
    return MiniNet(accounts=funded_accounts)


def _pin_for(net: MiniNet, shard: int) -> str:
    for pin in range(10_000):
        if route_pin(f"{pin:04d}", net.config.shard_count) == shard:
            return f"{pin:04d}"
    raise AssertionError


def _enrolled(net, shard=1, seed=40):
    pin = _pin_for(net, shard)
    identity = make_identity(seed)
    template = enrollable_template(seed)
    net.enroll(identity, template, pin, (bytes([1]) * 16,))
    return identity, template, pin


def test_txn_log_window():
    fake_now = [0.0]
    log = TxnLog(window=300.0, clock=lambda: fake_now[0])
    assert log.check_and_insert(b"\x01" * 16)
    assert not log.check_and_insert(b"\x01" * 16)
    fake_now[0] = 301.0
    assert log.check_and_insert(b"\x01" * 16)  # window elapsed


def test_duplicate_txn_id_denied_replay(net):
    identity, template, pin = _enrolled(net)
    probe = encode_template(perturb(template, GENUINE_NOISE, seed=1))
    txn = secrets.token_bytes(16)
    first = net.pos.transact(pin, probe, 100, b"MERCHANT", txn_id=txn)
    assert first.verdict.decision is Decision.ALLOW
    replay = net.pos.transact(pin, probe, 100, b"MERCHANT", txn_id=txn)
    assert replay.verdict == Verdict(Decision.DENY, Reason.REPLAY)


def test_replay_denied_even_for_denied_original(net):
    _, _, pin = _enrolled(net)
    stranger = encode_template(enrollable_template(4321))
    txn = secrets.token_bytes(16)
    first = net.pos.transact(pin, stranger, 100, b"MERCHANT", txn_id=txn)
    assert first.verdict.reason is Reason.NO_MATCH
    replay = net.pos.transact(pin, stranger, 100, b"MERCHANT", txn_id=txn)
    assert replay.verdict.reason is Reason.REPLAY


def test_unconfigured_shard_routing_error(funded_accounts):
    net = MiniNet(accounts=funded_accounts)
    # drop shard 3 from the gateway's view
    object.__setattr__(net.config, "shards",
                       {i: m for i, m in net.config.shards.items() if i != 3})
    pin = _pin_for(net, 3)
    result = net.pos.transact(pin, encode_template(enrollable_template(1)), 100, b"MERCHNT0")
    assert result.verdict == Verdict(Decision.DENY, Reason.ROUTING_ERROR)


def test_shard_unreachable_times_out_to_unavailable(net):
    _, _, pin = _enrolled(net, shard=2)
    net.transport._handlers.pop(net.config.shard_coordinator(2))
    result = net.pos.transact(pin, encode_template(enrollable_template(2)), 100, b"MERCHNT0")
    assert result.verdict == Verdict(Decision.DENY, Reason.UNAVAILABLE)


def test_tampered_pos_frame_dropped_silently(net):
    _, template, pin = _enrolled(net)
    key = LinkKey(net.config.keys["pos"], POS_SENDER)
    header = RoutingHeader(pin=pin, txn_id=secrets.token_bytes(16), sender_id=POS_SENDER)
    frame_bytes = bytearray(seal_message(
        PosAuthReq(100, b"MERCHANT", encode_template(template)), header, key))
    frame_bytes[-1] ^= 0x01
    with pytest.raises(TransportError):
        net.transport.request(net.config.gateway_address, bytes(frame_bytes))


def test_responses_echo_request_txn_id(net):
    identity, template, pin = _enrolled(net, seed=41)
    txn = secrets.token_bytes(16)
    probe = encode_template(perturb(template, GENUINE_NOISE, seed=2))
    result = net.pos.transact(pin, probe, 100, b"MERCHANT", txn_id=txn)
    assert result.txn_id == txn  # PosClient verifies the echo internally


def test_gateway_forwards_payload_byte_identical(funded_accounts):
    net = MiniNet(accounts=funded_accounts)
    pin = _pin_for(net, 0)
    captured = {}
    shard_key = LinkKey(net.config.keys["gateway_shard"], b"CAP0")
    real_handler = net.transport._handlers[net.config.shard_coordinator(0)]

    def capturing_handler(raw):
        frame, _ = decode_frame(raw)
        if frame.msg_type == MsgType.IDENTIFY_REQ:
            captured["payload"] = open_frame_raw(frame, shard_key)
        return real_handler(raw)

    net.transport._handlers[net.config.shard_coordinator(0)] = capturing_handler
    msg = PosAuthReq(4242, b"MERCHANT", encode_template(enrollable_template(9)))
    net.pos.transact(pin, msg.template, 4242, b"MERCHANT")
    assert captured["payload"] == msg.pack()


def test_account_select_without_pending_times_out(net):
    from bionet.wire import AccountSelect
    key = LinkKey(net.config.keys["pos"], POS_SENDER)
    header = RoutingHeader(pin="0001", txn_id=secrets.token_bytes(16),
                           sender_id=POS_SENDER)
    raw = net.transport.request(net.config.gateway_address,
                                seal_message(AccountSelect(b"\x01" * 16), header, key))
    frame, _ = decode_frame(raw)
    from bionet.wire import open_frame
    verdict = open_frame(frame, key)
    assert verdict == Verdict(Decision.DENY, Reason.TIMEOUT)


def test_select_continuation_exempt_from_replay(funded_accounts):
    net = MiniNet(accounts=funded_accounts)
    pin = _pin_for(net, 0)
    identity = make_identity(60)
    template = enrollable_template(60)
    refs = (bytes([1]) * 16, bytes([2]) * 16)
    net.enroll(identity, template, pin, refs)
    probe = encode_template(perturb(template, GENUINE_NOISE, seed=3))
    # the two-step flow reuses one txn_id across POS_AUTH_REQ and ACCOUNT_SELECT
    result = net.pos.transact(pin, probe, 100, b"MERCHANT",
                              select=lambda ch: ch.account_refs[0])
    assert result.choices is not None
    assert result.verdict.decision is Decision.ALLOW
