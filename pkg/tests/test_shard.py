import math
import secrets

import pytest

from conftest import GENUINE_NOISE, ISSUER_A, MiniNet, enrollable_template, make_identity
from bionet.config import AccountSeed, BANK_SENDER, Timeouts
from bionet.errors import DuplicateIdentity, InsufficientMinutiae, UnknownIdentity
from bionet.matcher import MatcherParams, build_cylinders
from bionet.shard import AuditKind, AuditLog, ShardStore
from bionet.templates import (
    Minutia,
    Template,
    encode_template,
    generate_template,
    perturb,
)
from bionet.wire import (
    AccountChoices,
    AccountSelect,
    Decision,
    EnrollAck,
    EnrollReq,
    ErrorMsg,
    FlagAck,
    LinkKey,
    Reason,
    RoutingHeader,
    Verdict,
    decode_frame,
    open_frame,
    route_pin,
    seal_message,
)

P = MatcherParams()

SPARSE = Template(512, 512, tuple(
    Minutia(x=float(x), y=float(y), angle=0.5)
    for x, y in ((50, 50), (450, 50), (50, 450), (450, 450))))


def _pin_for(net: MiniNet, shard: int) -> str:
    for pin in range(10_000):
        if route_pin(f"{pin:04d}", net.config.shard_count) == shard:
            return f"{pin:04d}"
    raise AssertionError


# -- store ---------------------------------------------------------------------

def test_store_enroll_counts_and_duplicates():
    store = ShardStore(0, P)
    t = enrollable_template(1)
    assert store.enroll(b"\x01" * 16, t, ISSUER_A, b"B" * 8, (b"A" * 16,)) == 1
    with pytest.raises(DuplicateIdentity):
        store.enroll(b"\x01" * 16, t, ISSUER_A, b"B" * 8, (b"A" * 16,))
    assert store.count == 1


def test_store_rejects_unenrollable_template_unchanged():
    store = ShardStore(0, P)
    store.enroll(b"\x01" * 16, enrollable_template(1), ISSUER_A, b"B" * 8, (b"A" * 16,))
    before = store.snapshot_view()
    with pytest.raises(InsufficientMinutiae):
        store.enroll(b"\x02" * 16, SPARSE, ISSUER_A, b"B" * 8, (b"A" * 16,))
    assert store.count == 1
    assert store.snapshot_view() == before  # same cached objects, no rebuild


def test_store_flag_unknown_identity():
    store = ShardStore(0, P)
    with pytest.raises(UnknownIdentity):
        store.set_flag(b"\x09" * 16, True)


def test_store_snapshot_round_trip(tmp_path):
    store = ShardStore(3, P)
    templates = {make_identity(i): enrollable_template(50 + i) for i in range(6)}
    for k, (identity, t) in enumerate(templates.items()):
        store.enroll(identity, t, ISSUER_A, b"B" * 8,
                     (bytes([k + 1]) * 16, bytes([k + 2]) * 16))
    store.set_flag(make_identity(2), True)
    store.save_snapshot(tmp_path)

    restored = ShardStore(3, P)
    assert restored.load_snapshot(tmp_path) == 6
    for identity in templates:
        a, b = store.get(identity), restored.get(identity)
        assert b is not None
        assert b.account_refs == a.account_refs
        assert b.flagged == a.flagged
        assert b.issuer_id == a.issuer_id
    # identification still works on the reloaded store (templates quantized)
    probe = build_cylinders(perturb(templates[make_identity(1)], GENUINE_NOISE, 7), P)
    candidates, scanned = restored.scan_top_two(probe)
    assert scanned == 6
    assert candidates[0][0] == make_identity(1)


# -- audit log -----------------------------------------------------------------

def test_audit_is_append_only_with_monotone_timestamps():
    fake_now = [100.0]
    log = AuditLog(clock=lambda: fake_now[0])
    log.append(AuditKind.ENROLL, b"\x00" * 16)
    fake_now[0] = 99.0  # clock went backwards
    second = log.append(AuditKind.MATCH, b"\x01" * 16)
    events = log.query()
    assert [e.kind for e in events] == [AuditKind.ENROLL, AuditKind.MATCH]
    assert events[1].timestamp_ms >= events[0].timestamp_ms
    assert second.timestamp_ms == events[1].timestamp_ms


def test_audit_query_filters():
    log = AuditLog()
    assert log.query() == []
    log.append(AuditKind.MATCH, b"\x01" * 16)
    log.append(AuditKind.FLAG_ALERT, b"\x01" * 16)
    log.append(AuditKind.MATCH, b"\x02" * 16)
    assert len(log.query(kinds={AuditKind.MATCH})) == 2
    assert len(log.query(kinds={AuditKind.FLAG_ALERT})) == 1


# -- node behavior over the wire -------------------------------------------------

@pytest.fixture
def net(funded_accounts):
    return MiniNet(accounts=funded_accounts)


def _enrolled(net: MiniNet, shard=2, seed=11, accounts=(bytes([1]) * 16,)):
    pin = _pin_for(net, shard)
    identity = make_identity(seed)
    template = enrollable_template(seed)
    ack = net.enroll(identity, template, pin, accounts)
    assert isinstance(ack, EnrollAck)
    return identity, template, pin


def test_enroll_first_store_count(net):
    _, _, _ = _enrolled(net)
    pin = _pin_for(net, 2)
    assert isinstance(net.enroll(make_identity(90), enrollable_template(90), pin,
                                 (bytes([2]) * 16,)), EnrollAck)


def test_enroll_duplicate_rejected(net):
    identity, template, pin = _enrolled(net)
    reply = net.enroll(identity, template, pin, (bytes([1]) * 16,))
    assert isinstance(reply, ErrorMsg)
    assert reply.code == DuplicateIdentity.code


def test_enroll_wrong_shard_rejected(net):
    pin_for_other = _pin_for(net, 3)
    header = RoutingHeader(pin=pin_for_other, txn_id=secrets.token_bytes(16),
                           sender_id=BANK_SENDER)
    req = EnrollReq(make_identity(7), encode_template(enrollable_template(7)),
                    ISSUER_A, b"B" * 8, (bytes([1]) * 16,))
    # send to shard 2's coordinator with a pin routing to shard 3
    raw = net.transport.request(net.config.shard_coordinator(2),
                                seal_message(req, header, net.bank_key))
    reply = open_frame(decode_frame(raw)[0], net.bank_key)
    assert isinstance(reply, ErrorMsg)
    from bionet.errors import WrongShard
    assert reply.code == WrongShard.code


def test_enroll_unenrollable_template(net):
    pin = _pin_for(net, 2)
    reply = net.enroll(make_identity(8), SPARSE, pin, (bytes([1]) * 16,))
    assert isinstance(reply, ErrorMsg)
    assert reply.code == InsufficientMinutiae.code


def test_identify_enrolled_probe_allows(net):
    identity, template, pin = _enrolled(net)
    probe = perturb(template, GENUINE_NOISE, seed=5)
    result = net.pos.transact(pin, encode_template(probe), 1_000, b"MERCHANT")
    assert result.verdict == Verdict(Decision.ALLOW, Reason.OK)
    events = net.coordinator(pin).audit.query(kinds={AuditKind.MATCH})
    assert events and events[-1].txn_id == result.txn_id


def test_identify_unenrolled_probe_denies_no_match(net):
    _, _, pin = _enrolled(net)
    stranger = encode_template(enrollable_template(777))
    result = net.pos.transact(pin, stranger, 1_000, b"MERCHANT")
    assert result.verdict == Verdict(Decision.DENY, Reason.NO_MATCH)


def test_identify_unusable_probe_denies_no_match(net):
    _, _, pin = _enrolled(net)
    result = net.pos.transact(pin, encode_template(SPARSE), 1_000, b"MERCHANT")
    assert result.verdict == Verdict(Decision.DENY, Reason.NO_MATCH)
    events = net.coordinator(pin).audit.query(kinds={AuditKind.NO_MATCH})
    assert any("unusable" in e.detail for e in events)


def test_two_accounts_choice_flow(net):
    refs = (bytes([1]) * 16, bytes([2]) * 16)
    identity, template, pin = _enrolled(net, seed=21, accounts=refs)
    probe = encode_template(perturb(template, GENUINE_NOISE, seed=9))
    result = net.pos.transact(pin, probe, 500, b"MERCHANT",
                              select=lambda ch: ch.account_refs[1])
    assert result.choices is not None
    assert result.choices.account_refs == refs
    assert result.verdict.decision is Decision.ALLOW
    assert net.issuer_a.bank.get_balance(refs[1]) == 1_000_000 - 500
    assert net.issuer_a.bank.get_balance(refs[0]) == 1_000_000


def test_account_select_unknown_ref(net):
    refs = (bytes([1]) * 16, bytes([2]) * 16)
    identity, template, pin = _enrolled(net, seed=22, accounts=refs)
    probe = encode_template(perturb(template, GENUINE_NOISE, seed=9))
    result = net.pos.transact(pin, probe, 500, b"MERCHANT",
                              select=lambda ch: b"\xff" * 16)
    assert result.verdict == Verdict(Decision.DENY, Reason.BAD_SELECTION)


def test_account_select_window_expires():
    fake_now = [1000.0]
    net = MiniNet(accounts=(AccountSeed(bytes([1]) * 16, 10_000),
                            AccountSeed(bytes([2]) * 16, 10_000)),
                  clock=lambda: fake_now[0])
    refs = (bytes([1]) * 16, bytes([2]) * 16)
    identity, template, pin = _enrolled(net, seed=23, accounts=refs)
    probe = encode_template(perturb(template, GENUINE_NOISE, seed=9))

    def late_select(choices):
        fake_now[0] += 61.0  # selection window is 60 s
        return choices.account_refs[0]

    result = net.pos.transact(pin, probe, 500, b"MERCHANT", select=late_select)
    assert result.verdict == Verdict(Decision.DENY, Reason.TIMEOUT)


def test_flag_alert_and_idempotence(net):
    identity, template, pin = _enrolled(net, seed=24)
    assert isinstance(net.set_flag(identity, pin, True), FlagAck)
    assert isinstance(net.set_flag(identity, pin, True), FlagAck)  # idempotent
    probe = encode_template(perturb(template, GENUINE_NOISE, seed=3))
    result = net.pos.transact(pin, probe, 100, b"MERCHNT7")
    assert result.verdict.decision is Decision.ALLOW
    alerts = net.coordinator(pin).audit.query(kinds={AuditKind.FLAG_ALERT})
    assert len(alerts) == 1
    assert alerts[0].merchant_id == b"MERCHNT7"
    assert alerts[0].identity_id == identity


def test_flag_unknown_identity(net):
    pin = _pin_for(net, 2)
    reply = net.set_flag(make_identity(999), pin, True)
    assert isinstance(reply, ErrorMsg)
    assert reply.code == UnknownIdentity.code


def test_flag_clear(net):
    identity, template, pin = _enrolled(net, seed=25)
    net.set_flag(identity, pin, True)
    net.set_flag(identity, pin, False)
    probe = encode_template(perturb(template, GENUINE_NOISE, seed=3))
    net.pos.transact(pin, probe, 100, b"MERCHANT")
    assert net.coordinator(pin).audit.query(kinds={AuditKind.FLAG_ALERT}) == []


def test_flagged_outcome_identical_to_unflagged(funded_accounts):
    # allow-and-alert: only the audit log may differ
    verdicts = []
    for flagged in (False, True):
        net = MiniNet(accounts=funded_accounts)
        identity, template, pin = _enrolled(net, seed=26)
        if flagged:
            net.set_flag(identity, pin, True)
        probe = encode_template(perturb(template, GENUINE_NOISE, seed=4))
        verdicts.append(net.pos.transact(pin, probe, 250, b"MERCHNT0",
                                         txn_id=b"\x07" * 16).verdict)
    assert verdicts[0] == verdicts[1]


def test_deny_on_flag_policy(funded_accounts):
    net = MiniNet(accounts=funded_accounts, deny_on_flag=True)
    identity, template, pin = _enrolled(net, seed=27)
    net.set_flag(identity, pin, True)
    probe = encode_template(perturb(template, GENUINE_NOISE, seed=4))
    result = net.pos.transact(pin, probe, 250, b"MERCHANT")
    assert result.verdict.decision is Decision.DENY
    assert len(net.coordinator(pin).audit.query(kinds={AuditKind.FLAG_ALERT})) == 1


def test_issuer_unreachable_fails_closed(funded_accounts):
    net = MiniNet(accounts=funded_accounts)
    pin = _pin_for(net, 1)
    identity = make_identity(31)
    template = enrollable_template(31)
    # ISSUER_B has no accounts and we will unbind it entirely
    net.enroll(identity, template, pin, (bytes([9]) * 16,), issuer_id=net.issuer_b.bank.issuer_id)
    net.transport._handlers.pop(net.issuer_b.address)
    probe = encode_template(perturb(template, GENUINE_NOISE, seed=2))
    result = net.pos.transact(pin, probe, 100, b"MERCHANT")
    assert result.verdict == Verdict(Decision.DENY, Reason.UNAVAILABLE)


def test_issuer_deny_is_forwarded_verbatim_and_audited(net):
    identity, template, pin = _enrolled(net, seed=32)
    probe = encode_template(perturb(template, GENUINE_NOISE, seed=2))
    result = net.pos.transact(pin, probe, 10_000_000_000, b"MERCHANT")
    assert result.verdict == Verdict(Decision.DENY, Reason.INSUFFICIENT_FUNDS)
    forwarded = net.coordinator(pin).audit.query(kinds={AuditKind.DENY_FORWARDED})
    assert forwarded and forwarded[-1].detail == "INSUFFICIENT_FUNDS"


def test_every_verdict_has_one_identification_event(net):
    identity, template, pin = _enrolled(net, seed=33)
    txns = []
    for seed in range(6):
        probe = encode_template(perturb(template, GENUINE_NOISE, seed=seed))
        txns.append(net.pos.transact(pin, probe, 100, b"MERCHANT").txn_id)
    stranger = encode_template(enrollable_template(888))
    txns.append(net.pos.transact(pin, stranger, 100, b"MERCHANT").txn_id)
    ident_kinds = {AuditKind.MATCH, AuditKind.NO_MATCH, AuditKind.AMBIGUOUS}
    events = net.coordinator(pin).audit.query(kinds=ident_kinds)
    from collections import Counter
    per_txn = Counter(e.txn_id for e in events)
    for txn in txns:
        assert per_txn[txn] == 1


def test_cluster_enrollment_spreads_partitions(funded_accounts):
    net = MiniNet(shard_count=1, cluster_size=2, accounts=funded_accounts)
    pin = "0000"
    for i in range(12):
        ack = net.enroll(make_identity(i), enrollable_template(100 + i), pin,
                         (bytes([1]) * 16,))
        assert isinstance(ack, EnrollAck)
    coord = net.shards[(0, 0)]
    member = net.shards[(0, 1)]
    assert coord.store.count == 6 and member.store.count == 6
    assert len(coord.routes) == 12
    # duplicate via the remote partition also rejected
    reply = net.enroll(make_identity(1), enrollable_template(101), pin, (bytes([1]) * 16,))
    assert isinstance(reply, ErrorMsg) and reply.code == DuplicateIdentity.code


def test_cluster_transaction_and_member_down(funded_accounts):
    net = MiniNet(shard_count=1, cluster_size=2, accounts=funded_accounts)
    pin = "0000"
    templates = {}
    for i in range(10):
        identity = make_identity(i)
        templates[identity] = enrollable_template(200 + i)
        net.enroll(identity, templates[identity], pin, (bytes([i % 8 + 1]) * 16,))
    target = make_identity(3)  # partition 1
    probe = encode_template(perturb(templates[target], GENUINE_NOISE, seed=6))
    result = net.pos.transact(pin, probe, 100, b"MERCHANT")
    assert result.verdict.decision is Decision.ALLOW

    net.transport._handlers.pop(net.shards[(0, 1)].address)  # member down
    result = net.pos.transact(pin, probe, 100, b"MERCHANT")
    assert result.verdict == Verdict(Decision.DENY, Reason.UNAVAILABLE)
