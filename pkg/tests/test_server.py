import dataclasses
import json

import pytest

from ratchetlab import keystore
from ratchetlab.client import Client
from ratchetlab.keystore import generate_user
from ratchetlab.server import (
    LEDGER_FIELDS, ConflictError, ForbiddenError, LogicalClock, NotFoundError, Server, ServerValidationError,
)


ALICE = '+15550000001'
BOB = '+15550000002'
CAROL = '+15550000003'
DAVE = '+15550000004'


def make_client(user_id, server, rng, n_one_time=5):
    client = Client(generate_user(user_id, n_one_time, rng), server, rng)
    client.register()
    return client


def events(server):
    return [row.event for row in server.ledger()]


def test_register(rng, server):
    alice = make_client(ALICE, server, rng)

    assert server.is_registered(ALICE)
    assert server.users() == [ALICE]
    assert server.identity_key(ALICE) == alice.store.identity.dh.public
    assert server.prekey_count(ALICE) == 5
    assert alice.store.pool == []
    assert events(server) == ['registered']

    with pytest.raises(ConflictError):
        alice.register()


def test_register_replace(rng, server):
    alice = make_client(ALICE, server, rng)
    reinstalled = Client(generate_user(ALICE, 2, rng), server, rng)

    reinstalled.register(replace_existing=True)
    assert server.identity_key(ALICE) == reinstalled.store.identity.dh.public
    assert server.identity_key(ALICE) != alice.store.identity.dh.public
    assert server.prekey_count(ALICE) == 2


def test_register_bad_signature(rng, server):
    registration = Client(generate_user(ALICE, 0, rng), server, rng).registration()
    bad = dataclasses.replace(
        registration,
        signed_prekey=dataclasses.replace(registration.signed_prekey, signature=bytes(64)),
    )

    with pytest.raises(ServerValidationError):
        server.register(bad)
    assert not server.is_registered(ALICE)


def test_register_invalid_user_id(rng, server):
    registration = Client(generate_user(ALICE, 0, rng), server, rng).registration()
    with pytest.raises(ServerValidationError):
        server.register(dataclasses.replace(registration, user_id='alice'))


def test_fetch_bundle_pool(rng, server, caplog):
    make_client(ALICE, server, rng)
    bob = make_client(BOB, server, rng, n_one_time=3)

    bundles = [server.fetch_bundle(ALICE, BOB) for _ in range(4)]
    ids = [bundle.one_time_prekey.id for bundle in bundles[:3]]

    assert sorted(ids) == [1, 2, 3]
    assert bundles[3].one_time_prekey is None
    assert all(bundle.verify() for bundle in bundles)
    assert all(bundle.identity_public == bob.store.identity.dh.public for bundle in bundles)
    assert server.prekey_count(BOB) == 0
    assert "Only 0 one-time prekeys left" in caplog.text
    assert events(server).count('bundle_fetched') == 4

    with pytest.raises(NotFoundError):
        server.fetch_bundle(ALICE, CAROL)


def test_replenish(rng, server):
    bob = make_client(BOB, server, rng, n_one_time=1)

    assert bob.replenish(4) == 5
    ids = [server.fetch_bundle(ALICE, BOB).one_time_prekey.id for _ in range(5)]
    assert ids == [1, 2, 3, 4, 5]

    with pytest.raises(ConflictError):
        server.upload_prekeys(BOB, [keystore.OneTimePreKeyPublic(7, bytes(32))] * 2)


def test_rotate_signed_prekey(rng, server):
    bob = make_client(BOB, server, rng)

    bob.rotate_signed_prekey()
    bundle = server.fetch_bundle(ALICE, BOB)
    assert bundle.signed_prekey.id == 2
    assert bundle.verify()
    assert server.prekey_count(BOB) == 4

    forged = dataclasses.replace(bundle.signed_prekey, id=3)
    with pytest.raises(ServerValidationError):
        server.update_signed_prekey(BOB, forged)


def test_relay_and_deliver(rng, server):
    alice = make_client(ALICE, server, rng)
    bob = make_client(BOB, server, rng)

    envelope = alice.send(BOB, b'hello bob')
    assert server.pending(BOB) == 1

    delivered = server.deliver(BOB)
    assert delivered == [envelope]
    assert server.pending(BOB) == 0
    assert server.deliver(BOB) == []

    relayed, = [row for row in server.ledger() if row.event == 'message_relayed']
    assert (relayed.sender_id, relayed.recipient_id, relayed.group_id) == (ALICE, BOB, None)
    assert relayed.payload_size == len(envelope.to_bytes())

    delivered_row, = [row for row in server.ledger() if row.event == 'message_delivered']
    assert delivered_row.payload_size == relayed.payload_size
    assert delivered_row.timestamp_ms >= relayed.timestamp_ms

    assert bob.decrypt(delivered[0]) == b'hello bob'


def test_relay_unknown_recipient(rng, server):
    alice = make_client(ALICE, server, rng)
    make_client(BOB, server, rng)
    envelope = dataclasses.replace(alice.encrypt(BOB, b'hi'), recipient_id=CAROL)

    with pytest.raises(NotFoundError):
        server.relay(envelope)


def test_timestamps_monotone(rng):
    times = iter([5000, 4000, 7000, 1000, 1000, 8000, 2000, 9000, 100, 100, 100, 100])
    server = Server(lambda: next(times))

    alice = make_client(ALICE, server, rng)
    make_client(BOB, server, rng)
    alice.send(BOB, b'1')
    alice.send(BOB, b'2')
    server.deliver(BOB)

    timestamps = [row.timestamp_ms for row in server.ledger()]
    assert timestamps == sorted(timestamps)
    assert server.last_timestamp == timestamps[-1]


def test_group_send(rng, server):
    clients = {user_id: make_client(user_id, server, rng) for user_id in (ALICE, BOB, CAROL)}
    make_client(DAVE, server, rng)

    group = server.create_group('family', [CAROL, ALICE, BOB, ALICE])
    assert group.members == [ALICE, BOB, CAROL]
    assert server.get_group('family') == group

    envelopes = clients[ALICE].group_send('family', b'dinner at 8')
    assert sorted(envelopes) == [BOB, CAROL]

    relayed = [row for row in server.ledger() if row.event == 'message_relayed']
    assert [row.recipient_id for row in relayed] == [BOB, CAROL]
    assert {row.group_id for row in relayed} == {'family'}
    assert len({row.timestamp_ms for row in relayed}) == 1

    created = [row for row in server.ledger() if row.event == 'group_created']
    assert sorted(row.sender_id for row in created) == [ALICE, BOB, CAROL]

    for user_id in (BOB, CAROL):
        assert [received.plaintext for received in clients[user_id].receive()] == [b'dinner at 8']


def test_group_send_rules(rng, server):
    clients = {user_id: make_client(user_id, server, rng) for user_id in (ALICE, BOB, CAROL, DAVE)}
    server.create_group('family', [ALICE, BOB, CAROL])

    with pytest.raises(ForbiddenError):
        clients[DAVE].group_send('family', b'let me in')

    partial = {BOB: clients[ALICE].encrypt(BOB, b'only bob')}
    with pytest.raises(ServerValidationError):
        server.group_send(ALICE, 'family', partial)

    misaddressed = {BOB: clients[ALICE].encrypt(BOB, b'x'), CAROL: clients[ALICE].encrypt(BOB, b'y')}
    with pytest.raises(ServerValidationError):
        server.group_send(ALICE, 'family', misaddressed)

    assert server.pending(BOB) == 0

    with pytest.raises(NotFoundError):
        server.get_group('work')
    with pytest.raises(ConflictError):
        server.create_group('family', [ALICE, BOB])
    with pytest.raises(ServerValidationError):
        server.create_group('solo', [ALICE])
    with pytest.raises(NotFoundError):
        server.create_group('strangers', [ALICE, '+15550000099'])


def test_discover_contacts(rng, server):
    make_client(ALICE, server, rng)
    make_client(BOB, server, rng)

    found = server.discover_contacts(ALICE, [BOB, '+15550000099', BOB])
    assert found == [BOB]

    uploaded = [row for row in server.ledger() if row.event == 'contacts_uploaded']
    assert sorted(row.recipient_id for row in uploaded) == [BOB, '+15550000099']
    assert {row.sender_id for row in uploaded} == {ALICE}

    with pytest.raises(ServerValidationError):
        server.discover_contacts(ALICE, ['not a number'])


def test_export_ledger(rng, server, tmp_path):
    alice = make_client(ALICE, server, rng)
    make_client(BOB, server, rng)
    alice.send(BOB, b'hi')
    server.deliver(BOB)

    path = tmp_path / 'ledger.jsonl'
    assert server.export_ledger(path) == len(server.ledger()) == 5

    rows = [json.loads(line) for line in path.read_text().splitlines()]
    assert all(tuple(row) == LEDGER_FIELDS for row in rows)
    assert [row['event'] for row in rows] == [
        'registered', 'registered', 'bundle_fetched', 'message_relayed', 'message_delivered'
    ]


def test_server_never_sees_plaintext(rng, server, tmp_path):
    alice = make_client(ALICE, server, rng)
    bob = make_client(BOB, server, rng)

    plaintexts = [b'confidential message number %04d' % i for i in range(1000)]
    for i, plaintext in enumerate(plaintexts):
        (alice if i % 2 else bob).send(BOB if i % 2 else ALICE, plaintext)

    state = json.dumps(server.to_dict())
    server.export_ledger(tmp_path / 'ledger.jsonl')
    ledger = (tmp_path / 'ledger.jsonl').read_bytes()

    for plaintext in plaintexts:
        assert plaintext.hex() not in state
        assert plaintext not in ledger

    for client in (alice, bob):
        identity = client.store.identity
        for secret in (identity.dh.private, identity.signing.private, client.store.signed_prekey.pair.private):
            assert secret.hex() not in state
            assert secret not in ledger


def test_save_load(rng, tmp_path):
    clock = LogicalClock()
    server = Server(clock)
    alice = make_client(ALICE, server, rng)
    make_client(BOB, server, rng)
    make_client(CAROL, server, rng)
    server.create_group('family', [ALICE, BOB, CAROL])
    alice.group_send('family', b'hello')

    path = tmp_path / 'server.json'
    server.save(path)
    loaded = Server.load(path, clock)

    assert loaded.to_dict() == server.to_dict()
    assert loaded.pending(BOB) == 1
    assert loaded.get_group('family').members == [ALICE, BOB, CAROL]
    assert loaded.ledger() == server.ledger()
