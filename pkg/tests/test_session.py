import copy
import dataclasses

import pytest

from ratchetlab import keystore
from ratchetlab.client import Client
from ratchetlab.crypto_core import IntegrityError, SeededTestRandom, ecdh, hkdf
from ratchetlab.keystore import generate_user, public_bundle
from ratchetlab.ratchet import OutOfWindowError, encrypt_message
from ratchetlab.server import LogicalClock, Server
from ratchetlab.session import (
    HandshakeHeader, HandshakeRefused, ReplayError, Role, SessionException, SessionState, accept_session,
    derive_chains, initiate_session,
)


ALICE = '+15550000001'
BOB = '+15550000002'


def test_handshakes_agree(rng):
    bob = generate_user(BOB, 500, rng)
    for i in range(1000):
        alice = generate_user(ALICE, 0, rng)
        bundle = public_bundle(bob, consume_one_time=i % 2 == 0)

        session, header = initiate_session(alice, bundle, rng)
        accepted = accept_session(bob, header, ALICE)

        assert session.root_key == accepted.root_key
        assert session.send_chain.chain_key == accepted.recv_chain.chain_key
        assert session.recv_chain.chain_key == accepted.send_chain.chain_key
        assert session.send_chain.chain_key != session.recv_chain.chain_key
        assert session.base_key == accepted.base_key == header.ephemeral_public


def test_master_key_terms(rng):
    alice = generate_user(ALICE, 0, rng)
    bob = generate_user(BOB, 1, rng)
    bundle = public_bundle(bob)

    session, header = initiate_session(alice, bundle, rng)

    spk = bob.signed_prekey.pair.private
    otk = bob.one_time_prekeys[bundle.one_time_prekey.id].pair.private
    master = (
        ecdh(spk, alice.identity.dh.public)
        + ecdh(bob.identity.dh.private, header.ephemeral_public)
        + ecdh(spk, header.ephemeral_public)
        + ecdh(otk, header.ephemeral_public)
    )
    okm = hkdf(master, bytes(32), b'ratchetlab-session-v1', 96)

    assert session.root_key == okm[:32]
    assert session.send_chain.chain_key == okm[32:64]
    assert session.recv_chain.chain_key == okm[64:]


def test_three_agreement_fallback(rng):
    alice = generate_user(ALICE, 0, rng)
    bob = generate_user(BOB, 0, rng)
    bundle = public_bundle(bob)
    assert bundle.one_time_prekey is None

    session, header = initiate_session(alice, bundle, rng)
    assert header.one_time_prekey_id is None

    accepted = accept_session(bob, header, ALICE)
    assert accepted.recv_chain.chain_key == session.send_chain.chain_key


def test_one_time_prekey_changes_keys(rng):
    alice = generate_user(ALICE, 0, rng)
    bob = generate_user(BOB, 1, rng)

    full, _ = initiate_session(alice, public_bundle(bob, consume_one_time=True), SeededTestRandom(7))
    reduced, _ = initiate_session(alice, public_bundle(bob, consume_one_time=False), SeededTestRandom(7))
    assert full.root_key != reduced.root_key


def test_bad_signature_refused(rng):
    alice = generate_user(ALICE, 0, rng)
    bob = generate_user(BOB, 1, rng)
    bundle = public_bundle(bob)

    signature = bytearray(bundle.signed_prekey.signature)
    signature[10] ^= 0x20
    bad = dataclasses.replace(
        bundle, signed_prekey=dataclasses.replace(bundle.signed_prekey, signature=bytes(signature))
    )

    with pytest.raises(HandshakeRefused):
        initiate_session(alice, bad, rng)
    assert BOB not in alice.peers


def test_low_order_prekey_refused(rng):
    alice = generate_user(ALICE, 0, rng)
    bob = generate_user(BOB, 0, rng)

    # A validly signed but low-order prekey.
    message = keystore.signed_prekey_message(bob.identity.dh.public, 9, bytes(32))
    prekey = keystore.SignedPreKeyPublic(9, bytes(32), bob.identity.signing.sign(message))
    bundle = dataclasses.replace(public_bundle(bob), signed_prekey=prekey)

    with pytest.raises(HandshakeRefused):
        initiate_session(alice, bundle, rng)


def test_unknown_signed_prekey(rng):
    alice = generate_user(ALICE, 0, rng)
    bob = generate_user(BOB, 0, rng)
    _, header = initiate_session(alice, public_bundle(bob), rng)

    with pytest.raises(HandshakeRefused):
        accept_session(bob, dataclasses.replace(header, signed_prekey_id=42), ALICE)


def test_replayed_handshake(rng):
    alice = generate_user(ALICE, 0, rng)
    bob = generate_user(BOB, 1, rng)
    _, header = initiate_session(alice, public_bundle(bob), rng)

    accept_session(bob, header, ALICE)
    assert bob.one_time_prekeys == {}

    with pytest.raises(ReplayError):
        accept_session(bob, header, ALICE)


def test_tentative_accept_leaves_store(rng):
    alice = generate_user(ALICE, 0, rng)
    bob = generate_user(BOB, 1, rng)
    _, header = initiate_session(alice, public_bundle(bob), rng)

    before = copy.deepcopy(bob)
    accept_session(bob, header, ALICE, commit=False)
    assert bob == before


def test_corrupted_ephemeral(rng, server):
    alice = Client(generate_user(ALICE, 0, rng), server, rng)
    bob = Client(generate_user(BOB, 1, rng), server, rng)
    alice.register()
    bob.register()

    envelope = alice.encrypt(BOB, b'hello')
    ephemeral = bytearray(envelope.handshake.ephemeral_public)
    ephemeral[5] ^= 0x01
    corrupted = dataclasses.replace(
        envelope, handshake=dataclasses.replace(envelope.handshake, ephemeral_public=bytes(ephemeral))
    )

    before = copy.deepcopy(bob.store)
    with pytest.raises(IntegrityError):
        bob.decrypt(corrupted)
    assert bob.store == before
    assert bob.sessions == {}

    # The genuine envelope still goes through and consumes the prekey.
    assert bob.decrypt(envelope) == b'hello'
    assert bob.store.one_time_prekeys == {}


def test_first_message_without_handshake(rng, server):
    alice = Client(generate_user(ALICE, 0, rng), server, rng)
    bob = Client(generate_user(BOB, 1, rng), server, rng)
    alice.register()
    bob.register()

    envelope = dataclasses.replace(alice.encrypt(BOB, b'hello'), handshake=None)
    with pytest.raises(SessionException):
        bob.decrypt(envelope)


def test_handshake_header_bytes(rng):
    alice = generate_user(ALICE, 0, rng)
    bob = generate_user(BOB, 1, rng)
    _, header = initiate_session(alice, public_bundle(bob), rng)

    data = header.to_bytes()
    assert len(data) == 2 + 3 * 32 + 4 + 4
    assert HandshakeHeader.from_bytes(data) == header

    _, reduced = initiate_session(alice, public_bundle(bob), rng)
    assert len(reduced.to_bytes()) == 2 + 3 * 32 + 4


def test_session_to_dict(rng):
    alice = generate_user(ALICE, 0, rng)
    bob = generate_user(BOB, 1, rng)
    session, _ = initiate_session(alice, public_bundle(bob), rng)
    encrypt_message(session, b'one')

    restored = SessionState.from_dict(session.to_dict())
    assert restored == session
    assert restored.role is Role.INITIATOR

    with pytest.raises(SessionException):
        SessionState.from_dict({'local_id': ALICE})


def test_derive_chains():
    for size in (96, 128):
        master = bytes([0x42]) * size
        okm = hkdf(master, bytes(32), b'ratchetlab-session-v1', 96)
        assert derive_chains(master) == (okm[:32], okm[32:64], okm[64:])

    with pytest.raises(SessionException):
        derive_chains(bytes(64))


def test_new_handshake_replaces_session(rng, server):
    alice = Client(generate_user(ALICE, 0, rng), server, rng)
    bob = Client(generate_user(BOB, 2, rng), server, rng)
    for client in (alice, bob):
        client.register()

    alice.send(BOB, b'first')
    assert [r.plaintext for r in bob.receive()] == [b'first']

    # Alice reinstalls: a fresh session from her side.
    alice.sessions.clear()
    alice.send(BOB, b'second')
    assert [r.plaintext for r in bob.receive()] == [b'second']
    assert bob.store.one_time_prekeys == {}


def test_replayed_three_agreement_handshake(rng):
    alice = generate_user(ALICE, 0, rng)
    bob = generate_user(BOB, 0, rng)
    _, header = initiate_session(alice, public_bundle(bob), rng)
    assert header.one_time_prekey_id is None

    accept_session(bob, header, ALICE)
    assert bob.seen_base_keys == {header.ephemeral_public}
    with pytest.raises(ReplayError):
        accept_session(bob, header, ALICE)

    restored = keystore.loads(keystore.dumps(bob))
    with pytest.raises(ReplayError):
        accept_session(restored, header, ALICE, commit=False)


def test_replayed_first_message_rejected(rng, server):
    alice = Client(generate_user(ALICE, 0, rng), server, rng)
    bob = Client(generate_user(BOB, 0, rng), server, rng)
    for client in (alice, bob):
        client.register()

    first = alice.send(BOB, b'transfer 100')
    assert first.handshake.one_time_prekey_id is None
    assert [r.plaintext for r in bob.receive()] == [b'transfer 100']

    alice.sessions.clear()
    alice.send(BOB, b'hello again')
    assert [r.plaintext for r in bob.receive()] == [b'hello again']
    current = bob.sessions[ALICE]

    server.relay(first)
    [replayed] = bob.receive()
    assert replayed.plaintext is None
    assert isinstance(replayed.error, OutOfWindowError)
    assert bob.sessions[ALICE] is current

    # Once the old session is gone from the archive, the handshake itself is refused.
    bob.archived.clear()
    server.relay(first)
    [replayed] = bob.receive()
    assert isinstance(replayed.error, ReplayError)
    assert bob.sessions[ALICE] is current


@pytest.mark.parametrize('seed', range(8))
def test_simultaneous_initiation(seed):
    rng = SeededTestRandom(seed)
    server = Server(LogicalClock())
    alice = Client(generate_user(ALICE, 2, rng), server, rng)
    bob = Client(generate_user(BOB, 2, rng), server, rng)
    for client in (alice, bob):
        client.register()

    from_alice = alice.send(BOB, b'hi bob')
    from_bob = bob.send(ALICE, b'hi alice')
    bob.send(ALICE, b'are you there?')
    assert [r.plaintext for r in alice.receive()] == [b'hi alice', b'are you there?']
    assert [r.plaintext for r in bob.receive()] == [b'hi bob']

    # Both ends keep the session with the lower base key.
    base_key = min(from_alice.handshake.ephemeral_public, from_bob.handshake.ephemeral_public)
    assert alice.sessions[BOB].base_key == bob.sessions[ALICE].base_key == base_key

    for i in range(3):
        alice.send(BOB, f'alice {i}'.encode())
        bob.send(ALICE, f'bob {i}'.encode())
    assert [r.plaintext for r in bob.receive()] == [b'alice 0', b'alice 1', b'alice 2']
    assert [r.plaintext for r in alice.receive()] == [b'bob 0', b'bob 1', b'bob 2']

    restored_alice, restored_archive = Client.sessions_from_dict(alice.sessions_to_dict())
    assert restored_alice == alice.sessions
    assert restored_archive == alice.archived


def test_reinstall_invalidates_old_bundle(rng, server):
    alice = Client(generate_user(ALICE, 0, rng), server, rng)
    bob = Client(generate_user(BOB, 3, rng), server, rng)
    for client in (alice, bob):
        client.register()
    old_identity = bob.store.identity.dh.public

    alice.session_for(BOB)
    bob.reinstall(4)
    assert server.prekey_count(BOB) == 4
    assert server.identity_key(BOB) == bob.store.identity.dh.public
    assert bob.store.identity.dh.public != old_identity

    alice.send(BOB, b'to the old keys')
    [received] = bob.receive()
    assert not received.ok
    assert bob.sessions == {}

    alice.sessions.clear()
    alice.send(BOB, b'to the new keys')
    assert [r.plaintext for r in bob.receive()] == [b'to the new keys']
