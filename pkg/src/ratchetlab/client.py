"""
One user's device: its key store, its pairwise sessions, and the calls it
makes against the relay server.
"""

from dataclasses import dataclass
import logging
from typing import Any, Dict, List, Optional, Tuple

from . import keystore
from .crypto_core import CryptoException, RandomSource
from .keystore import KeyStore
from .ratchet import MessageEnvelope, RatchetException, decrypt_message, encrypt_message
from .server import Registration, Server
from .session import (
    Role, SessionException, SessionState, accept_session, commit_acceptance, initiate_session
)


logger = logging.getLogger(__name__)

MAX_ARCHIVED_SESSIONS = 5


@dataclass(frozen=True)
class Received:
    envelope: MessageEnvelope
    plaintext: Optional[bytes]
    error: Optional[Exception] = None

    @property
    def ok(self) -> bool:
        return self.error is None


class Client:
    def __init__(
        self, store: KeyStore, server: Server, rng: Optional[RandomSource] = None,
        sessions: Optional[Dict[str, SessionState]] = None,
        archived: Optional[Dict[str, List[SessionState]]] = None,
    ) -> None:
        self.store = store
        self.server = server
        self.rng = rng
        self.sessions: Dict[str, SessionState] = sessions if sessions is not None else {}
        # Replaced sessions per peer, newest first.
        self.archived: Dict[str, List[SessionState]] = archived if archived is not None else {}

    def __repr__(self) -> str:
        return f'Client({self.user_id}, sessions={sorted(self.sessions)})'

    @property
    def user_id(self) -> str:
        return self.store.user_id

    # Registration and prekeys

    def registration(self) -> Registration:
        identity = self.store.identity
        return Registration(
            user_id=self.store.user_id,
            identity_public=identity.dh.public,
            identity_signing_public=identity.signing.public,
            signed_prekey=self.store.signed_prekey.public_record(),
            one_time_prekeys=keystore.publish_one_time_prekeys(self.store),
        )

    def register(self, replace_existing: bool = False) -> None:
        self.server.register(self.registration(), replace_existing=replace_existing)
        if replace_existing:
            self.sessions.clear()
            self.archived.clear()

    def reinstall(self, n_one_time: int, now: Optional[int] = None) -> None:
        """
        Start over under the same number with a fresh key store. The server
        drops the old registration and its prekeys, so bundles fetched
        earlier no longer lead to a working session.
        """
        self.store = keystore.generate_user(self.user_id, n_one_time, self.rng, now)
        self.sessions.clear()
        self.archived.clear()
        self.register(replace_existing=True)

    def replenish(self, n: int) -> int:
        keystore.replenish(self.store, n, self.rng)
        return self.server.upload_prekeys(self.user_id, keystore.publish_one_time_prekeys(self.store))

    def rotate_signed_prekey(self, now: Optional[int] = None) -> None:
        prekey = keystore.rotate_signed_prekey(self.store, self.rng, now)
        self.server.update_signed_prekey(self.user_id, prekey.public_record())

    # Sending

    def session_for(self, peer_id: str) -> SessionState:
        session = self.sessions.get(peer_id)
        if session is None:
            bundle = self.server.fetch_bundle(self.user_id, peer_id)
            session, _ = initiate_session(self.store, bundle, self.rng)
            self.sessions[peer_id] = session
        return session

    def encrypt(self, peer_id: str, plaintext: bytes) -> MessageEnvelope:
        return encrypt_message(self.session_for(peer_id), plaintext)

    def send(self, peer_id: str, plaintext: bytes) -> MessageEnvelope:
        envelope = self.encrypt(peer_id, plaintext)
        self.server.relay(envelope)
        return envelope

    def group_send(self, group_id: str, plaintext: bytes) -> Dict[str, MessageEnvelope]:
        group = self.server.get_group(group_id)
        envelopes = {
            member: self.encrypt(member, plaintext)
            for member in group.members
            if member != self.user_id
        }
        self.server.group_send(self.user_id, group_id, envelopes)
        return envelopes

    # Receiving

    def decrypt(self, envelope: MessageEnvelope) -> bytes:
        """
        Decrypt one envelope. A handshake for a session we do not have yet is
        accepted tentatively; the one-time prekey is only deleted once the
        envelope authenticates.

        When both sides start a session before hearing from each other, both
        settle on the one with the lower base key. The other one is archived
        so that messages already sent on it still decrypt.
        """
        peer_id = envelope.sender_id
        session = self.sessions.get(peer_id)
        header = envelope.handshake

        if header is None or (session is not None and session.base_key == header.ephemeral_public):
            if session is None:
                raise SessionException(f"No session with {peer_id} and the envelope carries no handshake")
            return decrypt_message(session, envelope)

        previous = self._find_archived(peer_id, header.ephemeral_public)
        if previous is not None:
            return decrypt_message(previous, envelope)

        candidate = accept_session(self.store, header, peer_id, commit=False)
        plaintext = decrypt_message(candidate, envelope)
        commit_acceptance(self.store, candidate)

        if session is not None and _wins_tie(session, candidate):
            logger.info("Both sides started a session with %s; keeping ours", peer_id)
            self._archive(peer_id, candidate)
        else:
            if session is not None:
                logger.info("Replacing session with %s after a new handshake", peer_id)
                self._archive(peer_id, session)
            self.sessions[peer_id] = candidate
        return plaintext

    def _find_archived(self, peer_id: str, base_key: bytes) -> Optional[SessionState]:
        for session in self.archived.get(peer_id, []):
            if session.base_key == base_key:
                return session
        return None

    def _archive(self, peer_id: str, session: SessionState) -> None:
        archived = self.archived.setdefault(peer_id, [])
        archived.insert(0, session)
        del archived[MAX_ARCHIVED_SESSIONS:]

    def receive(self) -> List[Received]:
        received: List[Received] = []
        for envelope in self.server.deliver(self.user_id):
            try:
                received.append(Received(envelope, self.decrypt(envelope)))
            except (CryptoException, SessionException, RatchetException) as ex:
                logger.warning("Dropping message %d from %s: %s", envelope.counter, envelope.sender_id, ex)
                received.append(Received(envelope, None, ex))
        return received

    # Persistence

    def sessions_to_dict(self) -> Dict[str, Any]:
        return {
            'current': {peer_id: session.to_dict() for peer_id, session in sorted(self.sessions.items())},
            'archived': {
                peer_id: [session.to_dict() for session in sessions]
                for peer_id, sessions in sorted(self.archived.items())
            },
        }

    @staticmethod
    def sessions_from_dict(data: Any) -> Tuple[Dict[str, SessionState], Dict[str, List[SessionState]]]:
        if not isinstance(data, dict) or not isinstance(data.get('current'), dict):
            raise SessionException("Invalid sessions record")
        archived = data.get('archived', {})
        if not isinstance(archived, dict) or not all(isinstance(value, list) for value in archived.values()):
            raise SessionException("Invalid archived sessions")

        current = {peer_id: SessionState.from_dict(value) for peer_id, value in data['current'].items()}
        return current, {
            peer_id: [SessionState.from_dict(value) for value in values]
            for peer_id, values in archived.items()
        }


def _wins_tie(own: SessionState, incoming: SessionState) -> bool:
    # Only an unanswered session of ours competes with the peer's handshake.
    return (
        own.role is Role.INITIATOR
        and own.pending_handshake is not None
        and own.base_key < incoming.base_key
    )
