"""
Session establishment: the initiator combines four X25519 agreements
(three when the recipient's one-time prekeys have run out) into a master
key, and HKDF turns it into a root key and one chain key per direction.
The recipient mirrors the computation from the handshake header.
"""

from collections import OrderedDict
import copy
from dataclasses import dataclass, field
from enum import Enum
from io import BytesIO
import logging
from typing import Any, BinaryIO, Dict, List, Optional, Tuple
try:
    from typing import Self  # type: ignore
except ImportError:
    from typing_extensions import Self  # type: ignore

from .crypto_core import (
    KEY_SIZE, ZERO_SALT, ContributoryError, KeyPair, RandomSource, ecdh, hkdf, zeroize
)
from .keystore import KeyStore, PreKeyBundle, find_signed_prekey, remember_peer
from .wire import WireFormatError, expect_eof, read_exact, read_u8, read_u32, write_u8, write_u32


logger = logging.getLogger(__name__)

SESSION_INFO = b'ratchetlab-session-v1'

HANDSHAKE_VERSION = 0x01
FLAG_ONE_TIME_PREKEY = 0x01

MASTER_KEY_SIZES = (3 * KEY_SIZE, 4 * KEY_SIZE)

MAX_SKIPPED_KEYS = 1000


class SessionException(Exception):
    pass


class HandshakeRefused(SessionException):
    pass


class ReplayError(SessionException):
    pass


class Role(Enum):
    INITIATOR = 'initiator'
    RECIPIENT = 'recipient'


@dataclass(frozen=True)
class HandshakeHeader:
    identity_public: bytes
    identity_signing_public: bytes
    ephemeral_public: bytes
    signed_prekey_id: int
    one_time_prekey_id: Optional[int]

    def write(self, fd: BinaryIO) -> None:
        write_u8(fd, HANDSHAKE_VERSION)
        write_u8(fd, FLAG_ONE_TIME_PREKEY if self.one_time_prekey_id is not None else 0)
        fd.write(self.identity_public)
        fd.write(self.identity_signing_public)
        fd.write(self.ephemeral_public)
        write_u32(fd, self.signed_prekey_id)
        if self.one_time_prekey_id is not None:
            write_u32(fd, self.one_time_prekey_id)

    @classmethod
    def read(cls, fd: BinaryIO) -> Self:
        version = read_u8(fd)
        if version != HANDSHAKE_VERSION:
            raise WireFormatError(f"Unsupported handshake version: {version}")
        flags = read_u8(fd)
        if flags & ~FLAG_ONE_TIME_PREKEY:
            raise WireFormatError(f"Unknown handshake flags: 0x{flags:02x}")

        identity_public = read_exact(fd, KEY_SIZE)
        identity_signing_public = read_exact(fd, KEY_SIZE)
        ephemeral_public = read_exact(fd, KEY_SIZE)
        signed_prekey_id = read_u32(fd)
        one_time_prekey_id = read_u32(fd) if flags & FLAG_ONE_TIME_PREKEY else None

        return cls(identity_public, identity_signing_public, ephemeral_public, signed_prekey_id, one_time_prekey_id)

    def to_bytes(self) -> bytes:
        out = BytesIO()
        self.write(out)
        return out.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> Self:
        fd = BytesIO(data)
        header = cls.read(fd)
        expect_eof(fd)
        return header


@dataclass(frozen=True)
class ChainState:
    chain_key: bytes
    counter: int = 0

    def __repr__(self) -> str:
        return f'ChainState(counter={self.counter})'


class SkippedKeyCache:
    """
    Message keys derived for envelopes that have not arrived yet, keyed by
    (chain id, counter). Keys are removed when used; when the cache is full
    the oldest entry is dropped.
    """

    def __init__(self, capacity: int = MAX_SKIPPED_KEYS) -> None:
        self.capacity = capacity
        self._keys: 'OrderedDict[Tuple[bytes, int], bytes]' = OrderedDict()

    def __len__(self) -> int:
        return len(self._keys)

    def __contains__(self, key: Tuple[bytes, int]) -> bool:
        return key in self._keys

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SkippedKeyCache):
            return NotImplemented
        return self.capacity == other.capacity and list(self._keys.items()) == list(other._keys.items())

    def get(self, chain_id: bytes, counter: int) -> Optional[bytes]:
        return self._keys.get((chain_id, counter))

    def put(self, chain_id: bytes, counter: int, message_key: bytes) -> None:
        self._keys[(chain_id, counter)] = message_key
        while len(self._keys) > self.capacity:
            (_, dropped), _ = self._keys.popitem(last=False)
            logger.warning("Skipped-key cache full; dropping the key for message %d", dropped)

    def delete(self, chain_id: bytes, counter: int) -> None:
        del self._keys[(chain_id, counter)]

    def to_list(self) -> List[Dict[str, Any]]:
        return [
            {'chain': chain_id.hex(), 'counter': counter, 'key': key.hex()}
            for (chain_id, counter), key in self._keys.items()
        ]

    @classmethod
    def from_list(cls, entries: List[Dict[str, Any]], capacity: int = MAX_SKIPPED_KEYS) -> Self:
        cache = cls(capacity)
        for entry in entries:
            cache.put(bytes.fromhex(entry['chain']), entry['counter'], bytes.fromhex(entry['key']))
        return cache


@dataclass
class SessionState:
    local_id: str
    peer_id: str
    role: Role
    root_key: bytes
    send_chain: ChainState
    recv_chain: ChainState
    peer_identity: bytes
    # Initiator's ephemeral public key; identifies the session on both sides.
    base_key: bytes
    # Initiator: attached to every envelope until the peer replies.
    pending_handshake: Optional[HandshakeHeader] = None
    # Recipient: the header this session was accepted from.
    remote_handshake: Optional[HandshakeHeader] = None
    skipped: SkippedKeyCache = field(default_factory=SkippedKeyCache)

    def __repr__(self) -> str:
        return (
            f'SessionState({self.local_id} -> {self.peer_id}, role={self.role.value}, '
            f'send={self.send_chain.counter}, recv={self.recv_chain.counter}, skipped={len(self.skipped)})'
        )

    @property
    def recv_chain_id(self) -> bytes:
        return self.base_key

    def to_dict(self) -> Dict[str, Any]:
        return {
            'local_id': self.local_id,
            'peer_id': self.peer_id,
            'role': self.role.value,
            'root_key': self.root_key.hex(),
            'send_chain': {'chain_key': self.send_chain.chain_key.hex(), 'counter': self.send_chain.counter},
            'recv_chain': {'chain_key': self.recv_chain.chain_key.hex(), 'counter': self.recv_chain.counter},
            'peer_identity': self.peer_identity.hex(),
            'base_key': self.base_key.hex(),
            'pending_handshake': self.pending_handshake.to_bytes().hex() if self.pending_handshake else None,
            'remote_handshake': self.remote_handshake.to_bytes().hex() if self.remote_handshake else None,
            'skipped': self.skipped.to_list(),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> Self:
        def chain(value: Dict[str, Any]) -> ChainState:
            return ChainState(bytes.fromhex(value['chain_key']), value['counter'])

        def handshake(value: Optional[str]) -> Optional[HandshakeHeader]:
            return HandshakeHeader.from_bytes(bytes.fromhex(value)) if value else None

        try:
            return cls(
                local_id=data['local_id'],
                peer_id=data['peer_id'],
                role=Role(data['role']),
                root_key=bytes.fromhex(data['root_key']),
                send_chain=chain(data['send_chain']),
                recv_chain=chain(data['recv_chain']),
                peer_identity=bytes.fromhex(data['peer_identity']),
                base_key=bytes.fromhex(data['base_key']),
                pending_handshake=handshake(data.get('pending_handshake')),
                remote_handshake=handshake(data.get('remote_handshake')),
                skipped=SkippedKeyCache.from_list(data.get('skipped') or []),
            )
        except (KeyError, TypeError, ValueError) as ex:
            raise SessionException(f"Invalid session record: {ex}") from ex


def clone_session(state: SessionState) -> SessionState:
    return copy.deepcopy(state)


def derive_chains(master: bytes) -> Tuple[bytes, bytes, bytes]:
    if len(master) not in MASTER_KEY_SIZES:
        raise SessionException(f"Master key must be 96 or 128 bytes, got {len(master)}")

    okm = hkdf(master, ZERO_SALT, SESSION_INFO, 3 * KEY_SIZE)
    return okm[:KEY_SIZE], okm[KEY_SIZE:2 * KEY_SIZE], okm[2 * KEY_SIZE:]


def _derive_from_terms(terms: List[Tuple[bytes, bytes]]) -> Tuple[bytes, bytes, bytes]:
    master = bytearray()
    try:
        for secret, public in terms:
            master += ecdh(secret, public)
        return derive_chains(master)
    except ContributoryError as ex:
        raise HandshakeRefused(f"Key agreement refused: {ex}") from ex
    finally:
        zeroize(master)


def initiate_session(
    initiator_store: KeyStore, recipient_bundle: PreKeyBundle, rng: Optional[RandomSource] = None
) -> Tuple[SessionState, HandshakeHeader]:
    bundle = recipient_bundle
    if not bundle.verify():
        raise HandshakeRefused(f"Signed prekey signature of {bundle.user_id} does not verify")

    identity = initiator_store.identity
    ephemeral = KeyPair.generate(rng)

    terms = [
        (identity.dh.private, bundle.signed_prekey.public),
        (ephemeral.private, bundle.identity_public),
        (ephemeral.private, bundle.signed_prekey.public),
    ]
    if bundle.one_time_prekey is not None:
        terms.append((ephemeral.private, bundle.one_time_prekey.public))
    else:
        logger.info("No one-time prekey for %s; falling back to three agreements", bundle.user_id)

    root_key, initiator_chain, recipient_chain = _derive_from_terms(terms)

    header = HandshakeHeader(
        identity_public=identity.dh.public,
        identity_signing_public=identity.signing.public,
        ephemeral_public=ephemeral.public,
        signed_prekey_id=bundle.signed_prekey.id,
        one_time_prekey_id=bundle.one_time_prekey.id if bundle.one_time_prekey is not None else None,
    )

    state = SessionState(
        local_id=initiator_store.user_id,
        peer_id=bundle.user_id,
        role=Role.INITIATOR,
        root_key=root_key,
        send_chain=ChainState(initiator_chain),
        recv_chain=ChainState(recipient_chain),
        peer_identity=bundle.identity_public,
        base_key=ephemeral.public,
        pending_handshake=header,
    )

    remember_peer(initiator_store, bundle.user_id, bundle.identity_public)
    logger.debug("Initiated session %s -> %s", initiator_store.user_id, bundle.user_id)
    return state, header


def accept_session(
    recipient_store: KeyStore, header: HandshakeHeader, peer_id: str, commit: bool = True
) -> SessionState:
    """
    Rebuild the initiator's session from its handshake header.

    With `commit=False` the store is left untouched, so the caller can first
    check that the initial message authenticates and then call
    `commit_acceptance`.
    """
    store = recipient_store

    if header.ephemeral_public in store.seen_base_keys:
        raise ReplayError("Handshake was already accepted")

    signed_prekey = find_signed_prekey(store, header.signed_prekey_id)
    if signed_prekey is None:
        raise HandshakeRefused(f"Unknown signed prekey id {header.signed_prekey_id}")

    terms = [
        (signed_prekey.pair.private, header.identity_public),
        (store.identity.dh.private, header.ephemeral_public),
        (signed_prekey.pair.private, header.ephemeral_public),
    ]
    if header.one_time_prekey_id is not None:
        one_time = store.one_time_prekeys.get(header.one_time_prekey_id)
        if one_time is None:
            raise ReplayError(f"One-time prekey {header.one_time_prekey_id} was already used")
        terms.append((one_time.pair.private, header.ephemeral_public))

    root_key, initiator_chain, recipient_chain = _derive_from_terms(terms)

    state = SessionState(
        local_id=store.user_id,
        peer_id=peer_id,
        role=Role.RECIPIENT,
        root_key=root_key,
        send_chain=ChainState(recipient_chain),
        recv_chain=ChainState(initiator_chain),
        peer_identity=header.identity_public,
        base_key=header.ephemeral_public,
        remote_handshake=header,
    )

    if commit:
        commit_acceptance(store, state)

    return state


def commit_acceptance(recipient_store: KeyStore, state: SessionState) -> None:
    header = state.remote_handshake
    if header is None:
        raise SessionException("Not an accepted session")

    if state.base_key in recipient_store.seen_base_keys:
        raise ReplayError("Handshake was already accepted")

    if header.one_time_prekey_id is not None:
        if recipient_store.one_time_prekeys.pop(header.one_time_prekey_id, None) is None:
            raise ReplayError(f"One-time prekey {header.one_time_prekey_id} was already used")
        if header.one_time_prekey_id in recipient_store.pool:
            recipient_store.pool.remove(header.one_time_prekey_id)

    recipient_store.seen_base_keys.add(state.base_key)
    remember_peer(recipient_store, state.peer_id, header.identity_public)
    logger.debug("Accepted session %s <- %s", recipient_store.user_id, state.peer_id)
