"""
Per-user key hierarchy: a long-term identity key (X25519 + a companion Ed25519
signing key), one active signed prekey (plus one previous key kept for a grace
window), and a replenishable list of one-time prekeys.

Stores persist as JSON lines: a header `{"version":1,"user_id":...}`, one record
per key, and an `end` trailer that lets `load` detect truncated files.
"""

from dataclasses import dataclass, field
import json
import logging
import os
import pathlib
import re
import time
from typing import Any, Dict, List, Optional, Set, Tuple, Union

from .crypto_core import KEY_SIZE, SIGNATURE_SIZE, KeyPair, RandomSource, SigningKeyPair, verify_signature


logger = logging.getLogger(__name__)

STORE_VERSION = 1
DEFAULT_ONE_TIME_PREKEYS = 100
MAX_PREKEY_ID = 0xFFFFFFFF

USER_ID_RE = re.compile(r'\+[1-9][0-9]{4,14}')

SIGNED_PREKEY_CONTEXT = b'ratchetlab-spk-v1'


class KeyStoreException(Exception):
    pass


class KeyStoreValidationError(KeyStoreException):
    pass


class KeyStoreLoadError(KeyStoreException):
    pass


def check_user_id(user_id: str) -> str:
    if not isinstance(user_id, str) or not USER_ID_RE.fullmatch(user_id):
        raise KeyStoreValidationError(f"Invalid user id {user_id!r}: expected '+' followed by 5 to 15 digits")
    return user_id


def now_ms() -> int:
    return int(time.time() * 1000)


@dataclass(frozen=True)
class IdentityKeyPair:
    dh: KeyPair
    signing: SigningKeyPair


@dataclass(frozen=True)
class SignedPreKeyPublic:
    id: int
    public: bytes
    signature: bytes


@dataclass(frozen=True)
class SignedPreKey:
    id: int
    pair: KeyPair
    signature: bytes
    created_at: int

    def public_record(self) -> SignedPreKeyPublic:
        return SignedPreKeyPublic(self.id, self.pair.public, self.signature)


@dataclass(frozen=True)
class OneTimePreKeyPublic:
    id: int
    public: bytes


@dataclass(frozen=True)
class OneTimePreKey:
    id: int
    pair: KeyPair

    def public_record(self) -> OneTimePreKeyPublic:
        return OneTimePreKeyPublic(self.id, self.pair.public)


def signed_prekey_message(identity_public: bytes, prekey_id: int, prekey_public: bytes) -> bytes:
    # The signature is made with the Ed25519 identity key and also covers the
    # X25519 identity key, binding the two halves of the identity together.
    return SIGNED_PREKEY_CONTEXT + identity_public + prekey_id.to_bytes(4, 'big') + prekey_public


def verify_signed_prekey(
    identity_public: bytes, identity_signing_public: bytes, prekey: SignedPreKeyPublic
) -> bool:
    message = signed_prekey_message(identity_public, prekey.id, prekey.public)
    return verify_signature(identity_signing_public, prekey.signature, message)


@dataclass(frozen=True)
class PreKeyBundle:
    user_id: str
    identity_public: bytes
    identity_signing_public: bytes
    signed_prekey: SignedPreKeyPublic
    one_time_prekey: Optional[OneTimePreKeyPublic]

    def verify(self) -> bool:
        return verify_signed_prekey(self.identity_public, self.identity_signing_public, self.signed_prekey)


@dataclass
class KeyStore:
    user_id: str
    identity: IdentityKeyPair
    created_at: int
    signed_prekey: SignedPreKey
    previous_signed_prekey: Optional[SignedPreKey] = None
    # Private halves stay here until a session consumes them.
    one_time_prekeys: Dict[int, OneTimePreKey] = field(default_factory=dict)
    # Ids that this store may still hand out itself (not yet published).
    pool: List[int] = field(default_factory=list)
    next_one_time_id: int = 1
    peers: Dict[str, bytes] = field(default_factory=dict)
    # Initiator ephemerals of every accepted handshake; a repeat is a replay.
    seen_base_keys: Set[bytes] = field(default_factory=set)

    def __repr__(self) -> str:
        return (
            f'KeyStore(user_id={self.user_id!r}, signed_prekey={self.signed_prekey.id}, '
            f'one_time_prekeys={len(self.one_time_prekeys)}, pool={len(self.pool)})'
        )


def _new_signed_prekey(
    identity: IdentityKeyPair, prekey_id: int, rng: Optional[RandomSource], created_at: int
) -> SignedPreKey:
    pair = KeyPair.generate(rng)
    signature = identity.signing.sign(signed_prekey_message(identity.dh.public, prekey_id, pair.public))
    return SignedPreKey(prekey_id, pair, signature, created_at)


def generate_user(
    user_id: str,
    n_one_time: int = DEFAULT_ONE_TIME_PREKEYS,
    rng: Optional[RandomSource] = None,
    now: Optional[int] = None,
) -> KeyStore:
    check_user_id(user_id)
    if n_one_time < 0:
        raise KeyStoreValidationError(f"Number of one-time prekeys must not be negative: {n_one_time}")

    created_at = now_ms() if now is None else now
    identity = IdentityKeyPair(KeyPair.generate(rng), SigningKeyPair.generate(rng))
    store = KeyStore(
        user_id=user_id,
        identity=identity,
        created_at=created_at,
        signed_prekey=_new_signed_prekey(identity, 1, rng, created_at),
    )
    replenish(store, n_one_time, rng)

    logger.debug("Generated keys for %s with %d one-time prekeys", user_id, n_one_time)
    return store


def replenish(store: KeyStore, n: int, rng: Optional[RandomSource] = None) -> List[OneTimePreKey]:
    if n < 0:
        raise KeyStoreValidationError(f"Number of one-time prekeys must not be negative: {n}")
    if store.next_one_time_id + n - 1 > MAX_PREKEY_ID:
        raise KeyStoreException("One-time prekey ids exhausted")

    new_keys: List[OneTimePreKey] = []
    for _ in range(n):
        prekey = OneTimePreKey(store.next_one_time_id, KeyPair.generate(rng))
        store.next_one_time_id += 1
        store.one_time_prekeys[prekey.id] = prekey
        store.pool.append(prekey.id)
        new_keys.append(prekey)

    return new_keys


def public_bundle(store: KeyStore, consume_one_time: bool = True) -> PreKeyBundle:
    one_time: Optional[OneTimePreKeyPublic] = None
    if consume_one_time and store.pool:
        one_time = store.one_time_prekeys[store.pool.pop(0)].public_record()

    return PreKeyBundle(
        user_id=store.user_id,
        identity_public=store.identity.dh.public,
        identity_signing_public=store.identity.signing.public,
        signed_prekey=store.signed_prekey.public_record(),
        one_time_prekey=one_time,
    )


def publish_one_time_prekeys(store: KeyStore) -> List[OneTimePreKeyPublic]:
    """
    Hand every pooled one-time prekey over for upload. From now on the server
    distributes them; the private halves stay in the store.
    """
    published = [store.one_time_prekeys[prekey_id].public_record() for prekey_id in store.pool]
    store.pool.clear()
    return published


def rotate_signed_prekey(
    store: KeyStore, rng: Optional[RandomSource] = None, now: Optional[int] = None
) -> SignedPreKey:
    old = store.signed_prekey
    if old.id >= MAX_PREKEY_ID:
        raise KeyStoreException("Signed prekey ids exhausted")

    new = _new_signed_prekey(store.identity, old.id + 1, rng, now_ms() if now is None else now)
    store.previous_signed_prekey = old
    store.signed_prekey = new

    logger.info("Rotated signed prekey of %s: %d -> %d", store.user_id, old.id, new.id)
    return new


def find_signed_prekey(store: KeyStore, prekey_id: int) -> Optional[SignedPreKey]:
    for prekey in (store.signed_prekey, store.previous_signed_prekey):
        if prekey is not None and prekey.id == prekey_id:
            return prekey
    return None


def remember_peer(store: KeyStore, user_id: str, identity_public: bytes) -> bool:
    """Pin the peer's identity key. Returns True if a different key was pinned before."""
    previous = store.peers.get(user_id)
    store.peers[user_id] = identity_public
    if previous is not None and previous != identity_public:
        logger.warning("Identity key of %s has changed; verify the safety number again", user_id)
        return True
    return False


def peer_identity(store: KeyStore, user_id: str) -> Optional[bytes]:
    return store.peers.get(user_id)


# Persistence

def _keypair_fields(prefix: str, pair: Union[KeyPair, SigningKeyPair]) -> Dict[str, str]:
    return {
        f'{prefix}private': pair.private.hex(),
        f'{prefix}public': pair.public.hex(),
    }


def _signed_prekey_record(status: str, prekey: SignedPreKey) -> Dict[str, Any]:
    return {
        'type': 'signed_prekey',
        'status': status,
        'id': prekey.id,
        **_keypair_fields('', prekey.pair),
        'signature': prekey.signature.hex(),
        'created_at': prekey.created_at,
    }


def _records(store: KeyStore) -> List[Dict[str, Any]]:
    records: List[Dict[str, Any]] = [{
        'type': 'identity',
        **_keypair_fields('dh_', store.identity.dh),
        **_keypair_fields('signing_', store.identity.signing),
        'created_at': store.created_at,
    }]

    records.append(_signed_prekey_record('active', store.signed_prekey))
    if store.previous_signed_prekey is not None:
        records.append(_signed_prekey_record('grace', store.previous_signed_prekey))

    pooled = set(store.pool)
    for prekey_id in sorted(store.one_time_prekeys):
        prekey = store.one_time_prekeys[prekey_id]
        records.append({
            'type': 'one_time_prekey',
            'id': prekey.id,
            **_keypair_fields('', prekey.pair),
            'pooled': prekey.id in pooled,
        })

    for user_id in sorted(store.peers):
        records.append({
            'type': 'peer',
            'user_id': user_id,
            'identity_public': store.peers[user_id].hex(),
        })

    for base_key in sorted(store.seen_base_keys):
        records.append({
            'type': 'seen_base_key',
            'public': base_key.hex(),
        })

    records.append({
        'type': 'state',
        'next_one_time_id': store.next_one_time_id,
    })

    return records


def dumps(store: KeyStore) -> str:
    records = _records(store)
    lines = [{'version': STORE_VERSION, 'user_id': store.user_id}]
    lines.extend(records)
    lines.append({'type': 'end', 'records': len(records)})
    return ''.join(json.dumps(line, separators=(',', ':')) + '\n' for line in lines)


def save(store: KeyStore, path: pathlib.Path) -> None:
    path = pathlib.Path(path)
    tmp_path = path.with_name(path.name + '.tmp')

    with open(tmp_path, 'w', encoding='utf-8') as fd:
        fd.write(dumps(store))

    try:
        os.chmod(tmp_path, 0o600)
    except (OSError, NotImplementedError):
        pass  # Not supported everywhere (e.g. some Windows filesystems).

    tmp_path.replace(path)


class _LineReader:
    KNOWN_FIELDS: Dict[str, Tuple[str, ...]] = {
        'identity': ('type', 'dh_private', 'dh_public', 'signing_private', 'signing_public', 'created_at'),
        'signed_prekey': ('type', 'status', 'id', 'private', 'public', 'signature', 'created_at'),
        'one_time_prekey': ('type', 'id', 'private', 'public', 'pooled'),
        'peer': ('type', 'user_id', 'identity_public'),
        'seen_base_key': ('type', 'public'),
        'state': ('type', 'next_one_time_id'),
        'end': ('type', 'records'),
    }

    def __init__(self, path: pathlib.Path, lineno: int, record: Dict[str, Any]) -> None:
        self.path = path
        self.lineno = lineno
        self.record = record

    def error(self, message: str) -> KeyStoreLoadError:
        return KeyStoreLoadError(f"{self.path}:{self.lineno}: {message}")

    def warn_unknown_fields(self, known: Tuple[str, ...]) -> None:
        for name in self.record:
            if name not in known:
                logger.warning("%s:%d: ignoring unknown field %r", self.path, self.lineno, name)

    def get(self, name: str, typ: type) -> Any:
        value = self.record.get(name)
        if value is None:
            raise self.error(f"missing field {name!r}")
        if not isinstance(value, typ) or (typ is int and isinstance(value, bool)):
            raise self.error(f"field {name!r} has the wrong type")
        return value

    def get_hex(self, name: str, length: int) -> bytes:
        try:
            value = bytes.fromhex(self.get(name, str))
        except ValueError:
            raise self.error(f"bad hex in field {name!r}") from None
        if len(value) != length:
            raise self.error(f"field {name!r} must be {length} bytes, got {len(value)}")
        return value

    def get_keypair(self, prefix: str) -> KeyPair:
        pair = KeyPair.from_private(self.get_hex(f'{prefix}private', KEY_SIZE))
        if pair.public != self.get_hex(f'{prefix}public', KEY_SIZE):
            raise self.error(f"{prefix}public does not match {prefix}private")
        return pair

    def get_signing_keypair(self, prefix: str) -> SigningKeyPair:
        pair = SigningKeyPair.from_private(self.get_hex(f'{prefix}private', KEY_SIZE))
        if pair.public != self.get_hex(f'{prefix}public', KEY_SIZE):
            raise self.error(f"{prefix}public does not match {prefix}private")
        return pair


def loads(text: str, path: Union[str, pathlib.Path] = '<string>') -> KeyStore:
    path = pathlib.Path(path)
    lines = text.splitlines()
    if not lines:
        raise KeyStoreLoadError(f"{path}: empty key store")

    parsed: List[Dict[str, Any]] = []
    for lineno, line in enumerate(lines, 1):
        try:
            record = json.loads(line)
        except ValueError:
            raise KeyStoreLoadError(f"{path}:{lineno}: not valid JSON") from None
        if not isinstance(record, dict):
            raise KeyStoreLoadError(f"{path}:{lineno}: expected a JSON object")
        parsed.append(record)

    header = _LineReader(path, 1, parsed[0])
    header.warn_unknown_fields(('version', 'user_id'))
    version = header.get('version', int)
    if version != STORE_VERSION:
        raise header.error(f"unsupported key store version {version}")
    user_id = header.get('user_id', str)
    if not USER_ID_RE.fullmatch(user_id):
        raise header.error(f"invalid user id {user_id!r}")

    identity: Optional[IdentityKeyPair] = None
    created_at = 0
    active: Optional[SignedPreKey] = None
    grace: Optional[SignedPreKey] = None
    one_time_prekeys: Dict[int, OneTimePreKey] = {}
    pool: List[int] = []
    peers: Dict[str, bytes] = {}
    seen_base_keys: Set[bytes] = set()
    next_one_time_id: Optional[int] = None
    ended = False

    for lineno, record in enumerate(parsed[1:], 2):
        reader = _LineReader(path, lineno, record)
        if ended:
            raise reader.error("data after the end record")

        record_type = reader.get('type', str)
        known = _LineReader.KNOWN_FIELDS.get(record_type)
        if known is None:
            logger.warning("%s:%d: ignoring unknown record type %r", path, lineno, record_type)
            continue
        reader.warn_unknown_fields(known)

        if record_type == 'identity':
            if identity is not None:
                raise reader.error("duplicate identity record")
            identity = IdentityKeyPair(reader.get_keypair('dh_'), reader.get_signing_keypair('signing_'))
            created_at = reader.get('created_at', int)
        elif record_type == 'signed_prekey':
            prekey = SignedPreKey(
                reader.get('id', int),
                reader.get_keypair(''),
                reader.get_hex('signature', SIGNATURE_SIZE),
                reader.get('created_at', int),
            )
            status = reader.get('status', str)
            if status == 'active' and active is None:
                active = prekey
            elif status == 'grace' and grace is None:
                grace = prekey
            else:
                raise reader.error(f"unexpected signed prekey status {status!r}")
        elif record_type == 'one_time_prekey':
            prekey_id = reader.get('id', int)
            if prekey_id in one_time_prekeys:
                raise reader.error(f"duplicate one-time prekey id {prekey_id}")
            one_time_prekeys[prekey_id] = OneTimePreKey(prekey_id, reader.get_keypair(''))
            if reader.get('pooled', bool):
                pool.append(prekey_id)
        elif record_type == 'peer':
            peers[reader.get('user_id', str)] = reader.get_hex('identity_public', KEY_SIZE)
        elif record_type == 'seen_base_key':
            seen_base_keys.add(reader.get_hex('public', KEY_SIZE))
        elif record_type == 'state':
            next_one_time_id = reader.get('next_one_time_id', int)
        elif record_type == 'end':
            if reader.get('records', int) != lineno - 2:
                raise reader.error("record count mismatch")
            ended = True

    if not ended:
        raise KeyStoreLoadError(f"{path}:{len(lines)}: truncated key store (no end record)")
    if identity is None:
        raise KeyStoreLoadError(f"{path}: missing identity record")
    if active is None:
        raise KeyStoreLoadError(f"{path}: missing active signed prekey")
    if next_one_time_id is None:
        raise KeyStoreLoadError(f"{path}: missing state record")

    return KeyStore(
        user_id=user_id,
        identity=identity,
        created_at=created_at,
        signed_prekey=active,
        previous_signed_prekey=grace,
        one_time_prekeys=one_time_prekeys,
        pool=pool,
        next_one_time_id=next_one_time_id,
        peers=peers,
        seen_base_keys=seen_base_keys,
    )


def load(path: pathlib.Path) -> KeyStore:
    path = pathlib.Path(path)
    try:
        text = path.read_text(encoding='utf-8')
    except UnicodeDecodeError:
        raise KeyStoreLoadError(f"{path}: not a text file") from None
    return loads(text, path)
