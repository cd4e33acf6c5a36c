"""
In-process relay server: registration, prekey bundle distribution,
store-and-forward queues, group fan-out, contact discovery, and the
metadata ledger of everything the server can observe.

The server only ever handles public keys and envelope bytes. It cannot read
message contents, but it does record who talked to whom, when, and how much.
"""

from collections import deque
from dataclasses import dataclass, field, replace
from enum import Enum
import json
import logging
import pathlib
import threading
from typing import Any, Callable, Deque, Dict, Iterable, List, Mapping, Optional
try:
    from typing import Self  # type: ignore
except ImportError:
    from typing_extensions import Self  # type: ignore

from .keystore import (
    USER_ID_RE, OneTimePreKeyPublic, PreKeyBundle, SignedPreKeyPublic, now_ms, verify_signed_prekey
)
from .ratchet import MessageEnvelope


logger = logging.getLogger(__name__)

STATE_VERSION = 1
LOW_POOL_WARNING = 10

LEDGER_FIELDS = ('event', 'sender_id', 'recipient_id', 'group_id', 'timestamp_ms', 'payload_size')


class ServerException(Exception):
    pass


class ConflictError(ServerException):
    pass


class NotFoundError(ServerException):
    pass


class ForbiddenError(ServerException):
    pass


class ServerValidationError(ServerException):
    pass


class Event(Enum):
    REGISTERED = 'registered'
    BUNDLE_FETCHED = 'bundle_fetched'
    MESSAGE_RELAYED = 'message_relayed'
    MESSAGE_DELIVERED = 'message_delivered'
    CONTACTS_UPLOADED = 'contacts_uploaded'
    GROUP_CREATED = 'group_created'


@dataclass(frozen=True)
class MetadataRecord:
    event: str
    sender_id: str
    recipient_id: Optional[str]
    group_id: Optional[str]
    timestamp_ms: int
    payload_size: int

    def to_dict(self) -> Dict[str, Any]:
        return {name: getattr(self, name) for name in LEDGER_FIELDS}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), separators=(',', ':'))

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> Self:
        return cls(**{name: data[name] for name in LEDGER_FIELDS})


@dataclass(frozen=True)
class Registration:
    user_id: str
    identity_public: bytes
    identity_signing_public: bytes
    signed_prekey: SignedPreKeyPublic
    one_time_prekeys: List[OneTimePreKeyPublic] = field(default_factory=list)
    registered_at: Optional[int] = None


@dataclass(frozen=True)
class Group:
    group_id: str
    members: List[str]


class LogicalClock:
    """Deterministic clock: returns `now`, then moves it forward by `step` ms."""

    DEFAULT_START = 1_700_000_000_000
    DEFAULT_STEP = 1000

    def __init__(self, start: int = DEFAULT_START, step: int = DEFAULT_STEP) -> None:
        self.now = start
        self.step = step

    def __call__(self) -> int:
        value = self.now
        self.now += self.step
        return value

    def advance(self, ms: int) -> None:
        self.now += ms


def _check_user_id(user_id: str) -> None:
    if not isinstance(user_id, str) or not USER_ID_RE.fullmatch(user_id):
        raise ServerValidationError(f"Invalid user id: {user_id!r}")


class Server:
    def __init__(self, clock: Optional[Callable[[], int]] = None, low_pool_warning: int = LOW_POOL_WARNING) -> None:
        self._clock = clock or now_ms
        self._low_pool_warning = low_pool_warning
        self._lock = threading.RLock()

        self._registrations: Dict[str, Registration] = {}
        self._pools: Dict[str, Deque[OneTimePreKeyPublic]] = {}
        self._queues: Dict[str, Deque[bytes]] = {}
        self._groups: Dict[str, Group] = {}
        self._ledger: List[MetadataRecord] = []
        self._last_timestamp = 0

    def _timestamp(self) -> int:
        # Recorded timestamps never go backwards, whatever the clock does.
        self._last_timestamp = max(self._clock(), self._last_timestamp)
        return self._last_timestamp

    def _record(
        self, event: Event, sender_id: str, recipient_id: Optional[str] = None,
        group_id: Optional[str] = None, payload_size: int = 0, timestamp: Optional[int] = None,
    ) -> None:
        self._ledger.append(MetadataRecord(
            event=event.value,
            sender_id=sender_id,
            recipient_id=recipient_id,
            group_id=group_id,
            timestamp_ms=self._timestamp() if timestamp is None else timestamp,
            payload_size=payload_size,
        ))

    def _get_registration(self, user_id: str) -> Registration:
        registration = self._registrations.get(user_id)
        if registration is None:
            raise NotFoundError(f"User {user_id} is not registered")
        return registration

    # Registration and prekeys

    def register(self, reg: Registration, replace_existing: bool = False) -> None:
        _check_user_id(reg.user_id)
        if not verify_signed_prekey(reg.identity_public, reg.identity_signing_public, reg.signed_prekey):
            raise ServerValidationError(f"Signed prekey signature of {reg.user_id} does not verify")
        if len({prekey.id for prekey in reg.one_time_prekeys}) != len(reg.one_time_prekeys):
            raise ServerValidationError("Duplicate one-time prekey ids")

        with self._lock:
            if reg.user_id in self._registrations:
                if not replace_existing:
                    raise ConflictError(f"User {reg.user_id} is already registered")
                logger.info("Replacing the registration of %s; discarding its old prekeys", reg.user_id)

            timestamp = self._timestamp()
            self._registrations[reg.user_id] = replace(reg, one_time_prekeys=[], registered_at=timestamp)
            self._pools[reg.user_id] = deque(reg.one_time_prekeys)
            self._queues.setdefault(reg.user_id, deque())
            self._record(Event.REGISTERED, reg.user_id, timestamp=timestamp)

    def is_registered(self, user_id: str) -> bool:
        with self._lock:
            return user_id in self._registrations

    def identity_key(self, user_id: str) -> bytes:
        with self._lock:
            return self._get_registration(user_id).identity_public

    def users(self) -> List[str]:
        with self._lock:
            return sorted(self._registrations)

    def upload_prekeys(self, user_id: str, one_time_prekeys: Iterable[OneTimePreKeyPublic]) -> int:
        with self._lock:
            self._get_registration(user_id)
            pool = self._pools[user_id]
            known = {prekey.id for prekey in pool}
            new = list(one_time_prekeys)
            for prekey in new:
                if prekey.id in known:
                    raise ConflictError(f"One-time prekey {prekey.id} of {user_id} was already uploaded")
                known.add(prekey.id)
            pool.extend(new)
            return len(pool)

    def update_signed_prekey(self, user_id: str, signed_prekey: SignedPreKeyPublic) -> None:
        with self._lock:
            registration = self._get_registration(user_id)
            if not verify_signed_prekey(registration.identity_public, registration.identity_signing_public, signed_prekey):
                raise ServerValidationError(f"Signed prekey signature of {user_id} does not verify")
            self._registrations[user_id] = replace(registration, signed_prekey=signed_prekey)

    def prekey_count(self, user_id: str) -> int:
        with self._lock:
            self._get_registration(user_id)
            return len(self._pools[user_id])

    def fetch_bundle(self, requester_id: str, target_id: str) -> PreKeyBundle:
        _check_user_id(requester_id)
        with self._lock:
            registration = self._get_registration(target_id)
            pool = self._pools[target_id]
            one_time = pool.popleft() if pool else None

            if len(pool) < self._low_pool_warning:
                logger.warning("Only %d one-time prekeys left for %s; ask it to replenish", len(pool), target_id)

            self._record(Event.BUNDLE_FETCHED, requester_id, target_id)

        return PreKeyBundle(
            user_id=target_id,
            identity_public=registration.identity_public,
            identity_signing_public=registration.identity_signing_public,
            signed_prekey=registration.signed_prekey,
            one_time_prekey=one_time,
        )

    # Messages

    def _enqueue(self, envelope: MessageEnvelope, group_id: Optional[str], timestamp: Optional[int]) -> None:
        data = envelope.to_bytes()
        self._get_registration(envelope.recipient_id)
        self._queues[envelope.recipient_id].append(data)
        self._record(
            Event.MESSAGE_RELAYED, envelope.sender_id, envelope.recipient_id,
            group_id=group_id, payload_size=len(data), timestamp=timestamp,
        )

    def relay(self, envelope: MessageEnvelope) -> None:
        with self._lock:
            self._enqueue(envelope, None, None)

    def deliver(self, user_id: str) -> List[MessageEnvelope]:
        with self._lock:
            self._get_registration(user_id)
            queue = self._queues[user_id]
            delivered: List[MessageEnvelope] = []
            while queue:
                data = queue.popleft()
                envelope = MessageEnvelope.from_bytes(data)
                self._record(Event.MESSAGE_DELIVERED, envelope.sender_id, user_id, payload_size=len(data))
                delivered.append(envelope)
            return delivered

    def pending(self, user_id: str) -> int:
        with self._lock:
            self._get_registration(user_id)
            return len(self._queues[user_id])

    # Groups

    def create_group(self, group_id: str, members: Iterable[str]) -> Group:
        member_list = sorted(set(members))
        if not group_id:
            raise ServerValidationError("Group id must not be empty")
        if len(member_list) < 2:
            raise ServerValidationError("A group needs at least two members")

        with self._lock:
            if group_id in self._groups:
                raise ConflictError(f"Group {group_id} already exists")
            for member in member_list:
                self._get_registration(member)

            group = Group(group_id, member_list)
            self._groups[group_id] = group
            timestamp = self._timestamp()
            for member in member_list:
                self._record(Event.GROUP_CREATED, member, group_id=group_id, timestamp=timestamp)
            return group

    def get_group(self, group_id: str) -> Group:
        with self._lock:
            group = self._groups.get(group_id)
            if group is None:
                raise NotFoundError(f"Group {group_id} does not exist")
            return group

    def group_send(
        self, sender_id: str, group_id: str, per_member_envelopes: Mapping[str, MessageEnvelope]
    ) -> None:
        with self._lock:
            group = self.get_group(group_id)
            if sender_id not in group.members:
                raise ForbiddenError(f"{sender_id} is not a member of {group_id}")

            expected = set(group.members) - {sender_id}
            supplied = set(per_member_envelopes)
            if supplied != expected:
                missing = sorted(expected - supplied)
                extra = sorted(supplied - expected)
                raise ServerValidationError(
                    f"Group send to {group_id} needs one envelope per member (missing: {missing}, unexpected: {extra})"
                )

            for member, envelope in per_member_envelopes.items():
                if envelope.recipient_id != member or envelope.sender_id != sender_id:
                    raise ServerValidationError(f"Envelope for {member} is addressed incorrectly")

            # One timestamp for the whole fan-out.
            timestamp = self._timestamp()
            for member in sorted(per_member_envelopes):
                self._enqueue(per_member_envelopes[member], group_id, timestamp)

    # Contact discovery

    def discover_contacts(self, user_id: str, phone_numbers: Iterable[str]) -> List[str]:
        with self._lock:
            self._get_registration(user_id)
            timestamp = self._timestamp()
            found: List[str] = []
            for number in sorted(set(phone_numbers)):
                _check_user_id(number)
                # Kept whether or not the number belongs to a user.
                self._record(Event.CONTACTS_UPLOADED, user_id, number, timestamp=timestamp)
                if number in self._registrations:
                    found.append(number)
            return found

    # Ledger

    def ledger(self) -> List[MetadataRecord]:
        with self._lock:
            return list(self._ledger)

    def export_ledger(self, path: pathlib.Path) -> int:
        rows = self.ledger()
        with open(path, 'w', encoding='utf-8') as fd:
            for row in rows:
                fd.write(row.to_json() + '\n')
        return len(rows)

    # Persistence

    def to_dict(self) -> Dict[str, Any]:
        with self._lock:
            return {
                'version': STATE_VERSION,
                'last_timestamp': self._last_timestamp,
                'registrations': [
                    {
                        'user_id': reg.user_id,
                        'identity_public': reg.identity_public.hex(),
                        'identity_signing_public': reg.identity_signing_public.hex(),
                        'signed_prekey': {
                            'id': reg.signed_prekey.id,
                            'public': reg.signed_prekey.public.hex(),
                            'signature': reg.signed_prekey.signature.hex(),
                        },
                        'registered_at': reg.registered_at,
                        'one_time_prekeys': [
                            {'id': prekey.id, 'public': prekey.public.hex()}
                            for prekey in self._pools[reg.user_id]
                        ],
                        'queue': [data.hex() for data in self._queues[reg.user_id]],
                    }
                    for reg in self._registrations.values()
                ],
                'groups': [
                    {'group_id': group.group_id, 'members': group.members}
                    for group in self._groups.values()
                ],
                'ledger': [row.to_dict() for row in self._ledger],
            }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any], clock: Optional[Callable[[], int]] = None) -> Self:
        if data.get('version') != STATE_VERSION:
            raise ServerException(f"Unsupported server state version: {data.get('version')!r}")

        server = cls(clock)
        try:
            server._last_timestamp = data['last_timestamp']
            for item in data['registrations']:
                spk = item['signed_prekey']
                user_id = item['user_id']
                server._registrations[user_id] = Registration(
                    user_id=user_id,
                    identity_public=bytes.fromhex(item['identity_public']),
                    identity_signing_public=bytes.fromhex(item['identity_signing_public']),
                    signed_prekey=SignedPreKeyPublic(spk['id'], bytes.fromhex(spk['public']), bytes.fromhex(spk['signature'])),
                    registered_at=item['registered_at'],
                )
                server._pools[user_id] = deque(
                    OneTimePreKeyPublic(prekey['id'], bytes.fromhex(prekey['public']))
                    for prekey in item['one_time_prekeys']
                )
                server._queues[user_id] = deque(bytes.fromhex(entry) for entry in item['queue'])
            for item in data['groups']:
                server._groups[item['group_id']] = Group(item['group_id'], list(item['members']))
            server._ledger = [MetadataRecord.from_dict(row) for row in data['ledger']]
        except (KeyError, TypeError, ValueError) as ex:
            raise ServerException(f"Corrupt server state: {ex!r}") from ex

        return server

    def save(self, path: pathlib.Path) -> None:
        path = pathlib.Path(path)
        tmp_path = path.with_name(path.name + '.tmp')
        with open(tmp_path, 'w', encoding='utf-8') as fd:
            json.dump(self.to_dict(), fd, separators=(',', ':'))
        tmp_path.replace(path)

    @classmethod
    def load(cls, path: pathlib.Path, clock: Optional[Callable[[], int]] = None) -> Self:
        with open(path, encoding='utf-8') as fd:
            try:
                data = json.load(fd)
            except ValueError as ex:
                raise ServerException(f"Corrupt server state in {path}: {ex}") from ex
        return cls.from_dict(data, clock)

    @property
    def last_timestamp(self) -> int:
        return self._last_timestamp

