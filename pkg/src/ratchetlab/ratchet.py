"""
Symmetric hash ratchet and message envelopes.

Each message key is derived from the current chain key, which is then
replaced by a one-way successor:

    seed        = HMAC-SHA256(chain_key, 0x01)
    message_key = HKDF(seed, salt=32 zero bytes, info="ratchetlab-msg-v1", 80 bytes)
    chain_key'  = HMAC-SHA256(chain_key, 0x02)

The 80-byte message key is the AES-256 key, the HMAC key and the CBC IV.
"""

from dataclasses import dataclass
from io import BytesIO
import logging
from typing import BinaryIO, Iterable, List, Optional, Tuple
try:
    from typing import Self  # type: ignore
except ImportError:
    from typing_extensions import Self  # type: ignore

from .crypto_core import MAC_SIZE, MESSAGE_KEY_SIZE, ZERO_SALT, aead_decrypt, aead_encrypt, hkdf, hmac_sha256
from .session import MAX_SKIPPED_KEYS, ChainState, HandshakeHeader, Role, SessionState
from .wire import (
    WireFormatError, expect_eof, read_exact, read_long_bytes, read_short_string, read_u8, read_u32,
    write_long_bytes, write_short_string, write_u8, write_u32,
)


logger = logging.getLogger(__name__)

MESSAGE_INFO = b'ratchetlab-msg-v1'
MESSAGE_KEY_SEED = b'\x01'
CHAIN_KEY_SEED = b'\x02'

ENVELOPE_VERSION = 0x01
FLAG_HANDSHAKE = 0x01

MAX_COUNTER = 0xFFFFFFFF
MAX_SKIP = MAX_SKIPPED_KEYS


class RatchetException(Exception):
    pass


class ChainExhausted(RatchetException):
    pass


class OutOfWindowError(RatchetException):
    pass


class FloodGuardError(RatchetException):
    pass


class EnvelopeFormatError(RatchetException):
    pass


def _write_header(
    fd: BinaryIO, version: int, sender_id: str, recipient_id: str, counter: int,
    handshake: Optional[HandshakeHeader],
) -> None:
    write_u8(fd, version)
    write_u8(fd, FLAG_HANDSHAKE if handshake is not None else 0)
    write_short_string(fd, sender_id)
    write_short_string(fd, recipient_id)
    write_u32(fd, counter)
    if handshake is not None:
        handshake.write(fd)


def associated_data(
    sender_id: str, recipient_id: str, counter: int, handshake: Optional[HandshakeHeader],
    version: int = ENVELOPE_VERSION,
) -> bytes:
    out = BytesIO()
    _write_header(out, version, sender_id, recipient_id, counter, handshake)
    return out.getvalue()


@dataclass(frozen=True)
class MessageEnvelope:
    sender_id: str
    recipient_id: str
    counter: int
    handshake: Optional[HandshakeHeader]
    ciphertext: bytes
    mac: bytes
    version: int = ENVELOPE_VERSION

    def header_bytes(self) -> bytes:
        return associated_data(self.sender_id, self.recipient_id, self.counter, self.handshake, self.version)

    def to_bytes(self) -> bytes:
        out = BytesIO()
        out.write(self.header_bytes())
        write_long_bytes(out, self.ciphertext)
        out.write(self.mac)
        return out.getvalue()

    @classmethod
    def read(cls, fd: BinaryIO) -> Self:
        version = read_u8(fd)
        if version != ENVELOPE_VERSION:
            raise WireFormatError(f"Unsupported envelope version: {version}")
        flags = read_u8(fd)
        if flags & ~FLAG_HANDSHAKE:
            raise WireFormatError(f"Unknown envelope flags: 0x{flags:02x}")

        sender_id = read_short_string(fd)
        recipient_id = read_short_string(fd)
        counter = read_u32(fd)
        handshake = HandshakeHeader.read(fd) if flags & FLAG_HANDSHAKE else None
        ciphertext = read_long_bytes(fd)
        mac = read_exact(fd, MAC_SIZE)

        return cls(sender_id, recipient_id, counter, handshake, ciphertext, mac, version)

    @classmethod
    def from_bytes(cls, data: bytes) -> Self:
        fd = BytesIO(data)
        try:
            envelope = cls.read(fd)
            expect_eof(fd)
        except WireFormatError as ex:
            raise EnvelopeFormatError(f"Malformed envelope: {ex}") from None
        return envelope

    def __repr__(self) -> str:
        return (
            f'MessageEnvelope({self.sender_id} -> {self.recipient_id}, counter={self.counter}, '
            f'handshake={self.handshake is not None}, ciphertext={len(self.ciphertext)} bytes)'
        )


# Captured traffic: envelopes as a relay wiretap would record them, each
# prefixed with its 4-byte big-endian length.

def write_captured(fd: BinaryIO, envelopes: Iterable[MessageEnvelope]) -> int:
    count = 0
    for envelope in envelopes:
        write_long_bytes(fd, envelope.to_bytes())
        count += 1
    return count


def read_captured(data: bytes) -> List[MessageEnvelope]:
    fd = BytesIO(data)
    envelopes: List[MessageEnvelope] = []
    while fd.tell() < len(data):
        try:
            record = read_long_bytes(fd)
        except WireFormatError as ex:
            raise EnvelopeFormatError(f"Truncated capture after {len(envelopes)} envelopes: {ex}") from None
        envelopes.append(MessageEnvelope.from_bytes(record))
    return envelopes


def advance_chain(chain: ChainState) -> Tuple[bytes, ChainState]:
    if chain.counter >= MAX_COUNTER:
        raise ChainExhausted("Chain exhausted: message counter would overflow")

    seed = hmac_sha256(chain.chain_key, MESSAGE_KEY_SEED)
    message_key = hkdf(seed, ZERO_SALT, MESSAGE_INFO, MESSAGE_KEY_SIZE)
    next_chain = ChainState(hmac_sha256(chain.chain_key, CHAIN_KEY_SEED), chain.counter + 1)

    return message_key, next_chain


def _seal(
    sender_id: str, recipient_id: str, counter: int, handshake: Optional[HandshakeHeader],
    message_key: bytes, plaintext: bytes,
) -> MessageEnvelope:
    ad = associated_data(sender_id, recipient_id, counter, handshake)
    ciphertext, mac = aead_encrypt(message_key, plaintext, ad)
    return MessageEnvelope(sender_id, recipient_id, counter, handshake, ciphertext, mac)


def encrypt_message(session: SessionState, plaintext: bytes) -> MessageEnvelope:
    counter = session.send_chain.counter
    message_key, session.send_chain = advance_chain(session.send_chain)

    return _seal(session.local_id, session.peer_id, counter, session.pending_handshake, message_key, plaintext)


def decrypt_message(session: SessionState, envelope: MessageEnvelope) -> bytes:
    """
    Decrypt an envelope from the session's peer. The session is only modified
    once the MAC has been verified.
    """
    if envelope.recipient_id != session.local_id:
        raise RatchetException(f"Envelope is addressed to {envelope.recipient_id}, not {session.local_id}")
    if envelope.sender_id != session.peer_id:
        raise RatchetException(f"Envelope is from {envelope.sender_id}, not {session.peer_id}")

    ad = envelope.header_bytes()
    chain_id = session.recv_chain_id
    recv_chain = session.recv_chain

    if envelope.counter < recv_chain.counter:
        message_key = session.skipped.get(chain_id, envelope.counter)
        if message_key is None:
            raise OutOfWindowError(f"No key for message {envelope.counter}: already decrypted or too old")

        plaintext = aead_decrypt(message_key, envelope.ciphertext, envelope.mac, ad)
        session.skipped.delete(chain_id, envelope.counter)
    else:
        distance = envelope.counter - recv_chain.counter
        if distance > MAX_SKIP:
            raise FloodGuardError(f"Message {envelope.counter} would skip {distance} keys (limit {MAX_SKIP})")

        skipped: List[Tuple[int, bytes]] = []
        chain = recv_chain
        while chain.counter < envelope.counter:
            skipped_key, chain = advance_chain(chain)
            skipped.append((chain.counter - 1, skipped_key))
        message_key, chain = advance_chain(chain)

        plaintext = aead_decrypt(message_key, envelope.ciphertext, envelope.mac, ad)

        session.recv_chain = chain
        for counter, skipped_key in skipped:
            session.skipped.put(chain_id, counter, skipped_key)

    if session.role is Role.INITIATOR and session.pending_handshake is not None:
        logger.debug("First reply from %s; no longer attaching the handshake", session.peer_id)
        session.pending_handshake = None

    return plaintext


# Deniability demonstration.

def forge_envelope(
    session: SessionState, fake_plaintext: bytes, with_handshake: Optional[bool] = None
) -> MessageEnvelope:
    """
    DEMONSTRATION ONLY: run by the *receiving* side to author an envelope that
    appears to come from the peer.

    Both parties derive both chain keys, so the receiver can compute the
    peer's next message key (including its MAC component) and produce an
    envelope that the genuine verification path accepts. A valid MAC therefore
    proves nothing to a third party about who wrote a message.

    A genuine initiator attaches its handshake until a reply reaches it,
    which the receiver cannot observe, so `with_handshake` picks either form.
    By default the handshake is attached while no reply has been sent.

    The session itself is not modified.
    """
    message_key, _ = advance_chain(session.recv_chain)

    if with_handshake is None:
        with_handshake = session.send_chain.counter == 0
    handshake = session.remote_handshake if session.role is Role.RECIPIENT and with_handshake else None

    return _seal(
        session.peer_id, session.local_id, session.recv_chain.counter, handshake, message_key, fake_plaintext
    )
