"""
Cryptographic primitives: X25519, Ed25519, HMAC-SHA256, HKDF, SHA-256,
AES-256-CBC encrypt-then-MAC and the random-byte source.

Everything here is a pure function of its arguments (plus the entropy source),
so it is safe to call from any thread.
"""

from dataclasses import dataclass
import hashlib
import logging
import os
from typing import Optional, Tuple, Union
try:
    from typing import Protocol  # type: ignore
except ImportError:
    from typing_extensions import Protocol  # type: ignore
try:
    from typing import Self  # type: ignore
except ImportError:
    from typing_extensions import Self  # type: ignore

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import hashes, hmac, padding, serialization
from cryptography.hazmat.primitives.asymmetric import ed25519, x25519
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes
from cryptography.hazmat.primitives.kdf.hkdf import HKDF


logger = logging.getLogger(__name__)

KEY_SIZE = 32
SIGNATURE_SIZE = 64
MAC_SIZE = 32
IV_SIZE = 16
MESSAGE_KEY_SIZE = KEY_SIZE + KEY_SIZE + IV_SIZE  # cipher key | MAC key | IV

HKDF_MAX_LENGTH = 255 * 32

ZERO_SALT = bytes(KEY_SIZE)


class CryptoException(Exception):
    pass


class ContributoryError(CryptoException):
    pass


class IntegrityError(CryptoException):
    pass


class EntropyError(CryptoException):
    pass


# Random sources

class RandomSource(Protocol):
    deterministic: bool

    def read(self, n: int) -> bytes:
        ...


class SystemRandomSource:
    deterministic = False

    def read(self, n: int) -> bytes:
        try:
            return os.urandom(n)
        except NotImplementedError as ex:
            raise EntropyError(f"Platform entropy source failed: {ex}") from ex


class SeededTestRandom:
    """
    Deterministic byte stream for tests and reproducible simulations ONLY.

    The stream is HMAC-SHA256(SHA-256(seed), counter) blocks. Keys generated
    from it are predictable by anyone who knows the seed.
    """

    deterministic = True

    def __init__(self, seed: Union[int, bytes, str]) -> None:
        if isinstance(seed, int):
            seed_bytes = seed.to_bytes((seed.bit_length() + 8) // 8, 'big', signed=True)
        elif isinstance(seed, str):
            seed_bytes = seed.encode()
        else:
            seed_bytes = bytes(seed)

        logger.warning("Deterministic test randomness enabled (seed %r); keys are NOT secret", seed)

        self._key = sha256(b'ratchetlab-test-rng' + seed_bytes)
        self._counter = 0
        self._buffer = b''

    def read(self, n: int) -> bytes:
        while len(self._buffer) < n:
            self._buffer += hmac_sha256(self._key, self._counter.to_bytes(8, 'big'))
            self._counter += 1
        out, self._buffer = self._buffer[:n], self._buffer[n:]
        return out


SYSTEM_RANDOM = SystemRandomSource()


def random_bytes(n: int, rng: Optional[RandomSource] = None) -> bytes:
    if n < 0:
        raise CryptoException(f"Cannot generate {n} random bytes")
    if n == 0:
        return b''
    return (rng or SYSTEM_RANDOM).read(n)


# Hashing and key derivation

def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def hmac_sha256(key: bytes, message: bytes) -> bytes:
    h = hmac.HMAC(key, hashes.SHA256())
    h.update(message)
    return h.finalize()


def hkdf(input_key_material: bytes, salt: bytes, info: bytes, out_len: int) -> bytes:
    if not 1 <= out_len <= HKDF_MAX_LENGTH:
        raise CryptoException(f"HKDF output length must be between 1 and {HKDF_MAX_LENGTH}, got {out_len}")

    return HKDF(
        algorithm=hashes.SHA256(),
        length=out_len,
        salt=salt,
        info=info,
    ).derive(bytes(input_key_material))


def zeroize(buf: bytearray) -> None:
    buf[:] = bytes(len(buf))


# Curve25519

def clamp(scalar: bytes) -> bytes:
    if len(scalar) != KEY_SIZE:
        raise CryptoException(f"Scalar must be {KEY_SIZE} bytes, got {len(scalar)}")
    clamped = bytearray(scalar)
    clamped[0] &= 248
    clamped[31] &= 127
    clamped[31] |= 64
    return bytes(clamped)


def public_key(secret: bytes) -> bytes:
    private = x25519.X25519PrivateKey.from_private_bytes(clamp(secret))
    return private.public_key().public_bytes(serialization.Encoding.Raw, serialization.PublicFormat.Raw)


def ecdh(secret: bytes, peer_public: bytes) -> bytes:
    if len(peer_public) != KEY_SIZE:
        raise CryptoException(f"Public key must be {KEY_SIZE} bytes, got {len(peer_public)}")

    private = x25519.X25519PrivateKey.from_private_bytes(clamp(secret))
    try:
        shared = private.exchange(x25519.X25519PublicKey.from_public_bytes(bytes(peer_public)))
    except ValueError as ex:
        # OpenSSL refuses the all-zero output of a low-order point itself.
        raise ContributoryError("ECDH produced an all-zero shared secret (low-order point)") from ex

    if shared == bytes(KEY_SIZE):
        raise ContributoryError("ECDH produced an all-zero shared secret (low-order point)")

    return shared


@dataclass(frozen=True)
class KeyPair:
    private: bytes
    public: bytes

    @classmethod
    def generate(cls, rng: Optional[RandomSource] = None) -> Self:
        return cls.from_private(random_bytes(KEY_SIZE, rng))

    @classmethod
    def from_private(cls, private: bytes) -> Self:
        private = clamp(private)
        return cls(private, public_key(private))

    def __repr__(self) -> str:
        return f'KeyPair(public={self.public.hex()[:16]}…)'


# Ed25519

@dataclass(frozen=True)
class SigningKeyPair:
    private: bytes
    public: bytes

    @classmethod
    def generate(cls, rng: Optional[RandomSource] = None) -> Self:
        return cls.from_private(random_bytes(KEY_SIZE, rng))

    @classmethod
    def from_private(cls, private: bytes) -> Self:
        key = ed25519.Ed25519PrivateKey.from_private_bytes(private)
        public = key.public_key().public_bytes(serialization.Encoding.Raw, serialization.PublicFormat.Raw)
        return cls(bytes(private), public)

    def sign(self, message: bytes) -> bytes:
        return ed25519.Ed25519PrivateKey.from_private_bytes(self.private).sign(message)

    def __repr__(self) -> str:
        return f'SigningKeyPair(public={self.public.hex()[:16]}…)'


def verify_signature(signing_public: bytes, signature: bytes, message: bytes) -> bool:
    if len(signing_public) != KEY_SIZE or len(signature) != SIGNATURE_SIZE:
        return False
    try:
        ed25519.Ed25519PublicKey.from_public_bytes(signing_public).verify(signature, message)
    except (InvalidSignature, ValueError):
        return False
    return True


# Message encryption

def split_message_key(msg_key: bytes) -> Tuple[bytes, bytes, bytes]:
    if len(msg_key) != MESSAGE_KEY_SIZE:
        raise CryptoException(f"Message key must be {MESSAGE_KEY_SIZE} bytes, got {len(msg_key)}")
    return msg_key[:KEY_SIZE], msg_key[KEY_SIZE:2 * KEY_SIZE], msg_key[2 * KEY_SIZE:]


def _mac(mac_key: bytes, associated_data: bytes, ciphertext: bytes) -> hmac.HMAC:
    h = hmac.HMAC(mac_key, hashes.SHA256())
    h.update(associated_data)
    h.update(ciphertext)
    return h


def aead_encrypt(msg_key: bytes, plaintext: bytes, associated_data: bytes) -> Tuple[bytes, bytes]:
    cipher_key, mac_key, iv = split_message_key(msg_key)

    padder = padding.PKCS7(algorithms.AES.block_size).padder()
    padded = padder.update(plaintext) + padder.finalize()

    encryptor = Cipher(algorithms.AES(cipher_key), modes.CBC(iv)).encryptor()
    ciphertext = encryptor.update(padded) + encryptor.finalize()

    return ciphertext, _mac(mac_key, associated_data, ciphertext).finalize()


def aead_decrypt(msg_key: bytes, ciphertext: bytes, mac: bytes, associated_data: bytes) -> bytes:
    cipher_key, mac_key, iv = split_message_key(msg_key)

    try:
        _mac(mac_key, associated_data, ciphertext).verify(mac)
    except InvalidSignature:
        raise IntegrityError("MAC verification failed") from None

    if not ciphertext or len(ciphertext) % IV_SIZE:
        raise IntegrityError("Ciphertext is not a whole number of blocks")

    decryptor = Cipher(algorithms.AES(cipher_key), modes.CBC(iv)).decryptor()
    padded = decryptor.update(ciphertext) + decryptor.finalize()

    unpadder = padding.PKCS7(algorithms.AES.block_size).unpadder()
    try:
        return unpadder.update(padded) + unpadder.finalize()
    except ValueError:
        raise IntegrityError("Bad padding") from None
