"""
Out-of-band identity verification: the QR payload and the 60-digit safety
number. Both are computed the same way by either party.
"""

import base64
from io import BytesIO
import hmac
from typing import List, Tuple

from .crypto_core import KEY_SIZE, sha256
from .keystore import KeyStoreValidationError, check_user_id
from .wire import WireFormatError, expect_eof, read_exact, read_short_string, read_u8, write_short_string, write_u8


QR_VERSION = 0x01

SAFETY_NUMBER_ITERATIONS = 1024
SAFETY_NUMBER_CHUNKS = 6
SAFETY_NUMBER_CHUNK_BYTES = 5
SAFETY_NUMBER_CHUNK_DIGITS = 5
SAFETY_NUMBER_LENGTH = 2 * SAFETY_NUMBER_CHUNKS * SAFETY_NUMBER_CHUNK_DIGITS


class VerificationException(Exception):
    pass


def _check_party(user_id: str, key: bytes) -> None:
    try:
        check_user_id(user_id)
    except KeyStoreValidationError as ex:
        raise VerificationException(str(ex)) from None
    if not isinstance(key, (bytes, bytearray)) or len(key) != KEY_SIZE:
        raise VerificationException(f"Identity key of {user_id} must be {KEY_SIZE} bytes")


def _ordered(user_a: str, key_a: bytes, user_b: str, key_b: bytes) -> List[Tuple[str, bytes]]:
    _check_party(user_a, key_a)
    _check_party(user_b, key_b)
    if user_a == user_b:
        raise VerificationException("Cannot verify a user against themselves")
    return sorted([(user_a, bytes(key_a)), (user_b, bytes(key_b))])


def qr_payload(user_a: str, key_a: bytes, user_b: str, key_b: bytes) -> bytes:
    out = BytesIO()
    write_u8(out, QR_VERSION)
    for user_id, key in _ordered(user_a, key_a, user_b, key_b):
        write_short_string(out, user_id)
        out.write(key)
    return out.getvalue()


def parse_qr_payload(data: bytes) -> List[Tuple[str, bytes]]:
    fd = BytesIO(data)
    try:
        version = read_u8(fd)
        if version != QR_VERSION:
            raise VerificationException(f"Unsupported QR payload version: {version}")
        parties = []
        for _ in range(2):
            user_id = read_short_string(fd)
            parties.append((user_id, read_exact(fd, KEY_SIZE)))
        expect_eof(fd)
    except WireFormatError as ex:
        raise VerificationException(f"Malformed QR payload: {ex}") from None

    (user_lo, key_lo), (user_hi, key_hi) = parties
    if _ordered(user_lo, key_lo, user_hi, key_hi) != parties:
        raise VerificationException("QR payload parties are not in canonical order")
    return parties


def qr_text(payload: bytes) -> str:
    return base64.b32encode(payload).decode('ascii').rstrip('=')


def _fingerprint(user_id: str, key: bytes) -> str:
    digest = bytes(32)
    suffix = key + user_id.encode('utf-8')
    for _ in range(SAFETY_NUMBER_ITERATIONS):
        digest = sha256(digest + suffix)

    digits = []
    for i in range(SAFETY_NUMBER_CHUNKS):
        chunk = digest[i * SAFETY_NUMBER_CHUNK_BYTES:(i + 1) * SAFETY_NUMBER_CHUNK_BYTES]
        value = int.from_bytes(chunk, 'big') % 10 ** SAFETY_NUMBER_CHUNK_DIGITS
        digits.append(f'{value:0{SAFETY_NUMBER_CHUNK_DIGITS}d}')
    return ''.join(digits)


def safety_number(user_a: str, key_a: bytes, user_b: str, key_b: bytes) -> str:
    halves = sorted(_fingerprint(user_id, key) for user_id, key in _ordered(user_a, key_a, user_b, key_b))
    return ''.join(halves)


def format_safety_number(digits: str) -> str:
    if len(digits) != SAFETY_NUMBER_LENGTH or not digits.isdigit():
        raise VerificationException(f"Safety number must be {SAFETY_NUMBER_LENGTH} digits")
    step = SAFETY_NUMBER_CHUNK_DIGITS
    return ' '.join(digits[i:i + step] for i in range(0, len(digits), step))


def compare(a: str, b: str) -> bool:
    a = ''.join(a.split())
    b = ''.join(b.split())
    return hmac.compare_digest(a.encode('ascii', 'replace'), b.encode('ascii', 'replace'))
