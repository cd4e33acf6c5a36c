from typing import BinaryIO


class WireFormatError(ValueError):
    pass


def read_exact(fd: BinaryIO, length: int) -> bytes:
    data = fd.read(length)
    if len(data) != length:
        raise WireFormatError("Unexpected EOF")
    return data


def read_u8(fd: BinaryIO) -> int:
    return read_exact(fd, 1)[0]


def read_u32(fd: BinaryIO) -> int:
    return int.from_bytes(read_exact(fd, 4), 'big')


def read_short_bytes(fd: BinaryIO) -> bytes:
    return read_exact(fd, read_u8(fd))


def read_long_bytes(fd: BinaryIO) -> bytes:
    return read_exact(fd, read_u32(fd))


def read_short_string(fd: BinaryIO) -> str:
    try:
        return read_short_bytes(fd).decode()
    except UnicodeDecodeError:
        raise WireFormatError("Invalid UTF-8 string") from None


def expect_eof(fd: BinaryIO) -> None:
    if fd.read(1):
        raise WireFormatError("Trailing data")


def write_u8(fd: BinaryIO, v: int) -> None:
    fd.write(v.to_bytes(1, 'big'))


def write_u32(fd: BinaryIO, v: int) -> None:
    fd.write(v.to_bytes(4, 'big'))


def write_short_bytes(fd: BinaryIO, data: bytes) -> None:
    if len(data) > 0xFF:
        raise WireFormatError(f"Field too long: {len(data)} bytes")
    write_u8(fd, len(data))
    fd.write(data)


def write_long_bytes(fd: BinaryIO, data: bytes) -> None:
    write_u32(fd, len(data))
    fd.write(data)


def write_short_string(fd: BinaryIO, data: str) -> None:
    write_short_bytes(fd, data.encode())
