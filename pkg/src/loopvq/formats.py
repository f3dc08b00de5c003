"""Binary container helpers shared by the dataset, checkpoint and code files."""

from __future__ import annotations

import struct


class FileFormatError(ValueError):
    """A container file could not be decoded."""


class BadMagicError(FileFormatError):
    pass


class VersionMismatchError(FileFormatError):
    pass


class TruncatedFileError(FileFormatError):
    pass


class Reader:
    """Little-endian cursor over a byte string that fails loudly on truncation."""

    def __init__(self, data: bytes, what: str = "file"):
        self.data = data
        self.pos = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise TruncatedFileError(
                f"{self.what} truncated: need {n} bytes at offset {self.pos}, "
                f"only {len(self.data) - self.pos} left")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        fmt = "<" + fmt
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def u8(self) -> int:
        return self.unpack("B")[0]

    def u16(self) -> int:
        return self.unpack("H")[0]

    def u32(self) -> int:
        return self.unpack("I")[0]

    def string(self, width: str = "H") -> str:
        (n,) = self.unpack(width)
        return self.take(n).decode("utf-8")

    def at_end(self) -> bool:
        return self.pos == len(self.data)

    def expect_end(self):
        if not self.at_end():
            raise FileFormatError(f"{self.what} has {len(self.data) - self.pos} trailing bytes")


def pack_string(s: str, width: str = "H") -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<" + width, len(raw)) + raw


def check_magic(reader: Reader, magic: bytes, version_digit: bool = False):
    """Consume and validate a 4-byte magic.

    With ``version_digit`` the last magic byte is a format version, so a file
    that matches the first three bytes but not the version is reported as a
    version mismatch rather than a foreign file.
    """
    got = reader.take(4) if len(reader.data) >= 4 else reader.data
    if got == magic:
        return
    if version_digit and got[:3] == magic[:3] and len(got) == 4:
        raise VersionMismatchError(
            f"{reader.what}: format version {got[3:].decode(errors='replace')!r}, "
            f"expected {magic[3:].decode()!r}")
    raise BadMagicError(f"{reader.what}: bad magic {got!r}, expected {magic!r}")
