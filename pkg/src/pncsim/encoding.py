"""Canonical byte encoding shared by the ledger and the wire codec.

Rules: fields concatenate in declared order, integers are big-endian,
variable-length fields carry a fixed-width length prefix.  Encoding the
same value twice yields byte-identical output, which is what the ledger
hashes rely on.
"""

from __future__ import annotations


class DecodeError(Exception):
    """Byte stream does not match the declared layout."""


def enc_u16(value: int) -> bytes:
    return value.to_bytes(2, "big", signed=False)


def enc_u32(value: int) -> bytes:
    return value.to_bytes(4, "big", signed=False)


def enc_u64(value: int) -> bytes:
    return value.to_bytes(8, "big", signed=False)


def enc_i64(value: int) -> bytes:
    return value.to_bytes(8, "big", signed=True)


def enc_str(value: str) -> bytes:
    raw = value.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise ValueError("string field exceeds 65535 bytes")
    return enc_u16(len(raw)) + raw


def enc_bytes(value: bytes) -> bytes:
    if len(value) > 0xFFFF:
        raise ValueError("bytes field exceeds 65535 bytes")
    return enc_u16(len(value)) + value


class Reader:
    """Sequential decoder over one canonical byte string."""

    def __init__(self, data: bytes):
        self._data = data
        self._pos = 0

    def take(self, n: int) -> bytes:
        if self._pos + n > len(self._data):
            raise DecodeError(f"need {n} bytes at offset {self._pos}, have {len(self._data) - self._pos}")
        out = self._data[self._pos:self._pos + n]
        self._pos += n
        return out

    def u16(self) -> int:
        return int.from_bytes(self.take(2), "big")

    def u32(self) -> int:
        return int.from_bytes(self.take(4), "big")

    def u64(self) -> int:
        return int.from_bytes(self.take(8), "big")

    def i64(self) -> int:
        return int.from_bytes(self.take(8), "big", signed=True)

    def string(self) -> str:
        raw = self.take(self.u16())
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise DecodeError("string field is not valid UTF-8") from exc

    def bytestring(self) -> bytes:
        return self.take(self.u16())

    def remaining(self) -> int:
        return len(self._data) - self._pos

    def expect_end(self) -> None:
        if self._pos != len(self._data):
            raise DecodeError(f"{len(self._data) - self._pos} trailing bytes")
