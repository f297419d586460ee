"""Low-level binary I/O shared by the vector store and parameter checkpoints.

All multi-byte integers are little-endian. Integrity is a CRC-64 (ECMA-182
polynomial) over the file body, stored as a trailing u64.
"""

from __future__ import annotations

import struct

_CRC64_POLY = 0x42F0E1EBA9EA3693  # ECMA-182
_CRC64_TABLE: list[int] = []


def _build_table() -> None:
    for byte in range(256):
        crc = byte << 56
        for _ in range(8):
            if crc & (1 << 63):
                crc = ((crc << 1) ^ _CRC64_POLY) & 0xFFFFFFFFFFFFFFFF
            else:
                crc = (crc << 1) & 0xFFFFFFFFFFFFFFFF
        _CRC64_TABLE.append(crc)


_build_table()


def crc64(data: bytes, crc: int = 0) -> int:
    """Update a running CRC-64 with `data`; start from `crc=0` for a fresh sum."""
    table = _CRC64_TABLE
    for b in data:
        crc = (table[((crc >> 56) ^ b) & 0xFF] ^ (crc << 8)) & 0xFFFFFFFFFFFFFFFF
    return crc


def pack_u16(value: int) -> bytes:
    return struct.pack("<H", value)


def pack_u32(value: int) -> bytes:
    return struct.pack("<I", value)


def pack_u64(value: int) -> bytes:
    return struct.pack("<Q", value)


def unpack_u16(buf: bytes, offset: int) -> tuple[int, int]:
    return struct.unpack_from("<H", buf, offset)[0], offset + 2


def unpack_u32(buf: bytes, offset: int) -> tuple[int, int]:
    return struct.unpack_from("<I", buf, offset)[0], offset + 4


def unpack_u64(buf: bytes, offset: int) -> tuple[int, int]:
    return struct.unpack_from("<Q", buf, offset)[0], offset + 8


def stable_hash64(text: str) -> int:
    """64-bit content digest of a string, stable across processes and runs."""
    import hashlib

    return int.from_bytes(hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest(), "little")
