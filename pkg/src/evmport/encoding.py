"""Canonical serialization primitives: RLP, hex-prefix paths and Keccak-256."""

from __future__ import annotations

from typing import Sequence, Union

from Crypto.Hash import keccak as _keccak

RlpItem = Union[bytes, list]

MAX_LENGTH = 2**32
MAX_DEPTH = 512

SHORT_STRING = 0x80
LONG_STRING = 0xB7
SHORT_LIST = 0xC0
LONG_LIST = 0xF7


class RlpError(ValueError):
    pass


class SizeOverflow(RlpError):
    pass


class MalformedRlp(RlpError):
    pass


class TrailingBytes(MalformedRlp):
    pass


def keccak256(data: bytes) -> bytes:
    """Keccak-256 with the original (pre-SHA3) padding."""
    return _keccak.new(digest_bits=256, data=bytes(data)).digest()


def int_to_bytes(value: int) -> bytes:
    """Minimal big-endian encoding; zero is the empty string."""
    if value < 0:
        raise ValueError("negative integers have no RLP form")
    return value.to_bytes((value.bit_length() + 7) // 8, "big")


def bytes_to_int(data: bytes) -> int:
    return int.from_bytes(data, "big")


def _length_prefix(length: int, offset: int) -> bytes:
    if length >= MAX_LENGTH:
        raise SizeOverflow(f"payload of {length} bytes exceeds the 2^32 bound")
    if length < 56:
        return bytes([offset + length])
    encoded = int_to_bytes(length)
    return bytes([offset + 55 + len(encoded)]) + encoded


def rlp_encode(item: RlpItem | int | bytearray, _depth: int = 0) -> bytes:
    if _depth > MAX_DEPTH:
        raise SizeOverflow("item nesting too deep")
    if isinstance(item, bool):
        raise TypeError("booleans are not RLP items")
    if isinstance(item, int):
        item = int_to_bytes(item)
    if isinstance(item, (bytes, bytearray, memoryview)):
        item = bytes(item)
        if len(item) == 1 and item[0] < SHORT_STRING:
            return item
        return _length_prefix(len(item), SHORT_STRING) + item
    if isinstance(item, (list, tuple)):
        payload = b"".join(rlp_encode(x, _depth + 1) for x in item)
        return _length_prefix(len(payload), SHORT_LIST) + payload
    raise TypeError(f"cannot RLP-encode {type(item).__name__}")


def _read_length(data: bytes, pos: int, n: int) -> int:
    if pos + n > len(data):
        raise MalformedRlp("truncated length field")
    raw = data[pos : pos + n]
    if raw[0] == 0:
        raise MalformedRlp("length field has leading zero")
    length = bytes_to_int(raw)
    if length < 56:
        raise MalformedRlp("long-form length used where short form suffices")
    return length


def _decode_at(data: bytes, pos: int, depth: int) -> tuple[RlpItem, int]:
    """Decode the item starting at ``pos``; return it with the end offset."""
    if depth > MAX_DEPTH:
        raise MalformedRlp("item nesting too deep")
    if pos >= len(data):
        raise MalformedRlp("unexpected end of input")
    prefix = data[pos]
    if prefix < SHORT_STRING:
        return data[pos : pos + 1], pos + 1

    if prefix <= LONG_STRING:
        start, length = pos + 1, prefix - SHORT_STRING
    elif prefix < SHORT_LIST:
        n = prefix - LONG_STRING
        length = _read_length(data, pos + 1, n)
        start = pos + 1 + n
    elif prefix <= LONG_LIST:
        start, length = pos + 1, prefix - SHORT_LIST
    else:
        n = prefix - LONG_LIST
        length = _read_length(data, pos + 1, n)
        start = pos + 1 + n

    end = start + length
    if end > len(data):
        raise MalformedRlp(f"declared length {length} exceeds input")

    if prefix < SHORT_LIST:
        value = data[start:end]
        if length == 1 and value[0] < SHORT_STRING:
            raise MalformedRlp("single byte below 0x80 must encode as itself")
        return value, end

    items = []
    cursor = start
    while cursor < end:
        child, cursor = _decode_at(data, cursor, depth + 1)
        if cursor > end:
            raise MalformedRlp("list element overruns list payload")
        items.append(child)
    return items, end


def rlp_decode(data: bytes) -> RlpItem:
    """Decode one RLP item occupying all of ``data``.

    Strings come back as ``bytes`` and lists as ``list``.
    """
    data = bytes(data)
    if not data:
        raise MalformedRlp("empty input")
    item, end = _decode_at(data, 0, 0)
    if end != len(data):
        raise TrailingBytes(f"{len(data) - end} trailing bytes after item")
    return item


def bytes_to_nibbles(data: bytes) -> tuple[int, ...]:
    out = []
    for b in data:
        out.append(b >> 4)
        out.append(b & 0x0F)
    return tuple(out)


def nibbles_to_bytes(nibbles: Sequence[int]) -> bytes:
    if len(nibbles) % 2:
        raise ValueError("odd number of nibbles")
    return bytes((nibbles[i] << 4) | nibbles[i + 1] for i in range(0, len(nibbles), 2))


def hex_prefix(nibbles: Sequence[int], is_leaf: bool) -> bytes:
    """Compact path encoding: flag nibble (leaf=2, odd=1) then the path."""
    if any(not 0 <= n < 16 for n in nibbles):
        raise ValueError("nibble out of range")
    flag = (2 if is_leaf else 0) + len(nibbles) % 2
    if len(nibbles) % 2:
        return nibbles_to_bytes((flag, *nibbles))
    return nibbles_to_bytes((flag, 0, *nibbles))


def decode_hex_prefix(data: bytes) -> tuple[tuple[int, ...], bool]:
    if not data:
        raise MalformedRlp("empty hex-prefix path")
    nibbles = bytes_to_nibbles(data)
    flag = nibbles[0]
    if flag > 3:
        raise MalformedRlp(f"bad hex-prefix flag {flag}")
    if flag & 1:
        return nibbles[1:], bool(flag & 2)
    if nibbles[1] != 0:
        raise MalformedRlp("even hex-prefix path with nonzero pad nibble")
    return nibbles[2:], bool(flag & 2)


def precompute_address(sender: bytes, nonce: int) -> bytes:
    """Address of the contract created by ``sender`` at ``nonce``."""
    if len(sender) != 20:
        raise ValueError("sender must be a 20-byte address")
    return keccak256(rlp_encode([sender, nonce]))[12:]
