"""Trie root computed directly from the recursive definition over the full
key set. Shares no code with the package: own RLP, own Keccak."""

from __future__ import annotations

from keccak_oracle import keccak256


def rlp(item) -> bytes:
    if isinstance(item, bytes):
        if len(item) == 1 and item[0] < 0x80:
            return item
        return _prefix(len(item), 0x80) + item
    payload = b"".join(rlp(x) for x in item)
    return _prefix(len(payload), 0xC0) + payload


def _prefix(n: int, base: int) -> bytes:
    if n < 56:
        return bytes([base + n])
    ln = n.to_bytes((n.bit_length() + 7) // 8, "big")
    return bytes([base + 55 + len(ln)]) + ln


def _nibbles(b: bytes) -> list:
    return [x for byte in b for x in (byte >> 4, byte & 15)]


def _hp(nibs: list, leaf: bool) -> bytes:
    flag = (2 if leaf else 0) + (len(nibs) & 1)
    seq = [flag] + nibs if len(nibs) & 1 else [flag, 0] + nibs
    return bytes(seq[i] * 16 + seq[i + 1] for i in range(0, len(seq), 2))


def _structure(items: list, i: int):
    """``items``: [(nibbles, value)] sharing their first ``i`` nibbles."""
    if len(items) == 1:
        k, v = items[0]
        return [_hp(k[i:], True), v]
    j = i
    while all(len(k) > j for k, _ in items) and len({k[j] for k, _ in items}) == 1:
        j += 1
    if j > i:
        return [_hp(items[0][0][i:j], False), _ref(items, j)]
    children = []
    for n in range(16):
        sub = [(k, v) for k, v in items if len(k) > i and k[i] == n]
        children.append(_ref(sub, i + 1) if sub else b"")
    value = next((v for k, v in items if len(k) == i), b"")
    return children + [value]


def _ref(items, i):
    s = _structure(items, i)
    enc = rlp(s)
    return s if len(enc) < 32 else keccak256(enc)


def root(mapping: dict) -> bytes:
    items = sorted((_nibbles(k), v) for k, v in mapping.items() if v)
    if not items:
        return keccak256(rlp(b""))
    return keccak256(rlp(_structure(items, 0)))


def secure_storage_root(storage: dict) -> bytes:
    def strip(v: int) -> bytes:
        return v.to_bytes((v.bit_length() + 7) // 8, "big")

    return root({keccak256(k.to_bytes(32, "big")): rlp(strip(v)) for k, v in storage.items() if v})
