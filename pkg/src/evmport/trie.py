"""Modified Merkle Patricia Trie.

Nodes are immutable; every update returns a new root that shares the
untouched subtrees with the old one. Nodes whose RLP encoding is shorter
than 32 bytes are embedded in their parent instead of being hashed.
"""

from __future__ import annotations

import json
import sqlite3
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Mapping, Optional, Sequence, Union

from .encoding import (
    MalformedRlp,
    bytes_to_nibbles,
    decode_hex_prefix,
    hex_prefix,
    int_to_bytes,
    keccak256,
    rlp_decode,
    rlp_encode,
)
from .snapshot import ZeroValueInSnapshot

Nibbles = tuple

EMPTY_ROOT = keccak256(rlp_encode(b""))


class KeyAbsent(KeyError):
    pass


class BadProof(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Leaf:
    path: Nibbles
    value: bytes


@dataclass(frozen=True, eq=False)
class Extension:
    path: Nibbles
    child: "Node"

    def __post_init__(self):
        if not self.path:
            raise ValueError("extension path must be non-empty")


@dataclass(frozen=True, eq=False)
class Branch:
    children: tuple
    value: Optional[bytes] = None

    def __post_init__(self):
        if len(self.children) != 16:
            raise ValueError("branch needs 16 child slots")


Node = Union[Leaf, Extension, Branch]
EMPTY_CHILDREN = (None,) * 16


# -- encoding ---------------------------------------------------------------


def node_structure(node: Node) -> list:
    """The RLP structure of ``node`` with children already reduced to refs."""
    if isinstance(node, Leaf):
        return [hex_prefix(node.path, True), node.value]
    if isinstance(node, Extension):
        return [hex_prefix(node.path, False), node_ref(node.child)]
    return [node_ref(c) if c is not None else b"" for c in node.children] + [node.value or b""]


def encode_node(node: Node) -> bytes:
    cached = node.__dict__.get("_rlp")
    if cached is None:
        cached = rlp_encode(node_structure(node))
        object.__setattr__(node, "_rlp", cached)
    return cached


def node_ref(node: Node):
    """Inline structure when the encoding is < 32 bytes, else its hash."""
    enc = encode_node(node)
    if len(enc) < 32:
        return node_structure(node)
    return keccak256(enc)


def trie_root(node: Optional[Node]) -> bytes:
    if node is None:
        return EMPTY_ROOT
    return keccak256(encode_node(node))


# -- update -----------------------------------------------------------------


def _common_prefix(a: Sequence[int], b: Sequence[int]) -> int:
    n = 0
    for x, y in zip(a, b):
        if x != y:
            break
        n += 1
    return n


def _insert(node: Optional[Node], path: Nibbles, value: bytes) -> Node:
    if node is None:
        return Leaf(path, value)

    if isinstance(node, Leaf):
        if node.path == path:
            return Leaf(path, value)
        n = _common_prefix(node.path, path)
        children = list(EMPTY_CHILDREN)
        branch_value = None
        for rest, val in ((node.path[n:], node.value), (path[n:], value)):
            if rest:
                children[rest[0]] = Leaf(rest[1:], val)
            else:
                branch_value = val
        branch = Branch(tuple(children), branch_value)
        return Extension(path[:n], branch) if n else branch

    if isinstance(node, Extension):
        n = _common_prefix(node.path, path)
        if n == len(node.path):
            return Extension(node.path, _insert(node.child, path[n:], value))
        children = list(EMPTY_CHILDREN)
        ext_rest = node.path[n:]
        children[ext_rest[0]] = node.child if len(ext_rest) == 1 else Extension(ext_rest[1:], node.child)
        branch_value = None
        new_rest = path[n:]
        if new_rest:
            children[new_rest[0]] = Leaf(new_rest[1:], value)
        else:
            branch_value = value
        branch = Branch(tuple(children), branch_value)
        return Extension(path[:n], branch) if n else branch

    if not path:
        return Branch(node.children, value)
    children = list(node.children)
    children[path[0]] = _insert(children[path[0]], path[1:], value)
    return Branch(tuple(children), node.value)


def _join(prefix: Nibbles, child: Optional[Node]) -> Optional[Node]:
    """Re-attach ``child`` under ``prefix``, merging paths where possible."""
    if child is None:
        return None
    if isinstance(child, Leaf):
        return Leaf(prefix + child.path, child.value)
    if isinstance(child, Extension):
        return Extension(prefix + child.path, child.child)
    return Extension(prefix, child) if prefix else child


def _normalize_branch(children: list, value: Optional[bytes]) -> Optional[Node]:
    occupied = [i for i, c in enumerate(children) if c is not None]
    if not occupied:
        return Leaf((), value) if value else None
    if len(occupied) == 1 and not value:
        i = occupied[0]
        return _join((i,), children[i])
    return Branch(tuple(children), value)


def _delete(node: Optional[Node], path: Nibbles) -> Optional[Node]:
    if node is None:
        return None
    if isinstance(node, Leaf):
        return None if node.path == path else node
    if isinstance(node, Extension):
        k = len(node.path)
        if tuple(path[:k]) != node.path:
            return node
        child = _delete(node.child, path[k:])
        if child is node.child:
            return node
        return _join(node.path, child)
    children = list(node.children)
    if not path:
        if node.value is None:
            return node
        return _normalize_branch(children, None)
    old = children[path[0]]
    new = _delete(old, path[1:])
    if new is old:
        return node
    children[path[0]] = new
    return _normalize_branch(children, node.value)


def trie_insert(node: Optional[Node], key: bytes, value: bytes) -> Optional[Node]:
    """Return a new trie with ``key`` bound to ``value``; empty value deletes."""
    path = bytes_to_nibbles(key)
    if not value:
        return _delete(node, path)
    return _insert(node, path, bytes(value))


def trie_delete(node: Optional[Node], key: bytes) -> Optional[Node]:
    return _delete(node, bytes_to_nibbles(key))


def trie_get(node: Optional[Node], key: bytes) -> Optional[bytes]:
    path = bytes_to_nibbles(key)
    while node is not None:
        if isinstance(node, Leaf):
            return node.value if node.path == path else None
        if isinstance(node, Extension):
            k = len(node.path)
            if tuple(path[:k]) != node.path:
                return None
            node, path = node.child, path[k:]
        else:
            if not path:
                return node.value
            node, path = node.children[path[0]], path[1:]
    return None


def iter_nodes(node: Optional[Node], prefix: Nibbles = ()) -> Iterator[tuple[Nibbles, Node]]:
    """Yield ``(path-to-node, node)`` depth first."""
    if node is None:
        return
    yield prefix, node
    if isinstance(node, Extension):
        yield from iter_nodes(node.child, prefix + node.path)
    elif isinstance(node, Branch):
        for i, child in enumerate(node.children):
            yield from iter_nodes(child, prefix + (i,))


def iter_items(node: Optional[Node], prefix: Nibbles = ()) -> Iterator[tuple[Nibbles, bytes]]:
    for path, n in iter_nodes(node, prefix):
        if isinstance(n, Leaf):
            yield path + n.path, n.value
        elif isinstance(n, Branch) and n.value:
            yield path, n.value


# -- proofs -----------------------------------------------------------------


def trie_prove(node: Optional[Node], key: bytes) -> list[bytes]:
    """Hash-referenced node encodings from the root down to ``key``."""
    if trie_get(node, key) is None:
        raise KeyAbsent(key.hex())
    path = bytes_to_nibbles(key)
    proof = [encode_node(node)]
    while True:
        if isinstance(node, Leaf):
            break
        if isinstance(node, Extension):
            nxt, path = node.child, path[len(node.path):]
        else:
            if not path:
                break
            nxt, path = node.children[path[0]], path[1:]
        if len(encode_node(nxt)) >= 32:
            proof.append(encode_node(nxt))
        node = nxt
    return proof


def verify_proof(root: bytes, key: bytes, proof: Sequence[bytes]) -> bytes:
    """Walk ``proof`` from ``root`` along ``key`` and return the stored value."""
    db = {keccak256(p): bytes(p) for p in proof}
    used = set()

    def resolve(ref) -> list:
        if isinstance(ref, list):
            return ref
        if len(ref) != 32:
            raise BadProof("malformed child reference")
        if ref not in db:
            raise BadProof(f"missing node {ref.hex()}")
        used.add(ref)
        try:
            item = rlp_decode(db[ref])
        except MalformedRlp as exc:
            raise BadProof(f"undecodable node: {exc}") from None
        if not isinstance(item, list):
            raise BadProof("node is not a list")
        return item

    path = bytes_to_nibbles(key)
    item = resolve(bytes(root))
    while True:
        if len(item) == 17:
            if not path:
                value = item[16]
                break
            ref = item[path[0]]
            if ref == b"":
                raise BadProof("path diverges at branch")
            path = path[1:]
            item = resolve(ref)
        elif len(item) == 2:
            try:
                node_path, is_leaf = decode_hex_prefix(item[0])
            except MalformedRlp as exc:
                raise BadProof(str(exc)) from None
            if is_leaf:
                if tuple(path) != node_path:
                    raise BadProof("leaf path does not match key")
                value = item[1]
                break
            if tuple(path[: len(node_path)]) != node_path:
                raise BadProof("path diverges at extension")
            path = path[len(node_path):]
            item = resolve(item[1])
        else:
            raise BadProof("node has wrong arity")
    if not isinstance(value, bytes) or not value:
        raise BadProof("key has no value")
    if len(used) != len(db):
        raise BadProof("proof contains unreferenced nodes")
    return value


# -- storage tries ----------------------------------------------------------


def secure_storage_trie(snapshot: Mapping[int, int]) -> Optional[Node]:
    node = None
    for slot, value in snapshot.items():
        if value == 0:
            raise ZeroValueInSnapshot(f"zero value at slot {slot:#x}")
        node = _insert(node, bytes_to_nibbles(keccak256(slot.to_bytes(32, "big"))),
                       rlp_encode(int_to_bytes(value)))
    return node


def secure_storage_root(snapshot: Mapping[int, int]) -> bytes:
    """Storage root of an account whose storage is ``snapshot``."""
    return trie_root(secure_storage_trie(snapshot))


# -- node stores ------------------------------------------------------------


class MemoryNodeStore:
    def __init__(self):
        self._nodes: dict[bytes, bytes] = {}

    def get(self, digest: bytes) -> bytes:
        return self._nodes[digest]

    def put(self, digest: bytes, encoded: bytes) -> None:
        self._nodes[digest] = encoded

    def __contains__(self, digest: bytes) -> bool:
        return digest in self._nodes

    def __len__(self):
        return len(self._nodes)


class SqliteNodeStore:
    """On-disk node store with the same interface as :class:`MemoryNodeStore`."""

    def __init__(self, path):
        self._db = sqlite3.connect(str(path))
        self._db.execute("CREATE TABLE IF NOT EXISTS nodes (hash BLOB PRIMARY KEY, rlp BLOB NOT NULL)")

    def get(self, digest: bytes) -> bytes:
        row = self._db.execute("SELECT rlp FROM nodes WHERE hash = ?", (digest,)).fetchone()
        if row is None:
            raise KeyError(digest.hex())
        return bytes(row[0])

    def put(self, digest: bytes, encoded: bytes) -> None:
        self._db.execute("INSERT OR IGNORE INTO nodes VALUES (?, ?)", (digest, encoded))
        self._db.commit()

    def __contains__(self, digest: bytes) -> bool:
        return self._db.execute("SELECT 1 FROM nodes WHERE hash = ?", (digest,)).fetchone() is not None

    def __len__(self):
        return self._db.execute("SELECT COUNT(*) FROM nodes").fetchone()[0]

    def close(self):
        self._db.close()


def _from_structure(item, store) -> Optional[Node]:
    if isinstance(item, bytes):
        if item == b"":
            return None
        if len(item) != 32:
            raise MalformedRlp("child reference is neither inline nor a hash")
        item = rlp_decode(store.get(item))
    if len(item) == 17:
        children = tuple(_from_structure(c, store) for c in item[:16])
        return Branch(children, item[16] or None)
    path, is_leaf = decode_hex_prefix(item[0])
    if is_leaf:
        return Leaf(path, item[1])
    return Extension(path, _from_structure(item[1], store))


class Trie:
    """A mutable handle over an immutable root, optionally backed by a store."""

    def __init__(self, root: Optional[Node] = None, store=None):
        self.root = root
        self.store = store if store is not None else MemoryNodeStore()

    @classmethod
    def load(cls, store, root_hash: bytes) -> "Trie":
        if root_hash == EMPTY_ROOT:
            return cls(None, store)
        return cls(_from_structure(root_hash, store), store)

    def __setitem__(self, key: bytes, value: bytes):
        self.root = trie_insert(self.root, key, value)

    def __delitem__(self, key: bytes):
        self.root = trie_delete(self.root, key)

    def get(self, key: bytes) -> Optional[bytes]:
        return trie_get(self.root, key)

    def root_hash(self) -> bytes:
        return trie_root(self.root)

    def prove(self, key: bytes) -> list[bytes]:
        return trie_prove(self.root, key)

    def commit(self) -> bytes:
        """Persist every hash-referenced node and return the root hash."""
        for i, (_, node) in enumerate(iter_nodes(self.root)):
            enc = encode_node(node)
            if i == 0 or len(enc) >= 32:
                self.store.put(keccak256(enc), enc)
        return self.root_hash()


# -- community fixtures -----------------------------------------------------


@dataclass
class TrieFixture:
    name: str
    entries: list  # [(key, value-or-None)]
    root: bytes
    secure: bool = False


def _fixture_bytes(text: Optional[str]) -> Optional[bytes]:
    if text is None:
        return None
    if text.startswith("0x"):
        return bytes.fromhex(text[2:])
    return text.encode()


def load_trie_fixtures(path, secure: bool = False) -> list[TrieFixture]:
    """Read a community trie test-vector file.

    ``in`` is either a list of ``[key, value]`` pairs (applied in order,
    ``null`` deletes) or an object (order-independent). Strings with a
    ``0x`` prefix are hex, everything else is raw UTF-8.
    """
    raw = json.loads(Path(path).read_text())
    fixtures = []
    for name, case in raw.items():
        data = case["in"]
        pairs = data.items() if isinstance(data, dict) else data
        entries = [(_fixture_bytes(k), _fixture_bytes(v)) for k, v in pairs]
        fixtures.append(TrieFixture(name, entries, bytes.fromhex(case["root"][2:]), secure))
    return fixtures


def fixture_root(fixture: TrieFixture) -> bytes:
    node = None
    for key, value in fixture.entries:
        if fixture.secure:
            key = keccak256(key)
        node = trie_insert(node, key, value or b"")
    return trie_root(node)


# -- accounts ---------------------------------------------------------------

EMPTY_CODE_HASH = keccak256(b"")


@dataclass(frozen=True)
class Account:
    nonce: int = 0
    balance: int = 0
    storage_root: bytes = EMPTY_ROOT
    code_hash: bytes = EMPTY_CODE_HASH

    def rlp(self) -> bytes:
        return rlp_encode([self.nonce, self.balance, self.storage_root, self.code_hash])

    @classmethod
    def from_rlp(cls, data: bytes) -> "Account":
        nonce, balance, root, code_hash = rlp_decode(data)
        return cls(int.from_bytes(nonce, "big"), int.from_bytes(balance, "big"), root, code_hash)
