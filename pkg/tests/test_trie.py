from __future__ import annotations

import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

import trie_oracle
from conftest import FIXTURES
from evmport.encoding import keccak256, rlp_encode
from evmport.snapshot import StateSnapshot, ZeroValueInSnapshot
from evmport.trie import (
    EMPTY_ROOT,
    Account,
    BadProof,
    Branch,
    Extension,
    KeyAbsent,
    Leaf,
    SqliteNodeStore,
    Trie,
    encode_node,
    fixture_root,
    iter_items,
    iter_nodes,
    load_trie_fixtures,
    secure_storage_root,
    trie_delete,
    trie_get,
    trie_insert,
    trie_prove,
    trie_root,
    verify_proof,
)
from keccak_oracle import keccak256 as oracle_keccak

ALL_FIXTURES = load_trie_fixtures(FIXTURES / "trieanyorder.json") + load_trie_fixtures(FIXTURES / "trietest.json")


def build(mapping: dict):
    node = None
    for k, v in mapping.items():
        node = trie_insert(node, k, v)
    return node


def test_empty_root_matches_independent_keccak():
    assert EMPTY_ROOT == oracle_keccak(b"\x80")
    assert trie_root(None) == EMPTY_ROOT
    assert secure_storage_root(StateSnapshot()) == EMPTY_ROOT


@pytest.mark.parametrize("fixture", ALL_FIXTURES, ids=lambda f: f.name)
def test_community_vectors(fixture):
    assert fixture_root(fixture) == fixture.root


@pytest.mark.parametrize("fixture", ALL_FIXTURES, ids=lambda f: f.name)
def test_community_vectors_agree_with_bruteforce(fixture):
    final = {}
    for k, v in fixture.entries:
        if v:
            final[k] = v
        else:
            final.pop(k, None)
    assert trie_oracle.root(final) == fixture.root


keys = st.binary(min_size=0, max_size=6)
values = st.binary(min_size=1, max_size=40)
maps = st.dictionaries(keys, values, max_size=24)


@given(maps)
def test_root_matches_bruteforce_oracle(mapping):
    assert trie_root(build(mapping)) == trie_oracle.root(mapping)


@given(maps, st.randoms(use_true_random=False))
def test_root_independent_of_insertion_order(mapping, rnd):
    items = list(mapping.items())
    rnd.shuffle(items)
    assert trie_root(build(dict(items))) == trie_root(build(mapping))


@given(maps, st.lists(keys, max_size=10))
def test_delete_equals_never_inserted(mapping, doomed):
    node = build(mapping)
    for k in doomed:
        node = trie_delete(node, k)
    expected = {k: v for k, v in mapping.items() if k not in doomed}
    assert trie_root(node) == trie_root(build(expected))


@given(maps)
def test_trie_is_a_map(mapping):
    node = build(mapping)
    for k, v in mapping.items():
        assert trie_get(node, k) == v
    assert dict((bytes.fromhex("".join("%x" % n for n in path)) if path else b"", v)
                for path, v in iter_items(node)) == mapping


@given(maps, keys, values)
def test_update_touches_only_the_key_path(mapping, key, value):
    """Replacing one value leaves every subtree off the key's path identical."""
    before = build(mapping)
    after = trie_insert(before, key, value)
    key_path = key.hex()
    before_nodes = {tuple(p): encode_node(n) for p, n in iter_nodes(before)}
    for path, node in iter_nodes(after):
        p = "".join("%x" % x for x in path)
        if not key_path.startswith(p) and tuple(path) in before_nodes:
            assert encode_node(node) == before_nodes[tuple(path)]


def test_node_shapes():
    assert isinstance(build({b"a": b"1"}), Leaf)
    assert isinstance(build({b"ab": b"1", b"ac": b"2"}), Extension)
    assert isinstance(build({b"\x10": b"1", b"\x20": b"2"}), Branch)
    with pytest.raises(ValueError):
        Extension((), Leaf((1,), b"x"))


def test_small_nodes_are_inlined():
    node = build({b"\x01": b"a", b"\x02": b"b"})
    enc = encode_node(node)
    # Both leaves are tiny, so they appear inline rather than as 32-byte hashes.
    assert len(enc) < 64 and keccak256(encode_node(Leaf((1,), b"a"))) not in enc


@given(st.dictionaries(st.binary(min_size=1, max_size=8), st.binary(min_size=1, max_size=40), min_size=1, max_size=30), st.data())
def test_proofs_verify(mapping, data):
    node = build(mapping)
    key = data.draw(st.sampled_from(sorted(mapping)))
    proof = trie_prove(node, key)
    assert verify_proof(trie_root(node), key, proof) == mapping[key]


def test_proof_tamper_detected():
    rnd = random.Random(7)
    mapping = {rnd.randbytes(8): rnd.randbytes(40) for _ in range(50)}
    node = build(mapping)
    key = sorted(mapping)[10]
    proof = trie_prove(node, key)
    root = trie_root(node)
    for i in range(len(proof)):
        bad = list(proof)
        blob = bytearray(bad[i])
        blob[len(blob) // 2] ^= 1
        bad[i] = bytes(blob)
        with pytest.raises(BadProof):
            verify_proof(root, key, bad)
    with pytest.raises(BadProof):
        verify_proof(root, key, proof + [rlp_encode([b"\x20", b"junk" * 10])])
    with pytest.raises(BadProof):
        verify_proof(root, key, proof[:-1] if len(proof) > 1 else [])


def test_prove_absent_key():
    node = build({b"abc": b"1", b"abd": b"2"})
    with pytest.raises(KeyAbsent):
        trie_prove(node, b"zzz")


def test_sqlite_store_roundtrip(tmp_path):
    store = SqliteNodeStore(tmp_path / "nodes.db")
    rnd = random.Random(3)
    trie = Trie(store=store)
    mapping = {rnd.randbytes(32): rnd.randbytes(rnd.randint(1, 60)) for _ in range(200)}
    for k, v in mapping.items():
        trie[k] = v
    root = trie.commit()
    store.close()

    reopened = Trie.load(SqliteNodeStore(tmp_path / "nodes.db"), root)
    assert reopened.root_hash() == root
    for k, v in mapping.items():
        assert reopened.get(k) == v
    del reopened[next(iter(mapping))]
    assert reopened.root_hash() != root


def test_load_empty_root():
    assert Trie.load(SqliteNodeStore(":memory:"), EMPTY_ROOT).root_hash() == EMPTY_ROOT


@given(st.dictionaries(st.integers(0, 2**256 - 1), st.integers(1, 2**256 - 1), max_size=12))
def test_secure_storage_root_matches_oracle(storage):
    assert secure_storage_root(StateSnapshot(storage)) == trie_oracle.secure_storage_root(storage)


def test_secure_storage_root_rejects_zero_values():
    with pytest.raises(ZeroValueInSnapshot):
        secure_storage_root({1: 0})
    with pytest.raises(ZeroValueInSnapshot):
        StateSnapshot({1: 0})


def test_account_rlp_roundtrip():
    acct = Account(3, 10**18, secure_storage_root({0: 42}), keccak256(b"\x00"))
    assert Account.from_rlp(acct.rlp()) == acct
