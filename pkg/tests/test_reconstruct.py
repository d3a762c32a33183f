from __future__ import annotations

import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

import trie_oracle
from conftest import ALICE, BOB
from contracts import SEL_SET_A, SLOT_B13, call
from evmport.index import TransactionIndex, index_transactions
from evmport.reconstruct import (
    JournalEntry,
    MissingDeployment,
    NonHexValue,
    ParseError,
    ReplayDivergence,
    TransactionJournal,
    apply_diffs,
    dump_trace,
    ingest_trace_file,
    load_journal,
    parse_trace_document,
    replay_journal,
    save_journal,
    snapshot_root,
)
from evmport.snapshot import StateSnapshot

# keccak256(pad32(3) || pad32(1)), frozen from keccak_oracle
SLOT_B3 = 0x7DFE757ECD65CBD7922A9C0161E935DD7FDBCC0E999689C7D31633896B1FC60B


def journal_for(chain, contract, tmp_path):
    return index_transactions(chain, contract, TransactionIndex(tmp_path / "idx"))


def test_linked_pair_snapshot(linked, tmp_path):
    journal = journal_for(linked.chain, linked.simple, tmp_path)
    result = replay_journal(journal)
    ref = int.from_bytes(linked.referenced, "big")
    # constructor state plus b[3] = 9 from setB(3, 9)
    assert result.snapshot == StateSnapshot({0: 42, SLOT_B13: 21, 2: ref, SLOT_B3: 9})
    assert result.runtime_code == linked.chain.get_code(linked.simple)
    assert snapshot_root(result.snapshot) == linked.chain.get_storage_root(linked.simple)


def test_linked_pair_matches_source_chain(linked, tmp_path):
    journal = journal_for(linked.chain, linked.simple, tmp_path)
    result = replay_journal(journal)
    assert dict(result.snapshot) == linked.chain.get_storage(linked.simple)
    assert snapshot_root(result.snapshot) == trie_oracle.secure_storage_root(dict(result.snapshot))
    # The internal call into the referenced contract is part of the replay too.
    assert result.world.storage(linked.referenced) == linked.chain.get_storage(linked.referenced)
    assert result.world.storage(linked.referenced)[0] == 5


def test_diffs_rebuild_the_snapshot(linked, tmp_path):
    result = replay_journal(journal_for(linked.chain, linked.simple, tmp_path))
    assert apply_diffs(StateSnapshot(), result.diffs) == result.snapshot


def test_zero_write_deletes_slot(linked, tmp_path):
    linked.chain.send_transaction(BOB, linked.simple, call(SEL_SET_A, 0), 100_000)
    result = replay_journal(journal_for(linked.chain, linked.simple, tmp_path))
    assert 0 not in result.snapshot
    assert dict(result.snapshot) == linked.chain.get_storage(linked.simple)


def test_block_height_cut(linked, tmp_path):
    journal = journal_for(linked.chain, linked.simple, tmp_path)
    deploy_block = next(e.block for e in journal if e.is_deployment and e.sender == ALICE and e.block > 1)
    result = replay_journal(journal, block_height=deploy_block)
    ref = int.from_bytes(linked.referenced, "big")
    assert dict(result.snapshot) == {0: 42, SLOT_B13: 21, 2: ref}
    assert result.snapshot.block_height == deploy_block


def test_empty_journal_has_no_deployment():
    with pytest.raises(MissingDeployment):
        replay_journal(TransactionJournal([]))


def test_journal_without_target_deployment(linked, tmp_path):
    journal = journal_for(linked.chain, linked.simple, tmp_path)
    calls_only = TransactionJournal([e for e in journal if not e.is_deployment], linked.simple)
    with pytest.raises(MissingDeployment):
        replay_journal(calls_only)


def test_failed_transaction_skipped_or_divergent(linked, tmp_path):
    # A call with an unknown selector reverts on the source chain too.
    r = linked.chain.send_transaction(BOB, linked.simple, b"\xde\xad\xbe\xef", 100_000)
    assert r.status == 0
    journal = journal_for(linked.chain, linked.simple, tmp_path)
    result = replay_journal(journal)
    assert len(result.skipped) == 1
    assert dict(result.snapshot) == linked.chain.get_storage(linked.simple)

    lying = TransactionJournal(
        [JournalEntry(**{**e.__dict__, "status": 1}) if e in result.skipped else e for e in journal],
        linked.simple,
    )
    with pytest.raises(ReplayDivergence):
        replay_journal(lying)


def test_journal_file_roundtrip(linked, tmp_path):
    journal = journal_for(linked.chain, linked.simple, tmp_path)
    save_journal(journal, tmp_path / "j.json")
    again = load_journal(tmp_path / "j.json", linked.simple)
    assert list(again) == list(journal)
    assert replay_journal(again).snapshot == replay_journal(journal).snapshot


def test_journal_entry_rejects_bad_hex():
    with pytest.raises(NonHexValue):
        JournalEntry.from_json({"from": "0xzz", "to": None, "data": "0x", "gas": 1, "nonce": 0, "block": 0})


words = st.integers(0, 2**256 - 1)
trace_docs = st.lists(st.lists(st.tuples(words, words), max_size=6), max_size=6)


@given(trace_docs)
def test_trace_roundtrip_and_replay(diffs):
    doc = dump_trace(diffs)
    assert parse_trace_document(doc) == diffs
    expected = {}
    for d in diffs:
        for k, v in d:
            if v:
                expected[k] = v
            else:
                expected.pop(k, None)
    assert dict(apply_diffs(StateSnapshot(), diffs)) == expected


def test_trace_file_errors(tmp_path):
    path = tmp_path / "t.json"
    path.write_text(json.dumps([[{"key": "0x01", "value": "0xnothex"}]]))
    with pytest.raises(NonHexValue):
        ingest_trace_file(path)
    path.write_text("[[{")
    with pytest.raises(ParseError, match="line 1"):
        ingest_trace_file(path)
    path.write_text(json.dumps([[{"key": "0x" + "11" * 33, "value": "0x01"}]]))
    with pytest.raises(ParseError):
        ingest_trace_file(path)
    path.write_text(json.dumps({"key": "0x01"}))
    with pytest.raises(ParseError):
        ingest_trace_file(path)


def test_trace_file_ingest(tmp_path):
    path = tmp_path / "t.json"
    path.write_text(json.dumps([[{"key": "0x00", "value": "0x2a"}], [{"key": "0x00", "value": "0x00"}, {"key": "0x01", "value": "0x07"}]]))
    assert dict(apply_diffs(StateSnapshot(), ingest_trace_file(path))) == {1: 7}
