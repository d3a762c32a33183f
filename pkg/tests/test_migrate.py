from __future__ import annotations

import pytest

from conftest import ALICE, BOB, DEPLOYER
from contracts import (
    SEL_SET_A,
    SEL_SET_REF_VAR,
    SEL_SET_VAR,
    call,
    referenced_runtime,
    simple_deploy,
    static_caller_runtime,
    wrap_constructor,
)
from evmport.chain import EmbeddedChain
from evmport.codegen import GasLimitExceeded
from evmport.encoding import precompute_address
from evmport.evm import DEFAULT_SCHEDULE
from evmport.index import TransactionIndex
from evmport.migrate import (
    AddressPredictionMismatch,
    CyclicDependency,
    Manifest,
    NotAContract,
    ReplaySource,
    ReusePolicy,
    StateVerdict,
    Strategy,
    UnmappedReference,
    contract_state,
    execute_migration,
    extract_dynamic_references,
    extract_static_references,
    is_address_shaped,
    manifest_from_plan,
    plan_migration,
    rewrite_references,
    verify_manifest,
    verify_migration,
)
from evmport.snapshot import StateSnapshot

# Below the single-deploy cost of the linked contract, so it needs two loads.
SMALL = DEFAULT_SCHEDULE.with_gas_limit(80_000)


def source_for(chain, tmp_path, name="idx"):
    return ReplaySource(chain, TransactionIndex(tmp_path / name))


def migrate(pair, tmp_path, schedule=DEFAULT_SCHEDULE, target=None, **plan_kwargs):
    source = source_for(pair.chain, tmp_path)
    plan = plan_migration(pair.simple, source, schedule, **plan_kwargs)
    target = target or EmbeddedChain(schedule)
    manifest = execute_migration(plan, target, DEPLOYER, schedule)
    return source, plan, target, manifest


def test_address_shape():
    assert is_address_shaped(1)
    assert is_address_shaped(2**160 - 1)
    assert not is_address_shaped(0)
    assert not is_address_shaped(2**160)


def test_reference_extraction(linked):
    code = linked.chain.get_code
    snap = linked.chain.get_storage(linked.simple)
    # Slot 0 holds 42, which looks like an address but has no code.
    assert extract_dynamic_references(snap, code) == [(2, linked.referenced)]
    caller = static_caller_runtime(linked.referenced)
    refs = extract_static_references(caller, code)
    assert len(refs) == 1 and caller[refs[0][0] : refs[0][0] + 20] == linked.referenced
    assert extract_static_references(static_caller_runtime(b"\x77" * 20), code) == []


def test_rewrite_requires_mapping(linked):
    snap = StateSnapshot({2: int.from_bytes(linked.referenced, "big")})
    with pytest.raises(UnmappedReference):
        rewrite_references(snap, b"", [(2, linked.referenced)], [], {})
    new = b"\x99" * 20
    out, _ = rewrite_references(snap, b"", [(2, linked.referenced)], [], {linked.referenced: new})
    assert out[2] == int.from_bytes(new, "big")


def test_plan_orders_dependencies_first(linked, tmp_path):
    plan = plan_migration(linked.simple, source_for(linked.chain, tmp_path))
    assert plan.order == [linked.referenced, linked.simple]
    assert plan.nodes[linked.simple].children == [linked.referenced]
    assert all(n.strategy == Strategy.SINGLE for n in plan.nodes.values())
    assert plan.total_gas() == sum(n.gas_estimate for n in plan.nodes.values())


def test_plan_single_node(linked, tmp_path):
    plan = plan_migration(linked.referenced, source_for(linked.chain, tmp_path))
    assert plan.order == [linked.referenced]
    assert plan.nodes[linked.referenced].children == []


def test_plan_rejects_non_contract(linked, tmp_path):
    with pytest.raises(NotAContract):
        plan_migration(BOB, source_for(linked.chain, tmp_path))


def test_plan_detects_cycle(linked, tmp_path):
    chain = linked.chain
    other = chain.send_transaction(ALICE, None, simple_deploy(linked.simple), 500_000).contract_address
    chain.send_transaction(BOB, linked.simple, call(SEL_SET_A, int.from_bytes(other, "big")), 100_000)
    with pytest.raises(CyclicDependency) as info:
        plan_migration(linked.simple, source_for(chain, tmp_path))
    assert info.value.cycle[0] == info.value.cycle[-1] == linked.simple
    assert other in info.value.cycle


def test_forced_single_over_limit(linked, tmp_path):
    with pytest.raises(GasLimitExceeded):
        plan_migration(linked.simple, source_for(linked.chain, tmp_path), SMALL, strategy=Strategy.SINGLE)


def test_auto_strategy_picks_proxy_when_too_big(linked, tmp_path):
    plan = plan_migration(linked.simple, source_for(linked.chain, tmp_path), SMALL)
    assert plan.nodes[linked.simple].strategy == Strategy.PROXY


def test_single_migration_verdicts(linked, tmp_path):
    source, plan, target, manifest = migrate(linked, tmp_path)
    assert manifest.complete
    new_ref = manifest.node(linked.referenced).target_address
    new_simple = manifest.node(linked.simple).target_address
    assert [new_ref, new_simple] == [precompute_address(DEPLOYER, 0), precompute_address(DEPLOYER, 1)]
    assert target.get_storage_at(new_simple, 2) == int.from_bytes(new_ref, "big")

    # The estimate is an upper bound that the real deploy never exceeds.
    for node in manifest.nodes:
        for tx in node.transactions:
            assert tx.gas_used <= tx.gas

    verdicts = verify_manifest(manifest, source, target)
    assert verdicts[linked.referenced].state == StateVerdict.ROOT_EQUAL
    root = verdicts[linked.simple]
    assert root.state == StateVerdict.VALUE_EQUAL and root.passed
    assert "0x" + linked.referenced.hex() in root.dependencies

    # Migrated contracts keep talking to each other through the rewritten reference.
    target.send_transaction(BOB, new_simple, call(SEL_SET_REF_VAR, 7), 100_000)
    assert target.get_storage_at(new_ref, 0) == 7
    assert linked.chain.get_storage_at(linked.referenced, 0) == 5


def test_proxy_migration_verdicts(linked, tmp_path):
    source, plan, target, manifest = migrate(linked, tmp_path, SMALL)
    node = manifest.node(linked.simple)
    assert node.strategy == Strategy.PROXY
    kinds = [t.kind for t in node.transactions]
    assert kinds[:3] == ["deploy_logic", "deploy_init", "deploy_proxy"] and kinds[-1] == "finalize"
    verdicts = verify_manifest(manifest, source, target)
    assert verdicts[linked.simple].state == StateVerdict.VALUE_EQUAL
    assert verdicts[linked.simple].passed
    target.send_transaction(BOB, node.target_address, call(SEL_SET_REF_VAR, 11), 70_000)
    assert target.get_storage_at(manifest.node(linked.referenced).target_address, 0) == 11


def test_static_reference_rewritten(tmp_path):
    chain = EmbeddedChain()
    callee = chain.send_transaction(ALICE, None, wrap_constructor(referenced_runtime()), 200_000).contract_address
    caller = chain.send_transaction(ALICE, None, wrap_constructor(static_caller_runtime(callee)), 200_000).contract_address
    chain.send_transaction(BOB, caller, call(SEL_SET_VAR, 3), 100_000)
    source = source_for(chain, tmp_path)
    plan = plan_migration(caller, source)
    assert plan.order == [callee, caller]
    target = EmbeddedChain()
    manifest = execute_migration(plan, target, DEPLOYER)
    new_callee, new_caller = manifest.node(callee).target_address, manifest.node(caller).target_address
    assert target.get_code(new_caller) == static_caller_runtime(new_callee)
    verdicts = verify_manifest(manifest, source, target)
    assert verdicts[caller].code_equal and verdicts[caller].passed
    target.send_transaction(BOB, new_caller, call(SEL_SET_VAR, 9), 100_000)
    assert target.get_storage_at(new_callee, 0) == 9


class CrashAfter:
    """Target wrapper that lands the n-th transaction and then dies before reporting it."""

    def __init__(self, chain, n):
        self.chain = chain
        self.n = n
        self.sent = 0

    def __getattr__(self, name):
        return getattr(self.chain, name)

    def send_transaction(self, *args):
        receipt = self.chain.send_transaction(*args)
        self.sent += 1
        if self.sent == self.n:
            raise KeyboardInterrupt("simulated crash")
        return receipt


def test_resume_after_crash_mid_load(linked, tmp_path):
    source = source_for(linked.chain, tmp_path)
    plan = plan_migration(linked.simple, source, SMALL)
    target = EmbeddedChain(SMALL)
    path = tmp_path / "manifest.json"
    manifest = manifest_from_plan(plan, deployer=DEPLOYER, gas_limit=SMALL.block_gas_limit)
    manifest.path = path
    crashing = CrashAfter(target, 5)  # referenced deploy, logic, init, proxy, first load
    with pytest.raises(KeyboardInterrupt):
        execute_migration(plan, crashing, DEPLOYER, SMALL, manifest)

    resumed = Manifest.load(path)
    assert not resumed.complete
    node = resumed.node(linked.simple)
    assert node.transactions[3].kind == "load" and node.transactions[3].status == "pending"
    remaining = sum(t.status != "confirmed" for t in node.transactions)
    counter = CrashAfter(target, -1)
    final = execute_migration(plan, counter, DEPLOYER, SMALL, resumed)
    assert final.complete
    # The load that landed before the crash is recognised, not re-sent.
    assert counter.sent == remaining - 1
    verdicts = verify_manifest(final, source, target)
    assert all(v.passed for v in verdicts.values())


def test_rerun_of_complete_manifest_sends_nothing(linked, tmp_path):
    source, plan, target, manifest = migrate(linked, tmp_path)
    counter = CrashAfter(target, -1)
    execute_migration(plan, counter, DEPLOYER, DEFAULT_SCHEDULE, manifest)
    assert counter.sent == 0


def test_reuse_policy_map(linked, tmp_path):
    target = EmbeddedChain()
    # A different sender, so the existing copy lives at a new address.
    existing = target.send_transaction(BOB, None, wrap_constructor(referenced_runtime()), 200_000).contract_address
    source = source_for(linked.chain, tmp_path)
    plan = plan_migration(
        linked.simple, source, policy=ReusePolicy.MAP, existing_map={linked.referenced: existing}
    )
    assert plan.nodes[linked.referenced].strategy == Strategy.REUSE
    manifest = execute_migration(plan, target, DEPLOYER)
    new_simple = manifest.node(linked.simple).target_address
    assert target.get_storage_at(new_simple, 2) == int.from_bytes(existing, "big")
    verdicts = verify_manifest(manifest, source, target)
    assert verdicts[linked.referenced].state == StateVerdict.UNCHECKED
    assert verdicts[linked.simple].state == StateVerdict.VALUE_EQUAL


def test_redeploy_policy_ignores_existing_map(linked, tmp_path):
    plan = plan_migration(
        linked.simple, source_for(linked.chain, tmp_path), existing_map={linked.referenced: b"\x01" * 20}
    )
    assert plan.nodes[linked.referenced].strategy == Strategy.SINGLE


def test_tampered_target_is_a_mismatch(linked, tmp_path):
    source, plan, target, manifest = migrate(linked, tmp_path)
    new_simple = manifest.node(linked.simple).target_address
    target.send_transaction(BOB, new_simple, call(SEL_SET_A, 99), 100_000)
    verdict = verify_manifest(manifest, source, target)[linked.simple]
    assert verdict.state == StateVerdict.MISMATCH and not verdict.passed
    assert "slot 0x0" in verdict.detail


def test_tampered_dependency_fails_the_root(linked, tmp_path):
    source, plan, target, manifest = migrate(linked, tmp_path)
    target.send_transaction(BOB, manifest.node(linked.referenced).target_address, call(SEL_SET_VAR, 1), 100_000)
    verdicts = verify_manifest(manifest, source, target)
    assert verdicts[linked.referenced].state == StateVerdict.MISMATCH
    assert verdicts[linked.simple].state == StateVerdict.VALUE_EQUAL
    assert not verdicts[linked.simple].passed


def test_verify_migration_direct():
    code = b"\x00"
    a = contract_state(code, StateSnapshot({1: 5}))
    assert verify_migration(a, contract_state(code, StateSnapshot({1: 5}))).state == StateVerdict.ROOT_EQUAL
    bad = verify_migration(a, contract_state(code, StateSnapshot({1: 5, 2: 1})))
    assert bad.state == StateVerdict.MISMATCH and "slot 0x2" in bad.detail
    assert not verify_migration(a, contract_state(b"\x01", StateSnapshot({1: 5}))).code_equal


class WrongAddresses:
    def __init__(self, chain):
        self.chain = chain

    def __getattr__(self, name):
        return getattr(self.chain, name)

    def send_transaction(self, *args):
        receipt = self.chain.send_transaction(*args)
        if receipt.contract_address:
            receipt.contract_address = b"\xee" * 20
        return receipt


def test_address_prediction_mismatch(linked, tmp_path):
    plan = plan_migration(linked.simple, source_for(linked.chain, tmp_path))
    with pytest.raises(AddressPredictionMismatch):
        execute_migration(plan, WrongAddresses(EmbeddedChain()), DEPLOYER)


def test_manifest_json_roundtrip(linked, tmp_path):
    _, _, _, manifest = migrate(linked, tmp_path)
    again = Manifest.from_json(manifest.to_json())
    assert again.to_json() == manifest.to_json()
