"""Plan, execute and verify the move of a contract and its dependencies.

Planning walks references out of the root contract: storage words that look
like addresses of deployed contracts, and ``PUSH20`` immediates in the code
that do the same. Dependencies are migrated first (post-order, ties broken
by ascending address) so every reference can be rewritten to its target
address before the referrer is deployed.
"""

from __future__ import annotations

import json
import logging
import os
import tempfile
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Mapping, Optional

from .chain import ChainError
from .codegen import (
    GasLimitExceeded,
    estimate_deploy_gas,
    generate_deploy_code,
    generate_proxy_set,
    proxy_runtime,
)
from .encoding import keccak256, precompute_address
from .evm import DEFAULT_SCHEDULE, GasSchedule
from .index import DeploymentNotFound, TransactionIndex, index_transactions
from .opcodes import PUSH20, disassemble
from .reconstruct import replay_journal
from .snapshot import StateSnapshot
from .trie import EMPTY_CODE_HASH, Account, secure_storage_root

log = logging.getLogger(__name__)

ADDRESS_MASK = (1 << 160) - 1
PLACEHOLDER = b"\xff" * 20

AddressMap = dict  # source address -> target address


class MigrationError(RuntimeError):
    pass


class NotAContract(MigrationError):
    pass


class CyclicDependency(MigrationError):
    def __init__(self, cycle: list):
        super().__init__("dependency cycle: " + " -> ".join("0x" + a.hex() for a in cycle))
        self.cycle = cycle


class LookupFailure(MigrationError):
    pass


class UnmappedReference(MigrationError):
    pass


class AddressPredictionMismatch(MigrationError):
    pass


class DeploymentFailure(MigrationError):
    pass


class ManifestCorrupt(MigrationError):
    pass


class Strategy(str, Enum):
    SINGLE = "single"
    PROXY = "proxy"
    REUSE = "reuse"


class ReusePolicy(str, Enum):
    REDEPLOY = "redeploy"
    MAP = "map"


def _h(b: Optional[bytes]) -> Optional[str]:
    return None if b is None else "0x" + b.hex()


def _b(s: Optional[str]) -> Optional[bytes]:
    return None if s is None else bytes.fromhex(s[2:] if s.startswith("0x") else s)


# -- references ----------------------------------------------------------------


def is_address_shaped(word: int) -> bool:
    return word >> 160 == 0 and word & ADDRESS_MASK != 0


def _has_code(lookup: Callable[[bytes], bytes], address: bytes) -> bool:
    try:
        return bool(lookup(address))
    except (ChainError, OSError) as exc:
        raise LookupFailure(f"code lookup for 0x{address.hex()} failed: {exc}") from exc


def extract_dynamic_references(snapshot: Mapping[int, int], lookup: Callable[[bytes], bytes]) -> list[tuple[int, bytes]]:
    """``(slot, address)`` for every stored word naming a deployed contract."""
    refs = []
    for key, value in sorted(snapshot.items()):
        if is_address_shaped(value):
            address = value.to_bytes(20, "big")
            if _has_code(lookup, address):
                refs.append((key, address))
    return refs


def extract_static_references(code: bytes, lookup: Callable[[bytes], bytes]) -> list[tuple[int, bytes]]:
    """``(immediate offset, address)`` for every PUSH20 naming a deployed contract."""
    refs = []
    for ins in disassemble(code):
        if ins.opcode == PUSH20 and any(ins.immediate) and ins.offset + 21 <= len(code):
            if _has_code(lookup, ins.immediate):
                refs.append((ins.offset + 1, ins.immediate))
    return refs


def rewrite_references(
    snapshot: Mapping[int, int],
    code: bytes,
    dynamic_refs: list[tuple[int, bytes]],
    static_refs: list[tuple[int, bytes]],
    address_map: Mapping[bytes, bytes],
) -> tuple[StateSnapshot, bytes]:
    def target(address: bytes) -> bytes:
        try:
            return address_map[address]
        except KeyError:
            raise UnmappedReference(f"no target address for 0x{address.hex()}") from None

    entries = dict(snapshot)
    for key, address in dynamic_refs:
        entries[key] = int.from_bytes(target(address), "big")
    out = bytearray(code)
    for offset, address in static_refs:
        out[offset : offset + 20] = target(address)
    height = getattr(snapshot, "block_height", 0)
    return StateSnapshot(entries, height, getattr(snapshot, "contract", None)), bytes(out)


# -- source state ----------------------------------------------------------------


class _CachedChain:
    """Memoizes the read calls the indexer repeats for every dependency."""

    def __init__(self, chain):
        self._chain = chain
        self._blocks: dict = {}
        self._receipts: dict = {}
        self._touched: dict = {}

    def __getattr__(self, name):
        return getattr(self._chain, name)

    def block_transactions(self, n):
        if n not in self._blocks:
            self._blocks[n] = self._chain.block_transactions(n)
        return self._blocks[n]

    def receipt(self, h):
        if h not in self._receipts:
            self._receipts[h] = self._chain.receipt(h)
        return self._receipts[h]

    def touched_addresses(self, h):
        if h not in self._touched:
            self._touched[h] = self._chain.touched_addresses(h)
        return self._touched[h]


class ReplaySource:
    """Contract code and storage at ``block_height``, rebuilt by replay.

    An address with no code at the chain head is treated as not a contract
    without indexing it, which keeps the reference scan cheap for the many
    small integers that happen to look like addresses.
    """

    def __init__(self, chain, index: TransactionIndex, block_height: Optional[int] = None, schedule: GasSchedule = DEFAULT_SCHEDULE):
        self.chain = _CachedChain(chain)
        self.index = index
        self.block_height = chain.block_number() if block_height is None else block_height
        self.schedule = schedule
        self._replays: dict = {}

    def _replay(self, address: bytes):
        if address not in self._replays:
            journal = index_transactions(self.chain, address, self.index, 0, self.block_height)
            self._replays[address] = replay_journal(journal, self.schedule, address, self.block_height)
        return self._replays[address]

    def code(self, address: bytes) -> bytes:
        if not self.chain.get_code(address):
            return b""
        try:
            return self._replay(address).runtime_code
        except DeploymentNotFound:
            return b""

    def snapshot(self, address: bytes) -> StateSnapshot:
        return self._replay(address).snapshot


# -- planning ----------------------------------------------------------------------


@dataclass
class PlanNode:
    source_address: bytes
    code: bytes
    snapshot: StateSnapshot
    strategy: Strategy
    static_refs: list = field(default_factory=list)
    dynamic_refs: list = field(default_factory=list)
    children: list = field(default_factory=list)
    gas_estimate: int = 0
    reuse_target: Optional[bytes] = None


@dataclass
class MigrationPlan:
    root: bytes
    block_height: int
    nodes: dict
    order: list
    policy: ReusePolicy = ReusePolicy.REDEPLOY

    def total_gas(self) -> int:
        return sum(self.nodes[a].gas_estimate for a in self.order)


def estimate_migration_gas(snapshot: Mapping[int, int], runtime_code: bytes, schedule: GasSchedule = DEFAULT_SCHEDULE) -> int:
    return estimate_deploy_gas(snapshot, runtime_code, schedule)


def choose_strategy(estimate: int, schedule: GasSchedule = DEFAULT_SCHEDULE) -> Strategy:
    return Strategy.SINGLE if estimate <= schedule.block_gas_limit else Strategy.PROXY


def _proxy_total(snapshot, code, schedule) -> int:
    artifacts = generate_proxy_set(snapshot, code, PLACEHOLDER, 0, schedule)
    return sum(gas for *_, gas in artifacts.transactions())


def plan_migration(
    root: bytes,
    source,
    schedule: GasSchedule = DEFAULT_SCHEDULE,
    policy: ReusePolicy = ReusePolicy.REDEPLOY,
    existing_map: Optional[Mapping[bytes, bytes]] = None,
    strategy: Optional[Strategy] = None,
    block_height: int = 0,
) -> MigrationPlan:
    """Build the dependency DAG below ``root`` and pick a strategy per node.

    ``source`` provides ``code(address)`` and ``snapshot(address)``. Gas
    estimates use an all-``0xff`` placeholder for every rewritten address,
    which can only over-estimate.
    """
    existing_map = dict(existing_map or {})
    nodes: dict = {}
    order: list = []

    def visit(address: bytes, path: list):
        if address in path:
            raise CyclicDependency(path[path.index(address):] + [address])
        if address in nodes:
            return
        code = source.code(address)
        if not code:
            raise NotAContract(f"0x{address.hex()} has no code at block {block_height}")
        if policy == ReusePolicy.MAP and address in existing_map:
            nodes[address] = PlanNode(address, code, StateSnapshot(), Strategy.REUSE, reuse_target=existing_map[address])
            order.append(address)
            return
        snapshot = source.snapshot(address)
        dynamic = extract_dynamic_references(snapshot, source.code)
        static = extract_static_references(code, source.code)
        children = sorted({a for _, a in dynamic} | {a for _, a in static})
        for child in children:
            visit(child, path + [address])
        placeholder = {a: PLACEHOLDER for a in children}
        snap_p, code_p = rewrite_references(snapshot, code, dynamic, static, placeholder)
        single = estimate_migration_gas(snap_p, code_p, schedule)
        chosen = strategy or choose_strategy(single, schedule)
        if chosen == Strategy.SINGLE and single > schedule.block_gas_limit:
            raise GasLimitExceeded(
                f"0x{address.hex()}: single-transaction deploy needs {single} gas, limit is {schedule.block_gas_limit}"
            )
        estimate = single if chosen == Strategy.SINGLE else _proxy_total(snap_p, code_p, schedule)
        nodes[address] = PlanNode(address, code, snapshot, chosen, static, dynamic, children, estimate)
        order.append(address)

    visit(root, [])
    return MigrationPlan(root, block_height, nodes, order, policy)


# -- manifest ------------------------------------------------------------------------


@dataclass
class ManifestTx:
    kind: str
    to: Optional[bytes]
    data: bytes
    gas: int
    predicted_address: Optional[bytes] = None
    status: str = "pending"
    tx_hash: Optional[bytes] = None
    gas_used: Optional[int] = None

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "to": _h(self.to),
            "data": _h(self.data),
            "gas": self.gas,
            "predicted_address": _h(self.predicted_address),
            "status": self.status,
            "tx_hash": _h(self.tx_hash),
            "gas_used": self.gas_used,
        }

    @classmethod
    def from_json(cls, d: dict) -> "ManifestTx":
        return cls(
            d["kind"], _b(d.get("to")), _b(d["data"]), d["gas"], _b(d.get("predicted_address")),
            d.get("status", "pending"), _b(d.get("tx_hash")), d.get("gas_used"),
        )


@dataclass
class ManifestNode:
    source_address: bytes
    strategy: Strategy
    gas_estimate: int
    source_root: bytes
    source_code_hash: bytes
    static_refs: list = field(default_factory=list)
    dynamic_refs: list = field(default_factory=list)
    children: list = field(default_factory=list)
    target_address: Optional[bytes] = None
    logic_address: Optional[bytes] = None
    init_address: Optional[bytes] = None
    expected_root: Optional[bytes] = None
    expected_code_hash: Optional[bytes] = None
    start_nonce: Optional[int] = None
    status: str = "planned"
    transactions: list = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "source_address": _h(self.source_address),
            "strategy": self.strategy.value,
            "gas_estimate": self.gas_estimate,
            "source_root": _h(self.source_root),
            "source_code_hash": _h(self.source_code_hash),
            "static_refs": [[o, _h(a)] for o, a in self.static_refs],
            "dynamic_refs": [[hex(k), _h(a)] for k, a in self.dynamic_refs],
            "children": [_h(a) for a in self.children],
            "target_address": _h(self.target_address),
            "logic_address": _h(self.logic_address),
            "init_address": _h(self.init_address),
            "expected_root": _h(self.expected_root),
            "expected_code_hash": _h(self.expected_code_hash),
            "start_nonce": self.start_nonce,
            "status": self.status,
            "transactions": [t.to_json() for t in self.transactions],
        }

    @classmethod
    def from_json(cls, d: dict) -> "ManifestNode":
        return cls(
            source_address=_b(d["source_address"]),
            strategy=Strategy(d["strategy"]),
            gas_estimate=d["gas_estimate"],
            source_root=_b(d["source_root"]),
            source_code_hash=_b(d["source_code_hash"]),
            static_refs=[(o, _b(a)) for o, a in d.get("static_refs", [])],
            dynamic_refs=[(int(k, 16), _b(a)) for k, a in d.get("dynamic_refs", [])],
            children=[_b(a) for a in d.get("children", [])],
            target_address=_b(d.get("target_address")),
            logic_address=_b(d.get("logic_address")),
            init_address=_b(d.get("init_address")),
            expected_root=_b(d.get("expected_root")),
            expected_code_hash=_b(d.get("expected_code_hash")),
            start_nonce=d.get("start_nonce"),
            status=d.get("status", "planned"),
            transactions=[ManifestTx.from_json(t) for t in d.get("transactions", [])],
        )


@dataclass
class Manifest:
    root: bytes
    block_height: int
    source_chain: str = ""
    target_chain: str = ""
    deployer: Optional[bytes] = None
    gas_limit: int = DEFAULT_SCHEDULE.block_gas_limit
    reuse_policy: ReusePolicy = ReusePolicy.REDEPLOY
    nodes: list = field(default_factory=list)
    verdicts: Optional[dict] = None
    path: Optional[Path] = None

    def node(self, address: bytes) -> Optional[ManifestNode]:
        for n in self.nodes:
            if n.source_address == address:
                return n
        return None

    @property
    def address_map(self) -> AddressMap:
        return {n.source_address: n.target_address for n in self.nodes if n.target_address and n.status == "done"}

    @property
    def complete(self) -> bool:
        return bool(self.nodes) and all(n.status == "done" for n in self.nodes)

    def to_json(self) -> dict:
        return {
            "version": 1,
            "root": _h(self.root),
            "block_height": self.block_height,
            "source_chain": self.source_chain,
            "target_chain": self.target_chain,
            "deployer": _h(self.deployer),
            "gas_limit": self.gas_limit,
            "reuse_policy": self.reuse_policy.value,
            "nodes": [n.to_json() for n in self.nodes],
            "address_map": {_h(k): _h(v) for k, v in self.address_map.items()},
            "complete": self.complete,
            "verdicts": self.verdicts,
        }

    @classmethod
    def from_json(cls, d: dict, path=None) -> "Manifest":
        try:
            return cls(
                root=_b(d["root"]),
                block_height=d["block_height"],
                source_chain=d.get("source_chain", ""),
                target_chain=d.get("target_chain", ""),
                deployer=_b(d.get("deployer")),
                gas_limit=d.get("gas_limit", DEFAULT_SCHEDULE.block_gas_limit),
                reuse_policy=ReusePolicy(d.get("reuse_policy", "redeploy")),
                nodes=[ManifestNode.from_json(n) for n in d.get("nodes", [])],
                verdicts=d.get("verdicts"),
                path=Path(path) if path else None,
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ManifestCorrupt(f"manifest is malformed: {exc!r}") from exc

    @classmethod
    def load(cls, path) -> "Manifest":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, ValueError) as exc:
            raise ManifestCorrupt(f"cannot read manifest {path}: {exc}") from exc
        return cls.from_json(data, path)

    def save(self, path=None) -> None:
        target = Path(path) if path else self.path
        if target is None:
            return
        target.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=target.parent, prefix=target.name, suffix=".tmp")
        with os.fdopen(fd, "w") as fh:
            json.dump(self.to_json(), fh, indent=1)
        os.replace(tmp, target)


def manifest_from_plan(plan: MigrationPlan, **kwargs) -> Manifest:
    manifest = Manifest(plan.root, plan.block_height, reuse_policy=plan.policy, **kwargs)
    for address in plan.order:
        node = plan.nodes[address]
        manifest.nodes.append(
            ManifestNode(
                source_address=address,
                strategy=node.strategy,
                gas_estimate=node.gas_estimate,
                source_root=secure_storage_root(node.snapshot),
                source_code_hash=keccak256(node.code),
                static_refs=list(node.static_refs),
                dynamic_refs=list(node.dynamic_refs),
                children=list(node.children),
                target_address=node.reuse_target,
            )
        )
    return manifest


# -- execution -------------------------------------------------------------------------


def _build_transactions(node: PlanNode, address_map, deployer: bytes, nonce: int, schedule: GasSchedule):
    snapshot, code = rewrite_references(node.snapshot, node.code, node.dynamic_refs, node.static_refs, address_map)
    root = secure_storage_root(snapshot)
    if node.strategy == Strategy.SINGLE:
        artifact = generate_deploy_code(snapshot, code, schedule)
        target = precompute_address(deployer, nonce)
        txs = [ManifestTx("deploy", None, artifact.deploy_code, artifact.gas_estimate, target)]
        return txs, {"target": target, "root": root, "code": code}
    artifacts = generate_proxy_set(snapshot, code, deployer, nonce, schedule)
    txs = []
    for kind, to, data, gas in artifacts.transactions():
        predicted = artifacts.predicted_addresses[kind.split("_", 1)[1]] if kind.startswith("deploy_") else None
        txs.append(ManifestTx(kind, to, data, gas, predicted))
    addrs = artifacts.predicted_addresses
    return txs, {"target": addrs["proxy"], "logic": addrs["logic"], "init": addrs["init"], "root": root, "code": code}


def execute_migration(
    plan: MigrationPlan,
    target,
    deployer: bytes,
    schedule: GasSchedule = DEFAULT_SCHEDULE,
    manifest: Optional[Manifest] = None,
) -> Manifest:
    """Send every planned transaction, recording progress in ``manifest``.

    The manifest is saved after each confirmed transaction. Passing back a
    partially executed manifest resumes: transactions already confirmed are
    skipped, and a transaction whose nonce the deployer has already used is
    taken as sent before an interruption.
    """
    if manifest is None:
        manifest = manifest_from_plan(plan, deployer=deployer, gas_limit=schedule.block_gas_limit)
    if [n.source_address for n in manifest.nodes] != plan.order:
        raise ManifestCorrupt("manifest nodes do not match the migration plan")
    if manifest.deployer is None:
        manifest.deployer = deployer
    elif manifest.deployer != deployer:
        raise ManifestCorrupt(f"manifest was started by deployer 0x{manifest.deployer.hex()}")

    for address in plan.order:
        node = plan.nodes[address]
        mnode = manifest.node(address)
        if mnode.status == "done":
            continue
        if node.strategy == Strategy.REUSE:
            if not target.get_code(node.reuse_target):
                raise DeploymentFailure(f"reused target 0x{node.reuse_target.hex()} has no code")
            mnode.target_address = node.reuse_target
            mnode.expected_code_hash = keccak256(target.get_code(node.reuse_target))
            mnode.status = "done"
            manifest.save()
            continue

        amap = manifest.address_map
        if mnode.start_nonce is None:
            mnode.start_nonce = target.get_nonce(deployer)
        txs, info = _build_transactions(node, amap, deployer, mnode.start_nonce, schedule)
        if mnode.transactions:
            if [(t.kind, t.to, t.data, t.gas) for t in mnode.transactions] != [(t.kind, t.to, t.data, t.gas) for t in txs]:
                raise ManifestCorrupt(f"recorded transactions for 0x{address.hex()} differ from the regenerated ones")
        else:
            mnode.transactions = txs
        mnode.target_address = info["target"]
        mnode.logic_address = info.get("logic")
        mnode.init_address = info.get("init")
        mnode.expected_root = info["root"]
        mnode.expected_code_hash = keccak256(info["code"])
        mnode.status = "in_progress"
        manifest.save()

        for i, tx in enumerate(mnode.transactions):
            if tx.status == "confirmed":
                continue
            nonce = target.get_nonce(deployer)
            expected = mnode.start_nonce + i
            if nonce > expected:
                log.warning("nonce %d already used; assuming %s for 0x%s was sent before an interruption", expected, tx.kind, address.hex())
                if tx.predicted_address is not None and not target.get_code(tx.predicted_address):
                    raise DeploymentFailure(f"{tx.kind} used nonce {expected} but left no code at {_h(tx.predicted_address)}")
                tx.status = "confirmed"
                manifest.save()
                continue
            if nonce < expected:
                raise ManifestCorrupt(f"deployer nonce {nonce} is behind the manifest ({expected})")
            receipt = target.send_transaction(deployer, tx.to, tx.data, tx.gas)
            tx.tx_hash, tx.gas_used = receipt.tx_hash, receipt.gas_used
            if not receipt.status:
                tx.status = "failed"
                manifest.save()
                raise DeploymentFailure(f"{tx.kind} for 0x{address.hex()} failed: {receipt.error or 'reverted'}")
            if tx.predicted_address is not None and receipt.contract_address != tx.predicted_address:
                tx.status = "failed"
                manifest.save()
                raise AddressPredictionMismatch(
                    f"{tx.kind} created {_h(receipt.contract_address)}, expected {_h(tx.predicted_address)}"
                )
            tx.status = "confirmed"
            manifest.save()
        mnode.status = "done"
        manifest.save()
    return manifest


# -- verification ---------------------------------------------------------------------------


class StateVerdict(str, Enum):
    ROOT_EQUAL = "RootEqual"
    VALUE_EQUAL = "ValueEqualModuloMap"
    MISMATCH = "Mismatch"
    UNCHECKED = "Unchecked"


@dataclass
class ContractState:
    account: Account
    snapshot: StateSnapshot
    code: bytes


@dataclass
class Verdict:
    code_equal: bool
    state: StateVerdict
    detail: Optional[str] = None
    dependencies: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        own = self.code_equal and self.state != StateVerdict.MISMATCH
        return own and all(v.passed for v in self.dependencies.values())

    @property
    def outcome(self) -> StateVerdict:
        """The state verdict, or ``Mismatch`` if code or a dependency failed."""
        return self.state if self.passed else StateVerdict.MISMATCH

    def to_json(self) -> dict:
        return {
            "outcome": self.outcome.value,
            "code_equal": self.code_equal,
            "state": self.state.value,
            "detail": self.detail,
            "passed": self.passed,
            "dependencies": {k: v.to_json() for k, v in sorted(self.dependencies.items())},
        }


def contract_state(code: bytes, snapshot: StateSnapshot, nonce: int = 1, balance: int = 0) -> ContractState:
    account = Account(nonce, balance, secure_storage_root(snapshot), keccak256(code) if code else EMPTY_CODE_HASH)
    return ContractState(account, snapshot, code)


def _code_verdict(source: bytes, target: bytes, address_map: Mapping[bytes, bytes]) -> tuple[bool, Optional[str]]:
    if source == target:
        return True, None
    if len(source) != len(target):
        return False, f"code length {len(target)} differs from source {len(source)}"
    expected = bytearray(source)
    for ins in disassemble(source):
        if ins.opcode == PUSH20 and ins.immediate in address_map and ins.offset + 21 <= len(source):
            expected[ins.offset + 1 : ins.offset + 21] = address_map[ins.immediate]
    for i, (a, b) in enumerate(zip(expected, target)):
        if a != b:
            return False, f"code differs at offset {i}"
    return True, None


def _state_verdict(source: ContractState, target: ContractState, address_map) -> tuple[StateVerdict, Optional[str]]:
    for label, st in (("source", source), ("target", target)):
        if secure_storage_root(st.snapshot) != st.account.storage_root:
            return StateVerdict.MISMATCH, f"{label} snapshot does not match its storage root"
    if source.account.storage_root == target.account.storage_root:
        return StateVerdict.ROOT_EQUAL, None
    for key in sorted(set(source.snapshot) | set(target.snapshot)):
        s, t = source.snapshot.get(key, 0), target.snapshot.get(key, 0)
        if s == t:
            continue
        if is_address_shaped(s):
            mapped = address_map.get(s.to_bytes(20, "big"))
            if mapped is not None and int.from_bytes(mapped, "big") == t:
                continue
        return StateVerdict.MISMATCH, f"slot {key:#x}: source {s:#x}, target {t:#x}"
    # Roots differ yet every slot matches: only possible through the map.
    return StateVerdict.VALUE_EQUAL, None


def verify_migration(source: ContractState, target: ContractState, address_map: Mapping[bytes, bytes] = None) -> Verdict:
    """Compare one migrated contract with its source.

    ``RootEqual`` when the storage roots match; ``ValueEqualModuloMap`` when
    they differ only in slots holding mapped addresses; otherwise
    ``Mismatch`` naming the first offending slot.
    """
    address_map = address_map or {}
    code_ok, code_detail = _code_verdict(source.code, target.code, address_map)
    if target.code and keccak256(target.code) != target.account.code_hash:
        code_ok, code_detail = False, "target code does not match its code hash"
    state, state_detail = _state_verdict(source, target, address_map)
    return Verdict(code_ok, state, code_detail or state_detail)


def _target_snapshot(target, address: bytes, keys) -> StateSnapshot:
    try:
        return target.get_storage(address)
    except ChainError:
        return target.get_storage(address, keys=keys)


def verify_manifest(manifest: Manifest, source, target) -> dict:
    """Verdicts for every node in ``manifest``, keyed by source address.

    ``source`` is a :class:`ReplaySource`-like reader; ``target`` a chain
    adapter. The root's verdict nests its dependencies'.
    """
    amap = manifest.address_map
    verdicts: dict = {}
    for node in manifest.nodes:
        src_code = source.code(node.source_address)
        if node.target_address is None or node.status != "done":
            verdicts[node.source_address] = Verdict(False, StateVerdict.MISMATCH, "node was not migrated")
            continue
        if node.strategy == Strategy.REUSE:
            ok, detail = _code_verdict(src_code, target.get_code(node.target_address), amap)
            verdicts[node.source_address] = Verdict(ok, StateVerdict.UNCHECKED, detail)
            continue

        src_snap = source.snapshot(node.source_address)
        src = contract_state(src_code, src_snap)
        tgt_snap = _target_snapshot(target, node.target_address, set(src_snap))
        tgt_root = target.get_storage_root(node.target_address)
        code_addr = node.logic_address if node.strategy == Strategy.PROXY else node.target_address
        tgt_code = target.get_code(code_addr)
        tgt = ContractState(Account(1, 0, tgt_root, keccak256(tgt_code) if tgt_code else EMPTY_CODE_HASH), tgt_snap, tgt_code)
        verdict = verify_migration(src, tgt, amap)

        if node.expected_root is not None and tgt_root != node.expected_root and verdict.state != StateVerdict.MISMATCH:
            verdict = Verdict(verdict.code_equal, StateVerdict.MISMATCH, "target storage root differs from the manifest's expected root")
        if node.expected_code_hash is not None and keccak256(tgt_code) != node.expected_code_hash and verdict.code_equal:
            verdict = Verdict(False, verdict.state, "target code differs from the manifest's expected code hash")
        if node.strategy == Strategy.PROXY:
            if target.get_code(node.target_address) != proxy_runtime(node.logic_address, node.init_address):
                verdict = Verdict(False, verdict.state, "proxy code is not the expected template")
            elif target.get_code(node.init_address):
                verdict = Verdict(False, verdict.state, "initializer still has code")
        verdicts[node.source_address] = verdict

    for node in manifest.nodes:
        v = verdicts[node.source_address]
        v.dependencies = {_h(c): verdicts[c] for c in node.children if c in verdicts}
    return verdicts


def verdicts_to_json(verdicts: dict) -> dict:
    return {_h(k): v.to_json() for k, v in sorted(verdicts.items())}
