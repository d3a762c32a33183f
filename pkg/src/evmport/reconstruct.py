"""Rebuild a contract's storage, keyed by pre-hash slots, from its history.

Two sources are supported: sequential replay of a transaction journal on
the embedded interpreter, and ingestion of storage diffs produced by an
external node's tracer.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

from .encoding import keccak256, rlp_encode
from .evm import DEFAULT_SCHEDULE, EvmError, GasSchedule, WorldState, execute_deploy, execute_message
from .snapshot import StateSnapshot
from .trie import secure_storage_root

log = logging.getLogger(__name__)

TraceDiff = list  # [(key, value)] in execution order


class MissingDeployment(LookupError):
    pass


class ReplayDivergence(RuntimeError):
    pass


class ParseError(ValueError):
    pass


class NonHexValue(ParseError):
    pass


def _hexbytes(text: Optional[str], what: str) -> bytes:
    if text is None:
        return b""
    if not isinstance(text, str) or not text.startswith("0x"):
        raise NonHexValue(f"{what}: expected 0x-prefixed hex, got {text!r}")
    body = text[2:]
    if len(body) % 2:
        body = "0" + body
    try:
        return bytes.fromhex(body)
    except ValueError:
        raise NonHexValue(f"{what}: not hex: {text!r}") from None


def _address(text: Optional[str], what: str) -> Optional[bytes]:
    if text is None:
        return None
    raw = _hexbytes(text, what)
    if len(raw) != 20:
        raise ParseError(f"{what}: address must be 20 bytes")
    return raw


@dataclass(frozen=True)
class JournalEntry:
    sender: bytes
    to: Optional[bytes]
    data: bytes
    gas: int
    nonce: int
    block: int
    index: int = 0
    status: Optional[int] = None

    @property
    def is_deployment(self) -> bool:
        return self.to is None

    @property
    def tx_hash(self) -> bytes:
        return keccak256(rlp_encode([self.sender, self.nonce, self.to or b"", self.data, self.gas]))

    def to_json(self) -> dict:
        out = {
            "from": "0x" + self.sender.hex(),
            "to": None if self.to is None else "0x" + self.to.hex(),
            "data": "0x" + self.data.hex(),
            "gas": self.gas,
            "nonce": self.nonce,
            "block": self.block,
            "index": self.index,
            "hash": "0x" + self.tx_hash.hex(),
        }
        if self.status is not None:
            out["status"] = self.status
        return out

    @classmethod
    def from_json(cls, obj: dict, where: str = "entry") -> "JournalEntry":
        try:
            return cls(
                sender=_address(obj["from"], f"{where}.from"),
                to=_address(obj.get("to"), f"{where}.to"),
                data=_hexbytes(obj.get("data", "0x"), f"{where}.data"),
                gas=int(obj["gas"]),
                nonce=int(obj["nonce"]),
                block=int(obj["block"]),
                index=int(obj.get("index", 0)),
                status=None if obj.get("status") is None else int(obj["status"]),
            )
        except KeyError as exc:
            raise ParseError(f"{where}: missing field {exc.args[0]!r}") from None
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ParseError):
                raise
            raise ParseError(f"{where}: {exc}") from None


@dataclass
class TransactionJournal:
    entries: list[JournalEntry] = field(default_factory=list)
    contract: Optional[bytes] = None

    def __post_init__(self):
        self.entries = sorted(self.entries, key=lambda e: (e.block, e.index))

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def upto(self, block_height: int) -> "TransactionJournal":
        return TransactionJournal([e for e in self.entries if e.block <= block_height], self.contract)

    def to_json(self) -> list:
        return [e.to_json() for e in self.entries]

    @classmethod
    def from_json(cls, items: list, contract: Optional[bytes] = None) -> "TransactionJournal":
        if not isinstance(items, list):
            raise ParseError("journal must be a JSON array")
        return cls([JournalEntry.from_json(o, f"entry {i}") for i, o in enumerate(items)], contract)


def load_journal(path, contract: Optional[bytes] = None) -> TransactionJournal:
    try:
        items = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"line {exc.lineno}: {exc.msg}") from None
    return TransactionJournal.from_json(items, contract)


def save_journal(journal: TransactionJournal, path) -> None:
    Path(path).write_text(json.dumps(journal.to_json(), indent=1))


@dataclass
class ReplayResult:
    snapshot: StateSnapshot
    runtime_code: bytes
    contract: bytes
    world: WorldState
    diffs: list  # one TraceDiff per successful transaction touching the contract
    skipped: list = field(default_factory=list)


def replay_journal(
    journal: TransactionJournal,
    schedule: GasSchedule = DEFAULT_SCHEDULE,
    contract: Optional[bytes] = None,
    block_height: Optional[int] = None,
) -> ReplayResult:
    """Replay ``journal`` from an empty world and return the contract's state.

    The contract is ``contract``, else ``journal.contract``, else whatever
    the first deployment entry creates. Each entry's recorded nonce is
    installed on its sender first, since the replay world only holds part
    of the sender's history. Reverted transactions are skipped with a
    warning unless the journal marks them successful.
    """
    if block_height is not None:
        journal = journal.upto(block_height)
    target = contract or journal.contract
    world = WorldState()
    created_any = False
    diffs: list = []
    skipped: list = []
    # Journals carry real-chain gas; replay must not reject on our block limit.
    replay_schedule = schedule.with_gas_limit(max(schedule.block_gas_limit, max((e.gas for e in journal), default=0)))

    for entry in journal:
        world.set_nonce(entry.sender, entry.nonce)
        exec_gas = entry.gas - schedule.intrinsic_gas(entry.data)
        try:
            if exec_gas < 0:
                raise EvmError("gas below intrinsic cost")
            if entry.is_deployment:
                result = execute_deploy(world, entry.sender, entry.data, exec_gas, replay_schedule)
                if target is None:
                    target = result.created
                if result.created == target:
                    created_any = True
            else:
                result = execute_message(world, entry.sender, entry.to, entry.data, exec_gas, replay_schedule)
                result.world.mutable(entry.sender).nonce = entry.nonce + 1
        except EvmError as exc:
            if entry.status == 1:
                raise ReplayDivergence(
                    f"transaction {entry.tx_hash.hex()} at block {entry.block} failed on replay: {exc!r}"
                ) from exc
            log.warning("skipping failed transaction at block %d index %d: %r", entry.block, entry.index, exc)
            skipped.append(entry)
            world = world.copy()
            world.mutable(entry.sender).nonce = entry.nonce + 1
            continue
        world = result.world
        if target is not None:
            writes = [(w.key, w.value) for w in result.storage_writes(target)]
            if writes:
                diffs.append(writes)

    if target is None or not created_any:
        raise MissingDeployment("journal does not contain the contract's deployment")
    height = block_height if block_height is not None else max((e.block for e in journal), default=0)
    snapshot = StateSnapshot(world.get(target).storage, height, target)
    return ReplayResult(snapshot, world.code(target), target, world, diffs, skipped)


def apply_diffs(base: StateSnapshot, diffs: Iterable[TraceDiff]) -> StateSnapshot:
    snapshot = base
    for diff in diffs:
        snapshot = snapshot.with_writes(diff)
    return snapshot


def _word(text, where: str) -> int:
    raw = _hexbytes(text, where)
    if len(raw) > 32:
        raise ParseError(f"{where}: longer than 32 bytes")
    return int.from_bytes(raw, "big")


def parse_trace_document(doc) -> list[TraceDiff]:
    if not isinstance(doc, list):
        raise ParseError("trace document must be a JSON array of transactions")
    diffs = []
    for i, tx in enumerate(doc):
        if not isinstance(tx, list):
            raise ParseError(f"transaction {i}: expected an array of writes")
        writes = []
        for j, w in enumerate(tx):
            where = f"transaction {i}, write {j}"
            if not isinstance(w, dict) or "key" not in w or "value" not in w:
                raise ParseError(f"{where}: expected an object with 'key' and 'value'")
            writes.append((_word(w["key"], f"{where}.key"), _word(w["value"], f"{where}.value")))
        diffs.append(writes)
    return diffs


def ingest_trace_file(path) -> list[TraceDiff]:
    """Read a trace file: ``[[{"key": "0x..", "value": "0x.."}, ...], ...]``."""
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"line {exc.lineno}: {exc.msg}") from None
    return parse_trace_document(doc)


def dump_trace(diffs: Iterable[TraceDiff]) -> list:
    return [
        [{"key": "0x" + k.to_bytes(32, "big").hex(), "value": "0x" + v.to_bytes(32, "big").hex()} for k, v in d]
        for d in diffs
    ]


def snapshot_root(snapshot: StateSnapshot) -> bytes:
    return secure_storage_root(snapshot)
