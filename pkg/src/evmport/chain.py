"""Chain adapters: an embedded single-node chain and a JSON-RPC client.

Both expose the same duck-typed surface used by the indexer, migrator and
verifier:

    chain_id() -> int
    block_number() -> int
    block_transactions(n) -> list[TxInfo]
    touched_addresses(tx_hash) -> set[bytes]
    get_code(address) / get_nonce(address) / get_storage_root(address)
    get_storage(address, keys=None) -> StateSnapshot
    trace_transaction(tx_hash) -> dict[address, TraceDiff]
    send_transaction(sender, to, data, gas) -> Receipt
"""

from __future__ import annotations

import json
import logging
import os
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

from .encoding import keccak256, precompute_address, rlp_encode
from .evm import (
    DEFAULT_SCHEDULE,
    AccountState,
    CallEvent,
    CreateEvent,
    EvmError,
    GasSchedule,
    WorldState,
    execute_deploy,
    execute_message,
)
from .reconstruct import JournalEntry
from .snapshot import StateSnapshot
from .trie import secure_storage_root

log = logging.getLogger(__name__)


class ChainError(RuntimeError):
    pass


class TransactionRejected(ChainError):
    pass


class UnknownTransaction(ChainError, LookupError):
    pass


def _h(b: Optional[bytes]) -> Optional[str]:
    return None if b is None else "0x" + b.hex()


def _b(s: Optional[str]) -> Optional[bytes]:
    if s is None:
        return None
    body = s[2:] if s.startswith("0x") else s
    if len(body) % 2:
        body = "0" + body
    return bytes.fromhex(body)


@dataclass
class TxInfo:
    """A transaction as seen by the indexer."""

    hash: bytes
    sender: bytes
    to: Optional[bytes]
    data: bytes
    gas: int
    nonce: int
    block: int
    index: int

    def journal_entry(self, status: Optional[int] = None) -> JournalEntry:
        return JournalEntry(self.sender, self.to, self.data, self.gas, self.nonce, self.block, self.index, status)


@dataclass
class Receipt:
    tx_hash: bytes
    block: int
    index: int
    status: int
    gas_used: int
    contract_address: Optional[bytes] = None
    touched: list = field(default_factory=list)
    writes: list = field(default_factory=list)  # (address, key, value)
    error: Optional[str] = None

    def to_json(self) -> dict:
        return {
            "tx_hash": _h(self.tx_hash),
            "block": self.block,
            "index": self.index,
            "status": self.status,
            "gas_used": self.gas_used,
            "contract_address": _h(self.contract_address),
            "touched": [_h(a) for a in self.touched],
            "writes": [[_h(a), hex(k), hex(v)] for a, k, v in self.writes],
            "error": self.error,
        }

    @classmethod
    def from_json(cls, d: dict) -> "Receipt":
        return cls(
            tx_hash=_b(d["tx_hash"]),
            block=d["block"],
            index=d["index"],
            status=d["status"],
            gas_used=d["gas_used"],
            contract_address=_b(d.get("contract_address")),
            touched=[_b(a) for a in d.get("touched", [])],
            writes=[(_b(a), int(k, 16), int(v, 16)) for a, k, v in d.get("writes", [])],
            error=d.get("error"),
        )


def transaction_hash(sender: bytes, nonce: int, to: Optional[bytes], data: bytes, gas: int, chain_id: int) -> bytes:
    return keccak256(rlp_encode([sender, nonce, to or b"", data, gas, chain_id]))


class EmbeddedChain:
    """In-process chain: one transaction per block, state persisted as JSON.

    With ``path`` set, the chain is rewritten after every transaction so a
    crash never loses an applied transaction.
    """

    def __init__(self, schedule: GasSchedule = DEFAULT_SCHEDULE, chain_id: int = 1337, path=None):
        self.schedule = schedule
        self._chain_id = chain_id
        self.path = Path(path) if path else None
        self.world = WorldState()
        self.blocks: list[list[TxInfo]] = [[]]  # genesis is empty
        self.receipts: dict[bytes, Receipt] = {}

    # -- queries ------------------------------------------------------------

    def chain_id(self) -> int:
        return self._chain_id

    def block_number(self) -> int:
        return len(self.blocks) - 1

    def block_transactions(self, number: int) -> list[TxInfo]:
        if not 0 <= number < len(self.blocks):
            raise ChainError(f"block {number} does not exist")
        return list(self.blocks[number])

    def receipt(self, tx_hash: bytes) -> Receipt:
        try:
            return self.receipts[tx_hash]
        except KeyError:
            raise UnknownTransaction(tx_hash.hex()) from None

    def transaction(self, tx_hash: bytes) -> TxInfo:
        r = self.receipt(tx_hash)
        return self.blocks[r.block][r.index]

    def touched_addresses(self, tx_hash: bytes) -> set:
        r = self.receipt(tx_hash)
        return set(r.touched)

    def trace_transaction(self, tx_hash: bytes) -> dict:
        out: dict = {}
        for address, key, value in self.receipt(tx_hash).writes:
            out.setdefault(address, []).append((key, value))
        return out

    def get_code(self, address: bytes) -> bytes:
        return self.world.code(address)

    def get_nonce(self, address: bytes) -> int:
        return self.world.nonce(address)

    def get_balance(self, address: bytes) -> int:
        return self.world.get(address).balance

    def get_storage(self, address: bytes, keys=None) -> StateSnapshot:
        snap = self.world.storage(address)
        if keys is None:
            return StateSnapshot(snap, self.block_number(), address)
        return StateSnapshot({k: snap[k] for k in keys if k in snap}, self.block_number(), address)

    def get_storage_at(self, address: bytes, key: int) -> int:
        return self.world.get(address).storage.get(key, 0)

    def get_storage_root(self, address: bytes) -> bytes:
        return secure_storage_root(self.world.get(address).storage)

    def get_account(self, address: bytes):
        return self.world.account(address)

    def is_destroyed(self, address: bytes) -> bool:
        return address in self.world.destroyed

    # -- mutation -----------------------------------------------------------

    def fund(self, address: bytes, amount: int) -> None:
        self.world.mutable(address).balance += amount
        self._persist()

    def send_transaction(self, sender: bytes, to: Optional[bytes], data: bytes, gas: int) -> Receipt:
        """Mine one block containing a single transaction.

        A reverted transaction still consumes its sender's nonce; its state
        changes are dropped and the receipt carries ``status=0``.
        """
        if len(sender) != 20 or (to is not None and len(to) != 20):
            raise TransactionRejected("addresses must be 20 bytes")
        if self.world.code(sender):
            raise TransactionRejected(f"sender {sender.hex()} is a contract")
        intrinsic = self.schedule.intrinsic_gas(data)
        if gas < intrinsic:
            raise TransactionRejected(f"gas {gas} below intrinsic cost {intrinsic}")
        if gas > self.schedule.block_gas_limit:
            raise TransactionRejected(f"gas {gas} exceeds block gas limit {self.schedule.block_gas_limit}")

        nonce = self.world.nonce(sender)
        number = len(self.blocks)
        tx_hash = transaction_hash(sender, nonce, to, data, gas, self._chain_id)
        info = TxInfo(tx_hash, sender, to, bytes(data), gas, nonce, number, 0)
        try:
            if to is None:
                result = execute_deploy(self.world, sender, data, gas - intrinsic, self.schedule)
            else:
                result = execute_message(self.world, sender, to, data, gas - intrinsic, self.schedule)
                result.world.mutable(sender).nonce = nonce + 1
        except EvmError as exc:
            self.world = self.world.copy()
            self.world.mutable(sender).nonce = nonce + 1
            # Tracers still report the top-level frame of a reverted transaction.
            frame = to if to is not None else precompute_address(sender, nonce)
            receipt = Receipt(tx_hash, number, 0, 0, intrinsic + exc.gas_used, touched=[frame], error=repr(exc))
        else:
            self.world = result.world
            touched = {e.to for e in result.trace if isinstance(e, CallEvent)}
            touched |= {e.address for e in result.trace if isinstance(e, CreateEvent)}
            receipt = Receipt(
                tx_hash,
                number,
                0,
                1,
                intrinsic + result.gas_used,
                contract_address=result.created,
                touched=sorted(touched),
                writes=[(w.address, w.key, w.value) for w in result.storage_writes()],
            )
        self.blocks.append([info])
        self.receipts[tx_hash] = receipt
        self._persist()
        return receipt

    # -- persistence ----------------------------------------------------------

    def to_json(self) -> dict:
        return {
            "chain_id": self._chain_id,
            "schedule": asdict(self.schedule),
            "accounts": {
                _h(addr): {
                    "nonce": a.nonce,
                    "balance": a.balance,
                    "code": _h(a.code),
                    "storage": {hex(k): hex(v) for k, v in sorted(a.storage.items())},
                }
                for addr, a in sorted(self.world.accounts.items())
                if not a.is_empty()
            },
            "destroyed": sorted(_h(a) for a in self.world.destroyed),
            "blocks": [
                [
                    {
                        "hash": _h(t.hash),
                        "from": _h(t.sender),
                        "to": _h(t.to),
                        "data": _h(t.data),
                        "gas": t.gas,
                        "nonce": t.nonce,
                    }
                    for t in block
                ]
                for block in self.blocks
            ],
            "receipts": [self.receipts[t.hash].to_json() for block in self.blocks for t in block],
        }

    @classmethod
    def from_json(cls, d: dict, path=None) -> "EmbeddedChain":
        chain = cls(GasSchedule(**d.get("schedule", {})), d.get("chain_id", 1337), path)
        accounts = {}
        for addr, a in d.get("accounts", {}).items():
            accounts[_b(addr)] = AccountState(
                a.get("nonce", 0),
                a.get("balance", 0),
                _b(a.get("code", "0x")),
                {int(k, 16): int(v, 16) for k, v in a.get("storage", {}).items()},
            )
        chain.world = WorldState(accounts, {_b(a) for a in d.get("destroyed", [])})
        chain.blocks = [
            [
                TxInfo(_b(t["hash"]), _b(t["from"]), _b(t["to"]), _b(t["data"]), t["gas"], t["nonce"], n, i)
                for i, t in enumerate(block)
            ]
            for n, block in enumerate(d.get("blocks", [[]]))
        ]
        chain.receipts = {}
        for r in d.get("receipts", []):
            receipt = Receipt.from_json(r)
            chain.receipts[receipt.tx_hash] = receipt
        return chain

    @classmethod
    def open(cls, path, create: bool = True, **kwargs) -> "EmbeddedChain":
        p = Path(path)
        if p.exists():
            return cls.from_json(json.loads(p.read_text()), p)
        if not create:
            raise ChainError(f"no chain file at {p}")
        chain = cls(path=p, **kwargs)
        chain._persist()
        return chain

    def save(self, path=None) -> None:
        target = Path(path) if path else self.path
        if target is None:
            raise ChainError("no path to save to")
        target.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=target.parent, prefix=target.name, suffix=".tmp")
        with os.fdopen(fd, "w") as fh:
            json.dump(self.to_json(), fh)
        os.replace(tmp, target)

    def _persist(self) -> None:
        if self.path is not None:
            self.save()
