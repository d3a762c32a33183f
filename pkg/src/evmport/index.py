"""Per-contract transaction index.

For one contract the index keeps every transaction that executed code in
the contract or in anything it depends on: the set of contracts grows to a
fixpoint over the scanned range, so replay sees every deployment and every
internal call. Entries live in ``<dir>/<address>.jsonl`` (append-only,
deduplicated by hash) beside a ``<address>.watermark`` file holding the last
fully scanned block.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional

from .chain import ChainError, TxInfo
from .reconstruct import JournalEntry, TransactionJournal

log = logging.getLogger(__name__)


class DeploymentNotFound(LookupError):
    pass


class BlockRangeUnavailable(ChainError):
    pass


class TransactionIndex:
    def __init__(self, directory):
        self.dir = Path(directory)
        self.dir.mkdir(parents=True, exist_ok=True)

    def _journal_path(self, contract: bytes) -> Path:
        return self.dir / f"0x{contract.hex()}.jsonl"

    def _watermark_path(self, contract: bytes) -> Path:
        return self.dir / f"0x{contract.hex()}.watermark"

    def entries(self, contract: bytes) -> list[dict]:
        path = self._journal_path(contract)
        if not path.exists():
            return []
        return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]

    def journal(self, contract: bytes) -> TransactionJournal:
        return TransactionJournal.from_json(self.entries(contract), contract)

    def watermark(self, contract: bytes) -> Optional[int]:
        path = self._watermark_path(contract)
        return int(path.read_text()) if path.exists() else None

    def append(self, contract: bytes, records: list[dict], watermark: int) -> int:
        seen = {e["hash"] for e in self.entries(contract)}
        fresh = [r for r in records if r["hash"] not in seen]
        with self._journal_path(contract).open("a") as fh:
            for r in fresh:
                fh.write(json.dumps(r, sort_keys=True) + "\n")
        current = self.watermark(contract)
        self._watermark_path(contract).write_text(str(max(watermark, current if current is not None else -1)))
        return len(fresh)


def _scan_block(chain, number: int) -> list[tuple[TxInfo, set, Optional[bytes], int]]:
    try:
        txs = chain.block_transactions(number)
    except ChainError as exc:
        raise BlockRangeUnavailable(f"block {number}: {exc}") from exc
    out = []
    for t in txs:
        receipt = chain.receipt(t.hash)
        touched = set(chain.touched_addresses(t.hash))
        if receipt.contract_address:
            touched.add(receipt.contract_address)
        out.append((t, touched, receipt.contract_address, receipt.status))
    return out


def index_transactions(
    chain,
    contract: bytes,
    index: TransactionIndex,
    from_block: int = 0,
    to_block: Optional[int] = None,
    workers: int = 4,
) -> TransactionJournal:
    """Scan ``[from_block, to_block]`` and append the contract's closure to ``index``.

    Safe to re-run: entries already present are skipped and the watermark
    only moves forward.
    """
    head = chain.block_number()
    if to_block is None:
        to_block = head
    if from_block < 0 or to_block > head or from_block > to_block:
        raise BlockRangeUnavailable(f"range {from_block}..{to_block} is outside 0..{head}")

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        scanned = [item for block in pool.map(lambda n: _scan_block(chain, n), range(from_block, to_block + 1)) for item in block]

    prior = index.entries(contract)
    members = {contract}
    for e in prior:
        members.update(bytes.fromhex(a[2:]) for a in e.get("touched", []))

    included: dict[bytes, tuple] = {}
    changed = True
    while changed:
        changed = False
        for item in scanned:
            t, touched, _, _ = item
            if t.hash in included or not (touched & members):
                continue
            included[t.hash] = item
            if not touched <= members:
                members |= touched
                changed = True

    deployed = any(created == contract for _, _, created, _ in included.values())
    if not deployed and not any(e.get("to") is None and e.get("created") == f"0x{contract.hex()}" for e in prior):
        raise DeploymentNotFound(f"no deployment of 0x{contract.hex()} in blocks {from_block}..{to_block}")

    records = []
    for t, touched, created, status in sorted(included.values(), key=lambda i: (i[0].block, i[0].index)):
        record = JournalEntry(t.sender, t.to, t.data, t.gas, t.nonce, t.block, t.index, status).to_json()
        record["hash"] = "0x" + t.hash.hex()
        record["touched"] = sorted("0x" + a.hex() for a in touched)
        if created:
            record["created"] = "0x" + created.hex()
        records.append(record)
    added = index.append(contract, records, to_block)
    log.info("indexed %d new transactions for 0x%s up to block %d", added, contract.hex(), to_block)
    return index.journal(contract)
