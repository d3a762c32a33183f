"""JSON-RPC chain adapter, and a JSON-RPC front end for :class:`EmbeddedChain`."""

from __future__ import annotations

import itertools
import json
import logging
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Optional

import requests

from .encoding import int_to_bytes, keccak256, rlp_encode
from .chain import ChainError, EmbeddedChain, Receipt, TxInfo, _b, _h
from .snapshot import StateSnapshot
from .trie import BadProof, trie_prove, secure_storage_trie, verify_proof

log = logging.getLogger(__name__)

METHOD_NOT_FOUND = -32601


class TransportError(ChainError):
    """The endpoint could not be reached or answered garbage."""


class RpcError(ChainError):
    def __init__(self, method: str, code: int, message: str):
        super().__init__(f"{method}: {message} (code {code})")
        self.method = method
        self.code = code


class MethodUnsupported(RpcError):
    pass


def _qty(value) -> int:
    if value is None:
        return 0
    return int(value, 16) if isinstance(value, str) else int(value)


class RpcChain:
    """Adapter over an Ethereum-style JSON-RPC endpoint.

    Transactions are submitted with ``eth_sendTransaction``, so the node must
    hold the sender's key (a development node or a signing proxy).
    """

    def __init__(self, url: str, timeout: float = 10.0, expected_chain_id: Optional[int] = None, session=None):
        self.url = url
        self.timeout = timeout
        self.session = session or requests.Session()
        self._ids = itertools.count(1)
        self._chain_id: Optional[int] = None
        self._trace_supported = True
        self.client_version = self.call("web3_clientVersion")
        cid = self.chain_id()
        if expected_chain_id is not None and cid != expected_chain_id:
            raise ChainError(f"endpoint reports chain id {cid}, expected {expected_chain_id}")

    def call(self, method: str, *params):
        body = {"jsonrpc": "2.0", "id": next(self._ids), "method": method, "params": list(params)}
        try:
            resp = self.session.post(self.url, json=body, timeout=self.timeout)
            resp.raise_for_status()
            reply = resp.json()
        except requests.RequestException as exc:
            raise TransportError(f"{method}: {exc}") from exc
        except ValueError as exc:
            raise TransportError(f"{method}: response is not JSON") from exc
        if "error" in reply and reply["error"] is not None:
            err = reply["error"]
            code, message = err.get("code", 0), err.get("message", "")
            if code == METHOD_NOT_FOUND:
                raise MethodUnsupported(method, code, message)
            raise RpcError(method, code, message)
        if "result" not in reply:
            raise TransportError(f"{method}: reply has neither result nor error")
        return reply["result"]

    def chain_id(self) -> int:
        if self._chain_id is None:
            self._chain_id = _qty(self.call("eth_chainId"))
        return self._chain_id

    def block_number(self) -> int:
        return _qty(self.call("eth_blockNumber"))

    def block_transactions(self, number: int) -> list[TxInfo]:
        block = self.call("eth_getBlockByNumber", hex(number), True)
        if block is None:
            raise ChainError(f"block {number} does not exist")
        out = []
        for t in block.get("transactions", []):
            out.append(
                TxInfo(
                    hash=_b(t["hash"]),
                    sender=_b(t["from"]),
                    to=_b(t.get("to")),
                    data=_b(t.get("input", "0x")),
                    gas=_qty(t["gas"]),
                    nonce=_qty(t["nonce"]),
                    block=_qty(t.get("blockNumber", hex(number))),
                    index=_qty(t.get("transactionIndex", "0x0")),
                )
            )
        return out

    def receipt(self, tx_hash: bytes) -> Receipt:
        r = self.call("eth_getTransactionReceipt", _h(tx_hash))
        if r is None:
            raise ChainError(f"no receipt for {tx_hash.hex()}")
        return Receipt(
            tx_hash=tx_hash,
            block=_qty(r.get("blockNumber")),
            index=_qty(r.get("transactionIndex")),
            status=_qty(r.get("status", "0x1")),
            gas_used=_qty(r.get("gasUsed")),
            contract_address=_b(r.get("contractAddress")),
        )

    def touched_addresses(self, tx_hash: bytes) -> set:
        """Every address whose code ran in the transaction.

        Uses the call tracer when available. Without it only the direct
        target or created contract is known, which misses internal calls.
        """
        r = self.receipt(tx_hash)
        fallback = {a for a in (r.contract_address,) if a}
        if self._trace_supported:
            try:
                frame = self.call("debug_traceTransaction", _h(tx_hash), {"tracer": "callTracer"})
            except MethodUnsupported:
                self._trace_supported = False
                log.warning("endpoint has no debug_traceTransaction; internal calls are not indexed")
            else:
                found = set(fallback)
                stack = [frame]
                while stack:
                    f = stack.pop()
                    if f.get("to"):
                        found.add(_b(f["to"]))
                    stack.extend(f.get("calls") or [])
                return found
        tx = self.call("eth_getTransactionByHash", _h(tx_hash))
        if tx and tx.get("to"):
            fallback.add(_b(tx["to"]))
        return fallback

    def trace_transaction(self, tx_hash: bytes) -> dict:
        """Net storage changes per address, from a prestate diff trace.

        A slot present before but absent after was cleared to zero.
        """
        diff = self.call(
            "debug_traceTransaction", _h(tx_hash), {"tracer": "prestateTracer", "tracerConfig": {"diffMode": True}}
        )
        pre, post = diff.get("pre", {}), diff.get("post", {})
        out = {}
        for addr in sorted(set(pre) | set(post)):
            before = {_qty(k): _qty(v) for k, v in (pre.get(addr, {}).get("storage") or {}).items()}
            after = {_qty(k): _qty(v) for k, v in (post.get(addr, {}).get("storage") or {}).items()}
            writes = [(k, after.get(k, 0)) for k in sorted(set(before) | set(after)) if after.get(k, 0) != before.get(k, 0)]
            if writes:
                out[_b(addr)] = writes
        return out

    def get_code(self, address: bytes) -> bytes:
        return _b(self.call("eth_getCode", _h(address), "latest"))

    def get_nonce(self, address: bytes) -> int:
        return _qty(self.call("eth_getTransactionCount", _h(address), "latest"))

    def get_storage_at(self, address: bytes, key: int) -> int:
        return _qty(self.call("eth_getStorageAt", _h(address), hex(key), "latest"))

    def get_proof(self, address: bytes, keys) -> dict:
        return self.call("eth_getProof", _h(address), [hex(k) for k in keys], "latest")

    def get_storage_root(self, address: bytes) -> bytes:
        return _b(self.get_proof(address, [])["storageHash"])

    def get_storage(self, address: bytes, keys=None) -> StateSnapshot:
        """Values at ``keys``, each checked against the storage root by proof."""
        if keys is None:
            raise ChainError("a JSON-RPC endpoint cannot enumerate storage; pass the keys to read")
        keys = sorted(keys)
        proof = self.get_proof(address, keys)
        root = _b(proof["storageHash"])
        values = {}
        for item in proof.get("storageProof", []):
            key, value = _qty(item["key"]), _qty(item["value"])
            if value:
                slot = key.to_bytes(32, "big")
                got = verify_proof(root, keccak256(slot), [_b(p) for p in item.get("proof", [])])
                if got != rlp_encode(int_to_bytes(value)):
                    raise BadProof(f"proof for slot {key:#x} proves a different value")
                values[key] = value
        return StateSnapshot(values, self.block_number(), address)

    def send_transaction(self, sender: bytes, to: Optional[bytes], data: bytes, gas: int) -> Receipt:
        tx = {"from": _h(sender), "data": _h(data), "gas": hex(gas)}
        if to is not None:
            tx["to"] = _h(to)
        tx_hash = _b(self.call("eth_sendTransaction", tx))
        return self.receipt(tx_hash)


# -- server -------------------------------------------------------------------


class _Unsupported(Exception):
    pass


class RpcBackend:
    """Answers JSON-RPC calls from an :class:`EmbeddedChain`."""

    def __init__(self, chain: EmbeddedChain, disabled=()):
        self.chain = chain
        self.disabled = set(disabled)
        self.lock = threading.Lock()

    def _latest(self, tag) -> None:
        if tag not in (None, "latest", "pending") and _qty(tag) != self.chain.block_number():
            raise ValueError("historical state is not available")

    def handle(self, method: str, params: list):
        if method in self.disabled:
            raise _Unsupported(method)
        fn = getattr(self, "rpc_" + method, None)
        if fn is None:
            raise _Unsupported(method)
        with self.lock:
            return fn(*params)

    def rpc_web3_clientVersion(self):
        return "evmport-embedded/1"

    def rpc_eth_chainId(self):
        return hex(self.chain.chain_id())

    def rpc_eth_blockNumber(self):
        return hex(self.chain.block_number())

    def _tx_json(self, t: TxInfo) -> dict:
        return {
            "hash": _h(t.hash),
            "from": _h(t.sender),
            "to": _h(t.to),
            "input": _h(t.data),
            "gas": hex(t.gas),
            "nonce": hex(t.nonce),
            "blockNumber": hex(t.block),
            "transactionIndex": hex(t.index),
        }

    def rpc_eth_getBlockByNumber(self, number, full=False):
        n = self.chain.block_number() if number == "latest" else _qty(number)
        if not 0 <= n <= self.chain.block_number():
            return None
        txs = self.chain.block_transactions(n)
        return {
            "number": hex(n),
            "transactions": [self._tx_json(t) if full else _h(t.hash) for t in txs],
        }

    def rpc_eth_getTransactionByHash(self, tx_hash):
        try:
            return self._tx_json(self.chain.transaction(_b(tx_hash)))
        except LookupError:
            return None

    def rpc_eth_getTransactionReceipt(self, tx_hash):
        try:
            r = self.chain.receipt(_b(tx_hash))
        except LookupError:
            return None
        return {
            "transactionHash": tx_hash,
            "blockNumber": hex(r.block),
            "transactionIndex": hex(r.index),
            "status": hex(r.status),
            "gasUsed": hex(r.gas_used),
            "contractAddress": _h(r.contract_address),
        }

    def rpc_eth_getCode(self, address, tag="latest"):
        self._latest(tag)
        return _h(self.chain.get_code(_b(address)))

    def rpc_eth_getTransactionCount(self, address, tag="latest"):
        self._latest(tag)
        return hex(self.chain.get_nonce(_b(address)))

    def rpc_eth_getStorageAt(self, address, key, tag="latest"):
        self._latest(tag)
        return "0x" + self.chain.get_storage_at(_b(address), _qty(key)).to_bytes(32, "big").hex()

    def rpc_eth_getProof(self, address, keys, tag="latest"):
        self._latest(tag)
        addr = _b(address)
        account = self.chain.get_account(addr)
        storage = self.chain.world.get(addr).storage
        trie = secure_storage_trie(storage)
        proofs = []
        for k in keys:
            key = _qty(k)
            value = storage.get(key, 0)
            nodes = trie_prove(trie, keccak256(key.to_bytes(32, "big"))) if value else []
            proofs.append({"key": hex(key), "value": hex(value), "proof": [_h(n) for n in nodes]})
        return {
            "address": address,
            "nonce": hex(account.nonce),
            "balance": hex(account.balance),
            "storageHash": _h(account.storage_root),
            "codeHash": _h(account.code_hash),
            "accountProof": [],
            "storageProof": proofs,
        }

    def rpc_debug_traceTransaction(self, tx_hash, options=None):
        options = options or {}
        r = self.chain.receipt(_b(tx_hash))
        t = self.chain.transaction(_b(tx_hash))
        if options.get("tracer") == "callTracer":
            top = {"type": "CREATE" if t.to is None else "CALL", "from": _h(t.sender), "to": _h(t.to or r.contract_address)}
            top["calls"] = [{"type": "CALL", "from": top["to"], "to": _h(a)} for a in r.touched if _h(a) != top["to"]]
            return top
        if options.get("tracer") == "prestateTracer" and (options.get("tracerConfig") or {}).get("diffMode"):
            # Rebuild net per-slot pre/post values from the ordered write log.
            pre: dict = {}
            post: dict = {}
            history = self._storage_before(r)
            for address, key, value in r.writes:
                a = _h(address)
                before = history.get(address, {}).get(key, 0)
                pre.setdefault(a, {}).setdefault(key, before)
                post.setdefault(a, {})[key] = value

            def fmt(d):
                return {
                    a: {"storage": {"0x" + k.to_bytes(32, "big").hex(): "0x" + v.to_bytes(32, "big").hex() for k, v in s.items() if v}}
                    for a, s in d.items()
                }

            return {"pre": fmt(pre), "post": fmt(post)}
        raise ValueError("unsupported tracer configuration")

    def _storage_before(self, receipt: Receipt) -> dict:
        state: dict = {}
        for block in self.chain.blocks[1 : receipt.block]:
            for t in block:
                for address, key, value in self.chain.receipt(t.hash).writes:
                    state.setdefault(address, {})[key] = value
        return state

    def rpc_eth_sendTransaction(self, tx):
        r = self.chain.send_transaction(_b(tx["from"]), _b(tx.get("to")), _b(tx.get("data", "0x")), _qty(tx["gas"]))
        return _h(r.tx_hash)


def _make_handler(backend: RpcBackend):
    class Handler(BaseHTTPRequestHandler):
        def log_message(self, fmt, *args):
            log.debug(fmt, *args)

        def do_POST(self):
            length = int(self.headers.get("Content-Length", 0))
            try:
                req = json.loads(self.rfile.read(length))
            except ValueError:
                return self._reply({"jsonrpc": "2.0", "id": None, "error": {"code": -32700, "message": "parse error"}})
            rid = req.get("id")
            try:
                result = backend.handle(req.get("method", ""), req.get("params") or [])
                body = {"jsonrpc": "2.0", "id": rid, "result": result}
            except _Unsupported as exc:
                body = {"jsonrpc": "2.0", "id": rid, "error": {"code": METHOD_NOT_FOUND, "message": f"method {exc} not found"}}
            except Exception as exc:  # reported to the client, not raised in the server thread
                body = {"jsonrpc": "2.0", "id": rid, "error": {"code": -32000, "message": str(exc)}}
            self._reply(body)

        def _reply(self, body):
            data = json.dumps(body).encode()
            self.send_response(200)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)

    return Handler


def make_server(chain: EmbeddedChain, host: str = "127.0.0.1", port: int = 0, disabled=()) -> ThreadingHTTPServer:
    server = ThreadingHTTPServer((host, port), _make_handler(RpcBackend(chain, disabled)))
    server.daemon_threads = True
    return server
