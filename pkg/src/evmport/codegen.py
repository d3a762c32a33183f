"""Deploy-code synthesis.

Single-transaction migrations embed the whole state as a constructor made of
PUSH/PUSH/SSTORE triples followed by a code-copy epilogue. States too large
for one block are split across a logic / initialization / proxy triple, the
proxy receiving its storage in chunks relayed by the initialization contract.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping

from .encoding import keccak256, precompute_address
from .evm import DEFAULT_SCHEDULE, GasSchedule
from .opcodes import OPCODES, PUSH1, Label, Push, Ref, assemble
from .snapshot import StateSnapshot
from .trie import secure_storage_root

__all__ = [
    "PREAMBLE",
    "LOAD_SELECTOR",
    "FINALIZE_SELECTOR",
    "GasLimitExceeded",
    "ChunkingImpossible",
    "OutOfRange",
    "DeployArtifact",
    "ProxyArtifactSet",
    "ChunkPlan",
    "byte_length",
    "push_opcode",
    "push_word",
    "store_sequence",
    "generate_deploy_code",
    "estimate_deploy_gas",
    "proxy_runtime",
    "init_runtime",
    "encode_load",
    "chunk_state",
    "generate_proxy_set",
    "precompute_address",
]

# Solidity's free-memory-pointer setup plus the non-payable guard.
PREAMBLE = bytes.fromhex("608060405234801561001057600080fd5b50")
# Instructions executed by PREAMBLE on a zero-value creation (the revert arm is skipped).
_PREAMBLE_STEPS = 10

LOAD_SELECTOR = 0x564D4947
FINALIZE_SELECTOR = int.from_bytes(keccak256(b"finalize()")[:4], "big")
_FORWARD_GAS = 0xFFFFFFFF


class GasLimitExceeded(ValueError):
    pass


class ChunkingImpossible(ValueError):
    pass


class OutOfRange(ValueError):
    pass


def _hex(b: bytes) -> str:
    return "0x" + b.hex()


def byte_length(word: int) -> int:
    """Bytes needed to push ``word``; zero still occupies one byte."""
    return max(1, (word.bit_length() + 7) // 8)


def push_opcode(n_bytes: int) -> int:
    if not 1 <= n_bytes <= 32:
        raise OutOfRange(f"PUSH width {n_bytes} outside 1..32")
    return PUSH1 + n_bytes - 1


def push_word(word: int) -> bytes:
    width = byte_length(word)
    return bytes([push_opcode(width)]) + word.to_bytes(width, "big")


def store_sequence(snapshot: Mapping[int, int]) -> bytes:
    """PUSH value, PUSH key, SSTORE for every entry, keys ascending."""
    out = bytearray()
    for key, value in sorted(snapshot.items()):
        if value == 0:
            raise ValueError(f"zero value at slot {key:#x}")
        out += push_word(value)
        out += push_word(key)
        out.append(OPCODES["SSTORE"])
    return bytes(out)


def _epilogue(runtime_len: int, runtime_offset: int) -> bytes:
    return (
        push_word(runtime_len)
        + bytes([OPCODES["DUP1"]])
        + push_word(runtime_offset)
        + push_word(0)
        + bytes([OPCODES["CODECOPY"]])
        + push_word(0)
        + bytes([OPCODES["RETURN"]])
    )


def _epilogue_steps() -> int:
    # PUSH len, DUP1, PUSH offset, PUSH 0, CODECOPY, PUSH 0 (RETURN is free)
    return 6


@dataclass
class DeployArtifact:
    deploy_code: bytes
    expected_runtime: bytes
    expected_root: bytes
    gas_estimate: int

    def to_json(self) -> dict:
        return {
            "deploy_code": _hex(self.deploy_code),
            "expected_runtime": _hex(self.expected_runtime),
            "expected_root": _hex(self.expected_root),
            "gas_estimate": self.gas_estimate,
        }

    @classmethod
    def from_json(cls, data: dict) -> "DeployArtifact":
        return cls(
            bytes.fromhex(data["deploy_code"][2:]),
            bytes.fromhex(data["expected_runtime"][2:]),
            bytes.fromhex(data["expected_root"][2:]),
            int(data["gas_estimate"]),
        )


def _assemble_deploy(snapshot: Mapping[int, int], runtime_code: bytes) -> bytes:
    head = PREAMBLE + store_sequence(snapshot)
    # The runtime offset depends on the epilogue's own width; iterate to a fixed point.
    offset = len(head)
    while True:
        tail = _epilogue(len(runtime_code), offset)
        if len(head) + len(tail) == offset:
            return head + tail + runtime_code
        offset = len(head) + len(tail)


def estimate_deploy_gas(
    snapshot: Mapping[int, int], runtime_code: bytes, schedule: GasSchedule, deploy_code: bytes | None = None
) -> int:
    """Gas for the whole creation transaction, exact under ``schedule``."""
    if deploy_code is None:
        deploy_code = _assemble_deploy(snapshot, runtime_code)
    execution = (
        _PREAMBLE_STEPS * schedule.step
        + len(snapshot) * (2 * schedule.step + schedule.sstore_set)
        + _epilogue_steps() * schedule.step
        + schedule.codecopy_per_word * ((len(runtime_code) + 31) // 32)
    )
    deposit = len(runtime_code) * schedule.code_deposit_per_byte
    return schedule.intrinsic_gas(deploy_code) + execution + deposit


def generate_deploy_code(
    snapshot: Mapping[int, int],
    runtime_code: bytes,
    schedule: GasSchedule = DEFAULT_SCHEDULE,
    enforce_limit: bool = True,
) -> DeployArtifact:
    """Build creation code that stores ``snapshot`` and installs ``runtime_code``."""
    runtime_code = bytes(runtime_code)
    deploy_code = _assemble_deploy(snapshot, runtime_code)
    gas = estimate_deploy_gas(snapshot, runtime_code, schedule, deploy_code)
    if enforce_limit and gas > schedule.block_gas_limit:
        raise GasLimitExceeded(
            f"single-transaction deploy needs {gas} gas, limit is {schedule.block_gas_limit}"
        )
    return DeployArtifact(deploy_code, runtime_code, secure_storage_root(snapshot), gas)


# -- proxy templates --------------------------------------------------------


def _proxy_segments(logic: bytes, init: bytes) -> dict[str, list]:
    logic_w = int.from_bytes(logic, "big")
    init_w = int.from_bytes(init, "big")
    return {
        "dispatch": [
            Push(0), "CALLDATALOAD", Push(0xE0), "SHR",
            Push(LOAD_SELECTOR, 4), "EQ", Ref("store"), "JUMPI",
        ],
        "fallback": [
            "CALLDATASIZE", Push(0), Push(0), "CALLDATACOPY",
            Push(0), Push(0), "CALLDATASIZE", Push(0), Push(logic_w, 20), Push(_FORWARD_GAS, 4),
            "DELEGATECALL",
            "RETURNDATASIZE", Push(0), Push(0), "RETURNDATACOPY",
            Ref("ok"), "JUMPI",
            "RETURNDATASIZE", Push(0), "REVERT",
            Label("ok"), "RETURNDATASIZE", Push(0), "RETURN",
        ],
        # Only the live initialization contract may write; once it has
        # self-destructed its code is gone and this guard can never pass.
        "guard": [
            Label("store"),
            "CALLER", Push(init_w, 20), "EQ",
            Push(init_w, 20), "EXTCODESIZE", "ISZERO", "ISZERO", "AND",
            Ref("auth"), "JUMPI",
            Push(0), "DUP1", "REVERT",
        ],
        # stack: [ptr, n]; pairs start at calldata offset 36
        "setup": [Label("auth"), Push(0x24), Push(4), "CALLDATALOAD"],
        "loop_head": [Label("loop"), "DUP1", "ISZERO", Ref("done"), "JUMPI"],
        "loop_body": [
            "DUP2", Push(0x20), "ADD", "CALLDATALOAD",
            "DUP3", "CALLDATALOAD",
            "SSTORE",
            Push(1), "SWAP1", "SUB",
            "SWAP1", Push(0x40), "ADD", "SWAP1",
            Ref("loop"), "JUMP",
        ],
        "done": [Label("done"), "STOP"],
    }


def _init_segments(proxy: bytes, deployer: bytes) -> dict[str, list]:
    proxy_w = int.from_bytes(proxy, "big")
    deployer_w = int.from_bytes(deployer, "big")
    return {
        "auth": [
            "CALLER", Push(deployer_w, 20), "EQ", Ref("authorized"), "JUMPI",
            Push(0), "DUP1", "REVERT",
        ],
        "dispatch": [
            Label("authorized"),
            Push(0), "CALLDATALOAD", Push(0xE0), "SHR",
            Push(FINALIZE_SELECTOR, 4), "EQ", Ref("finalize"), "JUMPI",
        ],
        "relay": [
            "CALLDATASIZE", Push(0), Push(0), "CALLDATACOPY",
            Push(0), Push(0), "CALLDATASIZE", Push(0), Push(0), Push(proxy_w, 20),
            Push(_FORWARD_GAS, 4), "CALL",
            Ref("relayed"), "JUMPI",
        ],
        "bubble": [
            "RETURNDATASIZE", Push(0), Push(0), "RETURNDATACOPY",
            "RETURNDATASIZE", Push(0), "REVERT",
        ],
        "relayed": [Label("relayed"), "STOP"],
        "finalize": [Label("finalize"), Push(deployer_w, 20), "SELFDESTRUCT"],
    }


def _flatten(segments: dict[str, list]) -> list:
    return [item for seg in segments.values() for item in seg]


def proxy_runtime(logic: bytes, init: bytes) -> bytes:
    """Runtime of the state-holding proxy.

    Calldata starting with ``LOAD_SELECTOR`` is a batch store
    (``selector || n || (key || value) * n``) accepted only from ``init``;
    everything else is delegated to ``logic``. A logic function whose
    selector collides with ``LOAD_SELECTOR`` is shadowed.
    """
    return assemble(_flatten(_proxy_segments(logic, init)))


def init_runtime(proxy: bytes, deployer: bytes) -> bytes:
    """Runtime of the initialization contract: relays load chunks from
    ``deployer`` to ``proxy`` and self-destructs on ``finalize()``."""
    return assemble(_flatten(_init_segments(proxy, deployer)))


def _steps(items: Iterable) -> int:
    return sum(1 for item in items if item not in ("STOP", "RETURN", "REVERT"))


_ZERO = b"\x00" * 20
_P = _proxy_segments(_ZERO, _ZERO)
_I = _init_segments(_ZERO, _ZERO)
# Steps of the load path through init and proxy, excluding the loop and the CALL.
_LOAD_FIXED_STEPS = (
    _steps(_I["auth"][:5]) + _steps(_I["dispatch"]) + _steps(_I["relay"]) - 1 + _steps(_I["relayed"])
    + _steps(_P["dispatch"]) + _steps(_P["guard"][:-3]) + _steps(_P["setup"])
    + _steps(_P["loop_head"]) + _steps(_P["done"])
)
_LOAD_PAIR_STEPS = _steps(_P["loop_head"]) + _steps(_P["loop_body"]) - 1
_FINALIZE_STEPS = _steps(_I["auth"][:5]) + _steps(_I["dispatch"]) + _steps(_I["finalize"])


def encode_load(pairs: list[tuple[int, int]]) -> bytes:
    body = b"".join(k.to_bytes(32, "big") + v.to_bytes(32, "big") for k, v in pairs)
    return LOAD_SELECTOR.to_bytes(4, "big") + len(pairs).to_bytes(32, "big") + body


def finalize_calldata() -> bytes:
    return FINALIZE_SELECTOR.to_bytes(4, "big")


def _load_fixed_gas(schedule: GasSchedule, n: int) -> int:
    header = LOAD_SELECTOR.to_bytes(4, "big") + n.to_bytes(32, "big")
    return (
        schedule.tx_base
        + schedule.calldata_cost(header)
        + _LOAD_FIXED_STEPS * schedule.step
        + schedule.call_base
    )


def _pair_gas(schedule: GasSchedule, key: int, value: int) -> int:
    data = key.to_bytes(32, "big") + value.to_bytes(32, "big")
    return schedule.calldata_cost(data) + _LOAD_PAIR_STEPS * schedule.step + schedule.sstore_set


def load_gas(pairs: list[tuple[int, int]], schedule: GasSchedule) -> int:
    """Upper bound on the gas of one load transaction (exact for fresh slots)."""
    return _load_fixed_gas(schedule, len(pairs)) + sum(_pair_gas(schedule, k, v) for k, v in pairs)


def finalize_gas(schedule: GasSchedule) -> int:
    return schedule.intrinsic_gas(finalize_calldata()) + _FINALIZE_STEPS * schedule.step


@dataclass
class ChunkPlan:
    chunks: list[list[tuple[int, int]]]
    per_chunk_gas: list[int]
    gas_limit: int

    def __len__(self):
        return len(self.chunks)


def chunk_state(snapshot: Mapping[int, int], schedule: GasSchedule = DEFAULT_SCHEDULE) -> ChunkPlan:
    """Greedy split of ``snapshot`` (keys ascending) into load transactions
    that each fit ``schedule.block_gas_limit``."""
    limit = schedule.block_gas_limit
    chunks: list[list[tuple[int, int]]] = []
    costs: list[int] = []
    current: list[tuple[int, int]] = []
    pair_total = 0
    for key, value in sorted(snapshot.items()):
        pair = _pair_gas(schedule, key, value)
        if _load_fixed_gas(schedule, 1) + pair > limit:
            raise ChunkingImpossible(
                f"slot {key:#x} alone needs {_load_fixed_gas(schedule, 1) + pair} gas, limit is {limit}"
            )
        if current and _load_fixed_gas(schedule, len(current) + 1) + pair_total + pair > limit:
            chunks.append(current)
            costs.append(_load_fixed_gas(schedule, len(current)) + pair_total)
            current, pair_total = [], 0
        current.append((key, value))
        pair_total += pair
    if current:
        chunks.append(current)
        costs.append(_load_fixed_gas(schedule, len(current)) + pair_total)
    return ChunkPlan(chunks, costs, limit)


@dataclass
class ProxyArtifactSet:
    logic_deploy: bytes
    init_deploy: bytes
    proxy_deploy: bytes
    load_transactions: list[bytes]
    finalize_transaction: bytes
    predicted_addresses: dict[str, bytes]
    expected_root: bytes = b""
    logic_runtime: bytes = b""
    init_runtime: bytes = b""
    proxy_runtime: bytes = b""
    deploy_gas: dict[str, int] = field(default_factory=dict)
    load_gas: list[int] = field(default_factory=list)
    finalize_gas: int = 0

    def transactions(self) -> list[tuple[str, bytes | None, bytes, int]]:
        """``(kind, to, data, gas)`` in sending order; ``to`` is None for creations."""
        init = self.predicted_addresses["init"]
        txs = [
            ("deploy_logic", None, self.logic_deploy, self.deploy_gas["logic"]),
            ("deploy_init", None, self.init_deploy, self.deploy_gas["init"]),
            ("deploy_proxy", None, self.proxy_deploy, self.deploy_gas["proxy"]),
        ]
        txs += [("load", init, data, gas) for data, gas in zip(self.load_transactions, self.load_gas)]
        txs.append(("finalize", init, self.finalize_transaction, self.finalize_gas))
        return txs

    def to_json(self) -> dict:
        return {
            "logic_deploy": _hex(self.logic_deploy),
            "init_deploy": _hex(self.init_deploy),
            "proxy_deploy": _hex(self.proxy_deploy),
            "load_transactions": [_hex(t) for t in self.load_transactions],
            "finalize_transaction": _hex(self.finalize_transaction),
            "predicted_addresses": {k: _hex(v) for k, v in self.predicted_addresses.items()},
            "expected_root": _hex(self.expected_root),
            "deploy_gas": dict(self.deploy_gas),
            "load_gas": list(self.load_gas),
            "finalize_gas": self.finalize_gas,
        }


def generate_proxy_set(
    snapshot: Mapping[int, int],
    logic_runtime: bytes,
    deployer: bytes,
    deployer_nonce: int,
    schedule: GasSchedule = DEFAULT_SCHEDULE,
) -> ProxyArtifactSet:
    """Logic, init and proxy creation code plus the load/finalize calldata.

    The three creations must be sent by ``deployer`` at nonces
    ``deployer_nonce``, ``+1`` and ``+2``; the init and proxy addresses are
    baked into each other's runtime from that assumption.
    """
    # Chunk feasibility depends only on the state; report it before sizing deploys.
    plan = chunk_state(snapshot, schedule)
    logic_addr = precompute_address(deployer, deployer_nonce)
    init_addr = precompute_address(deployer, deployer_nonce + 1)
    proxy_addr = precompute_address(deployer, deployer_nonce + 2)

    empty = StateSnapshot()
    logic = generate_deploy_code(empty, logic_runtime, schedule)
    init_code = init_runtime(proxy_addr, deployer)
    init = generate_deploy_code(empty, init_code, schedule)
    proxy_code = proxy_runtime(logic_addr, init_addr)
    proxy = generate_deploy_code(empty, proxy_code, schedule)
    return ProxyArtifactSet(
        logic_deploy=logic.deploy_code,
        init_deploy=init.deploy_code,
        proxy_deploy=proxy.deploy_code,
        load_transactions=[encode_load(chunk) for chunk in plan.chunks],
        finalize_transaction=finalize_calldata(),
        predicted_addresses={"logic": logic_addr, "init": init_addr, "proxy": proxy_addr},
        expected_root=secure_storage_root(snapshot),
        logic_runtime=bytes(logic_runtime),
        init_runtime=init_code,
        proxy_runtime=proxy_code,
        deploy_gas={"logic": logic.gas_estimate, "init": init.gas_estimate, "proxy": proxy.gas_estimate},
        load_gas=list(plan.per_chunk_gas),
        finalize_gas=finalize_gas(schedule),
    )
