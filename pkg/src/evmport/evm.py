"""A small EVM interpreter with simplified gas accounting and storage tracing.

Only the opcode subset needed by generated deploy code, selector dispatch
and the proxy templates is implemented; see :func:`supported_opcodes`.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Optional

from .encoding import keccak256, precompute_address
from .opcodes import NAMES, OPCODES, PUSH1, PUSH32, jump_destinations
from .snapshot import StateSnapshot
from .trie import EMPTY_CODE_HASH, Account, secure_storage_root

WORD = 2**256
MASK = WORD - 1
MAX_STACK = 1024
MAX_DEPTH = 1024
MEMORY_LIMIT = 1 << 25


@dataclass(frozen=True)
class GasSchedule:
    sstore_set: int = 20_000
    sstore_reset: int = 5_000
    step: int = 3
    codecopy_per_word: int = 3
    tx_base: int = 21_000
    tx_data_zero_byte: int = 4
    tx_data_nonzero_byte: int = 68
    code_deposit_per_byte: int = 200
    call_base: int = 700
    block_gas_limit: int = 8_000_000

    def __post_init__(self):
        for name, value in vars(self).items():
            if value < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.sstore_set < self.sstore_reset:
            raise ValueError("sstore_set must be >= sstore_reset")

    def calldata_cost(self, data: bytes) -> int:
        zeros = data.count(0)
        return zeros * self.tx_data_zero_byte + (len(data) - zeros) * self.tx_data_nonzero_byte

    def intrinsic_gas(self, data: bytes) -> int:
        return self.tx_base + self.calldata_cost(data)

    def with_gas_limit(self, limit: int) -> "GasSchedule":
        return replace(self, block_gas_limit=limit)


DEFAULT_SCHEDULE = GasSchedule()


# -- errors -----------------------------------------------------------------


class EvmError(Exception):
    """Exceptional halt. ``gas_used`` is filled in at the transaction boundary."""

    gas_used: int = 0


class OutOfGas(EvmError):
    pass


class StackUnderflow(EvmError):
    pass


class StackOverflow(EvmError):
    pass


class InvalidOpcode(EvmError):
    def __init__(self, opcode: int):
        super().__init__(f"invalid opcode 0x{opcode:02x}")
        self.opcode = opcode


class InvalidJump(EvmError):
    pass


class ReturnDataOutOfBounds(EvmError):
    pass


class StaticViolation(EvmError):
    """Reserved; no static-call context exists in the supported subset."""


class CreateCollision(EvmError):
    pass


class InsufficientBalance(EvmError):
    pass


class ExplicitRevert(EvmError):
    def __init__(self, return_data: bytes, gas_left: int = 0):
        super().__init__(f"reverted with {len(return_data)} bytes")
        self.return_data = return_data
        self.gas_left = gas_left


# -- trace ------------------------------------------------------------------


@dataclass(frozen=True)
class StorageWrite:
    address: bytes
    key: int
    value: int


@dataclass(frozen=True)
class CallEvent:
    kind: str
    sender: bytes
    to: bytes


@dataclass(frozen=True)
class CreateEvent:
    address: bytes


@dataclass(frozen=True)
class DestroyEvent:
    address: bytes


# -- world state ------------------------------------------------------------


@dataclass
class AccountState:
    nonce: int = 0
    balance: int = 0
    code: bytes = b""
    storage: dict = field(default_factory=dict)

    def clone(self) -> "AccountState":
        return AccountState(self.nonce, self.balance, self.code, dict(self.storage))

    def is_empty(self) -> bool:
        return not (self.nonce or self.balance or self.code or self.storage)


_EMPTY = AccountState()


class WorldState:
    """Accounts keyed by 20-byte address.

    ``copy`` is cheap: accounts are shared until one side writes to them.
    """

    def __init__(self, accounts=None, destroyed=None):
        self.accounts: dict[bytes, AccountState] = dict(accounts or {})
        self.destroyed: set[bytes] = set(destroyed or ())
        self.pending_destroy: set[bytes] = set()
        self._owned: set[bytes] = set()

    def copy(self) -> "WorldState":
        self._owned.clear()
        other = WorldState(self.accounts, self.destroyed)
        other.pending_destroy = set(self.pending_destroy)
        return other

    def get(self, address: bytes) -> AccountState:
        return self.accounts.get(address, _EMPTY)

    def mutable(self, address: bytes) -> AccountState:
        if address not in self._owned:
            current = self.accounts.get(address)
            self.accounts[address] = current.clone() if current else AccountState()
            self._owned.add(address)
        return self.accounts[address]

    def code(self, address: bytes) -> bytes:
        return self.get(address).code

    def nonce(self, address: bytes) -> int:
        return self.get(address).nonce

    def storage(self, address: bytes) -> StateSnapshot:
        return StateSnapshot(self.get(address).storage, contract=address)

    def account(self, address: bytes) -> Account:
        a = self.get(address)
        return Account(
            a.nonce,
            a.balance,
            secure_storage_root(a.storage),
            keccak256(a.code) if a.code else EMPTY_CODE_HASH,
        )

    def set_nonce(self, address: bytes, nonce: int) -> None:
        self.mutable(address).nonce = nonce

    def __eq__(self, other):
        if not isinstance(other, WorldState):
            return NotImplemented
        mine = {k: v for k, v in self.accounts.items() if not v.is_empty()}
        theirs = {k: v for k, v in other.accounts.items() if not v.is_empty()}
        return mine == theirs and self.destroyed == other.destroyed

    __hash__ = None


@dataclass
class ExecutionResult:
    world: WorldState
    return_data: bytes
    gas_used: int
    trace: list
    created: Optional[bytes] = None

    def storage_writes(self, address: Optional[bytes] = None) -> list[StorageWrite]:
        return [e for e in self.trace if isinstance(e, StorageWrite)
                and (address is None or e.address == address)]


# -- interpreter ------------------------------------------------------------


SUPPORTED = frozenset(OPCODES.values())
_ZERO_COST = frozenset({OPCODES["STOP"], OPCODES["RETURN"], OPCODES["REVERT"]})


def supported_opcodes() -> frozenset:
    return SUPPORTED


@lru_cache(maxsize=4096)
def _jumpdests(code: bytes) -> frozenset:
    return jump_destinations(code)


def _words(size: int) -> int:
    return (size + 31) // 32


def _to_address(word: int) -> bytes:
    return (word & ((1 << 160) - 1)).to_bytes(20, "big")


@dataclass
class _Frame:
    code: bytes
    address: bytes
    caller: bytes
    value: int
    calldata: bytes
    gas: int
    depth: int = 0


class Interpreter:
    def __init__(self, world: WorldState, schedule: GasSchedule = DEFAULT_SCHEDULE):
        self.world = world
        self.schedule = schedule
        self.trace: list = []

    def run(self, f: _Frame) -> tuple[bytes, int]:
        code = f.code
        n = len(code)
        sched = self.schedule
        step = sched.step
        stack: list[int] = []
        mem = bytearray()
        pc = 0
        gas = f.gas
        returndata = b""

        def pop():
            if not stack:
                raise StackUnderflow(f"empty stack at pc {pc}")
            return stack.pop()

        def push(v):
            if len(stack) >= MAX_STACK:
                raise StackOverflow(f"stack overflow at pc {pc}")
            stack.append(v)

        def touch(offset, size):
            if size == 0:
                return
            end = offset + size
            if end > MEMORY_LIMIT:
                raise OutOfGas("memory limit exceeded")
            if len(mem) < end:
                mem.extend(bytes(_words(end) * 32 - len(mem)))

        def copy_into(dest, src: bytes, offset, size):
            touch(dest, size)
            chunk = src[offset : offset + size] if offset < len(src) else b""
            mem[dest : dest + size] = chunk.ljust(size, b"\x00")

        while True:
            op = code[pc] if pc < n else 0
            if op not in SUPPORTED:
                raise InvalidOpcode(op)
            if op not in _ZERO_COST and op not in (0x55, 0xF1, 0xF4):
                if gas < step:
                    raise OutOfGas(f"out of gas at pc {pc} ({NAMES[op]})")
                gas -= step

            if PUSH1 <= op <= PUSH32:
                width = op - PUSH1 + 1
                push(int.from_bytes(code[pc + 1 : pc + 1 + width].ljust(width, b"\x00"), "big"))
                pc += 1 + width
                continue
            if 0x80 <= op <= 0x8F:
                depth = op - 0x7F
                if len(stack) < depth:
                    raise StackUnderflow(f"DUP{depth} at pc {pc}")
                push(stack[-depth])
            elif 0x90 <= op <= 0x9F:
                depth = op - 0x8F
                if len(stack) < depth + 1:
                    raise StackUnderflow(f"SWAP{depth} at pc {pc}")
                stack[-1], stack[-1 - depth] = stack[-1 - depth], stack[-1]
            elif op == 0x00:
                return b"", gas
            elif op == 0x01:
                push((pop() + pop()) & MASK)
            elif op == 0x02:
                push((pop() * pop()) & MASK)
            elif op == 0x03:
                a, b = pop(), pop()
                push((a - b) & MASK)
            elif op == 0x04:
                a, b = pop(), pop()
                push(a // b if b else 0)
            elif op == 0x10:
                a, b = pop(), pop()
                push(int(a < b))
            elif op == 0x11:
                a, b = pop(), pop()
                push(int(a > b))
            elif op == 0x14:
                push(int(pop() == pop()))
            elif op == 0x15:
                push(int(pop() == 0))
            elif op == 0x16:
                push(pop() & pop())
            elif op == 0x17:
                push(pop() | pop())
            elif op == 0x19:
                push(pop() ^ MASK)
            elif op == 0x1A:
                i, x = pop(), pop()
                push((x >> (8 * (31 - i))) & 0xFF if i < 32 else 0)
            elif op == 0x1B:
                shift, value = pop(), pop()
                push((value << shift) & MASK if shift < 256 else 0)
            elif op == 0x1C:
                shift, value = pop(), pop()
                push(value >> shift if shift < 256 else 0)
            elif op == 0x20:
                offset, size = pop(), pop()
                touch(offset, size)
                push(int.from_bytes(keccak256(bytes(mem[offset : offset + size])), "big"))
            elif op == 0x33:
                push(int.from_bytes(f.caller, "big"))
            elif op == 0x34:
                push(f.value)
            elif op == 0x35:
                i = pop()
                chunk = f.calldata[i : i + 32] if i < len(f.calldata) else b""
                push(int.from_bytes(chunk.ljust(32, b"\x00"), "big"))
            elif op == 0x36:
                push(len(f.calldata))
            elif op == 0x37:
                dest, offset, size = pop(), pop(), pop()
                copy_into(dest, f.calldata, offset, size)
            elif op == 0x38:
                push(n)
            elif op == 0x39:
                dest, offset, size = pop(), pop(), pop()
                extra = sched.codecopy_per_word * _words(size)
                if gas < extra:
                    raise OutOfGas(f"CODECOPY at pc {pc}")
                gas -= extra
                copy_into(dest, code, offset, size)
            elif op == 0x3B:
                push(len(self.world.code(_to_address(pop()))))
            elif op == 0x3C:
                addr, dest, offset, size = _to_address(pop()), pop(), pop(), pop()
                extra = sched.codecopy_per_word * _words(size)
                if gas < extra:
                    raise OutOfGas(f"EXTCODECOPY at pc {pc}")
                gas -= extra
                copy_into(dest, self.world.code(addr), offset, size)
            elif op == 0x3D:
                push(len(returndata))
            elif op == 0x3E:
                dest, offset, size = pop(), pop(), pop()
                if offset + size > len(returndata):
                    raise ReturnDataOutOfBounds(f"RETURNDATACOPY at pc {pc}")
                copy_into(dest, returndata, offset, size)
            elif op == 0x50:
                pop()
            elif op == 0x51:
                offset = pop()
                touch(offset, 32)
                push(int.from_bytes(mem[offset : offset + 32], "big"))
            elif op == 0x52:
                offset, value = pop(), pop()
                touch(offset, 32)
                mem[offset : offset + 32] = value.to_bytes(32, "big")
            elif op == 0x54:
                push(self.world.get(f.address).storage.get(pop(), 0))
            elif op == 0x55:
                key, value = pop(), pop()
                current = self.world.get(f.address).storage.get(key, 0)
                cost = sched.sstore_set if current == 0 and value != 0 else sched.sstore_reset
                if gas < cost:
                    raise OutOfGas(f"SSTORE at pc {pc}")
                gas -= cost
                storage = self.world.mutable(f.address).storage
                if value:
                    storage[key] = value
                else:
                    storage.pop(key, None)
                self.trace.append(StorageWrite(f.address, key, value))
            elif op == 0x56:
                dest = pop()
                if dest not in _jumpdests(code):
                    raise InvalidJump(f"jump to {dest} at pc {pc}")
                pc = dest
                continue
            elif op == 0x57:
                dest, cond = pop(), pop()
                if cond:
                    if dest not in _jumpdests(code):
                        raise InvalidJump(f"jump to {dest} at pc {pc}")
                    pc = dest
                    continue
            elif op == 0x58:
                push(pc)
            elif op == 0x5B:
                pass
            elif op in (0xF3, 0xFD):
                offset, size = pop(), pop()
                touch(offset, size)
                data = bytes(mem[offset : offset + size])
                if op == 0xF3:
                    return data, gas
                raise ExplicitRevert(data, gas)
            elif op in (0xF1, 0xF4):
                if gas < sched.call_base:
                    raise OutOfGas(f"call at pc {pc}")
                gas -= sched.call_base
                requested = pop()
                target = _to_address(pop())
                value = pop() if op == 0xF1 else f.value
                in_off, in_size, out_off, out_size = pop(), pop(), pop(), pop()
                touch(in_off, in_size)
                touch(out_off, out_size)
                forwarded = min(requested, gas)
                gas -= forwarded
                ok, returndata, left = self._call(op, f, target, value,
                                                  bytes(mem[in_off : in_off + in_size]), forwarded)
                gas += left
                out = returndata[:out_size]
                mem[out_off : out_off + len(out)] = out
                push(int(ok))
            elif op == 0xFF:
                beneficiary = _to_address(pop())
                me = self.world.mutable(f.address)
                balance, me.balance = me.balance, 0
                self.world.mutable(beneficiary).balance += balance
                self.world.pending_destroy.add(f.address)
                self.trace.append(DestroyEvent(f.address))
                return b"", gas
            else:  # pragma: no cover - table and dispatch disagree
                raise InvalidOpcode(op)
            pc += 1

    def _call(self, op, f: _Frame, target: bytes, value: int, data: bytes, gas: int):
        """Returns ``(success, returndata, gas_left)`` for CALL / DELEGATECALL."""
        kind = "CALL" if op == 0xF1 else "DELEGATECALL"
        if f.depth + 1 > MAX_DEPTH:
            return False, b"", gas
        if op == 0xF1:
            if value > self.world.get(f.address).balance:
                return False, b"", gas
            child = _Frame(self.world.code(target), target, f.address, value, data, gas, f.depth + 1)
        else:
            child = _Frame(self.world.code(target), f.address, f.caller, value, data, gas, f.depth + 1)
        self.trace.append(CallEvent(kind, f.address, target))
        saved_world = self.world.copy()
        saved_trace = len(self.trace)
        try:
            if op == 0xF1 and value:
                self.world.mutable(f.address).balance -= value
                self.world.mutable(target).balance += value
            if not child.code:
                return True, b"", gas
            ret, left = self.run(child)
            return True, ret, left
        except ExplicitRevert as exc:
            self.world = saved_world
            del self.trace[saved_trace:]
            return False, exc.return_data, exc.gas_left
        except EvmError:
            self.world = saved_world
            del self.trace[saved_trace:]
            return False, b"", 0

    def finalize(self) -> None:
        for address in sorted(self.world.pending_destroy):
            self.world.accounts.pop(address, None)
            self.world._owned.discard(address)
            self.world.destroyed.add(address)
        self.world.pending_destroy = set()


def execute_message(
    world: WorldState,
    sender: bytes,
    to: bytes,
    calldata: bytes,
    gas: int,
    schedule: GasSchedule = DEFAULT_SCHEDULE,
    value: int = 0,
) -> ExecutionResult:
    """Run a message call. Raises :class:`EvmError` on failure; ``world`` is never mutated."""
    work = world.copy()
    interp = Interpreter(work, schedule)
    interp.trace.append(CallEvent("CALL", sender, to))
    try:
        if value:
            if work.get(sender).balance < value:
                raise InsufficientBalance("sender cannot cover value")
            work.mutable(sender).balance -= value
            work.mutable(to).balance += value
        code = work.code(to)
        if not code:
            return ExecutionResult(work, b"", 0, interp.trace)
        ret, left = interp.run(_Frame(code, to, sender, value, bytes(calldata), gas))
    except ExplicitRevert as exc:
        exc.gas_used = gas - exc.gas_left
        raise
    except EvmError as exc:
        exc.gas_used = gas
        raise
    interp.finalize()
    return ExecutionResult(interp.world, ret, gas - left, interp.trace)


def execute_deploy(
    world: WorldState,
    sender: bytes,
    deploy_code: bytes,
    gas: int,
    schedule: GasSchedule = DEFAULT_SCHEDULE,
    value: int = 0,
) -> ExecutionResult:
    """Create a contract at the address derived from ``sender``'s nonce."""
    if gas > schedule.block_gas_limit:
        raise ValueError(f"gas {gas} exceeds block gas limit {schedule.block_gas_limit}")
    work = world.copy()
    address = precompute_address(sender, work.nonce(sender))
    try:
        existing = work.get(address)
        if existing.code or existing.nonce:
            raise CreateCollision(f"account {address.hex()} already exists")
        work.mutable(sender).nonce += 1
        if value:
            if work.get(sender).balance < value:
                raise InsufficientBalance("sender cannot cover value")
            work.mutable(sender).balance -= value
        created = work.mutable(address)
        created.nonce = 1
        created.balance += value
        interp = Interpreter(work, schedule)
        interp.trace.append(CreateEvent(address))
        runtime, left = interp.run(_Frame(bytes(deploy_code), address, sender, value, b"", gas))
        deposit = len(runtime) * schedule.code_deposit_per_byte
        if left < deposit:
            raise OutOfGas(f"code deposit of {len(runtime)} bytes needs {deposit} gas")
        left -= deposit
        interp.world.mutable(address).code = runtime
    except ExplicitRevert as exc:
        exc.gas_used = gas - exc.gas_left
        raise
    except EvmError as exc:
        exc.gas_used = gas
        raise
    interp.finalize()
    return ExecutionResult(interp.world, runtime, gas - left, interp.trace, created=address)
