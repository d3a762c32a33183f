"""Opcode table for the supported instruction subset, plus a tiny assembler."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Union

OPCODES: dict[str, int] = {
    "STOP": 0x00,
    "ADD": 0x01,
    "MUL": 0x02,
    "SUB": 0x03,
    "DIV": 0x04,
    "LT": 0x10,
    "GT": 0x11,
    "EQ": 0x14,
    "ISZERO": 0x15,
    "AND": 0x16,
    "OR": 0x17,
    "NOT": 0x19,
    "BYTE": 0x1A,
    "SHL": 0x1B,
    "SHR": 0x1C,
    "SHA3": 0x20,
    "CALLER": 0x33,
    "CALLVALUE": 0x34,
    "CALLDATALOAD": 0x35,
    "CALLDATASIZE": 0x36,
    "CALLDATACOPY": 0x37,
    "CODESIZE": 0x38,
    "CODECOPY": 0x39,
    "EXTCODESIZE": 0x3B,
    "EXTCODECOPY": 0x3C,
    "RETURNDATASIZE": 0x3D,
    "RETURNDATACOPY": 0x3E,
    "POP": 0x50,
    "MLOAD": 0x51,
    "MSTORE": 0x52,
    "SLOAD": 0x54,
    "SSTORE": 0x55,
    "JUMP": 0x56,
    "JUMPI": 0x57,
    "PC": 0x58,
    "JUMPDEST": 0x5B,
    "RETURN": 0xF3,
    "CALL": 0xF1,
    "DELEGATECALL": 0xF4,
    "REVERT": 0xFD,
    "SELFDESTRUCT": 0xFF,
}
for _i in range(1, 33):
    OPCODES[f"PUSH{_i}"] = 0x5F + _i
for _i in range(1, 17):
    OPCODES[f"DUP{_i}"] = 0x7F + _i
    OPCODES[f"SWAP{_i}"] = 0x8F + _i

NAMES: dict[int, str] = {v: k for k, v in OPCODES.items()}

PUSH1 = OPCODES["PUSH1"]
PUSH20 = OPCODES["PUSH20"]
PUSH32 = OPCODES["PUSH32"]


def is_push(opcode: int) -> bool:
    return PUSH1 <= opcode <= PUSH32


@dataclass(frozen=True)
class Instruction:
    offset: int
    opcode: int
    immediate: bytes = b""

    @property
    def name(self) -> str:
        return NAMES.get(self.opcode, f"0x{self.opcode:02x}")


def disassemble(code: bytes) -> Iterator[Instruction]:
    """Walk ``code`` on instruction boundaries; truncated immediates are zero-padded."""
    pc = 0
    while pc < len(code):
        op = code[pc]
        if is_push(op):
            width = op - PUSH1 + 1
            imm = code[pc + 1 : pc + 1 + width].ljust(width, b"\x00")
            yield Instruction(pc, op, imm)
            pc += 1 + width
        else:
            yield Instruction(pc, op)
            pc += 1


def jump_destinations(code: bytes) -> frozenset:
    return frozenset(i.offset for i in disassemble(code) if i.opcode == OPCODES["JUMPDEST"])


# -- assembler --------------------------------------------------------------


@dataclass(frozen=True)
class Push:
    value: int
    width: int = 0  # 0 means minimal


@dataclass(frozen=True)
class Label:
    name: str


@dataclass(frozen=True)
class Ref:
    """PUSH2 of a label's offset."""
    name: str


Item = Union[str, Push, Label, Ref, bytes]


def minimal_width(value: int) -> int:
    return max(1, (value.bit_length() + 7) // 8)


def _size(item: Item) -> int:
    if isinstance(item, str):
        return 1
    if isinstance(item, Push):
        return 1 + (item.width or minimal_width(item.value))
    if isinstance(item, Label):
        return 1
    if isinstance(item, Ref):
        return 3
    return len(item)


def assemble(program: list) -> bytes:
    """Assemble opcode names, pushes, labels (emit JUMPDEST) and label refs."""
    labels = {}
    pc = 0
    for item in program:
        if isinstance(item, Label):
            if item.name in labels:
                raise ValueError(f"duplicate label {item.name}")
            labels[item.name] = pc
        pc += _size(item)

    out = bytearray()
    for item in program:
        if isinstance(item, str):
            out.append(OPCODES[item])
        elif isinstance(item, Push):
            width = item.width or minimal_width(item.value)
            if not 1 <= width <= 32 or item.value >= 1 << (8 * width):
                raise ValueError(f"value {item.value:#x} does not fit PUSH{width}")
            out.append(PUSH1 + width - 1)
            out += item.value.to_bytes(width, "big")
        elif isinstance(item, Label):
            out.append(OPCODES["JUMPDEST"])
        elif isinstance(item, Ref):
            out.append(OPCODES["PUSH2"])
            out += labels[item.name].to_bytes(2, "big")
        else:
            out += item
    return bytes(out)
