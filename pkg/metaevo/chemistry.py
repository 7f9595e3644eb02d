"""Meta-language instruction set, the micro-ISA it translates to, and the default alphabet."""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import numpy.typing as npt
from typing_extensions import TypeAlias

__all__ = [
    "ChemistryError",
    "Op",
    "Reg",
    "Syscall",
    "MicroOp",
    "MetaInstruction",
    "Bytes",
    "SLOT_SIZE",
    "CODON_COUNT",
    "ALPHABET_SIZE",
    "JUMP_SKIP",
    "MEMORY_SIZE",
    "DATA_OFFSET",
    "DATA_LIMIT",
    "CODE_LIMIT",
    "COMMAND_LINE",
    "MAP_WINDOW",
    "MAP_WINDOW_SIZE",
    "STACK_FLOOR",
    "STACK_TOP",
    "SENTINEL",
    "MASK32",
    "SYSCALL_ARGS",
    "OPERAND_WIDTH",
    "ZF_OPS",
    "INSTRUCTIONS",
    "BY_MNEMONIC",
    "BY_CODON",
    "MNEMONICS",
    "ANCHORS",
    "decode",
    "decode_one",
    "decode_entry",
    "encode",
    "semantics_of",
    "codon_of",
    "mnemonic_of",
    "default_alphabet",
    "alphabet_entry",
    "codon_table",
]

Bytes: TypeAlias = npt.NDArray[np.uint8]

SLOT_SIZE = 8
CODON_COUNT = 256
ALPHABET_SIZE = SLOT_SIZE * CODON_COUNT
# Distance skipped by JnzDown/JzDown past the end of their own slot.
JUMP_SKIP = 32

# Memory map of a process.
MEMORY_SIZE = 0x10000
CODE_LIMIT = 0x5000
DATA_OFFSET = 0x5000
DATA_LIMIT = 0x1000
COMMAND_LINE = 0x5F00
MAP_WINDOW = 0x6000
MAP_WINDOW_SIZE = 0x1800
STACK_FLOOR = MAP_WINDOW + MAP_WINDOW_SIZE
STACK_TOP = 0xFFFC
SENTINEL = 0xFFFFFFFF
MASK32 = 0xFFFFFFFF


class ChemistryError(RuntimeError):
    """Exception raised for unknown mnemonics and malformed alphabet entries."""

    pass


class Op(IntEnum):
    """Micro-ISA opcodes."""

    MOV = 0x10
    MOVI = 0x20
    ADDI = 0x21
    SUBI = 0x22
    ADD = 0x30
    SUB = 0x31
    AND = 0x32
    XOR = 0x33
    SHL = 0x34
    SHR = 0x35
    MUL = 0x36
    DIV = 0x37
    PUSH = 0x40
    POP = 0x41
    STOREB = 0x50
    STORED = 0x51
    LOADD = 0x52
    JZ = 0x60
    JNZ = 0x61
    JMP = 0x62
    RET = 0x63
    GETIP = 0x65
    SYSCALL = 0x70
    NOP = 0x90
    # Not a byte value: marks undecodable input.
    INVALID = 0x100


class Reg(IntEnum):
    """Register indices as encoded in the MOV operand nibbles."""

    RegA = 0
    RegB = 1
    RegD = 2
    BC1 = 3
    BC2 = 4
    BA1 = 5
    BA2 = 6


class Syscall(IntEnum):
    """Syscall numbers carried by the SYSCALL operand."""

    GetTickCount = 0
    GetCommandLine = 1
    CopyFile = 2
    CreateFile = 3
    GetFileSize = 4
    CreateFileMapping = 5
    MapViewOfFile = 6
    CreateProcess = 7
    UnmapViewOfFile = 8
    CloseHandle = 9
    Sleep = 10


SYSCALL_ARGS: Dict[Syscall, int] = {
    Syscall.GetTickCount: 0,
    Syscall.GetCommandLine: 0,
    Syscall.CopyFile: 2,
    Syscall.CreateFile: 1,
    Syscall.GetFileSize: 1,
    Syscall.CreateFileMapping: 1,
    Syscall.MapViewOfFile: 1,
    Syscall.CreateProcess: 1,
    Syscall.UnmapViewOfFile: 1,
    Syscall.CloseHandle: 1,
    Syscall.Sleep: 1,
}

OPERAND_WIDTH: Dict[Op, int] = {
    Op.MOV: 1,
    Op.MOVI: 4,
    Op.ADDI: 4,
    Op.SUBI: 4,
    Op.JZ: 1,
    Op.JNZ: 1,
    Op.SYSCALL: 1,
}

ZF_OPS = frozenset({Op.ADD, Op.SUB, Op.AND, Op.XOR, Op.SHL, Op.SHR, Op.ADDI, Op.SUBI})

_VALID_OPCODES = frozenset(int(o) for o in Op if o is not Op.INVALID)


@dataclass(frozen=True)
class MicroOp:
    """One decoded micro-instruction.

    Attributes
    ----------
        opcode: the operation, `Op.INVALID` for undecodable bytes.
        operand: register pair byte, immediate, unsigned rel8 or syscall number.
        raw: the undecodable bytes of an invalid op, empty otherwise.

    """

    opcode: Op
    operand: int = 0
    raw: bytes = b""

    @property
    def size(self) -> int:
        """Encoded length in bytes."""
        if self.opcode is Op.INVALID:
            return len(self.raw)
        return 1 + OPERAND_WIDTH.get(self.opcode, 0)

    @property
    def rel(self) -> int:
        """Signed displacement of a relative jump."""
        return self.operand - 0x100 if self.operand >= 0x80 else self.operand

    def encode(self) -> bytes:
        """Byte encoding of this op."""
        if self.opcode is Op.INVALID:
            return self.raw
        width = OPERAND_WIDTH.get(self.opcode, 0)
        return bytes([int(self.opcode)]) + self.operand.to_bytes(width, "little")

    def __str__(self) -> str:
        op = self.opcode
        if op is Op.INVALID:
            return "INVALID " + self.raw.hex()
        if op is Op.MOV:
            return f"MOV {Reg(self.operand >> 4).name}, {Reg(self.operand & 0xF).name}"
        if op in (Op.MOVI, Op.ADDI, Op.SUBI):
            return f"{op.name} 0x{self.operand:x}"
        if op in (Op.JZ, Op.JNZ):
            return f"{op.name} {self.rel:+d}"
        if op is Op.SYSCALL:
            return f"SYSCALL {Syscall(self.operand).name}"
        return op.name


def _invalid(raw: Union[bytes, Sequence[int]]) -> MicroOp:
    return MicroOp(Op.INVALID, 0, bytes(raw))


def decode_one(buf: Union[bytes, Bytes], pos: int = 0) -> MicroOp:
    """Decode the micro-op starting at `pos`.

    Args:
    ----
        buf : raw micro-code
        pos : byte position of the opcode

    Returns:
    -------
        The op. Unknown opcodes, register indices above 6, unknown syscall
        numbers and operands running past the end of `buf` all give an
        `Op.INVALID` op holding the bytes it covered.

    """
    data = bytes(buf)
    code = data[pos]
    if code not in _VALID_OPCODES:
        return _invalid(data[pos : pos + 1])
    op = Op(code)
    width = OPERAND_WIDTH.get(op, 0)
    if pos + 1 + width > len(data):
        return _invalid(data[pos:])
    operand = int.from_bytes(data[pos + 1 : pos + 1 + width], "little")
    if op is Op.MOV and ((operand >> 4) > Reg.BA2 or (operand & 0xF) > Reg.BA2):
        return _invalid(data[pos : pos + 2])
    if op is Op.SYSCALL and operand > Syscall.Sleep:
        return _invalid(data[pos : pos + 2])
    return MicroOp(op, operand)


def decode(buf: Union[bytes, Bytes]) -> List[MicroOp]:
    """Decode a whole buffer sequentially; total on every input."""
    data = bytes(buf)
    ops: List[MicroOp] = []
    pos = 0
    while pos < len(data):
        op = decode_one(data, pos)
        ops.append(op)
        pos += op.size
    return ops


def decode_entry(entry: Union[bytes, Bytes]) -> List[MicroOp]:
    """Decode one 8-byte alphabet slot.

    Raises
    ------
        ChemistryError : if `entry` is not exactly 8 bytes.

    """
    if len(entry) != SLOT_SIZE:
        raise ChemistryError(f"Alphabet entry must be {SLOT_SIZE} bytes, got {len(entry)}.")
    return decode(entry)


def encode(ops: Iterable[MicroOp]) -> bytes:
    """Concatenate the encodings of `ops`."""
    return b"".join(op.encode() for op in ops)


def _mov(dst: Reg, src: Reg) -> MicroOp:
    return MicroOp(Op.MOV, (dst << 4) | src)


def _imm(op: Op, value: int) -> MicroOp:
    return MicroOp(op, value & MASK32)


def _plain(op: Op) -> MicroOp:
    return MicroOp(op)


def _rel(op: Op, distance: int) -> MicroOp:
    return MicroOp(op, distance & 0xFF)


def _call(number: Syscall) -> MicroOp:
    return MicroOp(Op.SYSCALL, int(number))


# JZ/JNZ are 2 bytes at the start of their slot.
_SKIP_REL = SLOT_SIZE - 2 + JUMP_SKIP

# Listing order: buffer instructions, operations, jumps, API calls.
_LISTING: Dict[str, Tuple[MicroOp, ...]] = {
    "nopsA": (_mov(Reg.BC1, Reg.RegA),),
    "nopsB": (_mov(Reg.BC1, Reg.RegB),),
    "nopsD": (_mov(Reg.BC1, Reg.RegD),),
    "nopdA": (_mov(Reg.RegA, Reg.BC1),),
    "nopdB": (_mov(Reg.RegB, Reg.BC1),),
    "nopdD": (_mov(Reg.RegD, Reg.BC1),),
    "saveWrtOff": (_mov(Reg.BA1, Reg.BC1),),
    "saveJmpOff": (_mov(Reg.BA2, Reg.BC1),),
    "writeByte": (_plain(Op.STOREB),),
    "writeDWord": (_plain(Op.STORED),),
    "save": (_mov(Reg.BC2, Reg.BC1),),
    "addsaved": (_plain(Op.ADD),),
    "subsaved": (_plain(Op.SUB),),
    "getDO": (_imm(Op.MOVI, DATA_OFFSET),),
    "getdata": (_plain(Op.LOADD),),
    "getEIP": (_plain(Op.GETIP),),
    "zer0": (_imm(Op.MOVI, 0),),
    "push": (_plain(Op.PUSH),),
    "pop": (_plain(Op.POP),),
    "mul": (_plain(Op.MUL),),
    "div": (_plain(Op.DIV),),
    "shl": (_plain(Op.SHL),),
    "shr": (_plain(Op.SHR),),
    "and": (_plain(Op.AND),),
    "xor": (_plain(Op.XOR),),
    "add0001": (_imm(Op.ADDI, 0x0001),),
    "add0004": (_imm(Op.ADDI, 0x0004),),
    "add0010": (_imm(Op.ADDI, 0x0010),),
    "add0040": (_imm(Op.ADDI, 0x0040),),
    "add0100": (_imm(Op.ADDI, 0x0100),),
    "add0400": (_imm(Op.ADDI, 0x0400),),
    "add1000": (_imm(Op.ADDI, 0x1000),),
    "add4000": (_imm(Op.ADDI, 0x4000),),
    "sub0001": (_imm(Op.SUBI, 0x0001),),
    # jz over, jmp BA2, over:
    "JnzUp": (_rel(Op.JZ, 1), _plain(Op.JMP)),
    "JnzDown": (_rel(Op.JNZ, _SKIP_REL),),
    "JzDown": (_rel(Op.JZ, _SKIP_REL),),
    "ret": (_plain(Op.RET),),
    "CallAPIGetTickCounter": (_call(Syscall.GetTickCount),),
    "CallAPIGetCommandLine": (_call(Syscall.GetCommandLine),),
    "CallAPICopyFile": (_call(Syscall.CopyFile),),
    "CallAPICreateFile": (_call(Syscall.CreateFile),),
    "CallAPIGetFileSize": (_call(Syscall.GetFileSize),),
    "CallAPICreateFileMapping": (_call(Syscall.CreateFileMapping),),
    "CallAPIMapViewOfFile": (_call(Syscall.MapViewOfFile),),
    "CallAPICreateProcess": (_call(Syscall.CreateProcess),),
    "CallAPIUnMapViewOfFile": (_call(Syscall.UnmapViewOfFile),),
    "CallAPICloseHandle": (_call(Syscall.CloseHandle),),
    "CallAPISleep": (_call(Syscall.Sleep),),
}

ANCHORS: Dict[str, int] = {"getEIP": 24, "JnzUp": 25}


@dataclass(frozen=True)
class MetaInstruction:
    """A meta-language instruction: one codon standing for a short micro-op sequence."""

    mnemonic: str
    codon: int
    semantics: Tuple[MicroOp, ...]

    @property
    def entry(self) -> bytes:
        """The NOP-padded 8-byte alphabet slot of this instruction."""
        code = encode(self.semantics)
        return code + bytes([Op.NOP]) * (SLOT_SIZE - len(code))


def _assign_codons() -> Tuple[MetaInstruction, ...]:
    taken = set(ANCHORS.values())
    free = (c for c in range(CODON_COUNT) if c not in taken)
    out = []
    for mnemonic, semantics in _LISTING.items():
        codon = ANCHORS[mnemonic] if mnemonic in ANCHORS else next(free)
        out.append(MetaInstruction(mnemonic, codon, semantics))
    return tuple(out)


INSTRUCTIONS = _assign_codons()
BY_MNEMONIC: Dict[str, MetaInstruction] = {i.mnemonic: i for i in INSTRUCTIONS}
BY_CODON: Dict[int, MetaInstruction] = {i.codon: i for i in INSTRUCTIONS}
MNEMONICS: Tuple[str, ...] = tuple(BY_MNEMONIC)


def semantics_of(mnemonic: str) -> Tuple[MicroOp, ...]:
    """Defining micro-op sequence of a mnemonic.

    Raises
    ------
        ChemistryError : if `mnemonic` is not one of the 49.

    """
    try:
        return BY_MNEMONIC[mnemonic].semantics
    except KeyError:
        raise ChemistryError(f"Unknown mnemonic {mnemonic!r}.") from None


def codon_of(mnemonic: str) -> int:
    """Codon assigned to `mnemonic`."""
    try:
        return BY_MNEMONIC[mnemonic].codon
    except KeyError:
        raise ChemistryError(f"Unknown mnemonic {mnemonic!r}.") from None


def mnemonic_of(codon: int) -> Optional[str]:
    """Mnemonic of `codon`, None for an unassigned slot."""
    inst = BY_CODON.get(codon)
    return inst.mnemonic if inst is not None else None


def _build_default_alphabet() -> Bytes:
    table = np.full((CODON_COUNT, SLOT_SIZE), Op.NOP, dtype=np.uint8)
    for inst in INSTRUCTIONS:
        table[inst.codon] = np.frombuffer(inst.entry, dtype=np.uint8)
    table.flags.writeable = False
    return table.ravel()


_DEFAULT_ALPHABET = _build_default_alphabet()


def default_alphabet() -> Bytes:
    """Canonical 2048-byte alphabet; a fresh writable copy on every call."""
    return _DEFAULT_ALPHABET.copy()


def alphabet_entry(alphabet: Union[bytes, Bytes], codon: int) -> bytes:
    """The 8 raw bytes of `codon`'s slot in `alphabet`."""
    start = codon * SLOT_SIZE
    return bytes(alphabet[start : start + SLOT_SIZE])


def codon_table() -> str:
    """Human-readable mnemonic/codon table, one assigned codon per line in codon order."""
    lines = ["# codon  hex   mnemonic"]
    for codon in sorted(BY_CODON):
        lines.append(f"{codon:7d}  0x{codon:02x}  {BY_CODON[codon].mnemonic}")
    return "\n".join(lines) + "\n"
