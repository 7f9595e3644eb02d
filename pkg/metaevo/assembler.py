"""Meta-language assembler and disassembler, and the ancestor organism."""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple, Union

from .chemistry import (
    BY_CODON,
    BY_MNEMONIC,
    MASK32,
    Bytes,
    alphabet_entry,
    default_alphabet,
)
from .mutation import OFFSPRING_CLASSES
from .translator import META_CODE_SIZE, Genome, emit_genome

__all__ = [
    "AssemblyError",
    "PAD_CODON",
    "MAX_EXPANSION",
    "LCG_MULTIPLIER",
    "LCG_INCREMENT",
    "RANDOM_NUMBER",
    "expand_addnumber",
    "assemble",
    "disassemble",
    "ancestor_source",
    "ancestor_data",
    "lcg_source",
    "build_ancestor",
    "build_genome",
]

DATA_DIR = Path(__file__).parent / "data"

# Unassigned codon used to fill the meta-code region after a program.
PAD_CODON = 0x90
MAX_EXPANSION = 64

_DENOMINATIONS: Tuple[Tuple[int, str], ...] = (
    (0x4000, "add4000"),
    (0x1000, "add1000"),
    (0x0400, "add0400"),
    (0x0100, "add0100"),
    (0x0040, "add0040"),
    (0x0010, "add0010"),
    (0x0004, "add0004"),
    (0x0001, "add0001"),
)
# Longest sub0001 tail tried after rounding a value up.
_ROUND_UP = 8

LCG_MULTIPLIER = 1103515245
LCG_INCREMENT = 12345

# Ancestor data region offsets.
RANDOM_NUMBER = 4
_MULTIPLIER_AT = 0
_INCREMENT_AT = 8
_TABLE_AT = 64
_NAME_AT = 128
_NAME_TEMPLATE = b"aaaaaaaa.rpw\0"


class AssemblyError(RuntimeError):
    """Exception raised for source lines that cannot be assembled."""

    def __init__(self, message: str, line: int = 0) -> None:
        super().__init__(f"line {line}: {message}" if line else message)
        self.line = line


def _greedy_length(value: int) -> int:
    total = 0
    for amount, _ in _DENOMINATIONS:
        count, value = divmod(value, amount)
        total += count
    return total


def _greedy(value: int) -> List[str]:
    out: List[str] = []
    for amount, mnemonic in _DENOMINATIONS:
        count, value = divmod(value, amount)
        out.extend([mnemonic] * count)
    return out


def expand_addnumber(value: int, bound: int = MAX_EXPANSION) -> List[str]:
    """Shortest codon sequence adding `value` (mod 2^32) to BC1.

    Candidates are the greedy add chain from add4000 down to add0001, the
    greedy chain of `value + k` followed by k sub0001, a pure sub0001 chain
    for values just below 2^32, and a wide form that builds the two 16-bit
    halves joined by shl. The wide form clobbers BC2.

    Args:
    ----
        value : amount to add, reduced mod 2^32
        bound : longest expansion accepted

    Returns:
    -------
        Mnemonics, empty for 0.

    Raises:
    ------
        AssemblyError : if no candidate fits within `bound`.

    """
    value &= MASK32
    best: Optional[List[str]] = None

    def offer(length: int, build: Callable[[], List[str]]) -> None:
        nonlocal best
        if length <= bound and (best is None or length < len(best)):
            best = build()

    for k in range(_ROUND_UP + 1):
        target = (value + k) & MASK32
        offer(
            _greedy_length(target) + k,
            lambda target=target, k=k: _greedy(target) + ["sub0001"] * k,
        )
    wrap = (-value) & MASK32
    offer(wrap, lambda: ["sub0001"] * wrap)
    high, low = value >> 16, value & 0xFFFF
    if high:
        offer(
            9 + _greedy_length(high) + _greedy_length(low),
            lambda: ["push", "zer0", "add0010", "save", "zer0"]
            + _greedy(high)
            + ["shl"]
            + _greedy(low)
            + ["save", "pop", "addsaved"],
        )
    if best is None:
        raise AssemblyError(f"addnumber {value} has no expansion within {bound} codons")
    return best


def _parse_int(token: str, line: int) -> int:
    try:
        return int(token, 0)
    except ValueError:
        raise AssemblyError(f"bad number {token!r}", line) from None


def assemble(
    source: str, pad: bool = False, max_expansion: int = MAX_EXPANSION
) -> bytes:
    """Assemble meta-language source into codon bytes.

    One instruction per line: a mnemonic, `addnumber <u32>` or `.db <hex>...`.
    `;` starts a comment.

    Args:
    ----
        source : program text
        pad : fill up to the 2100-byte meta-code region with PAD_CODON
        max_expansion : bound on a single addnumber expansion

    Returns:
    -------
        Codon bytes.

    Raises:
    ------
        AssemblyError : unknown mnemonic, bad operand, or a padded program
            larger than the meta-code region; carries the line number.

    """
    out = bytearray()
    for number, text in enumerate(source.splitlines(), start=1):
        tokens = text.split(";", 1)[0].split()
        if not tokens:
            continue
        head, args = tokens[0], tokens[1:]
        if head == "addnumber":
            if len(args) != 1:
                raise AssemblyError("addnumber takes one value", number)
            value = _parse_int(args[0], number)
            try:
                names = expand_addnumber(value, max_expansion)
            except AssemblyError as err:
                raise AssemblyError(str(err), number) from None
            out.extend(BY_MNEMONIC[name].codon for name in names)
        elif head == ".db":
            if not args:
                raise AssemblyError(".db needs at least one byte", number)
            for arg in args:
                try:
                    byte = int(arg, 16)
                except ValueError:
                    raise AssemblyError(f"bad byte {arg!r}", number) from None
                if not 0 <= byte <= 0xFF:
                    raise AssemblyError(f"byte {arg!r} out of range", number)
                out.append(byte)
        elif head in BY_MNEMONIC:
            if args:
                raise AssemblyError(f"{head} takes no operand", number)
            out.append(BY_MNEMONIC[head].codon)
        else:
            raise AssemblyError(f"unknown mnemonic {head!r}", number)
    if pad:
        if len(out) > META_CODE_SIZE:
            raise AssemblyError(
                f"program of {len(out)} codons exceeds the {META_CODE_SIZE}-codon region"
            )
        out.extend([PAD_CODON] * (META_CODE_SIZE - len(out)))
    return bytes(out)


def disassemble(
    codons: Union[bytes, Bytes, Sequence[int]],
    alphabet: Optional[Union[bytes, Bytes]] = None,
    trim: bool = False,
) -> str:
    """Codon bytes back to source text.

    A codon prints as its mnemonic only when its slot in `alphabet` still
    holds that mnemonic's default micro-code; anything else prints as
    `.db xx`, so assembling the output gives back the same bytes.

    Args:
    ----
        codons : meta-code
        alphabet : translation table to check slots against, default alphabet if None
        trim : drop the trailing run of PAD_CODON

    """
    table = default_alphabet() if alphabet is None else alphabet
    values = list(bytes(codons))
    if trim:
        while values and values[-1] == PAD_CODON:
            values.pop()
    lines = []
    for codon in values:
        inst = BY_CODON.get(codon)
        if inst is not None and alphabet_entry(table, codon) == inst.entry:
            lines.append(inst.mnemonic)
        else:
            lines.append(f".db {codon:02x}")
    return "".join(line + "\n" for line in lines)


def ancestor_source() -> str:
    """Text of the shipped ancestor listing."""
    return (DATA_DIR / "ancestor.s").read_text()


def lcg_source() -> str:
    """Listing of one linear congruential generator step ending in ret."""
    return (DATA_DIR / "lcg.s").read_text()


def ancestor_data(seed: int = 0) -> bytes:
    """Initial 256-byte data region of the ancestor.

    Holds the LCG constants, RandomNumber (`seed`), the offspring table with
    one (start, length, threshold) row per offspring class and the name
    template.
    """
    data = bytearray(256)
    struct.pack_into("<I", data, _MULTIPLIER_AT, LCG_MULTIPLIER)
    struct.pack_into("<I", data, RANDOM_NUMBER, seed & MASK32)
    struct.pack_into("<I", data, _INCREMENT_AT, LCG_INCREMENT)
    for i, cls in enumerate(OFFSPRING_CLASSES):
        struct.pack_into("<III", data, _TABLE_AT + 12 * i, cls.start, cls.length, cls.threshold)
    data[_NAME_AT : _NAME_AT + len(_NAME_TEMPLATE)] = _NAME_TEMPLATE
    return bytes(data)


def build_genome(source: str, data: bytes = b"") -> Genome:
    """Assemble `source` into a genome with the default alphabet."""
    return emit_genome(assemble(source, pad=True), default_alphabet(), data)


def build_ancestor(seed: int = 0) -> Genome:
    """The canonical generation-0 organism."""
    return build_genome(ancestor_source(), ancestor_data(seed))
