"""Genome file format and the codon-to-micro-code translator."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Dict, Optional, Tuple, Union

import numpy as np

from .chemistry import ALPHABET_SIZE, CODON_COUNT, SLOT_SIZE, Bytes

__all__ = [
    "GenomeError",
    "Genome",
    "MicroProgram",
    "MAGIC",
    "VERSION",
    "HEADER_SIZE",
    "META_CODE_SIZE",
    "DATA_SIZE",
    "PADDING_SIZE",
    "GENOME_SIZE",
    "PROGRAM_SIZE",
    "REGIONS",
    "regions",
    "region_of",
    "parse_genome",
    "emit_genome",
    "translate",
]

MAGIC = b"RPW1"
VERSION = 1
HEADER_SIZE = 32
META_CODE_SIZE = 2100
DATA_SIZE = 256
PADDING_SIZE = 1708
GENOME_SIZE = HEADER_SIZE + META_CODE_SIZE + ALPHABET_SIZE + DATA_SIZE + PADDING_SIZE
PROGRAM_SIZE = SLOT_SIZE * META_CODE_SIZE

# magic, version, flags, then (offset, size) for meta-code, alphabet, data, padding.
_HEADER = struct.Struct("<4sHH8H")


def _layout() -> Dict[str, Tuple[int, int]]:
    out = {"header": (0, HEADER_SIZE)}
    offset = HEADER_SIZE
    for name, size in (
        ("meta-code", META_CODE_SIZE),
        ("alphabet", ALPHABET_SIZE),
        ("data", DATA_SIZE),
        ("padding", PADDING_SIZE),
    ):
        out[name] = (offset, size)
        offset += size
    return out


REGIONS: Dict[str, Tuple[int, int]] = _layout()
_BODY = ("meta-code", "alphabet", "data", "padding")


class GenomeError(RuntimeError):
    """Exception raised for genomes that cannot be parsed or translated."""

    pass


def regions(with_whole: bool = True) -> Dict[str, Tuple[int, int]]:
    """Region name -> (offset, size), in file order, optionally with `whole`."""
    out = dict(REGIONS)
    if with_whole:
        out["whole"] = (0, GENOME_SIZE)
    return out


def region_of(offset: int) -> str:
    """Name of the region holding byte `offset`.

    Raises
    ------
        GenomeError : if `offset` lies outside the genome.

    """
    for name, (start, size) in REGIONS.items():
        if start <= offset < start + size:
            return name
    raise GenomeError(f"Offset {offset} outside the {GENOME_SIZE}-byte genome.")


@dataclass
class Genome:
    """A 6144-byte genome with views onto its regions."""

    raw: Bytes

    def region(self, name: str) -> Bytes:
        start, size = regions()[name]
        return self.raw[start : start + size]

    @property
    def header(self) -> Bytes:
        return self.region("header")

    @property
    def meta_code(self) -> Bytes:
        return self.region("meta-code")

    @property
    def alphabet(self) -> Bytes:
        return self.region("alphabet")

    @property
    def data(self) -> Bytes:
        return self.region("data")

    @property
    def padding(self) -> Bytes:
        return self.region("padding")

    def to_bytes(self) -> bytes:
        return self.raw.tobytes()

    def copy(self) -> Genome:
        return Genome(self.raw.copy())

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Genome) and bool(np.array_equal(self.raw, other.raw))


@dataclass(frozen=True)
class MicroProgram:
    """Translated executable image plus the data segment it runs with."""

    code: bytes
    data: bytes


def _header_bytes() -> bytes:
    fields = []
    for name in _BODY:
        fields.extend(REGIONS[name])
    packed = _HEADER.pack(MAGIC, VERSION, 0, *fields)
    return packed + bytes(HEADER_SIZE - len(packed))


def _check_header(raw: bytes) -> None:
    magic, version, _flags, *fields = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise GenomeError(f"Bad magic {magic!r}.")
    if version != VERSION:
        raise GenomeError(f"Unsupported format version {version}.")
    expected = HEADER_SIZE
    for name, offset, size in zip(_BODY, fields[0::2], fields[1::2]):
        if offset != expected or size != REGIONS[name][1]:
            raise GenomeError(
                f"Region {name} at {offset}+{size} overlaps or leaves a gap "
                f"(expected {REGIONS[name][0]}+{REGIONS[name][1]})."
            )
        expected += size
    if expected != GENOME_SIZE:
        raise GenomeError("Regions do not cover the genome exactly.")


def parse_genome(data: Union[bytes, bytearray, Bytes]) -> Genome:
    """Parse raw genome bytes.

    Raises
    ------
        GenomeError : on wrong length, bad magic or inconsistent region offsets.

    """
    raw = bytes(data)
    if len(raw) != GENOME_SIZE:
        raise GenomeError(f"Genome must be {GENOME_SIZE} bytes, got {len(raw)}.")
    _check_header(raw)
    return Genome(np.frombuffer(raw, dtype=np.uint8).copy())


def emit_genome(
    meta_code: Union[bytes, Bytes],
    alphabet: Union[bytes, Bytes],
    data: Union[bytes, Bytes] = b"",
    padding: Optional[Union[bytes, Bytes]] = None,
) -> Genome:
    """Assemble a genome from its regions, writing a fresh header.

    Short regions are zero-filled; the meta-code and alphabet must fit their
    regions exactly when given in full.

    Raises
    ------
        GenomeError : if a region is larger than its slot.

    """
    parts = {"meta-code": meta_code, "alphabet": alphabet, "data": data, "padding": padding}
    raw = np.zeros(GENOME_SIZE, dtype=np.uint8)
    raw[:HEADER_SIZE] = np.frombuffer(_header_bytes(), dtype=np.uint8)
    for name in _BODY:
        content = parts[name]
        if content is None:
            continue
        chunk = np.frombuffer(bytes(content), dtype=np.uint8)
        start, size = REGIONS[name]
        if len(chunk) > size:
            raise GenomeError(f"Region {name} holds {size} bytes, got {len(chunk)}.")
        raw[start : start + len(chunk)] = chunk
    return Genome(raw)


def translate(genome: Union[Genome, bytes, Bytes]) -> MicroProgram:
    """Expand the meta-code through the genome's own alphabet.

    Codon `c` at index `i` becomes `alphabet[8c:8c+8]` at program offset `8i`.

    Args:
    ----
        genome : a parsed genome or raw genome bytes

    Returns:
    -------
        16800 bytes of micro-code and the 256-byte data segment.

    Raises:
    ------
        GenomeError : if the header is corrupt.

    """
    if not isinstance(genome, Genome):
        genome = parse_genome(genome)
    else:
        _check_header(genome.raw[:HEADER_SIZE].tobytes())
    table = genome.alphabet.reshape(CODON_COUNT, SLOT_SIZE)
    code = table[genome.meta_code].ravel()
    return MicroProgram(code=code.tobytes(), data=genome.data.tobytes())
