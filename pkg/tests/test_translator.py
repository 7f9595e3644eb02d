import pytest
from hypothesis import given, settings
from hypothesis.strategies import integers

from metaevo.chemistry import SLOT_SIZE, default_alphabet
from metaevo.translator import (
    GENOME_SIZE,
    HEADER_SIZE,
    META_CODE_SIZE,
    PROGRAM_SIZE,
    Genome,
    GenomeError,
    emit_genome,
    parse_genome,
    region_of,
    regions,
    translate,
)

from .genome_strategies import genomes


@pytest.mark.translator
def test_layout() -> None:
    table = regions()
    assert list(table) == ["header", "meta-code", "alphabet", "data", "padding", "whole"]
    assert table["meta-code"] == (32, 2100)
    assert table["alphabet"] == (2132, 2048)
    assert table["data"] == (4180, 256)
    assert table["padding"] == (4436, 1708)
    assert table["whole"] == (0, 6144)
    assert sum(size for name, (_, size) in table.items() if name != "whole") == GENOME_SIZE
    assert PROGRAM_SIZE == 16800


@pytest.mark.translator
def test_region_of() -> None:
    assert region_of(0) == "header"
    assert region_of(32) == "meta-code"
    assert region_of(2131) == "meta-code"
    assert region_of(2132) == "alphabet"
    assert region_of(6143) == "padding"
    with pytest.raises(GenomeError):
        region_of(6144)


@pytest.mark.translator
def test_header_round_trip() -> None:
    genome = emit_genome(b"", default_alphabet())
    raw = genome.to_bytes()
    assert raw[:4] == b"RPW1"
    assert parse_genome(raw) == genome


@pytest.mark.translator
def test_parse_errors() -> None:
    good = emit_genome(b"", default_alphabet()).to_bytes()
    with pytest.raises(GenomeError):
        parse_genome(b"")
    with pytest.raises(GenomeError):
        parse_genome(good[:-1])
    with pytest.raises(GenomeError):
        parse_genome(b"XPW1" + good[4:])
    bad_version = bytearray(good)
    bad_version[4] = 2
    with pytest.raises(GenomeError):
        parse_genome(bytes(bad_version))
    overlap = bytearray(good)
    overlap[12] ^= 1
    with pytest.raises(GenomeError):
        parse_genome(bytes(overlap))
    with pytest.raises(GenomeError):
        translate(b"\0" * GENOME_SIZE)


@pytest.mark.translator
def test_emit_rejects_oversize_region() -> None:
    with pytest.raises(GenomeError):
        emit_genome(bytes(META_CODE_SIZE + 1), default_alphabet())


@pytest.mark.slow
@pytest.mark.translator
@settings(max_examples=1000)
@given(genomes())
def test_translate_shape(genome: Genome) -> None:
    program = translate(genome)
    assert len(program.code) == PROGRAM_SIZE
    assert program.data == genome.data.tobytes()
    alphabet = genome.alphabet.tobytes()
    meta = genome.meta_code.tobytes()
    for i in (0, 1, META_CODE_SIZE - 1):
        codon = meta[i]
        assert program.code[SLOT_SIZE * i : SLOT_SIZE * (i + 1)] == alphabet[
            SLOT_SIZE * codon : SLOT_SIZE * (codon + 1)
        ]


@pytest.mark.slow
@pytest.mark.translator
@settings(max_examples=1000)
@given(genomes(), integers(min_value=0, max_value=META_CODE_SIZE - 1), integers(0, 255))
def test_codon_change_is_local(genome: Genome, index: int, codon: int) -> None:
    before = translate(genome).code
    mutant = genome.copy()
    mutant.meta_code[index] = codon
    after = translate(mutant).code
    changed = {i // SLOT_SIZE for i in range(PROGRAM_SIZE) if before[i] != after[i]}
    assert changed <= {index}


@pytest.mark.translator
@given(genomes(), integers(min_value=0, max_value=255), integers(0, SLOT_SIZE - 1))
def test_alphabet_change_touches_only_its_codon(genome: Genome, codon: int, k: int) -> None:
    before = translate(genome).code
    mutant = genome.copy()
    mutant.alphabet[SLOT_SIZE * codon + k] ^= 0xFF
    after = translate(mutant).code
    changed = {i // SLOT_SIZE for i in range(PROGRAM_SIZE) if before[i] != after[i]}
    occurrences = {i for i, c in enumerate(genome.meta_code.tolist()) if c == codon}
    assert changed == occurrences


@pytest.mark.translator
@given(genomes())
def test_padding_and_header_flags_are_inert(genome: Genome) -> None:
    before = translate(genome)
    mutant = genome.copy()
    mutant.padding[:] ^= 0x55
    mutant.raw[HEADER_SIZE - 1] ^= 1
    assert translate(mutant) == before


@pytest.mark.translator
def test_views_share_storage() -> None:
    genome = emit_genome(b"\x01", default_alphabet())
    genome.meta_code[0] = 7
    assert genome.raw[32] == 7
    twin = genome.copy()
    twin.meta_code[0] = 8
    assert genome.raw[32] == 7
