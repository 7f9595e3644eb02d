"""Point mutations: closed-form expectations, the host mutator and robustness scans."""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .config import GuardConfig
from .translator import (
    GENOME_SIZE,
    Genome,
    MicroProgram,
    parse_genome,
    region_of,
    regions,
    translate,
)

__all__ = [
    "OffspringClass",
    "OFFSPRING_CLASSES",
    "MutationRecord",
    "ScanRow",
    "ScanResult",
    "at_least_one_probability",
    "p_bit_for",
    "mutate",
    "apply_records",
    "robustness_scan",
    "write_scan_report",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class OffspringClass:
    """One of the ancestor's offspring: an interval mutated with per-byte
    probability `p_bit`, giving at least one mutation with probability `probability`."""

    name: str
    start: int
    length: int
    probability: float
    p_bit: float

    @property
    def threshold(self) -> int:
        """`p_bit` as the 16-bit cut the in-genome mutator compares against."""
        return round(self.p_bit * 65536)

    @property
    def interval(self) -> Tuple[int, int]:
        return self.start, self.start + self.length


OFFSPRING_CLASSES: Tuple[OffspringClass, ...] = (
    OffspringClass("code", 32, 2100, 0.9, 1 / 900),
    OffspringClass("code+alphabet", 32, 4148, 0.9, 1 / 1800),
    OffspringClass("whole", 0, GENOME_SIZE, 0.9, 1 / 2666),
    OffspringClass("code-75", 32, 2100, 0.75, 1 / 1500),
    OffspringClass("code-68", 32, 2100, 0.68, 1 / 1820),
)


@dataclass(frozen=True)
class MutationRecord:
    """A single flipped bit."""

    offset: int
    bit: int
    interval: str = ""


def at_least_one_probability(n: int, p_bit: float) -> float:
    """Probability that `n` independent byte trials at `p_bit` flip at least once."""
    if n < 0 or not 0.0 <= p_bit <= 1.0:
        raise ValueError(f"need n >= 0 and 0 <= p_bit <= 1, got {n}, {p_bit}")
    return 1.0 - (1.0 - p_bit) ** n


def p_bit_for(n: int, probability: float) -> float:
    """Per-byte probability giving at least one flip among `n` bytes with `probability`."""
    if n <= 0 or not 0.0 <= probability <= 1.0:
        raise ValueError(f"need n > 0 and 0 <= probability <= 1, got {n}, {probability}")
    return 1.0 - (1.0 - probability) ** (1.0 / n)


def _raw(genome: Union[Genome, bytes]) -> np.ndarray:
    if isinstance(genome, Genome):
        return genome.raw.copy()
    return np.frombuffer(bytes(genome), dtype=np.uint8).copy()


def mutate(
    genome: Union[Genome, bytes],
    interval: Tuple[int, int],
    p_bit: float,
    rng: np.random.Generator,
    label: str = "",
) -> Tuple[Genome, List[MutationRecord]]:
    """Each byte of `interval` flips one uniformly chosen bit with probability `p_bit`.

    Args:
    ----
        genome : genome to copy, left unchanged
        interval : half-open [start, end) byte range
        p_bit : per-byte mutation probability
        rng : source of all randomness
        label : interval name stored in the records

    Returns:
    -------
        The mutant and its records, in offset order.

    """
    raw = _raw(genome)
    start, end = interval
    if not 0 <= start <= end <= len(raw):
        raise ValueError(f"interval {interval} outside a {len(raw)}-byte genome")
    hits = np.flatnonzero(rng.random(end - start) < p_bit) + start
    bits = rng.integers(0, 8, size=len(hits))
    raw[hits] ^= (1 << bits).astype(np.uint8)
    records = [MutationRecord(int(o), int(b), label) for o, b in zip(hits, bits)]
    return Genome(raw), records


def apply_records(
    genome: Union[Genome, bytes], records: Iterable[MutationRecord]
) -> Genome:
    """Replay `records` by XOR; applying the same records twice is the identity."""
    raw = _raw(genome)
    for rec in records:
        raw[rec.offset] ^= 1 << rec.bit
    return Genome(raw)


@dataclass(frozen=True)
class ScanRow:
    offset: int
    bit: int
    region: str
    outcome: str
    offspring_count: int

    @property
    def viable(self) -> bool:
        return self.offspring_count > 0


@dataclass
class ScanResult:
    """Per-mutant outcomes of a robustness scan; `robustness` is viable / total."""

    region: str
    control: Optional[str]
    rows: List[ScanRow]

    @property
    def robustness(self) -> float:
        if not self.rows:
            return 0.0
        return sum(row.viable for row in self.rows) / len(self.rows)


# Shared by the workers of one scan, set once per process.
_job: Tuple[bytes, Optional[bytes], int, GuardConfig] = (b"", None, 0, GuardConfig())


def _init_worker(
    genome: bytes, image: Optional[bytes], budget: int, config: GuardConfig
) -> None:
    global _job
    _job = (genome, image, budget, config)


def _evaluate(mutant: Tuple[int, int]) -> ScanRow:
    from .world import run_single

    genome, image, budget, config = _job
    offset, bit = mutant
    if image is None:
        raw = bytearray(genome)
        raw[offset] ^= 1 << bit
        report = run_single(bytes(raw), budget, config, stop_at_offspring=True)
        region = region_of(offset)
    else:
        code = bytearray(image)
        code[offset] ^= 1 << bit
        program = MicroProgram(bytes(code), parse_genome(genome).data.tobytes())
        report = run_single(genome, budget, config, image=program, stop_at_offspring=True)
        region = "micro-code"
    outcome = "viable" if report.viable else report.outcome
    return ScanRow(offset, bit, region, outcome, len(report.offspring))


def robustness_scan(
    genome: Union[Genome, bytes],
    region: str = "meta-code",
    viability_budget: Optional[int] = None,
    workers: int = 1,
    control: Optional[str] = None,
    config: Optional[GuardConfig] = None,
    sample: Optional[int] = None,
    seed: int = 0,
) -> ScanResult:
    """Run every single-bit mutant of `region` alone and count the viable ones.

    A mutant is viable when it creates at least one offspring file within
    `viability_budget` charged micro-ops. With `control="micro"` the mutants
    are bit flips of the translated image of the unmutated genome instead,
    executed directly so the codon layer is bypassed.

    Args:
    ----
        genome : organism to scan
        region : layout region for the codon scan, ignored by the micro control
        viability_budget : micro-ops per mutant, default from `config`
        workers : process pool size, 1 runs inline
        control : None for the genome scan, "micro" for the translated image
        config : world parameters of the ephemeral runs
        sample : scan a seeded uniform subset of this many mutants
        seed : seed of that subset

    Returns:
    -------
        ScanResult with rows in mutant order.

    """
    config = config if config is not None else GuardConfig()
    budget = viability_budget if viability_budget is not None else config.viability_budget
    raw = genome.to_bytes() if isinstance(genome, Genome) else bytes(genome)
    if control is None:
        table = regions()
        if region not in table:
            raise ValueError(f"unknown region {region!r}; expected one of {sorted(table)}")
        start, size = table[region]
        image = None
    elif control == "micro":
        image = translate(raw).code
        start, size = 0, len(image)
        region = "micro-code"
    else:
        raise ValueError(f"unknown control {control!r}")
    mutants: Sequence[Tuple[int, int]] = [
        (offset, bit) for offset in range(start, start + size) for bit in range(8)
    ]
    if sample is not None and sample < len(mutants):
        picks = np.random.default_rng(seed).choice(len(mutants), size=sample, replace=False)
        mutants = [mutants[i] for i in sorted(picks.tolist())]
    log.info("scanning %d mutants of %s", len(mutants), region)
    if workers > 1:
        with ProcessPoolExecutor(
            workers, initializer=_init_worker, initargs=(raw, image, budget, config)
        ) as pool:
            rows = list(pool.map(_evaluate, mutants, chunksize=64))
    else:
        _init_worker(raw, image, budget, config)
        rows = [_evaluate(m) for m in mutants]
    result = ScanResult(region, control, rows)
    log.info("%s: R = %.4f over %d mutants", region, result.robustness, len(rows))
    return result


def write_scan_report(result: ScanResult, path: Union[str, Path]) -> None:
    """CSV with columns offset, bit, region, outcome, offspring_count."""
    with open(path, "w", newline="") as out:
        writer = csv.writer(out)
        writer.writerow(["offset", "bit", "region", "outcome", "offspring_count"])
        for row in result.rows:
            writer.writerow([row.offset, row.bit, row.region, row.outcome, row.offspring_count])
