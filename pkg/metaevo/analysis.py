"""Population statistics: kinship, mutation distributions, densities and robustness."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numba
import numpy as np
import numpy.typing as npt
from typing_extensions import TypeAlias

from .chemistry import Bytes
from .translator import Genome, GenomeError, parse_genome, regions

__all__ = [
    "AnalysisError",
    "PopulationSample",
    "KinshipMatrix",
    "hamming",
    "kinship_matrix",
    "mutation_distribution",
    "non_minor",
    "format_distribution",
    "count_moments",
    "region_density",
    "region_robustness",
    "load_population",
    "hamming_trajectory",
    "format_kinship",
    "format_json",
    "write_kinship_csv",
    "write_distribution",
    "write_json",
]

log = logging.getLogger(__name__)

Distances: TypeAlias = npt.NDArray[np.int64]
GenomeLike: TypeAlias = Union[bytes, Bytes, Genome]


class AnalysisError(RuntimeError):
    """Exception raised when a statistic is undefined for its input."""

    pass


@dataclass
class PopulationSample:
    """Named genomes plus the ancestor they are measured against."""

    genomes: List[Tuple[str, bytes]]
    reference: Optional[bytes] = None

    @property
    def names(self) -> List[str]:
        return [name for name, _ in self.genomes]

    def __len__(self) -> int:
        return len(self.genomes)

    def matrix(self) -> Bytes:
        """Members stacked as an (n, length) byte matrix."""
        if not self.genomes:
            return np.zeros((0, 0), dtype=np.uint8)
        return np.stack([np.frombuffer(raw, dtype=np.uint8) for _, raw in self.genomes])

    def require_reference(self) -> bytes:
        if self.reference is None:
            raise AnalysisError("sample has no ancestor to compare against")
        return self.reference


def _as_array(genome: GenomeLike) -> Bytes:
    if isinstance(genome, Genome):
        return genome.raw
    if isinstance(genome, np.ndarray):
        return genome
    return np.frombuffer(bytes(genome), dtype=np.uint8)


def hamming(a: GenomeLike, b: GenomeLike, bits: bool = False) -> int:
    """Number of differing byte positions, or differing bits with `bits`.

    Raises
    ------
        AnalysisError : if the lengths differ.

    """
    x, y = _as_array(a), _as_array(b)
    if len(x) != len(y):
        raise AnalysisError(f"cannot compare genomes of {len(x)} and {len(y)} bytes")
    if bits:
        return int(np.unpackbits(x ^ y).sum())
    return int(np.count_nonzero(x != y))


@numba.njit(cache=True)
def _popcount(x: int) -> int:
    count = 0
    while x:
        count += x & 1
        x >>= 1
    return count


@numba.njit(cache=True)
def _pairwise(genomes: Bytes, bits: bool) -> Distances:
    n, length = genomes.shape
    out = np.zeros((n, n), dtype=np.int64)
    for i in range(n):
        for j in range(i + 1, n):
            d = 0
            for k in range(length):
                x = genomes[i, k] ^ genomes[j, k]
                if x:
                    d += _popcount(x) if bits else 1
            out[i, j] = d
            out[j, i] = d
    return out


@dataclass
class KinshipMatrix:
    names: List[str]
    distances: Distances
    to_ancestor: Optional[Distances] = None


def _check_lengths(sample: PopulationSample) -> None:
    lengths = {len(raw) for _, raw in sample.genomes}
    if sample.reference is not None:
        lengths.add(len(sample.reference))
    if len(lengths) > 1:
        raise AnalysisError(f"sample mixes genome lengths {sorted(lengths)}")


def kinship_matrix(sample: PopulationSample, bits: bool = False) -> KinshipMatrix:
    """All pairwise Hamming distances, plus each member's distance to the ancestor."""
    _check_lengths(sample)
    distances = _pairwise(sample.matrix(), bits)
    to_ancestor = None
    if sample.reference is not None:
        to_ancestor = np.array(
            [hamming(raw, sample.reference, bits) for _, raw in sample.genomes], dtype=np.int64
        )
    return KinshipMatrix(sample.names, distances, to_ancestor)


def format_kinship(matrix: KinshipMatrix) -> str:
    """The matrix as CSV, one row per member, ancestor distances last."""
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    header = ["name", *matrix.names]
    if matrix.to_ancestor is not None:
        header.append("ancestor")
    writer.writerow(header)
    for i, name in enumerate(matrix.names):
        row: List[Any] = [name, *matrix.distances[i].tolist()]
        if matrix.to_ancestor is not None:
            row.append(int(matrix.to_ancestor[i]))
        writer.writerow(row)
    return out.getvalue()


def write_kinship_csv(matrix: KinshipMatrix, path: Union[str, Path]) -> None:
    Path(path).write_text(format_kinship(matrix))


def mutation_distribution(sample: PopulationSample) -> Dict[int, int]:
    """Byte offset -> number of members differing from the ancestor there.

    Ordered by count descending, then offset ascending.
    """
    _check_lengths(sample)
    reference = _as_array(sample.require_reference())
    if not sample.genomes:
        return {}
    counts = np.count_nonzero(sample.matrix() != reference, axis=0)
    offsets = np.flatnonzero(counts)
    ordered = sorted(offsets.tolist(), key=lambda o: (-int(counts[o]), o))
    return {o: int(counts[o]) for o in ordered}


def non_minor(distribution: Mapping[int, int], min_count: int = 50) -> Dict[int, int]:
    """Mutations present in more than `min_count` members."""
    return {o: c for o, c in distribution.items() if c > min_count}


def format_distribution(distribution: Mapping[int, int]) -> str:
    """One `offset: count` line per entry, offsets in hex."""
    return "".join(f"{offset:x}: {count}\n" for offset, count in distribution.items())


def write_distribution(distribution: Mapping[int, int], path: Union[str, Path]) -> None:
    Path(path).write_text(format_distribution(distribution))


def count_moments(sample: Union[PopulationSample, Sequence[int]]) -> Tuple[float, float]:
    """Mean and sample standard deviation (1/(n-1)) of per-member mutation counts.

    Args:
    ----
        sample : a population measured against its ancestor, or the counts themselves

    Raises:
    ------
        AnalysisError : with fewer than two members.

    """
    if isinstance(sample, PopulationSample):
        reference = sample.require_reference()
        counts = [hamming(raw, reference) for _, raw in sample.genomes]
    else:
        counts = list(sample)
    if len(counts) < 2:
        raise AnalysisError(f"standard deviation needs at least two members, got {len(counts)}")
    values = np.asarray(counts, dtype=np.float64)
    return float(values.mean()), float(values.std(ddof=1))


def region_density(
    offsets: Iterable[int], layout: Optional[Mapping[str, Tuple[int, int]]] = None
) -> Dict[str, float]:
    """Mutations per byte of every region of `layout` (default: the genome layout)."""
    layout = regions() if layout is None else layout
    points = np.asarray(list(offsets), dtype=np.int64)
    out = {}
    for name, (start, size) in layout.items():
        inside = np.count_nonzero((points >= start) & (points < start + size))
        out[name] = inside / size
    return out


def region_robustness(
    densities: Mapping[str, float], reference: str = "padding"
) -> Dict[str, float]:
    """Each region's density relative to the never-executed `reference` region.

    Raises
    ------
        AnalysisError : if the reference density is missing or zero.

    """
    base = densities.get(reference)
    if not base:
        raise AnalysisError(
            f"robustness undefined: {reference} density is {base!r}, need a positive value"
        )
    return {name: rho / base for name, rho in densities.items()}


def _read_genome(path: Path) -> bytes:
    raw = path.read_bytes()
    try:
        parse_genome(raw)
    except GenomeError as err:
        raise AnalysisError(f"{path}: {err}") from None
    return raw


def load_population(
    directory: Union[str, Path], ancestor: Optional[Union[str, Path]] = None
) -> PopulationSample:
    """Every `*.rpw` under `directory`, sorted by name."""
    root = Path(directory)
    if not root.is_dir():
        raise AnalysisError(f"{root} is not a directory")
    genomes = [(p.name, _read_genome(p)) for p in sorted(root.glob("*.rpw"))]
    reference = _read_genome(Path(ancestor)) if ancestor is not None else None
    log.info("loaded %d genomes from %s", len(genomes), root)
    return PopulationSample(genomes, reference)


def hamming_trajectory(
    snapshots: Iterable[Union[str, Path]], ancestor: GenomeLike
) -> List[Tuple[int, int, float, float]]:
    """(tick, population, mean, sd) of the distance to `ancestor` per snapshot, by tick."""
    from .world import restore

    rows = []
    for path in snapshots:
        world = restore(path)
        counts = [hamming(f.data, ancestor) for f in world.files.values()]
        if len(counts) >= 2:
            mean, sd = count_moments(counts)
        else:
            mean, sd = (float(counts[0]) if counts else math.nan), 0.0
        rows.append((world.ticks, len(counts), mean, sd))
    return sorted(rows)


def format_json(report: Any) -> str:
    return json.dumps(report, indent=1, sort_keys=True) + "\n"


def write_json(report: Any, path: Union[str, Path]) -> None:
    Path(path).write_text(format_json(report))
