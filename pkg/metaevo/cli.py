"""Command-line entry point: `metaevo <command> ...`."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Callable, Optional, Sequence

import colorama

from .analysis import (
    AnalysisError,
    count_moments,
    format_distribution,
    format_json,
    format_kinship,
    hamming_trajectory,
    kinship_matrix,
    load_population,
    mutation_distribution,
    non_minor,
    region_density,
    region_robustness,
)
from .assembler import (
    RANDOM_NUMBER,
    AssemblyError,
    ancestor_data,
    assemble,
    build_ancestor,
    build_genome,
    disassemble,
)
from .chemistry import DATA_OFFSET, codon_table, default_alphabet
from .config import ConfigError, GuardConfig
from .mutation import robustness_scan, write_scan_report
from .translator import GenomeError, parse_genome
from .vm import LoadError, trace
from .world import (
    SnapshotError,
    World,
    bootstrap,
    export_population,
    export_sample,
    restore,
    run_single,
    snapshot,
)

__all__ = ["configure_logging", "build_parser", "main"]

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAULT = 1
EXIT_USAGE = 2

_COLOURS = {
    logging.DEBUG: colorama.Fore.CYAN,
    logging.INFO: colorama.Fore.GREEN,
    logging.WARNING: colorama.Fore.YELLOW,
    logging.ERROR: colorama.Fore.RED,
    logging.CRITICAL: colorama.Fore.RED + colorama.Style.BRIGHT,
}


class ColourFormatter(logging.Formatter):
    """Prefixes records with their level name in colour."""

    def format(self, record: logging.LogRecord) -> str:
        colour = _COLOURS.get(record.levelno, "")
        level = f"{colour}{record.levelname.lower()}{colorama.Style.RESET_ALL}"
        return f"{level} {record.name}: {record.getMessage()}"


def configure_logging(level: Optional[str] = None) -> None:
    """One coloured stderr handler at the level named by RPW_LOG (default warning)."""
    name = (level or os.environ.get("RPW_LOG") or "warning").upper()
    colorama.init()
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(ColourFormatter())
    root = logging.getLogger("metaevo")
    root.handlers[:] = [handler]
    root.setLevel(getattr(logging, name, logging.WARNING))
    root.propagate = False


def _emit(text: str, out: Optional[str]) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        Path(out).write_text(text)


def _read_genome(path: str) -> bytes:
    try:
        raw = Path(path).read_bytes()
    except OSError as err:
        raise GenomeError(f"cannot read {path}: {err}") from None
    parse_genome(raw)
    return raw


# -- asm / disasm / alphabet


def cmd_asm(args: argparse.Namespace) -> int:
    source = Path(args.source).read_text()
    if args.raw:
        Path(args.output).write_bytes(assemble(source))
        return EXIT_OK
    if args.data is not None:
        data = Path(args.data).read_bytes()
    elif args.ancestor_data is not None:
        data = ancestor_data(args.ancestor_data)
    else:
        data = b""
    genome = build_genome(source, data)
    Path(args.output).write_bytes(genome.to_bytes())
    log.info("wrote %s", args.output)
    return EXIT_OK


def cmd_disasm(args: argparse.Namespace) -> int:
    genome = parse_genome(_read_genome(args.genome))
    _emit(disassemble(genome.meta_code, genome.alphabet, trim=not args.full), args.output)
    return EXIT_OK


def cmd_alphabet(args: argparse.Namespace) -> int:
    if args.table:
        _emit(codon_table(), args.output)
    elif args.output is None:
        raise AnalysisError("writing the binary alphabet needs -o FILE")
    else:
        Path(args.output).write_bytes(default_alphabet().tobytes())
    return EXIT_OK


# -- run


def cmd_run(args: argparse.Namespace) -> int:
    raw = _read_genome(args.genome)
    config = GuardConfig.from_file(args.config) if args.config else GuardConfig()
    if args.trace:
        world = World(config, args.seed, spawn=False)
        world.add_file(Path(args.genome).name, raw)
        proc = world.start_process(Path(args.genome).name)
        if proc is None:
            raise GenomeError(f"{args.genome} does not translate")
        for line in trace(proc, args.budget, world):
            print(line)
        faulted = proc.fault is not None
        offspring, state = world.offspring_files, proc
    else:
        report = run_single(raw, args.budget, config, seed=args.seed)
        print(f"outcome: {report.outcome}")
        print(f"steps: {report.steps}")
        faulted = report.fault is not None
        offspring, state = report.offspring, report.state
        if report.syscalls:
            calls = " ".join(f"{name}={n}" for name, n in report.syscalls.items())
            print(f"syscalls: {calls}")
    print(f"offspring: {len(offspring)}" + (f" ({', '.join(offspring)})" if offspring else ""))
    if state is not None:
        print(f"RandomNumber: 0x{state.read32(DATA_OFFSET + RANDOM_NUMBER):08x}")
        if state.fault is not None:
            print(f"fault: {state.fault}")
    return EXIT_FAULT if faulted else EXIT_OK


# -- evolve


def _snapshot_dir(out: Path, ticks: int) -> Path:
    return out / "snapshots" / f"tick_{ticks:010d}"


def cmd_evolve(args: argparse.Namespace) -> int:
    if args.require_seed and args.seed is None:
        raise ConfigError("--require-seed is set but no --seed was given")
    seed = 0 if args.seed is None else args.seed
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.resume:
        world = restore(args.resume)
        log.info("resumed at tick %d from %s", world.ticks, args.resume)
    else:
        config = GuardConfig.from_file(args.config) if args.config else GuardConfig()
        world = World(config, seed)
        genome = _read_genome(args.ancestor) if args.ancestor else build_ancestor(seed).to_bytes()
        bootstrap(world, genome, args.bootstrap)
    sample_every = max(1, round(world.config.sample_interval * 1000 / world.config.ms_per_tick))
    mode = "a" if args.resume else "w"
    with open(out / "events.jsonl", mode) as events:
        for _ in range(args.ticks):
            world.tick()
            for event in world.drain_events():
                events.write(event.to_json() + "\n")
            if args.snapshot_every and world.ticks % args.snapshot_every == 0:
                snapshot(world, _snapshot_dir(out, world.ticks))
            if world.ticks % sample_every == 0:
                export_sample(world, out / "samples" / f"tick_{world.ticks:010d}")
            if not world.processes and not world.pending:
                log.warning("population extinct at tick %d", world.ticks)
                break
        for event in world.drain_events():
            events.write(event.to_json() + "\n")
    snapshot(world, _snapshot_dir(out, world.ticks))
    export_population(world, out / "population")
    print(f"ticks: {world.ticks}")
    print(f"processes: {len(world.processes)}")
    print(f"files: {len(world.files)}")
    generations = [f.generation for f in world.files.values()]
    print(f"max generation: {max(generations) if generations else 0}")
    return EXIT_OK


# -- scan


def cmd_scan(args: argparse.Namespace) -> int:
    raw = _read_genome(args.genome)
    config = GuardConfig.from_file(args.config) if args.config else GuardConfig()
    result = robustness_scan(
        raw, args.region, args.budget, args.workers, None, config, args.sample, args.seed
    )
    print(f"R({result.region}) = {result.robustness:.4f} over {len(result.rows)} mutants")
    if args.out:
        write_scan_report(result, args.out)
    if args.control == "micro":
        sample = args.sample if args.sample is not None else len(result.rows)
        control = robustness_scan(
            raw, args.region, args.budget, args.workers, "micro", config, sample, args.seed
        )
        print(f"R(micro-code) = {control.robustness:.4f} over {len(control.rows)} mutants")
        if args.out:
            write_scan_report(control, Path(args.out).with_suffix(".micro.csv"))
    return EXIT_OK


# -- analyze


def cmd_analyze(args: argparse.Namespace) -> int:
    if args.report == "trend":
        ancestor = _read_genome(args.ancestor)
        dirs = sorted(p.parent for p in Path(args.snapshots).glob("*/manifest.json"))
        rows = hamming_trajectory(dirs, ancestor)
        text = "tick,population,mean,sd\n" + "".join(
            f"{t},{n},{m:.4f},{s:.4f}\n" for t, n, m, s in rows
        )
        _emit(text, args.out)
        return EXIT_OK
    sample = load_population(args.population, args.ancestor)
    if args.report == "hamming":
        matrix = kinship_matrix(sample, bits=args.bits)
        _emit(format_kinship(matrix), args.out)
        if sample.reference is not None and len(sample) >= 2:
            mean, sd = count_moments(sample)
            log.info("distance to ancestor: mean %.2f, sd %.2f", mean, sd)
        return EXIT_OK
    distribution = mutation_distribution(sample)
    if args.min_count:
        distribution = non_minor(distribution, args.min_count)
    if args.report == "dist":
        _emit(format_distribution(distribution), args.out)
        return EXIT_OK
    densities = region_density(distribution.keys())
    report = densities if args.report == "density" else region_robustness(densities)
    _emit(format_json(report), args.out)
    return EXIT_OK


# -- parser


Command = Callable[[argparse.Namespace], int]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="metaevo",
        description="Evolvable meta-language organisms in a sandboxed world.",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("asm", help="assemble a listing into a genome")
    p.add_argument("source", help="meta-language listing")
    p.add_argument("-o", "--output", required=True, help="genome file to write")
    group = p.add_mutually_exclusive_group()
    group.add_argument("--data", help="raw bytes for the data region")
    group.add_argument(
        "--ancestor-data", type=int, metavar="SEED", help="ancestor data region seeded with SEED"
    )
    p.add_argument("--raw", action="store_true", help="write bare codons, no genome")
    p.set_defaults(func=cmd_asm)

    p = sub.add_parser("disasm", help="print a genome's meta-code as a listing")
    p.add_argument("genome")
    p.add_argument("-o", "--output")
    p.add_argument("--full", action="store_true", help="keep trailing padding codons")
    p.set_defaults(func=cmd_disasm)

    p = sub.add_parser("run", help="run one organism in an ephemeral world")
    p.add_argument("genome")
    p.add_argument("--budget", type=int, default=10_000_000, help="charged micro-ops")
    p.add_argument("--trace", action="store_true", help="print every micro-op")
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("evolve", help="run a seeded world")
    p.add_argument("--seed", type=int)
    p.add_argument("--require-seed", action="store_true", help="refuse to run without --seed")
    p.add_argument("--config")
    p.add_argument("--ticks", type=int, default=100_000)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--bootstrap", type=int, default=10, help="ancestor copies to start")
    p.add_argument("--ancestor", help="genome to bootstrap with instead of the built-in one")
    p.add_argument("--snapshot-every", type=int, default=0, metavar="TICKS")
    p.add_argument("--resume", metavar="SNAPSHOT", help="continue from a snapshot directory")
    p.set_defaults(func=cmd_evolve)

    p = sub.add_parser("scan", help="single-bit robustness scan")
    p.add_argument("genome")
    p.add_argument("--region", default="meta-code")
    p.add_argument("--control", choices=["micro"], help="also scan the translated micro-code")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--budget", type=int, help="viability budget per mutant")
    p.add_argument("--sample", type=int, help="scan a seeded subset of this many mutants")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config")
    p.add_argument("--out", help="CSV report")
    p.set_defaults(func=cmd_scan)

    p = sub.add_parser("analyze", help="population reports")
    p.add_argument("report", choices=["hamming", "dist", "density", "robustness", "trend"])
    p.add_argument("--population", help="directory of .rpw files")
    p.add_argument("--snapshots", help="directory of snapshots, for trend")
    p.add_argument("--ancestor", help="reference genome")
    p.add_argument("--bits", action="store_true", help="count differing bits, not bytes")
    p.add_argument("--min-count", type=int, default=0, help="keep mutations in more members")
    p.add_argument("-o", "--out")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("alphabet", help="write the default alphabet")
    p.add_argument("-o", "--output")
    p.add_argument("--table", action="store_true", help="codon table as text instead")
    p.set_defaults(func=cmd_alphabet)
    return parser


def _check(args: argparse.Namespace, parser: argparse.ArgumentParser) -> None:
    if args.command != "analyze":
        return
    if args.report == "trend":
        if not args.snapshots or not args.ancestor:
            parser.error("analyze trend needs --snapshots and --ancestor")
    elif not args.population:
        parser.error(f"analyze {args.report} needs --population")
    elif args.report != "hamming" and not args.ancestor:
        parser.error(f"analyze {args.report} needs --ancestor")


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Run one command; returns 0, 1 for an organism fault, 2 for bad input."""
    configure_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        _check(args, parser)
    except SystemExit as exit:
        return EXIT_USAGE if exit.code else EXIT_OK
    func: Command = args.func
    try:
        return func(args)
    except (
        AssemblyError,
        GenomeError,
        LoadError,
        ConfigError,
        SnapshotError,
        AnalysisError,
        ValueError,
        OSError,
    ) as err:
        log.error("%s", err)
        return EXIT_USAGE
