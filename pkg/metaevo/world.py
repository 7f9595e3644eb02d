"""The virtual ecosystem: filesystem, round-robin scheduler, virtual clock and guards."""

from __future__ import annotations

import hashlib
import heapq
import json
import logging
import math
import re
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np

from .chemistry import MEMORY_SIZE, Bytes, Syscall
from .config import ConfigError, GuardConfig
from .translator import Genome, GenomeError, MicroProgram, translate
from .vm import (
    CONTROL_SIZE,
    Fault,
    FaultKind,
    Host,
    ProcessState,
    Status,
    load,
    run,
)

__all__ = [
    "SnapshotError",
    "VirtualFile",
    "Event",
    "World",
    "RunReport",
    "guard_multiple_instances",
    "guard_clones",
    "guard_reapers",
    "bootstrap",
    "snapshot",
    "restore",
    "export_sample",
    "export_population",
    "run_single",
    "safe_name",
]

log = logging.getLogger(__name__)

SNAPSHOT_FORMAT = 1


class SnapshotError(RuntimeError):
    """Exception raised for unreadable or inconsistent snapshots."""

    pass


@dataclass
class VirtualFile:
    """A file in the virtual filesystem."""

    data: bytes
    created_at: int
    parent: Optional[str] = None
    generation: int = 0


@dataclass
class Event:
    """One record of the world's append-only log."""

    type: str
    tick: int
    pid: Optional[int] = None
    filename: Optional[str] = None
    cause: Optional[str] = None
    detail: Any = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class _Spawn:
    due: int
    name: str
    parent: Optional[int] = None


class World(Host):
    """Files, processes and clock of one deterministic ecosystem.

    Args:
    ----
        config : guard and scheduling parameters
        seed : seed of the world generator used by the probabilistic guards
        spawn : start processes on CreateProcess; when False requests are only recorded

    """

    def __init__(
        self, config: Optional[GuardConfig] = None, seed: int = 0, spawn: bool = True
    ) -> None:
        self.config = config if config is not None else GuardConfig()
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        self.files: Dict[str, VirtualFile] = {}
        self.processes: List[ProcessState] = []
        self.ticks = 0
        self.next_pid = 1
        self.events: List[Event] = []
        self.pending: List[_Spawn] = []
        self.spawn_enabled = spawn
        self.spawn_requests: List[str] = []
        self.offspring_files: List[str] = []
        self._running: Counter[str] = Counter()
        # (created_at, name, seq, file) by age; stale entries are skipped on pop
        self._ages: List[Tuple[int, str, int, VirtualFile]] = []
        self._overdue: List[Tuple[int, str, int, VirtualFile]] = []
        self._stored = 0

    # -- clock and log

    @property
    def clock(self) -> int:
        """Virtual milliseconds."""
        return self.ticks * self.config.ms_per_tick

    def log_event(
        self,
        type: str,
        pid: Optional[int] = None,
        filename: Optional[str] = None,
        cause: Optional[str] = None,
        detail: Any = None,
    ) -> None:
        self.events.append(Event(type, self.ticks, pid, filename, cause, detail))

    def drain_events(self) -> List[Event]:
        """Hand over and forget the events logged so far."""
        out, self.events = self.events, []
        return out

    # -- Host

    def clock_ms(self) -> int:
        return self.clock

    def is_executing(self, name: str) -> bool:
        return self._running[name] > 0

    def read_file(self, name: str) -> Optional[bytes]:
        f = self.files.get(name)
        return f.data if f is not None else None

    def write_file(self, name: str, data: bytes, writer: ProcessState) -> bool:
        f = self.files.get(name)
        if f is None or self.is_executing(name):
            return False
        flips = _flipped_bits(f.data, data)
        f.data = bytes(data)
        if flips:
            self.log_event("mutation", writer.pid, name, "write", flips)
        return True

    def copy_file(self, src: str, dst: str, caller: ProcessState) -> bool:
        source = self.files.get(src)
        if source is None or src == dst or self.is_executing(dst):
            return False
        created = dst not in self.files
        self._store(dst, VirtualFile(source.data, self.clock, src, source.generation + 1))
        if created:
            self.offspring_files.append(dst)
            self.log_event("file", caller.pid, dst, "copy", src)
        else:
            self.log_event("overwrite", caller.pid, dst, "copy", src)
        return True

    def create_process(self, name: str, caller: ProcessState) -> bool:
        if name not in self.files:
            return False
        if self.spawn_enabled:
            self.pending.append(_Spawn(self.ticks + 1, name, caller.pid))
        else:
            self.spawn_requests.append(name)
        return True

    # -- files and processes

    def add_file(self, name: str, data: Union[bytes, Genome], cause: str = "bootstrap") -> None:
        raw = data.to_bytes() if isinstance(data, Genome) else bytes(data)
        if name not in self.files:
            self.log_event("file", None, name, cause)
        self._store(name, VirtualFile(raw, self.clock))

    def _store(self, name: str, f: VirtualFile) -> None:
        self.files[name] = f
        heapq.heappush(self._ages, (f.created_at, name, self._stored, f))
        self._stored += 1

    def due_corpses(self) -> List[str]:
        """Files past the corpse age limit that no process runs, oldest first.

        Only entries that have expired are inspected.
        """
        limit = self.config.corpse_age_limit
        now = self.clock
        while self._ages and (now - self._ages[0][0]) / 1000 > limit:
            self._overdue.append(heapq.heappop(self._ages))
        self._overdue = [e for e in self._overdue if self.files.get(e[1]) is e[3]]
        return [e[1] for e in self._overdue if not self.is_executing(e[1])]

    def delete_file(self, name: str, cause: str) -> bool:
        if name not in self.files or self.is_executing(name):
            return False
        del self.files[name]
        self.log_event("delete", None, name, cause)
        log.info("deleted %s (%s)", name, cause)
        return True

    def _adopt(self, state: ProcessState, name: str, parent: Optional[int]) -> ProcessState:
        state.pid = self.next_pid
        self.next_pid += 1
        state.filename = name
        state.birth_time = self.clock
        state.wake_at = 0
        self.processes.append(state)
        self._running[name] += 1
        self.log_event("spawn", state.pid, name, None, parent)
        return state

    def start_process(self, name: str, parent: Optional[int] = None) -> Optional[ProcessState]:
        """Translate and load the named file as a new process.

        A missing file or a genome that fails to translate is logged as a
        death and yields None.
        """
        f = self.files.get(name)
        if f is None:
            self.log_event("death", None, name, "missing", parent)
            return None
        try:
            program = translate(f.data)
        except GenomeError as err:
            self.log_event("death", None, name, "unviable", str(err))
            log.debug("unviable %s: %s", name, err)
            return None
        return self._adopt(load(program.code, program.data, name), name, parent)

    def start_image(self, program: MicroProgram, name: str) -> ProcessState:
        """Load an already translated image as a process owning `name`."""
        return self._adopt(load(program.code, program.data, name), name, None)

    def _remove(self, proc: ProcessState) -> None:
        self.processes.remove(proc)
        self._running[proc.filename] -= 1
        if self._running[proc.filename] <= 0:
            del self._running[proc.filename]

    def kill(self, proc: ProcessState, cause: str) -> None:
        self._remove(proc)
        self.log_event("death", proc.pid, proc.filename, cause)
        log.info("killed pid %d %s (%s)", proc.pid, proc.filename, cause)

    def may_kill(self) -> bool:
        """False when the extinction floor protects the last live process."""
        return not self.config.keep_last_process or len(self.processes) > 1

    # -- scheduling

    def tick(self) -> World:
        """Advance one tick: start due spawns, give every awake process one
        quantum, then run the guard sweep."""
        self.ticks += 1
        due = [s for s in self.pending if s.due <= self.ticks]
        if due:
            self.pending = [s for s in self.pending if s.due > self.ticks]
            for s in due:
                self.start_process(s.name, s.parent)
        for proc in list(self.processes):
            if proc.wake_at > self.clock:
                continue
            status = run(proc, self.config.quantum, self)
            if status is Status.EXITED:
                self._remove(proc)
                self.log_event("exit", proc.pid, proc.filename)
            elif status is Status.FAULTED:
                self._remove(proc)
                cause = proc.fault.kind.name if proc.fault else "fault"
                self.log_event("death", proc.pid, proc.filename, cause)
        self.sweep()
        return self

    def sweep(self) -> World:
        """Guards in fixed order: multiple instances, clones, reapers."""
        guard_multiple_instances(self)
        guard_clones(self)
        guard_reapers(self)
        return self

    def run_ticks(self, count: int) -> World:
        for _ in range(count):
            self.tick()
        return self

    def generation_of(self, name: str) -> int:
        f = self.files.get(name)
        return f.generation if f is not None else -1

    def digest(self) -> str:
        """Hash of the complete world state, for determinism checks."""
        h = hashlib.sha256()
        h.update(json.dumps([self.ticks, self.next_pid, self.rng.bit_generator.state]).encode())
        for name in sorted(self.files):
            f = self.files[name]
            h.update(json.dumps([name, f.created_at, f.parent, f.generation]).encode())
            h.update(f.data)
        for proc in self.processes:
            h.update(json.dumps(_process_record(proc)).encode())
            h.update(proc.memory.tobytes())
        h.update(json.dumps([asdict(s) for s in self.pending]).encode())
        return h.hexdigest()


def _flipped_bits(old: bytes, new: bytes) -> List[List[int]]:
    a = np.frombuffer(old, dtype=np.uint8)
    b = np.frombuffer(new, dtype=np.uint8)
    if len(a) != len(b):
        return []
    flips = []
    for offset in np.flatnonzero(a != b):
        diff = int(a[offset] ^ b[offset])
        flips.extend([int(offset), bit] for bit in range(8) if diff >> bit & 1)
    return flips


def _report(world: World, policy: str, removed: int, filename: Optional[str] = None) -> None:
    if removed:
        world.log_event("guard", filename=filename, cause=policy, detail=removed)


def guard_multiple_instances(world: World) -> World:
    """Kill every process of a file that already runs, keeping the eldest."""
    groups: Dict[str, List[ProcessState]] = {}
    for proc in world.processes:
        groups.setdefault(proc.filename, []).append(proc)
    for name, procs in groups.items():
        if len(procs) < 2:
            continue
        eldest = min(procs, key=lambda p: (p.birth_time, p.pid))
        for proc in procs:
            if proc is not eldest:
                world.kill(proc, "multiple-instances")
        _report(world, "multiple-instances", len(procs) - 1, name)
    return world


def guard_clones(world: World) -> World:
    """Each process is picked with clone_check_probability; running files that
    are byte-identical to a picked one lose their process and are deleted."""
    p = world.config.clone_check_probability
    if p <= 0:
        return world
    for proc in list(world.processes):
        if proc not in world.processes:
            continue
        if world.rng.random() >= p:
            continue
        own = world.files.get(proc.filename)
        if own is None:
            continue
        removed = 0
        for other in list(world.processes):
            if other.filename == proc.filename:
                continue
            f = world.files.get(other.filename)
            if f is not None and f.data == own.data and world.may_kill():
                world.kill(other, "clone")
                world.delete_file(other.filename, "clone")
                removed += 1
        _report(world, "clone", removed, proc.filename)
    return world


def guard_reapers(world: World) -> World:
    """Delete corpse files, kill old and runaway processes, cull overflow."""
    cfg = world.config
    now = world.clock
    corpses = 0
    for name in world.due_corpses():
        corpses += world.delete_file(name, "corpse")
    _report(world, "corpse", corpses)
    reaped: Counter[str] = Counter()
    for proc in list(world.processes):
        if not world.may_kill():
            break
        if (now - proc.birth_time) / 1000 > cfg.process_age_limit:
            world.kill(proc, "age")
            reaped["age"] += 1
        elif proc.instructions_executed >= cfg.instruction_budget:
            world.kill(proc, "endless-loop")
            reaped["endless-loop"] += 1
    for policy, count in reaped.items():
        _report(world, policy, count)
    n = len(world.processes)
    if n > cfg.max_processes:
        count = max(int(n * cfg.overflow_kill_fraction), n - cfg.max_processes)
        if cfg.keep_last_process:
            count = min(count, n - 1)
        victims = sorted(world.rng.choice(n, size=count, replace=False).tolist())
        doomed = [world.processes[i] for i in victims]
        for proc in doomed:
            world.kill(proc, "overflow")
        _report(world, "overflow", count)
    return world


def bootstrap(
    world: World, genome: Union[Genome, bytes], count: int = 10, stem: str = "ancestor"
) -> List[str]:
    """Write `count` copies of `genome` and start them one tick apart, so their
    tick-count reseeds differ."""
    names = []
    for i in range(count):
        name = f"{stem}{i:02d}.rpw"
        world.add_file(name, genome)
        world.pending.append(_Spawn(world.ticks + 1 + i, name, None))
        names.append(name)
    return names


# -- snapshots

_SAFE = re.compile(r"[^A-Za-z0-9._-]")


def safe_name(name: str) -> str:
    """Filesystem-safe rendition of a virtual filename."""
    cleaned = _SAFE.sub("_", name).lstrip(".")
    return cleaned or "_"


def _process_record(proc: ProcessState) -> Dict[str, Any]:
    return {
        "pid": proc.pid,
        "filename": proc.filename,
        "birth_time": proc.birth_time,
        "wake_at": proc.wake_at,
        "regs": proc.regs.tolist(),
        "ctl": proc.ctl.tolist(),
        "handles": {str(k): v for k, v in proc.handles.items()},
        "mappings": {str(k): v for k, v in proc.mappings.items()},
        "view": proc.view,
        "view_size": proc.view_size,
        "next_handle": proc.next_handle,
        "fault": [proc.fault.kind.value, proc.fault.ip] if proc.fault else None,
        "syscalls": {str(int(k)): v for k, v in sorted(proc.syscalls.items())},
    }


def _process_from(record: Dict[str, Any], memory: Bytes) -> ProcessState:
    fault = record["fault"]
    ctl = np.array(record["ctl"], dtype=np.int64)
    if len(ctl) != CONTROL_SIZE:
        raise SnapshotError(f"process {record['pid']}: bad control block")
    return ProcessState(
        memory=memory,
        regs=np.array(record["regs"], dtype=np.int64),
        ctl=ctl,
        pid=record["pid"],
        filename=record["filename"],
        birth_time=record["birth_time"],
        wake_at=record["wake_at"],
        handles={int(k): v for k, v in record["handles"].items()},
        mappings={int(k): v for k, v in record["mappings"].items()},
        view=record["view"],
        view_size=record["view_size"],
        next_handle=record["next_handle"],
        fault=Fault(FaultKind(fault[0]), fault[1]) if fault else None,
        syscalls={Syscall(int(k)): v for k, v in record["syscalls"].items()},
    )


def snapshot(world: World, path: Union[str, Path]) -> Path:
    """Write the complete world to directory `path`.

    Layout: `manifest.json`, `guards.cfg`, `files/NNNNN.rpw`, `memory/<pid>.bin` and
    `events.jsonl`. `restore` rebuilds an identical world from it.
    """
    root = Path(path)
    (root / "files").mkdir(parents=True, exist_ok=True)
    (root / "memory").mkdir(exist_ok=True)
    files = []
    for i, (name, f) in enumerate(sorted(world.files.items())):
        rel = f"files/{i:05d}.rpw"
        (root / rel).write_bytes(f.data)
        files.append(
            {
                "name": name,
                "path": rel,
                "created_at": f.created_at,
                "parent": f.parent,
                "generation": f.generation,
            }
        )
    processes = []
    for proc in world.processes:
        rel = f"memory/{proc.pid}.bin"
        (root / rel).write_bytes(proc.memory.tobytes())
        processes.append({**_process_record(proc), "memory": rel})
    manifest = {
        "format": SNAPSHOT_FORMAT,
        "seed": world.seed,
        "ticks": world.ticks,
        "next_pid": world.next_pid,
        "rng": world.rng.bit_generator.state,
        "spawn_enabled": world.spawn_enabled,
        "spawn_requests": world.spawn_requests,
        "offspring_files": world.offspring_files,
        "pending": [asdict(s) for s in world.pending],
        "files": files,
        "processes": processes,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    (root / "guards.cfg").write_text(world.config.to_text())
    with open(root / "events.jsonl", "w") as out:
        for event in world.events:
            out.write(event.to_json() + "\n")
    log.info("snapshot of tick %d written to %s", world.ticks, root)
    return root


def restore(path: Union[str, Path]) -> World:
    """Rebuild a world written by `snapshot`.

    Raises
    ------
        SnapshotError : if the snapshot is missing, truncated or inconsistent.

    """
    root = Path(path)
    try:
        manifest = json.loads((root / "manifest.json").read_text())
        if manifest.get("format") != SNAPSHOT_FORMAT:
            raise SnapshotError(f"unsupported snapshot format {manifest.get('format')!r}")
        world = World(
            GuardConfig.from_file(root / "guards.cfg"), manifest["seed"], manifest["spawn_enabled"]
        )
        world.rng.bit_generator.state = manifest["rng"]
        world.ticks = manifest["ticks"]
        world.next_pid = manifest["next_pid"]
        world.spawn_requests = list(manifest["spawn_requests"])
        world.offspring_files = list(manifest["offspring_files"])
        world.pending = [_Spawn(**s) for s in manifest["pending"]]
        for entry in manifest["files"]:
            f = VirtualFile(
                (root / entry["path"]).read_bytes(),
                entry["created_at"],
                entry["parent"],
                entry["generation"],
            )
            world._store(entry["name"], f)
        for record in manifest["processes"]:
            raw = (root / record["memory"]).read_bytes()
            if len(raw) != MEMORY_SIZE:
                raise SnapshotError(f"process {record['pid']}: truncated memory image")
            memory = np.frombuffer(raw, dtype=np.uint8).copy()
            proc = _process_from(record, memory)
            world.processes.append(proc)
            world._running[proc.filename] += 1
        with open(root / "events.jsonl") as lines:
            for line in lines:
                world.events.append(Event(**json.loads(line)))
    except SnapshotError:
        raise
    except (ConfigError, OSError, KeyError, TypeError, ValueError) as err:
        raise SnapshotError(f"cannot restore snapshot {root}: {err}") from None
    return world


def export_population(world: World, path: Union[str, Path]) -> Dict[str, str]:
    """Write every file as `<safe name>.rpw` plus a manifest of original names."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    written: Dict[str, str] = {}
    for name in sorted(world.files):
        stem = safe_name(name)
        if not stem.endswith(".rpw"):
            stem += ".rpw"
        target = stem
        n = 1
        while target in written:
            target = f"{stem[:-4]}~{n}.rpw"
            n += 1
        (root / target).write_bytes(world.files[name].data)
        written[target] = name
    (root / "manifest.json").write_text(json.dumps(written, indent=1, sort_keys=True))
    return written


def export_sample(
    world: World, path: Union[str, Path], fraction: Optional[float] = None
) -> List[str]:
    """Copy a random `fraction` of the files out of the world.

    Drawn from a generator derived from (seed, tick) so the world's own
    generator, and with it the trajectory, is untouched.
    """
    fraction = world.config.sample_fraction if fraction is None else fraction
    names = sorted(world.files)
    if not names or fraction <= 0:
        return []
    count = min(len(names), max(1, round(len(names) * fraction)))
    rng = np.random.default_rng([world.seed, world.ticks])
    picked = sorted(names[i] for i in rng.choice(len(names), size=count, replace=False))
    sample = World(world.config, world.seed)
    for name in picked:
        sample.files[name] = world.files[name]
    export_population(sample, path)
    log.info("sampled %d of %d files at tick %d", count, len(names), world.ticks)
    return picked


# -- single organism runs


@dataclass
class RunReport:
    """Outcome of running one organism alone."""

    outcome: str
    steps: int
    offspring: List[str] = field(default_factory=list)
    spawn_requests: List[str] = field(default_factory=list)
    syscalls: Dict[str, int] = field(default_factory=dict)
    fault: Optional[Fault] = None
    state: Optional[ProcessState] = None
    world: Optional[World] = None

    @property
    def viable(self) -> bool:
        return len(self.offspring) > 0


def run_single(
    genome: Union[Genome, bytes],
    budget: int,
    config: Optional[GuardConfig] = None,
    image: Optional[MicroProgram] = None,
    stop_at_offspring: bool = False,
    name: str = "organism.rpw",
    seed: int = 0,
) -> RunReport:
    """Run one organism in an ephemeral world without guards.

    Spawn requests are recorded, not started. When `image` is given it is
    executed in place of the genome's own translation; the genome still backs
    the organism's file.

    Returns
    -------
        RunReport whose outcome is `exited`, `budget`, `unviable` or a fault kind.

    """
    world = World(config, seed, spawn=False)
    world.add_file(name, genome)
    if image is not None:
        proc: Optional[ProcessState] = world.start_image(image, name)
    else:
        proc = world.start_process(name)
    if proc is None:
        return RunReport("unviable", 0, world=world)
    quantum = world.config.quantum
    ms = world.config.ms_per_tick
    status = Status.BUDGET
    while proc.instructions_executed < budget:
        world.ticks += 1
        if proc.wake_at > world.clock:
            world.ticks = max(world.ticks, math.ceil(proc.wake_at / ms))
        status = run(proc, min(quantum, budget - proc.instructions_executed), world)
        if status in (Status.EXITED, Status.FAULTED):
            break
        if stop_at_offspring and world.offspring_files:
            break
    if status is Status.EXITED:
        outcome = "exited"
    elif status is Status.FAULTED and proc.fault is not None:
        outcome = proc.fault.kind.name
    else:
        outcome = "budget"
    return RunReport(
        outcome=outcome,
        steps=proc.instructions_executed,
        offspring=list(world.offspring_files),
        spawn_requests=list(world.spawn_requests),
        syscalls={Syscall(k).name: v for k, v in sorted(proc.syscalls.items())},
        fault=proc.fault,
        state=proc,
        world=world,
    )
