"""Micro-op interpreter: a 64 KB sandbox with a syscall layer against a virtual world."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Callable, Dict, Iterator, List, Optional, Tuple, Union

import numba
import numpy as np
import numpy.typing as npt
from typing_extensions import TypeAlias

from .chemistry import (
    COMMAND_LINE,
    CODE_LIMIT,
    DATA_LIMIT,
    DATA_OFFSET,
    MAP_WINDOW,
    MAP_WINDOW_SIZE,
    MASK32,
    MEMORY_SIZE,
    SENTINEL,
    STACK_FLOOR,
    STACK_TOP,
    SYSCALL_ARGS,
    Bytes,
    Op,
    Reg,
    Syscall,
    decode_one,
)

__all__ = [
    "LoadError",
    "Status",
    "FaultKind",
    "Fault",
    "ProcessState",
    "Host",
    "Registers",
    "Control",
    "load",
    "step",
    "run",
    "syscall",
    "trace",
    "format_registers",
]

log = logging.getLogger(__name__)

Registers: TypeAlias = npt.NDArray[np.int64]
Control: TypeAlias = npt.NDArray[np.int64]

# Control block slots.
IP, SP, ZF, EXECUTED, SYSNUM, FAULT = range(6)
CONTROL_SIZE = 6

NAME_LIMIT = 64


class LoadError(RuntimeError):
    """Exception raised when a program image or data segment does not fit its region."""

    pass


class Status(IntEnum):
    """Outcome of stepping or running a process."""

    RUNNING = 0
    EXITED = 1
    FAULTED = 2
    BUDGET = 3
    YIELDED = 4
    # Internal: the kernel stopped at a SYSCALL for the host to service.
    SYSCALL = 5


class FaultKind(IntEnum):
    """Why a process was terminated by the VM."""

    NONE = 0
    InvalidOpcode = 1
    MemoryOutOfBounds = 2
    DivideByZero = 3
    StackOverflow = 4
    StackUnderflow = 5
    BudgetExhausted = 6
    BadSyscallArgs = 7


@dataclass(frozen=True)
class Fault:
    kind: FaultKind
    ip: int

    def __str__(self) -> str:
        return f"{self.kind.name}@{self.ip:04x}"


# Kernel constants are plain ints so numba freezes them at compile time.
_NOP = int(Op.NOP)
_MOV = int(Op.MOV)
_MOVI = int(Op.MOVI)
_ADDI = int(Op.ADDI)
_SUBI = int(Op.SUBI)
_ADD = int(Op.ADD)
_SUB = int(Op.SUB)
_AND = int(Op.AND)
_XOR = int(Op.XOR)
_SHL = int(Op.SHL)
_SHR = int(Op.SHR)
_MUL = int(Op.MUL)
_DIV = int(Op.DIV)
_PUSH = int(Op.PUSH)
_POP = int(Op.POP)
_STOREB = int(Op.STOREB)
_STORED = int(Op.STORED)
_LOADD = int(Op.LOADD)
_JZ = int(Op.JZ)
_JNZ = int(Op.JNZ)
_JMP = int(Op.JMP)
_RET = int(Op.RET)
_GETIP = int(Op.GETIP)
_SYSCALL = int(Op.SYSCALL)
_LAST_SYSCALL = int(Syscall.Sleep)
_LAST_REG = int(Reg.BA2)

_EXITED = int(Status.EXITED)
_FAULTED = int(Status.FAULTED)
_BUDGET = int(Status.BUDGET)
_STOPPED_AT_SYSCALL = int(Status.SYSCALL)

_F_INVALID = int(FaultKind.InvalidOpcode)
_F_MEMORY = int(FaultKind.MemoryOutOfBounds)
_F_DIVIDE = int(FaultKind.DivideByZero)
_F_OVERFLOW = int(FaultKind.StackOverflow)
_F_UNDERFLOW = int(FaultKind.StackUnderflow)

_RA = int(Reg.RegA)
_RD = int(Reg.RegD)
_BC1 = int(Reg.BC1)
_BC2 = int(Reg.BC2)
_BA1 = int(Reg.BA1)
_BA2 = int(Reg.BA2)


@numba.njit(cache=True)
def _rd32(memory: Bytes, addr: int) -> int:
    return (
        np.int64(memory[addr])
        | (np.int64(memory[addr + 1]) << 8)
        | (np.int64(memory[addr + 2]) << 16)
        | (np.int64(memory[addr + 3]) << 24)
    )


@numba.njit(cache=True)
def _wr32(memory: Bytes, addr: int, value: int) -> None:
    memory[addr] = np.uint8(value & 0xFF)
    memory[addr + 1] = np.uint8((value >> 8) & 0xFF)
    memory[addr + 2] = np.uint8((value >> 16) & 0xFF)
    memory[addr + 3] = np.uint8((value >> 24) & 0xFF)


@numba.njit(cache=True)
def _execute(memory: Bytes, regs: Registers, ctl: Control, budget: int) -> int:
    """Run micro-ops until `budget` charged ops are spent or the process stops.

    NOPs advance ip without being charged. Returns a `Status` code; a fault
    leaves ip on the faulting op and its kind in ctl[FAULT].
    """
    ip = ctl[0]
    sp = ctl[1]
    zf = ctl[2]
    spent = 0
    status = _BUDGET
    fault = 0
    while spent < budget:
        if ip < 0 or ip >= MEMORY_SIZE:
            fault = _F_MEMORY
            break
        code = np.int64(memory[ip])
        if code == _NOP:
            ip += 1
            continue
        if code == _MOV:
            if ip + 1 >= MEMORY_SIZE:
                fault = _F_MEMORY
                break
            pair = np.int64(memory[ip + 1])
            dst = pair >> 4
            src = pair & 0xF
            if dst > _LAST_REG or src > _LAST_REG:
                fault = _F_INVALID
                break
            regs[dst] = regs[src]
            ip += 2
        elif code == _MOVI or code == _ADDI or code == _SUBI:
            if ip + 4 >= MEMORY_SIZE:
                fault = _F_MEMORY
                break
            imm = _rd32(memory, ip + 1)
            if code == _MOVI:
                regs[_BC1] = imm
            else:
                if code == _ADDI:
                    value = (regs[_BC1] + imm) & MASK32
                else:
                    value = (regs[_BC1] - imm) & MASK32
                regs[_BC1] = value
                zf = 1 if value == 0 else 0
            ip += 5
        elif code >= _ADD and code <= _SHR:
            a = regs[_BC1]
            b = regs[_BC2]
            if code == _ADD:
                value = (a + b) & MASK32
            elif code == _SUB:
                value = (a - b) & MASK32
            elif code == _AND:
                value = a & b
            elif code == _XOR:
                value = a ^ b
            elif code == _SHL:
                value = (a << (b & 31)) & MASK32
            else:
                value = a >> (b & 31)
            regs[_BC1] = value
            zf = 1 if value == 0 else 0
            ip += 1
        elif code == _MUL:
            # 64-bit product split into 16-bit halves to stay inside int64.
            a = regs[_RA]
            b = regs[_BC1]
            lo = (a & 0xFFFF) * b
            hi = (a >> 16) * b
            mid = ((hi & 0xFFFF) << 16) + lo
            regs[_RA] = mid & MASK32
            regs[_RD] = ((hi >> 16) + (mid >> 32)) & MASK32
            ip += 1
        elif code == _DIV:
            b = regs[_BC1]
            d = regs[_RD]
            if b == 0 or d >= b:
                fault = _F_DIVIDE
                break
            a = regs[_RA]
            n1 = (d << 16) | (a >> 16)
            q1 = n1 // b
            r = n1 % b
            n2 = (r << 16) | (a & 0xFFFF)
            q2 = n2 // b
            regs[_RA] = (q1 << 16) | q2
            regs[_RD] = n2 % b
            ip += 1
        elif code == _PUSH:
            if sp - 4 < STACK_FLOOR:
                fault = _F_OVERFLOW
                break
            sp -= 4
            _wr32(memory, sp, regs[_BC1])
            ip += 1
        elif code == _POP or code == _RET:
            if sp + 4 > MEMORY_SIZE:
                fault = _F_UNDERFLOW
                break
            value = _rd32(memory, sp)
            sp += 4
            if code == _POP:
                regs[_BC1] = value
                ip += 1
            elif value == SENTINEL:
                ip += 1
                spent += 1
                status = _EXITED
                break
            else:
                ip = value
        elif code == _STOREB:
            addr = regs[_BA1]
            if addr >= MEMORY_SIZE:
                fault = _F_MEMORY
                break
            memory[addr] = np.uint8(regs[_BC1] & 0xFF)
            ip += 1
        elif code == _STORED:
            addr = regs[_BA1]
            if addr + 3 >= MEMORY_SIZE:
                fault = _F_MEMORY
                break
            _wr32(memory, addr, regs[_BC1])
            ip += 1
        elif code == _LOADD:
            addr = regs[_BC1]
            if addr + 3 >= MEMORY_SIZE:
                fault = _F_MEMORY
                break
            regs[_BC1] = _rd32(memory, addr)
            ip += 1
        elif code == _JZ or code == _JNZ:
            if ip + 1 >= MEMORY_SIZE:
                fault = _F_MEMORY
                break
            rel = np.int64(memory[ip + 1])
            if rel >= 0x80:
                rel -= 0x100
            ip += 2
            if (code == _JZ and zf == 1) or (code == _JNZ and zf == 0):
                ip += rel
        elif code == _JMP:
            ip = regs[_BA2]
        elif code == _GETIP:
            regs[_BC1] = ip + 1
            ip += 1
        elif code == _SYSCALL:
            if ip + 1 >= MEMORY_SIZE:
                fault = _F_MEMORY
                break
            number = np.int64(memory[ip + 1])
            if number > _LAST_SYSCALL:
                fault = _F_INVALID
                break
            ctl[4] = number
            ip += 2
            spent += 1
            status = _STOPPED_AT_SYSCALL
            break
        else:
            fault = _F_INVALID
            break
        spent += 1
    if fault != 0:
        status = _FAULTED
        ctl[5] = fault
    ctl[0] = ip
    ctl[1] = sp
    ctl[2] = zf
    ctl[3] += spent
    return status


@dataclass(eq=False)
class ProcessState:
    """A loaded organism: memory, registers and the host-side handle table."""

    memory: Bytes
    regs: Registers
    ctl: Control
    pid: int = 0
    filename: str = ""
    birth_time: int = 0
    wake_at: int = 0
    handles: Dict[int, str] = field(default_factory=dict)
    mappings: Dict[int, str] = field(default_factory=dict)
    view: Optional[str] = None
    view_size: int = 0
    next_handle: int = 1
    fault: Optional[Fault] = None
    syscalls: Dict[Syscall, int] = field(default_factory=dict)

    @property
    def ip(self) -> int:
        return int(self.ctl[IP])

    @property
    def sp(self) -> int:
        return int(self.ctl[SP])

    @property
    def zf(self) -> int:
        return int(self.ctl[ZF])

    @property
    def instructions_executed(self) -> int:
        return int(self.ctl[EXECUTED])

    def reg(self, r: Reg) -> int:
        """Value of register `r`."""
        return int(self.regs[r])

    def set_reg(self, r: Reg, value: int) -> None:
        self.regs[r] = value & MASK32

    def read32(self, addr: int) -> int:
        return int.from_bytes(bytes(self.memory[addr : addr + 4]), "little")

    def write32(self, addr: int, value: int) -> None:
        self.memory[addr : addr + 4] = np.frombuffer(
            (value & MASK32).to_bytes(4, "little"), dtype=np.uint8
        )

    def new_handle(self) -> int:
        h = self.next_handle
        self.next_handle += 1
        return h

    def copy(self) -> ProcessState:
        """Deep copy, sharing nothing mutable with the original."""
        return ProcessState(
            memory=self.memory.copy(),
            regs=self.regs.copy(),
            ctl=self.ctl.copy(),
            pid=self.pid,
            filename=self.filename,
            birth_time=self.birth_time,
            wake_at=self.wake_at,
            handles=dict(self.handles),
            mappings=dict(self.mappings),
            view=self.view,
            view_size=self.view_size,
            next_handle=self.next_handle,
            fault=self.fault,
            syscalls=dict(self.syscalls),
        )


class Host:
    """Environment a process runs against.

    The bare host is an empty world: the clock stands still and every file
    or process call fails. `metaevo.world.World` is the real implementation.
    """

    def clock_ms(self) -> int:
        return 0

    def read_file(self, name: str) -> Optional[bytes]:
        return None

    def write_file(self, name: str, data: bytes, writer: ProcessState) -> bool:
        return False

    def copy_file(self, src: str, dst: str, caller: ProcessState) -> bool:
        return False

    def create_process(self, name: str, caller: ProcessState) -> bool:
        return False


def load(
    program_image: Union[bytes, Bytes],
    data_segment: Union[bytes, Bytes] = b"",
    filename: str = "",
) -> ProcessState:
    """Place a translated program and its data segment in a fresh 64 KB memory.

    Args:
    ----
        program_image : micro-code, loaded at address 0
        data_segment : data, loaded at DataOffset (0x5000)
        filename : owning file, written NUL-terminated at 0x5F00 for GetCommandLine

    Returns:
    -------
        Runnable state with ip=0 and the sentinel return address on the stack.

    Raises:
    ------
        LoadError : if the image exceeds 0x5000 bytes or the data 0x1000 bytes.

    """
    program = np.asarray(bytearray(program_image), dtype=np.uint8)
    data = np.asarray(bytearray(data_segment), dtype=np.uint8)
    if len(program) > CODE_LIMIT:
        raise LoadError(f"Program image of {len(program)} bytes exceeds 0x{CODE_LIMIT:x}.")
    if len(data) > DATA_LIMIT:
        raise LoadError(f"Data segment of {len(data)} bytes exceeds 0x{DATA_LIMIT:x}.")
    memory = np.zeros(MEMORY_SIZE, dtype=np.uint8)
    if len(program) == 0:
        memory[0] = Op.RET
    memory[: len(program)] = program
    memory[DATA_OFFSET : DATA_OFFSET + len(data)] = data
    name = filename.encode("latin-1", errors="replace")[: NAME_LIMIT - 1]
    memory[COMMAND_LINE : COMMAND_LINE + len(name)] = np.frombuffer(name, dtype=np.uint8)
    regs = np.zeros(len(Reg), dtype=np.int64)
    ctl = np.zeros(CONTROL_SIZE, dtype=np.int64)
    ctl[SP] = STACK_TOP
    state = ProcessState(memory=memory, regs=regs, ctl=ctl, filename=filename)
    state.write32(STACK_TOP, SENTINEL)
    return state


def _fault(state: ProcessState, kind: FaultKind) -> Status:
    state.fault = Fault(kind, state.ip)
    state.ctl[FAULT] = kind
    log.debug("pid %d %s faulted: %s", state.pid, state.filename, state.fault)
    return Status.FAULTED


def _read_name(state: ProcessState, addr: int) -> Optional[str]:
    if addr >= MEMORY_SIZE:
        return None
    raw = bytes(state.memory[addr : min(addr + NAME_LIMIT, MEMORY_SIZE)])
    end = raw.find(b"\0")
    if end <= 0:
        return None
    return raw[:end].decode("latin-1")


SyscallHandler = Callable[[ProcessState, Host, List[int]], Tuple[int, Status]]


def _get_tick_count(state: ProcessState, host: Host, args: List[int]) -> Tuple[int, Status]:
    return host.clock_ms(), Status.RUNNING


def _get_command_line(state: ProcessState, host: Host, args: List[int]) -> Tuple[int, Status]:
    return COMMAND_LINE, Status.RUNNING


def _copy_file(state: ProcessState, host: Host, args: List[int]) -> Tuple[int, Status]:
    src, dst = _read_name(state, args[0]), _read_name(state, args[1])
    if src is None or dst is None:
        return 0, Status.RUNNING
    return int(host.copy_file(src, dst, state)), Status.RUNNING


def _create_file(state: ProcessState, host: Host, args: List[int]) -> Tuple[int, Status]:
    name = _read_name(state, args[0])
    if name is None or host.read_file(name) is None:
        return 0, Status.RUNNING
    handle = state.new_handle()
    state.handles[handle] = name
    return handle, Status.RUNNING


def _get_file_size(state: ProcessState, host: Host, args: List[int]) -> Tuple[int, Status]:
    name = state.handles.get(args[0])
    data = host.read_file(name) if name is not None else None
    return (SENTINEL if data is None else len(data)), Status.RUNNING


def _create_file_mapping(
    state: ProcessState, host: Host, args: List[int]
) -> Tuple[int, Status]:
    name = state.handles.get(args[0])
    if name is None:
        return 0, Status.RUNNING
    handle = state.new_handle()
    state.mappings[handle] = name
    return handle, Status.RUNNING


def _map_view_of_file(state: ProcessState, host: Host, args: List[int]) -> Tuple[int, Status]:
    name = state.mappings.get(args[0])
    data = host.read_file(name) if name is not None else None
    if name is None or data is None:
        return 0, Status.RUNNING
    size = min(len(data), MAP_WINDOW_SIZE)
    window = state.memory[MAP_WINDOW : MAP_WINDOW + MAP_WINDOW_SIZE]
    window[:] = 0
    window[:size] = np.frombuffer(data[:size], dtype=np.uint8)
    state.view = name
    state.view_size = size
    return MAP_WINDOW, Status.RUNNING


def _create_process(state: ProcessState, host: Host, args: List[int]) -> Tuple[int, Status]:
    name = _read_name(state, args[0])
    if name is None:
        return 0, Status.RUNNING
    return int(host.create_process(name, state)), Status.RUNNING


def _unmap_view_of_file(
    state: ProcessState, host: Host, args: List[int]
) -> Tuple[int, Status]:
    if args[0] != MAP_WINDOW or state.view is None:
        return 0, Status.RUNNING
    name, size = state.view, state.view_size
    state.view, state.view_size = None, 0
    original = host.read_file(name)
    if original is None:
        return 0, Status.RUNNING
    flushed = bytes(state.memory[MAP_WINDOW : MAP_WINDOW + size]) + original[size:]
    return int(host.write_file(name, flushed, state)), Status.RUNNING


def _close_handle(state: ProcessState, host: Host, args: List[int]) -> Tuple[int, Status]:
    handle = args[0]
    if state.handles.pop(handle, None) is not None:
        return 1, Status.RUNNING
    if state.mappings.pop(handle, None) is not None:
        return 1, Status.RUNNING
    return 0, Status.RUNNING


def _sleep(state: ProcessState, host: Host, args: List[int]) -> Tuple[int, Status]:
    if args[0] == 0:
        return 0, Status.RUNNING
    state.wake_at = host.clock_ms() + args[0]
    return 0, Status.YIELDED


SYSCALLS: Dict[Syscall, SyscallHandler] = {
    Syscall.GetTickCount: _get_tick_count,
    Syscall.GetCommandLine: _get_command_line,
    Syscall.CopyFile: _copy_file,
    Syscall.CreateFile: _create_file,
    Syscall.GetFileSize: _get_file_size,
    Syscall.CreateFileMapping: _create_file_mapping,
    Syscall.MapViewOfFile: _map_view_of_file,
    Syscall.CreateProcess: _create_process,
    Syscall.UnmapViewOfFile: _unmap_view_of_file,
    Syscall.CloseHandle: _close_handle,
    Syscall.Sleep: _sleep,
}


def syscall(state: ProcessState, number: int, host: Host) -> Status:
    """Service syscall `number`: pop its arguments (first argument on top) and
    leave the result in BC1.

    Failures of the call itself return 0 in BC1. Only a stack too shallow for
    the arguments faults, as BadSyscallArgs.
    """
    try:
        call = Syscall(number)
    except ValueError:
        return _fault(state, FaultKind.InvalidOpcode)
    state.syscalls[call] = state.syscalls.get(call, 0) + 1
    count = SYSCALL_ARGS[call]
    sp = state.sp
    if sp + 4 * count > MEMORY_SIZE:
        return _fault(state, FaultKind.BadSyscallArgs)
    args = [state.read32(sp + 4 * i) for i in range(count)]
    state.ctl[SP] = sp + 4 * count
    result, status = SYSCALLS[call](state, host, args)
    state.set_reg(Reg.BC1, result)
    return status


def _finish(state: ProcessState, code: int, host: Host) -> Status:
    status = Status(code)
    if status is Status.FAULTED:
        return _fault(state, FaultKind(int(state.ctl[FAULT])))
    if status is Status.SYSCALL:
        return syscall(state, int(state.ctl[SYSNUM]), host)
    return status


def step(state: ProcessState, host: Optional[Host] = None) -> Status:
    """Execute exactly one micro-op.

    Returns
    -------
        RUNNING, EXITED (RET onto the sentinel), YIELDED (Sleep) or FAULTED.

    """
    host = host if host is not None else Host()
    ip = state.ip
    if 0 <= ip < MEMORY_SIZE and state.memory[ip] == Op.NOP:
        state.ctl[IP] = ip + 1
        return Status.RUNNING
    status = _finish(state, _execute(state.memory, state.regs, state.ctl, 1), host)
    return Status.RUNNING if status is Status.BUDGET else status


def run(state: ProcessState, budget: int, host: Optional[Host] = None) -> Status:
    """Run until the process stops or `budget` charged micro-ops are spent.

    Returns
    -------
        EXITED, FAULTED, YIELDED, or BUDGET when the budget ran out first.

    """
    if budget <= 0:
        raise ValueError("budget must be positive")
    host = host if host is not None else Host()
    start = state.instructions_executed
    while True:
        remaining = budget - (state.instructions_executed - start)
        if remaining <= 0:
            return Status.BUDGET
        code = _execute(state.memory, state.regs, state.ctl, remaining)
        status = _finish(state, code, host)
        if status is not Status.RUNNING:
            return status


def format_registers(state: ProcessState) -> str:
    r = state.regs
    return " ".join(
        f"{reg.name}={int(r[reg]):08x}" for reg in Reg
    ) + f" ZF={state.zf}"


def trace(
    state: ProcessState, budget: int, host: Optional[Host] = None
) -> Iterator[str]:
    """Step the process, yielding one line per micro-op before it executes.

    Line format: `iiii MNEMONIC  RegA=… RegB=… … BA2=… ZF=z`. Stops after the
    process stops or `budget` charged ops, and yields a final status line.
    """
    host = host if host is not None else Host()
    start = state.instructions_executed
    status = Status.RUNNING
    while state.instructions_executed - start < budget:
        ip = state.ip
        if 0 <= ip < MEMORY_SIZE:
            op = decode_one(state.memory[ip : min(ip + 5, MEMORY_SIZE)])
            text = str(op)
        else:
            text = "?"
        yield f"{ip:04x} {text:<24} {format_registers(state)}"
        status = step(state, host)
        if status is not Status.RUNNING:
            break
    else:
        status = Status.BUDGET
    yield f"-- {status.name}" + (f" {state.fault}" if state.fault else "")
